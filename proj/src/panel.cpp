#include "didimp/panel.hpp"

#include <algorithm>
#include <set>

namespace didimp {

namespace {

std::int64_t cell_key(int unit, int time) {
  return (static_cast<std::int64_t>(unit) << 32) ^
         static_cast<std::int64_t>(static_cast<std::uint32_t>(time));
}

}  // namespace

Panel Panel::build(std::vector<Obs> rows,
                   const std::map<std::string, EventDate>& events,
                   std::vector<std::string> covariate_names,
                   std::vector<std::string> group_names,
                   const BuildOptions& opt, PanelWarnings* warn) {
  Panel p;
  p.cov_names_ = std::move(covariate_names);
  p.group_names_ = std::move(group_names);

  const size_t ncov = p.cov_names_.size();
  const size_t ngrp = p.group_names_.size();
  for (const Obs& r : rows) {
    if (events.find(r.unit) == events.end())
      throw Error(errc::inconsistent_event_date,
                  "no event date for unit '" + r.unit + "'");
    if (r.covariates.size() != ncov)
      throw Error(errc::bad_value, "unit '" + r.unit + "' at t=" +
                                       std::to_string(r.time) + ": expected " +
                                       std::to_string(ncov) + " covariates");
    if (r.groups.size() != ngrp)
      throw Error(errc::bad_value, "unit '" + r.unit + "' at t=" +
                                       std::to_string(r.time) +
                                       ": expected " + std::to_string(ngrp) +
                                       " group labels");
  }

  // Drop units with no untreated observation unless asked to keep them.
  if (!opt.keep_always_treated) {
    std::map<std::string, int> untreated_count;
    for (const Obs& r : rows) {
      const EventDate& e = events.at(r.unit);
      bool d = !e.is_never() && r.time >= e.value();
      if (!d) untreated_count[r.unit]++;
      else untreated_count.try_emplace(r.unit, 0);
    }
    std::set<std::string> drop;
    for (const auto& [u, c] : untreated_count)
      if (c == 0) drop.insert(u);
    if (!drop.empty()) {
      std::erase_if(rows, [&](const Obs& r) { return drop.count(r.unit) > 0; });
      if (warn)
        for (const auto& u : drop) warn->dropped_always_treated.push_back(u);
    }
  }
  if (rows.empty()) throw Error(errc::empty_support, "panel has no rows");

  // Stable dense unit index in order of first appearance.
  for (const Obs& r : rows) {
    if (p.unit_index_.emplace(r.unit, (int)p.unit_keys_.size()).second) {
      p.unit_keys_.push_back(r.unit);
      p.event_.push_back(events.at(r.unit));
    }
  }
  std::set<int> period_set;
  for (const Obs& r : rows) period_set.insert(r.time);
  p.periods_.assign(period_set.begin(), period_set.end());
  for (size_t i = 0; i < p.periods_.size(); ++i)
    p.period_index_[p.periods_[i]] = (int)i;

  const int n = (int)rows.size();
  p.unit_.resize(n);
  p.time_.resize(n);
  p.time_index_.resize(n);
  p.y_.resize(n);
  p.w_.resize(n);
  p.treated_.resize(n);
  p.has_dose_ = std::any_of(rows.begin(), rows.end(),
                            [](const Obs& r) { return r.dose.has_value(); });
  if (p.has_dose_) p.dose_.assign(n, 1.0);
  p.cov_.assign(ncov, std::vector<double>(n));
  p.group_.assign(ngrp, std::vector<int>(n));
  p.group_labels_.assign(ngrp, {});
  std::vector<std::unordered_map<std::string, int>> grp_index(ngrp);
  p.unit_obs_.assign(p.unit_keys_.size(), {});

  for (int i = 0; i < n; ++i) {
    const Obs& r = rows[i];
    int u = p.unit_index_.at(r.unit);
    p.unit_[i] = u;
    p.time_[i] = r.time;
    p.time_index_[i] = p.period_index_.at(r.time);
    p.y_[i] = r.outcome;
    p.w_[i] = r.weight;
    if (p.has_dose_ && r.dose) p.dose_[i] = *r.dose;
    for (size_t k = 0; k < ncov; ++k) p.cov_[k][i] = r.covariates[k];
    for (size_t g = 0; g < ngrp; ++g) {
      auto [it, fresh] =
          grp_index[g].emplace(r.groups[g], (int)p.group_labels_[g].size());
      if (fresh) p.group_labels_[g].push_back(r.groups[g]);
      p.group_[g][i] = it->second;
    }
    if (!p.cell_.emplace(cell_key(u, r.time), i).second)
      throw Error(errc::duplicate_observation,
                  "duplicate observation for unit '" + r.unit + "' at t=" +
                      std::to_string(r.time));
    p.unit_obs_[u].push_back(i);
    const EventDate& e = p.event_[u];
    bool d = !e.is_never() && r.time >= e.value();
    p.treated_[i] = d ? 1 : 0;
    (d ? p.part_.treated : p.part_.untreated).push_back(i);
  }
  for (auto& v : p.unit_obs_)
    std::sort(v.begin(), v.end(),
              [&](int a, int b) { return p.time_[a] < p.time_[b]; });
  for (int u = 0; u < p.n_units(); ++u) p.cohorts_[p.event_[u]].push_back(u);
  return p;
}

int Panel::covariate_index(const std::string& name) const {
  for (int k = 0; k < n_covariates(); ++k)
    if (cov_names_[k] == name) return k;
  throw Error(errc::missing_column, "no covariate named '" + name + "'");
}

int Panel::group_column_index(const std::string& name) const {
  for (int g = 0; g < n_group_columns(); ++g)
    if (group_names_[g] == name) return g;
  throw Error(errc::missing_column, "no group column named '" + name + "'");
}

std::optional<int> Panel::find_obs(int unit, int time) const {
  auto it = cell_.find(cell_key(unit, time));
  if (it == cell_.end()) return std::nullopt;
  return it->second;
}

std::optional<int> Panel::find_unit(const std::string& key) const {
  auto it = unit_index_.find(key);
  if (it == unit_index_.end()) return std::nullopt;
  return it->second;
}

std::optional<int> Panel::horizon_at(const std::string& unit, int time) const {
  auto u = find_unit(unit);
  if (!u) throw Error(errc::unknown_observation, "unknown unit '" + unit + "'");
  auto obs = find_obs(*u, time);
  if (!obs)
    throw Error(errc::unknown_observation,
                "unit '" + unit + "' not observed at t=" + std::to_string(time));
  return horizon(*obs);
}

}  // namespace didimp
