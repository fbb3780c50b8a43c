#ifndef DIDIMP_PANEL_HPP
#define DIDIMP_PANEL_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "didimp/errors.hpp"

namespace didimp {

// Adoption date of a unit. Finite dates are calendar periods; never() marks
// units that stay untreated for the whole sample and sorts after all finite
// dates.
class EventDate {
 public:
  EventDate() = default;  // never-treated
  static EventDate finite(int t) { return EventDate(t); }
  static EventDate never() { return EventDate(); }

  bool is_never() const { return !e_.has_value(); }
  int value() const {
    if (!e_) throw std::logic_error("EventDate::value on never-treated");
    return *e_;
  }

  friend bool operator==(const EventDate& a, const EventDate& b) {
    return a.e_ == b.e_;
  }
  friend bool operator<(const EventDate& a, const EventDate& b) {
    if (a.is_never()) return false;
    if (b.is_never()) return true;
    return a.value() < b.value();
  }
  std::string str() const { return e_ ? std::to_string(*e_) : "never"; }

 private:
  explicit EventDate(int t) : e_(t) {}
  std::optional<int> e_;
};

// One input row prior to indexing. Used by Panel::build and the CSV loader.
struct Obs {
  std::string unit;
  int time = 0;
  double outcome = 0.0;
  double weight = 1.0;
  std::vector<double> covariates;
  std::optional<double> dose;
  std::vector<std::string> groups;
};

struct BuildOptions {
  // Units with no untreated observation carry no information about the
  // untreated outcome; by default they are dropped with a warning.
  bool keep_always_treated = false;
};

struct PanelWarnings {
  std::vector<std::string> dropped_always_treated;
  int dropped_missing_outcome = 0;
  std::vector<std::string> messages;
};

// Observation indices of the treated/untreated split.
struct Partition {
  std::vector<int> untreated;  // D_it = 0
  std::vector<int> treated;    // D_it = 1
};

// Immutable indexed panel. Observations keep their input order; units and
// periods get dense indices. Outcomes live in the panel but every estimation
// routine also accepts an external outcome vector of the same length, so a
// fixed design can be reused across simulated responses.
class Panel {
 public:
  static Panel build(std::vector<Obs> rows,
                     const std::map<std::string, EventDate>& events,
                     std::vector<std::string> covariate_names = {},
                     std::vector<std::string> group_names = {},
                     const BuildOptions& opt = {},
                     PanelWarnings* warn = nullptr);

  int n() const { return static_cast<int>(time_.size()); }
  int n_units() const { return static_cast<int>(unit_keys_.size()); }
  int n_periods() const { return static_cast<int>(periods_.size()); }

  int unit_of(int obs) const { return unit_[obs]; }
  int time_of(int obs) const { return time_[obs]; }
  int time_index_of(int obs) const { return time_index_[obs]; }
  double outcome(int obs) const { return y_[obs]; }
  double weight(int obs) const { return w_[obs]; }
  bool has_dose() const { return has_dose_; }
  double dose(int obs) const { return dose_[obs]; }

  const std::string& unit_key(int u) const { return unit_keys_[u]; }
  EventDate event_date(int u) const { return event_[u]; }
  const std::vector<int>& obs_of_unit(int u) const { return unit_obs_[u]; }
  const std::vector<int>& periods() const { return periods_; }
  int period_at(int idx) const { return periods_[idx]; }

  int n_covariates() const { return static_cast<int>(cov_names_.size()); }
  const std::string& covariate_name(int k) const { return cov_names_[k]; }
  int covariate_index(const std::string& name) const;
  double covariate(int obs, int k) const { return cov_[k][obs]; }

  int n_group_columns() const { return static_cast<int>(group_names_.size()); }
  const std::string& group_column_name(int g) const { return group_names_[g]; }
  int group_column_index(const std::string& name) const;
  int group_of(int obs, int g) const { return group_[g][obs]; }
  int n_groups(int g) const { return static_cast<int>(group_labels_[g].size()); }
  const std::string& group_label(int g, int idx) const {
    return group_labels_[g][idx];
  }

  bool treated(int obs) const { return treated_[obs] != 0; }
  // K_it = t - E_i; empty for never-treated units.
  std::optional<int> horizon(int obs) const {
    if (event_[unit_[obs]].is_never()) return std::nullopt;
    return time_[obs] - event_[unit_[obs]].value();
  }
  // Lookup by original keys; throws unknown_observation if the cell is absent.
  std::optional<int> horizon_at(const std::string& unit, int time) const;

  std::optional<int> find_obs(int unit, int time) const;
  std::optional<int> find_unit(const std::string& key) const;

  const Partition& partition() const { return part_; }
  // Units grouped by event date (never-treated last by EventDate ordering).
  const std::map<EventDate, std::vector<int>>& cohorts() const {
    return cohorts_;
  }

  const std::vector<double>& outcomes() const { return y_; }

 private:
  std::vector<int> unit_, time_, time_index_;
  std::vector<double> y_, w_, dose_;
  bool has_dose_ = false;
  std::vector<std::vector<double>> cov_;
  std::vector<std::string> cov_names_;
  std::vector<std::vector<int>> group_;
  std::vector<std::vector<std::string>> group_labels_;
  std::vector<std::string> group_names_;

  std::vector<std::string> unit_keys_;
  std::vector<EventDate> event_;
  std::vector<std::vector<int>> unit_obs_;
  std::vector<int> periods_;
  std::unordered_map<int, int> period_index_;
  std::unordered_map<std::string, int> unit_index_;
  std::unordered_map<std::int64_t, int> cell_;
  std::vector<unsigned char> treated_;
  Partition part_;
  std::map<EventDate, std::vector<int>> cohorts_;
};

}  // namespace didimp

#endif
