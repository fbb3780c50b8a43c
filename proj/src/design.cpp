#include "didimp/design.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "didimp/lsq.hpp"

namespace didimp {

namespace {

std::vector<int> all_rows(const Panel& p) {
  std::vector<int> r(p.n());
  for (int i = 0; i < p.n(); ++i) r[i] = i;
  return r;
}

// Position of each treated observation in the treated-sample ordering.
std::vector<int> treated_pos(const Panel& p) {
  std::vector<int> pos(p.n(), -1);
  const auto& t1 = p.partition().treated;
  for (size_t k = 0; k < t1.size(); ++k) pos[t1[k]] = (int)k;
  return pos;
}

}  // namespace

// ---------------------------------------------------------------------------
// TreatmentEffectModel
// ---------------------------------------------------------------------------

TreatmentEffectModel TreatmentEffectModel::custom(Eigen::MatrixXd gamma) {
  TreatmentEffectModel m{Kind::Custom};
  if (gamma.cols() < 1 || gamma.rows() < gamma.cols())
    throw Error(errc::unsupported_spec, "custom gamma must be N1 x q with q <= N1");
  lsq::GramFactor f(Eigen::MatrixXd(gamma.transpose() * gamma));
  if (f.rank() < gamma.cols())
    throw Error(errc::unsupported_spec, "custom gamma must have full column rank");
  m.custom_ = std::move(gamma);
  return m;
}

TreatmentEffectModel TreatmentEffectModel::from_restrictions(
    const Eigen::MatrixXd& B) {
  Eigen::FullPivLU<Eigen::MatrixXd> lu(B);
  lu.setThreshold(kRankTol);
  if (lu.dimensionOfKernel() == 0)
    throw Error(errc::unsupported_spec,
                "restriction matrix leaves no free treatment effects");
  Eigen::MatrixXd K = lu.kernel();
  // orthonormalize the basis for numeric hygiene
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(K);
  Eigen::MatrixXd Q = qr.householderQ() * Eigen::MatrixXd::Identity(K.rows(), K.cols());
  return custom(std::move(Q));
}

Eigen::MatrixXd TreatmentEffectModel::gamma(const Panel& panel) const {
  const auto& t1 = panel.partition().treated;
  const int n1 = (int)t1.size();
  switch (kind_) {
    case Kind::Unrestricted: {
      return Eigen::MatrixXd::Identity(n1, n1);
    }
    case Kind::Constant: {
      return Eigen::MatrixXd::Ones(n1, 1);
    }
    case Kind::ByHorizon: {
      std::set<int> buckets;
      for (int obs : t1) {
        int k = *panel.horizon(obs);
        buckets.insert(cap_ && k >= *cap_ ? *cap_ : k);
      }
      std::map<int, int> col;
      for (int b : buckets) col.emplace(b, (int)col.size());
      Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n1, (int)col.size());
      for (int r = 0; r < n1; ++r) {
        int k = *panel.horizon(t1[r]);
        g(r, col.at(cap_ && k >= *cap_ ? *cap_ : k)) = 1.0;
      }
      return g;
    }
    case Kind::ByCohort: {
      std::set<int> cohorts;
      for (int obs : t1)
        cohorts.insert(panel.event_date(panel.unit_of(obs)).value());
      std::map<int, int> col;
      for (int e : cohorts) col.emplace(e, (int)col.size());
      Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n1, (int)col.size());
      for (int r = 0; r < n1; ++r)
        g(r, col.at(panel.event_date(panel.unit_of(t1[r])).value())) = 1.0;
      return g;
    }
    case Kind::Custom: {
      if (custom_.rows() != n1)
        throw Error(errc::unsupported_spec,
                    "custom gamma has " + std::to_string(custom_.rows()) +
                        " rows, panel has " + std::to_string(n1) +
                        " treated observations");
      return custom_;
    }
  }
  throw std::logic_error("unreachable");
}

std::vector<std::string> TreatmentEffectModel::theta_names(
    const Panel& panel) const {
  const auto& t1 = panel.partition().treated;
  std::vector<std::string> names;
  switch (kind_) {
    case Kind::Unrestricted:
      for (int obs : t1)
        names.push_back("tau[" + panel.unit_key(panel.unit_of(obs)) + "," +
                        std::to_string(panel.time_of(obs)) + "]");
      break;
    case Kind::Constant:
      names.push_back("theta");
      break;
    case Kind::ByHorizon: {
      std::set<int> buckets;
      for (int obs : t1) {
        int k = *panel.horizon(obs);
        buckets.insert(cap_ && k >= *cap_ ? *cap_ : k);
      }
      for (int b : buckets)
        names.push_back(cap_ && b == *cap_
                            ? "theta[h>=" + std::to_string(b) + "]"
                            : "theta[h=" + std::to_string(b) + "]");
      break;
    }
    case Kind::ByCohort: {
      std::set<int> cohorts;
      for (int obs : t1)
        cohorts.insert(panel.event_date(panel.unit_of(obs)).value());
      for (int e : cohorts) names.push_back("theta[e=" + std::to_string(e) + "]");
      break;
    }
    case Kind::Custom:
      for (int j = 0; j < custom_.cols(); ++j)
        names.push_back("theta[" + std::to_string(j) + "]");
      break;
  }
  return names;
}

// ---------------------------------------------------------------------------
// Estimands
// ---------------------------------------------------------------------------

EstimandSpec EstimandSpec::att() {
  EstimandSpec s;
  s.kind = Kind::Att;
  s.label = "att";
  return s;
}
EstimandSpec EstimandSpec::horizon(int h) {
  EstimandSpec s;
  s.kind = Kind::Horizon;
  s.h = h;
  s.label = "h=" + std::to_string(h);
  return s;
}
EstimandSpec EstimandSpec::balanced_horizon(int h, std::vector<int> require) {
  EstimandSpec s;
  s.kind = Kind::BalancedHorizon;
  s.h = h;
  s.require_horizons = std::move(require);
  s.label = "h=" + std::to_string(h) + "(balanced)";
  return s;
}
EstimandSpec EstimandSpec::cohort_att(int e) {
  EstimandSpec s;
  s.kind = Kind::Cohort;
  s.cohort = e;
  s.label = "cohort=" + std::to_string(e);
  return s;
}
EstimandSpec EstimandSpec::difference(EstimandSpec a, EstimandSpec b) {
  EstimandSpec s;
  s.kind = Kind::Difference;
  s.label = a.label + "-" + b.label;
  s.a = std::make_shared<EstimandSpec>(std::move(a));
  s.b = std::make_shared<EstimandSpec>(std::move(b));
  return s;
}
EstimandSpec EstimandSpec::per_dose(bool total) {
  EstimandSpec s;
  s.kind = Kind::PerDose;
  s.dose_total = total;
  s.label = total ? "per_dose_total" : "per_dose";
  return s;
}
EstimandSpec EstimandSpec::custom_cells(std::vector<CustomCell> cells) {
  EstimandSpec s;
  s.kind = Kind::Custom;
  s.custom = std::move(cells);
  s.label = "custom";
  return s;
}

double EstimandWeights::sum() const {
  double s = 0;
  for (const auto& [obs, w] : entries) s += w;
  return s;
}

Eigen::VectorXd EstimandWeights::on_treated(const Panel& panel) const {
  std::vector<int> pos = treated_pos(panel);
  Eigen::VectorXd w1 =
      Eigen::VectorXd::Zero((Eigen::Index)panel.partition().treated.size());
  for (const auto& [obs, w] : entries) {
    if (pos[obs] < 0)
      throw Error(errc::bad_value, "estimand weight on an untreated observation");
    w1[pos[obs]] += w;
  }
  return w1;
}

EstimandWeights build_estimand(const Panel& panel, const EstimandSpec& spec) {
  EstimandWeights out;
  out.label = spec.label;
  const auto& t1 = panel.partition().treated;
  switch (spec.kind) {
    case EstimandSpec::Kind::Att: {
      if (t1.empty()) throw Error(errc::empty_support, "no treated observations");
      double w = 1.0 / (double)t1.size();
      for (int obs : t1) out.entries.emplace_back(obs, w);
      break;
    }
    case EstimandSpec::Kind::Horizon: {
      std::vector<int> cells;
      for (int obs : t1)
        if (*panel.horizon(obs) == spec.h) cells.push_back(obs);
      if (cells.empty())
        throw Error(errc::empty_support,
                    "no treated observations at horizon " + std::to_string(spec.h));
      double w = 1.0 / (double)cells.size();
      for (int obs : cells) out.entries.emplace_back(obs, w);
      break;
    }
    case EstimandSpec::Kind::BalancedHorizon: {
      std::set<int> req(spec.require_horizons.begin(), spec.require_horizons.end());
      req.insert(spec.h);
      std::vector<int> cells;
      for (int u = 0; u < panel.n_units(); ++u) {
        EventDate e = panel.event_date(u);
        if (e.is_never()) continue;
        bool ok = true;
        for (int hh : req)
          if (!panel.find_obs(u, e.value() + hh)) {
            ok = false;
            break;
          }
        if (!ok) continue;
        int obs = *panel.find_obs(u, e.value() + spec.h);
        if (!panel.treated(obs)) continue;
        cells.push_back(obs);
      }
      if (cells.empty())
        throw Error(errc::empty_support, "no unit observed at all required horizons");
      double w = 1.0 / (double)cells.size();
      for (int obs : cells) out.entries.emplace_back(obs, w);
      break;
    }
    case EstimandSpec::Kind::Cohort: {
      std::vector<int> cells;
      for (int obs : t1) {
        EventDate e = panel.event_date(panel.unit_of(obs));
        if (!e.is_never() && e.value() == spec.cohort) cells.push_back(obs);
      }
      if (cells.empty())
        throw Error(errc::empty_support,
                    "no treated observations in cohort " + std::to_string(spec.cohort));
      double w = 1.0 / (double)cells.size();
      for (int obs : cells) out.entries.emplace_back(obs, w);
      break;
    }
    case EstimandSpec::Kind::Difference: {
      EstimandWeights a = build_estimand(panel, *spec.a);
      EstimandWeights b = build_estimand(panel, *spec.b);
      std::map<int, double> merged;
      for (const auto& [obs, w] : a.entries) merged[obs] += w;
      for (const auto& [obs, w] : b.entries) merged[obs] -= w;
      for (const auto& [obs, w] : merged)
        if (w != 0.0) out.entries.emplace_back(obs, w);
      break;
    }
    case EstimandSpec::Kind::PerDose: {
      if (!panel.has_dose())
        throw Error(errc::missing_dose, "panel has no dose column");
      if (t1.empty()) throw Error(errc::empty_support, "no treated observations");
      double total = 0;
      for (int obs : t1) {
        if (!(panel.dose(obs) > 0))
          throw Error(errc::missing_dose,
                      "nonpositive dose on a treated observation");
        total += panel.dose(obs);
      }
      for (int obs : t1)
        out.entries.emplace_back(obs, spec.dose_total
                                          ? 1.0 / total
                                          : 1.0 / (panel.dose(obs) * (double)t1.size()));
      break;
    }
    case EstimandSpec::Kind::Custom: {
      for (const auto& c : spec.custom) {
        auto u = panel.find_unit(c.unit);
        if (!u)
          throw Error(errc::unknown_observation, "unknown unit '" + c.unit + "'");
        auto obs = panel.find_obs(*u, c.time);
        if (!obs)
          throw Error(errc::unknown_observation,
                      "unit '" + c.unit + "' not observed at t=" +
                          std::to_string(c.time));
        if (!panel.treated(*obs))
          throw Error(errc::bad_value,
                      "custom estimand weight on untreated cell " + c.unit + "," +
                          std::to_string(c.time));
        out.entries.emplace_back(*obs, c.w);
      }
      break;
    }
  }
  std::sort(out.entries.begin(), out.entries.end());
  return out;
}

// ---------------------------------------------------------------------------
// Materialization
// ---------------------------------------------------------------------------

namespace {

struct Builder {
  const Panel& panel;
  std::vector<ColumnInfo> columns;
  std::vector<Eigen::Triplet<double>> trips;
  std::vector<CatBlock> blocks;
  std::vector<int> tail;

  explicit Builder(const Panel& p) : panel(p) {}

  int add_column(ColumnInfo info) {
    columns.push_back(std::move(info));
    return (int)columns.size() - 1;
  }
};

double unit_term_value(const Panel& p, const UnitTerm& t, int obs) {
  switch (t.kind) {
    case UnitTermKind::Intercept:
      return 1.0;
    case UnitTermKind::Trend:
      return (double)p.time_of(obs);
    case UnitTermKind::Covariate:
      return p.covariate(obs, p.covariate_index(t.covariate));
  }
  return 0.0;
}

std::string unit_term_name(const UnitTerm& t, const std::string& key) {
  switch (t.kind) {
    case UnitTermKind::Intercept:
      return "unit[" + key + "]";
    case UnitTermKind::Trend:
      return "trend[" + key + "]";
    case UnitTermKind::Covariate:
      return t.covariate + "[" + key + "]";
  }
  return key;
}

}  // namespace

DesignMatrices materialize_design(const Panel& panel,
                                  const OutcomeModelSpec& model,
                                  const TreatmentEffectModel& tem,
                                  const MaterializeOptions& opt) {
  if (model.unit_terms.empty() && model.common_terms.empty())
    throw Error(errc::unsupported_spec, "outcome model has no regressors");

  Builder b(panel);
  const int n = panel.n();
  const int nu = panel.n_units();

  // unit blocks, unit-major
  const int d = (int)model.unit_terms.size();
  if (d > 0) {
    for (int u = 0; u < nu; ++u)
      for (const UnitTerm& t : model.unit_terms)
        b.add_column({unit_term_name(t, panel.unit_key(u)),
                      ColumnInfo::Role::Unit, u});
    CatBlock blk;
    blk.name = "units";
    blk.col0 = 0;
    blk.dim = d;
    blk.n_categories = nu;
    blk.category.resize(n);
    for (int i = 0; i < n; ++i) blk.category[i] = panel.unit_of(i);
    b.blocks.push_back(std::move(blk));
    for (int i = 0; i < n; ++i)
      for (int k = 0; k < d; ++k) {
        double v = unit_term_value(panel, model.unit_terms[k], i);
        if (v != 0.0)
          b.trips.emplace_back(i, panel.unit_of(i) * d + k, v);
      }
  }

  for (const CommonTerm& term : model.common_terms) {
    switch (term.kind) {
      case CommonTermKind::PeriodFE: {
        int drop = model.normalize_period.value_or(panel.periods().front());
        if (std::find(panel.periods().begin(), panel.periods().end(), drop) ==
            panel.periods().end())
          throw Error(errc::invalid_config,
                      "normalization period " + std::to_string(drop) +
                          " is not observed");
        CatBlock blk;
        blk.name = "periods";
        blk.col0 = (int)b.columns.size();
        blk.dim = 1;
        std::map<int, int> cat;
        for (int t : panel.periods()) {
          if (t == drop) continue;
          cat.emplace(t, (int)cat.size());
          b.add_column({"period[" + std::to_string(t) + "]",
                        ColumnInfo::Role::PeriodFE, -1});
        }
        blk.n_categories = (int)cat.size();
        blk.category.resize(n);
        for (int i = 0; i < n; ++i) {
          auto it = cat.find(panel.time_of(i));
          blk.category[i] = it == cat.end() ? -1 : it->second;
          if (it != cat.end())
            b.trips.emplace_back(i, blk.col0 + it->second, 1.0);
        }
        b.blocks.push_back(std::move(blk));
        break;
      }
      case CommonTermKind::GroupFE: {
        int g = panel.group_column_index(term.name);
        CatBlock blk;
        blk.name = term.name;
        blk.col0 = (int)b.columns.size();
        blk.dim = 1;
        blk.n_categories = panel.n_groups(g);
        for (int c = 0; c < panel.n_groups(g); ++c)
          b.add_column({term.name + "[" + panel.group_label(g, c) + "]",
                        ColumnInfo::Role::GroupFE, -1});
        blk.category.resize(n);
        for (int i = 0; i < n; ++i) {
          blk.category[i] = panel.group_of(i, g);
          b.trips.emplace_back(i, blk.col0 + panel.group_of(i, g), 1.0);
        }
        b.blocks.push_back(std::move(blk));
        break;
      }
      case CommonTermKind::Covariate: {
        int k = panel.covariate_index(term.name);
        int col = b.add_column({term.name, ColumnInfo::Role::Covariate, -1});
        b.tail.push_back(col);
        for (int i = 0; i < n; ++i) {
          double v = panel.covariate(i, k);
          if (v != 0.0) b.trips.emplace_back(i, col, v);
        }
        break;
      }
      case CommonTermKind::LeadIndicators: {
        for (int j : term.leads) {
          if (j < 1)
            throw Error(errc::invalid_config,
                        "lead indicators are indexed by j >= 1 (K = -j)");
          int col = b.add_column({"lead[-" + std::to_string(j) + "]",
                                  ColumnInfo::Role::Lead, -1});
          b.tail.push_back(col);
          for (int i = 0; i < n; ++i) {
            auto k = panel.horizon(i);
            if (k && *k == -j) b.trips.emplace_back(i, col, 1.0);
          }
        }
        break;
      }
    }
  }

  DesignMatrices dm;
  dm.columns = std::move(b.columns);
  dm.blocks = std::move(b.blocks);
  dm.tail_cols = std::move(b.tail);
  dm.Z.resize(n, (int)dm.columns.size());
  dm.Z.setFromTriplets(b.trips.begin(), b.trips.end());
  dm.gamma_identity = !tem.restricted();
  if (tem.restricted()) {
    dm.gamma = tem.gamma(panel);
    dm.theta_names = tem.theta_names(panel);
  }

  if (!opt.analyze_rank) return dm;

  const int p = dm.p();
  Eigen::VectorXd ones1 = Eigen::VectorXd::Ones(n);
  Eigen::MatrixXd Gf = lsq::gram(dm.Z, all_rows(panel), ones1);
  lsq::GramFactor Ff(Gf);
  dm.rank.full_rank = Ff.rank();
  if (Ff.rank() < p) {
    const Eigen::MatrixXd& N = Ff.null_basis();
    for (int j = 0; j < p; ++j)
      if (N.row(j).norm() > 1e-8) dm.rank.pinned_full.push_back(dm.columns[j].name);
  }

  const auto& rows0 = panel.partition().untreated;
  Eigen::VectorXd ones0 = Eigen::VectorXd::Ones((Eigen::Index)rows0.size());
  Eigen::MatrixXd G0 = lsq::gram(dm.Z, rows0, ones0);
  lsq::GramFactor F0(G0);
  dm.rank.untreated_rank = F0.rank();
  dm.rank.null_untreated = F0.null_basis();
  if (F0.rank() < p) {
    const Eigen::MatrixXd& N = F0.null_basis();
    for (int j = 0; j < p; ++j)
      if (N.row(j).norm() > 1e-8)
        dm.rank.unidentified_untreated.push_back(dm.columns[j].name);
  }

  if (tem.restricted()) {
    // theta is identified iff appending the D*Gamma columns raises the rank
    // by exactly q; a smaller increase means an effect path is confounded
    // with the outcome model.
    const int q = (int)dm.gamma.cols();
    const auto& t1 = panel.partition().treated;
    Eigen::MatrixXd big = Eigen::MatrixXd::Zero(p + q, p + q);
    big.topLeftCorner(p, p) = Gf;
    Eigen::MatrixXd Gzg = Eigen::MatrixXd::Zero(p, q);
    for (size_t r = 0; r < t1.size(); ++r) {
      for (lsq::SpMat::InnerIterator it(dm.Z, t1[r]); it; ++it)
        Gzg.row(it.col()) += it.value() * dm.gamma.row((Eigen::Index)r);
    }
    big.topRightCorner(p, q) = Gzg;
    big.bottomLeftCorner(q, p) = Gzg.transpose();
    big.bottomRightCorner(q, q) = dm.gamma.transpose() * dm.gamma;
    lsq::GramFactor Fa(big);
    int joint_def = p + q - Fa.rank();
    int z_def = p - dm.rank.full_rank;
    if (joint_def > z_def) {
      const Eigen::MatrixXd& N = Fa.null_basis();
      std::set<std::string> involved;
      for (int j = 0; j < p + q; ++j)
        if (N.row(j).norm() > 1e-8)
          involved.insert(j < p ? dm.columns[j].name : dm.theta_names[j - p]);
      std::string msg = "design is rank deficient after normalization: "
                        "deficiency dimension " +
                        std::to_string(joint_def - z_def) +
                        " ties treatment effects to the outcome model (";
      int cnt = 0;
      for (const auto& s : involved) {
        if (cnt++) msg += ", ";
        if (cnt > 8) {
          msg += "...";
          break;
        }
        msg += s;
      }
      msg += ")";
      throw Error(errc::rank_deficient_after_normalization, msg);
    }
  }
  return dm;
}

EstimabilityResult check_estimability(const Panel&,
                                      const DesignMatrices& design,
                                      const EstimandWeights& w) {
  EstimabilityResult res;
  const int p = design.p();
  Eigen::VectorXd r = Eigen::VectorXd::Zero(p);
  for (const auto& [obs, wt] : w.entries) {
    if (wt == 0.0) continue;
    for (lsq::SpMat::InnerIterator it(design.Z, obs); it; ++it)
      r[it.col()] += wt * it.value();
  }
  const Eigen::MatrixXd& N = design.rank.null_untreated;
  if (N.cols() == 0) {
    res.identified = true;
    return res;
  }
  Eigen::VectorXd unmatched = N * (N.transpose() * r);
  double rn = r.norm();
  if (unmatched.norm() <= kEstimabilityTol * std::max(rn, 1e-300)) {
    res.identified = true;
    return res;
  }
  res.identified = false;
  res.certificate = unmatched;
  double mx = unmatched.cwiseAbs().maxCoeff();
  for (int j = 0; j < p; ++j)
    if (std::abs(unmatched[j]) > 0.5 * mx)
      res.blocking_columns.push_back(design.columns[j].name);
  return res;
}

EstimabilityResult check_estimability(const Panel& panel,
                                      const OutcomeModelSpec& model,
                                      const EstimandWeights& w) {
  DesignMatrices dm =
      materialize_design(panel, model, TreatmentEffectModel::unrestricted());
  return check_estimability(panel, dm, w);
}

}  // namespace didimp
