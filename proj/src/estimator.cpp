#include "didimp/estimator.hpp"

#include <cmath>
#include <limits>

namespace didimp {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

Eigen::VectorXd panel_weights(const Panel& panel, const std::vector<int>& rows) {
  Eigen::VectorXd w(rows.size());
  for (size_t k = 0; k < rows.size(); ++k) w[(Eigen::Index)k] = panel.weight(rows[k]);
  return w;
}

Eigen::VectorXd gather(const Eigen::VectorXd& y, const std::vector<int>& rows) {
  Eigen::VectorXd out(rows.size());
  for (size_t k = 0; k < rows.size(); ++k) out[(Eigen::Index)k] = y[rows[k]];
  return out;
}

Eigen::VectorXd row_of(const lsq::SpMat& Z, int r) {
  Eigen::VectorXd z = Eigen::VectorXd::Zero(Z.cols());
  for (lsq::SpMat::InnerIterator it(Z, r); it; ++it) z[it.col()] = it.value();
  return z;
}

double dot_row(const lsq::SpMat& Z, int r, const Eigen::VectorXd& x) {
  double s = 0;
  for (lsq::SpMat::InnerIterator it(Z, r); it; ++it) s += it.value() * x[it.col()];
  return s;
}

std::vector<int> all_rows(const Panel& panel) {
  std::vector<int> rows(panel.n());
  for (int i = 0; i < panel.n(); ++i) rows[i] = i;
  return rows;
}

}  // namespace

std::optional<double> FitResult::tau_at(const Panel& panel,
                                        const std::string& unit,
                                        int time) const {
  auto u = panel.find_unit(unit);
  if (!u) throw Error(errc::unknown_observation, "unknown unit '" + unit + "'");
  auto obs = panel.find_obs(*u, time);
  if (!obs)
    throw Error(errc::unknown_observation,
                "no observation for (" + unit + ", " + std::to_string(time) + ")");
  const auto& t1 = panel.partition().treated;
  auto it = std::lower_bound(t1.begin(), t1.end(), *obs);
  if (it == t1.end() || *it != *obs) return std::nullopt;
  double v = tau_cells[(Eigen::Index)(it - t1.begin())];
  if (std::isnan(v)) return std::nullopt;
  return v;
}

ImputationEngine::ImputationEngine(const Panel& panel,
                                   const OutcomeModelSpec& model,
                                   const FitOptions& opt)
    : panel_(panel),
      opt_(opt),
      design_(materialize_design(panel, model, TreatmentEffectModel::unrestricted())) {
  const auto& rows0 = panel.partition().untreated;
  wts0_ = panel_weights(panel, rows0);
  F0_ = lsq::GramFactor(lsq::gram(design_.Z, rows0, wts0_));

  const auto& t1 = panel.partition().treated;
  imputable_.assign(t1.size(), 1);
  if (F0_.null_basis().cols() > 0) {
    for (size_t k = 0; k < t1.size(); ++k) {
      Eigen::VectorXd z = row_of(design_.Z, t1[k]);
      double scale = std::max(1.0, z.norm());
      if (F0_.kernel_component(z) > kEstimabilityTol * scale) imputable_[k] = 0;
    }
  }
}

FitResult ImputationEngine::fit(const Eigen::VectorXd& y,
                                const EstimandWeights& w) const {
  if ((int)y.size() != panel_.n())
    throw Error(errc::bad_value, "outcome vector length != panel size");

  auto est = check_estimability(panel_, design_, w);
  if (!est.identified)
    throw NotIdentifiedError(
        "estimand '" + w.label + "' is not identified under this model",
        est.blocking_columns);

  const auto& rows0 = panel_.partition().untreated;
  const auto& t1 = panel_.partition().treated;

  FitResult fr;
  fr.label = w.label;
  fr.coef = F0_.solve(lsq::moment(design_.Z, rows0, wts0_, gather(y, rows0)));
  fr.rank0 = F0_.rank();
  fr.resid0.resize(rows0.size());
  for (size_t k = 0; k < rows0.size(); ++k)
    fr.resid0[(Eigen::Index)k] = y[rows0[k]] - dot_row(design_.Z, rows0[k], fr.coef);

  fr.tau_cells = Eigen::VectorXd::Constant(t1.size(), kNaN);
  fr.y0_hat = Eigen::VectorXd::Constant(t1.size(), kNaN);
  fr.imputable = imputable_;

  std::vector<char> wanted(t1.size(), opt_.compute_all_cells ? 1 : 0);
  Eigen::VectorXd w1 = Eigen::VectorXd::Zero(t1.size());
  for (const auto& [obs, wt] : w.entries) {
    auto it = std::lower_bound(t1.begin(), t1.end(), obs);
    size_t k = it - t1.begin();
    w1[(Eigen::Index)k] = wt;
    if (wt != 0.0) wanted[k] = 1;
  }

  bool support_imputable = true;
  for (size_t k = 0; k < t1.size(); ++k) {
    if (!wanted[k]) continue;
    if (!imputable_[k]) {
      if (w1[(Eigen::Index)k] != 0.0) support_imputable = false;
      continue;
    }
    double yhat = dot_row(design_.Z, t1[k], fr.coef);
    fr.y0_hat[(Eigen::Index)k] = yhat;
    fr.tau_cells[(Eigen::Index)k] = y[t1[k]] - yhat;
  }

  if (support_imputable) {
    // tau_w = sum of w * per-cell effects, exactly as reported.
    double s = 0;
    for (size_t k = 0; k < t1.size(); ++k)
      if (w1[(Eigen::Index)k] != 0.0)
        s += w1[(Eigen::Index)k] * fr.tau_cells[(Eigen::Index)k];
    fr.estimate = s;
  } else {
    // Identified aggregate over cells whose individual counterfactuals are
    // not; fold the weights into one moment so the kernel never enters.
    double sy = 0;
    Eigen::VectorXd zbar = Eigen::VectorXd::Zero(design_.p());
    for (size_t k = 0; k < t1.size(); ++k) {
      double wt = w1[(Eigen::Index)k];
      if (wt == 0.0) continue;
      sy += wt * y[t1[k]];
      for (lsq::SpMat::InnerIterator it(design_.Z, t1[k]); it; ++it)
        zbar[it.col()] += wt * it.value();
    }
    fr.estimate = sy - zbar.dot(fr.coef);
  }
  return fr;
}

FitResult ImputationEngine::fit(const EstimandWeights& w) const {
  std::vector<double> y = panel_.outcomes();
  return fit(Eigen::Map<Eigen::VectorXd>(y.data(), (Eigen::Index)y.size()), w);
}

FitResult fit_imputation(const Panel& panel, const OutcomeModelSpec& model,
                         const EstimandWeights& w, const FitOptions& opt) {
  ImputationEngine eng(panel, model, opt);
  return eng.fit(w);
}

FitResult fit_imputation(const Panel& panel, const OutcomeModelSpec& model,
                         const EstimandSpec& spec, const FitOptions& opt) {
  return fit_imputation(panel, model, build_estimand(panel, spec), opt);
}

namespace {

// Shared S-matrix machinery for the joint path: with G = Z'WZ and
// S = W - WZ G^+ Z'W, computes M = Gamma' S11 Gamma and the p x q
// projection H = G^+ Z'W U needed to apply S to embedded vectors.
struct JointWork {
  lsq::GramFactor Fg;       // factor of G
  Eigen::MatrixXd H;        // p x q
  Eigen::MatrixXd M;        // q x q, = U'SU
  lsq::GramFactor Fq;       // factor of M
  Eigen::VectorXd wts;      // panel weights, all rows
  int q = 0;
};

JointWork make_joint(const Panel& panel, const DesignMatrices& design) {
  const auto& t1 = panel.partition().treated;
  const int p = design.p();
  const int n1 = (int)t1.size();
  const int q = design.gamma_identity ? n1 : (int)design.gamma.cols();

  JointWork jw;
  jw.q = q;
  jw.wts = panel_weights(panel, all_rows(panel));
  jw.Fg = lsq::GramFactor(lsq::gram(design.Z, all_rows(panel), jw.wts));

  Eigen::MatrixXd T = Eigen::MatrixXd::Zero(p, q);  // Z'WU
  for (int r = 0; r < n1; ++r) {
    double wr = panel.weight(t1[r]);
    for (lsq::SpMat::InnerIterator it(design.Z, t1[r]); it; ++it) {
      if (design.gamma_identity)
        T(it.col(), r) += wr * it.value();
      else
        T.row(it.col()) += (wr * it.value()) * design.gamma.row(r);
    }
  }
  jw.H = jw.Fg.solve(T);

  jw.M = -T.transpose() * jw.H;  // add U'WU below
  for (int r = 0; r < n1; ++r) {
    double wr = panel.weight(t1[r]);
    if (design.gamma_identity)
      jw.M(r, r) += wr;
    else
      jw.M += wr * (design.gamma.row(r).transpose() * design.gamma.row(r));
  }
  jw.Fq = lsq::GramFactor(jw.M);
  return jw;
}

Eigen::VectorXd gamma_times(const DesignMatrices& design,
                            const Eigen::VectorXd& x) {
  return design.gamma_identity ? x : Eigen::VectorXd(design.gamma * x);
}

Eigen::VectorXd gamma_t_times(const DesignMatrices& design,
                              const Eigen::VectorXd& x) {
  return design.gamma_identity ? x : Eigen::VectorXd(design.gamma.transpose() * x);
}

}  // namespace

FitResult fit_joint(const Panel& panel, const OutcomeModelSpec& model,
                    const TreatmentEffectModel& tem, const EstimandWeights& w,
                    const FitOptions&) {
  DesignMatrices design = materialize_design(panel, model, tem);
  const auto& t1 = panel.partition().treated;
  const auto& rows0 = panel.partition().untreated;
  const int n1 = (int)t1.size();

  JointWork jw = make_joint(panel, design);
  if (jw.Fq.rank() < jw.q) {
    std::string msg = "treatment-effect coefficients are not identified";
    const Eigen::MatrixXd& N = jw.Fq.null_basis();
    if (!design.gamma_identity) {
      msg += " (";
      int cnt = 0;
      for (int j = 0; j < jw.q; ++j)
        if (N.row(j).norm() > 1e-8) {
          if (cnt++) msg += ", ";
          if (cnt > 8) {
            msg += "...";
            break;
          }
          msg += design.theta_names[j];
        }
      msg += ")";
    }
    throw Error(errc::theta_not_identified, msg);
  }

  std::vector<double> ys = panel.outcomes();
  Eigen::VectorXd y = Eigen::Map<Eigen::VectorXd>(ys.data(), (Eigen::Index)ys.size());

  // U'Sy = U'Wy - T' G^+ Z'Wy, with T' G^+ applied through H.
  Eigen::VectorXd gy =
      jw.Fg.solve(lsq::moment(design.Z, all_rows(panel), jw.wts, y));
  Eigen::VectorXd c = Eigen::VectorXd::Zero(jw.q);
  for (int r = 0; r < n1; ++r) {
    double wr = panel.weight(t1[r]);
    double resid = y[t1[r]] - dot_row(design.Z, t1[r], gy);
    if (design.gamma_identity)
      c[r] += wr * resid;
    else
      c += (wr * resid) * design.gamma.row(r).transpose();
  }

  FitResult fr;
  fr.label = w.label;
  fr.theta = jw.Fq.solve(c);
  fr.theta_names = design.theta_names;
  fr.tau_cells = gamma_times(design, fr.theta);
  fr.imputable.assign(n1, 1);

  // Outcome-model coefficients given theta: G beta = Z'W(y - U theta).
  Eigen::VectorXd adj = y;
  for (int r = 0; r < n1; ++r) adj[t1[r]] -= fr.tau_cells[r];
  fr.coef = jw.Fg.solve(lsq::moment(design.Z, all_rows(panel), jw.wts, adj));
  fr.rank0 = jw.Fg.rank();
  fr.resid0.resize(rows0.size());
  for (size_t k = 0; k < rows0.size(); ++k)
    fr.resid0[(Eigen::Index)k] =
        y[rows0[k]] - dot_row(design.Z, rows0[k], fr.coef);
  fr.y0_hat.resize(n1);
  for (int r = 0; r < n1; ++r) fr.y0_hat[r] = dot_row(design.Z, t1[r], fr.coef);

  double s = 0;
  for (const auto& [obs, wt] : w.entries) {
    auto it = std::lower_bound(t1.begin(), t1.end(), obs);
    s += wt * fr.tau_cells[(Eigen::Index)(it - t1.begin())];
  }
  fr.estimate = s;
  return fr;
}

EstimandWeights adjusted_weights(const Panel& panel,
                                 const OutcomeModelSpec& model,
                                 const TreatmentEffectModel& tem,
                                 const EstimandWeights& w) {
  const auto& t1 = panel.partition().treated;
  if (!tem.restricted()) {
    EstimandWeights out = w;
    out.label = w.label + " (adjusted)";
    return out;
  }

  DesignMatrices design = materialize_design(panel, model, tem);
  JointWork jw = make_joint(panel, design);
  if (jw.Fq.rank() < jw.q)
    throw Error(errc::singular_b1,
                "treated-block quadratic form is singular; adjusted weights "
                "are not defined for this model");

  Eigen::VectorXd w1 = w.on_treated(panel);
  Eigen::VectorXd alpha = jw.Fq.solve(gamma_t_times(design, w1));
  Eigen::VectorXd u = gamma_times(design, alpha);   // Gamma alpha on treated
  Eigen::VectorXd ha = jw.H * alpha;                // G^+ Z'WU alpha

  EstimandWeights out;
  out.label = w.label + " (adjusted)";
  for (size_t k = 0; k < t1.size(); ++k) {
    double wr = panel.weight(t1[k]);
    double v = wr * (u[(Eigen::Index)k] - dot_row(design.Z, t1[k], ha));
    if (v != 0.0) out.entries.emplace_back(t1[k], v);
  }
  return out;
}

}  // namespace didimp
