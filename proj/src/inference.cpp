#include "didimp/inference.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/fisher_f.hpp>
#include <cmath>
#include <limits>
#include <map>

namespace didimp {

namespace {

std::string group_label(const Panel& panel, int obs, TaubarMode mode) {
  switch (mode) {
    case TaubarMode::Single:
      return "all";
    case TaubarMode::ByCohortPeriod:
      return "e=" + panel.event_date(panel.unit_of(obs)).str() +
             ",t=" + std::to_string(panel.time_of(obs));
    case TaubarMode::ByHorizon:
      return "h=" + std::to_string(*panel.horizon(obs));
    default:
      return "all";
  }
}

TaubarMode resolve_mode(const Panel& panel, const std::vector<int>& supp,
                        const VarianceSpec& spec) {
  if (spec.taubar_mode != TaubarMode::Auto) return spec.taubar_mode;
  std::map<std::string, int> cells;
  for (int obs : supp)
    ++cells[group_label(panel, obs, TaubarMode::ByCohortPeriod)];
  for (const auto& [lbl, cnt] : cells)
    if (cnt < spec.auto_cell_minimum) return TaubarMode::Single;
  return cells.empty() ? TaubarMode::Single : TaubarMode::ByCohortPeriod;
}

}  // namespace

SeResult conservative_se(const Panel& panel, const FitResult& fit,
                         const ImpliedWeights& v, const VarianceSpec& spec) {
  const auto& t1 = panel.partition().treated;
  const auto& rows0 = panel.partition().untreated;

  std::vector<int> supp;       // indices into t1
  for (size_t k = 0; k < t1.size(); ++k)
    if (v.v[t1[k]] != 0.0) supp.push_back((int)k);

  std::vector<int> supp_obs(supp.size());
  for (size_t j = 0; j < supp.size(); ++j) supp_obs[j] = t1[supp[j]];

  SeResult res;
  res.mode = resolve_mode(panel, supp_obs, spec);
  res.leave_out = spec.leave_out;

  for (size_t j = 0; j < supp.size(); ++j)
    if (std::isnan(fit.tau_cells[supp[j]]))
      throw Error(errc::bad_value,
                  "fit lacks cell effects on the weight support; refit with "
                  "the same estimand");

  // groups and per-(unit, group) weight totals
  std::map<std::string, int> gid;
  std::vector<std::string> glabel;
  std::vector<int> gof(supp.size());
  for (size_t j = 0; j < supp.size(); ++j) {
    std::string lbl = group_label(panel, supp_obs[j], res.mode);
    auto [it, inserted] = gid.emplace(lbl, (int)glabel.size());
    if (inserted) glabel.push_back(lbl);
    gof[j] = it->second;
  }
  const int ng = (int)glabel.size();

  std::map<std::pair<int, int>, std::pair<double, double>> ug;  // (unit,g) -> (v_ia, sum v*tau)
  for (size_t j = 0; j < supp.size(); ++j) {
    int obs = supp_obs[j];
    auto& acc = ug[{panel.unit_of(obs), gof[j]}];
    acc.first += v.v[obs];
    acc.second += v.v[obs] * fit.tau_cells[supp[j]];
  }

  std::vector<double> Q(ng, 0.0), S(ng, 0.0);
  for (const auto& [key, acc] : ug) {
    Q[key.second] += acc.first * acc.first;
    S[key.second] += acc.first * acc.second;
  }
  std::vector<double> taubar(ng, 0.0);
  for (int g = 0; g < ng; ++g) {
    if (Q[g] > 0) {
      taubar[g] = S[g] / Q[g];
    } else {
      res.degenerate_taubar = true;
      res.notes.push_back("group '" + glabel[g] +
                          "' has zero weight denominator; taubar set to 0");
    }
    res.taubar.emplace_back(glabel[g], taubar[g]);
  }

  res.eps_tilde = Eigen::VectorXd::Zero((Eigen::Index)t1.size());
  for (size_t j = 0; j < supp.size(); ++j) {
    double e = fit.tau_cells[supp[j]] - taubar[gof[j]];
    if (spec.leave_out) {
      const auto& acc = ug[{panel.unit_of(supp_obs[j]), gof[j]}];
      double ratio = Q[gof[j]] > 0 ? acc.first * acc.first / Q[gof[j]] : 0.0;
      if (1.0 - ratio < 1e-12) {
        if (!res.leave_out_fallback)
          res.notes.push_back(
              "leave-out skipped where a single unit carries all group "
              "weight");
        res.leave_out_fallback = true;
      } else {
        e /= 1.0 - ratio;
      }
    }
    res.eps_tilde[supp[j]] = e;
  }

  res.scores = Eigen::VectorXd::Zero(panel.n_units());
  for (size_t k = 0; k < rows0.size(); ++k)
    res.scores[panel.unit_of(rows0[k])] +=
        v.v[rows0[k]] * fit.resid0[(Eigen::Index)k];
  for (size_t j = 0; j < supp.size(); ++j)
    res.scores[panel.unit_of(supp_obs[j])] +=
        v.v[supp_obs[j]] * res.eps_tilde[supp[j]];

  res.sigma_hat_sq = res.scores.squaredNorm();
  res.sigma_hat = std::sqrt(res.sigma_hat_sq);
  return res;
}

Eigen::MatrixXd covariance_matrix(const Panel& panel,
                                  const std::vector<const FitResult*>& fits,
                                  const std::vector<const ImpliedWeights*>& vs,
                                  const VarianceSpec& spec) {
  if (fits.size() != vs.size())
    throw Error(errc::bad_value, "fits and weights lists differ in length");
  const int m = (int)fits.size();
  Eigen::MatrixXd scores(panel.n_units(), m);
  for (int k = 0; k < m; ++k)
    scores.col(k) = conservative_se(panel, *fits[k], *vs[k], spec).scores;
  return scores.transpose() * scores;
}

PretestResult pretest(const Panel& panel, const OutcomeModelSpec& model,
                      int k, PretestMode mode) {
  const auto& rows0 = panel.partition().untreated;
  const int n0 = (int)rows0.size();

  // deepest lead observed among untreated rows
  int max_lead = 0;
  for (int r : rows0) {
    auto h = panel.horizon(r);
    if (h && *h < 0) max_lead = std::max(max_lead, -*h);
  }
  if (k <= 0) k = std::min(4, max_lead - 1);
  if (k < 1)
    throw Error(errc::insufficient_preperiods,
                "no pre-treatment periods available for testing");

  PretestResult res;
  res.mode = mode;

  std::vector<int> lead_count(k + 1, 0);
  for (int r : rows0) {
    auto h = panel.horizon(r);
    if (h && *h < 0 && -*h <= k) ++lead_count[-*h];
  }
  std::vector<int> leads;
  for (int j = 1; j <= k; ++j) {
    if (lead_count[j] > 0)
      leads.push_back(j);
    else
      res.warnings.push_back("lead " + std::to_string(j) +
                             " has no untreated support; dropped");
  }
  if (leads.empty())
    throw Error(errc::insufficient_preperiods,
                "no tested lead has untreated support");
  res.leads = leads;

  OutcomeModelSpec aug = model;
  CommonTerm wterm;
  wterm.kind = CommonTermKind::LeadIndicators;
  wterm.leads = leads;
  aug.common_terms.push_back(wterm);

  MaterializeOptions mopt;
  mopt.analyze_rank = false;
  DesignMatrices design = materialize_design(
      panel, aug, TreatmentEffectModel::unrestricted(), mopt);
  const int p = design.p();
  const int q = (int)leads.size();
  std::vector<int> gcols(design.tail_cols.end() - q, design.tail_cols.end());

  Eigen::VectorXd wts0(n0), y0(n0);
  for (int j = 0; j < n0; ++j) {
    wts0[j] = panel.weight(rows0[j]);
    y0[j] = panel.outcome(rows0[j]);
  }
  lsq::GramFactor F0(lsq::gram(design.Z, rows0, wts0));
  Eigen::VectorXd coef = F0.solve(lsq::moment(design.Z, rows0, wts0, y0));

  // the gamma block must be identified for the test statistic to exist
  if (F0.null_basis().cols() > 0) {
    for (int c : gcols) {
      if (F0.null_basis().row(c).norm() > 1e-8)
        throw Error(errc::singular_covariance,
                    "lead indicators are collinear with the outcome model");
    }
  }

  res.gamma_hat.resize(q);
  for (int j = 0; j < q; ++j) res.gamma_hat[j] = coef[gcols[j]];
  res.df1 = q;

  Eigen::VectorXd resid(n0);
  for (int j = 0; j < n0; ++j) {
    double f = 0;
    for (lsq::SpMat::InnerIterator it(design.Z, rows0[j]); it; ++it)
      f += it.value() * coef[it.col()];
    resid[j] = y0[j] - f;
  }
  const double ssr = resid.cwiseProduct(wts0).dot(resid);
  const double yscale = std::max(1.0, y0.cwiseAbs().maxCoeff());
  // coefficients at roundoff level relative to the outcome scale are zero
  const bool gamma_zero =
      res.gamma_hat.cwiseAbs().maxCoeff() <= 1e-10 * yscale;

  // (G^+)_{gamma,gamma}
  Eigen::MatrixXd Eg = Eigen::MatrixXd::Zero(p, q);
  for (int j = 0; j < q; ++j) Eg(gcols[j], j) = 1.0;
  Eigen::MatrixXd Ginv_g = F0.solve(Eg);
  Eigen::MatrixXd Vg(q, q);
  for (int a = 0; a < q; ++a)
    for (int b = 0; b < q; ++b) Vg(a, b) = Ginv_g(gcols[a], b);

  if (mode == PretestMode::HomoskedasticF) {
    double dof = n0 - F0.rank();
    if (dof <= 0)
      throw Error(errc::insufficient_preperiods,
                  "no residual degrees of freedom for the F test");
    double s2 = ssr / dof;
    res.df2 = dof;
    res.cov_gamma = s2 * Vg;
    if (gamma_zero) {
      res.stat = 0.0;
      res.p_value = 1.0;
    } else if (s2 <= 0) {
      res.stat = std::numeric_limits<double>::infinity();
      res.p_value = 0.0;
    } else {
      Eigen::LLT<Eigen::MatrixXd> llt(Vg);
      if (llt.info() != Eigen::Success)
        throw Error(errc::singular_covariance,
                    "coefficient covariance block is singular");
      double quad = res.gamma_hat.dot(llt.solve(res.gamma_hat));
      res.stat = quad / q / s2;
      boost::math::fisher_f dist(q, dof);
      res.p_value = boost::math::cdf(boost::math::complement(dist, res.stat));
    }
  } else {
    // CR1 unit-clustered covariance of gamma
    std::map<int, Eigen::VectorXd> cl;
    for (int j = 0; j < n0; ++j) {
      int u = panel.unit_of(rows0[j]);
      auto it = cl.try_emplace(u, Eigen::VectorXd::Zero(p)).first;
      for (lsq::SpMat::InnerIterator itz(design.Z, rows0[j]); itz; ++itz)
        it->second[itz.col()] += wts0[j] * resid[j] * itz.value();
    }
    const int G = (int)cl.size();
    int rank = F0.rank();
    if (G < 2)
      throw Error(errc::singular_covariance,
                  "clustered covariance needs at least two clusters");
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(p, p);
    for (auto& kv : cl) meat.selfadjointView<Eigen::Lower>().rankUpdate(kv.second);
    meat.triangularView<Eigen::StrictlyUpper>() =
        meat.triangularView<Eigen::StrictlyLower>().transpose();
    double c = (double)G / (G - 1) * (double)(n0 - 1) / (n0 - rank);
    Eigen::MatrixXd bread = F0.solve(meat);  // G^+ meat
    Eigen::MatrixXd bread_t = bread.transpose();
    Eigen::MatrixXd full = F0.solve(bread_t);  // G^+ meat G^+
    Eigen::MatrixXd Vc(q, q);
    for (int a = 0; a < q; ++a)
      for (int b = 0; b < q; ++b) Vc(a, b) = c * full(gcols[a], gcols[b]);
    res.cov_gamma = Vc;
    if (gamma_zero) {
      res.stat = 0.0;
      res.p_value = 1.0;
    } else {
      // a (near-)singular clustered covariance means too few clusters or no
      // residual variation behind some lead; a Wald statistic built on its
      // inverse would be meaningless
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(Vc);
      double lmax = es.eigenvalues().maxCoeff();
      double base = ssr / std::max(1, n0 - rank) * Vg.diagonal().maxCoeff();
      if (lmax <= 1e-8 * base ||
          es.eigenvalues().minCoeff() <= kRankTol * lmax)
        throw Error(errc::singular_covariance,
                    "clustered covariance of the lead coefficients is "
                    "singular; too few clusters or observations per lead");
      Eigen::VectorXd tr = es.eigenvectors().transpose() * res.gamma_hat;
      res.stat = tr.cwiseAbs2().cwiseQuotient(es.eigenvalues()).sum();
      boost::math::chi_squared dist(q);
      res.p_value = boost::math::cdf(boost::math::complement(dist, res.stat));
    }
  }
  return res;
}

}  // namespace didimp
