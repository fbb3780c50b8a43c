#include "didimp/weights.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace didimp {

namespace {

std::vector<int> all_rows(const Panel& panel) {
  std::vector<int> rows(panel.n());
  for (int i = 0; i < panel.n(); ++i) rows[i] = i;
  return rows;
}

void finalize(const Panel& panel, ImpliedWeights& iw) {
  std::vector<double> unit_abs(panel.n_units(), 0.0);
  iw.sum_treated = iw.sum_untreated = 0.0;
  for (int r = 0; r < panel.n(); ++r) {
    unit_abs[panel.unit_of(r)] += std::abs(iw.v[r]);
    (panel.treated(r) ? iw.sum_treated : iw.sum_untreated) += iw.v[r];
  }
  iw.herfindahl = 0.0;
  for (double a : unit_abs) iw.herfindahl += a * a;
  iw.n_H = iw.herfindahl > 0 ? 1.0 / iw.herfindahl : 0.0;
}

Eigen::VectorXd treated_moment(const DesignMatrices& design,
                               const EstimandWeights& w) {
  Eigen::VectorXd c = Eigen::VectorXd::Zero(design.p());
  for (const auto& [obs, wt] : w.entries) {
    if (wt == 0.0) continue;
    for (lsq::SpMat::InnerIterator it(design.Z, obs); it; ++it)
      c[it.col()] += wt * it.value();
  }
  return c;
}

}  // namespace

double ImpliedWeights::value(double const* y) const {
  double s = 0;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += v[i] * y[i];
  return s;
}

ImpliedWeights implied_from_vector(const Panel& panel, Eigen::VectorXd v) {
  if (v.size() != panel.n())
    throw Error(errc::dimension_mismatch,
                "weight vector length does not match the panel");
  ImpliedWeights iw;
  iw.v = std::move(v);
  finalize(panel, iw);
  return iw;
}

ImpliedWeights implied_weights_closed(const ImputationEngine& eng,
                                      const EstimandWeights& w) {
  const Panel& panel = eng.panel();
  const DesignMatrices& design = eng.design();
  auto est = check_estimability(panel, design, w);
  if (!est.identified)
    throw NotIdentifiedError(
        "estimand '" + w.label + "' is not identified under this model",
        est.blocking_columns);

  Eigen::VectorXd pi = eng.untreated_factor().solve(
      Eigen::VectorXd(-treated_moment(design, w)));

  ImpliedWeights iw;
  iw.v = Eigen::VectorXd::Zero(panel.n());
  for (int r : panel.partition().untreated) {
    double f = 0;
    for (lsq::SpMat::InnerIterator it(design.Z, r); it; ++it)
      f += it.value() * pi[it.col()];
    iw.v[r] = panel.weight(r) * f;
  }
  for (const auto& [obs, wt] : w.entries) iw.v[obs] = wt;
  finalize(panel, iw);
  return iw;
}

ImpliedWeights implied_weights_closed(const Panel& panel,
                                      const OutcomeModelSpec& model,
                                      const EstimandWeights& w,
                                      const TreatmentEffectModel& tem) {
  ImputationEngine eng(panel, model);
  if (!tem.restricted()) return implied_weights_closed(eng, w);
  return implied_weights_closed(eng, adjusted_weights(panel, model, tem, w));
}

namespace {

// Category-wise workspace for one block over the untreated rows.
struct IterBlock {
  const CatBlock* spec;
  std::vector<int> cat;   // per untreated row
  Eigen::MatrixXd x;      // untreated rows x dim
  std::vector<lsq::GramFactor> factors;
  std::vector<char> live;  // category has untreated support
};

}  // namespace

ImpliedWeights implied_weights_iterative(const Panel& panel,
                                         const OutcomeModelSpec& model,
                                         const EstimandWeights& w,
                                         const IterativeOptions& opt) {
  MaterializeOptions mopt;
  mopt.analyze_rank = false;
  DesignMatrices design = materialize_design(
      panel, model, TreatmentEffectModel::unrestricted(), mopt);
  const auto& rows0 = panel.partition().untreated;
  const int m = (int)rows0.size();
  const int p = design.p();

  Eigen::VectorXd wts0(m);
  for (int k = 0; k < m; ++k) wts0[k] = panel.weight(rows0[k]);
  Eigen::VectorXd target = -treated_moment(design, w);
  double cscale = std::max(1.0, target.cwiseAbs().maxCoeff());

  std::vector<IterBlock> blocks;
  for (const CatBlock& blk : design.blocks) {
    IterBlock b;
    b.spec = &blk;
    b.cat.resize(m);
    b.x = Eigen::MatrixXd::Zero(m, blk.dim);
    std::vector<Eigen::MatrixXd> grams(blk.n_categories,
                                       Eigen::MatrixXd::Zero(blk.dim, blk.dim));
    b.live.assign(blk.n_categories, 0);
    for (int k = 0; k < m; ++k) {
      int c = blk.category[rows0[k]];
      b.cat[k] = c;
      if (c < 0) continue;
      for (lsq::SpMat::InnerIterator it(design.Z, rows0[k]); it; ++it) {
        int off = it.col() - (blk.col0 + c * blk.dim);
        if (off >= 0 && off < blk.dim) b.x(k, off) = it.value();
      }
      if (wts0[k] > 0) {
        grams[c] += wts0[k] * (b.x.row(k).transpose() * b.x.row(k));
        b.live[c] = 1;
      }
    }
    b.factors.reserve(blk.n_categories);
    for (int c = 0; c < blk.n_categories; ++c) b.factors.emplace_back(grams[c]);
    // a category with no untreated support cannot absorb its moment; the
    // sweep leaves it at zero, so reject unmatchable targets up front
    for (int c = 0; c < blk.n_categories; ++c) {
      if (b.live[c]) continue;
      for (int j = 0; j < blk.dim; ++j)
        if (std::abs(target[blk.col0 + c * blk.dim + j]) > 1e-8 * cscale)
          throw Error(errc::no_convergence,
                      "weight system is unsolvable: column '" +
                          design.columns[blk.col0 + c * blk.dim + j].name +
                          "' has no untreated support");
    }
    blocks.push_back(std::move(b));
  }

  const int q = (int)design.tail_cols.size();
  Eigen::MatrixXd tails;
  std::optional<lsq::GramFactor> Ft;
  if (q > 0) {
    tails = Eigen::MatrixXd::Zero(m, q);
    for (int k = 0; k < m; ++k)
      for (lsq::SpMat::InnerIterator it(design.Z, rows0[k]); it; ++it)
        for (int j = 0; j < q; ++j)
          if (design.tail_cols[j] == it.col()) tails(k, j) = it.value();
    Ft.emplace(Eigen::MatrixXd(tails.transpose() * wts0.asDiagonal() * tails));
  }

  Eigen::VectorXd pi = Eigen::VectorXd::Zero(p);
  Eigen::VectorXd f = Eigen::VectorXd::Zero(m);  // z'pi on untreated rows

  ImpliedWeights iw;
  for (int sweep = 0; sweep < opt.max_sweeps; ++sweep) {
    double max_delta = 0.0;
    for (IterBlock& b : blocks) {
      const int dim = b.spec->dim;
      Eigen::MatrixXd mom(dim, b.spec->n_categories);
      for (int c = 0; c < b.spec->n_categories; ++c)
        mom.col(c) = target.segment(b.spec->col0 + c * dim, dim);
      for (int k = 0; k < m; ++k) {
        int c = b.cat[k];
        if (c < 0 || wts0[k] == 0.0) continue;
        mom.col(c) -= (wts0[k] * f[k]) * b.x.row(k).transpose();
      }
      Eigen::MatrixXd delta(dim, b.spec->n_categories);
      for (int c = 0; c < b.spec->n_categories; ++c) {
        delta.col(c) = b.live[c] ? b.factors[c].solve(Eigen::VectorXd(mom.col(c))).eval()
                                 : Eigen::VectorXd::Zero(dim).eval();
        for (int j = 0; j < dim; ++j) {
          pi[b.spec->col0 + c * dim + j] += delta(j, c);
          max_delta = std::max(max_delta, std::abs(delta(j, c)));
        }
      }
      for (int k = 0; k < m; ++k)
        if (b.cat[k] >= 0) f[k] += b.x.row(k).dot(delta.col(b.cat[k]));
    }
    if (q > 0) {
      Eigen::VectorXd mom(q);
      for (int j = 0; j < q; ++j) mom[j] = target[design.tail_cols[j]];
      mom -= tails.transpose() * wts0.cwiseProduct(f);
      Eigen::VectorXd delta = Ft->solve(mom);
      for (int j = 0; j < q; ++j) {
        pi[design.tail_cols[j]] += delta[j];
        max_delta = std::max(max_delta, std::abs(delta[j]));
      }
      f += tails * delta;
    }
    iw.conv.sweeps = sweep + 1;
    iw.conv.final_change = max_delta;
    if (max_delta < opt.tol) {
      iw.conv.converged = true;
      break;
    }
  }
  if (!iw.conv.converged)
    throw Error(errc::no_convergence,
                "weight iteration did not converge in " +
                    std::to_string(opt.max_sweeps) + " sweeps (last change " +
                    std::to_string(iw.conv.final_change) + ")");

  iw.v = Eigen::VectorXd::Zero(panel.n());
  for (int k = 0; k < m; ++k) iw.v[rows0[k]] = wts0[k] * f[k];
  for (const auto& [obs, wt] : w.entries) iw.v[obs] = wt;
  finalize(panel, iw);
  return iw;
}

OlsWeightReport static_ols_weights(const Panel& panel) {
  DesignMatrices design = materialize_design(
      panel, OutcomeModelSpec::twfe(), TreatmentEffectModel::unrestricted());
  std::vector<int> rows = all_rows(panel);
  Eigen::VectorXd wts(panel.n()), d(panel.n());
  for (int r = 0; r < panel.n(); ++r) {
    wts[r] = panel.weight(r);
    d[r] = panel.treated(r) ? 1.0 : 0.0;
  }
  lsq::LsqSolution sol = lsq::solve(design, rows, d, wts);

  OlsWeightReport rep;
  rep.dtilde = sol.residuals;
  double denom = 0, scale = 0;
  for (int r = 0; r < panel.n(); ++r) {
    denom += wts[r] * rep.dtilde[r] * rep.dtilde[r];
    scale += wts[r] * d[r] * d[r];
  }
  if (denom <= kRankTol * std::max(scale, 1.0))
    throw Error(errc::collinear_treatment,
                "treatment indicator is collinear with the fixed effects");

  const int n1 = (int)panel.partition().treated.size();
  for (int obs : panel.partition().treated) {
    double wv = wts[obs] * rep.dtilde[obs] / denom;
    rep.w_ols.emplace_back(obs, wv);
    if (wv < -1e-12) {
      rep.share_negative += 1.0 / n1;
      rep.mass_negative += wv;
    }
    auto k = panel.horizon(obs);
    rep.by_horizon[k ? *k : 0] += wv;
  }
  return rep;
}

UnderidReport detect_underidentification(const Panel& panel,
                                         const DynamicLayout& layout) {
  const int nu = panel.n_units();
  const int nt = panel.n_periods();

  std::set<int> dropped(layout.drop_leads.begin(), layout.drop_leads.end());
  std::set<int> kset;
  for (int r = 0; r < panel.n(); ++r) {
    auto k = panel.horizon(r);
    if (k && !(*k < 0 && dropped.count(-*k))) kset.insert(*k);
  }

  UnderidReport rep;
  rep.ks.assign(kset.begin(), kset.end());
  std::map<int, int> kcol;
  for (size_t j = 0; j < rep.ks.size(); ++j)
    kcol[rep.ks[j]] = nu + (nt - 1) + (int)j;
  const int p = nu + (nt - 1) + (int)rep.ks.size();

  std::vector<Eigen::Triplet<double>> trips;
  for (int r = 0; r < panel.n(); ++r) {
    trips.emplace_back(r, panel.unit_of(r), 1.0);
    int ti = panel.time_index_of(r);
    if (ti > 0) trips.emplace_back(r, nu + ti - 1, 1.0);
    auto k = panel.horizon(r);
    if (k) {
      auto it = kcol.find(*k);
      if (it != kcol.end()) trips.emplace_back(r, it->second, 1.0);
    }
  }
  lsq::SpMat Z(panel.n(), p);
  Z.setFromTriplets(trips.begin(), trips.end());

  std::vector<int> rows(panel.n());
  for (int i = 0; i < panel.n(); ++i) rows[i] = i;
  Eigen::VectorXd wts(panel.n());
  for (int r = 0; r < panel.n(); ++r) wts[r] = panel.weight(r);
  lsq::GramFactor F(lsq::gram(Z, rows, wts));

  rep.deficiency = p - F.rank();
  rep.ok = rep.deficiency == 0;
  if (!rep.ok) {
    const int nk = (int)rep.ks.size();
    Eigen::MatrixXd Nt = F.null_basis().bottomRows(nk);
    // prefer the canonical linear-trend witness when it lies in the kernel
    Eigen::VectorXd trend(nk);
    for (int j = 0; j < nk; ++j) trend[j] = rep.ks[j] + 1;
    Eigen::VectorXd c =
        Nt.colPivHouseholderQr().solve(trend);
    if ((Nt * c - trend).norm() <= 1e-8 * trend.norm()) {
      rep.witness = Nt * c;
    } else {
      // fall back to the kernel direction with the largest tau mass
      int best = 0;
      double bestn = -1;
      for (int j = 0; j < Nt.cols(); ++j)
        if (Nt.col(j).norm() > bestn) {
          bestn = Nt.col(j).norm();
          best = j;
        }
      rep.witness = Nt.col(best);
    }
    Eigen::Index imax;
    rep.witness.cwiseAbs().maxCoeff(&imax);
    rep.witness /= rep.witness[imax];
  }
  return rep;
}

}  // namespace didimp
