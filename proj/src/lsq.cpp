#include "didimp/lsq.hpp"

#include <cmath>

namespace didimp {
namespace lsq {

GramFactor::GramFactor(const Eigen::MatrixXd& gram, double rel_tol) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
  if (es.info() != Eigen::Success)
    throw Error(errc::solver_failure, "eigendecomposition of the Gram matrix failed");
  eval_ = es.eigenvalues();
  evec_ = es.eigenvectors();
  const int p = (int)eval_.size();
  double lmax = p > 0 ? std::max(0.0, eval_.maxCoeff()) : 0.0;
  double cut = rel_tol * lmax;
  inv_eval_ = Eigen::VectorXd::Zero(p);
  int nkern = 0;
  for (int i = 0; i < p; ++i) {
    if (eval_[i] > cut && eval_[i] > 0) {
      inv_eval_[i] = 1.0 / eval_[i];
      ++rank_;
    } else {
      ++nkern;
    }
  }
  null_.resize(p, nkern);
  int k = 0;
  for (int i = 0; i < p; ++i)
    if (!(eval_[i] > cut && eval_[i] > 0)) null_.col(k++) = evec_.col(i);
}

Eigen::VectorXd GramFactor::solve(const Eigen::VectorXd& rhs) const {
  return evec_ * (inv_eval_.asDiagonal() * (evec_.transpose() * rhs));
}

Eigen::MatrixXd GramFactor::solve(const Eigen::MatrixXd& rhs) const {
  return evec_ * (inv_eval_.asDiagonal() * (evec_.transpose() * rhs));
}

double GramFactor::kernel_component(const Eigen::VectorXd& x) const {
  if (null_.cols() == 0) return 0.0;
  return (null_.transpose() * x).cwiseAbs().maxCoeff();
}

Eigen::MatrixXd gram(const SpMat& Z, const std::vector<int>& rows,
                     const Eigen::VectorXd& wts) {
  const int p = (int)Z.cols();
  Eigen::MatrixXd G = Eigen::MatrixXd::Zero(p, p);
  for (size_t k = 0; k < rows.size(); ++k) {
    double w = wts[(Eigen::Index)k];
    if (w == 0.0) continue;
    for (SpMat::InnerIterator i1(Z, rows[k]); i1; ++i1)
      for (SpMat::InnerIterator i2(Z, rows[k]); i2 && i2.col() <= i1.col(); ++i2)
        G(i1.col(), i2.col()) += w * i1.value() * i2.value();
  }
  G.triangularView<Eigen::StrictlyUpper>() =
      G.triangularView<Eigen::StrictlyLower>().transpose();
  return G;
}

Eigen::VectorXd moment(const SpMat& Z, const std::vector<int>& rows,
                       const Eigen::VectorXd& wts, const Eigen::VectorXd& y) {
  Eigen::VectorXd c = Eigen::VectorXd::Zero(Z.cols());
  for (size_t k = 0; k < rows.size(); ++k) {
    double wy = wts[(Eigen::Index)k] * y[(Eigen::Index)k];
    if (wy == 0.0) continue;
    for (SpMat::InnerIterator it(Z, rows[k]); it; ++it)
      c[it.col()] += wy * it.value();
  }
  return c;
}

namespace {

// Per-block working data for the alternating sweeps: local regressor values
// for every solved row plus cached category-level Gram factors.
struct BlockWork {
  const CatBlock* spec;
  std::vector<int> cat;                     // per solved row
  Eigen::MatrixXd x;                        // rows x dim local design
  std::vector<Eigen::LDLT<Eigen::MatrixXd>> factors;
  std::vector<char> seen;                   // category has any solved row
};

std::vector<BlockWork> prepare_blocks(const DesignMatrices& design,
                                      const std::vector<int>& rows,
                                      const Eigen::VectorXd& wts) {
  std::vector<BlockWork> out;
  const int m = (int)rows.size();
  for (const CatBlock& blk : design.blocks) {
    BlockWork w;
    w.spec = &blk;
    w.cat.resize(m);
    w.x = Eigen::MatrixXd::Zero(m, blk.dim);
    for (int k = 0; k < m; ++k) {
      int c = blk.category[rows[k]];
      w.cat[k] = c;
      if (c < 0) continue;
      for (SpMat::InnerIterator it(design.Z, rows[k]); it; ++it) {
        int off = it.col() - (blk.col0 + c * blk.dim);
        if (off >= 0 && off < blk.dim) w.x(k, off) = it.value();
      }
    }
    std::vector<Eigen::MatrixXd> grams(blk.n_categories,
                                       Eigen::MatrixXd::Zero(blk.dim, blk.dim));
    w.seen.assign(blk.n_categories, 0);
    for (int k = 0; k < m; ++k) {
      int c = w.cat[k];
      if (c < 0 || wts[k] == 0.0) continue;
      grams[c].selfadjointView<Eigen::Lower>().rankUpdate(w.x.row(k).transpose(),
                                                          wts[k]);
      w.seen[c] = 1;
    }
    w.factors.reserve(blk.n_categories);
    for (int c = 0; c < blk.n_categories; ++c) {
      grams[c].triangularView<Eigen::StrictlyUpper>() =
          grams[c].triangularView<Eigen::StrictlyLower>().transpose();
      // tiny ridge keeps empty or deficient categories harmless; their
      // coefficients stay at zero because the moment vector is zero there
      double tr = grams[c].trace();
      grams[c] += Eigen::MatrixXd::Identity(blk.dim, blk.dim) * (1e-14 * tr + 1e-300);
      w.factors.emplace_back(grams[c]);
    }
    out.push_back(std::move(w));
  }
  return out;
}

// One Gauss-Seidel sweep of category-wise projections applied to r in place;
// coef accumulates the per-category local coefficients when provided.
// Returns the max-abs change in fitted values.
double sweep_blocks(std::vector<BlockWork>& blocks, const Eigen::VectorXd& wts,
                    Eigen::VectorXd& r, std::vector<Eigen::MatrixXd>* coef) {
  double max_change = 0.0;
  const int m = (int)r.size();
  for (size_t b = 0; b < blocks.size(); ++b) {
    BlockWork& w = blocks[b];
    const int dim = w.spec->dim;
    Eigen::MatrixXd mom = Eigen::MatrixXd::Zero(dim, w.spec->n_categories);
    for (int k = 0; k < m; ++k) {
      int c = w.cat[k];
      if (c < 0 || wts[k] == 0.0) continue;
      mom.col(c) += (wts[k] * r[k]) * w.x.row(k).transpose();
    }
    Eigen::MatrixXd delta(dim, w.spec->n_categories);
    for (int c = 0; c < w.spec->n_categories; ++c)
      delta.col(c) = w.seen[c] ? w.factors[c].solve(mom.col(c)).eval()
                               : Eigen::VectorXd::Zero(dim).eval();
    for (int k = 0; k < m; ++k) {
      int c = w.cat[k];
      if (c < 0) continue;
      double f = w.x.row(k).dot(delta.col(c));
      if (f != 0.0) {
        r[k] -= f;
        max_change = std::max(max_change, std::abs(f));
      }
    }
    if (coef) (*coef)[b] += delta;
  }
  return max_change;
}

struct DemeanResult {
  Eigen::VectorXd residual;
  std::vector<Eigen::MatrixXd> coef;  // per block: dim x n_categories
  Convergence conv;
};

DemeanResult demean(std::vector<BlockWork>& blocks, const Eigen::VectorXd& wts,
                    const Eigen::VectorXd& y, const LsqOptions& opt,
                    bool track_coef) {
  DemeanResult out;
  out.residual = y;
  if (track_coef)
    for (const BlockWork& w : blocks)
      out.coef.push_back(Eigen::MatrixXd::Zero(w.spec->dim, w.spec->n_categories));
  double scale = std::max(1e-300, y.cwiseAbs().maxCoeff());
  double prev_ssr = out.residual.cwiseProduct(wts).dot(out.residual);
  for (int s = 0; s < opt.max_sweeps; ++s) {
    double ch = sweep_blocks(blocks, wts, out.residual,
                             track_coef ? &out.coef : nullptr);
    double ssr = out.residual.cwiseProduct(wts).dot(out.residual);
    out.conv.sweeps = s + 1;
    out.conv.final_change = ch / scale;
    bool ssr_ok = std::abs(prev_ssr - ssr) <= opt.tol_ssr * std::max(prev_ssr, 1e-300);
    if (ssr_ok || ch <= opt.tol_fitted * scale) {
      out.conv.converged = true;
      return out;
    }
    prev_ssr = ssr;
  }
  out.conv.converged = false;
  return out;
}

}  // namespace

LsqSolution solve(const DesignMatrices& design, const std::vector<int>& rows,
                  const Eigen::VectorXd& y, const Eigen::VectorXd& wts,
                  const LsqOptions& opt) {
  const int p = design.p();
  const int m = (int)rows.size();
  if ((int)y.size() != m || (int)wts.size() != m)
    throw Error(errc::bad_value, "response/weight length mismatch");

  bool dense = opt.method == LsqOptions::Method::Dense ||
               (opt.method == LsqOptions::Method::Auto &&
                (p <= opt.dense_column_limit || design.blocks.empty()));
  LsqSolution sol;
  if (dense) {
    GramFactor F(gram(design.Z, rows, wts));
    sol.coef = F.solve(moment(design.Z, rows, wts, y));
    sol.rank = F.rank();
  } else {
    auto blocks = prepare_blocks(design, rows, wts);
    DemeanResult dy = demean(blocks, wts, y, opt, false);
    sol.conv = dy.conv;
    if (!dy.conv.converged)
      throw Error(errc::solver_failure, "alternating projections did not converge in " +
                                        std::to_string(opt.max_sweeps) + " sweeps");

    const int q = (int)design.tail_cols.size();
    Eigen::VectorXd delta = Eigen::VectorXd::Zero(q);
    Eigen::MatrixXd tail_resid;
    if (q > 0) {
      Eigen::MatrixXd tails = Eigen::MatrixXd::Zero(m, q);
      for (int k = 0; k < m; ++k)
        for (SpMat::InnerIterator it(design.Z, rows[k]); it; ++it)
          for (int j = 0; j < q; ++j)
            if (design.tail_cols[j] == it.col()) tails(k, j) = it.value();
      tail_resid.resize(m, q);
      for (int j = 0; j < q; ++j)
        tail_resid.col(j) = demean(blocks, wts, tails.col(j), opt, false).residual;
      Eigen::MatrixXd G = tail_resid.transpose() * wts.asDiagonal() * tail_resid;
      Eigen::VectorXd c = tail_resid.transpose() * wts.cwiseProduct(dy.residual);
      GramFactor Ft(G);
      delta = Ft.solve(c);
    }

    // recover block coefficients on the tail-adjusted response
    Eigen::VectorXd u = y;
    if (q > 0) {
      Eigen::MatrixXd tails = Eigen::MatrixXd::Zero(m, q);
      for (int k = 0; k < m; ++k)
        for (SpMat::InnerIterator it(design.Z, rows[k]); it; ++it)
          for (int j = 0; j < q; ++j)
            if (design.tail_cols[j] == it.col()) tails(k, j) = it.value();
      u -= tails * delta;
    }
    DemeanResult du = demean(blocks, wts, u, opt, true);
    if (!du.conv.converged)
      throw Error(errc::solver_failure, "coefficient recovery did not converge");

    sol.coef = Eigen::VectorXd::Zero(p);
    for (size_t b = 0; b < blocks.size(); ++b) {
      const CatBlock& spec = *blocks[b].spec;
      for (int c = 0; c < spec.n_categories; ++c)
        for (int k = 0; k < spec.dim; ++k)
          sol.coef[spec.col0 + c * spec.dim + k] = du.coef[b](k, c);
    }
    for (int j = 0; j < q; ++j) sol.coef[design.tail_cols[j]] = delta[j];
  }

  sol.fitted.resize(m);
  for (int k = 0; k < m; ++k) {
    double f = 0;
    for (SpMat::InnerIterator it(design.Z, rows[k]); it; ++it)
      f += it.value() * sol.coef[it.col()];
    sol.fitted[k] = f;
  }
  sol.residuals = y - sol.fitted;
  return sol;
}

Eigen::MatrixXd project_out(const DesignMatrices& design,
                            const std::vector<int>& rows,
                            const Eigen::VectorXd& wts,
                            const Eigen::MatrixXd& cols,
                            const LsqOptions& opt) {
  auto blocks = prepare_blocks(design, rows, wts);
  Eigen::MatrixXd out(cols.rows(), cols.cols());
  for (int j = 0; j < cols.cols(); ++j) {
    DemeanResult r = demean(blocks, wts, cols.col(j), opt, false);
    if (!r.conv.converged)
      throw Error(errc::solver_failure, "within transformation did not converge");
    out.col(j) = r.residual;
  }
  return out;
}

}  // namespace lsq
}  // namespace didimp
