#ifndef DIDIMP_LSQ_HPP
#define DIDIMP_LSQ_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <optional>
#include <string>
#include <vector>

#include "didimp/design.hpp"

namespace didimp {
namespace lsq {

using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;

// Minimum-norm solver for systems G x = b with G = X'WX, via a spectral
// factorization with relative threshold kRankTol. Also exposes the kernel,
// which drives rank reports and per-cell imputability checks.
class GramFactor {
 public:
  GramFactor() = default;
  explicit GramFactor(const Eigen::MatrixXd& gram, double rel_tol = kRankTol);

  Eigen::VectorXd solve(const Eigen::VectorXd& rhs) const;
  Eigen::MatrixXd solve(const Eigen::MatrixXd& rhs) const;
  int rank() const { return rank_; }
  int dim() const { return static_cast<int>(eval_.size()); }
  const Eigen::MatrixXd& null_basis() const { return null_; }
  // Max |N'x| over kernel directions; ~0 means x is orthogonal to the kernel.
  double kernel_component(const Eigen::VectorXd& x) const;

 private:
  Eigen::MatrixXd evec_, null_;
  Eigen::VectorXd eval_, inv_eval_;
  int rank_ = 0;
};

struct Convergence {
  int sweeps = 0;
  double final_change = 0.0;
  bool converged = true;
};

struct LsqOptions {
  enum class Method { Auto, Dense, Alternating };
  Method method = Method::Auto;
  double tol_ssr = 1e-10;       // relative SSR change between sweeps
  double tol_fitted = 1e-9;     // max-abs fitted change, relative to scale
  int max_sweeps = 10000;
  // Auto switches to the alternating path above this many design columns.
  int dense_column_limit = 50000;
};

struct LsqSolution {
  Eigen::VectorXd coef;
  Eigen::VectorXd fitted;     // on the solved rows, in their given order
  Eigen::VectorXd residuals;  // response - fitted
  int rank = -1;              // dense path only
  Convergence conv;
};

// Weighted Gram/moment accumulators over a row subset of a sparse design.
Eigen::MatrixXd gram(const SpMat& Z, const std::vector<int>& rows,
                     const Eigen::VectorXd& wts);
Eigen::VectorXd moment(const SpMat& Z, const std::vector<int>& rows,
                       const Eigen::VectorXd& wts, const Eigen::VectorXd& y);

// Solve min over coef of sum_r wts_r (y_r - Z_r'coef)^2 for rows `rows`.
// y and wts are indexed by position in `rows`. The alternating path needs the
// design's categorical block structure; tail columns are solved densely after
// the within transformation.
LsqSolution solve(const DesignMatrices& design, const std::vector<int>& rows,
                  const Eigen::VectorXd& y, const Eigen::VectorXd& wts,
                  const LsqOptions& opt = {});

// Within transformation: project the FE blocks out of a set of columns.
// Returns residualized copies; used for FWL-style partialled regressions.
Eigen::MatrixXd project_out(const DesignMatrices& design,
                            const std::vector<int>& rows,
                            const Eigen::VectorXd& wts,
                            const Eigen::MatrixXd& cols,
                            const LsqOptions& opt = {});

}  // namespace lsq
}  // namespace didimp

#endif
