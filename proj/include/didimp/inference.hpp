#ifndef DIDIMP_INFERENCE_HPP
#define DIDIMP_INFERENCE_HPP

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "didimp/estimator.hpp"
#include "didimp/weights.hpp"

namespace didimp {

enum class TaubarMode { Auto, Single, ByCohortPeriod, ByHorizon };

struct VarianceSpec {
  TaubarMode taubar_mode = TaubarMode::Auto;
  bool leave_out = false;
  // Auto resolves to ByCohortPeriod when every cohort-period cell on the
  // weight support has at least this many treated observations.
  int auto_cell_minimum = 5;
};

struct SeResult {
  double sigma_hat = 0.0;
  double sigma_hat_sq = 0.0;
  TaubarMode mode = TaubarMode::Single;  // resolved mode
  bool leave_out = false;
  bool degenerate_taubar = false;   // some group had a zero denominator
  bool leave_out_fallback = false;  // singleton-unit group, factor skipped
  std::vector<std::pair<std::string, double>> taubar;
  // Centered effect residuals, aligned with partition().treated (zero off
  // the weight support); after leave-out rescaling when enabled.
  Eigen::VectorXd eps_tilde;
  // Per-unit cluster sums whose squares add up to sigma_hat_sq.
  Eigen::VectorXd scores;
  std::vector<std::string> notes;
};

SeResult conservative_se(const Panel& panel, const FitResult& fit,
                         const ImpliedWeights& v, const VarianceSpec& spec = {});

// Clustered cross-products of the per-unit scores; diagonal entries equal
// conservative_se of each component.
Eigen::MatrixXd covariance_matrix(const Panel& panel,
                                  const std::vector<const FitResult*>& fits,
                                  const std::vector<const ImpliedWeights*>& vs,
                                  const VarianceSpec& spec = {});

enum class PretestMode { HomoskedasticF, ClusterWald };

struct PretestResult {
  Eigen::VectorXd gamma_hat;
  Eigen::MatrixXd cov_gamma;
  double stat = 0.0;
  int df1 = 0;      // number of tested leads
  double df2 = 0.0; // residual dof (homoskedastic mode only)
  double p_value = 1.0;
  PretestMode mode = PretestMode::HomoskedasticF;
  std::vector<int> leads;  // j for tested indicators of K = -j
  std::vector<std::string> warnings;
};

// Lead-anticipation test estimated on untreated observations only.
// k = 0 picks min(4, deepest observed lead - 1).
PretestResult pretest(const Panel& panel, const OutcomeModelSpec& model,
                      int k = 0, PretestMode mode = PretestMode::HomoskedasticF);

}  // namespace didimp

#endif
