#ifndef DIDIMP_ESTIMATOR_HPP
#define DIDIMP_ESTIMATOR_HPP

#include <Eigen/Dense>
#include <optional>
#include <string>
#include <vector>

#include "didimp/design.hpp"
#include "didimp/lsq.hpp"
#include "didimp/panel.hpp"

namespace didimp {

struct FitOptions {
  lsq::LsqOptions lsq;
  // Impute every treated cell, not just the estimand support.
  bool compute_all_cells = false;
};

struct FitResult {
  std::string label;
  double estimate = 0.0;
  // Outcome-model coefficients, aligned with the design columns.
  Eigen::VectorXd coef;
  // Restricted path only.
  Eigen::VectorXd theta;
  std::vector<std::string> theta_names;
  // Aligned with panel.partition().treated; NaN = not computed / not imputable.
  Eigen::VectorXd tau_cells;
  Eigen::VectorXd y0_hat;
  std::vector<char> imputable;
  // Aligned with panel.partition().untreated.
  Eigen::VectorXd resid0;
  int rank0 = -1;
  lsq::Convergence conv;

  std::optional<double> tau_at(const Panel& panel, const std::string& unit,
                               int time) const;
};

// Caches the untreated-sample factorization so many outcomes/estimands can be
// fit against one design. Immutable after construction; fit() is const and
// safe to call concurrently.
class ImputationEngine {
 public:
  ImputationEngine(const Panel& panel, const OutcomeModelSpec& model,
                   const FitOptions& opt = {});

  const Panel& panel() const { return panel_; }
  const DesignMatrices& design() const { return design_; }
  const lsq::GramFactor& untreated_factor() const { return F0_; }
  bool imputable_cell(int treated_index) const {
    return imputable_[treated_index] != 0;
  }

  // y is length-N in panel row order; the overload uses panel outcomes.
  FitResult fit(const Eigen::VectorXd& y, const EstimandWeights& w) const;
  FitResult fit(const EstimandWeights& w) const;

 private:
  const Panel& panel_;
  FitOptions opt_;
  DesignMatrices design_;
  lsq::GramFactor F0_;
  Eigen::VectorXd wts0_;
  std::vector<char> imputable_;
};

FitResult fit_imputation(const Panel& panel, const OutcomeModelSpec& model,
                         const EstimandWeights& w, const FitOptions& opt = {});
FitResult fit_imputation(const Panel& panel, const OutcomeModelSpec& model,
                         const EstimandSpec& spec, const FitOptions& opt = {});

// Joint regression of Y on the outcome model plus D * (Gamma theta); equals
// the imputation path when Gamma is unrestricted.
FitResult fit_joint(const Panel& panel, const OutcomeModelSpec& model,
                    const TreatmentEffectModel& tem, const EstimandWeights& w,
                    const FitOptions& opt = {});

// Treated-side weights w* such that the restricted-model estimate equals the
// unrestricted imputation estimator run with w*.
EstimandWeights adjusted_weights(const Panel& panel,
                                 const OutcomeModelSpec& model,
                                 const TreatmentEffectModel& tem,
                                 const EstimandWeights& w);

}  // namespace didimp

#endif
