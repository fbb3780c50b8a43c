#ifndef DIDIMP_WEIGHTS_HPP
#define DIDIMP_WEIGHTS_HPP

#include <Eigen/Dense>
#include <map>
#include <string>
#include <vector>

#include "didimp/estimator.hpp"

namespace didimp {

// Per-observation weights v with estimate = v'Y. Treated entries equal the
// estimand weights whenever the effect model is unrestricted.
struct ImpliedWeights {
  Eigen::VectorXd v;  // length N, panel row order
  double herfindahl = 0.0;  // sum over units of (sum_t |v_it|)^2
  double n_H = 0.0;         // 1 / herfindahl
  double sum_treated = 0.0;
  double sum_untreated = 0.0;
  lsq::Convergence conv;  // iterative path only

  double value(double const* y) const;
};

// Wraps a raw weight vector with the standard diagnostics (herfindahl etc.).
ImpliedWeights implied_from_vector(const Panel& panel, Eigen::VectorXd v);

// Closed form through the cached untreated factorization (unrestricted model).
ImpliedWeights implied_weights_closed(const ImputationEngine& eng,
                                      const EstimandWeights& w);
// Convenience form; restricted effect models are routed through
// adjusted_weights and then the unrestricted closed form.
ImpliedWeights implied_weights_closed(
    const Panel& panel, const OutcomeModelSpec& model, const EstimandWeights& w,
    const TreatmentEffectModel& tem = TreatmentEffectModel::unrestricted());

struct IterativeOptions {
  double tol = 1e-10;  // max-abs coefficient change per sweep
  int max_sweeps = 10000;
};

// Block Gauss-Seidel on the untreated normal equations; avoids any dense
// p x p factorization so it scales to many fixed-effect columns.
ImpliedWeights implied_weights_iterative(const Panel& panel,
                                         const OutcomeModelSpec& model,
                                         const EstimandWeights& w,
                                         const IterativeOptions& opt = {});

// Diagnostics for the static two-way FE regression of Y on D.
struct OlsWeightReport {
  std::vector<std::pair<int, double>> w_ols;  // treated obs, sorted by obs id
  double share_negative = 0.0;  // fraction of treated cells with w < 0
  double mass_negative = 0.0;   // sum of the negative weights
  std::map<int, double> by_horizon;
  Eigen::VectorXd dtilde;  // residualized treatment, all rows
};

OlsWeightReport static_ols_weights(const Panel& panel);

// Rank diagnostic for the dynamic (event-study) regression with a full set
// of lead/lag indicators. drop_leads lists the normalized leads (tau_{-j}=0).
struct DynamicLayout {
  std::vector<int> drop_leads = {1};
};

struct UnderidReport {
  bool ok = true;
  int deficiency = 0;
  std::vector<int> ks;      // included horizon values, ascending
  Eigen::VectorXd witness;  // tau coordinates of one kernel direction,
                            // unit inf-norm; empty when ok
};

UnderidReport detect_underidentification(const Panel& panel,
                                         const DynamicLayout& layout = {});

}  // namespace didimp

#endif
