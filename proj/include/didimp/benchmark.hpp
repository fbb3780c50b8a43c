#ifndef DIDIMP_BENCHMARK_HPP
#define DIDIMP_BENCHMARK_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "didimp/panel.hpp"
#include "didimp/weights.hpp"

namespace didimp {

enum class NoiseKind { IidNormal, Heteroskedastic, Ar1 };

struct NoiseSpec {
  NoiseKind kind = NoiseKind::IidNormal;
  double sigma2 = 1.0;  // iid variance; per-period scale factor when
                        // heteroskedastic (var_it = sigma2 * t)
  double rho = 0.5;     // AR(1), stationary with variance sigma2
};

// Simulated staggered-adoption panel: complete units x periods grid, event
// dates uniform over {first_event..last_event} (dates past last_period mean
// the unit is never treated in sample), alpha_i = -E_i, beta_t = 3t,
// tau_it = K_it + 1.
struct DgpSpec {
  int units = 250;
  int first_period = 1;
  int last_period = 6;
  int first_event = 2;
  int last_event = 7;
  NoiseSpec noise;
  // Bump added to the outcome at t = E_i - 1. Unset: the anticipation
  // benchmark column uses 1/sqrt(units), every other column uses 0.
  std::optional<double> anticipation;
  int reps = 500;
  std::uint64_t seed = 4;
  int extra_pre_periods = 4;  // how far the more_pre column extends the panel
};

// One event date per unit, drawn once per spec (independently of reps).
std::vector<int> draw_events(const DgpSpec& spec);

// Noiseless panel for a draw; outcomes hold alpha + beta + tau only, noise
// and anticipation enter through external outcome vectors.
Panel dgp_panel(const DgpSpec& spec, const std::vector<int>& events,
                bool more_pre = false);

enum class RefKind { NotYetTreated, LastCohort };

struct RefEstimate {
  double estimate = 0.0;  // on the panel's stored outcomes
  ImpliedWeights v;
};

// Cohort-level DiD aggregator at horizon h: CATT_{e,e+h} contrasts cohort-e
// changes from the last pre-period e-1 against a control group, either every
// not-yet-treated unit (E_j > e+h) or the latest cohort only. Cohorts are
// combined with weights proportional to cohort size, matching the horizon-h
// imputation estimand on complete panels.
RefEstimate reference_estimator(const Panel& panel, RefKind kind, int h);

struct Moments {
  double variance = 0.0;
  double bias = 0.0;
};

// Exact finite-sample moments of the linear estimator v'Y when errors are
// independent across units with the given per-unit covariance, and the
// outcome is shifted by the contamination map (obs index -> shift).
Moments exact_moments(const Panel& panel, const ImpliedWeights& v,
                      const NoiseSpec& sigma,
                      const std::map<int, double>& contamination = {});

struct BenchRow {
  std::string estimator;  // imputation | dcdh | sa
  int horizon = 0;
  double exact_variance = 0.0;
  double exact_bias = 0.0;
  double mc_mean = 0.0;
  double mc_variance = 0.0;
  double coverage = 0.0;  // share of reps where the 95% interval covers h+1
};

struct BenchColumn {
  std::string name;
  std::vector<BenchRow> rows;  // estimator-major, horizon ascending
};

struct BenchReport {
  std::map<int, int> cohort_counts;  // realized event-date draw
  std::vector<BenchColumn> columns;
  int reps = 0;
  std::uint64_t seed = 0;
  double elapsed_seconds = 0.0;
};

// Column names: baseline, more_pre, hetero, ar1, anticipation; empty = all.
// Replications are split across threads; results do not depend on the split.
BenchReport run_benchmark(const DgpSpec& spec,
                          const std::vector<std::string>& columns = {},
                          int threads = 1);

}  // namespace didimp

#endif
