// Acceptance gate: one line per criterion, pinned tolerances, nonzero exit
// when any criterion fails. Each check constructs its own fixtures so a
// failure names the criterion, not a shared setup.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <vector>

#include "didimp/benchmark.hpp"
#include "didimp/cli.hpp"
#include "didimp/estimator.hpp"
#include "didimp/inference.hpp"
#include "didimp/rng.hpp"
#include "didimp/weights.hpp"
#include "helpers.hpp"

using namespace didimp;

namespace {

int g_failed = 0;

void report(int idx, const char* name, bool pass, const std::string& detail) {
  std::printf("criterion %d (%s): %s%s%s\n", idx, name, pass ? "PASS" : "FAIL",
              detail.empty() ? "" : " -- ", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failed;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

std::string fmt(const char* f, double a, double b = 0.0, double c = 0.0) {
  char buf[160];
  std::snprintf(buf, sizeof buf, f, a, b, c);
  return buf;
}

// ---------------------------------------------------------------- criterion 1
// Static OLS weights on the two-unit, three-period layout: {A2: 1, B3: 1/2,
// A3: -1/2} to 1e-10, summing to one, in under a second.
void criterion_1() {
  const auto t0 = std::chrono::steady_clock::now();
  constexpr double kTol = 1e-10;
  Panel p = test::twobythree();
  OlsWeightReport r = static_ols_weights(p);
  auto at = [&](const std::string& u, int t) {
    const int obs = *p.find_obs(*p.find_unit(u), t);
    for (const auto& [o, w] : r.w_ols)
      if (o == obs) return w;
    return 0.0;
  };
  double sum = 0.0;
  for (const auto& [o, w] : r.w_ols) {
    (void)o;
    sum += w;
  }
  const double worst =
      std::max({std::abs(at("A", 2) - 1.0), std::abs(at("B", 3) - 0.5),
                std::abs(at("A", 3) + 0.5), std::abs(sum - 1.0)});
  const double el = seconds_since(t0);
  report(1, "static OLS weights", worst <= kTol && el < 1.0,
         fmt("max deviation %.2e, %.3f s", worst, el));
}

// ---------------------------------------------------------------- criterion 2
// Cohorts {2,4} over t=1..7 with no never-treated units and the fully
// dynamic design: the detected null space must be one-dimensional with a
// witness within angle 1e-6 of the linear-trend direction.
void criterion_2() {
  constexpr double kAngleTol = 1e-6;
  std::vector<Obs> rows;
  std::map<std::string, EventDate> ev;
  for (int e : {2, 4})
    for (int i = 0; i < 3; ++i) {
      const std::string key = "e" + std::to_string(e) + "u" + std::to_string(i);
      ev[key] = EventDate::finite(e);
      for (int t = 1; t <= 7; ++t)
        rows.push_back({key, t, double(e + i + t), 1.0, {}, std::nullopt, {}});
    }
  Panel p = Panel::build(std::move(rows), ev);
  UnderidReport r = detect_underidentification(p);

  double angle = 3.14;
  if (!r.ok && r.witness.size() == (Eigen::Index)r.ks.size()) {
    Eigen::VectorXd trend(r.witness.size());
    for (size_t i = 0; i < r.ks.size(); ++i) trend[(Eigen::Index)i] = r.ks[i] + 1;
    const double cosv = std::abs(r.witness.dot(trend)) /
                        (r.witness.norm() * trend.norm());
    angle = std::acos(std::min(1.0, cosv));
  }
  report(2, "underidentification witness",
         r.deficiency == 1 && angle <= kAngleTol,
         fmt("deficiency %.0f (need 1), witness angle %.2e rad",
             double(r.deficiency), angle));
}

// ---------------------------------------------------------------- criterion 3
// Fifty random small instances: the imputation path, the joint unrestricted
// solve, and v'Y agree to 1e-9 relative; closed-form and iterative implied
// weights agree to 1e-8 max-abs.
void criterion_3() {
  constexpr double kEstTol = 1e-9;
  constexpr double kWeightTol = 1e-8;
  std::mt19937_64 g(4242);
  double worst_est = 0.0, worst_w = 0.0;
  int done = 0, attempts = 0;
  while (done < 50 && attempts < 400) {
    ++attempts;
    Panel p = test::random_instance(g);
    EstimandWeights w;
    try {
      w = build_estimand(p, EstimandSpec::att());
    } catch (const Error&) {
      continue;
    }
    if (!check_estimability(p, OutcomeModelSpec::twfe(), w).identified)
      continue;
    const double a =
        fit_imputation(p, OutcomeModelSpec::twfe(), w).estimate;
    const double b = fit_joint(p, OutcomeModelSpec::twfe(),
                               TreatmentEffectModel::unrestricted(), w)
                         .estimate;
    ImpliedWeights vc = implied_weights_closed(p, OutcomeModelSpec::twfe(), w);
    ImpliedWeights vi =
        implied_weights_iterative(p, OutcomeModelSpec::twfe(), w);
    const Eigen::Map<const Eigen::VectorXd> y(p.outcomes().data(), p.n());
    const double c = vc.v.dot(y);
    const double scale = std::max(1.0, std::abs(a));
    worst_est = std::max({worst_est, std::abs(a - b) / scale,
                          std::abs(a - c) / scale});
    worst_w = std::max(worst_w, (vc.v - vi.v).lpNorm<Eigen::Infinity>());
    ++done;
  }
  report(3, "oracle equivalence",
         done == 50 && worst_est <= kEstTol && worst_w <= kWeightTol,
         fmt("max relative estimate gap %.2e, max weight gap %.2e",
             worst_est, worst_w) +
             " over " + std::to_string(done) + " instances");
}

// ---------------------------------------------------------------- criterion 4
// Equal sensitivity: on the baseline simulated design, the bias of each
// estimator under Y = (k0 + k1 K) 1[D=0] equals -sum_w (k0 + k1 K) to 1e-9.
void criterion_4() {
  constexpr double kTol = 1e-9;
  constexpr double k0 = 0.7, k1 = 1.3;
  DgpSpec spec;
  std::vector<int> events = draw_events(spec);
  Panel p = dgp_panel(spec, events);

  Eigen::VectorXd y0 = Eigen::VectorXd::Zero(p.n());
  for (int obs = 0; obs < p.n(); ++obs)
    if (!p.treated(obs)) y0[obs] = k0 + k1 * double(*p.horizon(obs));

  auto gap = [&](const ImpliedWeights& v) {
    double rhs = 0.0;
    for (int obs = 0; obs < p.n(); ++obs)
      if (p.treated(obs))
        rhs -= v.v[obs] * (k0 + k1 * double(*p.horizon(obs)));
    return std::abs(v.v.dot(y0) - rhs);
  };

  double worst = 0.0;
  for (int h : {0, 2}) {
    EstimandWeights w = build_estimand(p, EstimandSpec::horizon(h));
    worst = std::max(
        worst, gap(implied_weights_closed(p, OutcomeModelSpec::twfe(), w)));
    worst = std::max(
        worst, gap(reference_estimator(p, RefKind::NotYetTreated, h).v));
    worst = std::max(worst,
                     gap(reference_estimator(p, RefKind::LastCohort, h).v));
  }
  report(4, "equal pre-trend sensitivity", worst <= kTol,
         fmt("max |bias - (-sum w (k0+k1 K))| = %.2e", worst));
}

// ---------------------------------------------------------------- criterion 5
// Benchmark table reproduction at 500 reps within the pinned bands.
void criterion_5() {
  constexpr double kImpBand = 0.10;
  constexpr double kRefBand = 0.15;
  constexpr double kBiasBand = 0.15;
  constexpr double kCovLo = 0.92, kCovHi = 0.97;
  static const char* kEst[3] = {"imputation", "dcdh", "sa"};
  static const double kBaselineVar[3][5] = {
      {0.0099, 0.0145, 0.0222, 0.0366, 0.0800},
      {0.0140, 0.0185, 0.0262, 0.0422, 0.0932},
      {0.0115, 0.0177, 0.0317, 0.0479, 0.0932}};
  constexpr double kMorePreH0 = 0.0080;
  constexpr double kHeteroH0 = 0.0347;
  constexpr double kAr1H0 = 0.0072;
  static const double kAnticipationH0[3] = {-0.0569, -0.0915, -0.0753};

  const auto t0 = std::chrono::steady_clock::now();
  DgpSpec spec;
  BenchReport rep = run_benchmark(spec, {}, 4);
  const double el = seconds_since(t0);

  auto row = [&](const std::string& col, const std::string& est,
                 int h) -> const BenchRow& {
    for (const auto& c : rep.columns)
      if (c.name == col)
        for (const auto& r : c.rows)
          if (r.estimator == est && r.horizon == h) return r;
    throw Error(errc::unsupported_spec,
                "missing benchmark row " + col + "/" + est);
  };
  int bad = 0;
  std::string first;
  auto expect = [&](bool ok, const std::string& what) {
    if (!ok) {
      ++bad;
      if (first.empty()) first = what;
    }
  };
  auto within = [](double x, double pin, double band) {
    return std::abs(x - pin) <= band * std::abs(pin);
  };

  for (int e = 0; e < 3; ++e)
    for (int h = 0; h < 5; ++h) {
      const BenchRow& r = row("baseline", kEst[e], h);
      expect(within(r.exact_variance, kBaselineVar[e][h],
                    e == 0 ? kImpBand : kRefBand),
             std::string("baseline variance ") + kEst[e] + " h" +
                 std::to_string(h) + fmt(" = %.4f", r.exact_variance));
      expect(r.coverage >= kCovLo && r.coverage <= kCovHi,
             std::string("baseline coverage ") + kEst[e] + " h" +
                 std::to_string(h) + fmt(" = %.3f", r.coverage));
    }
  for (int h = 0; h < 5; ++h) {
    const double imp = row("baseline", "imputation", h).exact_variance;
    expect(imp <= row("baseline", "dcdh", h).exact_variance &&
               imp <= row("baseline", "sa", h).exact_variance,
           "efficiency ordering at h" + std::to_string(h));
  }
  expect(within(row("more_pre", "imputation", 0).exact_variance, kMorePreH0,
                kImpBand),
         fmt("more_pre imputation h0 variance %.4f",
             row("more_pre", "imputation", 0).exact_variance));
  for (const char* est : {"dcdh", "sa"})
    for (int h = 0; h < 5; ++h) {
      const double a = row("more_pre", est, h).exact_variance;
      const double b = row("baseline", est, h).exact_variance;
      expect(std::abs(a - b) <= 1e-9 * std::abs(b),
             std::string("extra pre-periods changed ") + est);
    }
  expect(within(row("hetero", "imputation", 0).exact_variance, kHeteroH0,
                kImpBand),
         fmt("hetero imputation h0 variance %.4f",
             row("hetero", "imputation", 0).exact_variance));
  expect(within(row("ar1", "imputation", 0).exact_variance, kAr1H0, kImpBand),
         fmt("ar1 imputation h0 variance %.4f",
             row("ar1", "imputation", 0).exact_variance));
  for (int e = 0; e < 3; ++e)
    expect(within(row("anticipation", kEst[e], 0).exact_bias,
                  kAnticipationH0[e], kBiasBand),
           std::string("anticipation bias ") + kEst[e] +
               fmt(" = %.4f", row("anticipation", kEst[e], 0).exact_bias));
  {
    const double d4 = row("anticipation", "dcdh", 4).exact_bias;
    const double s4 = row("anticipation", "sa", 4).exact_bias;
    expect(std::abs(d4 - s4) <= 1e-12 * std::max(1.0, std::abs(d4)),
           "dcdh != sa at h4");
  }
  expect(rep.reps == 500, "rep count");
  expect(el <= 120.0, fmt("runtime %.1f s", el));

  report(5, "benchmark table reproduction", bad == 0,
         bad == 0 ? fmt("%.1f s, 500 reps, all bands hold", el)
                  : std::to_string(bad) + " checks out of band; first: " +
                        first);
}

// ---------------------------------------------------------------- criterion 6
// Conservative SE: mean sigma^2-hat across reps within 10% of the exact v'v
// on the baseline DGP, and at least exact - 2 se on a DGP with effect
// heterogeneity inside cohort-period cells.
void criterion_6() {
  constexpr double kBand = 0.10;
  constexpr int kReps = 300;
  DgpSpec spec;
  std::vector<int> events = draw_events(spec);
  Panel p = dgp_panel(spec, events);
  ImputationEngine eng(p, OutcomeModelSpec::twfe());
  EstimandWeights w = build_estimand(p, EstimandSpec::horizon(0));
  ImpliedWeights v = implied_weights_closed(p, OutcomeModelSpec::twfe(), w);
  const double exact = v.v.squaredNorm();

  VarianceSpec vs;
  vs.taubar_mode = TaubarMode::ByCohortPeriod;

  const Eigen::Map<const Eigen::VectorXd> base(p.outcomes().data(), p.n());

  // per-unit multiplicative effect heterogeneity, drawn once
  std::vector<double> bump(size_t(p.n()), 0.0);
  {
    std::mt19937_64 gh = stream(607, 0);
    std::normal_distribution<double> nd(0.0, 0.6);
    std::vector<double> u(size_t(p.n_units()));
    for (auto& x : u) x = nd(gh);
    for (int obs = 0; obs < p.n(); ++obs)
      if (p.treated(obs))
        bump[size_t(obs)] =
            (double(*p.horizon(obs)) + 1.0) * u[size_t(p.unit_of(obs))];
  }

  double mean_a = 0.0, mean_b = 0.0, ss_b = 0.0;
  for (int r = 0; r < kReps; ++r) {
    std::mt19937_64 g = stream(608, (std::uint64_t)r);
    std::normal_distribution<double> nd;
    Eigen::VectorXd noise(p.n());
    for (int i = 0; i < p.n(); ++i) noise[i] = nd(g);

    Eigen::VectorXd ya = base + noise;
    mean_a += conservative_se(p, eng.fit(ya, w), v, vs).sigma_hat_sq;

    Eigen::VectorXd yb = ya;
    for (int i = 0; i < p.n(); ++i) yb[i] += bump[size_t(i)];
    const double s2 = conservative_se(p, eng.fit(yb, w), v, vs).sigma_hat_sq;
    mean_b += s2;
    ss_b += s2 * s2;
  }
  mean_a /= kReps;
  mean_b /= kReps;
  const double sd_b = std::sqrt(
      std::max(0.0, (ss_b / kReps - mean_b * mean_b) * kReps / (kReps - 1)));
  const double se_b = sd_b / std::sqrt(double(kReps));

  const bool pass_a = std::abs(mean_a - exact) <= kBand * exact;
  const bool pass_b = mean_b >= exact - 2.0 * se_b;
  report(6, "conservative variance", pass_a && pass_b,
         fmt("homogeneous mean %.5f vs exact %.5f; ", mean_a, exact) +
             fmt("heterogeneous mean %.5f >= %.5f - 2se", mean_b, exact));
}

// ---------------------------------------------------------------- criterion 7
// Leave-out residuals: the rescaled centering equals a brute-force
// leave-one-unit-out recomputation to 1e-10 on random instances.
void criterion_7() {
  constexpr double kTol = 1e-10;
  std::mt19937_64 g(77);
  double worst = 0.0;
  int done = 0, attempts = 0, cells = 0;
  while (done < 5 && attempts < 200) {
    ++attempts;
    Panel p = test::random_instance(g);
    EstimandWeights w;
    try {
      w = build_estimand(p, EstimandSpec::att());
    } catch (const Error&) {
      continue;
    }
    if (!check_estimability(p, OutcomeModelSpec::twfe(), w).identified)
      continue;
    FitResult fit =
        fit_imputation(p, OutcomeModelSpec::twfe(), w, FitOptions{{}, true});
    ImpliedWeights v = implied_weights_closed(p, OutcomeModelSpec::twfe(), w);
    VarianceSpec vs;
    vs.taubar_mode = TaubarMode::ByHorizon;
    vs.leave_out = true;
    SeResult se = conservative_se(p, fit, v, vs);
    if (se.leave_out_fallback) continue;  // a singleton cell: nothing to test

    const auto& rows1 = p.partition().treated;
    for (size_t k = 0; k < rows1.size(); ++k) {
      if (v.v[rows1[k]] == 0.0) continue;
      const int h = *p.horizon(rows1[k]);
      const int me = p.unit_of(rows1[k]);
      double num = 0.0, den = 0.0;
      for (size_t j = 0; j < rows1.size(); ++j) {
        if (*p.horizon(rows1[j]) != h || p.unit_of(rows1[j]) == me) continue;
        const double vj = v.v[rows1[j]];
        num += vj * vj * fit.tau_cells[(Eigen::Index)j];
        den += vj * vj;
      }
      if (den == 0.0) continue;
      const double eps_lo = fit.tau_cells[(Eigen::Index)k] - num / den;
      worst = std::max(worst,
                       std::abs(se.eps_tilde[(Eigen::Index)k] - eps_lo));
      ++cells;
    }
    ++done;
  }
  report(7, "leave-out rescaling", done == 5 && cells > 0 && worst <= kTol,
         fmt("max gap %.2e over %.0f cells", worst, double(cells)) + " on " +
             std::to_string(done) + " instances");
}

// ---------------------------------------------------------------- criterion 8
// Pre-test robustness under a homoskedastic null: the robust estimate is
// uncorrelated with every lead coefficient (|corr| <= 0.1) and the nominal
// 5% test rejects between 2.5% and 7.5% of the time.
void criterion_8() {
  constexpr int kReps = 500;
  constexpr double kCorrTol = 0.1;
  DgpSpec spec;
  spec.units = 100;
  std::vector<int> events = draw_events(spec);

  // null outcomes: the DGP's two-way structure with the effect path removed
  std::vector<Obs> base_rows;
  std::map<std::string, EventDate> ev;
  for (int i = 0; i < spec.units; ++i) {
    const std::string key = "u" + std::to_string(i);
    ev[key] = EventDate::finite(events[size_t(i)]);
    for (int t = spec.first_period; t <= spec.last_period; ++t)
      base_rows.push_back({key, t, -double(events[size_t(i)]) + 3.0 * t, 1.0,
                           {}, std::nullopt, {}});
  }

  std::vector<double> taus;
  std::vector<std::vector<double>> gammas;
  int rejects = 0;
  std::vector<int> leads;
  for (int r = 0; r < kReps; ++r) {
    std::mt19937_64 g = stream(801, (std::uint64_t)r);
    std::normal_distribution<double> nd;
    std::vector<Obs> rows = base_rows;
    for (auto& o : rows) o.outcome += nd(g);
    Panel p = Panel::build(std::move(rows), ev);

    EstimandWeights w = build_estimand(p, EstimandSpec::horizon(0));
    taus.push_back(fit_imputation(p, OutcomeModelSpec::twfe(), w).estimate);

    PretestResult pt = pretest(p, OutcomeModelSpec::twfe());
    if (gammas.empty()) {
      leads = pt.leads;
      gammas.resize(leads.size());
    }
    for (size_t j = 0; j < leads.size(); ++j)
      gammas[j].push_back(pt.gamma_hat[(Eigen::Index)j]);
    if (pt.p_value < 0.05) ++rejects;
  }

  auto corr = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double ma = 0, mb = 0;
    for (int i = 0; i < kReps; ++i) ma += a[size_t(i)], mb += b[size_t(i)];
    ma /= kReps;
    mb /= kReps;
    double sab = 0, saa = 0, sbb = 0;
    for (int i = 0; i < kReps; ++i) {
      const double da = a[size_t(i)] - ma, db = b[size_t(i)] - mb;
      sab += da * db;
      saa += da * da;
      sbb += db * db;
    }
    return sab / std::sqrt(saa * sbb);
  };
  double worst_corr = 0.0;
  for (const auto& gj : gammas)
    worst_corr = std::max(worst_corr, std::abs(corr(taus, gj)));
  const double rate = double(rejects) / kReps;

  report(8, "pre-test robustness",
         worst_corr <= kCorrTol && rate >= 0.025 && rate <= 0.075,
         fmt("max |corr| %.3f over %.0f leads, rejection rate %.3f",
             worst_corr, double(gammas.size()), rate));
}

// ---------------------------------------------------------------- criterion 9
// Estimability guardrail: estimands the checker declares not identified make
// the estimate command exit with code 2 and never emit a number.
void criterion_9() {
#ifndef DIDIMP_CLI_PATH
  report(9, "estimability guardrail", false, "CLI binary path not wired in");
#else
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "didimp_acceptance";
  fs::create_directories(dir);
  const fs::path csv = dir / "two_cohorts.csv";
  {
    std::ofstream os(csv);
    os << "unit,time,outcome,event\n"
          "A,1,0,2\nA,2,6,2\nA,3,9,2\n"
          "B,1,1,3\nB,2,2,3\nB,3,6,3\n";
  }
  // the period-3 effect is outside the untreated span for this panel, so
  // every estimand that touches period 3 is declared not identified
  std::vector<Obs> rows = {{"A", 1, 0.0, 1.0, {}, std::nullopt, {}},
                           {"A", 2, 6.0, 1.0, {}, std::nullopt, {}},
                           {"A", 3, 9.0, 1.0, {}, std::nullopt, {}},
                           {"B", 1, 1.0, 1.0, {}, std::nullopt, {}},
                           {"B", 2, 2.0, 1.0, {}, std::nullopt, {}},
                           {"B", 3, 6.0, 1.0, {}, std::nullopt, {}}};
  std::map<std::string, EventDate> ev = {{"A", EventDate::finite(2)},
                                         {"B", EventDate::finite(3)}};
  Panel p = Panel::build(std::move(rows), ev);

  int bad = 0;
  std::string first;
  for (const char* raw : {"att", "horizon:0", "horizon:1"}) {
    const std::string est = raw;
    EstimandWeights w = build_estimand(p, parse_estimand(est));
    if (check_estimability(p, OutcomeModelSpec::twfe(), w).identified) {
      ++bad;
      if (first.empty()) first = est + " unexpectedly identified";
      continue;
    }
    const fs::path out = dir / "out.json";
    const fs::path err = dir / "err.json";
    const std::string cmd = std::string(DIDIMP_CLI_PATH) + " estimate --input " +
                            csv.string() + " --event-time event --estimand " +
                            est + " > " + out.string() + " 2> " + err.string();
    const int rc = std::system(cmd.c_str());
    const int code = WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
    std::ifstream is(out);
    std::ostringstream ss;
    ss << is.rdbuf();
    if (code != 2 || !ss.str().empty()) {
      ++bad;
      if (first.empty())
        first = est + " exit " + std::to_string(code) +
                (ss.str().empty() ? "" : ", output emitted");
    }
  }
  report(9, "estimability guardrail", bad == 0,
         bad == 0 ? "3 unidentified estimands: exit 2, no output" : first);
#endif
}

}  // namespace

int main() {
  criterion_1();
  criterion_2();
  criterion_3();
  criterion_4();
  criterion_5();
  criterion_6();
  criterion_7();
  criterion_8();
  criterion_9();
  std::printf("%d of 9 criteria passed\n", 9 - g_failed);
  return g_failed == 0 ? 0 : 1;
}
