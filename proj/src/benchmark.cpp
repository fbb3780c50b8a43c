#include "didimp/benchmark.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <chrono>
#include <cmath>
#include <exception>
#include <thread>

#include "didimp/estimator.hpp"
#include "didimp/inference.hpp"
#include "didimp/rng.hpp"

namespace didimp {

namespace {

constexpr std::uint64_t kEventStream = 0x4556454e54ULL;

void validate(const DgpSpec& spec) {
  if (spec.units < 2) throw Error(errc::invalid_config, "need at least 2 units");
  if (spec.reps < 1) throw Error(errc::invalid_config, "reps must be >= 1");
  if (!(spec.noise.rho > -1.0 && spec.noise.rho < 1.0))
    throw Error(errc::invalid_config, "ar(1) rho must lie in (-1, 1)");
  if (spec.noise.sigma2 <= 0)
    throw Error(errc::invalid_config, "noise variance must be positive");
  if (spec.first_period > spec.last_period)
    throw Error(errc::invalid_config, "empty period range");
  if (spec.first_event > spec.last_event)
    throw Error(errc::invalid_config, "empty event-date range");
  if (spec.first_event <= spec.first_period)
    throw Error(errc::invalid_config,
                "first event date must leave at least one pre-period");
  if (spec.first_event > spec.last_period)
    throw Error(errc::invalid_config, "no cohort is ever treated in sample");
  if (spec.extra_pre_periods < 1)
    throw Error(errc::invalid_config, "extra_pre_periods must be >= 1");
}

std::string unit_key(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "u%04d", i);
  return buf;
}

// Noise draw for one replication, panel row order. AR(1) recurses within a
// unit over consecutive periods (the DGP grid is complete).
void draw_noise(const Panel& panel, const NoiseSpec& noise, std::mt19937_64& g,
                Eigen::VectorXd& eps) {
  std::normal_distribution<double> nd(0.0, 1.0);
  const double sd = std::sqrt(noise.sigma2);
  switch (noise.kind) {
    case NoiseKind::IidNormal:
      for (int r = 0; r < panel.n(); ++r) eps[r] = sd * nd(g);
      break;
    case NoiseKind::Heteroskedastic:
      for (int r = 0; r < panel.n(); ++r) {
        int t = panel.time_of(r);
        if (t <= 0)
          throw Error(errc::invalid_config,
                      "heteroskedastic noise var_it = sigma2 * t needs "
                      "positive period values");
        eps[r] = std::sqrt(noise.sigma2 * t) * nd(g);
      }
      break;
    case NoiseKind::Ar1: {
      const double rho = noise.rho;
      const double innov = std::sqrt(1.0 - rho * rho);
      for (int u = 0; u < panel.n_units(); ++u) {
        double prev = 0.0;
        bool first = true;
        for (int r : panel.obs_of_unit(u)) {
          prev = first ? nd(g) : rho * prev + innov * nd(g);
          first = false;
          eps[r] = sd * prev;
        }
      }
      break;
    }
  }
}

struct ColumnDesign {
  std::string name;
  bool more_pre = false;
  NoiseSpec noise;
  double delta = 0.0;  // anticipation bump at K = -1
};

ColumnDesign make_column(const std::string& name, const DgpSpec& spec) {
  ColumnDesign c;
  c.name = name;
  c.noise = spec.noise;
  if (name == "baseline") {
  } else if (name == "more_pre") {
    c.more_pre = true;
  } else if (name == "hetero") {
    c.noise.kind = NoiseKind::Heteroskedastic;
  } else if (name == "ar1") {
    c.noise.kind = NoiseKind::Ar1;
  } else if (name == "anticipation") {
    c.delta =
        spec.anticipation.value_or(1.0 / std::sqrt((double)spec.units));
  } else {
    throw Error(errc::invalid_config, "unknown benchmark column '" + name + "'");
  }
  return c;
}

}  // namespace

std::vector<int> draw_events(const DgpSpec& spec) {
  validate(spec);
  auto g = stream(spec.seed, kEventStream);
  std::uniform_int_distribution<int> d(spec.first_event, spec.last_event);
  std::vector<int> ev(spec.units);
  for (int& e : ev) e = d(g);
  return ev;
}

Panel dgp_panel(const DgpSpec& spec, const std::vector<int>& events,
                bool more_pre) {
  validate(spec);
  if ((int)events.size() != spec.units)
    throw Error(errc::dimension_mismatch,
                "event vector length does not match units");
  const int first =
      spec.first_period - (more_pre ? spec.extra_pre_periods : 0);
  std::vector<Obs> rows;
  rows.reserve((size_t)spec.units * (spec.last_period - first + 1));
  std::map<std::string, EventDate> ev;
  for (int i = 0; i < spec.units; ++i) {
    const int e = events[i];
    const std::string key = unit_key(i);
    ev[key] = EventDate::finite(e);
    for (int t = first; t <= spec.last_period; ++t) {
      Obs o;
      o.unit = key;
      o.time = t;
      const int k = t - e;
      o.outcome = -double(e) + 3.0 * t + (k >= 0 ? k + 1.0 : 0.0);
      rows.push_back(std::move(o));
    }
  }
  return Panel::build(std::move(rows), ev);
}

RefEstimate reference_estimator(const Panel& panel, RefKind kind, int h) {
  if (h < 0) throw Error(errc::invalid_config, "horizon must be >= 0");
  const auto& cohorts = panel.cohorts();

  // control cohort for the last-cohort rule: never-treated if present,
  // otherwise the latest event date
  EventDate last = EventDate::never();
  if (kind == RefKind::LastCohort && !cohorts.count(last)) {
    if (cohorts.empty()) throw Error(errc::empty_support, "no units");
    last = cohorts.rbegin()->first;
  }

  struct CohortPiece {
    std::vector<int> treated;   // units with both t and e-1 observed
    std::vector<int> controls;  // same requirement
    int t = 0, ref = 0;
  };
  std::vector<CohortPiece> pieces;
  int n1 = 0;
  for (const auto& [e, units] : cohorts) {
    if (e.is_never()) continue;
    CohortPiece piece;
    piece.t = e.value() + h;
    piece.ref = e.value() - 1;
    bool in_sample = false;
    for (int t : panel.periods())
      if (t == piece.t) in_sample = true;
    if (!in_sample) continue;
    for (int u : units)
      if (panel.find_obs(u, piece.t) && panel.find_obs(u, piece.ref))
        piece.treated.push_back(u);
    if (piece.treated.empty()) continue;

    if (kind == RefKind::NotYetTreated) {
      for (const auto& [e2, units2] : cohorts) {
        if (!e2.is_never() && e2.value() <= piece.t) continue;
        for (int u : units2)
          if (panel.find_obs(u, piece.t) && panel.find_obs(u, piece.ref))
            piece.controls.push_back(u);
      }
    } else {
      if (!last.is_never() && last.value() <= piece.t) {
        throw Error(errc::empty_control_group,
                    "latest cohort is already treated at period " +
                        std::to_string(piece.t));
      }
      for (int u : cohorts.at(last))
        if (panel.find_obs(u, piece.t) && panel.find_obs(u, piece.ref))
          piece.controls.push_back(u);
    }
    if (piece.controls.empty())
      throw Error(errc::empty_control_group,
                  "no control units for cohort " + std::to_string(e.value()) +
                      " at period " + std::to_string(piece.t));
    n1 += (int)piece.treated.size();
    pieces.push_back(std::move(piece));
  }
  if (n1 == 0)
    throw Error(errc::empty_support,
                "no treated observations at horizon " + std::to_string(h));

  Eigen::VectorXd v = Eigen::VectorXd::Zero(panel.n());
  for (const auto& piece : pieces) {
    const double wu = 1.0 / n1;  // cohort-size weights: 1/N_h per cell
    for (int u : piece.treated) {
      v[*panel.find_obs(u, piece.t)] += wu;
      v[*panel.find_obs(u, piece.ref)] -= wu;
    }
    const double wc =
        (double)piece.treated.size() / n1 / (double)piece.controls.size();
    for (int u : piece.controls) {
      v[*panel.find_obs(u, piece.t)] -= wc;
      v[*panel.find_obs(u, piece.ref)] += wc;
    }
  }

  RefEstimate out;
  out.v = implied_from_vector(panel, std::move(v));
  std::vector<double> y = panel.outcomes();
  out.estimate = out.v.value(y.data());
  return out;
}

Moments exact_moments(const Panel& panel, const ImpliedWeights& v,
                      const NoiseSpec& sigma,
                      const std::map<int, double>& contamination) {
  if (v.v.size() != panel.n())
    throw Error(errc::dimension_mismatch,
                "weight vector length does not match the panel");
  Moments m;
  switch (sigma.kind) {
    case NoiseKind::IidNormal:
      m.variance = sigma.sigma2 * v.v.squaredNorm();
      break;
    case NoiseKind::Heteroskedastic:
      for (int r = 0; r < panel.n(); ++r) {
        if (v.v[r] == 0.0) continue;
        int t = panel.time_of(r);
        if (t <= 0)
          throw Error(errc::invalid_config,
                      "heteroskedastic noise var_it = sigma2 * t needs "
                      "positive period values");
        m.variance += sigma.sigma2 * t * v.v[r] * v.v[r];
      }
      break;
    case NoiseKind::Ar1: {
      if (!(sigma.rho > -1.0 && sigma.rho < 1.0))
        throw Error(errc::invalid_config, "ar(1) rho must lie in (-1, 1)");
      for (int u = 0; u < panel.n_units(); ++u) {
        std::vector<std::pair<int, double>> cells;  // (time, weight)
        for (int r : panel.obs_of_unit(u))
          if (v.v[r] != 0.0) cells.emplace_back(panel.time_of(r), v.v[r]);
        for (const auto& [ta, va] : cells)
          for (const auto& [tb, vb] : cells)
            m.variance +=
                sigma.sigma2 * va * vb * std::pow(sigma.rho, std::abs(ta - tb));
      }
      break;
    }
  }
  for (const auto& [obs, delta] : contamination) {
    if (obs < 0 || obs >= panel.n())
      throw Error(errc::unknown_observation,
                  "contamination references observation " +
                      std::to_string(obs));
    m.bias += v.v[obs] * delta;
  }
  return m;
}

BenchReport run_benchmark(const DgpSpec& spec,
                          const std::vector<std::string>& columns,
                          int threads) {
  validate(spec);
  const auto t_start = std::chrono::steady_clock::now();
  std::vector<std::string> names = columns;
  if (names.empty())
    names = {"baseline", "more_pre", "hetero", "ar1", "anticipation"};

  BenchReport report;
  report.reps = spec.reps;
  report.seed = spec.seed;
  const std::vector<int> events = draw_events(spec);
  for (int e : events) ++report.cohort_counts[e];

  const int H = spec.last_period - spec.first_event + 1;
  const int n_est = 3;
  const double z = boost::math::quantile(boost::math::normal(), 0.975);
  threads = std::clamp(threads, 1, spec.reps);

  for (const auto& name : names) {
    const ColumnDesign col = make_column(name, spec);
    const Panel panel = dgp_panel(spec, events, col.more_pre);
    const ImputationEngine engine(panel, OutcomeModelSpec::twfe());

    std::map<int, double> contamination;
    if (col.delta != 0.0)
      for (int r = 0; r < panel.n(); ++r)
        if (auto k = panel.horizon(r); k && *k == -1)
          contamination[r] = col.delta;

    std::vector<EstimandWeights> w_h;
    std::vector<ImpliedWeights> v_all;  // [est * H + h]
    v_all.reserve((size_t)n_est * H);
    std::vector<Moments> mom((size_t)n_est * H);
    for (int h = 0; h < H; ++h)
      w_h.push_back(build_estimand(panel, EstimandSpec::horizon(h)));
    for (int h = 0; h < H; ++h)
      v_all.push_back(implied_weights_closed(engine, w_h[h]));
    for (int h = 0; h < H; ++h)
      v_all.push_back(reference_estimator(panel, RefKind::NotYetTreated, h).v);
    for (int h = 0; h < H; ++h)
      v_all.push_back(reference_estimator(panel, RefKind::LastCohort, h).v);
    for (int k = 0; k < n_est * H; ++k)
      mom[k] = exact_moments(panel, v_all[k], col.noise, contamination);

    Eigen::VectorXd y_base(panel.n());
    {
      std::vector<double> y0 = panel.outcomes();
      for (int r = 0; r < panel.n(); ++r) y_base[r] = y0[r];
      for (const auto& [obs, delta] : contamination) y_base[obs] += delta;
    }

    // per-rep slots make the reduction independent of the thread split
    std::vector<std::vector<double>> est((size_t)n_est * H,
                                         std::vector<double>(spec.reps));
    std::vector<std::vector<char>> cov((size_t)n_est * H,
                                       std::vector<char>(spec.reps));
    VarianceSpec vspec;
    vspec.taubar_mode = TaubarMode::ByCohortPeriod;

    auto worker = [&](int r0, int r1) {
      Eigen::VectorXd eps(panel.n()), y(panel.n());
      for (int rep = r0; rep < r1; ++rep) {
        auto g = stream(spec.seed, (std::uint64_t)rep);
        draw_noise(panel, col.noise, g, eps);
        y = y_base + eps;
        for (int h = 0; h < H; ++h) {
          const double truth = h + 1.0;
          FitResult fr = engine.fit(y, w_h[h]);
          SeResult se = conservative_se(panel, fr, v_all[h], vspec);
          est[h][rep] = fr.estimate;
          cov[h][rep] = std::abs(fr.estimate - truth) <= z * se.sigma_hat;
          for (int e = 1; e < n_est; ++e) {
            const size_t k = (size_t)e * H + h;
            const double val = v_all[k].value(y.data());
            est[k][rep] = val;
            cov[k][rep] =
                std::abs(val - truth) <= z * std::sqrt(mom[k].variance);
          }
        }
      }
    };
    if (threads == 1) {
      worker(0, spec.reps);
    } else {
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errs(threads);
      const int chunk = (spec.reps + threads - 1) / threads;
      for (int w = 0; w < threads; ++w) {
        const int r0 = w * chunk, r1 = std::min(spec.reps, r0 + chunk);
        pool.emplace_back([&, w, r0, r1] {
          try {
            if (r0 < r1) worker(r0, r1);
          } catch (...) {
            errs[w] = std::current_exception();
          }
        });
      }
      for (auto& th : pool) th.join();
      for (auto& e : errs)
        if (e) std::rethrow_exception(e);
    }

    BenchColumn bc;
    bc.name = name;
    const char* kinds[3] = {"imputation", "dcdh", "sa"};
    for (int e = 0; e < n_est; ++e)
      for (int h = 0; h < H; ++h) {
        const size_t k = (size_t)e * H + h;
        BenchRow row;
        row.estimator = kinds[e];
        row.horizon = h;
        row.exact_variance = mom[k].variance;
        row.exact_bias = mom[k].bias;
        double mean = 0;
        for (double x : est[k]) mean += x;
        mean /= spec.reps;
        double var = 0;
        for (double x : est[k]) var += (x - mean) * (x - mean);
        row.mc_mean = mean;
        row.mc_variance = spec.reps > 1 ? var / (spec.reps - 1) : 0.0;
        int hits = 0;
        for (char c : cov[k]) hits += c;
        row.coverage = double(hits) / spec.reps;
        bc.rows.push_back(std::move(row));
      }
    report.columns.push_back(std::move(bc));
  }

  report.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return report;
}

}  // namespace didimp
