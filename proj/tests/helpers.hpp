#ifndef DIDIMP_TESTS_HELPERS_HPP
#define DIDIMP_TESTS_HELPERS_HPP

#include <map>
#include <random>
#include <string>
#include <vector>

#include "didimp/panel.hpp"

namespace didimp::test {

// Two units, three periods, unit A adopts at t=2 and B at t=3.
// Outcomes follow alpha_A=0, alpha_B=1, beta=(0,1,2) plus the cell effects,
// so every estimator admits a hand-computed value.
inline Panel twobythree(double tau_a2 = 5.0, double tau_a3 = 7.0,
                        double tau_b3 = 3.0) {
  std::vector<Obs> rows = {
      {"A", 1, 0.0, 1.0, {}, std::nullopt, {}},
      {"A", 2, 1.0 + tau_a2, 1.0, {}, std::nullopt, {}},
      {"A", 3, 2.0 + tau_a3, 1.0, {}, std::nullopt, {}},
      {"B", 1, 1.0, 1.0, {}, std::nullopt, {}},
      {"B", 2, 2.0, 1.0, {}, std::nullopt, {}},
      {"B", 3, 3.0 + tau_b3, 1.0, {}, std::nullopt, {}},
  };
  std::map<std::string, EventDate> events = {{"A", EventDate::finite(2)},
                                             {"B", EventDate::finite(3)}};
  return Panel::build(std::move(rows), events);
}

// Adds a never-treated unit C so that every period is identified on the
// untreated sample. alpha=(0,1,2), beta=(0,1,2).
inline Panel threebythree(double tau_a2 = 5.0, double tau_a3 = 7.0,
                          double tau_b3 = 3.0) {
  std::vector<Obs> rows = {
      {"A", 1, 0.0, 1.0, {}, std::nullopt, {}},
      {"A", 2, 1.0 + tau_a2, 1.0, {}, std::nullopt, {}},
      {"A", 3, 2.0 + tau_a3, 1.0, {}, std::nullopt, {}},
      {"B", 1, 1.0, 1.0, {}, std::nullopt, {}},
      {"B", 2, 2.0, 1.0, {}, std::nullopt, {}},
      {"B", 3, 3.0 + tau_b3, 1.0, {}, std::nullopt, {}},
      {"C", 1, 2.0, 1.0, {}, std::nullopt, {}},
      {"C", 2, 3.0, 1.0, {}, std::nullopt, {}},
      {"C", 3, 4.0, 1.0, {}, std::nullopt, {}},
  };
  std::map<std::string, EventDate> events = {{"A", EventDate::finite(2)},
                                             {"B", EventDate::finite(3)},
                                             {"C", EventDate::never()}};
  return Panel::build(std::move(rows), events);
}

// Staggered layout with one unit per event date in {first_event..last_event}
// plus `never` never-treated units, complete grid over t=1..periods, outcomes
// from a TWFE model with iid N(0,1) noise.
inline Panel staggered(std::mt19937_64& g, int periods = 6, int first_event = 2,
                       int last_event = 6, int per_cohort = 3, int never = 3) {
  std::vector<Obs> rows;
  std::map<std::string, EventDate> events;
  std::normal_distribution<double> nd;
  int uid = 0;
  auto add_unit = [&](EventDate e) {
    const std::string key = "u" + std::to_string(uid++);
    events[key] = e;
    const double alpha = nd(g);
    for (int t = 1; t <= periods; ++t) {
      const double tau =
          (!e.is_never() && t >= e.value()) ? 1.0 + 0.5 * (t - e.value()) : 0.0;
      rows.push_back({key, t, alpha + 0.3 * t + tau + nd(g), 1.0, {},
                      std::nullopt, {}});
    }
  };
  for (int e = first_event; e <= last_event; ++e)
    for (int r = 0; r < per_cohort; ++r) add_unit(EventDate::finite(e));
  for (int r = 0; r < never; ++r) add_unit(EventDate::never());
  return Panel::build(std::move(rows), events);
}

// Random small instance with missing cells. One never-treated unit keeps a
// complete history and every treated unit keeps its full pre-period, so the
// TWFE model stays estimable on the untreated sample.
inline Panel random_instance(std::mt19937_64& g, int max_units = 20,
                             int max_periods = 8) {
  std::uniform_int_distribution<int> nu(4, max_units);
  std::uniform_int_distribution<int> np(4, max_periods);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> nd;
  const int units = nu(g);
  const int periods = np(g);
  std::vector<Obs> rows;
  std::map<std::string, EventDate> events;
  for (int i = 0; i < units; ++i) {
    const std::string key = "u" + std::to_string(i);
    EventDate e = EventDate::never();
    if (i > 0 && u01(g) < 0.75) {
      std::uniform_int_distribution<int> ne(2, periods);
      e = EventDate::finite(ne(g));
    }
    events[key] = e;
    const double alpha = nd(g);
    for (int t = 1; t <= periods; ++t) {
      const bool treated = !e.is_never() && t >= e.value();
      // keep the anchor unit complete and never drop pre-treatment rows
      if (i > 0 && treated && u01(g) < 0.15) continue;
      const double tau = treated ? 1.0 + nd(g) : 0.0;
      rows.push_back({key, t, alpha + 0.7 * t + tau + nd(g), 1.0, {},
                      std::nullopt, {}});
    }
  }
  return Panel::build(std::move(rows), events);
}

}  // namespace didimp::test

#endif
