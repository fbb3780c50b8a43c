#include "didimp/cli.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "didimp/estimator.hpp"
#include "didimp/weights.hpp"

namespace didimp {

namespace {

std::string f17(double x) {
  char b[40];
  std::snprintf(b, sizeof b, "%.17g", x);
  return b;
}

std::string f4(double x) {
  char b[40];
  std::snprintf(b, sizeof b, "%.4g", x);
  return b;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error(errc::io_error, "cannot open '" + path + "' for writing");
  f << text;
  if (!f) throw Error(errc::io_error, "failed writing '" + path + "'");
}

std::string taubar_name(TaubarMode m) {
  switch (m) {
    case TaubarMode::Single: return "single";
    case TaubarMode::ByCohortPeriod: return "by_cohort_period";
    case TaubarMode::ByHorizon: return "by_horizon";
    default: return "auto";
  }
}

TaubarMode taubar_from(const std::string& s) {
  if (s == "auto") return TaubarMode::Auto;
  if (s == "single") return TaubarMode::Single;
  if (s == "by_cohort_period") return TaubarMode::ByCohortPeriod;
  if (s == "by_horizon") return TaubarMode::ByHorizon;
  throw Error(errc::invalid_config, "unknown taubar mode '" + s + "'");
}

std::string pretest_mode_name(PretestMode m) {
  return m == PretestMode::HomoskedasticF ? "homoskedastic_f" : "cluster_wald";
}

PretestMode pretest_mode_from(const std::string& s) {
  if (s == "f" || s == "homoskedastic_f") return PretestMode::HomoskedasticF;
  if (s == "wald" || s == "cluster_wald") return PretestMode::ClusterWald;
  throw Error(errc::invalid_config, "unknown pretest mode '" + s + "'");
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

EstimandSpec estimand_from_json(const nlohmann::json& j);

EstimandSpec estimand_from_kind(const nlohmann::json& j) {
  const std::string kind = j.at("kind").get<std::string>();
  if (kind == "att") return EstimandSpec::att();
  if (kind == "horizon") return EstimandSpec::horizon(j.at("h").get<int>());
  if (kind == "balanced_horizon")
    return EstimandSpec::balanced_horizon(
        j.at("h").get<int>(), j.at("require").get<std::vector<int>>());
  if (kind == "cohort") return EstimandSpec::cohort_att(j.at("e").get<int>());
  if (kind == "difference")
    return EstimandSpec::difference(estimand_from_json(j.at("a")),
                                    estimand_from_json(j.at("b")));
  if (kind == "per_dose")
    return EstimandSpec::per_dose(j.value("total", false));
  if (kind == "custom") {
    std::vector<EstimandSpec::CustomCell> cells;
    for (const auto& c : j.at("cells"))
      cells.push_back({c.at("unit").get<std::string>(), c.at("time").get<int>(),
                       c.value("w", 1.0)});
    return EstimandSpec::custom_cells(std::move(cells));
  }
  throw Error(errc::invalid_config, "unknown estimand kind '" + kind + "'");
}

EstimandSpec estimand_from_json(const nlohmann::json& j) {
  if (j.is_string()) return parse_estimand(j.get<std::string>());
  EstimandSpec s = estimand_from_kind(j);
  if (j.contains("label")) s.label = j.at("label").get<std::string>();
  return s;
}

OutcomeModelSpec model_from_json(const nlohmann::json& j) {
  OutcomeModelSpec m;
  if (j.contains("unit_terms")) {
    for (const auto& t : j.at("unit_terms")) {
      UnitTerm u;
      if (t.is_string()) {
        const std::string s = t.get<std::string>();
        if (s == "intercept") u.kind = UnitTermKind::Intercept;
        else if (s == "trend") u.kind = UnitTermKind::Trend;
        else
          throw Error(errc::invalid_config, "unknown unit term '" + s + "'");
      } else {
        u.kind = UnitTermKind::Covariate;
        u.covariate = t.at("covariate").get<std::string>();
      }
      m.unit_terms.push_back(std::move(u));
    }
  } else {
    m.unit_terms = {UnitTerm{UnitTermKind::Intercept, ""}};
  }
  if (j.contains("common_terms")) {
    for (const auto& t : j.at("common_terms")) {
      CommonTerm c;
      if (t.is_string()) {
        const std::string s = t.get<std::string>();
        if (s == "period_fe") c.kind = CommonTermKind::PeriodFE;
        else
          throw Error(errc::invalid_config, "unknown common term '" + s + "'");
      } else if (t.contains("group_fe")) {
        c.kind = CommonTermKind::GroupFE;
        c.name = t.at("group_fe").get<std::string>();
      } else if (t.contains("covariate")) {
        c.kind = CommonTermKind::Covariate;
        c.name = t.at("covariate").get<std::string>();
      } else if (t.contains("leads")) {
        c.kind = CommonTermKind::LeadIndicators;
        c.leads = t.at("leads").get<std::vector<int>>();
      } else {
        throw Error(errc::invalid_config, "unknown common term object");
      }
      m.common_terms.push_back(std::move(c));
    }
  } else {
    m.common_terms = {CommonTerm{CommonTermKind::PeriodFE, "", {}}};
  }
  if (j.contains("normalize_period") && !j.at("normalize_period").is_null())
    m.normalize_period = j.at("normalize_period").get<int>();
  return m;
}

TreatmentEffectModel effects_from_json(const nlohmann::json& j) {
  if (j.is_string()) {
    const std::string s = j.get<std::string>();
    if (s == "unrestricted") return TreatmentEffectModel::unrestricted();
    if (s == "constant") return TreatmentEffectModel::constant();
    if (s == "by_horizon") return TreatmentEffectModel::by_horizon();
    if (s == "by_cohort") return TreatmentEffectModel::by_cohort();
    throw Error(errc::invalid_config, "unknown effects model '" + s + "'");
  }
  if (j.contains("by_horizon"))
    return TreatmentEffectModel::by_horizon(j.at("by_horizon").get<int>());
  throw Error(errc::invalid_config, "unknown effects model object");
}

NoiseSpec noise_from_json(const nlohmann::json& j) {
  NoiseSpec n;
  const std::string kind = j.value("kind", std::string("iid"));
  if (kind == "iid") n.kind = NoiseKind::IidNormal;
  else if (kind == "hetero") n.kind = NoiseKind::Heteroskedastic;
  else if (kind == "ar1") n.kind = NoiseKind::Ar1;
  else
    throw Error(errc::invalid_config, "unknown noise kind '" + kind + "'");
  n.sigma2 = j.value("sigma2", 1.0);
  n.rho = j.value("rho", 0.5);
  return n;
}

nlohmann::ordered_json warnings_to_json(const std::vector<CliWarning>& ws) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& w : ws)
    arr.push_back({{"code", w.code}, {"message", w.message}});
  return arr;
}

std::vector<CliWarning> warnings_from_json(const nlohmann::json& arr) {
  std::vector<CliWarning> ws;
  for (const auto& w : arr)
    ws.push_back({w.at("code").get<std::string>(),
                  w.at("message").get<std::string>()});
  return ws;
}

std::vector<CliWarning> panel_warnings(const PanelWarnings& pw) {
  std::vector<CliWarning> out;
  for (const auto& u : pw.dropped_always_treated)
    out.push_back({"always_treated_dropped",
                   "unit '" + u + "' is treated in every observed period"});
  if (pw.dropped_missing_outcome > 0)
    out.push_back({"missing_outcome_dropped",
                   std::to_string(pw.dropped_missing_outcome) +
                       " rows lacked an outcome value"});
  for (const auto& m : pw.messages) out.push_back({"panel_note", m});
  return out;
}

LoadResult load_input(const RunConfig& cfg) {
  if (cfg.input.empty())
    throw Error(errc::invalid_config, "no input file given");
  return load_panel_file(cfg.input, cfg.schema);
}

ImpliedWeights weights_for(const RunConfig& cfg, const Panel& panel,
                           const EstimandWeights& w, lsq::Convergence* conv) {
  const bool iterative = cfg.weights_method == "iterative";
  ImpliedWeights v;
  if (!cfg.effects.restricted()) {
    v = iterative ? implied_weights_iterative(panel, cfg.model, w)
                  : implied_weights_closed(panel, cfg.model, w);
  } else {
    EstimandWeights adj = adjusted_weights(panel, cfg.model, cfg.effects, w);
    v = iterative ? implied_weights_iterative(panel, cfg.model, adj)
                  : implied_weights_closed(panel, cfg.model, adj);
  }
  if (conv) *conv = v.conv;
  return v;
}

PretestSummary summarize_pretest(const PretestResult& pr) {
  PretestSummary s;
  s.stat = pr.stat;
  s.p_value = pr.p_value;
  s.df1 = pr.df1;
  s.df2 = pr.df2;
  s.mode = pretest_mode_name(pr.mode);
  s.leads = pr.leads;
  for (Eigen::Index i = 0; i < pr.gamma_hat.size(); ++i) {
    s.gamma.push_back(pr.gamma_hat[i]);
    s.gamma_se.push_back(std::sqrt(std::max(0.0, pr.cov_gamma(i, i))));
  }
  for (const auto& w : pr.warnings) s.warnings.push_back({"pretest_lead_dropped", w});
  return s;
}

nlohmann::ordered_json pretest_to_json(const PretestSummary& s) {
  return {{"stat", s.stat},      {"p_value", s.p_value},
          {"df1", s.df1},        {"df2", s.df2},
          {"mode", s.mode},      {"leads", s.leads},
          {"gamma", s.gamma},    {"gamma_se", s.gamma_se},
          {"warnings", warnings_to_json(s.warnings)}};
}

PretestSummary pretest_from_json(const nlohmann::json& j) {
  PretestSummary s;
  s.stat = j.at("stat").get<double>();
  s.p_value = j.at("p_value").get<double>();
  s.df1 = j.at("df1").get<int>();
  s.df2 = j.at("df2").get<double>();
  s.mode = j.at("mode").get<std::string>();
  s.leads = j.at("leads").get<std::vector<int>>();
  s.gamma = j.at("gamma").get<std::vector<double>>();
  s.gamma_se = j.at("gamma_se").get<std::vector<double>>();
  s.warnings = warnings_from_json(j.at("warnings"));
  return s;
}

}  // namespace

EstimandSpec parse_estimand(const std::string& text) {
  if (text == "att") return EstimandSpec::att();
  if (text == "per_dose") return EstimandSpec::per_dose(false);
  if (text == "per_dose_total") return EstimandSpec::per_dose(true);
  try {
    // diff operands may themselves contain colons, so peel the prefix first
    if (text.rfind("diff:", 0) == 0) {
      auto ab = split(text.substr(5), '~');
      if (ab.size() == 2)
        return EstimandSpec::difference(parse_estimand(ab[0]),
                                        parse_estimand(ab[1]));
    } else {
      auto parts = split(text, ':');
      if (parts[0] == "horizon" && parts.size() == 2)
        return EstimandSpec::horizon(std::stoi(parts[1]));
      if (parts[0] == "cohort" && parts.size() == 2)
        return EstimandSpec::cohort_att(std::stoi(parts[1]));
      if (parts[0] == "balanced" && parts.size() == 3) {
        std::vector<int> req;
        for (const auto& r : split(parts[2], ','))
          if (!r.empty()) req.push_back(std::stoi(r));
        return EstimandSpec::balanced_horizon(std::stoi(parts[1]),
                                              std::move(req));
      }
    }
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    // malformed numbers fall through to the uniform message
  }
  throw Error(errc::invalid_config, "cannot parse estimand '" + text + "'");
}

RunConfig config_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known = {
      "input",      "columns",     "keep_always_treated",
      "model",      "effects",     "estimands",
      "variance",   "pretest",     "weights_method",
      "drop_leads", "max_horizon", "simulate",
      "threads",    "out",         "format",
      "tau_csv",    "weights_csv"};
  for (const auto& [key, val] : j.items()) {
    (void)val;
    if (!known.count(key))
      throw Error(errc::invalid_config, "unknown config key '" + key + "'");
  }

  RunConfig cfg;
  cfg.input = j.value("input", std::string());
  if (j.contains("columns")) {
    const auto& c = j.at("columns");
    cfg.schema.unit = c.value("unit", std::string("unit"));
    cfg.schema.time = c.value("time", std::string("time"));
    cfg.schema.outcome = c.value("outcome", std::string("outcome"));
    if (c.contains("event_time") && !c.at("event_time").is_null())
      cfg.schema.event_time = c.at("event_time").get<std::string>();
    if (c.contains("treated") && !c.at("treated").is_null())
      cfg.schema.treated = c.at("treated").get<std::string>();
    if (c.contains("weight") && !c.at("weight").is_null())
      cfg.schema.weight = c.at("weight").get<std::string>();
    if (c.contains("dose") && !c.at("dose").is_null())
      cfg.schema.dose = c.at("dose").get<std::string>();
    if (c.contains("covariates"))
      cfg.schema.covariates = c.at("covariates").get<std::vector<std::string>>();
    if (c.contains("groups"))
      cfg.schema.groups = c.at("groups").get<std::vector<std::string>>();
  }
  cfg.schema.keep_always_treated = j.value("keep_always_treated", false);
  if (j.contains("model")) cfg.model = model_from_json(j.at("model"));
  if (j.contains("effects")) cfg.effects = effects_from_json(j.at("effects"));
  if (j.contains("estimands")) {
    std::set<std::string> labels;
    for (const auto& e : j.at("estimands")) {
      EstimandSpec s = estimand_from_json(e);
      if (!labels.insert(s.label).second)
        throw Error(errc::invalid_config,
                    "duplicate estimand label '" + s.label + "'");
      cfg.estimands.push_back(std::move(s));
    }
  }
  if (j.contains("variance")) {
    const auto& v = j.at("variance");
    cfg.variance.taubar_mode =
        taubar_from(v.value("taubar", std::string("auto")));
    cfg.variance.leave_out = v.value("leave_out", false);
    cfg.variance.auto_cell_minimum = v.value("auto_cell_minimum", 5);
  }
  if (j.contains("pretest") && !j.at("pretest").is_null()) {
    const auto& p = j.at("pretest");
    PretestConfig pc;
    if (p.is_number_integer()) {
      pc.leads = p.get<int>();
    } else if (p.is_object()) {
      pc.leads = p.value("leads", 0);
      pc.mode = pretest_mode_from(p.value("mode", std::string("f")));
    } else if (!(p.is_boolean() && p.get<bool>())) {
      throw Error(errc::invalid_config, "bad pretest config");
    }
    cfg.pretest = pc;
  }
  cfg.weights_method = j.value("weights_method", std::string("closed"));
  if (cfg.weights_method != "closed" && cfg.weights_method != "iterative")
    throw Error(errc::invalid_config,
                "weights_method must be closed or iterative");
  if (j.contains("drop_leads"))
    cfg.drop_leads = j.at("drop_leads").get<std::vector<int>>();
  cfg.max_horizon = j.value("max_horizon", -1);
  if (j.contains("simulate")) {
    const auto& s = j.at("simulate");
    cfg.dgp.units = s.value("units", cfg.dgp.units);
    cfg.dgp.first_period = s.value("first_period", cfg.dgp.first_period);
    cfg.dgp.last_period = s.value("last_period", cfg.dgp.last_period);
    cfg.dgp.first_event = s.value("first_event", cfg.dgp.first_event);
    cfg.dgp.last_event = s.value("last_event", cfg.dgp.last_event);
    cfg.dgp.reps = s.value("reps", cfg.dgp.reps);
    cfg.dgp.seed = s.value("seed", cfg.dgp.seed);
    cfg.dgp.extra_pre_periods =
        s.value("extra_pre_periods", cfg.dgp.extra_pre_periods);
    if (s.contains("noise")) cfg.dgp.noise = noise_from_json(s.at("noise"));
    if (s.contains("anticipation") && !s.at("anticipation").is_null())
      cfg.dgp.anticipation = s.at("anticipation").get<double>();
    if (s.contains("columns"))
      cfg.bench_columns = s.at("columns").get<std::vector<std::string>>();
  }
  cfg.threads = j.value("threads", 1);
  cfg.output.out = j.value("out", std::string());
  cfg.output.format = j.value("format", std::string("json"));
  if (cfg.output.format != "json" && cfg.output.format != "csv")
    throw Error(errc::invalid_config, "format must be json or csv");
  cfg.output.tau_csv = j.value("tau_csv", std::string());
  cfg.output.weights_csv = j.value("weights_csv", std::string());
  return cfg;
}

nlohmann::ordered_json EstimateReport::to_json() const {
  nlohmann::ordered_json j;
  j["n"] = n;
  j["n_untreated"] = n_untreated;
  j["n_treated"] = n_treated;
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& e : estimands) {
    arr.push_back({{"label", e.label},
                   {"estimate", e.estimate},
                   {"se", e.se},
                   {"herfindahl", e.herfindahl},
                   {"n_H", e.n_H},
                   {"taubar_mode", e.taubar_mode},
                   {"warnings", warnings_to_json(e.warnings)}});
  }
  j["estimands"] = std::move(arr);
  j["pretest"] = pretest ? pretest_to_json(*pretest)
                         : nlohmann::ordered_json(nullptr);
  j["warnings"] = warnings_to_json(warnings);
  return j;
}

EstimateReport EstimateReport::from_json(const nlohmann::json& j) {
  EstimateReport r;
  r.n = j.at("n").get<int>();
  r.n_untreated = j.at("n_untreated").get<int>();
  r.n_treated = j.at("n_treated").get<int>();
  for (const auto& e : j.at("estimands")) {
    EstimandReport er;
    er.label = e.at("label").get<std::string>();
    er.estimate = e.at("estimate").get<double>();
    er.se = e.at("se").get<double>();
    er.herfindahl = e.at("herfindahl").get<double>();
    er.n_H = e.at("n_H").get<double>();
    er.taubar_mode = e.at("taubar_mode").get<std::string>();
    er.warnings = warnings_from_json(e.at("warnings"));
    r.estimands.push_back(std::move(er));
  }
  if (!j.at("pretest").is_null())
    r.pretest = pretest_from_json(j.at("pretest"));
  r.warnings = warnings_from_json(j.at("warnings"));
  return r;
}

CommandResult cmd_estimate(const RunConfig& cfg) {
  LoadResult lr = load_input(cfg);
  const Panel& panel = lr.panel;

  EstimateReport rep;
  rep.n = panel.n();
  rep.n_untreated = (int)panel.partition().untreated.size();
  rep.n_treated = (int)panel.partition().treated.size();
  rep.warnings = panel_warnings(lr.warnings);

  std::vector<EstimandSpec> specs = cfg.estimands;
  if (specs.empty()) specs.push_back(EstimandSpec::att());

  const bool want_cells = !cfg.output.tau_csv.empty();
  FitOptions fopt;
  fopt.compute_all_cells = want_cells;

  std::optional<ImputationEngine> engine;
  if (!cfg.effects.restricted()) engine.emplace(panel, cfg.model, fopt);

  std::optional<FitResult> cells_fit;
  for (const auto& spec : specs) {
    EstimandWeights w = build_estimand(panel, spec);
    FitResult fit = cfg.effects.restricted()
                        ? fit_joint(panel, cfg.model, cfg.effects, w, fopt)
                        : engine->fit(w);
    ImpliedWeights v = weights_for(cfg, panel, w, nullptr);
    SeResult se = conservative_se(panel, fit, v, cfg.variance);

    EstimandReport er;
    er.label = w.label;
    er.estimate = fit.estimate;
    er.se = se.sigma_hat;
    er.herfindahl = v.herfindahl;
    er.n_H = v.n_H;
    er.taubar_mode = taubar_name(se.mode);
    if (se.degenerate_taubar)
      er.warnings.push_back(
          {"degenerate_taubar", "a centering group had zero weight mass"});
    if (se.leave_out_fallback)
      er.warnings.push_back(
          {"leave_out_fallback",
           "leave-out skipped for groups carried by a single unit"});
    for (const auto& note : se.notes)
      er.warnings.push_back({"variance_note", note});
    rep.estimands.push_back(std::move(er));
    if (want_cells && !cells_fit) cells_fit = std::move(fit);
  }

  if (cfg.pretest) {
    try {
      rep.pretest = summarize_pretest(
          didimp::pretest(panel, cfg.model, cfg.pretest->leads, cfg.pretest->mode));
    } catch (const Error& e) {
      rep.warnings.push_back({e.code(), e.what()});
    }
  }

  if (want_cells) {
    const auto& t1 = panel.partition().treated;
    std::string csv = "unit,time,horizon,tau_hat,imputable\n";
    for (size_t k = 0; k < t1.size(); ++k) {
      const int obs = t1[k];
      const double tau = cells_fit->tau_cells[(Eigen::Index)k];
      csv += csv_escape(panel.unit_key(panel.unit_of(obs))) + "," +
             std::to_string(panel.time_of(obs)) + "," +
             std::to_string(*panel.horizon(obs)) + "," +
             (std::isnan(tau) ? std::string() : f17(tau)) + "," +
             (cells_fit->imputable[k] ? "1" : "0") + "\n";
    }
    write_text_file(cfg.output.tau_csv, csv);
  }

  CommandResult res;
  res.report = rep.to_json();
  for (const auto& e : rep.estimands)
    res.human.push_back(e.label + ": estimate " + f4(e.estimate) + " se " +
                        f4(e.se) + " n_H " + f4(e.n_H));
  if (rep.pretest)
    res.human.push_back("pretest " + rep.pretest->mode + " stat " +
                        f4(rep.pretest->stat) + " p " +
                        f4(rep.pretest->p_value));
  return res;
}

CommandResult cmd_pretest(const RunConfig& cfg) {
  LoadResult lr = load_input(cfg);
  PretestConfig pc = cfg.pretest.value_or(PretestConfig{});
  PretestResult pr = pretest(lr.panel, cfg.model, pc.leads, pc.mode);
  PretestSummary s = summarize_pretest(pr);

  CommandResult res;
  res.report = pretest_to_json(s);
  res.csv = "lead,gamma,se\n";
  for (size_t i = 0; i < s.leads.size(); ++i)
    res.csv += std::to_string(s.leads[i]) + "," + f17(s.gamma[i]) + "," +
               f17(s.gamma_se[i]) + "\n";
  res.human.push_back("pretest " + s.mode + ": stat " + f4(s.stat) + " p " +
                      f4(s.p_value) + " (df1 " + std::to_string(s.df1) + ")");
  return res;
}

CommandResult cmd_weights(const RunConfig& cfg) {
  LoadResult lr = load_input(cfg);
  const Panel& panel = lr.panel;
  EstimandSpec spec =
      cfg.estimands.empty() ? EstimandSpec::att() : cfg.estimands.front();
  EstimandWeights w = build_estimand(panel, spec);
  lsq::Convergence conv;
  ImpliedWeights v = weights_for(cfg, panel, w, &conv);
  std::vector<double> y = panel.outcomes();
  const double estimate = v.value(y.data());

  std::string csv = "unit,time,treated,v\n";
  for (int r = 0; r < panel.n(); ++r)
    csv += csv_escape(panel.unit_key(panel.unit_of(r))) + "," +
           std::to_string(panel.time_of(r)) + "," +
           (panel.treated(r) ? "1" : "0") + "," + f17(v.v[r]) + "\n";

  CommandResult res;
  res.report = {{"label", w.label},
                {"method", cfg.weights_method},
                {"estimate", estimate},
                {"herfindahl", v.herfindahl},
                {"n_H", v.n_H},
                {"sum_treated", v.sum_treated},
                {"sum_untreated", v.sum_untreated}};
  if (cfg.weights_method == "iterative") {
    res.report["sweeps"] = v.conv.sweeps;
    res.report["converged"] = v.conv.converged;
  }
  res.csv = csv;
  if (!cfg.output.weights_csv.empty())
    write_text_file(cfg.output.weights_csv, csv);
  res.human.push_back(w.label + ": v'Y " + f4(estimate) + " n_H " + f4(v.n_H) +
                      " herfindahl " + f4(v.herfindahl));
  return res;
}

CommandResult cmd_diagnose_ols(const RunConfig& cfg) {
  LoadResult lr = load_input(cfg);
  const Panel& panel = lr.panel;
  OlsWeightReport ols = static_ols_weights(panel);
  DynamicLayout layout;
  layout.drop_leads = cfg.drop_leads;
  UnderidReport uid = detect_underidentification(panel, layout);

  nlohmann::ordered_json by_h;
  for (const auto& [k, mass] : ols.by_horizon)
    by_h[std::to_string(k)] = mass;
  nlohmann::ordered_json underid = {{"deficient", !uid.ok},
                                    {"deficiency", uid.deficiency}};
  underid["horizons"] = uid.ks;
  std::vector<double> wit(uid.witness.data(),
                          uid.witness.data() + uid.witness.size());
  underid["witness"] = wit;

  std::string csv = "unit,time,horizon,w_ols\n";
  for (const auto& [obs, wt] : ols.w_ols) {
    auto h = panel.horizon(obs);
    csv += csv_escape(panel.unit_key(panel.unit_of(obs))) + "," +
           std::to_string(panel.time_of(obs)) + "," +
           (h ? std::to_string(*h) : std::string()) + "," + f17(wt) + "\n";
  }

  CommandResult res;
  res.report = {{"share_negative", ols.share_negative},
                {"mass_negative", ols.mass_negative},
                {"by_horizon", by_h},
                {"underidentification", underid}};
  res.csv = csv;
  if (!cfg.output.weights_csv.empty())
    write_text_file(cfg.output.weights_csv, csv);
  res.human.push_back("static OLS: negative share " + f4(ols.share_negative) +
                      " mass " + f4(ols.mass_negative));
  res.human.push_back(uid.ok ? "dynamic design: no deficiency detected"
                             : "dynamic design: deficiency " +
                                   std::to_string(uid.deficiency));
  return res;
}

CommandResult cmd_simulate(const RunConfig& cfg) {
  BenchReport rep = run_benchmark(cfg.dgp, cfg.bench_columns, cfg.threads);

  nlohmann::ordered_json cohorts;
  for (const auto& [e, c] : rep.cohort_counts)
    cohorts[std::to_string(e)] = c;
  nlohmann::ordered_json cols = nlohmann::ordered_json::array();
  for (const auto& col : rep.columns) {
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& r : col.rows)
      rows.push_back({{"estimator", r.estimator},
                      {"horizon", r.horizon},
                      {"exact_variance", r.exact_variance},
                      {"exact_bias", r.exact_bias},
                      {"mc_mean", r.mc_mean},
                      {"mc_variance", r.mc_variance},
                      {"coverage", r.coverage}});
    cols.push_back({{"name", col.name}, {"rows", std::move(rows)}});
  }

  CommandResult res;
  res.report = {{"seed", rep.seed},
                {"reps", rep.reps},
                {"elapsed_seconds", rep.elapsed_seconds},
                {"cohort_counts", std::move(cohorts)},
                {"tolerances",
                 {{"imputation_variance_rel", 0.10},
                  {"reference_variance_rel", 0.15},
                  {"anticipation_bias_rel", 0.15},
                  {"coverage_range", {0.92, 0.97}}}},
                {"columns", std::move(cols)}};

  // wide layout: one row per estimator x horizon, one block per column run
  std::map<std::string, const BenchColumn*> byname;
  for (const auto& col : rep.columns) byname[col.name] = &col;
  auto cell = [&](const char* col, const std::string& est, int h,
                  auto field) -> std::string {
    auto it = byname.find(col);
    if (it == byname.end()) return "";
    for (const auto& r : it->second->rows)
      if (r.estimator == est && r.horizon == h) return f17(field(r));
    return "";
  };
  std::string csv =
      "horizon,estimator,baseline_variance,baseline_coverage,more_pre_variance,"
      "hetero_variance,ar1_variance,anticipation_bias\n";
  int hmax = 0;
  for (const auto& col : rep.columns)
    for (const auto& r : col.rows) hmax = std::max(hmax, r.horizon);
  for (int h = 0; h <= hmax; ++h)
    for (const std::string est : {"imputation", "dcdh", "sa"}) {
      csv += std::to_string(h) + "," + est + "," +
             cell("baseline", est, h, [](const BenchRow& r) { return r.exact_variance; }) + "," +
             cell("baseline", est, h, [](const BenchRow& r) { return r.coverage; }) + "," +
             cell("more_pre", est, h, [](const BenchRow& r) { return r.exact_variance; }) + "," +
             cell("hetero", est, h, [](const BenchRow& r) { return r.exact_variance; }) + "," +
             cell("ar1", est, h, [](const BenchRow& r) { return r.exact_variance; }) + "," +
             cell("anticipation", est, h, [](const BenchRow& r) { return r.exact_bias; }) + "\n";
    }
  res.csv = csv;
  res.human.push_back("simulated " + std::to_string(rep.reps) + " reps in " +
                      f4(rep.elapsed_seconds) + "s");
  return res;
}

CommandResult cmd_export_plot(const RunConfig& cfg) {
  LoadResult lr = load_input(cfg);
  const Panel& panel = lr.panel;

  int hmax = -1;
  for (int obs : panel.partition().treated)
    if (auto h = panel.horizon(obs)) hmax = std::max(hmax, *h);
  if (cfg.max_horizon >= 0) hmax = std::min(hmax, cfg.max_horizon);

  struct Row {
    int rt;
    double coef, se;
    const char* kind;
  };
  std::vector<Row> rows;
  std::vector<CliWarning> warnings;

  if (hmax >= 0) {
    ImputationEngine engine(panel, cfg.model);
    for (int h = 0; h <= hmax; ++h) {
      EstimandWeights w = build_estimand(panel, EstimandSpec::horizon(h));
      FitResult fit = engine.fit(w);
      ImpliedWeights v = implied_weights_closed(engine, w);
      SeResult se = conservative_se(panel, fit, v, cfg.variance);
      rows.push_back({h, fit.estimate, se.sigma_hat, "effect"});
    }
  }

  try {
    PretestConfig pc = cfg.pretest.value_or(PretestConfig{});
    PretestResult pr = pretest(panel, cfg.model, pc.leads, pc.mode);
    for (size_t i = 0; i < pr.leads.size(); ++i)
      rows.push_back({-pr.leads[i], pr.gamma_hat[(Eigen::Index)i],
                      std::sqrt(std::max(0.0, pr.cov_gamma(i, i))), "pretrend"});
  } catch (const Error& e) {
    warnings.push_back({e.code(), e.what()});
  }

  if (rows.empty())
    throw Error(errc::nothing_to_plot,
                "no effect horizons and no testable leads");
  std::sort(rows.begin(), rows.end(),
            [](const Row& a, const Row& b) { return a.rt < b.rt; });

  CommandResult res;
  res.csv = "relative_time,coefficient,se,kind\n";
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  int n_eff = 0, n_pre = 0;
  for (const auto& r : rows) {
    res.csv += std::to_string(r.rt) + "," + f17(r.coef) + "," + f17(r.se) +
               "," + r.kind + "\n";
    arr.push_back({{"relative_time", r.rt},
                   {"coefficient", r.coef},
                   {"se", r.se},
                   {"kind", r.kind}});
    (r.kind[0] == 'e' ? n_eff : n_pre) += 1;
  }
  res.report = {{"rows", std::move(arr)},
                {"warnings", warnings_to_json(warnings)}};
  res.human.push_back("plot data: " + std::to_string(n_eff) + " effect rows, " +
                      std::to_string(n_pre) + " pretrend rows");
  return res;
}

namespace {

struct FlagState {
  std::string config_path, input, unit, time, outcome, event_time, treated;
  std::string out, format, tau_csv, weights_csv, method, effects, taubar;
  std::vector<std::string> estimands, columns;
  std::vector<int> drop_leads;
  std::uint64_t seed = 0;
  int threads = 0, pretest_leads = -1, max_horizon = -2, reps = 0, units = 0;
  int first_period = 0, last_period = 0, first_event = 0, last_event = 0;
  std::string pretest_mode, noise;
  double rho = std::numeric_limits<double>::quiet_NaN();
  double sigma2 = std::numeric_limits<double>::quiet_NaN();
  double anticipation = std::numeric_limits<double>::quiet_NaN();
  bool leave_out = false;
};

void add_shared_flags(CLI::App* sub, FlagState& fs) {
  sub->add_option("--config", fs.config_path, "JSON config file");
  sub->add_option("--input", fs.input, "panel CSV path");
  sub->add_option("--unit", fs.unit, "unit id column");
  sub->add_option("--time", fs.time, "period column");
  sub->add_option("--outcome", fs.outcome, "outcome column");
  sub->add_option("--event-time", fs.event_time, "adoption period column");
  sub->add_option("--treated", fs.treated, "0/1 absorbing treatment column");
  sub->add_option("--seed", fs.seed, "simulation seed");
  sub->add_option("--threads", fs.threads, "worker threads for replications");
  sub->add_option("--out", fs.out, "output path (default stdout)");
  sub->add_option("--format", fs.format, "json or csv")
      ->check(CLI::IsMember({"json", "csv"}));
}

bool flag_given(CLI::App* sub, const std::string& name) {
  const CLI::Option* o = sub->get_option_no_throw(name);
  return o && o->count() > 0;
}

RunConfig merge_flags(const FlagState& fs, CLI::App* sub) {
  nlohmann::json doc = nlohmann::json::object();
  if (!fs.config_path.empty()) {
    std::ifstream f(fs.config_path);
    if (!f)
      throw Error(errc::io_error, "cannot read config '" + fs.config_path + "'");
    try {
      f >> doc;
    } catch (const nlohmann::json::exception& e) {
      throw Error(errc::invalid_config,
                  "config is not valid JSON: " + std::string(e.what()));
    }
  }
  RunConfig cfg = config_from_json(doc);

  if (!fs.input.empty()) cfg.input = fs.input;
  if (!fs.unit.empty()) cfg.schema.unit = fs.unit;
  if (!fs.time.empty()) cfg.schema.time = fs.time;
  if (!fs.outcome.empty()) cfg.schema.outcome = fs.outcome;
  if (!fs.event_time.empty()) cfg.schema.event_time = fs.event_time;
  if (!fs.treated.empty()) cfg.schema.treated = fs.treated;
  if (!fs.out.empty()) cfg.output.out = fs.out;
  if (!fs.format.empty()) cfg.output.format = fs.format;
  if (!fs.tau_csv.empty()) cfg.output.tau_csv = fs.tau_csv;
  if (!fs.weights_csv.empty()) cfg.output.weights_csv = fs.weights_csv;
  if (!fs.method.empty()) {
    if (fs.method != "closed" && fs.method != "iterative")
      throw Error(errc::invalid_config,
                  "weights_method must be closed or iterative");
    cfg.weights_method = fs.method;
  }
  if (!fs.effects.empty()) {
    auto parts = split(fs.effects, ':');
    if (parts.size() == 2 && parts[0] == "by_horizon")
      cfg.effects = TreatmentEffectModel::by_horizon(std::stoi(parts[1]));
    else
      cfg.effects = effects_from_json(nlohmann::json(fs.effects));
  }
  if (!fs.taubar.empty()) cfg.variance.taubar_mode = taubar_from(fs.taubar);
  if (fs.leave_out) cfg.variance.leave_out = true;
  if (!fs.estimands.empty()) {
    cfg.estimands.clear();
    std::set<std::string> labels;
    for (const auto& e : fs.estimands) {
      EstimandSpec s = parse_estimand(e);
      if (!labels.insert(s.label).second)
        throw Error(errc::invalid_config,
                    "duplicate estimand label '" + s.label + "'");
      cfg.estimands.push_back(std::move(s));
    }
  }
  if (fs.pretest_leads >= 0 || !fs.pretest_mode.empty()) {
    PretestConfig pc = cfg.pretest.value_or(PretestConfig{});
    if (fs.pretest_leads >= 0) pc.leads = fs.pretest_leads;
    if (!fs.pretest_mode.empty()) pc.mode = pretest_mode_from(fs.pretest_mode);
    cfg.pretest = pc;
  }
  if (!fs.drop_leads.empty()) cfg.drop_leads = fs.drop_leads;
  if (fs.max_horizon >= -1) cfg.max_horizon = fs.max_horizon;
  if (flag_given(sub, "--seed")) cfg.dgp.seed = fs.seed;
  if (fs.threads > 0) cfg.threads = fs.threads;
  if (fs.units > 0) cfg.dgp.units = fs.units;
  if (fs.reps > 0) cfg.dgp.reps = fs.reps;
  if (flag_given(sub, "--first-period")) cfg.dgp.first_period = fs.first_period;
  if (flag_given(sub, "--last-period")) cfg.dgp.last_period = fs.last_period;
  if (flag_given(sub, "--first-event")) cfg.dgp.first_event = fs.first_event;
  if (flag_given(sub, "--last-event")) cfg.dgp.last_event = fs.last_event;
  if (!fs.noise.empty())
    cfg.dgp.noise = noise_from_json(nlohmann::json{{"kind", fs.noise}});
  if (!std::isnan(fs.sigma2)) cfg.dgp.noise.sigma2 = fs.sigma2;
  if (!std::isnan(fs.rho)) cfg.dgp.noise.rho = fs.rho;
  if (!std::isnan(fs.anticipation)) cfg.dgp.anticipation = fs.anticipation;
  if (!fs.columns.empty()) cfg.bench_columns = fs.columns;
  return cfg;
}

void emit(const CommandResult& res, const RunConfig& cfg) {
  const bool csv = cfg.output.format == "csv" && !res.csv.empty();
  const std::string payload = csv ? res.csv : res.report.dump(2) + "\n";
  if (cfg.output.out.empty())
    std::cout << payload;
  else
    write_text_file(cfg.output.out, payload);
  for (const auto& line : res.human) std::cerr << line << "\n";
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"imputation-based estimation for staggered adoption panels"};
  app.require_subcommand(1);

  FlagState fs;
  auto* est = app.add_subcommand("estimate", "fit estimands and report SEs");
  auto* pre = app.add_subcommand("pretest", "test lead coefficients on the untreated sample");
  auto* wts = app.add_subcommand("weights", "implied observation weights for an estimand");
  auto* diag = app.add_subcommand("diagnose-ols", "static OLS weights and dynamic-design rank check");
  auto* sim = app.add_subcommand("simulate", "Monte Carlo benchmark of estimator variants");
  auto* plot = app.add_subcommand("export-plot", "event-study plot data (effects + pretrends)");
  for (auto* sub : {est, pre, wts, diag, sim, plot}) add_shared_flags(sub, fs);

  for (auto* sub : {est, wts})
    sub->add_option("--estimand", fs.estimands,
                    "att | horizon:H | balanced:H:R,R | cohort:E | per_dose | "
                    "per_dose_total | diff:A~B");
  for (auto* sub : {est, wts})
    sub->add_option("--effects", fs.effects,
                    "unrestricted | constant | by_horizon[:cap] | by_cohort");
  for (auto* sub : {est, plot}) {
    sub->add_option("--taubar", fs.taubar,
                    "auto | single | by_cohort_period | by_horizon");
    sub->add_flag("--leave-out", fs.leave_out, "leave-own-unit-out centering");
  }
  for (auto* sub : {est, pre, plot}) {
    sub->add_option("--pretest-leads", fs.pretest_leads,
                    "number of tested leads (0 = auto)");
    sub->add_option("--pretest-mode", fs.pretest_mode, "f | wald");
  }
  est->add_option("--tau-csv", fs.tau_csv, "write per-cell effects CSV");
  wts->add_option("--method", fs.method, "closed | iterative");
  wts->add_option("--weights-csv", fs.weights_csv, "write weights CSV here too");
  diag->add_option("--drop-leads", fs.drop_leads, "normalized leads")
      ->delimiter(',');
  diag->add_option("--weights-csv", fs.weights_csv, "write weights CSV here too");
  plot->add_option("--max-horizon", fs.max_horizon, "cap on effect horizons");
  sim->add_option("--units", fs.units, "panel units");
  sim->add_option("--reps", fs.reps, "replications");
  sim->add_option("--columns", fs.columns,
                  "baseline,more_pre,hetero,ar1,anticipation")
      ->delimiter(',');
  sim->add_option("--first-period", fs.first_period, "first period");
  sim->add_option("--last-period", fs.last_period, "last period");
  sim->add_option("--first-event", fs.first_event, "earliest event date");
  sim->add_option("--last-event", fs.last_event, "latest event date");
  sim->add_option("--noise", fs.noise, "iid | hetero | ar1");
  sim->add_option("--sigma2", fs.sigma2, "noise variance scale");
  sim->add_option("--rho", fs.rho, "AR(1) correlation");
  sim->add_option("--anticipation", fs.anticipation,
                  "bump at t = E-1 for the anticipation column");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    RunConfig cfg = merge_flags(fs, sub);
    CommandResult res;
    if (sub == est) res = cmd_estimate(cfg);
    else if (sub == pre) res = cmd_pretest(cfg);
    else if (sub == wts) res = cmd_weights(cfg);
    else if (sub == diag) res = cmd_diagnose_ols(cfg);
    else if (sub == sim) res = cmd_simulate(cfg);
    else res = cmd_export_plot(cfg);
    emit(res, cfg);
    return 0;
  } catch (const NotIdentifiedError& e) {
    nlohmann::ordered_json err = {
        {"error",
         {{"code", e.code()},
          {"message", e.what()},
          {"blocking_columns", e.blocking_columns()}}}};
    std::cerr << err.dump(2) << "\n";
    return 2;
  } catch (const Error& e) {
    nlohmann::ordered_json err = {
        {"error", {{"code", e.code()}, {"message", e.what()}}}};
    std::cerr << err.dump(2) << "\n";
    return e.code() == errc::theta_not_identified ? 2 : 1;
  } catch (const std::exception& e) {
    nlohmann::ordered_json err = {
        {"error", {{"code", "internal"}, {"message", e.what()}}}};
    std::cerr << err.dump(2) << "\n";
    return 1;
  }
}

}  // namespace didimp
