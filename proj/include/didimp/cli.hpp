#ifndef DIDIMP_CLI_HPP
#define DIDIMP_CLI_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "didimp/benchmark.hpp"
#include "didimp/csv.hpp"
#include "didimp/design.hpp"
#include "didimp/inference.hpp"
#include "json.hpp"

namespace didimp {

struct PretestConfig {
  int leads = 0;  // 0 = auto
  PretestMode mode = PretestMode::HomoskedasticF;
};

struct OutputConfig {
  std::string out;             // primary artifact path; empty = stdout
  std::string format = "json"; // json | csv
  std::string tau_csv;         // estimate: per-cell effects side file
  std::string weights_csv;     // weights / diagnose-ols side file
};

struct RunConfig {
  std::string input;
  CsvSchema schema;
  OutcomeModelSpec model = OutcomeModelSpec::twfe();
  TreatmentEffectModel effects = TreatmentEffectModel::unrestricted();
  std::vector<EstimandSpec> estimands;  // empty = att
  VarianceSpec variance;
  std::optional<PretestConfig> pretest;
  std::string weights_method = "closed";  // closed | iterative
  std::vector<int> drop_leads = {1};      // diagnose-ols normalization
  int max_horizon = -1;                   // export-plot; -1 = all observed
  DgpSpec dgp;
  std::vector<std::string> bench_columns;  // empty = all
  int threads = 1;
  OutputConfig output;
};

// Parses the JSON config document; flags are applied on top by run_cli.
RunConfig config_from_json(const nlohmann::json& j);

// Compact flag syntax: att | horizon:H | balanced:H:R1,R2 | cohort:E |
// per_dose | per_dose_total | diff:A~B (A, B again in this syntax).
EstimandSpec parse_estimand(const std::string& text);

struct CliWarning {
  std::string code;
  std::string message;
};

struct EstimandReport {
  std::string label;
  double estimate = 0.0;
  double se = 0.0;
  double herfindahl = 0.0;
  double n_H = 0.0;
  std::string taubar_mode;
  std::vector<CliWarning> warnings;
};

struct PretestSummary {
  double stat = 0.0;
  double p_value = 1.0;
  int df1 = 0;
  double df2 = 0.0;
  std::string mode;
  std::vector<int> leads;
  std::vector<double> gamma;
  std::vector<double> gamma_se;
  std::vector<CliWarning> warnings;
};

struct EstimateReport {
  int n = 0;
  int n_untreated = 0;
  int n_treated = 0;
  std::vector<EstimandReport> estimands;
  std::optional<PretestSummary> pretest;
  std::vector<CliWarning> warnings;

  nlohmann::ordered_json to_json() const;
  static EstimateReport from_json(const nlohmann::json& j);
};

struct CommandResult {
  nlohmann::ordered_json report;
  std::string csv;                 // primary CSV artifact when applicable
  std::vector<std::string> human;  // short summary lines (4 digits)
};

CommandResult cmd_estimate(const RunConfig& cfg);
CommandResult cmd_pretest(const RunConfig& cfg);
CommandResult cmd_weights(const RunConfig& cfg);
CommandResult cmd_diagnose_ols(const RunConfig& cfg);
CommandResult cmd_simulate(const RunConfig& cfg);
CommandResult cmd_export_plot(const RunConfig& cfg);

// Full entry point: parse flags, dispatch, write artifacts. Returns the
// process exit code: 0 ok, 2 when the request is statistically not
// identified (no estimate is emitted), 1 on any other failure.
int run_cli(int argc, const char* const* argv);

}  // namespace didimp

#endif
