#ifndef DIDIMP_CSV_HPP
#define DIDIMP_CSV_HPP

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "didimp/panel.hpp"

namespace didimp {

// Column mapping for load_panel. Exactly one of event_time / treated must be
// set: event_time is the adoption period (empty, "never", "inf" or NA mark a
// never-treated unit); treated is a 0/1 absorbing indicator from which the
// adoption period is derived.
struct CsvSchema {
  std::string unit = "unit";
  std::string time = "time";
  std::string outcome = "outcome";
  std::optional<std::string> event_time;
  std::optional<std::string> treated;
  std::vector<std::string> covariates;
  std::optional<std::string> weight;
  std::optional<std::string> dose;
  std::vector<std::string> groups;
  bool keep_always_treated = false;
};

struct LoadResult {
  Panel panel;
  PanelWarnings warnings;
};

LoadResult load_panel(std::istream& in, const CsvSchema& schema);
LoadResult load_panel_file(const std::string& path, const CsvSchema& schema);

// Minimal RFC-4180 style row parser shared by the loaders and tools.
std::vector<std::string> parse_csv_row(const std::string& line);

}  // namespace didimp

#endif
