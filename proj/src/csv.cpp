#include "didimp/csv.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <sstream>

namespace didimp {

namespace {

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return s;
}

bool is_missing(const std::string& s) {
  std::string t = lower(trim(s));
  return t.empty() || t == "na" || t == "nan" || t == ".";
}

std::optional<double> parse_double(const std::string& s) {
  std::string t = trim(s);
  if (t.empty()) return std::nullopt;
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc() || ptr != t.data() + t.size()) return std::nullopt;
  if (std::isnan(v)) return std::nullopt;
  return v;
}

std::optional<int> parse_int(const std::string& s) {
  auto v = parse_double(s);
  if (!v) return std::nullopt;
  double r = std::round(*v);
  if (std::abs(*v - r) > 1e-9 || std::abs(r) > 2e9) return std::nullopt;
  return static_cast<int>(r);
}

int require_column(const std::vector<std::string>& header,
                   const std::string& name) {
  for (size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return (int)i;
  throw Error(errc::missing_column, "input has no column '" + name + "'");
}

}  // namespace

std::vector<std::string> parse_csv_row(const std::string& line) {
  std::vector<std::string> out;
  std::string field;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(field);
      field.clear();
    } else if (c != '\r') {
      field += c;
    }
  }
  out.push_back(field);
  return out;
}

LoadResult load_panel(std::istream& in, const CsvSchema& schema) {
  if (schema.event_time.has_value() == schema.treated.has_value())
    throw Error(errc::invalid_config,
                "specify exactly one of event_time / treated column");

  std::string line;
  if (!std::getline(in, line))
    throw Error(errc::io_error, "empty input");
  std::vector<std::string> header = parse_csv_row(line);
  for (auto& h : header) h = trim(h);

  int c_unit = require_column(header, schema.unit);
  int c_time = require_column(header, schema.time);
  int c_y = require_column(header, schema.outcome);
  int c_event = schema.event_time ? require_column(header, *schema.event_time) : -1;
  int c_d = schema.treated ? require_column(header, *schema.treated) : -1;
  int c_w = schema.weight ? require_column(header, *schema.weight) : -1;
  int c_dose = schema.dose ? require_column(header, *schema.dose) : -1;
  std::vector<int> c_cov, c_grp;
  for (const auto& name : schema.covariates)
    c_cov.push_back(require_column(header, name));
  for (const auto& name : schema.groups)
    c_grp.push_back(require_column(header, name));

  std::vector<Obs> rows;
  std::map<std::string, EventDate> events;
  // treated-indicator mode: collect transitions, derive adoption dates below
  std::map<std::string, std::map<int, bool>> dmap;
  PanelWarnings warn;

  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<std::string> f = parse_csv_row(line);
    if (f.size() != header.size())
      throw Error(errc::io_error, "line " + std::to_string(lineno) + ": got " +
                                      std::to_string(f.size()) +
                                      " fields, expected " +
                                      std::to_string(header.size()));
    Obs r;
    r.unit = trim(f[c_unit]);
    if (r.unit.empty())
      throw Error(errc::bad_value, "line " + std::to_string(lineno) + ": empty unit");
    auto t = parse_int(f[c_time]);
    if (!t)
      throw Error(errc::bad_value, "line " + std::to_string(lineno) +
                                       ": bad time '" + f[c_time] + "'");
    r.time = *t;
    if (is_missing(f[c_y])) {
      warn.dropped_missing_outcome++;
      continue;
    }
    auto y = parse_double(f[c_y]);
    if (!y)
      throw Error(errc::bad_value, "line " + std::to_string(lineno) +
                                       ": bad outcome '" + f[c_y] + "'");
    r.outcome = *y;
    if (c_w >= 0) {
      auto w = parse_double(f[c_w]);
      if (!w || *w < 0)
        throw Error(errc::bad_value,
                    "line " + std::to_string(lineno) + ": bad weight");
      r.weight = *w;
    }
    if (c_dose >= 0) {
      auto d = parse_double(f[c_dose]);
      if (d) r.dose = *d;
    }
    bool drop = false;
    for (int c : c_cov) {
      auto v = parse_double(f[c]);
      if (!v) {
        warn.dropped_missing_outcome++;
        drop = true;
        break;
      }
      r.covariates.push_back(*v);
    }
    if (drop) continue;
    for (int c : c_grp) r.groups.push_back(trim(f[c]));

    if (c_event >= 0) {
      std::string ev = lower(trim(f[c_event]));
      EventDate e = EventDate::never();
      if (!(is_missing(ev) || ev == "never" || ev == "inf" || ev == "infinity" ||
            ev == "+inf")) {
        auto ei = parse_int(f[c_event]);
        if (!ei)
          throw Error(errc::bad_value, "line " + std::to_string(lineno) +
                                           ": bad event time '" + f[c_event] + "'");
        e = EventDate::finite(*ei);
      }
      auto it = events.find(r.unit);
      if (it == events.end()) {
        events.emplace(r.unit, e);
      } else if (!(it->second == e)) {
        throw Error(errc::inconsistent_event_date,
                    "unit '" + r.unit + "' has conflicting event times");
      }
    } else {
      auto dv = parse_double(f[c_d]);
      if (!dv || (*dv != 0.0 && *dv != 1.0))
        throw Error(errc::bad_value, "line " + std::to_string(lineno) +
                                         ": treated indicator must be 0 or 1");
      dmap[r.unit][r.time] = (*dv == 1.0);
    }
    rows.push_back(std::move(r));
  }

  if (c_d >= 0) {
    for (const auto& [u, byt] : dmap) {
      EventDate e = EventDate::never();
      for (const auto& [t, d] : byt) {
        if (d) {
          e = EventDate::finite(t);
          break;
        }
      }
      // staggered adoption is absorbing: no 1 -> 0 reversals
      if (!e.is_never())
        for (const auto& [t, d] : byt)
          if (t >= e.value() && !d)
            throw Error(errc::inconsistent_event_date,
                        "unit '" + u + "' switches out of treatment at t=" +
                            std::to_string(t));
      events.emplace(u, e);
    }
  }

  BuildOptions opt;
  opt.keep_always_treated = schema.keep_always_treated;
  Panel p = Panel::build(std::move(rows), events, schema.covariates,
                         schema.groups, opt, &warn);
  if (!warn.dropped_always_treated.empty())
    warn.messages.push_back(
        "dropped " + std::to_string(warn.dropped_always_treated.size()) +
        " unit(s) treated in every observed period");
  if (warn.dropped_missing_outcome > 0)
    warn.messages.push_back("dropped " +
                            std::to_string(warn.dropped_missing_outcome) +
                            " row(s) with missing values");
  return LoadResult{std::move(p), std::move(warn)};
}

LoadResult load_panel_file(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw Error(errc::io_error, "cannot open '" + path + "'");
  return load_panel(in, schema);
}

}  // namespace didimp
