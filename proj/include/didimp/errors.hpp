#ifndef DIDIMP_ERRORS_HPP
#define DIDIMP_ERRORS_HPP

#include <stdexcept>
#include <string>
#include <vector>

namespace didimp {

// All library failures derive from Error and carry a stable snake_case code
// so callers (and the CLI) can dispatch without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

namespace errc {
inline constexpr const char* duplicate_observation = "duplicate_observation";
inline constexpr const char* unknown_observation = "unknown_observation";
inline constexpr const char* missing_column = "missing_column";
inline constexpr const char* inconsistent_event_date = "inconsistent_event_date";
inline constexpr const char* bad_value = "bad_value";
inline constexpr const char* empty_support = "empty_support";
inline constexpr const char* missing_dose = "missing_dose";
inline constexpr const char* unsupported_spec = "unsupported_spec";
inline constexpr const char* rank_deficient_after_normalization =
    "rank_deficient_after_normalization";
inline constexpr const char* singular_block = "singular_block";
inline constexpr const char* no_convergence = "no_convergence";
inline constexpr const char* solver_failure = "solver_failure";
inline constexpr const char* singular_covariance = "singular_covariance";
inline constexpr const char* not_identified = "not_identified";
inline constexpr const char* theta_not_identified = "theta_not_identified";
inline constexpr const char* singular_b1 = "singular_b1";
inline constexpr const char* collinear_treatment = "collinear_treatment";
inline constexpr const char* insufficient_preperiods = "insufficient_preperiods";
inline constexpr const char* degenerate_denominator = "degenerate_denominator";
inline constexpr const char* empty_control_group = "empty_control_group";
inline constexpr const char* dimension_mismatch = "dimension_mismatch";
inline constexpr const char* nothing_to_plot = "nothing_to_plot";
inline constexpr const char* invalid_config = "invalid_config";
inline constexpr const char* io_error = "io_error";
}  // namespace errc

// Estimand not recoverable from the untreated fit; carries the unmatched
// coefficient-space component so callers can report which columns block it.
class NotIdentifiedError : public Error {
 public:
  NotIdentifiedError(const std::string& what, std::vector<std::string> blocking)
      : Error(errc::not_identified, what), blocking_(std::move(blocking)) {}
  const std::vector<std::string>& blocking_columns() const { return blocking_; }

 private:
  std::vector<std::string> blocking_;
};

}  // namespace didimp

#endif
