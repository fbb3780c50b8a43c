#ifndef DIDIMP_DESIGN_HPP
#define DIDIMP_DESIGN_HPP

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "didimp/panel.hpp"

namespace didimp {

// ---------------------------------------------------------------------------
// Untreated-outcome model: Y_it(0) = A_it'lambda_i + X_it'delta.
// Unit terms expand to one column per unit (A_it regressors); common terms
// are shared across units (period FE, group FE, covariates, lead indicators).
// ---------------------------------------------------------------------------

enum class UnitTermKind { Intercept, Trend, Covariate };
struct UnitTerm {
  UnitTermKind kind = UnitTermKind::Intercept;
  std::string covariate;
};

enum class CommonTermKind { PeriodFE, GroupFE, Covariate, LeadIndicators };
struct CommonTerm {
  CommonTermKind kind = CommonTermKind::PeriodFE;
  std::string name;        // covariate or group column
  std::vector<int> leads;  // j >= 1: indicator of K_it = -j
};

struct OutcomeModelSpec {
  std::vector<UnitTerm> unit_terms;
  std::vector<CommonTerm> common_terms;
  // Raw period whose FE is pinned to zero; default = first observed period.
  std::optional<int> normalize_period;

  static OutcomeModelSpec twfe() {
    OutcomeModelSpec m;
    m.unit_terms = {UnitTerm{UnitTermKind::Intercept, ""}};
    m.common_terms = {CommonTerm{CommonTermKind::PeriodFE, "", {}}};
    return m;
  }
};

// ---------------------------------------------------------------------------
// Treatment-effect model tau = Gamma theta on the treated sample.
// ---------------------------------------------------------------------------

class TreatmentEffectModel {
 public:
  enum class Kind { Unrestricted, Constant, ByHorizon, ByCohort, Custom };

  static TreatmentEffectModel unrestricted() {
    return TreatmentEffectModel{Kind::Unrestricted};
  }
  static TreatmentEffectModel constant() {
    return TreatmentEffectModel{Kind::Constant};
  }
  static TreatmentEffectModel by_horizon(std::optional<int> cap = std::nullopt) {
    TreatmentEffectModel m{Kind::ByHorizon};
    m.cap_ = cap;
    return m;
  }
  static TreatmentEffectModel by_cohort() {
    return TreatmentEffectModel{Kind::ByCohort};
  }
  // Rows must follow the panel's treated-observation order (partition().treated).
  static TreatmentEffectModel custom(Eigen::MatrixXd gamma);
  // Assumption-form B tau = 0; converted to Gamma = null-space basis of B.
  static TreatmentEffectModel from_restrictions(const Eigen::MatrixXd& B);

  Kind kind() const { return kind_; }
  bool restricted() const { return kind_ != Kind::Unrestricted; }
  std::optional<int> horizon_cap() const { return cap_; }

  // N1 x q basis; identity is implied (never materialized) for Unrestricted.
  Eigen::MatrixXd gamma(const Panel& panel) const;
  std::vector<std::string> theta_names(const Panel& panel) const;

 private:
  explicit TreatmentEffectModel(Kind k) : kind_(k) {}
  Kind kind_;
  std::optional<int> cap_;
  Eigen::MatrixXd custom_;
};

// ---------------------------------------------------------------------------
// Estimands: weighted sums of treated-observation effects.
// ---------------------------------------------------------------------------

struct EstimandSpec {
  enum class Kind {
    Att,
    Horizon,
    BalancedHorizon,
    Cohort,
    Difference,
    PerDose,
    Custom
  };
  Kind kind = Kind::Att;
  int h = 0;
  std::vector<int> require_horizons;  // balanced_horizon
  int cohort = 0;
  std::shared_ptr<const EstimandSpec> a, b;  // difference
  bool dose_total = false;  // per_dose: divide by total dose instead of N1
  struct CustomCell {
    std::string unit;
    int time;
    double w;
  };
  std::vector<CustomCell> custom;
  std::string label;

  static EstimandSpec att();
  static EstimandSpec horizon(int h);
  static EstimandSpec balanced_horizon(int h, std::vector<int> require);
  static EstimandSpec cohort_att(int e);
  static EstimandSpec difference(EstimandSpec a, EstimandSpec b);
  static EstimandSpec per_dose(bool total = false);
  static EstimandSpec custom_cells(std::vector<CustomCell> cells);
};

struct EstimandWeights {
  std::string label;
  // (obs id, weight), support within the treated sample, sorted by obs id.
  std::vector<std::pair<int, double>> entries;

  double sum() const;
  // Dense vector aligned with partition().treated.
  Eigen::VectorXd on_treated(const Panel& panel) const;
};

EstimandWeights build_estimand(const Panel& panel, const EstimandSpec& spec);

// ---------------------------------------------------------------------------
// Materialized design.
// ---------------------------------------------------------------------------

struct ColumnInfo {
  enum class Role { Unit, PeriodFE, GroupFE, Covariate, Lead };
  std::string name;
  Role role = Role::Unit;
  int unit = -1;
};

// Categorical column group usable by the alternating solver. Category c of a
// block owns the `dim` consecutive columns starting at col0 + c*dim.
struct CatBlock {
  std::string name;
  int col0 = 0;
  int dim = 1;
  int n_categories = 0;
  std::vector<int> category;  // per observation; -1 = no column for this row
};

struct RankReport {
  int full_rank = 0;       // rank of Z on all observations
  int untreated_rank = 0;  // rank of Z restricted to untreated rows
  std::vector<std::string> pinned_full;  // collinear on the full sample
  std::vector<std::string> unidentified_untreated;
  Eigen::MatrixXd null_untreated;  // orthonormal kernel basis of Z0'Z0
};

struct DesignMatrices {
  Eigen::SparseMatrix<double, Eigen::RowMajor> Z;  // N x p, panel row order
  std::vector<ColumnInfo> columns;
  std::vector<CatBlock> blocks;
  std::vector<int> tail_cols;   // columns outside any categorical block
  Eigen::MatrixXd gamma;        // N1 x q when restricted, 0 x 0 otherwise
  bool gamma_identity = true;
  std::vector<std::string> theta_names;
  RankReport rank;

  int p() const { return static_cast<int>(columns.size()); }
};

struct MaterializeOptions {
  // Rank analysis requires dense p x p factorizations; callers with very wide
  // designs can skip it and rely on the iterative path.
  bool analyze_rank = true;
};

// Relative pivot threshold for all rank decisions on normalized Gram matrices.
inline constexpr double kRankTol = 1e-10;
// Residual threshold for the estimability verdict, relative to |Z1'w1|.
inline constexpr double kEstimabilityTol = 1e-8;

DesignMatrices materialize_design(const Panel& panel,
                                  const OutcomeModelSpec& model,
                                  const TreatmentEffectModel& tem,
                                  const MaterializeOptions& opt = {});

struct EstimabilityResult {
  bool identified = false;
  // Unmatched component of Z1'w1 in coefficient space (empty if identified).
  Eigen::VectorXd certificate;
  std::vector<std::string> blocking_columns;
};

EstimabilityResult check_estimability(const Panel& panel,
                                      const OutcomeModelSpec& model,
                                      const EstimandWeights& w);
EstimabilityResult check_estimability(const Panel& panel,
                                      const DesignMatrices& design,
                                      const EstimandWeights& w);

}  // namespace didimp

#endif
