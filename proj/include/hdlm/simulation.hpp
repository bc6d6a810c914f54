#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hdlm/data.hpp"
#include "hdlm/samplers.hpp"

namespace hdlm {

enum class Scenario { early_late = 1, scaled = 2, no_heterogeneity = 3 };

const char* to_string(Scenario s);
/// Accepts 1/2/3 or early-late/scaled/no-heterogeneity.
Scenario scenario_from(const std::string& text);

/// Number of simulated covariates besides the intercept.
inline constexpr int kCovariates = 13;

/// n x 14 matrix: column 0 is the intercept, then
/// z1 ~ N(0,1), z2 ~ Bern(.5), z3 ~ U(0,1), z4..z8 ~ N(0,1), z9..z13 ~ Bern(.5).
Eigen::MatrixXd gen_covariates(Eigen::Index n, std::uint64_t seed);
/// Kinds of z1..z13 as modifiers.
ModifierSchema covariate_schema();

/// Unscaled true lag curve for one covariate row (z0..z13). `start` is the
/// scenario-3 onset s in 1..T-9 and is ignored otherwise.
std::vector<double> true_theta(Scenario scenario, std::span<const double> z, int lags, int start = 1);

/// Rows with a nonzero effect in scenarios 1 and 2.
inline bool in_effect_group(std::span<const double> z) { return z[1] > 0.0; }

struct TruthBundle {
  Eigen::MatrixXd shape;  ///< n x T, theta*(m_i) before scaling
  double r = 1.0;         ///< signal scale
  Eigen::VectorXd gamma;  ///< fixed effects used
  int start = 0;          ///< scenario-3 onset (0 otherwise)
  Eigen::VectorXd signal; ///< r x_i' theta*(m_i)

  /// True effect on the outcome scale, r theta*(m_i).
  Eigen::VectorXd effect(Eigen::Index i) const { return r * shape.row(i).transpose(); }
};

struct SimulatedData {
  Dataset data;
  TruthBundle truth;
};

/// y = r x'theta* + z'gamma + eps, eps ~ N(0, sigma2). When `reuse` is given
/// its r, gamma and onset are kept (held-out data from the same model);
/// otherwise gamma ~ N(0, I) and r makes the sample variance of the signal 1
/// (r = 1 when the signal is identically zero).
SimulatedData simulate_outcome(const Eigen::MatrixXd& covariates, const RowMatrix& exposures, Scenario scenario,
                               double sigma2, std::uint64_t seed, int start = 1,
                               const TruthBundle* reuse = nullptr);

struct ScenarioSpec {
  Scenario scenario = Scenario::early_late;
  Eigen::Index n = 5000;
  double sigma2 = 10.0;
  int lags = 37;
  std::uint64_t seed = 1;
  Eigen::Index test_size = 5000;
  ExposureProcess exposure;
  /// Feed (x - mean) / sd of the log-scale process to the model instead of
  /// the log-scale values themselves.
  bool standardize = true;

  void check() const;
};

/// Training and held-out data of one replicate. The scenario-3 onset is drawn
/// once per replicate.
struct Replicate {
  SimulatedData train;
  SimulatedData test;
};
Replicate simulate_replicate(const ScenarioSpec& spec);

/// Modifiers responsible for heterogeneity (indices into z1..z13, 0-based).
std::vector<int> active_modifiers(Scenario s);

struct GroupMetrics {
  double rmse = 0.0;
  double coverage = 0.0;
  double tp = 0.0;
  double fp = 0.0;
};

struct ReplicateResult {
  int replicate = 0;
  std::uint64_t seed = 0;
  ModelKind model = ModelKind::tdlm;
  std::string status = "ok";
  GroupMetrics effect;     ///< z1 > 0 (scenarios 1 and 2)
  GroupMetrics no_effect;  ///< z1 <= 0 (scenarios 1 and 2)
  GroupMetrics all;
  double mspe = 0.0;
  double mspe_ratio = 0.0;
  std::vector<double> pip;           ///< per modifier (empty without modifiers)
  double pip_active_min = 0.0;
  double pip_inactive_mean = 0.0;
  double interaction_active = 0.0;   ///< the active pair
  double interaction_inactive_mean = 0.0;  ///< every other pair
};

struct StudyConfig {
  ScenarioSpec spec;
  std::vector<ModelKind> models{ModelKind::tdlm, ModelKind::hdlm_nested};
  int replicates = 100;
  FitConfig fit;
  double level = 0.95;
  bool verbose = false;

  void check() const;
};

struct AggregateRow {
  ModelKind model = ModelKind::tdlm;
  int completed = 0;
  GroupMetrics effect, no_effect, all;
  double mspe_ratio = 0.0;
  double pip_active_min = 0.0;
  double pip_inactive_mean = 0.0;
  double interaction_active = 0.0;
  double interaction_inactive_mean = 0.0;
};

struct StudyReport {
  StudyConfig config;
  std::vector<ReplicateResult> rows;  ///< replicate-major, models in config order

  /// Plain means over completed replicates (NaN entries skipped).
  std::vector<AggregateRow> aggregate() const;
  const AggregateRow* find(const std::vector<AggregateRow>& agg, ModelKind m) const;
};

/// Replicate seeds are derive_seed(seed, r); each model's chain seed is
/// derive_seed(replicate seed, 100 + model index). The tdlm baseline is
/// always fitted for the MSPE ratio.
StudyReport run_study(const StudyConfig& config);

/// Metrics of one fitted replicate (exposed for tests).
ReplicateResult evaluate_fit(const PosteriorDraws& draws, const Replicate& rep, Scenario scenario, double level);

void write_replicates_csv(std::ostream& out, const StudyReport& report);
void write_aggregate_csv(std::ostream& out, const StudyReport& report);
void write_manifest(std::ostream& out, const StudyReport& report);
/// Rebuilds the aggregate from per-replicate rows previously written.
std::vector<AggregateRow> aggregate_rows(const std::vector<ReplicateResult>& rows,
                                         const std::vector<ModelKind>& models);
std::vector<ReplicateResult> read_replicates_csv(std::istream& in);

}  // namespace hdlm
