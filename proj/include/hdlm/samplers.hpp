#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hdlm/data.hpp"
#include "hdlm/likelihood.hpp"
#include "hdlm/rng.hpp"
#include "hdlm/trees.hpp"

namespace hdlm {

enum class ModelKind { tdlm, gp_dlm, hdlm_nested, hdlm_shared, hdlm_gp };

const char* to_string(ModelKind m);
/// Accepts "tdlm", "gp-dlm", "hdlm-nested", "hdlm-shared", "hdlm-gp".
ModelKind model_from(const std::string& text);
bool uses_modifiers(ModelKind m);
bool uses_gp(ModelKind m);

struct FitConfig {
  ModelKind model = ModelKind::hdlm_nested;
  int trees = 20;
  int iterations = 10000;
  int burn_in = 5000;
  int thin = 5;
  std::uint64_t seed = 1;
  int chains = 1;
  TreePriorParams modifier_prior;
  TreePriorParams dlm_prior;
  MoveWeights modifier_moves;
  MoveWeights dlm_moves = MoveWeights::dlm();
  double phi_init = 1.0;
  double phi_step = 0.3;
  bool adapt_phi = true;
  MarginalRoute route = MarginalRoute::automatic;
  /// Status line to stderr every this many iterations (0 = silent).
  int progress_every = 0;

  /// Throws UsageError on an invalid combination.
  void check() const;
  /// Kept draws per chain: (iterations - burn_in) / thin, integer division.
  int draw_count() const { return (iterations - burn_in) / thin; }
};

/// Sampler state. Effects live inside the trees' leaf lag functions.
struct EnsembleState {
  std::vector<ModifierTree> trees;
  std::vector<double> tau2;  ///< per-tree local scale tau_a^2
  double nu2 = 1.0;          ///< global scale
  double sigma2 = 1.0;
  double phi = 1.0;          ///< GP smoothness (GP models)
  std::vector<double> weights;  ///< modifier selection probabilities
  // Parameter-expansion auxiliaries of the half-Cauchy scales.
  std::vector<double> xi_tau;
  double xi_nu = 1.0;
  double xi_sigma = 1.0;

  friend bool operator==(const EnsembleState&, const EnsembleState&) = default;
};

/// theta curve (length T) of every tree summed for one modifier row.
Eigen::VectorXd ensemble_curve(const EnsembleState& s, std::span<const double> modifiers, int lags);

struct MoveCounts {
  std::int64_t proposed[4] = {0, 0, 0, 0};
  std::int64_t accepted[4] = {0, 0, 0, 0};
  std::int64_t invalid[4] = {0, 0, 0, 0};  ///< no valid move drawn (treated as rejected)

  double acceptance() const;
  MoveCounts& operator+=(const MoveCounts& o);
};

struct Diagnostics {
  MoveCounts modifier;
  MoveCounts dlm;
  std::int64_t singular = 0;
  std::int64_t phi_proposed = 0;
  std::int64_t phi_accepted = 0;
  double phi_step = 0.0;
  /// sigma at every iteration, chains concatenated in chain order.
  std::vector<double> sigma_trace;
  /// Posterior mean of the in-sample fit Z gamma + sum of tree fits, as
  /// tracked internally by the sampler.
  Eigen::VectorXd fitted_mean;
};

struct PosteriorDraws {
  ModelKind model = ModelKind::tdlm;
  int lags = 0;
  ModifierSchema schema;  ///< modifiers seen by the trees
  std::vector<std::string> fixed_names;  ///< names of the Z columns
  ColumnMap columns;  ///< how the training file was read
  FitConfig config;
  std::vector<EnsembleState> states;
  std::vector<Eigen::VectorXd> gamma;
  std::vector<int> chain;
  Diagnostics diagnostics;

  std::size_t size() const { return states.size(); }
};

/// One chain. Owns a copy of the (modifier-restricted) dataset.
class Sampler {
 public:
  Sampler(const Dataset& data, const FitConfig& config, std::uint64_t seed);
  ~Sampler();
  Sampler(const Sampler&) = delete;
  Sampler& operator=(const Sampler&) = delete;

  /// Backfitting sweep over all trees, then variances, weights and phi.
  void step();
  /// The tree sweep alone: for each tree, structure MH moves with effects
  /// and sigma^2 integrated, then a joint draw of sigma^2 and the effects.
  void backfit_step();
  void update_variances();
  void update_phi();

  const EnsembleState& state() const;
  /// Partial-residual baseline y - sum of tree fits.
  const Eigen::VectorXd& residual() const;
  const Eigen::VectorXd& tree_fit(int a) const;
  /// max |R - (y - sum of fits recomputed from the trees)| / max(1, |y|).
  double residual_error() const;
  const Diagnostics& diagnostics() const;
  int iteration() const;
  /// Forces every MH proposal to be rejected (tests).
  void set_force_reject(bool on);
  /// Replaces tree a (structure and effects) and rebuilds its caches (tests).
  void set_tree(int a, ModifierTree tree);
  /// One MH decision between tree a and `candidate` against the partial
  /// residual of tree a, with `log_ratio` added to the marginal difference.
  /// The state is left untouched; returns the log acceptance ratio (tests).
  double mh_trial(int a, const ModifierTree& candidate, double log_ratio, bool& accepted);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Runs the configured sampler on the dataset restricted to `modifiers`
/// (indices into the dataset's modifier columns; ignored for tdlm/gp-dlm).
/// Chains run concurrently and are merged in chain order.
PosteriorDraws fit(const Dataset& data, const std::vector<int>& modifiers, const FitConfig& config);

/// Draws gamma for every stored state from its normal conditional given the
/// tree fits and sigma. `data` must be the dataset restricted to the same
/// modifiers as the draws.
std::vector<Eigen::VectorXd> recover_gamma(const PosteriorDraws& draws, const Dataset& data, std::uint64_t seed);

/// Sum over trees of the fitted lag contribution for every row of `data`.
Eigen::VectorXd ensemble_fit(const EnsembleState& s, const RowMatrix& x, const Eigen::MatrixXd& m);

// ---------------------------------------------------------------------------
// Conditional updates, exposed for testing.

/// Half-Cauchy C+(0,1) scale s via s^2 | a ~ IG(1/2, 1/a), a ~ IG(1/2, 1).
/// Given `count` normal terms with sum of squares `quad` (already divided by
/// every other variance factor): draws a | s^2, then s^2 | a.
void update_half_cauchy(double& value2, double& aux, double count, double quad, Rng& rng);
/// s^2 | a ~ IG((count + 1)/2, 1/a + quad/2).
double draw_scale_given_aux(double count, double quad, double aux, Rng& rng);

/// Log of the Gamma(1/2, rate 1/2) prior density of phi (normalised).
double phi_log_prior(double phi);

/// One random-walk MH step on log(phi), reflected into [kPhiMin, kPhiMax].
/// `log_lik(phi)` is the effect likelihood; the target is prior x likelihood.
double phi_step(double phi, double step, const std::function<double(double)>& log_lik, Rng& rng, bool& accepted);

// ---------------------------------------------------------------------------
// Draw container (text, versioned)

void write_draws(std::ostream& out, const PosteriorDraws& draws);
void write_draws(const std::string& path, const PosteriorDraws& draws);
PosteriorDraws read_draws(std::istream& in);
PosteriorDraws read_draws(const std::string& path);

}  // namespace hdlm
