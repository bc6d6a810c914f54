#pragma once

#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "hdlm/data.hpp"
#include "hdlm/kernels.hpp"
#include "hdlm/rng.hpp"
#include "hdlm/trees.hpp"

namespace hdlm {

/// Orthonormal basis Q of the column space of Z. The residual maker is
/// I - Q Q'; the fixed effects are integrated out under a flat prior by
/// working in the orthogonal complement.
class FixedEffectsProjection {
 public:
  FixedEffectsProjection() = default;
  /// Throws DataError when Z is rank deficient.
  explicit FixedEffectsProjection(const Eigen::MatrixXd& z);

  const RowMatrix& basis() const { return q_; }
  Eigen::Index n() const { return q_.rows(); }
  Eigen::Index p() const { return q_.cols(); }
  /// Dimension of the complement, n - p.
  Eigen::Index dof() const { return q_.rows() - q_.cols(); }

  /// (I - QQ') v
  Eigen::VectorXd residualize(const Eigen::VectorXd& v) const;
  Eigen::MatrixXd residualize(const Eigen::MatrixXd& v) const;

  /// Least-squares coefficients of v on Z and the inverse of Z'Z (via QR).
  Eigen::VectorXd coefficients(const Eigen::VectorXd& v) const;
  const Eigen::MatrixXd& ztz_inverse() const { return ztz_inv_; }
  /// R^{-1} with Z = QR; gamma noise is R^{-1} z for standard normal z.
  const Eigen::MatrixXd& r_inverse() const { return r_inv_; }
  const Eigen::MatrixXd& z() const { return z_; }

 private:
  RowMatrix q_;
  Eigen::MatrixXd z_;
  Eigen::MatrixXd r_inv_;    // Z = Q R
  Eigen::MatrixXd ztz_inv_;
};

FixedEffectsProjection residualize(const Dataset& data);

/// Design of one modifier-tree leaf aggregated to its effect cells: the
/// columns of U_b are sums of exposures over each DLM segment (or single
/// lags for GP leaves).
struct CellBlock {
  Eigen::MatrixXd gram;  ///< C_b x C_b, U_b' U_b
  Eigen::MatrixXd qu;    ///< p x C_b,   Q' U_b
  Eigen::VectorXd ur;    ///< C_b,       U_b' R
  /// Prior precision structure K_b^{-1}; empty means identity.
  Eigen::MatrixXd k_inv;
  double log_det_k = 0.0;

  Eigen::Index cells() const { return gram.rows(); }
};

/// Aggregates lag-level leaf statistics to DLM segments.
CellBlock aggregate(const LeafStats& stats, std::span<const DlmTree::Segment> segments);
/// Lag-level block for GP leaves (cells = lags) with precision K^{-1}.
CellBlock lag_block(const LeafStats& stats, const Eigen::MatrixXd& k_inv, double log_det_k);

/// Everything the integrated marginal needs for one tree.
struct DesignBlock {
  std::vector<CellBlock> leaves;
  Eigen::VectorXd qr;  ///< Q' R
  double rr = 0.0;     ///< R' R
  Eigen::Index dof = 0;  ///< n - p

  Eigen::Index cells() const;
};

/// Variance inputs. Effects have prior N(0, scale * sigma2 * K).
struct VarianceTerms {
  double scale = 1.0;  ///< tau_a^2 nu^2
  /// Integrate sigma^2 against InvGamma(shape, rate); otherwise use sigma2.
  bool integrate_sigma = true;
  double sigma2 = 1.0;
  double shape = 0.5;
  double rate = 1.0;
};

enum class MarginalRoute { automatic, dense, woodbury };

/// Conditional posterior of the effects of one tree, with the pieces of the
/// integrated marginal. Built by factorising the precision
///   P = blockdiag(U_b'U_b + K_b^{-1}/scale) - (Q'U)'(Q'U)
/// either directly or through the Woodbury identity on the p x p capacitance.
class EffectPosterior {
 public:
  /// Throws NumericalError when a pivot falls below 1e-12 relative.
  EffectPosterior(const DesignBlock& block, const VarianceTerms& v, MarginalRoute route = MarginalRoute::automatic);

  /// Log of the integrated likelihood (with all normalising constants).
  double log_marginal() const { return log_marginal_; }
  /// Residual sum of squares after integrating the effects: S.
  double quadratic() const { return s_; }
  double log_det_precision() const { return log_det_p_; }
  const Eigen::VectorXd& mean() const { return mean_; }
  MarginalRoute route() const { return route_; }

  /// Shape and rate of the conditional InvGamma of sigma^2 after the effects
  /// are integrated (only meaningful when integrating sigma).
  double posterior_shape() const { return post_shape_; }
  double posterior_rate() const { return post_rate_; }

  /// Draw from N(mean, sigma2 * P^{-1}).
  Eigen::VectorXd draw(double sigma2, Rng& rng) const;
  /// Dense P^{-1} (tests and diagnostics).
  Eigen::MatrixXd covariance_factor_inverse() const;

 private:
  void build_dense(const DesignBlock& block, const VarianceTerms& v);
  void build_woodbury(const DesignBlock& block, const VarianceTerms& v);

  MarginalRoute route_;
  Eigen::VectorXd mean_;
  double s_ = 0, log_det_p_ = 0, log_marginal_ = 0;
  double post_shape_ = 0, post_rate_ = 0;
  // dense
  Eigen::LDLT<Eigen::MatrixXd> p_ldlt_;
  // woodbury
  std::vector<Eigen::LDLT<Eigen::MatrixXd>> a_ldlt_;
  std::vector<Eigen::MatrixXd> g_;  // A_b^{-1} qu_b'
  std::vector<Eigen::Index> offset_;
  Eigen::LDLT<Eigen::MatrixXd> m_ldlt_;
};

/// Convenience wrapper: log marginal of the block.
double integrated_log_marginal(const DesignBlock& block, const VarianceTerms& v,
                               MarginalRoute route = MarginalRoute::automatic);

/// Draw of all cell effects of the block at the given sigma^2.
Eigen::VectorXd gibbs_draw_effects(const DesignBlock& block, const VarianceTerms& v, double sigma2, Rng& rng);

/// Exponential-kernel correlation exp(-phi |t - t'|) over T lags.
Eigen::MatrixXd gp_covariance(int lags, double phi);
/// Its inverse (tridiagonal) and log determinant, in closed form.
Eigen::MatrixXd gp_precision(int lags, double phi);
double gp_log_det(int lags, double phi);
/// delta' K^{-1} delta in O(T).
double gp_quadratic(std::span<const double> delta, double phi);

/// Admissible range: exp(-phi) in (0.05, 0.95).
inline constexpr double kPhiMin = 0.051293294387550536;  // -log(0.95)
inline constexpr double kPhiMax = 2.995732273553991;     // -log(0.05)

}  // namespace hdlm
