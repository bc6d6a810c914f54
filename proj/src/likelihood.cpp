#include "hdlm/likelihood.hpp"

#include <cmath>
#include <numbers>

#include "hdlm/error.hpp"

namespace hdlm {

namespace {

constexpr double kPivotTolerance = 1e-12;

// Log determinant from an LDLT of a positive definite matrix; throws when
// the smallest pivot is below the relative tolerance.
double checked_log_det(const Eigen::LDLT<Eigen::MatrixXd>& ldlt, const char* what) {
  if (ldlt.info() != Eigen::Success) throw NumericalError(std::string(what) + ": factorisation failed");
  const auto& d = ldlt.vectorD();
  const double top = d.cwiseAbs().maxCoeff();
  double out = 0;
  for (Eigen::Index k = 0; k < d.size(); ++k) {
    if (!(d(k) > kPivotTolerance * top)) throw NumericalError(std::string(what) + ": numerically singular");
    out += std::log(d(k));
  }
  return out;
}

// x ~ N(0, A^{-1}) given A = P' L D L' P.
Eigen::VectorXd ldlt_sample(const Eigen::LDLT<Eigen::MatrixXd>& ldlt, Rng& rng) {
  const Eigen::Index k = ldlt.rows();
  Eigen::VectorXd y(k);
  for (Eigen::Index i = 0; i < k; ++i) y(i) = rng.normal() / std::sqrt(ldlt.vectorD()(i));
  Eigen::VectorXd w = ldlt.matrixU().solve(y);
  return ldlt.transpositionsP().transpose() * w;
}

void add_prior_precision(Eigen::Ref<Eigen::MatrixXd> a, const CellBlock& b, double scale) {
  if (b.k_inv.size() == 0)
    a.diagonal().array() += 1.0 / scale;
  else
    a += b.k_inv / scale;
}

}  // namespace

FixedEffectsProjection::FixedEffectsProjection(const Eigen::MatrixXd& z) : z_(z) {
  const Eigen::Index n = z.rows(), p = z.cols();
  if (p == 0) throw DataError("fixed-effect design has no columns");
  if (p > n) throw DataError("rank-deficient fixed-effect design: more columns than rows");
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> piv(z);
  piv.setThreshold(1e-10);
  if (piv.rank() < p) throw DataError("rank-deficient fixed-effect design (rank " + std::to_string(piv.rank()) + " < " +
                                      std::to_string(p) + ")");
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(z);
  q_ = qr.householderQ() * Eigen::MatrixXd::Identity(n, p);
  Eigen::MatrixXd r = qr.matrixQR().topRows(p).triangularView<Eigen::Upper>();
  r_inv_ = r.triangularView<Eigen::Upper>().solve(Eigen::MatrixXd::Identity(p, p));
  ztz_inv_ = r_inv_ * r_inv_.transpose();
}

Eigen::VectorXd FixedEffectsProjection::residualize(const Eigen::VectorXd& v) const {
  Eigen::VectorXd c = kernels::project_coefficients(q_, v);
  return v - q_ * c;
}

Eigen::MatrixXd FixedEffectsProjection::residualize(const Eigen::MatrixXd& v) const {
  Eigen::MatrixXd c = q_.transpose() * v;
  return v - q_ * c;
}

Eigen::VectorXd FixedEffectsProjection::coefficients(const Eigen::VectorXd& v) const {
  return r_inv_ * kernels::project_coefficients(q_, v);
}

FixedEffectsProjection residualize(const Dataset& data) { return FixedEffectsProjection(data.z); }

CellBlock aggregate(const LeafStats& stats, std::span<const DlmTree::Segment> segments) {
  const auto C = static_cast<Eigen::Index>(segments.size());
  const Eigen::Index T = stats.gram.rows();
  Eigen::MatrixXd gs = Eigen::MatrixXd::Zero(T, C);
  CellBlock out;
  out.qu = Eigen::MatrixXd::Zero(stats.qx.rows(), C);
  out.ur = Eigen::VectorXd::Zero(C);
  for (Eigen::Index c = 0; c < C; ++c) {
    const auto& s = segments[static_cast<std::size_t>(c)];
    for (int t = s.begin; t <= s.end; ++t) {
      gs.col(c) += stats.gram.col(t - 1);
      out.qu.col(c) += stats.qx.col(t - 1);
      if (stats.xr.size() == T) out.ur(c) += stats.xr(t - 1);
    }
  }
  out.gram = Eigen::MatrixXd::Zero(C, C);
  for (Eigen::Index c = 0; c < C; ++c) {
    const auto& s = segments[static_cast<std::size_t>(c)];
    for (int t = s.begin; t <= s.end; ++t) out.gram.row(c) += gs.row(t - 1);
  }
  return out;
}

CellBlock lag_block(const LeafStats& stats, const Eigen::MatrixXd& k_inv, double log_det_k) {
  CellBlock out;
  out.gram = stats.gram;
  out.qu = stats.qx;
  out.ur = stats.xr;
  out.k_inv = k_inv;
  out.log_det_k = log_det_k;
  return out;
}

Eigen::Index DesignBlock::cells() const {
  Eigen::Index c = 0;
  for (const auto& b : leaves) c += b.cells();
  return c;
}

EffectPosterior::EffectPosterior(const DesignBlock& block, const VarianceTerms& v, MarginalRoute route) {
  if (!(v.scale > 0)) throw NumericalError("effect variance scale must be positive");
  const Eigen::Index C = block.cells();
  const Eigen::Index p = block.qr.size();
  if (route == MarginalRoute::automatic) route = C > 2 * p + 8 ? MarginalRoute::woodbury : MarginalRoute::dense;
  route_ = route;
  if (route == MarginalRoute::dense)
    build_dense(block, v);
  else
    build_woodbury(block, v);

  double log_det_prior = 0;
  for (const auto& b : block.leaves)
    log_det_prior += static_cast<double>(b.cells()) * std::log(v.scale) + b.log_det_k;
  const double N = static_cast<double>(block.dof);
  const double base = -0.5 * N * std::log(2 * std::numbers::pi) - 0.5 * log_det_prior - 0.5 * log_det_p_;
  if (v.integrate_sigma) {
    post_shape_ = v.shape + 0.5 * N;
    post_rate_ = v.rate + 0.5 * s_;
    log_marginal_ = base + v.shape * std::log(v.rate) - std::lgamma(v.shape) + std::lgamma(post_shape_) -
                    post_shape_ * std::log(post_rate_);
  } else {
    log_marginal_ = base - 0.5 * N * std::log(v.sigma2) - 0.5 * s_ / v.sigma2;
  }
}

void EffectPosterior::build_dense(const DesignBlock& block, const VarianceTerms& v) {
  const Eigen::Index C = block.cells();
  const Eigen::Index p = block.qr.size();
  Eigen::MatrixXd prec = Eigen::MatrixXd::Zero(C, C);
  Eigen::MatrixXd f(p, C);
  Eigen::VectorXd beta(C);
  Eigen::Index off = 0;
  for (const auto& b : block.leaves) {
    const Eigen::Index c = b.cells();
    prec.block(off, off, c, c) = b.gram;
    add_prior_precision(prec.block(off, off, c, c), b, v.scale);
    f.middleCols(off, c) = b.qu;
    beta.segment(off, c) = b.ur;
    off += c;
  }
  prec.noalias() -= f.transpose() * f;
  beta.noalias() -= f.transpose() * block.qr;
  p_ldlt_.compute(prec);
  log_det_p_ = checked_log_det(p_ldlt_, "effect precision");
  mean_ = p_ldlt_.solve(beta);
  s_ = block.rr - block.qr.squaredNorm() - beta.dot(mean_);
}

void EffectPosterior::build_woodbury(const DesignBlock& block, const VarianceTerms& v) {
  const Eigen::Index p = block.qr.size();
  const std::size_t L = block.leaves.size();
  a_ldlt_.resize(L);
  g_.resize(L);
  offset_.resize(L);
  Eigen::MatrixXd m = Eigen::MatrixXd::Identity(p, p);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(p);
  std::vector<Eigen::VectorXd> a(L);
  double bpb = 0;
  log_det_p_ = 0;
  Eigen::Index off = 0;
  for (std::size_t k = 0; k < L; ++k) {
    const auto& b = block.leaves[k];
    Eigen::MatrixXd ak = b.gram;
    add_prior_precision(ak, b, v.scale);
    a_ldlt_[k].compute(ak);
    log_det_p_ += checked_log_det(a_ldlt_[k], "leaf precision");
    Eigen::VectorXd beta = b.ur - b.qu.transpose() * block.qr;
    a[k] = a_ldlt_[k].solve(beta);
    bpb += beta.dot(a[k]);
    g_[k] = a_ldlt_[k].solve(b.qu.transpose());
    m.noalias() -= b.qu * g_[k];
    g.noalias() += b.qu * a[k];
    offset_[k] = off;
    off += b.cells();
  }
  m_ldlt_.compute(m);
  log_det_p_ += checked_log_det(m_ldlt_, "capacitance");
  Eigen::VectorXd h = m_ldlt_.solve(g);
  mean_.resize(off);
  for (std::size_t k = 0; k < L; ++k) mean_.segment(offset_[k], a[k].size()) = a[k] + g_[k] * h;
  bpb += g.dot(h);
  s_ = block.rr - block.qr.squaredNorm() - bpb;
}

Eigen::VectorXd EffectPosterior::draw(double sigma2, Rng& rng) const {
  const double sd = std::sqrt(sigma2);
  if (route_ == MarginalRoute::dense) return mean_ + sd * ldlt_sample(p_ldlt_, rng);
  Eigen::VectorXd x(mean_.size());
  for (std::size_t k = 0; k < a_ldlt_.size(); ++k) x.segment(offset_[k], a_ldlt_[k].rows()) = ldlt_sample(a_ldlt_[k], rng);
  Eigen::VectorXd vm = ldlt_sample(m_ldlt_, rng);
  for (std::size_t k = 0; k < g_.size(); ++k) x.segment(offset_[k], g_[k].rows()) += g_[k] * vm;
  return mean_ + sd * x;
}

Eigen::MatrixXd EffectPosterior::covariance_factor_inverse() const {
  const Eigen::Index C = mean_.size();
  if (route_ == MarginalRoute::dense) return p_ldlt_.solve(Eigen::MatrixXd::Identity(C, C));
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(C, C);
  Eigen::MatrixXd g(C, m_ldlt_.rows());
  for (std::size_t k = 0; k < a_ldlt_.size(); ++k) {
    const Eigen::Index c = a_ldlt_[k].rows();
    out.block(offset_[k], offset_[k], c, c) = a_ldlt_[k].solve(Eigen::MatrixXd::Identity(c, c));
    g.middleRows(offset_[k], c) = g_[k];
  }
  out += g * m_ldlt_.solve(g.transpose());
  return out;
}

double integrated_log_marginal(const DesignBlock& block, const VarianceTerms& v, MarginalRoute route) {
  return EffectPosterior(block, v, route).log_marginal();
}

Eigen::VectorXd gibbs_draw_effects(const DesignBlock& block, const VarianceTerms& v, double sigma2, Rng& rng) {
  return EffectPosterior(block, v).draw(sigma2, rng);
}

Eigen::MatrixXd gp_covariance(int lags, double phi) {
  Eigen::MatrixXd k(lags, lags);
  for (int s = 0; s < lags; ++s)
    for (int t = 0; t < lags; ++t) k(s, t) = std::exp(-phi * std::abs(s - t));
  return k;
}

Eigen::MatrixXd gp_precision(int lags, double phi) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(lags, lags);
  if (lags == 1) {
    out(0, 0) = 1.0;
    return out;
  }
  const double rho = std::exp(-phi);
  const double c = 1.0 / (1.0 - rho * rho);
  for (int t = 0; t < lags; ++t) {
    out(t, t) = (t == 0 || t == lags - 1) ? c : c * (1.0 + rho * rho);
    if (t + 1 < lags) out(t, t + 1) = out(t + 1, t) = -c * rho;
  }
  return out;
}

double gp_log_det(int lags, double phi) {
  const double rho = std::exp(-phi);
  return (lags - 1) * std::log1p(-rho * rho);
}

double gp_quadratic(std::span<const double> d, double phi) {
  const std::size_t T = d.size();
  if (T == 0) return 0.0;
  if (T == 1) return d[0] * d[0];
  const double rho = std::exp(-phi);
  double sq = 0, inner = 0, cross = 0;
  for (std::size_t t = 0; t < T; ++t) {
    sq += d[t] * d[t];
    if (t > 0 && t + 1 < T) inner += d[t] * d[t];
    if (t + 1 < T) cross += d[t] * d[t + 1];
  }
  return (sq + rho * rho * inner - 2 * rho * cross) / (1.0 - rho * rho);
}

}  // namespace hdlm
