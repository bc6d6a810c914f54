#pragma once

#include <span>

#include <Eigen/Dense>

#include "hdlm/data.hpp"

namespace hdlm {

/// Per-leaf sufficient statistics of the lag design restricted to a row set.
struct LeafStats {
  Eigen::MatrixXd gram;  ///< T x T, X_b' X_b
  Eigen::MatrixXd qx;    ///< p x T, Q_b' X_b
  Eigen::VectorXd xr;    ///< T, X_b' R_b
  std::size_t rows = 0;

  LeafStats& operator+=(const LeafStats& o);
  LeafStats& operator-=(const LeafStats& o);
};

/// Hot loops of the sampler and the posterior summaries.
///
/// The OpenMP versions split rows into fixed-size chunks and add the chunk
/// partials in chunk order, so results do not depend on the thread count.
/// The `serial` namespace holds straightforward reference versions used by
/// the tests and the benchmark.
namespace kernels {

inline constexpr Eigen::Index kChunk = 256;

/// gram and qx for the rows (xr untouched).
void leaf_gram(const RowMatrix& x, const RowMatrix& q, std::span<const int> rows, LeafStats& out);
/// X_b' r.
void leaf_xr(const RowMatrix& x, const Eigen::VectorXd& r, std::span<const int> rows, Eigen::VectorXd& out);
/// f(i) = x_i . theta for i in rows; other entries untouched.
void leaf_fit(const RowMatrix& x, std::span<const int> rows, const Eigen::VectorXd& theta, Eigen::VectorXd& f);
/// Q' v.
Eigen::VectorXd project_coefficients(const RowMatrix& q, const Eigen::VectorXd& v);

/// Equal-tail quantiles along each column of `samples` (draws x cells),
/// linear interpolation between order statistics. Columns are independent.
void column_quantiles(const Eigen::MatrixXd& samples, double lo, double hi, Eigen::VectorXd& mean,
                      Eigen::VectorXd& lower, Eigen::VectorXd& upper);

namespace serial {
void leaf_gram(const RowMatrix& x, const RowMatrix& q, std::span<const int> rows, LeafStats& out);
void leaf_xr(const RowMatrix& x, const Eigen::VectorXd& r, std::span<const int> rows, Eigen::VectorXd& out);
void leaf_fit(const RowMatrix& x, std::span<const int> rows, const Eigen::VectorXd& theta, Eigen::VectorXd& f);
Eigen::VectorXd project_coefficients(const RowMatrix& q, const Eigen::VectorXd& v);
void column_quantiles(const Eigen::MatrixXd& samples, double lo, double hi, Eigen::VectorXd& mean,
                      Eigen::VectorXd& lower, Eigen::VectorXd& upper);
}  // namespace serial

/// Linear-interpolation quantile of sorted data (type 7).
double sorted_quantile(std::span<const double> sorted, double prob);

}  // namespace kernels
}  // namespace hdlm
