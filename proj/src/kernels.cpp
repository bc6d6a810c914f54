#include "hdlm/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <omp.h>

namespace hdlm {

LeafStats& LeafStats::operator+=(const LeafStats& o) {
  gram += o.gram;
  qx += o.qx;
  if (xr.size() == o.xr.size()) xr += o.xr;
  rows += o.rows;
  return *this;
}

LeafStats& LeafStats::operator-=(const LeafStats& o) {
  gram -= o.gram;
  qx -= o.qx;
  if (xr.size() == o.xr.size()) xr -= o.xr;
  rows -= o.rows;
  return *this;
}

namespace kernels {

namespace {

Eigen::Index chunk_count(std::size_t rows) {
  return (static_cast<Eigen::Index>(rows) + kChunk - 1) / kChunk;
}

}  // namespace

void leaf_gram(const RowMatrix& x, const RowMatrix& q, std::span<const int> rows, LeafStats& out) {
  const Eigen::Index T = x.cols(), p = q.cols();
  const Eigen::Index chunks = chunk_count(rows.size());
  std::vector<Eigen::MatrixXd> grams(static_cast<std::size_t>(chunks));
  std::vector<Eigen::MatrixXd> qxs(static_cast<std::size_t>(chunks));
#pragma omp parallel for schedule(static) if (chunks > 1)
  for (Eigen::Index c = 0; c < chunks; ++c) {
    const Eigen::Index b = c * kChunk;
    const Eigen::Index len = std::min<Eigen::Index>(kChunk, static_cast<Eigen::Index>(rows.size()) - b);
    RowMatrix xc(len, T), qc(len, p);
    for (Eigen::Index k = 0; k < len; ++k) {
      const int i = rows[static_cast<std::size_t>(b + k)];
      xc.row(k) = x.row(i);
      qc.row(k) = q.row(i);
    }
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(T, T);
    g.selfadjointView<Eigen::Lower>().rankUpdate(xc.transpose());
    grams[static_cast<std::size_t>(c)] = g.selfadjointView<Eigen::Lower>();
    qxs[static_cast<std::size_t>(c)].noalias() = qc.transpose() * xc;
  }
  out.gram = Eigen::MatrixXd::Zero(T, T);
  out.qx = Eigen::MatrixXd::Zero(p, T);
  for (Eigen::Index c = 0; c < chunks; ++c) {
    out.gram += grams[static_cast<std::size_t>(c)];
    out.qx += qxs[static_cast<std::size_t>(c)];
  }
  out.rows = rows.size();
}

void leaf_xr(const RowMatrix& x, const Eigen::VectorXd& r, std::span<const int> rows, Eigen::VectorXd& out) {
  const Eigen::Index T = x.cols();
  const Eigen::Index chunks = chunk_count(rows.size());
  Eigen::MatrixXd partial(T, std::max<Eigen::Index>(chunks, 1));
  partial.setZero();
#pragma omp parallel for schedule(static) if (chunks > 1)
  for (Eigen::Index c = 0; c < chunks; ++c) {
    const Eigen::Index b = c * kChunk;
    const Eigen::Index e = std::min<Eigen::Index>(b + kChunk, static_cast<Eigen::Index>(rows.size()));
    Eigen::VectorXd acc = Eigen::VectorXd::Zero(T);
    for (Eigen::Index k = b; k < e; ++k) {
      const int i = rows[static_cast<std::size_t>(k)];
      acc += r(i) * x.row(i).transpose();
    }
    partial.col(c) = acc;
  }
  out = Eigen::VectorXd::Zero(T);
  for (Eigen::Index c = 0; c < chunks; ++c) out += partial.col(c);
}

void leaf_fit(const RowMatrix& x, std::span<const int> rows, const Eigen::VectorXd& theta, Eigen::VectorXd& f) {
  const auto n = static_cast<Eigen::Index>(rows.size());
#pragma omp parallel for schedule(static) if (n > 4 * kChunk)
  for (Eigen::Index k = 0; k < n; ++k) {
    const int i = rows[static_cast<std::size_t>(k)];
    f(i) = x.row(i).dot(theta.transpose());
  }
}

Eigen::VectorXd project_coefficients(const RowMatrix& q, const Eigen::VectorXd& v) {
  const Eigen::Index n = q.rows(), p = q.cols();
  const Eigen::Index chunks = (n + kChunk - 1) / kChunk;
  Eigen::MatrixXd partial(p, std::max<Eigen::Index>(chunks, 1));
  partial.setZero();
#pragma omp parallel for schedule(static) if (chunks > 1)
  for (Eigen::Index c = 0; c < chunks; ++c) {
    const Eigen::Index b = c * kChunk;
    const Eigen::Index len = std::min<Eigen::Index>(kChunk, n - b);
    partial.col(c).noalias() = q.middleRows(b, len).transpose() * v.segment(b, len);
  }
  Eigen::VectorXd out = Eigen::VectorXd::Zero(p);
  for (Eigen::Index c = 0; c < chunks; ++c) out += partial.col(c);
  return out;
}

double sorted_quantile(std::span<const double> sorted, double prob) {
  if (sorted.empty()) return std::nan("");
  const double h = (static_cast<double>(sorted.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

void column_quantiles(const Eigen::MatrixXd& samples, double lo, double hi, Eigen::VectorXd& mean,
                      Eigen::VectorXd& lower, Eigen::VectorXd& upper) {
  const Eigen::Index cols = samples.cols(), draws = samples.rows();
  mean.resize(cols);
  lower.resize(cols);
  upper.resize(cols);
#pragma omp parallel
  {
    std::vector<double> buf(static_cast<std::size_t>(draws));
#pragma omp for schedule(static)
    for (Eigen::Index c = 0; c < cols; ++c) {
      Eigen::Map<Eigen::VectorXd>(buf.data(), draws) = samples.col(c);
      mean(c) = samples.col(c).mean();
      std::sort(buf.begin(), buf.end());
      lower(c) = sorted_quantile(buf, lo);
      upper(c) = sorted_quantile(buf, hi);
    }
  }
}

namespace serial {

void leaf_gram(const RowMatrix& x, const RowMatrix& q, std::span<const int> rows, LeafStats& out) {
  const Eigen::Index T = x.cols(), p = q.cols();
  out.gram = Eigen::MatrixXd::Zero(T, T);
  out.qx = Eigen::MatrixXd::Zero(p, T);
  for (int i : rows) {
    for (Eigen::Index s = 0; s < T; ++s) {
      const double xs = x(i, s);
      for (Eigen::Index t = 0; t < T; ++t) out.gram(s, t) += xs * x(i, t);
      for (Eigen::Index k = 0; k < p; ++k) out.qx(k, s) += q(i, k) * xs;
    }
  }
  out.rows = rows.size();
}

void leaf_xr(const RowMatrix& x, const Eigen::VectorXd& r, std::span<const int> rows, Eigen::VectorXd& out) {
  out = Eigen::VectorXd::Zero(x.cols());
  for (int i : rows)
    for (Eigen::Index t = 0; t < x.cols(); ++t) out(t) += x(i, t) * r(i);
}

void leaf_fit(const RowMatrix& x, std::span<const int> rows, const Eigen::VectorXd& theta, Eigen::VectorXd& f) {
  for (int i : rows) {
    double s = 0;
    for (Eigen::Index t = 0; t < x.cols(); ++t) s += x(i, t) * theta(t);
    f(i) = s;
  }
}

Eigen::VectorXd project_coefficients(const RowMatrix& q, const Eigen::VectorXd& v) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(q.cols());
  for (Eigen::Index i = 0; i < q.rows(); ++i)
    for (Eigen::Index k = 0; k < q.cols(); ++k) out(k) += q(i, k) * v(i);
  return out;
}

void column_quantiles(const Eigen::MatrixXd& samples, double lo, double hi, Eigen::VectorXd& mean,
                      Eigen::VectorXd& lower, Eigen::VectorXd& upper) {
  const Eigen::Index cols = samples.cols(), draws = samples.rows();
  mean.resize(cols);
  lower.resize(cols);
  upper.resize(cols);
  std::vector<double> buf(static_cast<std::size_t>(draws));
  for (Eigen::Index c = 0; c < cols; ++c) {
    double s = 0;
    for (Eigen::Index d = 0; d < draws; ++d) {
      buf[static_cast<std::size_t>(d)] = samples(d, c);
      s += samples(d, c);
    }
    mean(c) = s / static_cast<double>(draws);
    std::sort(buf.begin(), buf.end());
    lower(c) = sorted_quantile(buf, lo);
    upper(c) = sorted_quantile(buf, hi);
  }
}

}  // namespace serial
}  // namespace kernels
}  // namespace hdlm
