#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <sys/wait.h>
#include <unistd.h>

#include <Eigen/Dense>

#include "hdlm/data.hpp"
#include "hdlm/rng.hpp"

namespace hdlm::test {

/// Asymptotic Kolmogorov distribution tail with the usual small-sample
/// correction on the statistic.
inline double kolmogorov_tail(double lambda) {
  if (lambda < 1e-3) return 1.0;
  double sum = 0.0;
  for (int k = 1; k <= 200; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 ? 2.0 : -2.0) * term;
    if (term < 1e-16) break;
  }
  return std::clamp(sum, 0.0, 1.0);
}

/// One-sample KS p-value of `x` against the continuous cdf.
inline double ks_pvalue(std::vector<double> x, const std::function<double(double)>& cdf) {
  std::sort(x.begin(), x.end());
  const double n = static_cast<double>(x.size());
  double d = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double f = cdf(x[i]);
    d = std::max({d, f - static_cast<double>(i) / n, static_cast<double>(i + 1) / n - f});
  }
  const double sn = std::sqrt(n);
  return kolmogorov_tail((sn + 0.12 + 0.11 / sn) * d);
}

inline double mean(const std::vector<double>& v) {
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double variance(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

/// Monte Carlo standard error of the mean of a correlated series by
/// non-overlapping batch means.
inline double batch_means_se(const std::vector<double>& v, int batches = 20) {
  const std::size_t len = v.size() / static_cast<std::size_t>(batches);
  std::vector<double> means;
  for (int b = 0; b < batches; ++b) {
    double s = 0.0;
    for (std::size_t k = 0; k < len; ++k) s += v[static_cast<std::size_t>(b) * len + k];
    means.push_back(s / static_cast<double>(len));
  }
  return std::sqrt(variance(means) / static_cast<double>(batches));
}

/// Mixed-kind schema used by many fixtures: a continuous, an ordinal with
/// four levels, a nominal with three levels and a binary modifier.
inline ModifierSchema mixed_schema() {
  return ModifierSchema({{"age", ModifierKind::continuous, {}},
                         {"smoke", ModifierKind::ordinal, {"never", "former", "light", "heavy"}},
                         {"race", ModifierKind::nominal, {"a", "b", "c"}},
                         {"sex", ModifierKind::binary, {"f", "m"}}});
}

/// Synthetic dataset: intercept plus one covariate in Z, AR(1) exposures,
/// modifiers per mixed_schema(), y = x' theta + Z gamma + noise with theta
/// nonzero on lags [T/4, T/2) for rows with age > 0.
inline Dataset mixed_dataset(Eigen::Index n, int lags, std::uint64_t seed, double effect = 1.0,
                             double noise_sd = 1.0) {
  Rng rng(seed);
  Dataset d;
  d.schema = mixed_schema();
  d.x = generate_exposures(n, lags, ExposureProcess{0.0, 1.0, 0.5}, derive_seed(seed, 1));
  d.z.resize(n, 2);
  d.m.resize(n, 4);
  d.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d.z(i, 0) = 1.0;
    d.z(i, 1) = rng.normal();
    d.m(i, 0) = std::round(rng.normal() * 100.0) / 100.0;
    d.m(i, 1) = static_cast<double>(rng.index(4));
    d.m(i, 2) = static_cast<double>(rng.index(3));
    d.m(i, 3) = static_cast<double>(rng.index(2));
    double s = 0.0;
    if (d.m(i, 0) > 0)
      for (int t = lags / 4; t < lags / 2; ++t) s += effect * d.x(i, t);
    d.y(i) = s + 0.5 - 0.3 * d.z(i, 1) + noise_sd * rng.normal();
  }
  d.columns.outcome = "y";
  for (int t = 1; t <= lags; ++t) d.columns.exposures.push_back("x" + std::to_string(t));
  d.columns.fixed = {"w"};
  d.columns.add_intercept = true;
  return d;
}

/// Fresh scratch directory under the system temp directory.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("hdlm-test-" + name + "-" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void spit(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

/// Runs a shell command; returns its exit code (-1 if it did not exit).
inline int run(const std::string& cmd) {
  const int status = std::system(cmd.c_str());
  if (status == -1 || !WIFEXITED(status)) return -1;
  return WEXITSTATUS(status);
}

}  // namespace hdlm::test
