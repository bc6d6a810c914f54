// Serial reference kernels against the OpenMP versions.
// Row counts follow the desk fits (n = 2000) and the full tables (n = 5000).

#include <benchmark/benchmark.h>

#include <numeric>
#include <random>
#include <vector>

#include "hdlm/kernels.hpp"

using namespace hdlm;

namespace {

constexpr int kLags = 37;
constexpr int kFixed = 14;

struct Inputs {
  RowMatrix x, q;
  Eigen::VectorXd r, theta;
  std::vector<int> rows;

  explicit Inputs(int n) {
    std::mt19937_64 gen(11);
    std::normal_distribution<double> z;
    x = RowMatrix::NullaryExpr(n, kLags, [&] { return z(gen); });
    q = RowMatrix::NullaryExpr(n, kFixed, [&] { return z(gen); });
    r = Eigen::VectorXd::NullaryExpr(n, [&] { return z(gen); });
    theta = Eigen::VectorXd::NullaryExpr(kLags, [&] { return z(gen); });
    // a leaf holding every other row
    for (int i = 0; i < n; i += 2) rows.push_back(i);
  }
};

const Inputs& inputs(int n) {
  static const Inputs small(2000), large(5000);
  return n == 2000 ? small : large;
}

template <auto Fn>
void bm_leaf_gram(benchmark::State& state) {
  const Inputs& in = inputs(static_cast<int>(state.range(0)));
  LeafStats out;
  for (auto _ : state) {
    Fn(in.x, in.q, in.rows, out);
    benchmark::DoNotOptimize(out.gram.data());
  }
}

template <auto Fn>
void bm_leaf_xr(benchmark::State& state) {
  const Inputs& in = inputs(static_cast<int>(state.range(0)));
  Eigen::VectorXd out;
  for (auto _ : state) {
    Fn(in.x, in.r, in.rows, out);
    benchmark::DoNotOptimize(out.data());
  }
}

template <auto Fn>
void bm_leaf_fit(benchmark::State& state) {
  const Inputs& in = inputs(static_cast<int>(state.range(0)));
  Eigen::VectorXd f = Eigen::VectorXd::Zero(in.x.rows());
  for (auto _ : state) {
    Fn(in.x, in.rows, in.theta, f);
    benchmark::DoNotOptimize(f.data());
  }
}

template <auto Fn>
void bm_project(benchmark::State& state) {
  const Inputs& in = inputs(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(Fn(in.q, in.r));
}

// draws x cells, as in a curves summary of 500 draws over 200 rows and 37 lags
template <auto Fn>
void bm_quantiles(benchmark::State& state) {
  std::mt19937_64 gen(5);
  std::normal_distribution<double> z;
  const Eigen::MatrixXd s = Eigen::MatrixXd::NullaryExpr(500, state.range(0), [&] { return z(gen); });
  Eigen::VectorXd mean, lo, hi;
  for (auto _ : state) {
    Fn(s, 0.025, 0.975, mean, lo, hi);
    benchmark::DoNotOptimize(lo.data());
  }
}

}  // namespace

BENCHMARK(bm_leaf_gram<kernels::serial::leaf_gram>)->Name("leaf_gram/serial")->Arg(2000)->Arg(5000);
BENCHMARK(bm_leaf_gram<kernels::leaf_gram>)->Name("leaf_gram/openmp")->Arg(2000)->Arg(5000);
BENCHMARK(bm_leaf_xr<kernels::serial::leaf_xr>)->Name("leaf_xr/serial")->Arg(2000)->Arg(5000);
BENCHMARK(bm_leaf_xr<kernels::leaf_xr>)->Name("leaf_xr/openmp")->Arg(2000)->Arg(5000);
BENCHMARK(bm_leaf_fit<kernels::serial::leaf_fit>)->Name("leaf_fit/serial")->Arg(2000)->Arg(5000);
BENCHMARK(bm_leaf_fit<kernels::leaf_fit>)->Name("leaf_fit/openmp")->Arg(2000)->Arg(5000);
BENCHMARK(bm_project<kernels::serial::project_coefficients>)->Name("project/serial")->Arg(2000)->Arg(5000);
BENCHMARK(bm_project<kernels::project_coefficients>)->Name("project/openmp")->Arg(2000)->Arg(5000);
BENCHMARK(bm_quantiles<kernels::serial::column_quantiles>)->Name("quantiles/serial")->Arg(200 * 37);
BENCHMARK(bm_quantiles<kernels::column_quantiles>)->Name("quantiles/openmp")->Arg(200 * 37);

BENCHMARK_MAIN();
