#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/gamma.hpp>
#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/special_functions/gamma.hpp>

#include "hdlm/error.hpp"
#include "hdlm/samplers.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace hdlm;

namespace {

// n rows, T lags, intercept-only Z and one binary modifier alternating 0/1.
// y = 0.3 + effect * x_2 for rows with modifier 1, plus unit noise.
Dataset binary_dataset(Eigen::Index n, int lags, std::uint64_t seed, double effect) {
  Rng rng(seed);
  Dataset d;
  d.schema = ModifierSchema({{"b", ModifierKind::binary, {"0", "1"}}});
  d.x = generate_exposures(n, lags, ExposureProcess{0.0, 1.0, 0.5}, derive_seed(seed, 1));
  d.z = Eigen::MatrixXd::Ones(n, 1);
  d.m.resize(n, 1);
  d.y.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d.m(i, 0) = static_cast<double>(i % 2);
    d.y(i) = 0.3 + (i % 2 ? effect * d.x(i, 1) : 0.0) + rng.normal();
  }
  d.columns.outcome = "y";
  for (int t = 1; t <= lags; ++t) d.columns.exposures.push_back("x" + std::to_string(t));
  d.columns.add_intercept = true;
  return d;
}

FitConfig small_config(ModelKind model, int trees, std::uint64_t seed) {
  FitConfig c;
  c.model = model;
  c.trees = trees;
  c.iterations = 100;
  c.burn_in = 50;
  c.thin = 1;
  c.seed = seed;
  c.modifier_prior.min_leaf = 5;
  return c;
}

constexpr ModelKind kAllModels[] = {ModelKind::tdlm, ModelKind::gp_dlm, ModelKind::hdlm_nested,
                                    ModelKind::hdlm_shared, ModelKind::hdlm_gp};

std::string dlm_key(const DlmTree& d) {
  std::string k;
  for (const auto& nd : d.nodes()) k += nd.leaf() ? "0" : std::to_string(nd.split);
  return k;
}

// Modifier structure ("R" root only, "S" split) and the DLM structure of
// every leaf in pre-order.
std::string state_key(const ModifierTree& t) {
  std::string k = t.leaf_count() == 1 ? "R" : "S";
  for (int leaf : t.leaves()) {
    const auto& lag = t.node(leaf).lag;
    if (!lag.is_curve()) k += ":" + dlm_key(lag.dlm);
  }
  return k;
}

// ---------------------------------------------------------------------------
// Posterior over structures by direct quadrature.
//
// Model: R = U delta + eps, eps ~ N(0, sigma^2 I) in complement coordinates,
// delta ~ N(0, sigma^2 s K), s = tau^2 nu^2, tau, nu, sigma ~ C+(0, 1).
// log s is the sum of two independent log-half-Cauchy-squares, whose density
// is w / (2 pi^2 sinh(w / 2)); log sigma^2 has density e^{u/2} / (pi (1 + e^u)).

double log_density_log_scale_product(double w) {
  if (std::abs(w) < 1e-8) return -std::log(std::numbers::pi * std::numbers::pi);
  const double x = std::abs(w) / 2;
  const double log_sinh = x + std::log1p(-std::exp(-2 * x)) - std::log(2.0);
  return std::log(std::abs(w)) - std::log(2 * std::numbers::pi * std::numbers::pi) - log_sinh;
}

double log_density_log_square_half_cauchy(double u) {
  return 0.5 * u - std::log(std::numbers::pi) - (u > 0 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u)));
}

// log of the evidence up to a constant shared by all structures with the
// same N. `ub` is B'U times a square root of K.
double half_cauchy_log_evidence(const Eigen::MatrixXd& ub, const Eigen::VectorXd& rb) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(ub, Eigen::ComputeThinU);
  const Eigen::VectorXd lambda = svd.singularValues().array().square();
  const Eigen::VectorXd proj = (svd.matrixU().transpose() * rb).array().square();
  const double rr = rb.squaredNorm();
  const double N = static_cast<double>(rb.size());
  const double h = 0.05;
  std::vector<double> lg;
  for (double u = -30; u <= 30 + 1e-9; u += h) lg.push_back(log_density_log_square_half_cauchy(u));
  std::vector<double> outer;
  std::vector<double> inner(lg.size());
  for (double w = -30; w <= 30 + 1e-9; w += h) {
    const double s = std::exp(w);
    double a = 0, quad = rr;
    for (Eigen::Index k = 0; k < lambda.size(); ++k) {
      a += std::log1p(s * lambda(k));
      quad -= s * lambda(k) / (1 + s * lambda(k)) * proj(k);
    }
    double best = -INFINITY;
    for (std::size_t j = 0; j < lg.size(); ++j) {
      const double u = -30 + h * static_cast<double>(j);
      inner[j] = -0.5 * N * u - 0.5 * quad * std::exp(-u) + lg[j];
      best = std::max(best, inner[j]);
    }
    double sum = 0;
    for (double v : inner) sum += std::exp(v - best);
    outer.push_back(log_density_log_scale_product(w) - 0.5 * a + best + std::log(sum * h));
  }
  const double best = *std::max_element(outer.begin(), outer.end());
  double sum = 0;
  for (double v : outer) sum += std::exp(v - best);
  return best + std::log(sum * h);
}

struct DlmStructure {
  std::string key;
  std::vector<std::pair<int, int>> segments;
  double prior;
};

// Every DLM structure over three lags with alpha = 0.95, beta = 2.
std::vector<DlmStructure> three_lag_structures() {
  const double root = 0.95, child = 0.95 / 4;
  return {{"0", {{1, 3}}, 1 - root},
          {"200", {{1, 1}, {2, 3}}, root * 0.5 * (1 - child)},
          {"20300", {{1, 1}, {2, 2}, {3, 3}}, root * 0.5 * child},
          {"300", {{1, 2}, {3, 3}}, root * 0.5 * (1 - child)},
          {"32000", {{1, 1}, {2, 2}, {3, 3}}, root * 0.5 * child}};
}

// Explicit design: one column per (row group, segment).
Eigen::MatrixXd segment_columns(const RowMatrix& x, const std::vector<std::vector<int>>& groups,
                                const std::vector<std::vector<std::pair<int, int>>>& segments) {
  int C = 0;
  for (const auto& s : segments) C += static_cast<int>(s.size());
  Eigen::MatrixXd u = Eigen::MatrixXd::Zero(x.rows(), C);
  int col = 0;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (const auto& [b, e] : segments[g]) {
      for (int i : groups[g])
        for (int t = b; t <= e; ++t) u(i, col) += x(i, t - 1);
      ++col;
    }
  }
  return u;
}

std::map<std::string, double> normalise(const std::map<std::string, double>& log_post) {
  double best = -INFINITY;
  for (const auto& [k, v] : log_post) best = std::max(best, v);
  double sum = 0;
  for (const auto& [k, v] : log_post) sum += std::exp(v - best);
  std::map<std::string, double> out;
  for (const auto& [k, v] : log_post) out[k] = std::exp(v - best) / sum;
  return out;
}

// Oracle posterior over (modifier split, DLM structures) for one tree on
// binary_dataset rows. `shared` ties the DLM structure across subgroups.
std::map<std::string, double> structure_posterior(const Dataset& d, bool modifiers, bool shared) {
  const Eigen::MatrixXd B = test::complement_basis(d.z);
  const Eigen::VectorXd rb = B.transpose() * d.y;
  std::vector<int> all, left, right;
  for (int i = 0; i < d.n(); ++i) {
    all.push_back(i);
    (d.m(i, 0) == 0 ? left : right).push_back(i);
  }
  const double split = modifiers ? 0.95 : 0.0;
  const auto dlm = three_lag_structures();
  std::map<std::string, double> log_post;
  for (const auto& s : dlm) {
    const Eigen::MatrixXd u = segment_columns(d.x, {all}, {s.segments});
    log_post["R:" + s.key] = std::log(1 - split) + std::log(s.prior) + half_cauchy_log_evidence(B.transpose() * u, rb);
  }
  if (!modifiers) return normalise(log_post);
  for (const auto& a : dlm) {
    for (const auto& b : dlm) {
      if (shared && a.key != b.key) continue;
      const Eigen::MatrixXd u = segment_columns(d.x, {left, right}, {a.segments, b.segments});
      const double prior = shared ? std::log(a.prior) : std::log(a.prior) + std::log(b.prior);
      log_post["S:" + a.key + ":" + b.key] =
          std::log(split) + prior + half_cauchy_log_evidence(B.transpose() * u, rb);
    }
  }
  return normalise(log_post);
}

// GP leaves: P(split) with phi integrated against its truncated prior.
double gp_split_posterior(const Dataset& d) {
  const Eigen::MatrixXd B = test::complement_basis(d.z);
  const Eigen::VectorXd rb = B.transpose() * d.y;
  const int T = static_cast<int>(d.lags());
  std::vector<int> all, left, right;
  for (int i = 0; i < d.n(); ++i) {
    all.push_back(i);
    (d.m(i, 0) == 0 ? left : right).push_back(i);
  }
  std::vector<std::pair<int, int>> lags;
  for (int t = 1; t <= T; ++t) lags.push_back({t, t});
  const Eigen::MatrixXd u_root = segment_columns(d.x, {all}, {lags});
  const Eigen::MatrixXd u_split = segment_columns(d.x, {left, right}, {lags, lags});
  auto evidence = [&](double phi, bool split) {
    const Eigen::MatrixXd l = gp_covariance(T, phi).llt().matrixL();
    Eigen::MatrixXd root_l = l;
    if (!split) return half_cauchy_log_evidence(B.transpose() * u_root * root_l, rb);
    Eigen::MatrixXd two = Eigen::MatrixXd::Zero(2 * T, 2 * T);
    two.topLeftCorner(T, T) = l;
    two.bottomRightCorner(T, T) = l;
    return half_cauchy_log_evidence(B.transpose() * u_split * two, rb);
  };
  auto log_prior = [](double phi) { return -0.5 * std::log(phi) - 0.5 * phi; };
  const double shift = evidence(1.0, false);
  using Gauss = boost::math::quadrature::gauss<double, 30>;
  const double root =
      Gauss::integrate([&](double p) { return std::exp(log_prior(p) + evidence(p, false) - shift); }, kPhiMin, kPhiMax);
  const double split =
      Gauss::integrate([&](double p) { return std::exp(log_prior(p) + evidence(p, true) - shift); }, kPhiMin, kPhiMax);
  return 0.95 * split / (0.95 * split + 0.05 * root);
}

// Frequencies of state keys with batch-means standard errors.
struct Frequencies {
  std::map<std::string, std::vector<double>> indicator;
  std::size_t total = 0;

  void add(const std::string& key) {
    if (!indicator.count(key)) indicator[key] = std::vector<double>(total, 0.0);
    for (auto& [k, v] : indicator) v.push_back(k == key ? 1.0 : 0.0);
    ++total;
  }
  double freq(const std::string& key) const {
    auto it = indicator.find(key);
    return it == indicator.end() ? 0.0 : test::mean(it->second);
  }
  double se(const std::string& key) const {
    auto it = indicator.find(key);
    return it == indicator.end() ? 0.0 : test::batch_means_se(it->second);
  }
};

void check_against(const Frequencies& f, const std::map<std::string, double>& oracle) {
  for (const auto& [k, p] : oracle) {
    const double got = f.freq(k), se = f.se(k);
    INFO("state " << k << " oracle " << p << " sampler " << got << " se " << se);
    if (p >= 0.02)
      CHECK(std::abs(got - p) <= 4 * se + 1e-3);
    else
      CHECK(std::abs(got - p) <= 0.01);
  }
  for (const auto& [k, v] : f.indicator) {
    INFO("sampler visited unknown state " << k);
    CHECK(oracle.count(k) == 1);
  }
}

// Univariate slice sampler with stepping out and shrinkage.
template <class F>
std::vector<double> slice_sample(F log_f, double x0, int draws, Rng& rng, double width = 2.0) {
  std::vector<double> out;
  double x = x0, fx = log_f(x);
  for (int k = 0; k < draws; ++k) {
    const double level = fx + std::log(rng.uniform());
    double lo = x - width * rng.uniform(), hi = lo + width;
    while (log_f(lo) > level) lo -= width;
    while (log_f(hi) > level) hi += width;
    for (;;) {
      const double y = lo + (hi - lo) * rng.uniform();
      const double fy = log_f(y);
      if (fy > level) {
        x = y;
        fx = fy;
        break;
      }
      (y < x ? lo : hi) = y;
    }
    out.push_back(x);
  }
  return out;
}

double mann_whitney_z(const std::vector<double>& larger, const std::vector<double>& smaller) {
  std::vector<std::pair<double, int>> all;
  for (double v : larger) all.push_back({v, 0});
  for (double v : smaller) all.push_back({v, 1});
  std::sort(all.begin(), all.end());
  double rank_sum = 0;
  for (std::size_t i = 0; i < all.size(); ++i)
    if (all[i].second == 0) rank_sum += static_cast<double>(i + 1);
  const double n1 = static_cast<double>(larger.size()), n2 = static_cast<double>(smaller.size());
  const double u = rank_sum - n1 * (n1 + 1) / 2;
  return (u - n1 * n2 / 2) / std::sqrt(n1 * n2 * (n1 + n2 + 1) / 12);
}

ModifierTree two_leaf_tree(int lags, const DlmTree& left, const DlmTree& right) {
  ModifierTree root(LeafLag{DlmTree(lags), {}});
  SplitRule rule;
  rule.modifier = 0;
  rule.kind = RuleKind::binary;
  return root.grown(0, rule, LeafLag{left, {}}, LeafLag{right, {}});
}

}  // namespace

// ---------------------------------------------------------------------------

TEST_CASE("fit configuration is validated") {
  FitConfig c;
  c.iterations = 10;
  c.burn_in = 10;
  CHECK_THROWS_AS(c.check(), UsageError);
  c.burn_in = -1;
  CHECK_THROWS_AS(c.check(), UsageError);
  c = FitConfig{};
  c.thin = 0;
  CHECK_THROWS_AS(c.check(), UsageError);
  c = FitConfig{};
  c.trees = 0;
  CHECK_THROWS_AS(c.check(), UsageError);
  c = FitConfig{};
  c.phi_init = 5.0;
  CHECK_THROWS_AS(c.check(), UsageError);
  c = FitConfig{};
  CHECK_NOTHROW(c.check());
  CHECK(c.draw_count() == 1000);
  c.iterations = 107;
  c.burn_in = 50;
  c.thin = 4;
  CHECK(c.draw_count() == 14);
  CHECK(model_from("hdlm-gp") == ModelKind::hdlm_gp);
  CHECK_THROWS_AS(model_from("bart"), UsageError);
}

TEST_CASE("identical seeds give bit-identical chains for every model") {
  const Dataset d = test::mixed_dataset(150, 8, 3);
  for (auto model : kAllModels) {
    INFO("model " << to_string(model));
    const auto cfg = small_config(model, 4, 11);
    Sampler a(d, cfg, 99), b(d, cfg, 99);
    for (int k = 0; k < 15; ++k) {
      a.step();
      b.step();
    }
    CHECK(a.state() == b.state());
    CHECK((a.residual() - b.residual()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(a.diagnostics().sigma_trace == b.diagnostics().sigma_trace);
  }
}

TEST_CASE("fit is deterministic and keeps (iterations - burn-in) / thin draws per chain") {
  const Dataset d = test::mixed_dataset(120, 6, 5);
  auto cfg = small_config(ModelKind::hdlm_nested, 3, 21);
  cfg.iterations = 47;
  cfg.burn_in = 20;
  cfg.thin = 4;
  cfg.chains = 2;
  const auto a = fit(d, {0, 1, 2, 3}, cfg);
  const auto b = fit(d, {0, 1, 2, 3}, cfg);
  CHECK(a.size() == 2 * 6);
  CHECK(a.states == b.states);
  REQUIRE(a.gamma.size() == b.gamma.size());
  for (std::size_t k = 0; k < a.gamma.size(); ++k) CHECK((a.gamma[k] - b.gamma[k]).norm() == 0.0);
  CHECK(a.chain == std::vector<int>{0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1});
  CHECK(a.diagnostics.sigma_trace.size() == 2 * 47);

  // chain c is the single-chain sampler seeded with derive_seed(seed, c)
  Sampler s(d.with_modifiers({0, 1, 2, 3}), cfg, derive_seed(cfg.seed, 1));
  std::vector<EnsembleState> kept;
  for (int it = 0; it < cfg.iterations; ++it) {
    s.step();
    const int post = it - cfg.burn_in;
    if (post >= 0 && (post + 1) % cfg.thin == 0) kept.push_back(s.state());
  }
  REQUIRE(kept.size() == 6);
  for (std::size_t k = 0; k < 6; ++k) CHECK(kept[k] == a.states[6 + k]);
}

TEST_CASE("draw files round-trip") {
  const Dataset d = test::mixed_dataset(100, 6, 8);
  for (auto model : {ModelKind::hdlm_nested, ModelKind::hdlm_gp}) {
    auto cfg = small_config(model, 3, 4);
    cfg.iterations = 30;
    cfg.burn_in = 10;
    cfg.thin = 2;
    const auto a = fit(d, {0, 2}, cfg);
    std::stringstream ss;
    write_draws(ss, a);
    const auto b = read_draws(ss);
    CHECK(b.model == a.model);
    CHECK(b.lags == a.lags);
    CHECK(b.schema == a.schema);
    CHECK(b.fixed_names == a.fixed_names);
    CHECK(b.chain == a.chain);
    CHECK(b.states == a.states);
    REQUIRE(b.gamma.size() == a.gamma.size());
    for (std::size_t k = 0; k < a.gamma.size(); ++k) CHECK((a.gamma[k] - b.gamma[k]).norm() == 0.0);
    CHECK(b.config.iterations == 30);
    CHECK(b.config.seed == 4);
    std::stringstream again;
    write_draws(again, b);
    CHECK(again.str() == ss.str());
  }
}

TEST_CASE("residual identity holds after every sweep for every model") {
  const Dataset d = test::mixed_dataset(300, 8, 9, 1.5);
  for (auto model : kAllModels) {
    INFO("model " << to_string(model));
    Sampler s(d, small_config(model, 5, 3), 17);
    double worst = 0;
    for (int k = 0; k < 40; ++k) {
      s.step();
      worst = std::max(worst, s.residual_error());
    }
    CHECK(worst < 1e-8);

    // With gamma at its conditional mean, the full residual is orthogonal to Z.
    FixedEffectsProjection proj(d.z);
    const Eigen::VectorXd f = ensemble_fit(s.state(), d.x, d.m);
    const Eigen::VectorXd gamma = proj.coefficients(s.residual());
    const Eigen::VectorXd e = d.y - d.z * gamma - f;
    const double scale = std::max(1.0, d.y.cwiseAbs().maxCoeff());
    CHECK((e - (s.residual() - d.z * gamma)).cwiseAbs().maxCoeff() / scale < 1e-8);
    CHECK((d.z.transpose() * e).cwiseAbs().maxCoeff() / (scale * static_cast<double>(d.n())) < 1e-8);
  }
}

TEST_CASE("forced rejection keeps every structure but still redraws effects") {
  const Dataset d = test::mixed_dataset(300, 8, 12, 1.5);
  for (auto model : {ModelKind::hdlm_nested, ModelKind::hdlm_shared, ModelKind::hdlm_gp, ModelKind::tdlm}) {
    INFO("model " << to_string(model));
    Sampler s(d, small_config(model, 4, 1), 5);
    for (int k = 0; k < 25; ++k) s.step();
    const EnsembleState before = s.state();
    const Diagnostics diag = s.diagnostics();
    s.set_force_reject(true);
    s.step();
    const EnsembleState& after = s.state();
    bool effects_changed = false;
    for (std::size_t a = 0; a < before.trees.size(); ++a) {
      CHECK(after.trees[a].same_structure(before.trees[a]));
      for (int leaf : before.trees[a].leaves()) {
        const auto& l0 = before.trees[a].node(leaf).lag;
        const auto& l1 = after.trees[a].node(leaf).lag;
        if (!l0.is_curve()) CHECK(l1.dlm.same_structure(l0.dlm));
        if (l0.theta() != l1.theta()) effects_changed = true;
      }
    }
    CHECK(effects_changed);
    for (int k = 0; k < 4; ++k) {
      CHECK(s.diagnostics().modifier.accepted[k] == diag.modifier.accepted[k]);
      CHECK(s.diagnostics().dlm.accepted[k] == diag.dlm.accepted[k]);
    }
    CHECK(s.residual_error() < 1e-8);
  }
}

TEST_CASE("variances stay positive, phi stays in range, acceptance is strictly between 0 and 1") {
  const Dataset d = test::mixed_dataset(400, 12, 14, 1.0);
  for (auto model : {ModelKind::hdlm_nested, ModelKind::hdlm_shared, ModelKind::hdlm_gp}) {
    INFO("model " << to_string(model));
    Sampler s(d, small_config(model, 5, 2), 23);
    bool positive = true, in_range = true;
    for (int k = 0; k < 150; ++k) {
      s.step();
      const auto& st = s.state();
      positive = positive && st.sigma2 > 0 && st.nu2 > 0 && std::isfinite(st.sigma2);
      for (double t : st.tau2) positive = positive && t > 0 && std::isfinite(t);
      in_range = in_range && st.phi >= kPhiMin && st.phi <= kPhiMax;
    }
    CHECK(positive);
    CHECK(in_range);
    const double acc = s.diagnostics().modifier.acceptance();
    CHECK(acc > 0.0);
    CHECK(acc < 1.0);
    if (model != ModelKind::hdlm_gp) {
      CHECK(s.diagnostics().dlm.acceptance() > 0.0);
      CHECK(s.diagnostics().dlm.acceptance() < 1.0);
    } else {
      CHECK(s.diagnostics().phi_accepted > 0);
      CHECK(s.diagnostics().phi_accepted < s.diagnostics().phi_proposed);
    }
  }
}

TEST_CASE("MH decision on a frozen two-leaf state matches the quadrature acceptance probability") {
  const int T = 3;
  const Dataset d = binary_dataset(40, T, 31, 0.8);
  auto cfg = small_config(ModelKind::hdlm_nested, 2, 7);
  Sampler s(d, cfg, 41);
  for (int k = 0; k < 5; ++k) s.step();

  const DlmTree split2 = DlmTree::from_preorder(T, std::vector<int>{2, 0, 0}, std::vector<double>{0.1, -0.2});
  const DlmTree root(T, 0.05);
  s.set_tree(0, two_leaf_tree(T, split2, root));
  CHECK(s.residual_error() < 1e-10);
  const ModifierTree candidate = two_leaf_tree(T, root, DlmTree::from_preorder(T, std::vector<int>{3, 0, 0},
                                                                              std::vector<double>{0.0, 0.0}));

  // Variance inputs from the frozen state: tree 1 enters through its cells
  // and effect quadratic form, sigma^2 through its expansion auxiliary.
  const auto& st = s.state();
  const auto& other = st.trees[1];
  double cells = 0, quad = 0;
  for (int leaf : other.leaves())
    for (const auto& nd : other.node(leaf).lag.dlm.nodes())
      if (nd.leaf()) {
        cells += 1;
        quad += nd.effect * nd.effect;
      }
  const double shape = 0.5 + 0.5 * cells;
  const double rate = 1.0 / st.xi_sigma + 0.5 * quad / (st.tau2[1] * st.nu2);
  const double scale = st.tau2[0] * st.nu2;
  const Eigen::VectorXd partial = s.residual() + s.tree_fit(0);

  std::vector<int> left, right;
  for (int i = 0; i < d.n(); ++i) (d.m(i, 0) == 0 ? left : right).push_back(i);
  test::ExplicitDesign cur, cand;
  cur.u = segment_columns(d.x, {left, right}, {{{1, 1}, {2, 3}}, {{1, 3}}});
  cur.leaf_cells = {2, 1};
  cand.u = segment_columns(d.x, {left, right}, {{{1, 3}}, {{1, 2}, {3, 3}}});
  cand.leaf_cells = {1, 2};
  const double delta = test::dense_log_marginal(cand, partial, d.z, scale, shape, rate) -
                       test::dense_log_marginal(cur, partial, d.z, scale, shape, rate);

  bool accepted = false;
  const double offset = 0.37;
  const double got = s.mh_trial(0, candidate, offset, accepted);
  CHECK(std::abs(got - (delta + offset)) < 1e-6 * std::max(1.0, std::abs(delta)));

  // A fixed proposal with a log ratio chosen so the acceptance probability is 0.4.
  const double log_ratio = std::log(0.4) - delta;
  const int trials = 10000;
  int hits = 0;
  for (int k = 0; k < trials; ++k) {
    s.mh_trial(0, candidate, log_ratio, accepted);
    hits += accepted ? 1 : 0;
  }
  const double rate_hat = static_cast<double>(hits) / trials;
  const double target = std::min(1.0, std::exp(delta + log_ratio));
  CHECK(target == doctest::Approx(0.4).epsilon(1e-6));
  CHECK(std::abs(rate_hat - target) <= 3 * std::sqrt(target * (1 - target) / trials));

  // The trials leave the state alone.
  CHECK(s.state().trees[0] == two_leaf_tree(T, split2, root));
  CHECK(s.residual_error() < 1e-10);
}

TEST_CASE("tdlm structure posterior matches direct quadrature over the half-Cauchy scales") {
  const Dataset d = binary_dataset(40, 3, 101, 0.6);
  const auto oracle = structure_posterior(d, false, false);
  Sampler s(d, small_config(ModelKind::tdlm, 1, 1), 202);
  for (int k = 0; k < 2000; ++k) s.step();
  Frequencies f;
  for (int k = 0; k < 100000; ++k) {
    s.step();
    f.add(state_key(s.state().trees[0]));
  }
  check_against(f, oracle);
}

TEST_CASE("nested structure posterior matches direct quadrature over the half-Cauchy scales") {
  const Dataset d = binary_dataset(40, 3, 103, 0.9);
  const auto oracle = structure_posterior(d, true, false);
  Sampler s(d, small_config(ModelKind::hdlm_nested, 1, 1), 204);
  for (int k = 0; k < 2000; ++k) s.step();
  Frequencies f;
  for (int k = 0; k < 150000; ++k) {
    s.step();
    f.add(state_key(s.state().trees[0]));
  }
  check_against(f, oracle);
  double split = 0, split_hat = 0;
  for (const auto& [k, p] : oracle)
    if (k[0] == 'S') {
      split += p;
      split_hat += f.freq(k);
    }
  MESSAGE("nested P(split): oracle " << split << " sampler " << split_hat);
}

TEST_CASE("shared structure posterior matches direct quadrature over the half-Cauchy scales") {
  const Dataset d = binary_dataset(40, 3, 103, 0.9);
  const auto oracle = structure_posterior(d, true, true);
  Sampler s(d, small_config(ModelKind::hdlm_shared, 1, 1), 206);
  for (int k = 0; k < 2000; ++k) s.step();
  Frequencies f;
  for (int k = 0; k < 150000; ++k) {
    s.step();
    f.add(state_key(s.state().trees[0]));
  }
  check_against(f, oracle);
}

TEST_CASE("GP split posterior matches quadrature over phi and the half-Cauchy scales") {
  const Dataset d = binary_dataset(40, 3, 105, 0.9);
  const double oracle = gp_split_posterior(d);
  auto cfg = small_config(ModelKind::hdlm_gp, 1, 1);
  cfg.burn_in = 2000;
  Sampler s(d, cfg, 208);
  for (int k = 0; k < 3000; ++k) s.step();
  std::vector<double> split;
  for (int k = 0; k < 100000; ++k) {
    s.step();
    split.push_back(s.state().trees[0].leaf_count() == 2 ? 1.0 : 0.0);
  }
  const double got = test::mean(split), se = test::batch_means_se(split);
  INFO("oracle " << oracle << " sampler " << got << " se " << se);
  CHECK(std::abs(got - oracle) <= 4 * se + 1e-3);
}

TEST_CASE("half-Cauchy conditional matches a slice sampler on the scale itself") {
  // (count, quad): no effects at all (the prior), and a proper posterior.
  for (auto [count, quad] : {std::pair{0.0, 0.0}, std::pair{3.0, 0.5}, std::pair{10.0, 40.0}}) {
    INFO("count " << count << " quad " << quad);
    Rng rng(static_cast<std::uint64_t>(count * 100 + quad));
    const int n = 40000;
    std::vector<double> gibbs;
    double v2 = 1.0, aux = 1.0;
    for (int k = 0; k < n; ++k) {
      update_half_cauchy(v2, aux, count, quad, rng);
      gibbs.push_back(std::log(v2));
    }
    auto log_f = [&](double u) {
      const double soft = u > 0 ? u + std::log1p(std::exp(-u)) : std::log1p(std::exp(u));
      return 0.5 * u - soft - 0.5 * count * u - 0.5 * quad * std::exp(-u);
    };
    const auto slice = slice_sample(log_f, 0.0, n, rng);
    const double m1 = test::mean(gibbs), m2 = test::mean(slice);
    const double se = std::hypot(test::batch_means_se(gibbs), test::batch_means_se(slice));
    CHECK(std::abs(m1 - m2) <= 4 * se);
    std::vector<double> g2, s2;
    for (double v : gibbs) g2.push_back((v - m1) * (v - m1));
    for (double v : slice) s2.push_back((v - m2) * (v - m2));
    const double se2 = std::hypot(test::batch_means_se(g2), test::batch_means_se(s2));
    CHECK(std::abs(test::mean(g2) - test::mean(s2)) <= 4 * se2);
  }
}

TEST_CASE("with no effects the expanded sampler draws the half-Cauchy prior") {
  Rng rng(77);
  double v2 = 1.0, aux = 1.0;
  std::vector<double> draws;
  for (int k = 0; k < 100000; ++k) {
    update_half_cauchy(v2, aux, 0.0, 0.0, rng);
    if (k % 20 == 0) draws.push_back(std::sqrt(v2));
  }
  const double p = test::ks_pvalue(draws, [](double s) { return 2.0 / std::numbers::pi * std::atan(s); });
  CHECK(p > 1e-3);
}

TEST_CASE("larger effects give stochastically larger tau") {
  const int T = 3;
  const Dataset d = binary_dataset(60, T, 55, 0.5);
  auto cfg = small_config(ModelKind::tdlm, 1, 1);
  auto tau_draws = [&](double mult) {
    Sampler s(d, cfg, 9);
    const DlmTree t = DlmTree::from_preorder(T, std::vector<int>{2, 0, 3, 0, 0},
                                             std::vector<double>{0.3 * mult, -0.2 * mult, 0.25 * mult});
    s.set_tree(0, ModifierTree(LeafLag{t, {}}));
    std::vector<double> out;
    for (int k = 0; k < 6000; ++k) {
      s.update_variances();
      if (k % 5 == 0) out.push_back(s.state().tau2[0]);
    }
    return out;
  };
  const auto small = tau_draws(1.0), big = tau_draws(10.0);
  CHECK(mann_whitney_z(big, small) > 3.0);
}

TEST_CASE("sigma^2 draws follow the expanded inverse-gamma conditional") {
  const int T = 4;
  const Dataset d = binary_dataset(80, T, 57, 0.0);
  auto cfg = small_config(ModelKind::tdlm, 3, 1);
  Sampler s(d, cfg, 19);
  s.set_tree(1, ModifierTree(LeafLag{DlmTree::from_preorder(T, std::vector<int>{3, 0, 0},
                                                            std::vector<double>{0.4, -0.3}),
                                     {}}));
  FixedEffectsProjection proj(d.z);
  std::vector<double> pit;
  for (int k = 0; k < 3000; ++k) {
    s.update_variances();
    const auto& st = s.state();
    double cells = 0, quad = 0;
    for (std::size_t a = 0; a < st.trees.size(); ++a) {
      for (int leaf : st.trees[a].leaves())
        for (const auto& nd : st.trees[a].node(leaf).lag.dlm.nodes())
          if (nd.leaf()) {
            cells += 1;
            quad += nd.effect * nd.effect / (st.tau2[a] * st.nu2);
          }
    }
    const Eigen::VectorXd e = proj.residualize(s.residual());
    const double shape = 0.5 * (static_cast<double>(proj.dof()) + cells + 1);
    const double rate = 1.0 / st.xi_sigma + 0.5 * (e.squaredNorm() + quad);
    // P(sigma^2 <= x) for InvGamma(shape, rate) is Q(shape, rate / x).
    pit.push_back(boost::math::gamma_q(shape, rate / st.sigma2));
  }
  CHECK(test::ks_pvalue(pit, [](double u) { return u; }) > 1e-3);
}

TEST_CASE("phi steps with a flat likelihood sample the truncated Gamma(1/2, 1/2) prior") {
  Rng rng(3);
  double phi = 1.0;
  bool accepted = false;
  std::vector<double> draws;
  auto flat = [](double) { return 0.0; };
  for (int k = 0; k < 200000; ++k) {
    phi = phi_step(phi, 0.8, flat, rng, accepted);
    if (k % 40 == 0) draws.push_back(phi);
  }
  const double lo = boost::math::gamma_p(0.5, kPhiMin / 2), hi = boost::math::gamma_p(0.5, kPhiMax / 2);
  auto cdf = [&](double x) { return (boost::math::gamma_p(0.5, x / 2) - lo) / (hi - lo); };
  CHECK(test::ks_pvalue(draws, cdf) > 1e-3);
  const boost::math::gamma_distribution<> prior(0.5, 2.0);
  CHECK(phi_log_prior(1.3) == doctest::Approx(std::log(boost::math::pdf(prior, 1.3))).epsilon(1e-12));
}

TEST_CASE("phi proposals are reflected and never leave the admissible range") {
  Rng rng(4);
  double phi = kPhiMax * 0.99;
  bool accepted = false;
  auto flat = [](double) { return 0.0; };
  bool inside = true;
  for (int k = 0; k < 20000; ++k) {
    phi = phi_step(phi, 10.0, flat, rng, accepted);
    inside = inside && phi >= kPhiMin && phi <= kPhiMax;
  }
  CHECK(inside);
  auto peaked_outside = [](double p) { return -100.0 * p; };  // pushes below the lower bound
  phi = kPhiMin * 1.01;
  for (int k = 0; k < 2000; ++k) {
    phi = phi_step(phi, 2.0, peaked_outside, rng, accepted);
    inside = inside && phi >= kPhiMin;
  }
  CHECK(inside);
}

TEST_CASE("phi posterior recovers the generating value on 200 leaves") {
  const int T = 10, leaves = 200;
  const double truth = 0.5;
  const Eigen::MatrixXd l = gp_covariance(T, truth).llt().matrixL();
  int covered = 0;
  for (int rep = 0; rep < 10; ++rep) {
    Rng rng(derive_seed(500, static_cast<std::uint64_t>(rep)));
    std::vector<std::vector<double>> effects;
    for (int b = 0; b < leaves; ++b) {
      Eigen::VectorXd z(T);
      for (int t = 0; t < T; ++t) z(t) = rng.normal();
      const Eigen::VectorXd e = l * z;
      effects.emplace_back(e.data(), e.data() + T);
    }
    auto log_lik = [&](double phi) {
      double out = 0;
      const double ld = gp_log_det(T, phi);
      for (const auto& e : effects) out += -0.5 * ld - 0.5 * gp_quadratic(e, phi);
      return out;
    };
    double phi = 1.0;
    bool accepted = false;
    std::vector<double> draws;
    for (int k = 0; k < 4000; ++k) {
      phi = phi_step(phi, 0.1, log_lik, rng, accepted);
      if (k >= 1000) draws.push_back(phi);
    }
    std::sort(draws.begin(), draws.end());
    const double lo = draws[draws.size() * 5 / 100], hi = draws[draws.size() * 95 / 100];
    if (lo <= truth && truth <= hi) ++covered;
  }
  CHECK(covered >= 8);
}

TEST_CASE("gamma recovery: intercept-only mean, conditional covariance and coverage") {
  const int T = 4;
  Rng rng(8);
  Dataset d = binary_dataset(50, T, 61, 0.0);
  PosteriorDraws draws;
  draws.model = ModelKind::tdlm;
  draws.lags = T;
  EnsembleState zero;
  zero.trees = {ModifierTree(LeafLag{DlmTree(T), {}})};
  zero.sigma2 = 0.7;
  draws.states.assign(20000, zero);
  auto g = recover_gamma(draws, d, 3);
  std::vector<double> g0;
  for (const auto& v : g) g0.push_back(v(0));
  CHECK(std::abs(test::mean(g0) - d.y.mean()) < 4 * std::sqrt(0.7 / 50.0 / 20000.0));

  // Two-column Z: covariance sigma^2 (Z'Z)^{-1}.
  Dataset d2 = d;
  d2.z.resize(d.n(), 2);
  for (Eigen::Index i = 0; i < d.n(); ++i) {
    d2.z(i, 0) = 1.0;
    d2.z(i, 1) = rng.normal() + 0.5;
  }
  auto g2 = recover_gamma(draws, d2, 4);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(g2.size()), 2);
  for (std::size_t k = 0; k < g2.size(); ++k) x.row(static_cast<Eigen::Index>(k)) = g2[k].transpose();
  const Eigen::RowVectorXd m = x.colwise().mean();
  const Eigen::MatrixXd c = (x.rowwise() - m).transpose() * (x.rowwise() - m) / static_cast<double>(x.rows() - 1);
  const Eigen::MatrixXd expect = 0.7 * (d2.z.transpose() * d2.z).inverse();
  const Eigen::VectorXd mean_expect = (d2.z.transpose() * d2.z).ldlt().solve(d2.z.transpose() * d2.y);
  const double D = static_cast<double>(x.rows());
  for (int i = 0; i < 2; ++i) {
    CHECK(std::abs(m(i) - mean_expect(i)) < 4 * std::sqrt(expect(i, i) / D));
    for (int j = 0; j < 2; ++j)
      CHECK(std::abs(c(i, j) - expect(i, j)) <
            4 * std::sqrt((expect(i, i) * expect(j, j) + expect(i, j) * expect(i, j)) / D));
  }

  // Fitted draws: data with known gamma and no lag signal.
  int covered[2] = {0, 0};
  const Eigen::Vector2d truth(1.0, -0.5);
  for (int rep = 0; rep < 100; ++rep) {
    Rng r2(derive_seed(900, static_cast<std::uint64_t>(rep)));
    Dataset dr = d2;
    for (Eigen::Index i = 0; i < dr.n(); ++i) dr.y(i) = dr.z.row(i).dot(truth) + r2.normal();
    auto cfg = small_config(ModelKind::tdlm, 3, derive_seed(901, static_cast<std::uint64_t>(rep)));
    cfg.iterations = 600;
    cfg.burn_in = 200;
    cfg.thin = 2;
    const auto out = fit(dr, {}, cfg);
    for (int k = 0; k < 2; ++k) {
      std::vector<double> v;
      for (const auto& gk : out.gamma) v.push_back(gk(k));
      std::sort(v.begin(), v.end());
      const double lo = kernels::sorted_quantile(v, 0.025), hi = kernels::sorted_quantile(v, 0.975);
      if (lo <= truth(k) && truth(k) <= hi) ++covered[k];
    }
  }
  CHECK(covered[0] >= 90);
  CHECK(covered[1] >= 90);
}

TEST_CASE("without modifiers the shared and GP variants reduce to tdlm and gp-dlm") {
  const Dataset d = test::mixed_dataset(200, 8, 71, 1.0);
  const int T = 8;
  for (auto [variant, base] : {std::pair{ModelKind::hdlm_shared, ModelKind::tdlm},
                               std::pair{ModelKind::hdlm_gp, ModelKind::gp_dlm}}) {
    INFO("variant " << to_string(variant));
    auto cfg = small_config(variant, 5, 13);
    cfg.iterations = 1400;
    cfg.burn_in = 400;
    cfg.thin = 1;
    const auto a = fit(d, {}, cfg);
    cfg.model = base;
    const auto b = fit(d, {}, cfg);
    REQUIRE(a.size() == b.size());
    const std::vector<double> row(0);
    for (int t = 0; t < T; ++t) {
      std::vector<double> va, vb;
      for (std::size_t k = 0; k < a.size(); ++k) {
        va.push_back(ensemble_curve(a.states[k], row, T)(t));
        vb.push_back(ensemble_curve(b.states[k], row, T)(t));
      }
      const double se = std::hypot(test::batch_means_se(va), test::batch_means_se(vb));
      CHECK(std::abs(test::mean(va) - test::mean(vb)) <= 2 * se);
    }
  }
}

TEST_CASE("nested HDLM with modifier growth disabled matches tdlm in distribution") {
  // A single tree mixes slowly between DLM structures, so the Monte Carlo
  // error is taken from the spread of independent chain means.
  const int T = 6, chains = 24;
  const Dataset d = test::mixed_dataset(200, T, 73, 1.0);
  auto cfg = small_config(ModelKind::hdlm_nested, 1, 15);
  cfg.modifier_prior.alpha = 0.0;
  cfg.iterations = 5000;
  cfg.burn_in = 1000;
  cfg.thin = 1;
  cfg.chains = chains;
  const auto a = fit(d, {0, 1, 2, 3}, cfg);
  CHECK(std::all_of(a.states.begin(), a.states.end(),
                    [](const EnsembleState& s) { return s.trees[0].leaf_count() == 1; }));
  cfg.model = ModelKind::tdlm;
  cfg.seed = 16;
  const auto b = fit(d, {}, cfg);
  auto chain_means = [&](const PosteriorDraws& p, int t) {
    std::vector<double> sum(chains, 0.0), count(chains, 0.0);
    const std::vector<double> row(p.schema.size(), 0.0);
    for (std::size_t k = 0; k < p.size(); ++k) {
      sum[static_cast<std::size_t>(p.chain[k])] += ensemble_curve(p.states[k], row, T)(t);
      count[static_cast<std::size_t>(p.chain[k])] += 1;
    }
    for (int c = 0; c < chains; ++c) sum[static_cast<std::size_t>(c)] /= count[static_cast<std::size_t>(c)];
    return sum;
  };
  for (int t = 0; t < T; ++t) {
    const auto ma = chain_means(a, t), mb = chain_means(b, t);
    const double se = std::sqrt(test::variance(ma) / chains + test::variance(mb) / chains);
    INFO("lag " << t + 1 << " nested " << test::mean(ma) << " tdlm " << test::mean(mb) << " se " << se);
    CHECK(std::abs(test::mean(ma) - test::mean(mb)) <= 4 * se);
  }
}
