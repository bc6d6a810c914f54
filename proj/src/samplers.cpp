#include "hdlm/samplers.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <iostream>
#include <limits>
#include <optional>

#include <omp.h>

#include "hdlm/error.hpp"
#include "hdlm/kernels.hpp"

namespace hdlm {

namespace {
constexpr double kNegInf = -std::numeric_limits<double>::infinity();
}

const char* to_string(ModelKind m) {
  switch (m) {
    case ModelKind::tdlm: return "tdlm";
    case ModelKind::gp_dlm: return "gp-dlm";
    case ModelKind::hdlm_nested: return "hdlm-nested";
    case ModelKind::hdlm_shared: return "hdlm-shared";
    case ModelKind::hdlm_gp: return "hdlm-gp";
  }
  return "?";
}

ModelKind model_from(const std::string& text) {
  for (auto m : {ModelKind::tdlm, ModelKind::gp_dlm, ModelKind::hdlm_nested, ModelKind::hdlm_shared, ModelKind::hdlm_gp})
    if (text == to_string(m)) return m;
  throw UsageError("unknown model '" + text + "' (expected tdlm, gp-dlm, hdlm-nested, hdlm-shared or hdlm-gp)");
}

bool uses_modifiers(ModelKind m) {
  return m == ModelKind::hdlm_nested || m == ModelKind::hdlm_shared || m == ModelKind::hdlm_gp;
}

bool uses_gp(ModelKind m) { return m == ModelKind::gp_dlm || m == ModelKind::hdlm_gp; }

void FitConfig::check() const {
  if (trees < 1) throw UsageError("trees must be at least 1");
  if (burn_in < 0) throw UsageError("burn-in must be non-negative");
  if (iterations <= burn_in) throw UsageError("iterations must exceed burn-in");
  if (thin < 1) throw UsageError("thin must be at least 1");
  if (chains < 1) throw UsageError("chains must be at least 1");
  if (!(phi_step > 0)) throw UsageError("phi step must be positive");
  if (!(phi_init >= kPhiMin && phi_init <= kPhiMax))
    throw UsageError("phi init must satisfy exp(-phi) in (0.05, 0.95)");
  dlm_prior.check(0);
  if (draw_count() < 1) throw UsageError("configuration keeps no draws");
}

double MoveCounts::acceptance() const {
  std::int64_t p = 0, a = 0;
  for (int k = 0; k < 4; ++k) {
    p += proposed[k];
    a += accepted[k];
  }
  return p > 0 ? static_cast<double>(a) / static_cast<double>(p) : 0.0;
}

MoveCounts& MoveCounts::operator+=(const MoveCounts& o) {
  for (int k = 0; k < 4; ++k) {
    proposed[k] += o.proposed[k];
    accepted[k] += o.accepted[k];
    invalid[k] += o.invalid[k];
  }
  return *this;
}

Eigen::VectorXd ensemble_curve(const EnsembleState& s, std::span<const double> modifiers, int lags) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(lags);
  for (const auto& tree : s.trees) {
    const auto& lag = tree.node(tree.route(modifiers)).lag;
    if (lag.is_curve()) {
      for (int t = 0; t < lags; ++t) out(t) += lag.curve[static_cast<std::size_t>(t)];
    } else {
      for (const auto& n : lag.dlm.nodes())
        if (n.leaf())
          for (int t = n.begin; t <= n.end; ++t) out(t - 1) += n.effect;
    }
  }
  return out;
}

Eigen::VectorXd ensemble_fit(const EnsembleState& s, const RowMatrix& x, const Eigen::MatrixXd& m) {
  const Eigen::Index n = x.rows(), T = x.cols();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(n);
  for (const auto& tree : s.trees) {
    std::vector<Eigen::VectorXd> theta(tree.nodes().size());
    for (int leaf : tree.leaves()) {
      auto th = tree.node(leaf).lag.theta();
      theta[static_cast<std::size_t>(leaf)] = Eigen::Map<const Eigen::VectorXd>(th.data(), T);
    }
    if (tree.leaf_count() == 1) {
      out.noalias() += x * theta[0];
      continue;
    }
    auto route = tree.route_all(m);
    for (Eigen::Index i = 0; i < n; ++i)
      out(i) += x.row(i).dot(theta[static_cast<std::size_t>(route[static_cast<std::size_t>(i)])]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Conditional updates

double draw_scale_given_aux(double count, double quad, double aux, Rng& rng) {
  return rng.inv_gamma(0.5 * (count + 1.0), 1.0 / aux + 0.5 * quad);
}

void update_half_cauchy(double& value2, double& aux, double count, double quad, Rng& rng) {
  aux = rng.inv_gamma(1.0, 1.0 + 1.0 / value2);
  value2 = draw_scale_given_aux(count, quad, aux, rng);
}

double phi_log_prior(double phi) {
  // Gamma(shape 1/2, rate 1/2)
  return 0.5 * std::log(0.5) - std::lgamma(0.5) - 0.5 * std::log(phi) - 0.5 * phi;
}

double phi_step(double phi, double step, const std::function<double(double)>& log_lik, Rng& rng, bool& accepted) {
  const double lo = std::log(kPhiMin), hi = std::log(kPhiMax);
  const double u = std::log(phi);
  double v = u + step * rng.normal();
  while (v < lo || v > hi) v = v < lo ? 2 * lo - v : 2 * hi - v;
  const double phi_new = std::exp(v);
  // Target on the log scale carries the Jacobian phi.
  const double log_ratio = (phi_log_prior(phi_new) + v + log_lik(phi_new)) - (phi_log_prior(phi) + u + log_lik(phi));
  accepted = std::log(rng.uniform()) < log_ratio;
  return accepted ? phi_new : phi;
}

// ---------------------------------------------------------------------------
// Sampler

struct Sampler::Impl {
  struct TreeCache {
    std::vector<std::vector<int>> members;  // per node
    std::vector<int> leaf_nodes;
    std::vector<LeafStats> stats;  // per leaf position
    Eigen::VectorXd fit;
    double quad = 0;  // sum over leaves of delta' K^{-1} delta
    int cells = 0;
  };

  Dataset data;
  FitConfig cfg;
  int T;
  Eigen::Index n;
  FixedEffectsProjection proj;
  std::optional<RuleSpace> space;
  TreePriorParams modifier_prior;
  EnsembleState st;
  std::vector<TreeCache> cache;
  Eigen::VectorXd r;
  Rng rng;
  Diagnostics diag;
  Eigen::MatrixXd k_inv;
  double log_det_k = 0;
  int iter = 0;
  bool force_reject = false;
  double phi_step_size;
  std::int64_t phi_window_prop = 0, phi_window_acc = 0;

  Impl(const Dataset& d, const FitConfig& c, std::uint64_t seed)
      : data(d), cfg(c), T(static_cast<int>(d.lags())), n(d.n()), proj(d.z), rng(seed), phi_step_size(c.phi_step) {
    const std::size_t q = data.schema.size();
    modifier_prior = cfg.modifier_prior;
    modifier_prior.check(q);
    if (uses_modifiers(cfg.model) && q > 0) space.emplace(data.m, data.schema);
    if (proj.dof() < 1) throw DataError("need more rows than fixed-effect columns");

    st.phi = cfg.phi_init;
    refresh_gp();
    st.weights.assign(q, q > 0 ? 1.0 / static_cast<double>(q) : 0.0);
    if (!modifier_prior.weights.empty()) st.weights = modifier_prior.weights;
    modifier_prior.weights = st.weights;
    st.tau2.assign(static_cast<std::size_t>(cfg.trees), 1.0);
    st.xi_tau.assign(static_cast<std::size_t>(cfg.trees), 1.0);
    st.nu2 = 1.0;
    Eigen::VectorXd ry = proj.residualize(data.y);
    st.sigma2 = std::max(ry.squaredNorm() / static_cast<double>(proj.dof()), 1e-8);

    std::vector<int> all(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = static_cast<int>(i);
    LeafStats root;
    kernels::leaf_gram(data.x, proj.basis(), all, root);
    root.xr = Eigen::VectorXd::Zero(T);

    r = data.y;
    for (int a = 0; a < cfg.trees; ++a) {
      st.trees.emplace_back(initial_lag());
      TreeCache tc;
      tc.members = {all};
      tc.leaf_nodes = {0};
      tc.stats = {root};
      tc.fit = Eigen::VectorXd::Zero(n);
      tc.cells = st.trees.back().node(0).lag.cells();
      cache.push_back(std::move(tc));
    }
    diag.phi_step = phi_step_size;
  }

  LeafLag initial_lag() const {
    if (uses_gp(cfg.model)) return LeafLag{{}, std::vector<double>(static_cast<std::size_t>(T), 0.0)};
    return LeafLag{DlmTree(T), {}};
  }

  LeafInit leaf_init() const {
    switch (cfg.model) {
      case ModelKind::hdlm_shared: return LeafInit::copy_dlm;
      case ModelKind::hdlm_gp:
      case ModelKind::gp_dlm: return LeafInit::curve;
      default: return LeafInit::fresh_dlm;
    }
  }

  void refresh_gp() {
    if (!uses_gp(cfg.model)) return;
    k_inv = gp_precision(T, st.phi);
    log_det_k = gp_log_det(T, st.phi);
  }

  CellBlock make_block(const LeafStats& s, const LeafLag& lag) const {
    if (lag.is_curve()) return lag_block(s, k_inv, log_det_k);
    auto seg = lag.dlm.segments();
    return aggregate(s, seg);
  }

  double leaf_quad(const LeafLag& lag) const {
    if (lag.is_curve()) return gp_quadratic(lag.curve, st.phi);
    double q = 0;
    for (const auto& nd : lag.dlm.nodes())
      if (nd.leaf()) q += nd.effect * nd.effect;
    return q;
  }

  void refresh_quad(int a) {
    auto& c = cache[static_cast<std::size_t>(a)];
    const auto& tree = st.trees[static_cast<std::size_t>(a)];
    c.quad = 0;
    c.cells = 0;
    for (int leaf : c.leaf_nodes) {
      c.quad += leaf_quad(tree.node(leaf).lag);
      c.cells += tree.node(leaf).lag.cells();
    }
  }

  VarianceTerms variance_terms(int a) const {
    VarianceTerms v;
    v.scale = st.tau2[static_cast<std::size_t>(a)] * st.nu2;
    v.integrate_sigma = true;
    v.shape = 0.5;
    v.rate = 1.0 / st.xi_sigma;
    for (int b = 0; b < cfg.trees; ++b) {
      if (b == a) continue;
      const auto& c = cache[static_cast<std::size_t>(b)];
      v.shape += 0.5 * c.cells;
      v.rate += 0.5 * c.quad / (st.tau2[static_cast<std::size_t>(b)] * st.nu2);
    }
    return v;
  }

  std::optional<EffectPosterior> evaluate(const std::vector<CellBlock>& blocks, const Eigen::VectorXd& qr, double rr,
                                          const VarianceTerms& v) {
    DesignBlock d;
    d.leaves = blocks;
    d.qr = qr;
    d.rr = rr;
    d.dof = proj.dof();
    try {
      return EffectPosterior(d, v, cfg.route);
    } catch (const NumericalError&) {
      ++diag.singular;
      return std::nullopt;
    }
  }

  bool accept(double log_alpha) {
    if (force_reject) return false;
    return std::log(rng.uniform()) < log_alpha;
  }

  static int subtree_leaves(const ModifierTree& t, int node) {
    const auto& nd = t.node(node);
    return nd.leaf() ? 1 : subtree_leaves(t, nd.left) + subtree_leaves(t, nd.right);
  }

  void leaf_stats_direct(const std::vector<int>& rows, LeafStats& out) const {
    kernels::leaf_gram(data.x, proj.basis(), rows, out);
    kernels::leaf_xr(data.x, r, rows, out.xr);
  }

  void modifier_move(int a, std::vector<CellBlock>& blocks, double& cur_lm, const Eigen::VectorXd& qr, double rr,
                     const VarianceTerms& v) {
    auto& tree = st.trees[static_cast<std::size_t>(a)];
    auto& c = cache[static_cast<std::size_t>(a)];
    auto kind = choose_move(tree, cfg.modifier_moves, rng);
    if (!kind) return;
    const int k = static_cast<int>(*kind);
    ++diag.modifier.proposed[k];
    ModifierMoveContext ctx{&*space, &modifier_prior, cfg.modifier_moves, leaf_init(), &cfg.dlm_prior};
    auto prop = propose_move(tree, *kind, ctx, c.members, rng);
    if (!prop) {
      ++diag.modifier.invalid[k];
      return;
    }
    const int touched = prop->touched;
    int j0 = 0;
    for (int i = 0; i < touched; ++i) j0 += tree.node(i).leaf() ? 1 : 0;
    const int k_old = subtree_leaves(tree, touched);
    const int k_new = subtree_leaves(prop->tree, touched);

    TreeCache nc;
    nc.members = prop->tree.members(data.m);
    nc.leaf_nodes = prop->tree.leaves();
    nc.stats.reserve(nc.leaf_nodes.size());
    for (int j = 0; j < j0; ++j) nc.stats.push_back(c.stats[static_cast<std::size_t>(j)]);
    std::vector<LeafStats> fresh(static_cast<std::size_t>(k_new));
    if (*kind == MoveKind::grow) {
      const auto& lrows = nc.members[static_cast<std::size_t>(nc.leaf_nodes[static_cast<std::size_t>(j0)])];
      const auto& rrows = nc.members[static_cast<std::size_t>(nc.leaf_nodes[static_cast<std::size_t>(j0 + 1)])];
      const bool left_small = lrows.size() <= rrows.size();
      LeafStats& small = fresh[left_small ? 0 : 1];
      LeafStats& big = fresh[left_small ? 1 : 0];
      leaf_stats_direct(left_small ? lrows : rrows, small);
      big = c.stats[static_cast<std::size_t>(j0)];
      big -= small;
    } else if (*kind == MoveKind::prune) {
      fresh[0] = c.stats[static_cast<std::size_t>(j0)];
      fresh[0] += c.stats[static_cast<std::size_t>(j0 + 1)];
    } else {
      for (int j = 0; j < k_new; ++j)
        leaf_stats_direct(nc.members[static_cast<std::size_t>(nc.leaf_nodes[static_cast<std::size_t>(j0 + j)])],
                          fresh[static_cast<std::size_t>(j)]);
    }
    for (auto& s : fresh) nc.stats.push_back(std::move(s));
    for (std::size_t j = static_cast<std::size_t>(j0 + k_old); j < c.stats.size(); ++j) nc.stats.push_back(c.stats[j]);

    std::vector<CellBlock> nb;
    nb.reserve(nc.leaf_nodes.size());
    for (int j = 0; j < j0; ++j) nb.push_back(blocks[static_cast<std::size_t>(j)]);
    for (int j = j0; j < j0 + k_new; ++j)
      nb.push_back(make_block(nc.stats[static_cast<std::size_t>(j)],
                              prop->tree.node(nc.leaf_nodes[static_cast<std::size_t>(j)]).lag));
    for (std::size_t j = static_cast<std::size_t>(j0 + k_old); j < blocks.size(); ++j) nb.push_back(blocks[j]);

    auto post = evaluate(nb, qr, rr, v);
    if (!post) return;
    const double log_alpha = post->log_marginal() - cur_lm + prop->log_proposal_ratio + prop->log_prior_ratio;
    if (!accept(log_alpha)) return;
    ++diag.modifier.accepted[k];
    tree = std::move(prop->tree);
    nc.fit = std::move(c.fit);
    c = std::move(nc);
    blocks = std::move(nb);
    cur_lm = post->log_marginal();
  }

  std::vector<CellBlock> blocks_for(const ModifierTree& tree, const Eigen::VectorXd& partial,
                                    std::vector<std::vector<int>>& members) const {
    members = tree.members(data.m);
    std::vector<CellBlock> out;
    for (int leaf : tree.leaves()) {
      LeafStats s;
      kernels::leaf_gram(data.x, proj.basis(), members[static_cast<std::size_t>(leaf)], s);
      kernels::leaf_xr(data.x, partial, members[static_cast<std::size_t>(leaf)], s.xr);
      out.push_back(make_block(s, tree.node(leaf).lag));
    }
    return out;
  }

  void set_tree(int a, ModifierTree tree) {
    auto& c = cache[static_cast<std::size_t>(a)];
    r += c.fit;
    st.trees[static_cast<std::size_t>(a)] = std::move(tree);
    const auto& t = st.trees[static_cast<std::size_t>(a)];
    c.members = t.members(data.m);
    c.leaf_nodes = t.leaves();
    c.stats.assign(c.leaf_nodes.size(), LeafStats{});
    for (std::size_t j = 0; j < c.leaf_nodes.size(); ++j) {
      leaf_stats_direct(c.members[static_cast<std::size_t>(c.leaf_nodes[j])], c.stats[j]);
    }
    c.fit = Eigen::VectorXd::Zero(n);
    refresh_fit(a);
    r -= c.fit;
    refresh_quad(a);
  }

  double mh_trial(int a, const ModifierTree& candidate, double log_ratio, bool& accepted) {
    const Eigen::VectorXd partial = r + cache[static_cast<std::size_t>(a)].fit;
    const Eigen::VectorXd qr = kernels::project_coefficients(proj.basis(), partial);
    const double rr = partial.squaredNorm();
    const VarianceTerms v = variance_terms(a);
    std::vector<std::vector<int>> members;
    auto cur = evaluate(blocks_for(st.trees[static_cast<std::size_t>(a)], partial, members), qr, rr, v);
    auto prop = evaluate(blocks_for(candidate, partial, members), qr, rr, v);
    if (!cur || !prop) {
      accepted = false;
      return kNegInf;
    }
    const double log_alpha = prop->log_marginal() - cur->log_marginal() + log_ratio;
    accepted = accept(log_alpha);
    return log_alpha;
  }

  void dlm_moves(int a, std::vector<CellBlock>& blocks, double& cur_lm, const Eigen::VectorXd& qr, double rr,
                 const VarianceTerms& v) {
    auto& tree = st.trees[static_cast<std::size_t>(a)];
    auto& c = cache[static_cast<std::size_t>(a)];
    if (cfg.model == ModelKind::hdlm_shared) {
      const DlmTree& shared = tree.node(c.leaf_nodes[0]).lag.dlm;
      auto kind = choose_move(shared, cfg.dlm_moves, rng);
      if (!kind) return;
      const int k = static_cast<int>(*kind);
      ++diag.dlm.proposed[k];
      auto prop = propose_move(shared, *kind, cfg.dlm_prior, cfg.dlm_moves, rng);
      if (!prop) {
        ++diag.dlm.invalid[k];
        return;
      }
      auto seg = prop->tree.segments();
      std::vector<CellBlock> nb;
      for (const auto& s : c.stats) nb.push_back(aggregate(s, seg));
      auto post = evaluate(nb, qr, rr, v);
      if (!post) return;
      if (!accept(post->log_marginal() - cur_lm + prop->log_proposal_ratio + prop->log_prior_ratio)) return;
      ++diag.dlm.accepted[k];
      for (int leaf : c.leaf_nodes) tree.node(leaf).lag.dlm = prop->tree;
      blocks = std::move(nb);
      cur_lm = post->log_marginal();
      return;
    }
    for (std::size_t j = 0; j < c.leaf_nodes.size(); ++j) {
      const DlmTree& d = tree.node(c.leaf_nodes[j]).lag.dlm;
      auto kind = choose_move(d, cfg.dlm_moves, rng);
      if (!kind) continue;
      const int k = static_cast<int>(*kind);
      ++diag.dlm.proposed[k];
      auto prop = propose_move(d, *kind, cfg.dlm_prior, cfg.dlm_moves, rng);
      if (!prop) {
        ++diag.dlm.invalid[k];
        continue;
      }
      CellBlock old = std::move(blocks[j]);
      auto seg = prop->tree.segments();
      blocks[j] = aggregate(c.stats[j], seg);
      auto post = evaluate(blocks, qr, rr, v);
      if (post && accept(post->log_marginal() - cur_lm + prop->log_proposal_ratio + prop->log_prior_ratio)) {
        ++diag.dlm.accepted[k];
        tree.node(c.leaf_nodes[j]).lag.dlm = std::move(prop->tree);
        cur_lm = post->log_marginal();
      } else {
        blocks[j] = std::move(old);
      }
    }
  }

  void set_effects(int a, const Eigen::VectorXd& delta) {
    auto& tree = st.trees[static_cast<std::size_t>(a)];
    Eigen::Index off = 0;
    for (int leaf : cache[static_cast<std::size_t>(a)].leaf_nodes) {
      auto& lag = tree.node(leaf).lag;
      const int c = lag.cells();
      std::span<const double> part(delta.data() + off, static_cast<std::size_t>(c));
      if (lag.is_curve())
        lag.curve.assign(part.begin(), part.end());
      else
        lag.dlm.set_effects(part);
      off += c;
    }
  }

  void refresh_fit(int a) {
    auto& c = cache[static_cast<std::size_t>(a)];
    const auto& tree = st.trees[static_cast<std::size_t>(a)];
    for (int leaf : c.leaf_nodes) {
      auto th = tree.node(leaf).lag.theta();
      Eigen::Map<const Eigen::VectorXd> theta(th.data(), T);
      kernels::leaf_fit(data.x, c.members[static_cast<std::size_t>(leaf)], theta, c.fit);
    }
  }

  void tree_update(int a) {
    auto& c = cache[static_cast<std::size_t>(a)];
    r += c.fit;
    const Eigen::VectorXd qr = kernels::project_coefficients(proj.basis(), r);
    const double rr = r.squaredNorm();
    for (std::size_t j = 0; j < c.leaf_nodes.size(); ++j)
      kernels::leaf_xr(data.x, r, c.members[static_cast<std::size_t>(c.leaf_nodes[j])], c.stats[j].xr);

    const auto& tree = st.trees[static_cast<std::size_t>(a)];
    std::vector<CellBlock> blocks;
    for (std::size_t j = 0; j < c.leaf_nodes.size(); ++j)
      blocks.push_back(make_block(c.stats[j], tree.node(c.leaf_nodes[j]).lag));
    const VarianceTerms v = variance_terms(a);
    auto cur = evaluate(blocks, qr, rr, v);
    double cur_lm = cur ? cur->log_marginal() : kNegInf;

    if (space) modifier_move(a, blocks, cur_lm, qr, rr, v);
    if (!uses_gp(cfg.model)) dlm_moves(a, blocks, cur_lm, qr, rr, v);

    auto post = evaluate(blocks, qr, rr, v);
    if (post) {
      st.sigma2 = rng.inv_gamma(post->posterior_shape(), post->posterior_rate());
      set_effects(a, post->draw(st.sigma2, rng));
    } else {
      // Keep the previous effects but drop cells of a structure that could
      // not be factorised: fall back to zeros of the right size.
      set_effects(a, Eigen::VectorXd::Zero(DesignBlock{blocks, qr, rr, proj.dof()}.cells()));
    }
    refresh_fit(a);
    r -= c.fit;
    refresh_quad(a);
  }

  void backfit_step() {
    for (int a = 0; a < cfg.trees; ++a) tree_update(a);
  }

  void update_variances() {
    const std::size_t A = static_cast<std::size_t>(cfg.trees);
    double cells = 0, quad_nu = 0, quad_sigma = 0;
    for (std::size_t a = 0; a < A; ++a) {
      const auto& c = cache[a];
      update_half_cauchy(st.tau2[a], st.xi_tau[a], c.cells, c.quad / (st.sigma2 * st.nu2), rng);
    }
    for (std::size_t a = 0; a < A; ++a) {
      cells += cache[a].cells;
      quad_nu += cache[a].quad / (st.sigma2 * st.tau2[a]);
    }
    update_half_cauchy(st.nu2, st.xi_nu, cells, quad_nu, rng);
    for (std::size_t a = 0; a < A; ++a) quad_sigma += cache[a].quad / (st.tau2[a] * st.nu2);
    const Eigen::VectorXd qr = kernels::project_coefficients(proj.basis(), r);
    const double rss = std::max(r.squaredNorm() - qr.squaredNorm(), 0.0);
    update_half_cauchy(st.sigma2, st.xi_sigma, static_cast<double>(proj.dof()) + cells, rss + quad_sigma, rng);

    if (space) {
      std::vector<double> counts(data.schema.size(), 0.0);
      for (const auto& t : st.trees) t.count_rules(counts);
      const double xi = modifier_prior.xi > 0 ? modifier_prior.xi : static_cast<double>(counts.size());
      st.weights = update_rule_weights(counts, xi, rng);
      modifier_prior.weights = st.weights;
    }
  }

  void update_phi() {
    if (!uses_gp(cfg.model)) return;
    auto log_lik = [&](double phi) {
      const double ld = gp_log_det(T, phi);
      double out = 0;
      for (std::size_t a = 0; a < st.trees.size(); ++a) {
        const double scale = st.sigma2 * st.tau2[a] * st.nu2;
        for (int leaf : cache[a].leaf_nodes) {
          const auto& lag = st.trees[a].node(leaf).lag;
          out += -0.5 * ld - 0.5 * gp_quadratic(lag.curve, phi) / scale;
        }
      }
      return out;
    };
    bool accepted = false;
    st.phi = phi_step(st.phi, phi_step_size, log_lik, rng, accepted);
    ++diag.phi_proposed;
    ++phi_window_prop;
    if (accepted) {
      ++diag.phi_accepted;
      ++phi_window_acc;
    }
    if (cfg.adapt_phi && iter < cfg.burn_in && phi_window_prop == 50) {
      const double rate = static_cast<double>(phi_window_acc) / 50.0;
      if (rate < 0.3) phi_step_size *= 0.8;
      if (rate > 0.5) phi_step_size *= 1.25;
      phi_window_prop = phi_window_acc = 0;
    }
    diag.phi_step = phi_step_size;
    refresh_gp();
    for (int a = 0; a < cfg.trees; ++a) refresh_quad(a);
  }

  void step() {
    backfit_step();
    update_variances();
    update_phi();
    diag.sigma_trace.push_back(std::sqrt(st.sigma2));
    ++iter;
    if (cfg.progress_every > 0 && iter % cfg.progress_every == 0) {
      std::cerr << "iteration " << iter << " sigma " << std::sqrt(st.sigma2) << " acceptance modifier "
                << diag.modifier.acceptance() << " dlm " << diag.dlm.acceptance() << "\n";
    }
  }
};

Sampler::Sampler(const Dataset& data, const FitConfig& config, std::uint64_t seed)
    : impl_(std::make_unique<Impl>(data, config, seed)) {}
Sampler::~Sampler() = default;
void Sampler::step() { impl_->step(); }
void Sampler::backfit_step() { impl_->backfit_step(); }
void Sampler::update_variances() { impl_->update_variances(); }
void Sampler::update_phi() { impl_->update_phi(); }
const EnsembleState& Sampler::state() const { return impl_->st; }
const Eigen::VectorXd& Sampler::residual() const { return impl_->r; }
const Eigen::VectorXd& Sampler::tree_fit(int a) const { return impl_->cache[static_cast<std::size_t>(a)].fit; }
const Diagnostics& Sampler::diagnostics() const { return impl_->diag; }
int Sampler::iteration() const { return impl_->iter; }
void Sampler::set_force_reject(bool on) { impl_->force_reject = on; }
void Sampler::set_tree(int a, ModifierTree tree) { impl_->set_tree(a, std::move(tree)); }
double Sampler::mh_trial(int a, const ModifierTree& candidate, double log_ratio, bool& accepted) {
  return impl_->mh_trial(a, candidate, log_ratio, accepted);
}

double Sampler::residual_error() const {
  Eigen::VectorXd f = ensemble_fit(impl_->st, impl_->data.x, impl_->data.m);
  Eigen::VectorXd expect = impl_->data.y - f;
  const double scale = std::max(1.0, impl_->data.y.cwiseAbs().maxCoeff());
  return (impl_->r - expect).cwiseAbs().maxCoeff() / scale;
}

// ---------------------------------------------------------------------------

std::vector<Eigen::VectorXd> recover_gamma(const PosteriorDraws& draws, const Dataset& data, std::uint64_t seed) {
  FixedEffectsProjection proj(data.z);
  const auto D = static_cast<std::int64_t>(draws.states.size());
  std::vector<Eigen::VectorXd> out(static_cast<std::size_t>(D));
#pragma omp parallel for schedule(dynamic, 8)
  for (std::int64_t d = 0; d < D; ++d) {
    const auto& s = draws.states[static_cast<std::size_t>(d)];
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(d)));
    Eigen::VectorXd f = ensemble_fit(s, data.x, data.m);
    Eigen::VectorXd coef = proj.coefficients(data.y - f);
    Eigen::VectorXd z(coef.size());
    for (Eigen::Index k = 0; k < z.size(); ++k) z(k) = rng.normal();
    out[static_cast<std::size_t>(d)] = coef + std::sqrt(s.sigma2) * (proj.r_inverse() * z);
  }
  return out;
}

PosteriorDraws fit(const Dataset& data, const std::vector<int>& modifiers, const FitConfig& config) {
  config.check();
  Dataset restricted = data.with_modifiers(uses_modifiers(config.model) ? modifiers : std::vector<int>{});

  PosteriorDraws out;
  out.model = config.model;
  out.lags = static_cast<int>(data.lags());
  out.schema = restricted.schema;
  out.config = config;
  const auto& cm = data.columns;
  out.columns = cm;
  if (cm.add_intercept) out.fixed_names.push_back("intercept");
  for (const auto& f : cm.fixed) out.fixed_names.push_back(f);
  if (static_cast<Eigen::Index>(out.fixed_names.size()) != data.z.cols()) {
    out.fixed_names.clear();
    for (Eigen::Index k = 0; k < data.z.cols(); ++k) out.fixed_names.push_back("z" + std::to_string(k));
  }

  struct ChainResult {
    std::vector<EnsembleState> states;
    Diagnostics diag;
    Eigen::VectorXd fit_sum;
    std::exception_ptr error;
  };
  std::vector<ChainResult> chains(static_cast<std::size_t>(config.chains));
  const int kept_per_chain = config.draw_count();

#pragma omp parallel for schedule(dynamic, 1) if (config.chains > 1)
  for (int c = 0; c < config.chains; ++c) {
    auto& res = chains[static_cast<std::size_t>(c)];
    try {
      Sampler s(restricted, config, derive_seed(config.seed, static_cast<std::uint64_t>(c)));
      res.fit_sum = Eigen::VectorXd::Zero(restricted.n());
      res.states.reserve(static_cast<std::size_t>(kept_per_chain));
      for (int it = 0; it < config.iterations; ++it) {
        s.step();
        const int post = it - config.burn_in;
        if (post >= 0 && (post + 1) % config.thin == 0 && static_cast<int>(res.states.size()) < kept_per_chain) {
          res.states.push_back(s.state());
          res.fit_sum += restricted.y - s.residual();
        }
      }
      res.diag = s.diagnostics();
    } catch (...) {
      res.error = std::current_exception();
    }
  }
  for (auto& c : chains)
    if (c.error) std::rethrow_exception(c.error);

  Eigen::VectorXd fit_sum = Eigen::VectorXd::Zero(restricted.n());
  for (std::size_t c = 0; c < chains.size(); ++c) {
    auto& res = chains[c];
    for (auto& s : res.states) {
      out.states.push_back(std::move(s));
      out.chain.push_back(static_cast<int>(c));
    }
    out.diagnostics.modifier += res.diag.modifier;
    out.diagnostics.dlm += res.diag.dlm;
    out.diagnostics.singular += res.diag.singular;
    out.diagnostics.phi_proposed += res.diag.phi_proposed;
    out.diagnostics.phi_accepted += res.diag.phi_accepted;
    out.diagnostics.phi_step = res.diag.phi_step;
    out.diagnostics.sigma_trace.insert(out.diagnostics.sigma_trace.end(), res.diag.sigma_trace.begin(),
                                       res.diag.sigma_trace.end());
    fit_sum += res.fit_sum;
  }
  out.gamma = recover_gamma(out, restricted, derive_seed(config.seed, 0x67616d6d61ULL));
  Eigen::VectorXd gamma_mean = Eigen::VectorXd::Zero(restricted.z.cols());
  for (const auto& g : out.gamma) gamma_mean += g;
  const double D = static_cast<double>(out.states.size());
  gamma_mean /= D;
  out.diagnostics.fitted_mean = fit_sum / D + restricted.z * gamma_mean;
  return out;
}

}  // namespace hdlm
