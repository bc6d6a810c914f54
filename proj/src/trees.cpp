#include "hdlm/trees.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "hdlm/error.hpp"

namespace hdlm {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_or_neg_inf(double p) { return p > 0 ? std::log(p) : kNegInf; }

}  // namespace

void TreePriorParams::check(std::size_t modifiers) const {
  if (!(alpha >= 0 && alpha < 1)) throw UsageError("tree prior: alpha must lie in [0, 1)");
  if (!(beta >= 0) || !std::isfinite(beta)) throw UsageError("tree prior: beta must be non-negative");
  if (!(xi >= 0) || !std::isfinite(xi)) throw UsageError("tree prior: xi must be non-negative");
  if (min_leaf < 1) throw UsageError("tree prior: min_leaf must be at least 1");
  if (!weights.empty()) {
    if (weights.size() != modifiers) throw UsageError("tree prior: weight vector length differs from modifier count");
    double sum = 0;
    for (double w : weights) {
      if (!(w > 0)) throw UsageError("tree prior: weights must be positive");
      sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-8) throw UsageError("tree prior: weights must sum to 1");
  }
}

double TreePriorParams::weight(std::size_t j, std::size_t modifiers) const {
  return weights.empty() ? 1.0 / static_cast<double>(modifiers) : weights[j];
}

double split_probability(int depth, const TreePriorParams& params) {
  return params.alpha * std::pow(1.0 + depth, -params.beta);
}

const char* to_string(MoveKind kind) {
  switch (kind) {
    case MoveKind::grow: return "grow";
    case MoveKind::prune: return "prune";
    case MoveKind::change: return "change";
    case MoveKind::swap: return "swap";
  }
  return "?";
}

double MoveWeights::of(MoveKind k) const {
  switch (k) {
    case MoveKind::grow: return grow;
    case MoveKind::prune: return prune;
    case MoveKind::change: return change;
    case MoveKind::swap: return swap;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// DlmTree

DlmTree::DlmTree(int lags, double effect) : lags_(lags) {
  if (lags < 1) throw std::invalid_argument("DlmTree: lags must be positive");
  Node root;
  root.begin = 1;
  root.end = lags;
  root.effect = effect;
  nodes_.push_back(root);
}

std::optional<DlmTree> DlmTree::try_preorder(int lags, std::span<const int> splits, std::span<const double> effects) {
  if (lags < 1) return std::nullopt;
  DlmTree t;
  t.lags_ = lags;
  std::size_t pos = 0, leaf = 0;
  bool ok = true;
  // Returns the index of the node built at `pos`.
  auto build = [&](auto&& self, int parent, int depth, int begin, int end) -> int {
    if (!ok || pos >= splits.size()) {
      ok = false;
      return -1;
    }
    int idx = static_cast<int>(t.nodes_.size());
    Node n;
    n.parent = parent;
    n.depth = depth;
    n.begin = begin;
    n.end = end;
    int s = splits[pos++];
    t.nodes_.push_back(n);
    if (s == 0) {
      if (leaf >= effects.size()) {
        ok = false;
        return idx;
      }
      t.nodes_[static_cast<std::size_t>(idx)].effect = effects[leaf++];
      return idx;
    }
    if (s <= begin || s > end) {
      ok = false;
      return idx;
    }
    t.nodes_[static_cast<std::size_t>(idx)].split = s;
    int l = self(self, idx, depth + 1, begin, s - 1);
    int r = self(self, idx, depth + 1, s, end);
    t.nodes_[static_cast<std::size_t>(idx)].left = l;
    t.nodes_[static_cast<std::size_t>(idx)].right = r;
    return idx;
  };
  build(build, -1, 0, 1, lags);
  if (!ok || pos != splits.size() || leaf != effects.size()) return std::nullopt;
  return t;
}

DlmTree DlmTree::from_preorder(int lags, std::span<const int> splits, std::span<const double> effects) {
  auto t = try_preorder(lags, splits, effects);
  if (!t) throw std::invalid_argument("DlmTree: inconsistent pre-order records");
  return *t;
}

std::vector<int> DlmTree::leaves() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].leaf()) out.push_back(static_cast<int>(i));
  return out;
}

int DlmTree::leaf_count() const {
  int c = 0;
  for (const auto& n : nodes_) c += n.leaf() ? 1 : 0;
  return c;
}

std::vector<int> DlmTree::internal_nodes() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (!nodes_[i].leaf()) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> DlmTree::prunable_nodes() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    if (!n.leaf() && node(n.left).leaf() && node(n.right).leaf()) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::vector<int> DlmTree::splittable_leaves() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].leaf() && nodes_[i].splittable()) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<DlmTree::Segment> DlmTree::segments() const {
  std::vector<Segment> out;
  for (const auto& n : nodes_)
    if (n.leaf()) out.push_back({n.begin, n.end, n.effect});
  return out;
}

std::vector<double> DlmTree::curve() const {
  std::vector<double> out(static_cast<std::size_t>(lags_), 0.0);
  for (const auto& n : nodes_)
    if (n.leaf())
      for (int t = n.begin; t <= n.end; ++t) out[static_cast<std::size_t>(t - 1)] = n.effect;
  return out;
}

void DlmTree::set_effects(std::span<const double> effects) {
  std::size_t k = 0;
  for (auto& n : nodes_) {
    if (!n.leaf()) continue;
    if (k >= effects.size()) throw std::invalid_argument("DlmTree::set_effects: too few effects");
    n.effect = effects[k++];
  }
  if (k != effects.size()) throw std::invalid_argument("DlmTree::set_effects: too many effects");
}

std::vector<double> DlmTree::effects() const {
  std::vector<double> out;
  for (const auto& n : nodes_)
    if (n.leaf()) out.push_back(n.effect);
  return out;
}

namespace {

// Pre-order records of a DLM tree with one node replaced by a sub-record list.
void dlm_records(const DlmTree& t, int node, int target, const std::vector<int>& sub_splits,
                 const std::vector<double>& sub_effects, std::vector<int>& splits, std::vector<double>& effects) {
  if (node == target) {
    splits.insert(splits.end(), sub_splits.begin(), sub_splits.end());
    effects.insert(effects.end(), sub_effects.begin(), sub_effects.end());
    return;
  }
  const auto& n = t.node(node);
  if (n.leaf()) {
    splits.push_back(0);
    effects.push_back(n.effect);
    return;
  }
  splits.push_back(n.split);
  dlm_records(t, n.left, target, sub_splits, sub_effects, splits, effects);
  dlm_records(t, n.right, target, sub_splits, sub_effects, splits, effects);
}

// Subtree records (splits of every node, effects of leaves).
void dlm_subtree(const DlmTree& t, int node, std::vector<int>& splits, std::vector<double>& effects) {
  const auto& n = t.node(node);
  if (n.leaf()) {
    splits.push_back(0);
    effects.push_back(n.effect);
    return;
  }
  splits.push_back(n.split);
  dlm_subtree(t, n.left, splits, effects);
  dlm_subtree(t, n.right, splits, effects);
}

}  // namespace

std::optional<DlmTree> DlmTree::grown(int leaf, int split) const {
  const auto& n = node(leaf);
  if (!n.leaf() || split <= n.begin || split > n.end) return std::nullopt;
  std::vector<int> splits;
  std::vector<double> effects;
  dlm_records(*this, 0, leaf, {split, 0, 0}, {0.0, 0.0}, splits, effects);
  return try_preorder(lags_, splits, effects);
}

DlmTree DlmTree::pruned(int idx) const {
  const auto& n = node(idx);
  if (n.leaf()) throw std::invalid_argument("DlmTree::pruned: node is a leaf");
  std::vector<int> splits;
  std::vector<double> effects;
  dlm_records(*this, 0, idx, {0}, {0.0}, splits, effects);
  return from_preorder(lags_, splits, effects);
}

std::optional<DlmTree> DlmTree::changed(int idx, int split) const {
  const auto& n = node(idx);
  if (n.leaf() || split <= n.begin || split > n.end) return std::nullopt;
  std::vector<int> sub_splits;
  std::vector<double> sub_effects;
  dlm_subtree(*this, idx, sub_splits, sub_effects);
  sub_splits[0] = split;
  std::vector<int> splits;
  std::vector<double> effects;
  dlm_records(*this, 0, idx, sub_splits, sub_effects, splits, effects);
  return try_preorder(lags_, splits, effects);
}

bool DlmTree::same_structure(const DlmTree& other) const {
  if (lags_ != other.lags_ || nodes_.size() != other.nodes_.size()) return false;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto &a = nodes_[i], &b = other.nodes_[i];
    if (a.leaf() != b.leaf() || a.split != b.split) return false;
  }
  return true;
}

bool operator==(const DlmTree& a, const DlmTree& b) {
  if (!a.same_structure(b)) return false;
  for (std::size_t i = 0; i < a.nodes_.size(); ++i)
    if (a.nodes_[i].leaf() && a.nodes_[i].effect != b.nodes_[i].effect) return false;
  return true;
}

DlmTree draw_dlm_tree(int lags, const TreePriorParams& params, Rng& rng) {
  std::vector<int> splits;
  auto grow = [&](auto&& self, int depth, int begin, int end) -> void {
    if (end > begin && rng.uniform() < split_probability(depth, params)) {
      int s = begin + 1 + static_cast<int>(rng.index(static_cast<std::size_t>(end - begin)));
      splits.push_back(s);
      self(self, depth + 1, begin, s - 1);
      self(self, depth + 1, s, end);
    } else {
      splits.push_back(0);
    }
  };
  grow(grow, 0, 1, lags);
  std::vector<double> effects(static_cast<std::size_t>(std::count(splits.begin(), splits.end(), 0)), 0.0);
  return DlmTree::from_preorder(lags, splits, effects);
}

namespace {

double dlm_subtree_prior(const DlmTree& t, int idx, const TreePriorParams& params) {
  const auto& n = t.node(idx);
  if (!n.splittable()) return 0.0;
  double p = split_probability(n.depth, params);
  if (n.leaf()) return log_or_neg_inf(1.0 - p);
  return log_or_neg_inf(p) - std::log(static_cast<double>(n.end - n.begin)) + dlm_subtree_prior(t, n.left, params) +
         dlm_subtree_prior(t, n.right, params);
}

}  // namespace

double log_tree_prior(const DlmTree& tree, const TreePriorParams& params) { return dlm_subtree_prior(tree, 0, params); }

// ---------------------------------------------------------------------------
// Modifier trees

bool SplitRule::goes_left(double value) const {
  switch (kind) {
    case RuleKind::threshold: return value < threshold;
    case RuleKind::subset: return (left_set >> static_cast<unsigned>(value)) & 1ULL;
    case RuleKind::binary: return value == 0.0;
  }
  return false;
}

ModifierTree::ModifierTree(LeafLag root) {
  Node n;
  n.lag = std::move(root);
  nodes_.push_back(std::move(n));
}

ModifierTree ModifierTree::from_preorder(std::vector<Record> records) {
  ModifierTree t;
  std::size_t pos = 0;
  auto build = [&](auto&& self, int parent, int depth) -> int {
    if (pos >= records.size()) throw std::invalid_argument("ModifierTree: truncated pre-order records");
    int idx = static_cast<int>(t.nodes_.size());
    Record& r = records[pos++];
    Node n;
    n.parent = parent;
    n.depth = depth;
    if (r.leaf) {
      n.lag = std::move(r.lag);
      t.nodes_.push_back(std::move(n));
      return idx;
    }
    n.rule = r.rule;
    t.nodes_.push_back(std::move(n));
    int l = self(self, idx, depth + 1);
    int rr = self(self, idx, depth + 1);
    t.nodes_[static_cast<std::size_t>(idx)].left = l;
    t.nodes_[static_cast<std::size_t>(idx)].right = rr;
    return idx;
  };
  build(build, -1, 0);
  if (pos != records.size()) throw std::invalid_argument("ModifierTree: trailing pre-order records");
  return t;
}

std::vector<ModifierTree::Record> ModifierTree::preorder() const {
  std::vector<Record> out;
  out.reserve(nodes_.size());
  for (const auto& n : nodes_) out.push_back({n.leaf(), n.rule, n.leaf() ? n.lag : LeafLag{}});
  return out;
}

std::vector<int> ModifierTree::leaves() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].leaf()) out.push_back(static_cast<int>(i));
  return out;
}

int ModifierTree::leaf_count() const {
  int c = 0;
  for (const auto& n : nodes_) c += n.leaf() ? 1 : 0;
  return c;
}

std::vector<int> ModifierTree::internal_nodes() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (!nodes_[i].leaf()) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> ModifierTree::prunable_nodes() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    if (!n.leaf() && node(n.left).leaf() && node(n.right).leaf()) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::vector<std::pair<int, int>> ModifierTree::swappable_pairs() const {
  std::vector<std::pair<int, int>> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto& n = nodes_[i];
    if (n.leaf()) continue;
    if (!node(n.left).leaf()) out.emplace_back(static_cast<int>(i), n.left);
    if (!node(n.right).leaf()) out.emplace_back(static_cast<int>(i), n.right);
  }
  return out;
}

int ModifierTree::route(std::span<const double> row) const {
  int idx = 0;
  while (!node(idx).leaf()) {
    const auto& n = node(idx);
    idx = n.rule.goes_left(row[static_cast<std::size_t>(n.rule.modifier)]) ? n.left : n.right;
  }
  return idx;
}

std::vector<int> ModifierTree::route_all(const Eigen::MatrixXd& m) const {
  std::vector<int> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    int idx = 0;
    while (!node(idx).leaf()) {
      const auto& n = node(idx);
      idx = n.rule.goes_left(m(i, n.rule.modifier)) ? n.left : n.right;
    }
    out[static_cast<std::size_t>(i)] = idx;
  }
  return out;
}

std::vector<std::vector<int>> ModifierTree::members(const Eigen::MatrixXd& m) const {
  std::vector<std::vector<int>> out(nodes_.size());
  out[0].resize(static_cast<std::size_t>(m.rows()));
  std::iota(out[0].begin(), out[0].end(), 0);
  // Pre-order guarantees a parent is processed before its children.
  for (std::size_t k = 0; k < nodes_.size(); ++k) {
    const auto& n = nodes_[k];
    if (n.leaf()) continue;
    auto& l = out[static_cast<std::size_t>(n.left)];
    auto& r = out[static_cast<std::size_t>(n.right)];
    for (int i : out[k]) (n.rule.goes_left(m(i, n.rule.modifier)) ? l : r).push_back(i);
  }
  return out;
}

void ModifierTree::count_rules(std::vector<double>& counts) const {
  for (const auto& n : nodes_)
    if (!n.leaf()) counts.at(static_cast<std::size_t>(n.rule.modifier)) += 1.0;
}

namespace {

using Record = ModifierTree::Record;

void records_replacing(const ModifierTree& t, int node, int target, std::vector<Record>& sub, std::vector<Record>& out) {
  if (node == target) {
    for (auto& r : sub) out.push_back(std::move(r));
    return;
  }
  const auto& n = t.node(node);
  if (n.leaf()) {
    out.push_back({true, {}, n.lag});
    return;
  }
  out.push_back({false, n.rule, {}});
  records_replacing(t, n.left, target, sub, out);
  records_replacing(t, n.right, target, sub, out);
}

}  // namespace

ModifierTree ModifierTree::grown(int leaf, const SplitRule& rule, LeafLag left, LeafLag right) const {
  if (!node(leaf).leaf()) throw std::invalid_argument("ModifierTree::grown: node is not a leaf");
  std::vector<Record> sub{{false, rule, {}}, {true, {}, std::move(left)}, {true, {}, std::move(right)}};
  std::vector<Record> out;
  records_replacing(*this, 0, leaf, sub, out);
  return from_preorder(std::move(out));
}

ModifierTree ModifierTree::pruned(int idx, LeafLag merged) const {
  if (node(idx).leaf()) throw std::invalid_argument("ModifierTree::pruned: node is a leaf");
  std::vector<Record> sub{{true, {}, std::move(merged)}};
  std::vector<Record> out;
  records_replacing(*this, 0, idx, sub, out);
  return from_preorder(std::move(out));
}

ModifierTree ModifierTree::with_rule(int idx, const SplitRule& rule) const {
  if (node(idx).leaf()) throw std::invalid_argument("ModifierTree::with_rule: node is a leaf");
  ModifierTree t = *this;
  t.node(idx).rule = rule;
  return t;
}

bool ModifierTree::same_structure(const ModifierTree& other) const {
  if (nodes_.size() != other.nodes_.size()) return false;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const auto &a = nodes_[i], &b = other.nodes_[i];
    if (a.leaf() != b.leaf()) return false;
    if (!a.leaf() && !(a.rule == b.rule)) return false;
  }
  return true;
}

bool operator==(const ModifierTree& a, const ModifierTree& b) {
  if (!a.same_structure(b)) return false;
  for (std::size_t i = 0; i < a.nodes_.size(); ++i)
    if (a.nodes_[i].leaf() && !(a.nodes_[i].lag == b.nodes_[i].lag)) return false;
  return true;
}

int assign_subgroup(const ModifierTree& tree, std::span<const double> row) {
  const int leaf = tree.route(row);
  int id = 0;
  for (int k = 0; k < leaf; ++k) id += tree.node(k).leaf() ? 1 : 0;
  return id;
}

// ---------------------------------------------------------------------------
// Rule space

RuleSpace::RuleSpace(const Eigen::MatrixXd& m, const ModifierSchema& schema) : m_(&m) {
  if (static_cast<std::size_t>(m.cols()) != schema.size())
    throw std::invalid_argument("RuleSpace: modifier matrix does not match schema");
  const auto n = static_cast<std::size_t>(m.rows());
  std::size_t widest = 1;
  for (std::size_t j = 0; j < schema.size(); ++j) {
    kinds_.push_back(schema[j].kind);
    std::vector<double> vals(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
    std::vector<double> uniq = vals;
    std::sort(uniq.begin(), uniq.end());
    uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
    std::vector<int> rank(n);
    for (std::size_t i = 0; i < n; ++i)
      rank[i] = static_cast<int>(std::lower_bound(uniq.begin(), uniq.end(), vals[i]) - uniq.begin());
    widest = std::max(widest, uniq.size());
    unique_.push_back(std::move(uniq));
    rank_.push_back(std::move(rank));
  }
  stamp_.assign(widest, 0);
}

void RuleSpace::present_ranks(int j, std::span<const int> rows, std::vector<int>& out) const {
  out.clear();
  if (++epoch_ == 0) {
    std::fill(stamp_.begin(), stamp_.end(), 0);
    epoch_ = 1;
  }
  const auto& rank = rank_[static_cast<std::size_t>(j)];
  for (int i : rows) {
    int r = rank[static_cast<std::size_t>(i)];
    if (stamp_[static_cast<std::size_t>(r)] != epoch_) {
      stamp_[static_cast<std::size_t>(r)] = epoch_;
      out.push_back(r);
    }
  }
}

double RuleSpace::candidate_count(int j, std::span<const int> rows) const {
  thread_local std::vector<int> present;
  present_ranks(j, rows, present);
  const double k = static_cast<double>(present.size());
  if (k < 2) return 0.0;
  switch (kinds_[static_cast<std::size_t>(j)]) {
    case ModifierKind::continuous:
    case ModifierKind::ordinal: return k - 1;
    case ModifierKind::nominal: return std::ldexp(1.0, static_cast<int>(k)) - 2.0;
    case ModifierKind::binary: return 1.0;
  }
  return 0.0;
}

bool RuleSpace::admissible(const SplitRule& rule, std::span<const int> rows) const {
  if (rule.modifier < 0 || static_cast<std::size_t>(rule.modifier) >= kinds_.size()) return false;
  const auto j = static_cast<std::size_t>(rule.modifier);
  const auto& col = m_->col(rule.modifier);
  switch (kinds_[j]) {
    case ModifierKind::continuous:
    case ModifierKind::ordinal: {
      if (rule.kind != RuleKind::threshold) return false;
      bool equal = false, below = false;
      for (int i : rows) {
        double v = col(i);
        equal |= v == rule.threshold;
        below |= v < rule.threshold;
        if (equal && below) return true;
      }
      return false;
    }
    case ModifierKind::nominal: {
      if (rule.kind != RuleKind::subset) return false;
      std::uint64_t present = 0;
      for (int i : rows) present |= 1ULL << static_cast<unsigned>(col(i));
      return rule.left_set != 0 && (rule.left_set & ~present) == 0 && rule.left_set != present;
    }
    case ModifierKind::binary: {
      if (rule.kind != RuleKind::binary) return false;
      bool zero = false, one = false;
      for (int i : rows) {
        (col(i) == 0.0 ? zero : one) = true;
        if (zero && one) return true;
      }
      return false;
    }
  }
  return false;
}

std::optional<SplitRule> RuleSpace::draw_rule(int j, std::span<const int> rows, Rng& rng) const {
  thread_local std::vector<int> present;
  present_ranks(j, rows, present);
  if (present.size() < 2) return std::nullopt;
  SplitRule rule;
  rule.modifier = j;
  const auto& uniq = unique_[static_cast<std::size_t>(j)];
  switch (kinds_[static_cast<std::size_t>(j)]) {
    case ModifierKind::continuous:
    case ModifierKind::ordinal: {
      auto lowest = std::min_element(present.begin(), present.end());
      std::iter_swap(lowest, present.end() - 1);
      std::size_t pick = rng.index(present.size() - 1);
      rule.kind = RuleKind::threshold;
      rule.threshold = uniq[static_cast<std::size_t>(present[pick])];
      return rule;
    }
    case ModifierKind::nominal: {
      const std::size_t k = present.size();
      // Codes are category indices; subsets of the present ones, excluding
      // the empty set and the full set.
      std::sort(present.begin(), present.end());
      std::uint64_t pick = 1 + rng.index((std::size_t{1} << k) - 2);
      std::uint64_t mask = 0;
      for (std::size_t b = 0; b < k; ++b)
        if ((pick >> b) & 1ULL) mask |= 1ULL << static_cast<unsigned>(uniq[static_cast<std::size_t>(present[b])]);
      rule.kind = RuleKind::subset;
      rule.left_set = mask;
      return rule;
    }
    case ModifierKind::binary:
      rule.kind = RuleKind::binary;
      return rule;
  }
  return std::nullopt;
}

namespace {

bool any_candidate(const RuleSpace& space, std::span<const int> rows) {
  for (std::size_t j = 0; j < space.modifiers(); ++j)
    if (space.candidate_count(static_cast<int>(j), rows) > 0) return true;
  return false;
}

double modifier_subtree_prior(const ModifierTree& t, int idx, const TreePriorParams& params, const RuleSpace& space,
                              const std::vector<std::vector<int>>& members) {
  const auto& n = t.node(idx);
  const auto& rows = members[static_cast<std::size_t>(idx)];
  const double p = split_probability(n.depth, params);
  if (n.leaf()) return any_candidate(space, rows) ? log_or_neg_inf(1.0 - p) : 0.0;
  const double cand = space.candidate_count(n.rule.modifier, rows);
  if (cand <= 0 || !space.admissible(n.rule, rows)) return kNegInf;
  const double w = params.weight(static_cast<std::size_t>(n.rule.modifier), space.modifiers());
  return log_or_neg_inf(p) + std::log(w) - std::log(cand) + modifier_subtree_prior(t, n.left, params, space, members) +
         modifier_subtree_prior(t, n.right, params, space, members);
}

}  // namespace

double log_tree_prior(const ModifierTree& tree, const TreePriorParams& params, const RuleSpace& space,
                      const std::vector<std::vector<int>>& members, int node) {
  return modifier_subtree_prior(tree, node, params, space, members);
}

double log_tree_prior(const ModifierTree& tree, const TreePriorParams& params, const RuleSpace& space, int node) {
  return log_tree_prior(tree, params, space, tree.members(space.values()), node);
}

// ---------------------------------------------------------------------------
// Proposals

bool move_available(const DlmTree& tree, MoveKind kind) {
  switch (kind) {
    case MoveKind::grow: return !tree.splittable_leaves().empty();
    case MoveKind::prune: return !tree.prunable_nodes().empty();
    case MoveKind::change: return !tree.internal_nodes().empty();
    case MoveKind::swap: return false;
  }
  return false;
}

bool move_available(const ModifierTree& tree, MoveKind kind) {
  switch (kind) {
    case MoveKind::grow: return true;
    case MoveKind::prune: return !tree.prunable_nodes().empty();
    case MoveKind::change: return !tree.internal_nodes().empty();
    case MoveKind::swap: return !tree.swappable_pairs().empty();
  }
  return false;
}

namespace {

constexpr MoveKind kAllMoves[] = {MoveKind::grow, MoveKind::prune, MoveKind::change, MoveKind::swap};

template <class Tree>
double move_probability_impl(const Tree& tree, MoveKind kind, const MoveWeights& w) {
  if (w.of(kind) <= 0 || !move_available(tree, kind)) return 0.0;
  double total = 0;
  for (MoveKind k : kAllMoves)
    if (w.of(k) > 0 && move_available(tree, k)) total += w.of(k);
  return w.of(kind) / total;
}

template <class Tree>
std::optional<MoveKind> choose_move_impl(const Tree& tree, const MoveWeights& w, Rng& rng) {
  double probs[4];
  double total = 0;
  for (int k = 0; k < 4; ++k) {
    probs[k] = (w.of(kAllMoves[k]) > 0 && move_available(tree, kAllMoves[k])) ? w.of(kAllMoves[k]) : 0.0;
    total += probs[k];
  }
  if (total <= 0) return std::nullopt;
  double u = rng.uniform() * total;
  for (int k = 0; k < 4; ++k) {
    if (probs[k] <= 0) continue;
    if (u < probs[k]) return kAllMoves[k];
    u -= probs[k];
  }
  for (int k = 3; k >= 0; --k)
    if (probs[k] > 0) return kAllMoves[k];
  return std::nullopt;
}

}  // namespace

double move_probability(const DlmTree& tree, MoveKind kind, const MoveWeights& w) {
  return move_probability_impl(tree, kind, w);
}
double move_probability(const ModifierTree& tree, MoveKind kind, const MoveWeights& w) {
  return move_probability_impl(tree, kind, w);
}
std::optional<MoveKind> choose_move(const DlmTree& tree, const MoveWeights& w, Rng& rng) {
  return choose_move_impl(tree, w, rng);
}
std::optional<MoveKind> choose_move(const ModifierTree& tree, const MoveWeights& w, Rng& rng) {
  return choose_move_impl(tree, w, rng);
}

std::optional<Proposal<DlmTree>> propose_move(const DlmTree& tree, MoveKind kind, const TreePriorParams& params,
                                              const MoveWeights& weights, Rng& rng) {
  if (kind == MoveKind::swap) throw std::invalid_argument("swap is not defined for DLM trees");
  if (!move_available(tree, kind)) return std::nullopt;
  const double p_fwd = move_probability(tree, kind, weights);

  if (kind == MoveKind::grow) {
    auto cand = tree.splittable_leaves();
    int leaf = cand[rng.index(cand.size())];
    const auto& n = tree.node(leaf);
    const int width = n.end - n.begin;
    int split = n.begin + 1 + static_cast<int>(rng.index(static_cast<std::size_t>(width)));
    auto grown = tree.grown(leaf, split);
    if (!grown) return std::nullopt;
    const double p_rev = move_probability(*grown, MoveKind::prune, weights);
    Proposal<DlmTree> out{std::move(*grown), kind};
    out.log_proposal_ratio = std::log(p_rev) - std::log(static_cast<double>(out.tree.prunable_nodes().size())) -
                             (std::log(p_fwd) - std::log(static_cast<double>(cand.size())) - std::log(width));
    out.log_prior_ratio = dlm_subtree_prior(out.tree, leaf, params) - dlm_subtree_prior(tree, leaf, params);
    out.touched = leaf;
    return out;
  }

  if (kind == MoveKind::prune) {
    auto cand = tree.prunable_nodes();
    int idx = cand[rng.index(cand.size())];
    const auto& n = tree.node(idx);
    DlmTree pruned = tree.pruned(idx);
    const double p_rev = move_probability(pruned, MoveKind::grow, weights);
    Proposal<DlmTree> out{std::move(pruned), kind};
    out.log_proposal_ratio = std::log(p_rev) - std::log(static_cast<double>(out.tree.splittable_leaves().size())) -
                             std::log(n.end - n.begin) -
                             (std::log(p_fwd) - std::log(static_cast<double>(cand.size())));
    out.log_prior_ratio = dlm_subtree_prior(out.tree, idx, params) - dlm_subtree_prior(tree, idx, params);
    out.touched = idx;
    return out;
  }

  auto cand = tree.internal_nodes();
  int idx = cand[rng.index(cand.size())];
  const auto& n = tree.node(idx);
  int split = n.begin + 1 + static_cast<int>(rng.index(static_cast<std::size_t>(n.end - n.begin)));
  auto changed = tree.changed(idx, split);
  if (!changed) return std::nullopt;
  Proposal<DlmTree> out{std::move(*changed), kind};
  // Same node count and the same split range at the node: symmetric.
  out.log_proposal_ratio = 0.0;
  out.log_prior_ratio = dlm_subtree_prior(out.tree, idx, params) - dlm_subtree_prior(tree, idx, params);
  out.touched = idx;
  return out;
}

namespace {

LeafLag new_leaf_lag(const LeafLag& from, const ModifierMoveContext& ctx, Rng& rng) {
  switch (ctx.init) {
    case LeafInit::fresh_dlm: {
      const int lags = from.is_curve() ? static_cast<int>(from.curve.size()) : from.dlm.lags();
      return LeafLag{draw_dlm_tree(lags, *ctx.dlm_prior, rng), {}};
    }
    case LeafInit::copy_dlm: {
      LeafLag out = from;
      std::vector<double> zeros(static_cast<std::size_t>(out.dlm.leaf_count()), 0.0);
      out.dlm.set_effects(zeros);
      return out;
    }
    case LeafInit::curve: return LeafLag{{}, std::vector<double>(from.curve.size(), 0.0)};
  }
  return from;
}

bool leaves_meet_minimum(const ModifierTree& t, int idx, const std::vector<std::vector<int>>& members, int min_leaf) {
  const auto& n = t.node(idx);
  if (n.leaf()) return static_cast<int>(members[static_cast<std::size_t>(idx)].size()) >= min_leaf;
  return leaves_meet_minimum(t, n.left, members, min_leaf) && leaves_meet_minimum(t, n.right, members, min_leaf);
}

double leaf_prior(const ModifierTree& t, int idx, const TreePriorParams& params, const RuleSpace& space,
                  std::span<const int> rows) {
  return any_candidate(space, rows) ? log_or_neg_inf(1.0 - split_probability(t.node(idx).depth, params)) : 0.0;
}

}  // namespace

std::optional<Proposal<ModifierTree>> propose_move(const ModifierTree& tree, MoveKind kind,
                                                   const ModifierMoveContext& ctx,
                                                   const std::vector<std::vector<int>>& members, Rng& rng) {
  const RuleSpace& space = *ctx.space;
  const TreePriorParams& prior = *ctx.prior;
  const std::size_t q = space.modifiers();
  if (!move_available(tree, kind) || ctx.weights.of(kind) <= 0) return std::nullopt;
  const double p_fwd = move_probability(tree, kind, ctx.weights);

  auto draw_modifier = [&]() {
    double u = rng.uniform(), acc = 0;
    for (std::size_t j = 0; j + 1 < q; ++j) {
      acc += prior.weight(j, q);
      if (u < acc) return static_cast<int>(j);
    }
    return static_cast<int>(q - 1);
  };
  auto log_rule_prob = [&](const SplitRule& r, std::span<const int> rows) {
    return std::log(prior.weight(static_cast<std::size_t>(r.modifier), q)) -
           std::log(space.candidate_count(r.modifier, rows));
  };

  if (q == 0 && kind != MoveKind::prune) return std::nullopt;

  if (kind == MoveKind::grow) {
    auto leaves = tree.leaves();
    int leaf = leaves[rng.index(leaves.size())];
    const auto& rows = members[static_cast<std::size_t>(leaf)];
    auto rule = space.draw_rule(draw_modifier(), rows, rng);
    if (!rule) return std::nullopt;
    std::size_t left = 0;
    const auto& col = space.values().col(rule->modifier);
    for (int i : rows) left += rule->goes_left(col(i)) ? 1 : 0;
    const auto mn = static_cast<std::size_t>(prior.min_leaf);
    if (left < mn || rows.size() - left < mn) return std::nullopt;
    const LeafLag& from = tree.node(leaf).lag;
    LeafLag l = new_leaf_lag(from, ctx, rng);
    LeafLag r = new_leaf_lag(from, ctx, rng);
    Proposal<ModifierTree> out{tree.grown(leaf, *rule, std::move(l), std::move(r)), kind};
    const double p_rev = move_probability(out.tree, MoveKind::prune, ctx.weights);
    out.log_proposal_ratio = std::log(p_rev) - std::log(static_cast<double>(out.tree.prunable_nodes().size())) -
                             (std::log(p_fwd) - std::log(static_cast<double>(leaves.size())) + log_rule_prob(*rule, rows));
    auto new_members = out.tree.members(space.values());
    out.log_prior_ratio = modifier_subtree_prior(out.tree, leaf, prior, space, new_members) -
                          leaf_prior(tree, leaf, prior, space, rows);
    out.touched = leaf;
    return out;
  }

  if (kind == MoveKind::prune) {
    auto cand = tree.prunable_nodes();
    int idx = cand[rng.index(cand.size())];
    const auto& rows = members[static_cast<std::size_t>(idx)];
    const SplitRule rule = tree.node(idx).rule;
    LeafLag merged = new_leaf_lag(tree.node(tree.node(idx).left).lag, ctx, rng);
    Proposal<ModifierTree> out{tree.pruned(idx, std::move(merged)), kind};
    const double p_rev = move_probability(out.tree, MoveKind::grow, ctx.weights);
    out.log_proposal_ratio = std::log(p_rev) - std::log(static_cast<double>(out.tree.leaf_count())) +
                             log_rule_prob(rule, rows) -
                             (std::log(p_fwd) - std::log(static_cast<double>(cand.size())));
    out.log_prior_ratio =
        leaf_prior(out.tree, idx, prior, space, rows) - modifier_subtree_prior(tree, idx, prior, space, members);
    out.touched = idx;
    return out;
  }

  if (kind == MoveKind::change) {
    auto cand = tree.internal_nodes();
    int idx = cand[rng.index(cand.size())];
    const auto& rows = members[static_cast<std::size_t>(idx)];
    auto rule = space.draw_rule(draw_modifier(), rows, rng);
    if (!rule) return std::nullopt;
    Proposal<ModifierTree> out{tree.with_rule(idx, *rule), kind};
    auto new_members = out.tree.members(space.values());
    if (!leaves_meet_minimum(out.tree, idx, new_members, prior.min_leaf)) return std::nullopt;
    out.log_prior_ratio = modifier_subtree_prior(out.tree, idx, prior, space, new_members) -
                          modifier_subtree_prior(tree, idx, prior, space, members);
    if (!std::isfinite(out.log_prior_ratio)) return std::nullopt;
    out.log_proposal_ratio = log_rule_prob(tree.node(idx).rule, rows) - log_rule_prob(*rule, rows);
    out.touched = idx;
    return out;
  }

  auto pairs = tree.swappable_pairs();
  auto [parent, child] = pairs[rng.index(pairs.size())];
  SplitRule pr = tree.node(parent).rule, cr = tree.node(child).rule;
  Proposal<ModifierTree> out{tree.with_rule(parent, cr).with_rule(child, pr), kind};
  auto new_members = out.tree.members(space.values());
  if (!leaves_meet_minimum(out.tree, parent, new_members, prior.min_leaf)) return std::nullopt;
  out.log_prior_ratio = modifier_subtree_prior(out.tree, parent, prior, space, new_members) -
                        modifier_subtree_prior(tree, parent, prior, space, members);
  if (!std::isfinite(out.log_prior_ratio)) return std::nullopt;
  out.log_proposal_ratio = 0.0;
  out.touched = parent;
  return out;
}

std::optional<Proposal<ModifierTree>> propose_move(const ModifierTree& tree, MoveKind kind,
                                                   const ModifierMoveContext& ctx, Rng& rng) {
  return propose_move(tree, kind, ctx, tree.members(ctx.space->values()), rng);
}

std::vector<double> update_rule_weights(std::span<const double> counts, double xi, Rng& rng) {
  const std::size_t q = counts.size();
  std::vector<double> w(q);
  if (q == 0) return w;
  if (xi <= 0) xi = static_cast<double>(q);
  const double a = xi / static_cast<double>(q);
  double total = 0;
  for (std::size_t j = 0; j < q; ++j) {
    w[j] = rng.gamma(counts[j] + a, 1.0);
    total += w[j];
  }
  if (!(total > 0)) {
    // Every gamma underflowed (tiny shapes); fall back to a single category.
    std::fill(w.begin(), w.end(), 0.0);
    w[rng.index(q)] = 1.0;
    total = 1.0;
  }
  for (double& x : w) x = std::max(x / total, std::numeric_limits<double>::min());
  double s = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& x : w) x /= s;
  return w;
}

}  // namespace hdlm
