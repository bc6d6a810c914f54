#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hdlm/data.hpp"
#include "hdlm/rng.hpp"

namespace hdlm {

/// Branching-process prior on tree shape plus the modifier-selection weights.
struct TreePriorParams {
  double alpha = 0.95;
  double beta = 2.0;
  /// Modifier selection probabilities (modifier trees only). Empty = uniform.
  std::vector<double> weights;
  /// Dirichlet concentration for `weights`; 0 means "number of modifiers".
  double xi = 0.0;
  /// Minimum observations per modifier-tree leaf.
  int min_leaf = 20;

  /// Throws UsageError when alpha/beta/weights are out of range.
  void check(std::size_t modifiers) const;
  double weight(std::size_t j, std::size_t modifiers) const;
};

/// alpha * (1 + depth)^-beta.
double split_probability(int depth, const TreePriorParams& params);

enum class MoveKind { grow, prune, change, swap };
const char* to_string(MoveKind kind);

/// Relative frequencies of the structural moves before renormalising over
/// the moves available at the current tree.
struct MoveWeights {
  double grow = 0.3;
  double prune = 0.3;
  double change = 0.3;
  double swap = 0.1;

  static MoveWeights dlm() { return {1.0 / 3, 1.0 / 3, 1.0 / 3, 0.0}; }
  double of(MoveKind k) const;
};

// ---------------------------------------------------------------------------
// DLM trees

/// Binary tree over lag time 1..T. Internal nodes split "left iff t < split";
/// leaves hold a contiguous segment and its effect. Nodes are kept in
/// pre-order, so leaves appear in time order.
class DlmTree {
 public:
  struct Node {
    int parent = -1;
    int left = -1;
    int right = -1;
    int depth = 0;
    int split = 0;  ///< internal: t1 in begin+1..end
    int begin = 1;  ///< first lag covered (1-based, inclusive)
    int end = 1;    ///< last lag covered (inclusive)
    double effect = 0.0;
    bool leaf() const { return left < 0; }
    bool splittable() const { return end > begin; }
  };

  struct Segment {
    int begin;
    int end;
    double effect;
    friend bool operator==(const Segment&, const Segment&) = default;
  };

  DlmTree() = default;
  explicit DlmTree(int lags, double effect = 0.0);

  int lags() const { return lags_; }
  bool empty() const { return nodes_.empty(); }
  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }

  std::vector<int> leaves() const;
  int leaf_count() const;
  std::vector<int> internal_nodes() const;
  /// Internal nodes whose children are both leaves.
  std::vector<int> prunable_nodes() const;
  std::vector<int> splittable_leaves() const;

  /// Segments sorted by time; they partition 1..T.
  std::vector<Segment> segments() const;
  /// theta_t for t = 1..T (index t-1).
  std::vector<double> curve() const;
  void set_effects(std::span<const double> effects);
  std::vector<double> effects() const;

  /// New trees; nullopt if the result would leave a node without time points.
  std::optional<DlmTree> grown(int leaf, int split) const;
  DlmTree pruned(int node) const;
  std::optional<DlmTree> changed(int node, int split) const;

  bool same_structure(const DlmTree& other) const;
  friend bool operator==(const DlmTree& a, const DlmTree& b);

  /// Builds a tree from pre-order (internal split or leaf) records.
  /// `splits[k]` is the split of the k-th node (0 for a leaf); `effects`
  /// lists leaf effects in time order. Throws std::invalid_argument.
  static DlmTree from_preorder(int lags, std::span<const int> splits, std::span<const double> effects);
  /// Same, returning nullopt instead of throwing.
  static std::optional<DlmTree> try_preorder(int lags, std::span<const int> splits,
                                             std::span<const double> effects);

 private:
  int lags_ = 0;
  std::vector<Node> nodes_;
};

/// Draw a structure from the DLM-tree prior (effects zero).
DlmTree draw_dlm_tree(int lags, const TreePriorParams& params, Rng& rng);

/// Sum over nodes of log split / no-split probabilities and log rule
/// probabilities. Nodes covering a single lag cannot split and contribute 0.
double log_tree_prior(const DlmTree& tree, const TreePriorParams& params);

// ---------------------------------------------------------------------------
// Modifier trees

enum class RuleKind { threshold, subset, binary };

/// threshold: left iff value < threshold (continuous, ordinal rank).
/// subset: left iff category bit is set in `left_set` (nominal).
/// binary: left iff value == 0.
struct SplitRule {
  int modifier = -1;
  RuleKind kind = RuleKind::threshold;
  double threshold = 0.0;
  std::uint64_t left_set = 0;

  bool goes_left(double value) const;
  friend bool operator==(const SplitRule&, const SplitRule&) = default;
};

/// Lag function attached to a modifier-tree leaf: a DLM tree (nested and
/// shared variants) or a per-lag effect vector (Gaussian-process variants).
struct LeafLag {
  DlmTree dlm;
  std::vector<double> curve;

  bool is_curve() const { return !curve.empty(); }
  int cells() const { return is_curve() ? static_cast<int>(curve.size()) : dlm.leaf_count(); }
  std::vector<double> theta() const { return is_curve() ? curve : dlm.curve(); }
  friend bool operator==(const LeafLag&, const LeafLag&) = default;
};

class ModifierTree {
 public:
  struct Node {
    int parent = -1;
    int left = -1;
    int right = -1;
    int depth = 0;
    SplitRule rule;
    LeafLag lag;  ///< meaningful on leaves only
    bool leaf() const { return left < 0; }
  };

  ModifierTree() = default;
  explicit ModifierTree(LeafLag root);

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(int i) const { return nodes_[static_cast<std::size_t>(i)]; }
  Node& node(int i) { return nodes_[static_cast<std::size_t>(i)]; }

  /// Leaf node indices in pre-order; position in this list is the subgroup id.
  std::vector<int> leaves() const;
  int leaf_count() const;
  std::vector<int> internal_nodes() const;
  std::vector<int> prunable_nodes() const;
  /// (parent, child) pairs where both are internal.
  std::vector<std::pair<int, int>> swappable_pairs() const;

  /// Leaf node index reached by a modifier row.
  int route(std::span<const double> row) const;
  /// Leaf node index for every row of `m`.
  std::vector<int> route_all(const Eigen::MatrixXd& m) const;
  /// Rows reaching each node (internal nodes included), for every node.
  std::vector<std::vector<int>> members(const Eigen::MatrixXd& m) const;

  /// Modifiers used by any rule, as a count per modifier.
  void count_rules(std::vector<double>& counts) const;

  ModifierTree grown(int leaf, const SplitRule& rule, LeafLag left, LeafLag right) const;
  ModifierTree pruned(int node, LeafLag merged) const;
  ModifierTree with_rule(int node, const SplitRule& rule) const;

  bool same_structure(const ModifierTree& other) const;
  friend bool operator==(const ModifierTree& a, const ModifierTree& b);

  /// Pre-order record used to rebuild trees; `rule` ignored on leaves.
  struct Record {
    bool leaf = true;
    SplitRule rule;
    LeafLag lag;
  };
  static ModifierTree from_preorder(std::vector<Record> records);
  std::vector<Record> preorder() const;

 private:
  std::vector<Node> nodes_;
};

/// Subgroup id (leaf position in pre-order) for one modifier row.
int assign_subgroup(const ModifierTree& tree, std::span<const double> row);

/// Candidate-rule bookkeeping for one modifier matrix. Candidate thresholds
/// at a node are the distinct values present there, excluding the smallest;
/// nominal candidates are non-empty proper subsets of the categories present.
/// Holds scratch space: one instance per chain.
class RuleSpace {
 public:
  RuleSpace(const Eigen::MatrixXd& m, const ModifierSchema& schema);

  std::size_t modifiers() const { return kinds_.size(); }
  const Eigen::MatrixXd& values() const { return *m_; }

  /// Number of candidate rules on modifier j for the given rows.
  double candidate_count(int j, std::span<const int> rows) const;
  /// Whether `rule` is one of the candidates for the given rows.
  bool admissible(const SplitRule& rule, std::span<const int> rows) const;
  /// Uniform draw among candidates on modifier j; nullopt when there are none.
  std::optional<SplitRule> draw_rule(int j, std::span<const int> rows, Rng& rng) const;

 private:
  void present_ranks(int j, std::span<const int> rows, std::vector<int>& out) const;
  const Eigen::MatrixXd* m_;
  std::vector<ModifierKind> kinds_;
  std::vector<std::vector<double>> unique_;   // sorted distinct values per modifier
  std::vector<std::vector<int>> rank_;        // rank of each row's value
  mutable std::vector<std::uint32_t> stamp_;
  mutable std::uint32_t epoch_ = 0;
};

/// Modifier-tree prior: split probabilities plus, for each internal node,
/// log(w_j / candidate count of j at that node). Leaves contribute
/// log(1 - p_split). `node` restricts the sum to that subtree.
double log_tree_prior(const ModifierTree& tree, const TreePriorParams& params, const RuleSpace& space,
                      int node = 0);
double log_tree_prior(const ModifierTree& tree, const TreePriorParams& params, const RuleSpace& space,
                      const std::vector<std::vector<int>>& members, int node = 0);

// ---------------------------------------------------------------------------
// Proposals

template <class Tree>
struct Proposal {
  Tree tree;
  MoveKind kind;
  /// log q(old | new) - log q(new | old), including the move-kind choice.
  double log_proposal_ratio = 0.0;
  /// log p(new) - log p(old) for the tree structure.
  double log_prior_ratio = 0.0;
  /// Node of the new tree at which the move acted.
  int touched = 0;
};

/// Moves with positive weight that apply to this tree.
bool move_available(const DlmTree& tree, MoveKind kind);
bool move_available(const ModifierTree& tree, MoveKind kind);
double move_probability(const DlmTree& tree, MoveKind kind, const MoveWeights& w);
double move_probability(const ModifierTree& tree, MoveKind kind, const MoveWeights& w);
std::optional<MoveKind> choose_move(const DlmTree& tree, const MoveWeights& w, Rng& rng);
std::optional<MoveKind> choose_move(const ModifierTree& tree, const MoveWeights& w, Rng& rng);

/// Grow, prune or change on a DLM tree. Swap is not defined for DLM trees
/// and throws std::invalid_argument. nullopt means no valid move.
std::optional<Proposal<DlmTree>> propose_move(const DlmTree& tree, MoveKind kind, const TreePriorParams& params,
                                              const MoveWeights& weights, Rng& rng);

/// How leaves created by grow/prune get their lag function.
enum class LeafInit {
  fresh_dlm,   ///< draw a new DLM tree from its prior (nested)
  copy_dlm,    ///< keep the (shared) DLM structure
  curve        ///< per-lag effect vector (Gaussian process)
};

struct ModifierMoveContext {
  const RuleSpace* space = nullptr;
  const TreePriorParams* prior = nullptr;
  MoveWeights weights;
  LeafInit init = LeafInit::fresh_dlm;
  const TreePriorParams* dlm_prior = nullptr;  ///< for LeafInit::fresh_dlm
};

/// Grow, prune, change or swap on a modifier tree. The returned prior ratio
/// covers the modifier structure only: for LeafInit::fresh_dlm the new DLM
/// trees are drawn from their prior, so their prior and proposal densities
/// cancel and are left out of both ratios.
std::optional<Proposal<ModifierTree>> propose_move(const ModifierTree& tree, MoveKind kind,
                                                   const ModifierMoveContext& ctx, Rng& rng);
std::optional<Proposal<ModifierTree>> propose_move(const ModifierTree& tree, MoveKind kind,
                                                   const ModifierMoveContext& ctx,
                                                   const std::vector<std::vector<int>>& members, Rng& rng);

/// Conjugate Dirichlet draw for modifier-selection weights:
/// w ~ Dirichlet(counts + xi / q).
std::vector<double> update_rule_weights(std::span<const double> counts, double xi, Rng& rng);

// ---------------------------------------------------------------------------
// Text serialization (pre-order, one node per line)
//
//   D I <split>                      DLM internal node
//   D L <begin> <end> <effect>       DLM leaf
//   M I <modifier> T <threshold>     modifier node, threshold rule
//   M I <modifier> S <hex mask>      modifier node, subset rule
//   M I <modifier> B                 modifier node, binary rule
//   M L D                            modifier leaf with a DLM tree (lines follow)
//   M L G <e_1> ... <e_T>            modifier leaf with a per-lag curve
//
// Numbers are written in shortest round-trip form, so read(write(t)) == t.

void write_tree(std::ostream& out, const DlmTree& tree);
void write_tree(std::ostream& out, const ModifierTree& tree);
DlmTree read_dlm_tree(std::istream& in, int lags);
ModifierTree read_modifier_tree(std::istream& in, int lags);

}  // namespace hdlm
