#pragma once

#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "hdlm/samplers.hpp"

namespace hdlm {

/// Pointwise posterior summary of a lag curve.
struct DlmEstimate {
  Eigen::VectorXd mean;
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;
  /// Credible interval excludes zero.
  std::vector<bool> window;
  double level = 0.95;

  Eigen::Index lags() const { return mean.size(); }
};

/// Equal-tail summary of a draws x lags sample.
DlmEstimate summarize_curves(const Eigen::MatrixXd& samples, double level = 0.95);

/// Per-draw theta(m) (draws x lags) for one modifier row.
Eigen::MatrixXd theta_draws(const PosteriorDraws& draws, std::span<const double> row);
DlmEstimate theta_for(const PosteriorDraws& draws, std::span<const double> row, double level = 0.95);

/// Leaf curves of every tree in every draw, precomputed so that many rows
/// can be routed cheaply. Immutable after construction.
class CurveTable {
 public:
  explicit CurveTable(const PosteriorDraws& draws);

  std::size_t draws() const { return trees_.size(); }
  int lags() const { return lags_; }
  /// theta(m) of draw d.
  void curve(std::size_t d, std::span<const double> row, Eigen::Ref<Eigen::VectorXd> out) const;
  Eigen::MatrixXd samples(std::span<const double> row) const;

 private:
  const PosteriorDraws* draws_;
  int lags_;
  // trees_[d][a][node] is the leaf curve of that node (empty for internal nodes)
  std::vector<std::vector<std::vector<Eigen::VectorXd>>> trees_;
};

/// theta_for over every row of `m` (rows are modifier rows), in parallel.
std::vector<DlmEstimate> individual_estimates(const PosteriorDraws& draws, const Eigen::MatrixXd& m,
                                              double level = 0.95);

struct IntervalEstimate {
  double mean = 0.0;
  double lower = 0.0;
  double upper = 0.0;
};

/// dx * sum_t theta_t(m) per draw, summarised with an equal-tail interval.
IntervalEstimate cumulative_effect(const PosteriorDraws& draws, std::span<const double> row, double dx,
                                   double level = 0.95);

struct PipTable {
  /// Fraction of draws in which modifier j is used by at least one rule.
  std::vector<double> single;
  /// Symmetric q x q: fraction of draws with j and k as parent and child
  /// rules in the same tree. The diagonal is unused (0).
  Eigen::MatrixXd interaction;
  /// Thresholds of every rule on a continuous modifier, over all draws.
  std::vector<std::vector<double>> split_values;
};

PipTable pip(const PosteriorDraws& draws);

using RowPredicate = std::function<bool(std::span<const double>)>;

/// Posterior of the average curve over the rows of `m` matching `member`.
/// Throws UsageError for an empty subgroup.
DlmEstimate subgroup_curve(const PosteriorDraws& draws, const RowPredicate& member, const Eigen::MatrixXd& m,
                           double level = 0.95);

/// Conjunction of comparisons joined by '&', e.g. "bmi < 22.8 & race == b".
/// Operators: <, <=, >, >=, ==, !=. Categorical values are given by label
/// (ordinal comparisons use category order); nominal and binary modifiers
/// accept only == and !=. Throws UsageError.
RowPredicate parse_predicate(const std::string& text, const ModifierSchema& schema);

/// Median of each continuous or ordinal modifier and the most frequent level
/// of each nominal or binary modifier over the rows matching `member`.
std::vector<double> representative_row(const Eigen::MatrixXd& m, const RowPredicate& member,
                                       const ModifierSchema& schema);
/// theta_for at representative_row: the alternative subgroup summary.
DlmEstimate representative_curve(const PosteriorDraws& draws, const RowPredicate& member, const Eigen::MatrixXd& m,
                                 double level = 0.95);

/// Individual-level accuracy of an estimate against the true curve.
struct WindowMetrics {
  double rmse = 0.0;
  double coverage = 0.0;
  /// Share of truly nonzero lags flagged as windows; NaN if there are none.
  double tp = 0.0;
  /// Share of truly zero lags flagged as windows; NaN if there are none.
  double fp = 0.0;
};

/// Throws UsageError when the truth and the estimate have different lengths.
WindowMetrics window_metrics(const DlmEstimate& estimate, std::span<const double> truth);

/// Posterior mean of Z gamma + sum of tree fits for new rows. `data` must be
/// restricted to the modifiers the draws were fitted with.
Eigen::VectorXd predict(const PosteriorDraws& draws, const Dataset& data);

}  // namespace hdlm
