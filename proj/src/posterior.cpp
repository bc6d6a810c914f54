#include "hdlm/posterior.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "hdlm/error.hpp"
#include "hdlm/kernels.hpp"

namespace hdlm {

DlmEstimate summarize_curves(const Eigen::MatrixXd& samples, double level) {
  if (!(level > 0.0 && level < 1.0)) throw UsageError("credible level must lie in (0, 1)");
  DlmEstimate e;
  e.level = level;
  const double tail = (1.0 - level) / 2.0;
  kernels::column_quantiles(samples, tail, 1.0 - tail, e.mean, e.lower, e.upper);
  e.window.resize(static_cast<std::size_t>(e.mean.size()));
  for (Eigen::Index t = 0; t < e.mean.size(); ++t) e.window[t] = e.lower[t] > 0.0 || e.upper[t] < 0.0;
  return e;
}

CurveTable::CurveTable(const PosteriorDraws& draws) : draws_(&draws), lags_(draws.lags) {
  trees_.resize(draws.size());
  for (std::size_t d = 0; d < draws.size(); ++d) {
    const auto& trees = draws.states[d].trees;
    auto& per_tree = trees_[d];
    per_tree.resize(trees.size());
    for (std::size_t a = 0; a < trees.size(); ++a) {
      const auto& nodes = trees[a].nodes();
      per_tree[a].resize(nodes.size());
      for (std::size_t k = 0; k < nodes.size(); ++k) {
        if (!nodes[k].leaf()) continue;
        auto theta = nodes[k].lag.theta();
        per_tree[a][k] = Eigen::Map<const Eigen::VectorXd>(theta.data(), static_cast<Eigen::Index>(theta.size()));
      }
    }
  }
}

void CurveTable::curve(std::size_t d, std::span<const double> row, Eigen::Ref<Eigen::VectorXd> out) const {
  out.setZero();
  const auto& trees = draws_->states[d].trees;
  for (std::size_t a = 0; a < trees.size(); ++a) {
    const auto& leaf = trees_[d][a][static_cast<std::size_t>(trees[a].route(row))];
    if (leaf.size() == out.size()) out += leaf;
  }
}

Eigen::MatrixXd CurveTable::samples(std::span<const double> row) const {
  Eigen::MatrixXd s(static_cast<Eigen::Index>(draws()), lags_);
  Eigen::VectorXd c(lags_);
  for (std::size_t d = 0; d < draws(); ++d) {
    curve(d, row, c);
    s.row(static_cast<Eigen::Index>(d)) = c.transpose();
  }
  return s;
}

Eigen::MatrixXd theta_draws(const PosteriorDraws& draws, std::span<const double> row) {
  Eigen::MatrixXd s(static_cast<Eigen::Index>(draws.size()), draws.lags);
  for (std::size_t d = 0; d < draws.size(); ++d)
    s.row(static_cast<Eigen::Index>(d)) = ensemble_curve(draws.states[d], row, draws.lags).transpose();
  return s;
}

DlmEstimate theta_for(const PosteriorDraws& draws, std::span<const double> row, double level) {
  return summarize_curves(theta_draws(draws, row), level);
}

std::vector<DlmEstimate> individual_estimates(const PosteriorDraws& draws, const Eigen::MatrixXd& m, double level) {
  CurveTable table(draws);
  const Eigen::Index n = m.rows();
  std::vector<DlmEstimate> out(static_cast<std::size_t>(n));
#pragma omp parallel
  {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
#pragma omp for schedule(dynamic, 16)
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] = m(i, j);
      out[static_cast<std::size_t>(i)] = summarize_curves(table.samples(row), level);
    }
  }
  return out;
}

IntervalEstimate cumulative_effect(const PosteriorDraws& draws, std::span<const double> row, double dx,
                                   double level) {
  if (!std::isfinite(dx)) throw UsageError("exposure increment must be finite");
  Eigen::MatrixXd s = theta_draws(draws, row);
  Eigen::MatrixXd total = dx * s.rowwise().sum();
  DlmEstimate e = summarize_curves(total, level);
  return {e.mean[0], e.lower[0], e.upper[0]};
}

PipTable pip(const PosteriorDraws& draws) {
  if (draws.size() == 0) throw UsageError("no posterior draws");
  const std::size_t q = draws.schema.size();
  PipTable t;
  t.single.assign(q, 0.0);
  t.interaction = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(q));
  t.split_values.resize(q);
  std::vector<char> used(q);
  Eigen::MatrixXi pair(static_cast<Eigen::Index>(q), static_cast<Eigen::Index>(q));
  for (const auto& s : draws.states) {
    std::fill(used.begin(), used.end(), 0);
    pair.setZero();
    for (const auto& tree : s.trees) {
      const auto& nodes = tree.nodes();
      for (const auto& node : nodes) {
        if (node.leaf()) continue;
        const int j = node.rule.modifier;
        used[static_cast<std::size_t>(j)] = 1;
        if (draws.schema[static_cast<std::size_t>(j)].kind == ModifierKind::continuous)
          t.split_values[static_cast<std::size_t>(j)].push_back(node.rule.threshold);
        if (node.parent >= 0) {
          const int k = nodes[static_cast<std::size_t>(node.parent)].rule.modifier;
          if (k != j) pair(j, k) = pair(k, j) = 1;
        }
      }
    }
    for (std::size_t j = 0; j < q; ++j) t.single[j] += used[j];
    t.interaction += pair.cast<double>();
  }
  const double D = static_cast<double>(draws.size());
  for (auto& v : t.single) v /= D;
  t.interaction /= D;
  return t;
}

DlmEstimate subgroup_curve(const PosteriorDraws& draws, const RowPredicate& member, const Eigen::MatrixXd& m,
                           double level) {
  CurveTable table(draws);
  std::vector<std::vector<double>> rows;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] = m(i, j);
    if (member(row)) rows.push_back(std::move(row));
  }
  if (rows.empty()) throw UsageError("empty subgroup: no row matches the predicate");
  const Eigen::Index D = static_cast<Eigen::Index>(table.draws());
  Eigen::MatrixXd avg = Eigen::MatrixXd::Zero(D, draws.lags);
#pragma omp parallel
  {
    Eigen::MatrixXd local = Eigen::MatrixXd::Zero(D, draws.lags);
    Eigen::VectorXd c(draws.lags);
#pragma omp for schedule(static)
    for (Eigen::Index d = 0; d < D; ++d) {
      for (const auto& row : rows) {
        table.curve(static_cast<std::size_t>(d), row, c);
        local.row(d) += c.transpose();
      }
    }
    // each draw row is filled by exactly one thread, so the sum is exact
#pragma omp critical
    avg += local;
  }
  avg /= static_cast<double>(rows.size());
  return summarize_curves(avg, level);
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

}  // namespace

RowPredicate parse_predicate(const std::string& text, const ModifierSchema& schema) {
  struct Clause {
    int j;
    std::string op;
    double value;
  };
  std::vector<Clause> clauses;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, '&')) {
    part = trim(part);
    if (part.empty()) throw UsageError("empty clause in predicate '" + text + "'");
    const auto at = part.find_first_of("<>=!");
    if (at == std::string::npos) throw UsageError("no comparison in '" + part + "'");
    std::string op = part.substr(at, 1);
    if (at + 1 < part.size() && part[at + 1] == '=') op += '=';
    if (op == "=" || op == "!") throw UsageError("bad operator in '" + part + "'");
    const std::string name = trim(part.substr(0, at));
    const std::string rhs = trim(part.substr(at + op.size()));
    const int j = schema.index_of(name);
    if (j < 0) throw UsageError("unknown modifier '" + name + "' in predicate");
    const auto kind = schema[static_cast<std::size_t>(j)].kind;
    if ((kind == ModifierKind::nominal || kind == ModifierKind::binary) && op != "==" && op != "!=")
      throw UsageError("modifier '" + name + "' is " + to_string(kind) + "; use == or !=");
    double value;
    if (!schema.encode(static_cast<std::size_t>(j), rhs, value))
      throw UsageError("value '" + rhs + "' is not valid for modifier '" + name + "'");
    clauses.push_back({j, op, value});
  }
  if (clauses.empty()) throw UsageError("empty predicate");
  return [clauses](std::span<const double> row) {
    for (const auto& c : clauses) {
      const double v = row[static_cast<std::size_t>(c.j)];
      bool ok = c.op == "<"    ? v < c.value
                : c.op == "<=" ? v <= c.value
                : c.op == ">"  ? v > c.value
                : c.op == ">=" ? v >= c.value
                : c.op == "==" ? v == c.value
                               : v != c.value;
      if (!ok) return false;
    }
    return true;
  };
}

std::vector<double> representative_row(const Eigen::MatrixXd& m, const RowPredicate& member,
                                       const ModifierSchema& schema) {
  std::vector<int> rows;
  std::vector<double> row(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] = m(i, j);
    if (member(row)) rows.push_back(static_cast<int>(i));
  }
  if (rows.empty()) throw UsageError("empty subgroup: no row matches the predicate");
  std::vector<double> rep(static_cast<std::size_t>(m.cols()));
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    std::vector<double> v;
    for (int i : rows) v.push_back(m(i, j));
    std::sort(v.begin(), v.end());
    const auto kind = schema[static_cast<std::size_t>(j)].kind;
    if (kind == ModifierKind::continuous || kind == ModifierKind::ordinal) {
      double med = kernels::sorted_quantile(v, 0.5);
      // ordinal codes are ranks: round to an actual level
      rep[static_cast<std::size_t>(j)] = kind == ModifierKind::ordinal ? std::floor(med) : med;
    } else {
      std::map<double, int> freq;
      for (double x : v) ++freq[x];
      auto best = std::max_element(freq.begin(), freq.end(), [](auto& a, auto& b) { return a.second < b.second; });
      rep[static_cast<std::size_t>(j)] = best->first;
    }
  }
  return rep;
}

DlmEstimate representative_curve(const PosteriorDraws& draws, const RowPredicate& member, const Eigen::MatrixXd& m,
                                 double level) {
  return theta_for(draws, representative_row(m, member, draws.schema), level);
}

WindowMetrics window_metrics(const DlmEstimate& e, std::span<const double> truth) {
  const Eigen::Index T = e.lags();
  if (static_cast<Eigen::Index>(truth.size()) != T)
    throw UsageError("grid mismatch: estimate has " + std::to_string(T) + " lags, truth has " +
                     std::to_string(truth.size()));
  WindowMetrics w;
  double sse = 0.0;
  int covered = 0, nonzero = 0, zero = 0, tp = 0, fp = 0;
  for (Eigen::Index t = 0; t < T; ++t) {
    const double th = truth[static_cast<std::size_t>(t)];
    sse += (th - e.mean[t]) * (th - e.mean[t]);
    covered += (e.lower[t] <= th && th <= e.upper[t]);
    if (th != 0.0) {
      ++nonzero;
      tp += e.window[t];
    } else {
      ++zero;
      fp += e.window[t];
    }
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();
  w.rmse = std::sqrt(sse / static_cast<double>(T));
  w.coverage = static_cast<double>(covered) / static_cast<double>(T);
  w.tp = nonzero ? static_cast<double>(tp) / nonzero : nan;
  w.fp = zero ? static_cast<double>(fp) / zero : nan;
  return w;
}

Eigen::VectorXd predict(const PosteriorDraws& draws, const Dataset& data) {
  if (draws.size() == 0) throw UsageError("no posterior draws");
  if (data.lags() != draws.lags)
    throw DataError("new data has " + std::to_string(data.lags()) + " lags, draws have " + std::to_string(draws.lags));
  if (data.modifiers() != static_cast<Eigen::Index>(draws.schema.size()))
    throw DataError("new data modifiers do not match the fitted schema");
  if (data.z.cols() != static_cast<Eigen::Index>(draws.fixed_names.size()))
    throw DataError("new data fixed-effect columns do not match the fitted design");
  const Eigen::Index D = static_cast<Eigen::Index>(draws.size());
  Eigen::VectorXd fit_sum = Eigen::VectorXd::Zero(data.n());
  Eigen::VectorXd gamma_sum = Eigen::VectorXd::Zero(data.z.cols());
  for (Eigen::Index d = 0; d < D; ++d) {
    fit_sum += ensemble_fit(draws.states[static_cast<std::size_t>(d)], data.x, data.m);
    if (static_cast<std::size_t>(d) < draws.gamma.size()) gamma_sum += draws.gamma[static_cast<std::size_t>(d)];
  }
  return fit_sum / static_cast<double>(D) + data.z * (gamma_sum / static_cast<double>(D));
}

}  // namespace hdlm
