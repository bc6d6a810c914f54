#include "hdlm/simulation.hpp"

#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>
#include <algorithm>
#include <sstream>

#include "hdlm/csv.hpp"
#include "hdlm/error.hpp"
#include "hdlm/posterior.hpp"
#include "hdlm/rng.hpp"

namespace hdlm {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string num_or_na(double v) { return std::isfinite(v) ? format_number(v) : "NA"; }

double parse_or_nan(const std::string& s) {
  double v;
  if (s == "NA" || !parse_number(s, v)) return kNaN;
  return v;
}

/// Running mean that skips NaN.
struct Mean {
  double sum = 0.0;
  int count = 0;
  void add(double v) {
    if (std::isfinite(v)) {
      sum += v;
      ++count;
    }
  }
  double value() const { return count ? sum / count : kNaN; }
};

struct GroupMean {
  Mean rmse, coverage, tp, fp;
  void add(const GroupMetrics& g) {
    rmse.add(g.rmse);
    coverage.add(g.coverage);
    tp.add(g.tp);
    fp.add(g.fp);
  }
  GroupMetrics value() const { return {rmse.value(), coverage.value(), tp.value(), fp.value()}; }
};

const GroupMetrics kNoGroup{kNaN, kNaN, kNaN, kNaN};

}  // namespace

const char* to_string(Scenario s) {
  switch (s) {
    case Scenario::early_late: return "early-late";
    case Scenario::scaled: return "scaled";
    case Scenario::no_heterogeneity: return "no-heterogeneity";
  }
  return "?";
}

Scenario scenario_from(const std::string& text) {
  if (text == "1" || text == "early-late") return Scenario::early_late;
  if (text == "2" || text == "scaled") return Scenario::scaled;
  if (text == "3" || text == "no-heterogeneity") return Scenario::no_heterogeneity;
  throw UsageError("unknown scenario '" + text + "' (expected 1, 2 or 3)");
}

Eigen::MatrixXd gen_covariates(Eigen::Index n, std::uint64_t seed) {
  if (n < 1) throw UsageError("covariate count n must be at least 1");
  Rng rng(seed);
  Eigen::MatrixXd z(n, kCovariates + 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    z(i, 0) = 1.0;
    z(i, 1) = rng.normal();
    z(i, 2) = rng.bernoulli(0.5) ? 1.0 : 0.0;
    z(i, 3) = rng.uniform();
    for (int p = 4; p <= 8; ++p) z(i, p) = rng.normal();
    for (int p = 9; p <= 13; ++p) z(i, p) = rng.bernoulli(0.5) ? 1.0 : 0.0;
  }
  return z;
}

ModifierSchema covariate_schema() {
  std::vector<ModifierSpec> specs;
  for (int p = 1; p <= kCovariates; ++p) {
    ModifierSpec s;
    s.name = "z" + std::to_string(p);
    const bool binary = p == 2 || p >= 9;
    s.kind = binary ? ModifierKind::binary : ModifierKind::continuous;
    if (binary) s.categories = {"0", "1"};
    specs.push_back(s);
  }
  return ModifierSchema(specs);
}

std::vector<double> true_theta(Scenario scenario, std::span<const double> z, int lags, int start) {
  std::vector<double> th(static_cast<std::size_t>(lags), 0.0);
  auto window = [&](int a, int b, double v) {
    for (int t = a; t <= b && t <= lags; ++t) th[static_cast<std::size_t>(t - 1)] = v;
  };
  switch (scenario) {
    case Scenario::early_late:
      if (z[1] > 0.0) {
        if (z[2] == 1.0)
          window(11, 18, 1.0);
        else
          window(17, 26, 1.0);
      }
      break;
    case Scenario::scaled:
      if (z[1] > 0.0) window(11, 18, z[3]);
      break;
    case Scenario::no_heterogeneity:
      if (start < 1 || start > lags - 9)
        throw UsageError("scenario-3 onset must lie in 1.." + std::to_string(lags - 9));
      for (int t = 1; t <= lags; ++t)
        th[static_cast<std::size_t>(t - 1)] = std::max(0.0, double(t - start) * double(start - t + 9));
      break;
  }
  return th;
}

SimulatedData simulate_outcome(const Eigen::MatrixXd& covariates, const RowMatrix& exposures, Scenario scenario,
                               double sigma2, std::uint64_t seed, int start, const TruthBundle* reuse) {
  const Eigen::Index n = covariates.rows();
  const int T = static_cast<int>(exposures.cols());
  if (exposures.rows() != n) throw UsageError("covariate and exposure row counts differ");
  if (!(sigma2 >= 0.0)) throw UsageError("sigma2 must be non-negative");
  Rng rng(seed);
  SimulatedData out;
  TruthBundle& tb = out.truth;
  if (scenario == Scenario::no_heterogeneity) tb.start = reuse ? reuse->start : start;
  tb.shape.resize(n, T);
  Eigen::VectorXd raw(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    std::vector<double> zr(static_cast<std::size_t>(covariates.cols()));
    for (Eigen::Index j = 0; j < covariates.cols(); ++j) zr[static_cast<std::size_t>(j)] = covariates(i, j);
    auto th = true_theta(scenario, zr, T, tb.start);
    for (int t = 0; t < T; ++t) tb.shape(i, t) = th[static_cast<std::size_t>(t)];
    raw[i] = exposures.row(i).dot(tb.shape.row(i));
  }
  if (reuse) {
    tb.r = reuse->r;
    tb.gamma = reuse->gamma;
  } else {
    tb.gamma.resize(covariates.cols());
    for (Eigen::Index k = 0; k < tb.gamma.size(); ++k) tb.gamma[k] = rng.normal();
    double var = 0.0;
    if (n > 1) {
      const double mean = raw.mean();
      var = (raw.array() - mean).square().sum() / static_cast<double>(n - 1);
    }
    tb.r = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
  }
  tb.signal = tb.r * raw;

  Dataset& d = out.data;
  const double sd = std::sqrt(sigma2);
  d.y = tb.signal + covariates * tb.gamma;
  for (Eigen::Index i = 0; i < n; ++i) d.y[i] += sd * rng.normal();
  d.x = exposures;
  d.z = covariates;
  d.m = covariates.rightCols(kCovariates);
  d.schema = covariate_schema();
  d.columns.outcome = "y";
  for (int t = 1; t <= T; ++t) d.columns.exposures.push_back("x" + std::to_string(t));
  for (Eigen::Index k = 0; k < covariates.cols(); ++k) d.columns.fixed.push_back("z" + std::to_string(k));
  return out;
}

void ScenarioSpec::check() const {
  if (n < 1) throw UsageError("n must be at least 1");
  if (test_size < 1) throw UsageError("test size must be at least 1");
  if (!(sigma2 > 0.0)) throw UsageError("sigma2 must be positive");
  if (lags < 2) throw UsageError("lags must be at least 2");
  if (scenario == Scenario::no_heterogeneity && lags < 10) throw UsageError("scenario 3 needs at least 10 lags");
  if (scenario != Scenario::no_heterogeneity && lags < 26) throw UsageError("scenarios 1 and 2 need at least 26 lags");
}

namespace {

RowMatrix exposures_for(const ScenarioSpec& spec, Eigen::Index n, std::uint64_t seed) {
  RowMatrix x = generate_exposures(n, spec.lags, spec.exposure, seed);
  if (spec.standardize) x = ((x.array() - spec.exposure.mean) / spec.exposure.sd).matrix();
  return x;
}

}  // namespace

Replicate simulate_replicate(const ScenarioSpec& spec) {
  spec.check();
  int start = 1;
  if (spec.scenario == Scenario::no_heterogeneity) {
    Rng rng(derive_seed(spec.seed, 7));
    start = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(spec.lags - 9)));
  }
  Replicate rep;
  {
    auto z = gen_covariates(spec.n, derive_seed(spec.seed, 1));
    auto x = exposures_for(spec, spec.n, derive_seed(spec.seed, 2));
    rep.train = simulate_outcome(z, x, spec.scenario, spec.sigma2, derive_seed(spec.seed, 3), start);
  }
  {
    auto z = gen_covariates(spec.test_size, derive_seed(spec.seed, 4));
    auto x = exposures_for(spec, spec.test_size, derive_seed(spec.seed, 5));
    rep.test = simulate_outcome(z, x, spec.scenario, spec.sigma2, derive_seed(spec.seed, 6), start, &rep.train.truth);
  }
  return rep;
}

std::vector<int> active_modifiers(Scenario s) {
  switch (s) {
    case Scenario::early_late: return {0, 1};
    case Scenario::scaled: return {0, 2};
    case Scenario::no_heterogeneity: return {};
  }
  return {};
}

void StudyConfig::check() const {
  spec.check();
  if (replicates < 1) throw UsageError("replicates must be at least 1");
  if (models.empty()) throw UsageError("no models listed");
  if (!(level > 0.0 && level < 1.0)) throw UsageError("credible level must lie in (0, 1)");
  fit.check();
}

ReplicateResult evaluate_fit(const PosteriorDraws& draws, const Replicate& rep, Scenario scenario, double level) {
  ReplicateResult res;
  res.model = draws.model;
  const Dataset& train = rep.train.data;
  const Eigen::MatrixXd m = train.m.leftCols(static_cast<Eigen::Index>(draws.schema.size()));
  // The draws see the modifiers they were fitted with, in schema order; the
  // study always fits all of z1..z13 (or none).
  auto est = individual_estimates(draws, m, level);
  GroupMean eff, none, all;
  for (Eigen::Index i = 0; i < train.n(); ++i) {
    Eigen::VectorXd truth = rep.train.truth.effect(i);
    WindowMetrics w = window_metrics(est[static_cast<std::size_t>(i)], {truth.data(), static_cast<std::size_t>(truth.size())});
    GroupMetrics g{w.rmse, w.coverage, w.tp, w.fp};
    all.add(g);
    if (scenario != Scenario::no_heterogeneity) (train.z(i, 1) > 0.0 ? eff : none).add(g);
  }
  res.all = all.value();
  res.effect = scenario == Scenario::no_heterogeneity ? kNoGroup : eff.value();
  res.no_effect = scenario == Scenario::no_heterogeneity ? kNoGroup : none.value();

  const Dataset& test = rep.test.data;
  std::vector<int> keep(draws.schema.size());
  std::iota(keep.begin(), keep.end(), 0);
  Eigen::VectorXd yhat = predict(draws, test.with_modifiers(keep));
  res.mspe = (test.y - yhat).squaredNorm() / static_cast<double>(test.n());
  res.mspe_ratio = kNaN;

  res.pip_active_min = res.pip_inactive_mean = res.interaction_active = res.interaction_inactive_mean = kNaN;
  if (!draws.schema.empty()) {
    PipTable t = pip(draws);
    res.pip = t.single;
    const auto active = active_modifiers(scenario);
    const int q = static_cast<int>(t.single.size());
    auto is_active = [&](int j) { return std::find(active.begin(), active.end(), j) != active.end(); };
    Mean inactive, inter_other;
    double amin = kNaN;
    for (int j = 0; j < q; ++j) {
      if (is_active(j))
        amin = std::isnan(amin) ? t.single[static_cast<std::size_t>(j)] : std::min(amin, t.single[static_cast<std::size_t>(j)]);
      else
        inactive.add(t.single[static_cast<std::size_t>(j)]);
    }
    for (int j = 0; j < q; ++j)
      for (int k = j + 1; k < q; ++k) {
        const bool active_pair = active.size() == 2 && j == active[0] && k == active[1];
        if (active_pair)
          res.interaction_active = t.interaction(j, k);
        else
          inter_other.add(t.interaction(j, k));
      }
    res.pip_active_min = amin;
    res.pip_inactive_mean = inactive.value();
    res.interaction_inactive_mean = inter_other.value();
  }
  return res;
}

StudyReport run_study(const StudyConfig& config_in) {
  StudyConfig config = config_in;
  config.check();
  if (std::find(config.models.begin(), config.models.end(), ModelKind::tdlm) == config.models.end())
    config.models.insert(config.models.begin(), ModelKind::tdlm);
  StudyReport report;
  report.config = config;
  const std::size_t M = config.models.size();
  report.rows.resize(static_cast<std::size_t>(config.replicates) * M);

  std::vector<int> all_modifiers(kCovariates);
  for (int j = 0; j < kCovariates; ++j) all_modifiers[static_cast<std::size_t>(j)] = j;

  for (int r = 0; r < config.replicates; ++r) {
    ScenarioSpec spec = config.spec;
    spec.seed = derive_seed(config.spec.seed, static_cast<std::uint64_t>(r));
    Replicate rep = simulate_replicate(spec);
    double baseline = kNaN;
    for (std::size_t k = 0; k < M; ++k) {
      ReplicateResult& row = report.rows[static_cast<std::size_t>(r) * M + k];
      const ModelKind model = config.models[k];
      FitConfig fc = config.fit;
      fc.model = model;
      fc.seed = derive_seed(spec.seed, 100 + static_cast<std::uint64_t>(model));
      try {
        PosteriorDraws draws = fit(rep.train.data, all_modifiers, fc);
        row = evaluate_fit(draws, rep, config.spec.scenario, config.level);
      } catch (const std::exception& e) {
        row = ReplicateResult{};
        row.model = model;
        row.status = std::string("error: ") + e.what();
        row.effect = row.no_effect = row.all = kNoGroup;
        row.mspe = row.mspe_ratio = kNaN;
        row.pip_active_min = row.pip_inactive_mean = row.interaction_active = row.interaction_inactive_mean = kNaN;
      }
      row.replicate = r;
      row.seed = spec.seed;
      if (model == ModelKind::tdlm && row.status == "ok") baseline = row.mspe;
      if (config.verbose)
        std::cerr << "replicate " << r + 1 << "/" << config.replicates << " " << to_string(model) << " "
                  << row.status << " rmse(all)=" << row.all.rmse << "\n";
    }
    for (std::size_t k = 0; k < M; ++k) {
      auto& row = report.rows[static_cast<std::size_t>(r) * M + k];
      row.mspe_ratio = row.status == "ok" ? row.mspe / baseline : kNaN;
    }
  }
  return report;
}

std::vector<AggregateRow> aggregate_rows(const std::vector<ReplicateResult>& rows,
                                         const std::vector<ModelKind>& models) {
  std::vector<AggregateRow> out;
  for (ModelKind m : models) {
    GroupMean eff, none, all;
    Mean ratio, amin, inactive, inter, inter_other;
    int done = 0;
    for (const auto& r : rows) {
      if (r.model != m || r.status != "ok") continue;
      ++done;
      eff.add(r.effect);
      none.add(r.no_effect);
      all.add(r.all);
      ratio.add(r.mspe_ratio);
      amin.add(r.pip_active_min);
      inactive.add(r.pip_inactive_mean);
      inter.add(r.interaction_active);
      inter_other.add(r.interaction_inactive_mean);
    }
    AggregateRow a;
    a.model = m;
    a.completed = done;
    a.effect = eff.value();
    a.no_effect = none.value();
    a.all = all.value();
    a.mspe_ratio = ratio.value();
    a.pip_active_min = amin.value();
    a.pip_inactive_mean = inactive.value();
    a.interaction_active = inter.value();
    a.interaction_inactive_mean = inter_other.value();
    out.push_back(a);
  }
  return out;
}

std::vector<AggregateRow> StudyReport::aggregate() const { return aggregate_rows(rows, config.models); }

const AggregateRow* StudyReport::find(const std::vector<AggregateRow>& agg, ModelKind m) const {
  for (const auto& a : agg)
    if (a.model == m) return &a;
  return nullptr;
}

namespace {

const char* kGroupFields[] = {"rmse", "coverage", "tp", "fp"};

void write_group(std::ostream& out, const GroupMetrics& g) {
  out << ',' << num_or_na(g.rmse) << ',' << num_or_na(g.coverage) << ',' << num_or_na(g.tp) << ','
      << num_or_na(g.fp);
}

}  // namespace

void write_replicates_csv(std::ostream& out, const StudyReport& report) {
  out << "# hdlm study-replicates 1\n";
  out << "scenario,sigma2,replicate,seed,model,status";
  for (const char* g : {"effect", "noeffect", "all"})
    for (const char* f : kGroupFields) out << ',' << g << '_' << f;
  out << ",mspe,mspe_ratio,pip_active_min,pip_inactive_mean,interaction_active,interaction_inactive_mean";
  for (int j = 1; j <= kCovariates; ++j) out << ",pip_z" << j;
  out << '\n';
  for (const auto& r : report.rows) {
    out << static_cast<int>(report.config.spec.scenario) << ',' << format_number(report.config.spec.sigma2) << ','
        << r.replicate << ',' << r.seed << ',' << to_string(r.model) << ',' << csv_escape(r.status);
    write_group(out, r.effect);
    write_group(out, r.no_effect);
    write_group(out, r.all);
    out << ',' << num_or_na(r.mspe) << ',' << num_or_na(r.mspe_ratio) << ',' << num_or_na(r.pip_active_min) << ','
        << num_or_na(r.pip_inactive_mean) << ',' << num_or_na(r.interaction_active) << ','
        << num_or_na(r.interaction_inactive_mean);
    for (int j = 0; j < kCovariates; ++j)
      out << ',' << (static_cast<std::size_t>(j) < r.pip.size() ? num_or_na(r.pip[static_cast<std::size_t>(j)]) : "NA");
    out << '\n';
  }
}

std::vector<ReplicateResult> read_replicates_csv(std::istream& in) {
  CsvTable t = read_csv(in);
  auto col = [&](const std::string& name) {
    int c = t.column(name);
    if (c < 0) throw DataError("replicate table: missing column '" + name + "'");
    return static_cast<std::size_t>(c);
  };
  std::vector<ReplicateResult> out;
  for (const auto& row : t.rows) {
    ReplicateResult r;
    r.replicate = std::stoi(row[col("replicate")]);
    r.seed = std::stoull(row[col("seed")]);
    r.model = model_from(row[col("model")]);
    r.status = row[col("status")];
    auto group = [&](const std::string& g) {
      return GroupMetrics{parse_or_nan(row[col(g + "_rmse")]), parse_or_nan(row[col(g + "_coverage")]),
                          parse_or_nan(row[col(g + "_tp")]), parse_or_nan(row[col(g + "_fp")])};
    };
    r.effect = group("effect");
    r.no_effect = group("noeffect");
    r.all = group("all");
    r.mspe = parse_or_nan(row[col("mspe")]);
    r.mspe_ratio = parse_or_nan(row[col("mspe_ratio")]);
    r.pip_active_min = parse_or_nan(row[col("pip_active_min")]);
    r.pip_inactive_mean = parse_or_nan(row[col("pip_inactive_mean")]);
    r.interaction_active = parse_or_nan(row[col("interaction_active")]);
    r.interaction_inactive_mean = parse_or_nan(row[col("interaction_inactive_mean")]);
    for (int j = 1; j <= kCovariates; ++j) {
      double v = parse_or_nan(row[col("pip_z" + std::to_string(j))]);
      if (std::isfinite(v)) r.pip.push_back(v);
    }
    out.push_back(r);
  }
  return out;
}

void write_aggregate_csv(std::ostream& out, const StudyReport& report) {
  out << "# hdlm study-aggregate 1\n";
  out << "scenario,sigma2,model,replicates";
  for (const char* g : {"effect", "noeffect", "all"}) {
    out << ',' << g << "_rmse100";
    for (const char* f : {"coverage", "tp", "fp"}) out << ',' << g << '_' << f;
  }
  out << ",mspe_ratio,pip_active_min,pip_inactive_mean,interaction_active,interaction_inactive_mean\n";
  for (const auto& a : report.aggregate()) {
    out << static_cast<int>(report.config.spec.scenario) << ',' << format_number(report.config.spec.sigma2) << ','
        << to_string(a.model) << ',' << a.completed;
    for (const GroupMetrics* g : {&a.effect, &a.no_effect, &a.all})
      out << ',' << num_or_na(100.0 * g->rmse) << ',' << num_or_na(g->coverage) << ',' << num_or_na(g->tp) << ','
          << num_or_na(g->fp);
    out << ',' << num_or_na(a.mspe_ratio) << ',' << num_or_na(a.pip_active_min) << ','
        << num_or_na(a.pip_inactive_mean) << ',' << num_or_na(a.interaction_active) << ','
        << num_or_na(a.interaction_inactive_mean) << '\n';
  }
}

void write_manifest(std::ostream& out, const StudyReport& report) {
  const auto& c = report.config;
  out << "# hdlm study-manifest 1\n";
  out << "scenario = " << to_string(c.spec.scenario) << '\n';
  out << "n = " << c.spec.n << '\n';
  out << "test_size = " << c.spec.test_size << '\n';
  out << "sigma2 = " << format_number(c.spec.sigma2) << '\n';
  out << "lags = " << c.spec.lags << '\n';
  out << "exposure_mean = " << format_number(c.spec.exposure.mean) << '\n';
  out << "exposure_sd = " << format_number(c.spec.exposure.sd) << '\n';
  out << "exposure_rho = " << format_number(c.spec.exposure.rho) << '\n';
  out << "standardize = " << (c.spec.standardize ? "true" : "false") << '\n';
  out << "seed = " << c.spec.seed << '\n';
  out << "replicates = " << c.replicates << '\n';
  out << "models =";
  for (auto m : c.models) out << ' ' << to_string(m);
  out << '\n';
  out << "trees = " << c.fit.trees << '\n';
  out << "iterations = " << c.fit.iterations << '\n';
  out << "burn_in = " << c.fit.burn_in << '\n';
  out << "thin = " << c.fit.thin << '\n';
  out << "chains = " << c.fit.chains << '\n';
  out << "ci_level = " << format_number(c.level) << '\n';
  for (int r = 0; r < c.replicates; ++r)
    out << "replicate_seed." << r << " = " << derive_seed(c.spec.seed, static_cast<std::uint64_t>(r)) << '\n';
}

}  // namespace hdlm
