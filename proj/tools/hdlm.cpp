// hdlm: simulate, fit and summarise heterogeneous distributed lag models.
//
// Exit codes: 0 success, 2 usage, 3 data validation, 4 numerical failure,
// 1 anything else. Errors are reported as one line on stderr:
//   error kind=<usage|data|numerical|internal> message="..."

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "hdlm/config.hpp"
#include "hdlm/csv.hpp"
#include "hdlm/error.hpp"
#include "hdlm/kernels.hpp"
#include "hdlm/posterior.hpp"
#include "hdlm/samplers.hpp"
#include "hdlm/simulation.hpp"

namespace fs = std::filesystem;
using namespace hdlm;

namespace {

constexpr const char* kVersion = "1";

std::ofstream open_out(const fs::path& path, const std::string& kind) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path.string());
  out << "# hdlm-" << kind << ' ' << kVersion << '\n';
  return out;
}

fs::path make_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create output directory: " + dir);
  return fs::path(dir);
}

std::string quoted(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out + '"';
}

/// Settings collected from the command line, applied after the config file.
struct Overrides {
  std::string config;
  std::vector<std::pair<std::string, std::string>> items;
  std::vector<std::string> raw;  // --set key=value

  void add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    auto* store = &items;
    app->add_option_function<std::string>(
        flag, [store, key](const std::string& v) { store->emplace_back(key, v); }, help);
  }

  RunConfig resolve(RunConfig base = {}) const {
    RunConfig c = config.empty() ? base : load_config(config);
    for (const auto& [k, v] : items) c.set(k, v);
    for (const auto& kv : raw) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
      c.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    return c;
  }
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "Configuration file (key = value lines)");
  app->add_option("--set", o.raw, "Override any configuration key: --set key=value");
  o.add(app, "--out", "output", "Output directory (default: $HDLM_OUTPUT_DIR or hdlm-output)");
  o.add(app, "--seed", "seed", "Random seed");
}

void add_fit_flags(CLI::App* app, Overrides& o) {
  o.add(app, "--model", "model", "tdlm, gp-dlm, hdlm-nested, hdlm-shared or hdlm-gp");
  o.add(app, "--trees", "trees", "Number of trees");
  o.add(app, "--iterations", "iterations", "MCMC iterations including burn-in");
  o.add(app, "--burn-in", "burn_in", "Burn-in iterations");
  o.add(app, "--thin", "thin", "Keep every k-th draw after burn-in");
  o.add(app, "--chains", "chains", "Number of chains, run concurrently");
}

// ---------------------------------------------------------------------------

ModifierSchema schema_of(const RunConfig& c) {
  return c.schema.empty() ? ModifierSchema{} : ModifierSchema::load(c.schema);
}

std::vector<int> modifier_selection(const RunConfig& c, const ModifierSchema& schema) {
  std::vector<int> keep;
  if (c.modifiers.empty()) {
    keep.resize(schema.size());
    std::iota(keep.begin(), keep.end(), 0);
    return keep;
  }
  for (const auto& name : c.modifiers) {
    const int j = schema.index_of(name);
    if (j < 0) throw UsageError("modifier '" + name + "' is not in the schema");
    keep.push_back(j);
  }
  return keep;
}

int cmd_simulate(const Overrides& o, std::optional<long> test_size) {
  RunConfig c = o.resolve();
  ScenarioSpec spec = c.scenario;
  spec.seed = c.fit.seed;
  spec.test_size = test_size ? *test_size : 1;
  if (test_size && *test_size < 1) throw UsageError("--test-size must be at least 1");
  Replicate rep = simulate_replicate(spec);
  const fs::path dir = make_dir(c.output_dir());

  auto write_data = [&](const SimulatedData& s, const std::string& stem) {
    {
      auto out = open_out(dir / (stem + ".csv"), "dataset");
      write_dataset(s.data, out);
    }
    auto out = open_out(dir / (stem + "_truth.csv"), "truth");
    out << "id,t,theta_star,effect\n";
    for (Eigen::Index i = 0; i < s.truth.shape.rows(); ++i)
      for (Eigen::Index t = 0; t < s.truth.shape.cols(); ++t)
        out << i << ',' << t + 1 << ',' << format_number(s.truth.shape(i, t)) << ','
            << format_number(s.truth.r * s.truth.shape(i, t)) << '\n';
  };
  write_data(rep.train, "data");
  if (test_size) write_data(rep.test, "test");
  {
    std::ofstream out(dir / "schema.txt");
    out << "# hdlm-schema " << kVersion << '\n' << covariate_schema().to_text();
  }
  {
    auto out = open_out(dir / "manifest.txt", "manifest");
    out << "command = simulate\n";
    out << "scenario = " << static_cast<int>(spec.scenario) << '\n';
    out << "n = " << spec.n << '\n';
    if (test_size) out << "test_size = " << *test_size << '\n';
    out << "sigma2 = " << format_number(spec.sigma2) << '\n';
    out << "lags = " << spec.lags << '\n';
    out << "seed = " << spec.seed << '\n';
    out << "exposure_mean = " << format_number(spec.exposure.mean) << '\n';
    out << "exposure_sd = " << format_number(spec.exposure.sd) << '\n';
    out << "exposure_rho = " << format_number(spec.exposure.rho) << '\n';
    out << "standardize = " << (spec.standardize ? "true" : "false") << '\n';
    out << "r = " << format_number(rep.train.truth.r) << '\n';
    out << "onset = " << rep.train.truth.start << '\n';
    out << "gamma =";
    for (Eigen::Index k = 0; k < rep.train.truth.gamma.size(); ++k) out << ' ' << format_number(rep.train.truth.gamma[k]);
    out << '\n';
    // a ready-made configuration for `hdlm fit`
    out << "fit_config = data=" << (dir / "data.csv").string() << "; schema=" << (dir / "schema.txt").string()
        << "; exposures=x1..x" << spec.lags << "; fixed=z1..z13; intercept=true\n";
  }
  std::cout << "wrote " << (dir / "data.csv").string() << '\n';
  return 0;
}

void write_diagnostics(const fs::path& path, const PosteriorDraws& d) {
  auto out = open_out(path, "diagnostics");
  const auto& g = d.diagnostics;
  out << "model = " << to_string(d.model) << '\n';
  out << "draws = " << d.size() << '\n';
  out << "chains = " << d.config.chains << '\n';
  for (auto [name, mc] : {std::pair{"modifier", &g.modifier}, std::pair{"dlm", &g.dlm}}) {
    out << name << "_acceptance = " << format_number(mc->acceptance()) << '\n';
    for (int k = 0; k < 4; ++k) {
      const char* kind = to_string(static_cast<MoveKind>(k));
      out << name << '_' << kind << "_proposed = " << mc->proposed[k] << '\n';
      out << name << '_' << kind << "_accepted = " << mc->accepted[k] << '\n';
      out << name << '_' << kind << "_invalid = " << mc->invalid[k] << '\n';
    }
  }
  out << "singular = " << g.singular << '\n';
  if (uses_gp(d.model)) {
    out << "phi_acceptance = "
        << format_number(g.phi_proposed ? double(g.phi_accepted) / double(g.phi_proposed) : 0.0) << '\n';
    out << "phi_step = " << format_number(g.phi_step) << '\n';
  }
  std::vector<double> sigma = g.sigma_trace;
  std::sort(sigma.begin(), sigma.end());
  for (double p : {0.025, 0.25, 0.5, 0.75, 0.975})
    out << "sigma_q" << format_number(p) << " = " << format_number(sigma.empty() ? 0.0 : kernels::sorted_quantile(sigma, p))
        << '\n';
}

int cmd_fit(const Overrides& o) {
  RunConfig c = o.resolve();
  if (c.data.empty()) throw UsageError("fit needs a data file (--data or 'data' in the configuration)");
  if (c.exposures.empty()) throw UsageError("fit needs exposure columns (--exposures or 'exposures')");
  ModifierSchema schema = schema_of(c);
  Dataset data = load_dataset(c.data, schema, c.column_map());
  std::vector<int> keep = modifier_selection(c, schema);
  PosteriorDraws draws = fit(data, keep, c.fit);

  const fs::path dir = make_dir(c.output_dir());
  write_draws((dir / "draws.txt").string(), draws);
  write_diagnostics(dir / "diagnostics.txt", draws);
  {
    auto out = open_out(dir / "fitted.csv", "fitted");
    out << "id,fitted\n";
    for (Eigen::Index i = 0; i < draws.diagnostics.fitted_mean.size(); ++i)
      out << i << ',' << format_number(draws.diagnostics.fitted_mean[i]) << '\n';
  }
  {
    auto out = open_out(dir / "config.txt", "config");
    out << c.to_text();
  }
  std::cout << "draws " << draws.size() << " written to " << (dir / "draws.txt").string() << '\n';
  return 0;
}

/// Modifier rows (encoded with the draws' schema) read from a CSV.
Eigen::MatrixXd modifier_rows(const std::string& path, const ModifierSchema& schema) {
  CsvTable t = read_csv_file(path);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.rows.size()), static_cast<Eigen::Index>(schema.size()));
  for (std::size_t j = 0; j < schema.size(); ++j) {
    const int c = t.column(schema[j].name);
    if (c < 0) throw DataError("missing column '" + schema[j].name + "' in " + path);
    for (std::size_t i = 0; i < t.rows.size(); ++i) {
      const std::string cell = static_cast<std::size_t>(c) < t.rows[i].size() ? t.rows[i][static_cast<std::size_t>(c)] : "";
      double v;
      if (!schema.encode(j, cell, v))
        throw DataError("row " + std::to_string(i + 1) + ", column '" + schema[j].name + "': schema violation, value '" +
                        cell + "'");
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v;
    }
  }
  return m;
}

void write_curve(std::ostream& out, const std::string& id, const DlmEstimate& e) {
  for (Eigen::Index t = 0; t < e.lags(); ++t)
    out << csv_escape(id) << ',' << t + 1 << ',' << format_number(e.mean[t]) << ',' << format_number(e.lower[t]) << ','
        << format_number(e.upper[t]) << ',' << (e.window[static_cast<std::size_t>(t)] ? 1 : 0) << '\n';
}

int cmd_summarize(const Overrides& o, const std::string& draws_path, const std::string& rows_path) {
  RunConfig c = o.resolve();
  PosteriorDraws draws = read_draws(draws_path);
  Eigen::MatrixXd m;
  if (!rows_path.empty())
    m = modifier_rows(rows_path, draws.schema);
  else if (draws.schema.empty())
    m.resize(1, 0);
  else
    throw UsageError("summarize needs --rows for a model with modifiers");

  const fs::path dir = make_dir(c.output_dir());
  auto est = individual_estimates(draws, m, c.ci_level);
  {
    auto out = open_out(dir / "curves.csv", "curves");
    out << "id,t,mean,lo,hi,window\n";
    for (std::size_t i = 0; i < est.size(); ++i) write_curve(out, std::to_string(i), est[i]);
  }
  {
    auto out = open_out(dir / "cumulative.csv", "cumulative");
    out << "id,dx,mean,lo,hi\n";
    std::vector<double> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
      for (Eigen::Index j = 0; j < m.cols(); ++j) row[static_cast<std::size_t>(j)] = m(i, j);
      IntervalEstimate ce = cumulative_effect(draws, row, c.dx, c.ci_level);
      out << i << ',' << format_number(c.dx) << ',' << format_number(ce.mean) << ',' << format_number(ce.lower) << ','
          << format_number(ce.upper) << '\n';
    }
  }
  if (!c.subgroups.empty()) {
    auto out = open_out(dir / "subgroups.csv", "subgroups");
    out << "id,t,mean,lo,hi,window\n";
    for (const auto& [label, text] : c.subgroups) {
      RowPredicate p = parse_predicate(text, draws.schema);
      DlmEstimate e = c.representative ? representative_curve(draws, p, m, c.ci_level)
                                       : subgroup_curve(draws, p, m, c.ci_level);
      write_curve(out, label, e);
    }
  }
  std::cout << "summarised " << m.rows() << " rows into " << dir.string() << '\n';
  return 0;
}

int cmd_pip(const Overrides& o, const std::string& draws_path) {
  RunConfig c = o.resolve();
  PosteriorDraws draws = read_draws(draws_path);
  PipTable t = pip(draws);
  const fs::path dir = make_dir(c.output_dir());
  const auto& s = draws.schema;
  {
    auto out = open_out(dir / "pip.csv", "pip");
    out << "modifier,pip\n";
    for (std::size_t j = 0; j < s.size(); ++j) out << csv_escape(s[j].name) << ',' << format_number(t.single[j]) << '\n';
  }
  {
    auto out = open_out(dir / "interactions.csv", "interactions");
    out << "modifier_a,modifier_b,pip\n";
    for (std::size_t j = 0; j < s.size(); ++j)
      for (std::size_t k = j + 1; k < s.size(); ++k)
        out << csv_escape(s[j].name) << ',' << csv_escape(s[k].name) << ','
            << format_number(t.interaction(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(k))) << '\n';
  }
  {
    auto out = open_out(dir / "splits.csv", "splits");
    out << "modifier,value\n";
    for (std::size_t j = 0; j < s.size(); ++j)
      for (double v : t.split_values[j]) out << csv_escape(s[j].name) << ',' << format_number(v) << '\n';
  }
  std::cout << "pip tables written to " << dir.string() << '\n';
  return 0;
}

int cmd_predict(const Overrides& o, const std::string& draws_path, const std::string& data_path) {
  RunConfig c = o.resolve();
  PosteriorDraws draws = read_draws(draws_path);
  ColumnMap cm = draws.columns;
  // the outcome is optional in new data
  {
    std::ifstream probe(data_path);
    if (!probe) throw DataError("cannot open data file: " + data_path);
    if (read_csv(probe).column(cm.outcome) < 0) cm.outcome.clear();
  }
  Dataset data = load_dataset(data_path, draws.schema, cm);
  Eigen::VectorXd yhat = predict(draws, data);
  const fs::path dir = make_dir(c.output_dir());
  auto out = open_out(dir / "predictions.csv", "predictions");
  out << "id,yhat\n";
  for (Eigen::Index i = 0; i < yhat.size(); ++i) out << i << ',' << format_number(yhat[i]) << '\n';
  std::cout << "predictions written to " << (dir / "predictions.csv").string() << '\n';
  return 0;
}

int cmd_study(const Overrides& o, bool verbose) {
  RunConfig c = o.resolve();
  StudyConfig sc = c.study();
  sc.verbose = verbose;
  sc.fit.progress_every = 0;
  StudyReport report = run_study(sc);
  const fs::path dir = make_dir(c.output_dir());
  {
    std::ofstream out(dir / "replicates.csv");
    write_replicates_csv(out, report);
  }
  {
    std::ofstream out(dir / "aggregate.csv");
    write_aggregate_csv(out, report);
  }
  {
    std::ofstream out(dir / "manifest.txt");
    write_manifest(out, report);
  }
  std::cout << "study written to " << dir.string() << '\n';
  return 0;
}

int report_error(const char* kind, const std::string& message, int code) {
  std::cerr << "error kind=" << kind << " message=" << quoted(message) << '\n';
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Heterogeneous distributed lag models: simulate, fit and summarise."};
  app.require_subcommand(1);

  Overrides o_sim, o_fit, o_sum, o_pip, o_pred, o_study;

  auto* sim = app.add_subcommand("simulate", "Generate a simulation scenario dataset");
  add_common(sim, o_sim);
  o_sim.add(sim, "--scenario", "scenario", "1 (early/late), 2 (scaled) or 3 (no heterogeneity)");
  o_sim.add(sim, "--n", "n", "Training rows");
  o_sim.add(sim, "--sigma2", "sigma2", "Noise variance");
  o_sim.add(sim, "--lags", "lags", "Number of lags T");
  long test_size = 0;
  auto* test_opt = sim->add_option("--test-size", test_size, "Also write a held-out set of this size");

  auto* fitc = app.add_subcommand("fit", "Fit a model and write posterior draws");
  add_common(fitc, o_fit);
  add_fit_flags(fitc, o_fit);
  o_fit.add(fitc, "--data", "data", "Dataset CSV");
  o_fit.add(fitc, "--schema", "schema", "Modifier schema file");
  o_fit.add(fitc, "--exposures", "exposures", "Exposure columns in lag order, e.g. x1..x37");
  o_fit.add(fitc, "--fixed", "fixed", "Fixed-effect columns, e.g. z1..z13");
  o_fit.add(fitc, "--modifiers", "modifiers", "Modifier columns to use (default: all in the schema)");
  o_fit.add(fitc, "--intercept", "intercept", "Add an intercept column (true/false)");

  std::string draws_path, rows_path, data_path;
  auto* sum = app.add_subcommand("summarize", "Individual, cumulative and subgroup lag curves");
  add_common(sum, o_sum);
  sum->add_option("--draws", draws_path, "Draw file written by fit")->required();
  sum->add_option("--rows", rows_path, "CSV with the modifier columns of the rows to summarise");
  o_sum.add(sum, "--level", "ci_level", "Credible level (default 0.95)");
  o_sum.add(sum, "--dx", "dx", "Exposure increment for cumulative effects");
  sum->add_option_function<std::vector<std::string>>(
      "--subgroup",
      [&](const std::vector<std::string>& v) {
        for (const auto& s : v) o_sum.items.emplace_back("subgroup", s);
      },
      "Subgroup 'label: predicate', repeatable");
  sum->add_flag_function(
      "--representative", [&](std::int64_t) { o_sum.items.emplace_back("representative", "true"); },
      "Evaluate subgroups at a representative row instead of averaging");

  auto* pipc = app.add_subcommand("pip", "Posterior inclusion probabilities");
  add_common(pipc, o_pip);
  pipc->add_option("--draws", draws_path, "Draw file written by fit")->required();

  auto* pred = app.add_subcommand("predict", "Posterior mean prediction for new rows");
  add_common(pred, o_pred);
  pred->add_option("--draws", draws_path, "Draw file written by fit")->required();
  pred->add_option("--data", data_path, "CSV with the training columns (outcome optional)")->required();

  auto* study = app.add_subcommand("study", "Replicated simulation study");
  add_common(study, o_study);
  add_fit_flags(study, o_study);
  o_study.add(study, "--scenario", "scenario", "1, 2 or 3");
  o_study.add(study, "--n", "n", "Training rows per replicate");
  o_study.add(study, "--sigma2", "sigma2", "Noise variance");
  o_study.add(study, "--replicates", "replicates", "Number of replicates");
  o_study.add(study, "--models", "models", "Comma-separated model list");
  o_study.add(study, "--test-size", "test_size", "Held-out rows per replicate");
  bool verbose = false;
  study->add_flag("--verbose", verbose, "One progress line per fitted model");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report_error("usage", e.what(), 2);
  }

  try {
    if (*sim) return cmd_simulate(o_sim, test_opt->count() ? std::optional<long>(test_size) : std::nullopt);
    if (*fitc) return cmd_fit(o_fit);
    if (*sum) return cmd_summarize(o_sum, draws_path, rows_path);
    if (*pipc) return cmd_pip(o_pip, draws_path);
    if (*pred) return cmd_predict(o_pred, draws_path, data_path);
    if (*study) return cmd_study(o_study, verbose);
  } catch (const UsageError& e) {
    return report_error("usage", e.what(), 2);
  } catch (const DataError& e) {
    return report_error("data", e.what(), 3);
  } catch (const NumericalError& e) {
    return report_error("numerical", e.what(), 4);
  } catch (const std::exception& e) {
    return report_error("internal", e.what(), 1);
  }
  return 0;
}
