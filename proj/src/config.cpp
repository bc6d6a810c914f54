#include "hdlm/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "hdlm/csv.hpp"
#include "hdlm/error.hpp"

namespace hdlm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double as_number(const std::string& key, const std::string& v) {
  double out;
  if (!parse_number(v, out)) throw UsageError("configuration key '" + key + "': not a number: '" + v + "'");
  return out;
}

int as_int(const std::string& key, const std::string& v) {
  const double d = as_number(key, v);
  if (d != static_cast<double>(static_cast<long long>(d)) || d < -2147483648.0 || d > 2147483647.0)
    throw UsageError("configuration key '" + key + "': not an integer: '" + v + "'");
  return static_cast<int>(d);
}

bool as_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "no" || v == "0") return false;
  throw UsageError("configuration key '" + key + "': expected true or false, got '" + v + "'");
}

std::string join(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t k = 0; k < v.size(); ++k) s += (k ? "," : "") + v[k];
  return s;
}

const char* route_name(MarginalRoute r) {
  switch (r) {
    case MarginalRoute::automatic: return "automatic";
    case MarginalRoute::dense: return "dense";
    case MarginalRoute::woodbury: return "woodbury";
  }
  return "?";
}

}  // namespace

std::vector<std::string> expand_names(const std::string& list) {
  std::vector<std::string> out;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    const auto dots = item.find("..");
    if (dots == std::string::npos) {
      out.push_back(item);
      continue;
    }
    // prefix<a>..prefix<b> or prefix<a>..<b>
    const std::string lhs = item.substr(0, dots), rhs = item.substr(dots + 2);
    auto split = [](const std::string& s, std::string& prefix, int& num) {
      auto k = s.find_last_not_of("0123456789");
      k = k == std::string::npos ? 0 : k + 1;
      if (k == s.size()) return false;
      prefix = s.substr(0, k);
      num = std::stoi(s.substr(k));
      return true;
    };
    std::string p1, p2;
    int a = 0, b = 0;
    if (!split(lhs, p1, a) || !split(rhs, p2, b) || (!p2.empty() && p2 != p1) || b < a)
      throw UsageError("bad column range '" + item + "'");
    for (int k = a; k <= b; ++k) out.push_back(p1 + std::to_string(k));
  }
  return out;
}

void RunConfig::set(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "data") data = v;
  else if (key == "schema") schema = v;
  else if (key == "outcome") outcome = v;
  else if (key == "exposures") exposures = expand_names(v);
  else if (key == "fixed") fixed = expand_names(v);
  else if (key == "intercept") intercept = as_bool(key, v);
  else if (key == "modifiers") modifiers = expand_names(v);
  else if (key == "model") fit.model = model_from(v);
  else if (key == "trees") fit.trees = as_int(key, v);
  else if (key == "iterations") fit.iterations = as_int(key, v);
  else if (key == "burn_in") fit.burn_in = as_int(key, v);
  else if (key == "thin") fit.thin = as_int(key, v);
  else if (key == "seed") {
    double d = as_number(key, v);
    if (d < 0) throw UsageError("configuration key 'seed': must be non-negative");
    fit.seed = std::stoull(v);
    scenario.seed = fit.seed;
  } else if (key == "chains") fit.chains = as_int(key, v);
  else if (key == "alpha") fit.modifier_prior.alpha = as_number(key, v);
  else if (key == "beta") fit.modifier_prior.beta = as_number(key, v);
  else if (key == "dlm_alpha") fit.dlm_prior.alpha = as_number(key, v);
  else if (key == "dlm_beta") fit.dlm_prior.beta = as_number(key, v);
  else if (key == "min_leaf") fit.modifier_prior.min_leaf = as_int(key, v);
  else if (key == "xi") fit.modifier_prior.xi = as_number(key, v);
  else if (key == "phi_init") fit.phi_init = as_number(key, v);
  else if (key == "phi_step") fit.phi_step = as_number(key, v);
  else if (key == "adapt_phi") fit.adapt_phi = as_bool(key, v);
  else if (key == "route") {
    if (v == "automatic") fit.route = MarginalRoute::automatic;
    else if (v == "dense") fit.route = MarginalRoute::dense;
    else if (v == "woodbury") fit.route = MarginalRoute::woodbury;
    else throw UsageError("configuration key 'route': expected automatic, dense or woodbury");
  } else if (key == "progress_every") fit.progress_every = as_int(key, v);
  else if (key == "output") output = v;
  else if (key == "ci_level") ci_level = as_number(key, v);
  else if (key == "subgroup") {
    const auto colon = v.find(':');
    if (colon == std::string::npos) throw UsageError("subgroup must be written 'label: predicate'");
    subgroups.emplace_back(trim(v.substr(0, colon)), trim(v.substr(colon + 1)));
  } else if (key == "representative") representative = as_bool(key, v);
  else if (key == "dx") dx = as_number(key, v);
  else if (key == "scenario") scenario.scenario = scenario_from(v);
  else if (key == "n") scenario.n = as_int(key, v);
  else if (key == "sigma2") scenario.sigma2 = as_number(key, v);
  else if (key == "lags") scenario.lags = as_int(key, v);
  else if (key == "test_size") scenario.test_size = as_int(key, v);
  else if (key == "exposure_mean") scenario.exposure.mean = as_number(key, v);
  else if (key == "exposure_sd") scenario.exposure.sd = as_number(key, v);
  else if (key == "exposure_rho") scenario.exposure.rho = as_number(key, v);
  else if (key == "standardize") scenario.standardize = as_bool(key, v);
  else if (key == "replicates") replicates = as_int(key, v);
  else if (key == "models") {
    models.clear();
    for (const auto& m : expand_names(v)) models.push_back(model_from(m));
  } else
    throw UsageError("unknown configuration key '" + key + "'");
}

ColumnMap RunConfig::column_map() const {
  ColumnMap c;
  c.outcome = outcome;
  c.exposures = exposures;
  c.fixed = fixed;
  c.add_intercept = intercept;
  return c;
}

std::string RunConfig::output_dir() const {
  if (!output.empty()) return output;
  if (const char* env = std::getenv("HDLM_OUTPUT_DIR"); env && *env) return env;
  return "hdlm-output";
}

StudyConfig RunConfig::study() const {
  StudyConfig s;
  s.spec = scenario;
  s.spec.seed = fit.seed;
  s.models = models;
  s.replicates = replicates;
  s.fit = fit;
  s.level = ci_level;
  return s;
}

std::string RunConfig::to_text() const {
  std::ostringstream o;
  auto kv = [&](const char* k, const std::string& v) { o << k << " = " << v << '\n'; };
  auto num = [](double d) { return format_number(d); };
  kv("data", data);
  kv("schema", schema);
  kv("outcome", outcome);
  kv("exposures", join(exposures));
  kv("fixed", join(fixed));
  kv("intercept", intercept ? "true" : "false");
  kv("modifiers", join(modifiers));
  kv("model", to_string(fit.model));
  kv("trees", std::to_string(fit.trees));
  kv("iterations", std::to_string(fit.iterations));
  kv("burn_in", std::to_string(fit.burn_in));
  kv("thin", std::to_string(fit.thin));
  kv("seed", std::to_string(fit.seed));
  kv("chains", std::to_string(fit.chains));
  kv("alpha", num(fit.modifier_prior.alpha));
  kv("beta", num(fit.modifier_prior.beta));
  kv("dlm_alpha", num(fit.dlm_prior.alpha));
  kv("dlm_beta", num(fit.dlm_prior.beta));
  kv("min_leaf", std::to_string(fit.modifier_prior.min_leaf));
  kv("xi", num(fit.modifier_prior.xi));
  kv("phi_init", num(fit.phi_init));
  kv("phi_step", num(fit.phi_step));
  kv("adapt_phi", fit.adapt_phi ? "true" : "false");
  kv("route", route_name(fit.route));
  kv("progress_every", std::to_string(fit.progress_every));
  kv("output", output);
  kv("ci_level", num(ci_level));
  for (const auto& [label, pred] : subgroups) kv("subgroup", label + ": " + pred);
  kv("representative", representative ? "true" : "false");
  kv("dx", num(dx));
  kv("scenario", std::to_string(static_cast<int>(scenario.scenario)));
  kv("n", std::to_string(scenario.n));
  kv("sigma2", num(scenario.sigma2));
  kv("lags", std::to_string(scenario.lags));
  kv("test_size", std::to_string(scenario.test_size));
  kv("exposure_mean", num(scenario.exposure.mean));
  kv("exposure_sd", num(scenario.exposure.sd));
  kv("exposure_rho", num(scenario.exposure.rho));
  kv("standardize", scenario.standardize ? "true" : "false");
  kv("replicates", std::to_string(replicates));
  std::vector<std::string> names;
  for (auto m : models) names.push_back(to_string(m));
  kv("models", join(names));
  return o.str();
}

RunConfig parse_config(std::istream& in) {
  RunConfig c;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError("configuration line " + std::to_string(lineno) + ": expected key = value");
    try {
      c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const UsageError& e) {
      throw UsageError("configuration line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return c;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open configuration file: " + path);
  return parse_config(in);
}

}  // namespace hdlm
