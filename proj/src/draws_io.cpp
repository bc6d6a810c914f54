#include <fstream>
#include <sstream>

#include "hdlm/csv.hpp"
#include "hdlm/error.hpp"
#include "hdlm/samplers.hpp"

// Draw container layout (one record per line, tokens separated by spaces):
//
//   # hdlm-draws 1
//   model <name>
//   lags <T>
//   trees <A>
//   config <iterations> <burn_in> <thin> <seed> <chains>
//   outcome <name>               training file columns: outcome,
//   exposure <name>              one line per lag in lag order,
//   fixed_column <name>          fixed-effect columns read from the file,
//   intercept <0|1>              and whether an intercept was added
//   fixed <name>                 one line per Z column, in column order
//   schema <modifier line>       one line per modifier (schema text format)
//   draws <D>
//   draw <index> <chain>
//   scalars <sigma2> <nu2> <phi> <xi_sigma> <xi_nu>
//   tau2 <A values>
//   xi_tau <A values>
//   weights <q values>
//   gamma <p values>
//   tree <a>                     followed by the serialised modifier tree
//   end

namespace hdlm {

namespace {

constexpr const char* kMagic = "# hdlm-draws 1";

template <class C>
void write_row(std::ostream& out, const char* key, const C& values) {
  out << key;
  for (double v : values) out << ' ' << format_number(v);
  out << '\n';
}

std::vector<std::string> tokens_of(const std::string& line) {
  std::istringstream ss(line);
  std::vector<std::string> tok;
  std::string s;
  while (ss >> s) tok.push_back(s);
  return tok;
}

std::vector<std::string> expect(std::istream& in, const std::string& key, std::size_t min_tokens = 1) {
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto tok = tokens_of(line);
    if (tok.empty() || tok[0] != key || tok.size() < min_tokens)
      throw DataError("draw file: expected '" + key + "', found '" + line + "'");
    return tok;
  }
  throw DataError("draw file: unexpected end of file, expected '" + key + "'");
}

double num(const std::string& s) {
  double v;
  if (!parse_number(s, v)) throw DataError("draw file: bad number '" + s + "'");
  return v;
}

std::vector<double> values(const std::vector<std::string>& tok, std::size_t expected) {
  if (tok.size() != expected + 1) throw DataError("draw file: '" + tok[0] + "' has the wrong number of values");
  std::vector<double> out;
  for (std::size_t k = 1; k < tok.size(); ++k) out.push_back(num(tok[k]));
  return out;
}

}  // namespace

void write_draws(std::ostream& out, const PosteriorDraws& d) {
  out << kMagic << '\n';
  out << "model " << to_string(d.model) << '\n';
  out << "lags " << d.lags << '\n';
  out << "trees " << d.config.trees << '\n';
  out << "config " << d.config.iterations << ' ' << d.config.burn_in << ' ' << d.config.thin << ' ' << d.config.seed
      << ' ' << d.config.chains << '\n';
  out << "outcome " << d.columns.outcome << '\n';
  for (const auto& e : d.columns.exposures) out << "exposure " << e << '\n';
  for (const auto& f : d.columns.fixed) out << "fixed_column " << f << '\n';
  out << "intercept " << (d.columns.add_intercept ? 1 : 0) << '\n';
  for (const auto& f : d.fixed_names) out << "fixed " << f << '\n';
  {
    std::istringstream schema(d.schema.to_text());
    std::string line;
    while (std::getline(schema, line)) out << "schema " << line << '\n';
  }
  out << "draws " << d.states.size() << '\n';
  for (std::size_t k = 0; k < d.states.size(); ++k) {
    const auto& s = d.states[k];
    out << "draw " << k << ' ' << (k < d.chain.size() ? d.chain[k] : 0) << '\n';
    out << "scalars " << format_number(s.sigma2) << ' ' << format_number(s.nu2) << ' ' << format_number(s.phi) << ' '
        << format_number(s.xi_sigma) << ' ' << format_number(s.xi_nu) << '\n';
    write_row(out, "tau2", s.tau2);
    write_row(out, "xi_tau", s.xi_tau);
    write_row(out, "weights", s.weights);
    if (k < d.gamma.size())
      write_row(out, "gamma", d.gamma[k]);
    else
      out << "gamma\n";
    for (std::size_t a = 0; a < s.trees.size(); ++a) {
      out << "tree " << a << '\n';
      write_tree(out, s.trees[a]);
    }
  }
  out << "end\n";
}

void write_draws(const std::string& path, const PosteriorDraws& d) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  write_draws(out, d);
}

PosteriorDraws read_draws(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind(kMagic, 0) != 0) throw DataError("draw file: missing or unknown version header");
  PosteriorDraws d;
  d.model = model_from(expect(in, "model", 2)[1]);
  d.config.model = d.model;
  d.lags = static_cast<int>(num(expect(in, "lags", 2)[1]));
  d.config.trees = static_cast<int>(num(expect(in, "trees", 2)[1]));
  auto cfg = expect(in, "config", 6);
  d.config.iterations = static_cast<int>(num(cfg[1]));
  d.config.burn_in = static_cast<int>(num(cfg[2]));
  d.config.thin = static_cast<int>(num(cfg[3]));
  d.config.seed = std::stoull(cfg[4]);
  d.config.chains = static_cast<int>(num(cfg[5]));

  std::string schema_text;
  std::size_t count = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("outcome ", 0) == 0) {
      d.columns.outcome = line.substr(8);
    } else if (line.rfind("exposure ", 0) == 0) {
      d.columns.exposures.push_back(line.substr(9));
    } else if (line.rfind("fixed_column ", 0) == 0) {
      d.columns.fixed.push_back(line.substr(13));
    } else if (line.rfind("intercept ", 0) == 0) {
      d.columns.add_intercept = line.substr(10) == "1";
    } else if (line.rfind("fixed ", 0) == 0) {
      d.fixed_names.push_back(line.substr(6));
    } else if (line.rfind("schema ", 0) == 0) {
      schema_text += line.substr(7) + "\n";
    } else if (line.rfind("draws ", 0) == 0) {
      count = static_cast<std::size_t>(num(line.substr(6)));
      break;
    } else {
      throw DataError("draw file: unexpected line '" + line + "'");
    }
  }
  std::istringstream schema_in(schema_text);
  d.schema = ModifierSchema::parse(schema_in);
  const std::size_t A = static_cast<std::size_t>(d.config.trees);
  const std::size_t q = d.schema.size();
  const std::size_t p = d.fixed_names.size();

  for (std::size_t k = 0; k < count; ++k) {
    auto head = expect(in, "draw", 3);
    d.chain.push_back(static_cast<int>(num(head[2])));
    EnsembleState s;
    auto sc = values(expect(in, "scalars"), 5);
    s.sigma2 = sc[0];
    s.nu2 = sc[1];
    s.phi = sc[2];
    s.xi_sigma = sc[3];
    s.xi_nu = sc[4];
    s.tau2 = values(expect(in, "tau2"), A);
    s.xi_tau = values(expect(in, "xi_tau"), A);
    s.weights = values(expect(in, "weights"), q);
    auto g = values(expect(in, "gamma"), p);
    d.gamma.push_back(Eigen::Map<Eigen::VectorXd>(g.data(), static_cast<Eigen::Index>(g.size())));
    for (std::size_t a = 0; a < A; ++a) {
      expect(in, "tree", 2);
      s.trees.push_back(read_modifier_tree(in, d.lags));
    }
    d.states.push_back(std::move(s));
  }
  expect(in, "end");
  return d;
}

PosteriorDraws read_draws(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open draw file: " + path);
  return read_draws(in);
}

}  // namespace hdlm
