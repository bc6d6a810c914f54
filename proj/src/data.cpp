#include "hdlm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "hdlm/csv.hpp"
#include "hdlm/error.hpp"
#include "hdlm/rng.hpp"

namespace hdlm {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  std::size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool is_missing(const std::string& cell) {
  return cell.empty() || cell == "NA" || cell == "na" || cell == "NaN" || cell == "nan" || cell == ".";
}

}  // namespace

const char* to_string(ModifierKind kind) {
  switch (kind) {
    case ModifierKind::continuous: return "continuous";
    case ModifierKind::ordinal: return "ordinal";
    case ModifierKind::nominal: return "nominal";
    case ModifierKind::binary: return "binary";
  }
  return "?";
}

ModifierKind modifier_kind_from(const std::string& text) {
  if (text == "continuous") return ModifierKind::continuous;
  if (text == "ordinal") return ModifierKind::ordinal;
  if (text == "nominal") return ModifierKind::nominal;
  if (text == "binary") return ModifierKind::binary;
  throw DataError("schema: unknown modifier kind '" + text + "'");
}

bool operator==(const ModifierSpec& a, const ModifierSpec& b) {
  return a.name == b.name && a.kind == b.kind && a.categories == b.categories;
}

bool operator==(const ModifierSchema& a, const ModifierSchema& b) { return a.specs_ == b.specs_; }

ModifierSchema::ModifierSchema(std::vector<ModifierSpec> specs) : specs_(std::move(specs)) {
  for (auto& s : specs_)
    if (s.kind == ModifierKind::binary && s.categories.empty()) s.categories = {"0", "1"};
  check();
}

void ModifierSchema::check() const {
  std::set<std::string> seen;
  for (const auto& s : specs_) {
    if (s.name.empty()) throw DataError("schema: empty modifier name");
    if (!seen.insert(s.name).second) throw DataError("schema: duplicate modifier name '" + s.name + "'");
    std::set<std::string> cats(s.categories.begin(), s.categories.end());
    if (cats.size() != s.categories.size()) throw DataError("schema: duplicate category in '" + s.name + "'");
    switch (s.kind) {
      case ModifierKind::continuous:
        if (!s.categories.empty()) throw DataError("schema: continuous modifier '" + s.name + "' lists categories");
        break;
      case ModifierKind::ordinal:
      case ModifierKind::nominal:
        if (s.categories.size() < 2)
          throw DataError("schema: modifier '" + s.name + "' needs at least 2 categories");
        if (s.kind == ModifierKind::nominal && s.categories.size() > 63)
          throw DataError("schema: nominal modifier '" + s.name + "' has more than 63 categories");
        break;
      case ModifierKind::binary:
        if (s.categories.size() != 2)
          throw DataError("schema: binary modifier '" + s.name + "' needs exactly 2 levels");
        break;
    }
  }
}

ModifierSchema ModifierSchema::parse(std::istream& in) {
  std::vector<ModifierSpec> specs;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw DataError("schema line " + std::to_string(lineno) + ": expected 'name = kind'");
    ModifierSpec spec;
    spec.name = trim(line.substr(0, eq));
    std::string rhs = trim(line.substr(eq + 1));
    auto colon = rhs.find(':');
    spec.kind = modifier_kind_from(trim(rhs.substr(0, colon)));
    if (colon != std::string::npos) {
      std::stringstream cats(rhs.substr(colon + 1));
      std::string cat;
      while (std::getline(cats, cat, ',')) {
        cat = trim(cat);
        if (!cat.empty()) spec.categories.push_back(cat);
      }
    }
    specs.push_back(std::move(spec));
  }
  return ModifierSchema(std::move(specs));
}

ModifierSchema ModifierSchema::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open schema file: " + path);
  return parse(in);
}

std::string ModifierSchema::to_text() const {
  std::ostringstream out;
  for (const auto& s : specs_) {
    out << s.name << " = " << to_string(s.kind);
    if (!s.categories.empty()) {
      out << ":";
      for (std::size_t c = 0; c < s.categories.size(); ++c) out << (c ? ", " : " ") << s.categories[c];
    }
    out << "\n";
  }
  return out.str();
}

int ModifierSchema::index_of(const std::string& name) const {
  for (std::size_t j = 0; j < specs_.size(); ++j)
    if (specs_[j].name == name) return static_cast<int>(j);
  return -1;
}

int ModifierSchema::levels(std::size_t j) const {
  return specs_[j].kind == ModifierKind::continuous ? 0 : static_cast<int>(specs_[j].categories.size());
}

bool ModifierSchema::encode(std::size_t j, const std::string& cell, double& out) const {
  const auto& s = specs_[j];
  if (s.kind == ModifierKind::continuous) return parse_number(cell, out);
  std::string c = trim(cell);
  for (std::size_t k = 0; k < s.categories.size(); ++k) {
    if (s.categories[k] == c) {
      out = static_cast<double>(k);
      return true;
    }
  }
  return false;
}

std::string ModifierSchema::decode(std::size_t j, double code) const {
  const auto& s = specs_[j];
  if (s.kind == ModifierKind::continuous) return format_number(code);
  return s.categories.at(static_cast<std::size_t>(code));
}

bool ModifierSchema::conforms(std::size_t j, double code) const {
  if (!std::isfinite(code)) return false;
  if (specs_[j].kind == ModifierKind::continuous) return true;
  return code >= 0 && code == std::floor(code) && code < static_cast<double>(specs_[j].categories.size());
}

ModifierSchema ModifierSchema::subset(const std::vector<int>& keep) const {
  std::vector<ModifierSpec> out;
  for (int j : keep) out.push_back(specs_.at(static_cast<std::size_t>(j)));
  return ModifierSchema(std::move(out));
}

Dataset Dataset::with_modifiers(const std::vector<int>& keep) const {
  Dataset d = *this;
  d.schema = schema.subset(keep);
  d.m.resize(m.rows(), static_cast<Eigen::Index>(keep.size()));
  for (std::size_t k = 0; k < keep.size(); ++k) d.m.col(static_cast<Eigen::Index>(k)) = m.col(keep[k]);
  return d;
}

Dataset Dataset::rows(Eigen::Index begin, Eigen::Index end) const {
  Dataset d;
  Eigen::Index len = end - begin;
  d.y = y.segment(begin, len);
  d.x = x.middleRows(begin, len);
  d.z = z.middleRows(begin, len);
  d.m = m.middleRows(begin, len);
  d.schema = schema;
  d.columns = columns;
  return d;
}

std::vector<Violation> validate(const Dataset& data) {
  std::vector<Violation> out;
  const Eigen::Index n = data.x.rows();
  if (n == 0) out.push_back({"dataset", "empty dataset (n = 0)"});
  if (data.y.size() != n) out.push_back({"y", "row count mismatch: y"});
  if (data.z.rows() != n) out.push_back({"z", "row count mismatch: z"});
  if (data.m.rows() != n) out.push_back({"m", "row count mismatch: m"});
  if (data.x.cols() < 2) out.push_back({"x", "fewer than 2 lags"});
  if (data.m.cols() != static_cast<Eigen::Index>(data.schema.size()))
    out.push_back({"m", "modifier columns do not match schema"});

  auto check_finite = [&](const auto& mat, const char* name) {
    for (Eigen::Index i = 0; i < mat.rows(); ++i)
      for (Eigen::Index j = 0; j < mat.cols(); ++j)
        if (!std::isfinite(mat(i, j))) {
          out.push_back({std::string(name) + "[" + std::to_string(i + 1) + "," + std::to_string(j + 1) + "]",
                         "missing or non-finite value"});
          return;
        }
  };
  for (Eigen::Index i = 0; i < data.y.size(); ++i)
    if (!std::isfinite(data.y(i))) {
      out.push_back({"y[" + std::to_string(i + 1) + "]", "missing or non-finite value"});
      break;
    }
  check_finite(data.x, "x");
  check_finite(data.z, "z");

  bool has_ones = false;
  for (Eigen::Index j = 0; j < data.z.cols() && !has_ones; ++j)
    has_ones = data.z.rows() > 0 && (data.z.col(j).array() == 1.0).all();
  if (!has_ones) out.push_back({"z", "no constant column"});

  if (data.m.cols() == static_cast<Eigen::Index>(data.schema.size())) {
    for (Eigen::Index j = 0; j < data.m.cols(); ++j) {
      for (Eigen::Index i = 0; i < data.m.rows(); ++i) {
        if (!data.schema.conforms(static_cast<std::size_t>(j), data.m(i, j))) {
          out.push_back({"m[" + std::to_string(i + 1) + "," + data.schema[static_cast<std::size_t>(j)].name + "]",
                         "value does not conform to modifier kind"});
          break;
        }
      }
    }
  }
  return out;
}

Dataset load_dataset(std::istream& in, const ModifierSchema& schema, const ColumnMap& columns) {
  CsvTable table = read_csv(in);
  auto require = [&](const std::string& name) {
    int c = table.column(name);
    if (c < 0) throw DataError("missing column '" + name + "'");
    return c;
  };
  const int ycol = columns.outcome.empty() ? -1 : require(columns.outcome);
  std::vector<int> xcols, zcols, mcols;
  for (const auto& name : columns.exposures) xcols.push_back(require(name));
  for (const auto& name : columns.fixed) zcols.push_back(require(name));
  for (const auto& spec : schema.specs()) mcols.push_back(require(spec.name));
  if (xcols.size() < 2) throw DataError("need at least 2 exposure columns");

  const auto n = static_cast<Eigen::Index>(table.rows.size());
  if (n == 0) throw DataError("dataset has no rows (n = 0)");
  const auto T = static_cast<Eigen::Index>(xcols.size());
  const Eigen::Index p = static_cast<Eigen::Index>(zcols.size()) + (columns.add_intercept ? 1 : 0);
  const auto q = static_cast<Eigen::Index>(mcols.size());

  Dataset d;
  d.schema = schema;
  d.columns = columns;
  d.y.resize(n);
  d.x.resize(n, T);
  d.z.resize(n, p);
  d.m.resize(n, q);

  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = table.rows[static_cast<std::size_t>(i)];
    const std::string where = "row " + std::to_string(i + 1);
    auto cell = [&](int c) -> const std::string& {
      static const std::string blank;
      return static_cast<std::size_t>(c) < row.size() ? row[static_cast<std::size_t>(c)] : blank;
    };
    auto number = [&](int c) {
      const std::string& s = cell(c);
      if (is_missing(s)) throw DataError(where + ", column '" + table.header[static_cast<std::size_t>(c)] + "': missing value");
      double v;
      if (!parse_number(s, v))
        throw DataError(where + ", column '" + table.header[static_cast<std::size_t>(c)] + "': unparseable value '" + s + "'");
      return v;
    };
    d.y(i) = ycol < 0 ? 0.0 : number(ycol);
    for (Eigen::Index t = 0; t < T; ++t) d.x(i, t) = number(xcols[static_cast<std::size_t>(t)]);
    Eigen::Index zc = 0;
    if (columns.add_intercept) d.z(i, zc++) = 1.0;
    for (int c : zcols) d.z(i, zc++) = number(c);
    for (Eigen::Index j = 0; j < q; ++j) {
      const int c = mcols[static_cast<std::size_t>(j)];
      const std::string& s = cell(c);
      if (is_missing(s)) throw DataError(where + ", column '" + table.header[static_cast<std::size_t>(c)] + "': missing value");
      double v;
      if (!schema.encode(static_cast<std::size_t>(j), s, v))
        throw DataError(where + ", column '" + table.header[static_cast<std::size_t>(c)] + "': schema violation, value '" +
                        s + "' not valid for " + to_string(schema[static_cast<std::size_t>(j)].kind) + " modifier");
      d.m(i, j) = v;
    }
  }

  auto violations = validate(d);
  if (!violations.empty()) throw DataError(violations.front().where + ": " + violations.front().message);
  return d;
}

Dataset load_dataset(const std::string& csv_path, const ModifierSchema& schema, const ColumnMap& columns) {
  std::ifstream in(csv_path);
  if (!in) throw DataError("cannot open data file: " + csv_path);
  return load_dataset(in, schema, columns);
}

void write_dataset(const Dataset& data, std::ostream& out) {
  const ColumnMap& cm = data.columns;
  std::vector<std::string> header;
  header.push_back(cm.outcome);
  for (const auto& e : cm.exposures) header.push_back(e);
  for (const auto& f : cm.fixed) header.push_back(f);
  std::vector<int> extra_mods;
  std::vector<int> shared_mod_to_z(data.schema.size(), -1);
  for (std::size_t j = 0; j < data.schema.size(); ++j) {
    auto it = std::find(cm.fixed.begin(), cm.fixed.end(), data.schema[j].name);
    if (it == cm.fixed.end()) {
      header.push_back(data.schema[j].name);
      extra_mods.push_back(static_cast<int>(j));
    } else {
      shared_mod_to_z[j] = static_cast<int>(it - cm.fixed.begin()) + (cm.add_intercept ? 1 : 0);
    }
  }
  if (cm.exposures.size() != static_cast<std::size_t>(data.x.cols()))
    throw DataError("write_dataset: exposure names do not match the exposure matrix");
  for (std::size_t k = 0; k < header.size(); ++k) out << (k ? "," : "") << csv_escape(header[k]);
  out << "\n";
  for (Eigen::Index i = 0; i < data.n(); ++i) {
    out << format_number(data.y(i));
    for (Eigen::Index t = 0; t < data.x.cols(); ++t) out << ',' << format_number(data.x(i, t));
    const Eigen::Index z0 = cm.add_intercept ? 1 : 0;
    for (Eigen::Index c = z0; c < data.z.cols(); ++c) out << ',' << format_number(data.z(i, c));
    for (std::size_t j = 0; j < data.schema.size(); ++j) {
      if (shared_mod_to_z[j] >= 0) {
        std::string a = data.schema.decode(j, data.m(i, static_cast<Eigen::Index>(j)));
        std::string b = format_number(data.z(i, shared_mod_to_z[j]));
        if (a != b)
          throw DataError("write_dataset: column '" + data.schema[j].name + "' differs between Z and modifiers");
      }
    }
    for (int j : extra_mods)
      out << ',' << csv_escape(data.schema.decode(static_cast<std::size_t>(j), data.m(i, j)));
    out << "\n";
  }
}

void write_dataset(const Dataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write file: " + path);
  write_dataset(data, out);
}

RowMatrix generate_exposures(Eigen::Index n, Eigen::Index lags, const ExposureProcess& proc, std::uint64_t seed) {
  if (n < 1 || lags < 2) throw UsageError("generate_exposures: need n >= 1 and T >= 2");
  if (!(proc.sd > 0) || !std::isfinite(proc.sd)) throw UsageError("generate_exposures: sd must be positive");
  if (!(proc.rho >= 0 && proc.rho < 1)) throw UsageError("generate_exposures: rho must lie in [0, 1)");
  Rng rng(seed);
  RowMatrix x(n, lags);
  const double innov = proc.sd * std::sqrt(1.0 - proc.rho * proc.rho);
  for (Eigen::Index i = 0; i < n; ++i) {
    double dev = proc.sd * rng.normal();
    x(i, 0) = proc.mean + dev;
    for (Eigen::Index t = 1; t < lags; ++t) {
      dev = proc.rho * dev + innov * rng.normal();
      x(i, t) = proc.mean + dev;
    }
  }
  return x;
}

}  // namespace hdlm
