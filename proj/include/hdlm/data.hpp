#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace hdlm {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class ModifierKind { continuous, ordinal, nominal, binary };

const char* to_string(ModifierKind kind);
ModifierKind modifier_kind_from(const std::string& text);

struct ModifierSpec {
  std::string name;
  ModifierKind kind = ModifierKind::continuous;
  /// Ordered labels for ordinal, unordered for nominal, the two levels for binary.
  std::vector<std::string> categories;
};

/// Typed description of the modifier columns.
///
/// Text form, one modifier per line (blank lines and '#' comments ignored):
///
///     age      = continuous
///     smoking  = ordinal: never, former, light, heavy
///     race     = nominal: a, b, c, d
///     hispanic = binary: no, yes
///
/// A binary modifier without labels uses the levels "0" and "1".
class ModifierSchema {
 public:
  ModifierSchema() = default;
  explicit ModifierSchema(std::vector<ModifierSpec> specs);

  static ModifierSchema parse(std::istream& in);
  static ModifierSchema load(const std::string& path);
  std::string to_text() const;

  std::size_t size() const { return specs_.size(); }
  bool empty() const { return specs_.empty(); }
  const ModifierSpec& operator[](std::size_t j) const { return specs_[j]; }
  const std::vector<ModifierSpec>& specs() const { return specs_; }
  int index_of(const std::string& name) const;

  /// Number of categories for categorical kinds, 0 for continuous.
  int levels(std::size_t j) const;

  /// Maps a cell to its numeric code (raw value, category rank or index).
  /// Returns false when the cell does not conform to the modifier's kind.
  bool encode(std::size_t j, const std::string& cell, double& out) const;
  std::string decode(std::size_t j, double code) const;
  bool conforms(std::size_t j, double code) const;

  /// Schema containing only the listed modifiers, in the listed order.
  ModifierSchema subset(const std::vector<int>& keep) const;

  friend bool operator==(const ModifierSchema& a, const ModifierSchema& b);

 private:
  void check() const;
  std::vector<ModifierSpec> specs_;
};

bool operator==(const ModifierSpec& a, const ModifierSpec& b);

/// Which file columns play which role.
struct ColumnMap {
  /// Empty when reading rows to predict for; y is then all zeros.
  std::string outcome = "y";
  /// Exposure columns in lag order 1..T, regardless of their order in the file.
  std::vector<std::string> exposures;
  /// Fixed-effect columns (numeric). May overlap with modifier columns.
  std::vector<std::string> fixed;
  /// Prepend a generated all-ones column to Z (not read from or written to file).
  bool add_intercept = false;
};

struct Dataset {
  Eigen::VectorXd y;
  RowMatrix x;          ///< n x T, column t-1 is lag t
  Eigen::MatrixXd z;    ///< n x p fixed-effect design
  Eigen::MatrixXd m;    ///< n x q encoded modifiers
  ModifierSchema schema;
  ColumnMap columns;

  Eigen::Index n() const { return y.size(); }
  Eigen::Index lags() const { return x.cols(); }
  Eigen::Index modifiers() const { return m.cols(); }

  /// Copy restricted to the given modifier columns (fixed effects untouched).
  Dataset with_modifiers(const std::vector<int>& keep) const;
  /// Copy restricted to rows [begin, end).
  Dataset rows(Eigen::Index begin, Eigen::Index end) const;
};

struct Violation {
  std::string where;
  std::string message;
};

/// Every invariant violation, in a stable order. Empty means valid.
std::vector<Violation> validate(const Dataset& data);

/// Reads and validates a dataset; throws DataError with row/column context.
Dataset load_dataset(const std::string& csv_path, const ModifierSchema& schema, const ColumnMap& columns);
Dataset load_dataset(std::istream& in, const ModifierSchema& schema, const ColumnMap& columns);

/// Writes y, exposures, fixed effects and modifiers at full precision. A
/// column shared between Z and the modifiers is written once.
void write_dataset(const Dataset& data, std::ostream& out);
void write_dataset(const Dataset& data, const std::string& path);

/// Stationary AR(1) on the log scale.
struct ExposureProcess {
  double mean = 1.97;
  double sd = 0.30;
  double rho = 0.7;
};

RowMatrix generate_exposures(Eigen::Index n, Eigen::Index lags, const ExposureProcess& proc,
                             std::uint64_t seed);

}  // namespace hdlm
