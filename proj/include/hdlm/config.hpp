#pragma once

#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "hdlm/data.hpp"
#include "hdlm/samplers.hpp"
#include "hdlm/simulation.hpp"

namespace hdlm {

/// Settings shared by the command-line tool. Read from a text file of
/// `key = value` lines ('#' starts a comment); command-line flags are applied
/// afterwards with the same keys. Unknown keys are rejected. See the README
/// for the full key list and defaults.
struct RunConfig {
  RunConfig() { fit.progress_every = 500; }

  // input
  std::string data;
  std::string schema;
  std::string outcome = "y";
  std::vector<std::string> exposures;
  std::vector<std::string> fixed;
  bool intercept = true;
  /// Modifier names to offer the trees; empty means every schema modifier.
  std::vector<std::string> modifiers;

  FitConfig fit;

  // output
  std::string output;  ///< empty: $HDLM_OUTPUT_DIR, else "hdlm-output"
  double ci_level = 0.95;
  /// (label, predicate) pairs for subgroup curves.
  std::vector<std::pair<std::string, std::string>> subgroups;
  /// Summarise subgroups at a representative row instead of averaging.
  bool representative = false;
  double dx = 1.0;  ///< exposure increment for cumulative effects

  // simulation study
  ScenarioSpec scenario;
  int replicates = 100;
  std::vector<ModelKind> models{ModelKind::tdlm, ModelKind::gp_dlm, ModelKind::hdlm_nested, ModelKind::hdlm_shared,
                                ModelKind::hdlm_gp};

  /// Applies one setting; throws UsageError on an unknown key or bad value.
  void set(const std::string& key, const std::string& value);
  ColumnMap column_map() const;
  std::string output_dir() const;
  StudyConfig study() const;
  /// Every key with its current value, in the file format.
  std::string to_text() const;
};

RunConfig parse_config(std::istream& in);
RunConfig load_config(const std::string& path);

/// Expands "x1..x37" ranges inside a comma-separated list.
std::vector<std::string> expand_names(const std::string& list);

}  // namespace hdlm
