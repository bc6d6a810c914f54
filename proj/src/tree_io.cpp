#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>

#include "hdlm/csv.hpp"
#include "hdlm/error.hpp"
#include "hdlm/trees.hpp"

namespace hdlm {

namespace {

void write_dlm_nodes(std::ostream& out, const DlmTree& t, int idx) {
  const auto& n = t.node(idx);
  if (n.leaf()) {
    out << "D L " << n.begin << ' ' << n.end << ' ' << format_number(n.effect) << '\n';
    return;
  }
  out << "D I " << n.split << '\n';
  write_dlm_nodes(out, t, n.left);
  write_dlm_nodes(out, t, n.right);
}

std::vector<std::string> next_tokens(std::istream& in, const char* what) {
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::vector<std::string> tok;
    std::string s;
    while (ss >> s) tok.push_back(s);
    return tok;
  }
  throw DataError(std::string("unexpected end of input while reading ") + what);
}

double to_double(const std::string& s) {
  double v;
  if (!parse_number(s, v)) throw DataError("tree record: bad number '" + s + "'");
  return v;
}

int to_int(const std::string& s) {
  double v = to_double(s);
  if (v != static_cast<int>(v)) throw DataError("tree record: expected integer, got '" + s + "'");
  return static_cast<int>(v);
}

void read_dlm_records(std::istream& in, std::vector<int>& splits, std::vector<double>& effects) {
  auto tok = next_tokens(in, "DLM tree");
  if (tok.size() < 2 || tok[0] != "D") throw DataError("tree record: expected a DLM node line");
  if (tok[1] == "I" && tok.size() == 3) {
    splits.push_back(to_int(tok[2]));
    read_dlm_records(in, splits, effects);
    read_dlm_records(in, splits, effects);
  } else if (tok[1] == "L" && tok.size() == 5) {
    splits.push_back(0);
    effects.push_back(to_double(tok[4]));
  } else {
    throw DataError("tree record: malformed DLM node line");
  }
}

void read_modifier_records(std::istream& in, int lags, std::vector<ModifierTree::Record>& out) {
  auto tok = next_tokens(in, "modifier tree");
  if (tok.size() < 2 || tok[0] != "M") throw DataError("tree record: expected a modifier node line");
  ModifierTree::Record rec;
  if (tok[1] == "I") {
    if (tok.size() < 4) throw DataError("tree record: malformed modifier rule");
    rec.leaf = false;
    rec.rule.modifier = to_int(tok[2]);
    if (tok[3] == "T" && tok.size() == 5) {
      rec.rule.kind = RuleKind::threshold;
      rec.rule.threshold = to_double(tok[4]);
    } else if (tok[3] == "S" && tok.size() == 5) {
      rec.rule.kind = RuleKind::subset;
      rec.rule.left_set = std::stoull(tok[4], nullptr, 16);
    } else if (tok[3] == "B" && tok.size() == 4) {
      rec.rule.kind = RuleKind::binary;
    } else {
      throw DataError("tree record: unknown rule kind");
    }
    out.push_back(std::move(rec));
    read_modifier_records(in, lags, out);
    read_modifier_records(in, lags, out);
    return;
  }
  if (tok[1] != "L" || tok.size() < 3) throw DataError("tree record: malformed modifier leaf");
  if (tok[2] == "D") {
    std::vector<int> splits;
    std::vector<double> effects;
    read_dlm_records(in, splits, effects);
    auto dlm = DlmTree::try_preorder(lags, splits, effects);
    if (!dlm) throw DataError("tree record: inconsistent DLM tree");
    rec.lag.dlm = std::move(*dlm);
  } else if (tok[2] == "G") {
    if (tok.size() != static_cast<std::size_t>(lags) + 3) throw DataError("tree record: curve length differs from T");
    for (std::size_t k = 3; k < tok.size(); ++k) rec.lag.curve.push_back(to_double(tok[k]));
  } else {
    throw DataError("tree record: unknown leaf kind");
  }
  out.push_back(std::move(rec));
}

}  // namespace

void write_tree(std::ostream& out, const DlmTree& tree) { write_dlm_nodes(out, tree, 0); }

void write_tree(std::ostream& out, const ModifierTree& tree) {
  for (const auto& n : tree.nodes()) {
    if (!n.leaf()) {
      out << "M I " << n.rule.modifier;
      switch (n.rule.kind) {
        case RuleKind::threshold: out << " T " << format_number(n.rule.threshold); break;
        case RuleKind::subset: {
          char buf[32];
          std::snprintf(buf, sizeof(buf), "%llx", static_cast<unsigned long long>(n.rule.left_set));
          out << " S " << buf;
          break;
        }
        case RuleKind::binary: out << " B"; break;
      }
      out << '\n';
    } else if (n.lag.is_curve()) {
      out << "M L G";
      for (double v : n.lag.curve) out << ' ' << format_number(v);
      out << '\n';
    } else {
      out << "M L D\n";
      write_tree(out, n.lag.dlm);
    }
  }
}

DlmTree read_dlm_tree(std::istream& in, int lags) {
  std::vector<int> splits;
  std::vector<double> effects;
  read_dlm_records(in, splits, effects);
  auto t = DlmTree::try_preorder(lags, splits, effects);
  if (!t) throw DataError("tree record: inconsistent DLM tree");
  return *t;
}

ModifierTree read_modifier_tree(std::istream& in, int lags) {
  std::vector<ModifierTree::Record> records;
  read_modifier_records(in, lags, records);
  return ModifierTree::from_preorder(std::move(records));
}

}  // namespace hdlm
