#pragma once

// Dense-connectivity search space: three independent cell DAGs (one per
// stage), each over k operator vertices with searched edges (i,j), i<j.
// A vertex with no incoming searched edge implicitly reads the cell input,
// and every vertex with no outgoing edge is a leaf collected by the cell
// output. The space therefore has exactly 2^(3k(k-1)/2) members.

#include <algorithm>
#include <array>
#include <string>
#include <utility>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>
#include <json.hpp>

#include "dcsod/common.hpp"

namespace dcsod {

enum class OperatorKind { Conv1x1, Conv3x3, Conv5x5, DWConv3x3, DWConv5x5 };
inline constexpr int kOperatorKinds = 5;

inline const char* to_string(OperatorKind op) {
  switch (op) {
    case OperatorKind::Conv1x1: return "Conv1x1";
    case OperatorKind::Conv3x3: return "Conv3x3";
    case OperatorKind::Conv5x5: return "Conv5x5";
    case OperatorKind::DWConv3x3: return "DWConv3x3";
    case OperatorKind::DWConv5x5: return "DWConv5x5";
  }
  return "?";
}

inline OperatorKind operator_from_string(const std::string& s) {
  for (int i = 0; i < kOperatorKinds; ++i)
    if (s == to_string(OperatorKind(i))) return OperatorKind(i);
  throw config_error("unknown operator kind: " + s);
}

inline int operator_kernel(OperatorKind op) {
  switch (op) {
    case OperatorKind::Conv1x1: return 1;
    case OperatorKind::Conv3x3: return 3;
    case OperatorKind::Conv5x5: return 5;
    case OperatorKind::DWConv3x3: return 3;
    case OperatorKind::DWConv5x5: return 5;
  }
  return 0;
}

inline bool operator_is_depthwise(OperatorKind op) {
  return op == OperatorKind::DWConv3x3 || op == OperatorKind::DWConv5x5;
}

// Canonical cyclic assignment: vertex i (1-based) runs operator (i-1) mod 5.
inline OperatorKind canonical_operator(int vertex) {
  return OperatorKind((vertex - 1) % kOperatorKinds);
}

struct CellDag {
  int k = 0;
  // Sorted row-major upper-triangular order: (1,2),(1,3)...(1,k),(2,3),...
  std::vector<std::pair<int, int>> edges;
  std::vector<OperatorKind> operator_assignment;

  bool operator==(const CellDag& o) const {
    return k == o.k && edges == o.edges && operator_assignment == o.operator_assignment;
  }
};

inline int edge_universe_size(int k) { return k * (k - 1) / 2; }

// Position of edge (i,j) in row-major upper-triangular order, 0-based.
inline int edge_index(int k, int i, int j) { return (i - 1) * k - i * (i + 1) / 2 + j - 1; }

inline std::pair<int, int> edge_at(int k, int index) {
  for (int i = 1; i < k; ++i) {
    const int row = k - i;
    if (index < row) return {i, i + 1 + index};
    index -= row;
  }
  throw internal_error("edge index out of range");
}

inline std::vector<OperatorKind> canonical_assignment(int k) {
  std::vector<OperatorKind> ops(static_cast<size_t>(k));
  for (int i = 1; i <= k; ++i) ops[size_t(i - 1)] = canonical_operator(i);
  return ops;
}

struct CellValidation {
  bool ok = true;
  std::string error;
  std::pair<int, int> bad_edge{0, 0};
  std::vector<int> leaves;           // out-degree-0 vertices; what the output concatenates
  std::vector<int> implicit_inputs;  // in-degree-0 vertices; read the cell input
};

inline CellValidation validate(const CellDag& cell) {
  CellValidation r;
  if (cell.k < 2) {
    r.ok = false;
    r.error = "cell needs k >= 2";
    return r;
  }
  if (int(cell.operator_assignment.size()) != cell.k) {
    r.ok = false;
    r.error = "operator assignment length != k";
    return r;
  }
  std::vector<char> seen(size_t(edge_universe_size(cell.k)), 0);
  std::vector<int> in_deg(size_t(cell.k) + 1, 0), out_deg(size_t(cell.k) + 1, 0);
  for (const auto& e : cell.edges) {
    if (e.first < 1 || e.second > cell.k || e.first >= e.second) {
      r.ok = false;
      r.error = "edge violates 1 <= i < j <= k";
      r.bad_edge = e;
      return r;
    }
    char& s = seen[size_t(edge_index(cell.k, e.first, e.second))];
    if (s) {
      r.ok = false;
      r.error = "duplicate edge";
      r.bad_edge = e;
      return r;
    }
    s = 1;
    out_deg[size_t(e.first)]++;
    in_deg[size_t(e.second)]++;
  }
  for (int v = 1; v <= cell.k; ++v) {
    if (out_deg[size_t(v)] == 0) r.leaves.push_back(v);
    if (in_deg[size_t(v)] == 0) r.implicit_inputs.push_back(v);
  }
  return r;
}

struct Architecture {
  std::array<CellDag, 3> cells;

  int k() const { return cells[0].k; }
  bool operator==(const Architecture& o) const { return cells == o.cells; }
};

inline void validate_architecture(const Architecture& arch) {
  for (int s = 0; s < 3; ++s) {
    if (arch.cells[size_t(s)].k != arch.k())
      throw config_error("all stages must share the same k");
    CellValidation v = validate(arch.cells[size_t(s)]);
    if (!v.ok)
      throw config_error("stage " + std::to_string(s + 1) + " cell invalid: " + v.error);
  }
}

inline boost::multiprecision::cpp_int space_size(int k) {
  if (k < 2) throw config_error("space_size requires k >= 2");
  return boost::multiprecision::pow(boost::multiprecision::cpp_int(2), unsigned(3 * edge_universe_size(k)));
}

inline void sort_edges(CellDag& cell) {
  std::sort(cell.edges.begin(), cell.edges.end(),
            [&](const std::pair<int, int>& a, const std::pair<int, int>& b) {
              return edge_index(cell.k, a.first, a.second) <
                     edge_index(cell.k, b.first, b.second);
            });
}

inline CellDag sample_cell(int k, double edge_probability, Rng& rng) {
  CellDag cell;
  cell.k = k;
  cell.operator_assignment = canonical_assignment(k);
  for (int i = 1; i < k; ++i)
    for (int j = i + 1; j <= k; ++j)
      if (rng.bernoulli(edge_probability)) cell.edges.emplace_back(i, j);
  return cell;
}

inline Architecture sample_random(int k, double edge_probability, uint64_t seed) {
  if (k < 2) throw config_error("sample_random requires k >= 2");
  if (edge_probability < 0 || edge_probability > 1)
    throw config_error("edge_probability must be in [0,1]");
  Rng rng(derive_seed(seed, {0x5a17u}));
  Architecture arch;
  for (int s = 0; s < 3; ++s) arch.cells[size_t(s)] = sample_cell(k, edge_probability, rng);
  return arch;
}

// Flips exactly one candidate-edge bit in exactly one cell.
inline Architecture mutate_edge(const Architecture& arch, uint64_t seed) {
  Rng rng(derive_seed(seed, {0xed6eu}));
  Architecture out = arch;
  const int stage = int(rng.below(3));
  CellDag& cell = out.cells[size_t(stage)];
  const int m = edge_universe_size(cell.k);
  const auto edge = edge_at(cell.k, int(rng.below(uint64_t(m))));
  auto it = std::find(cell.edges.begin(), cell.edges.end(), edge);
  if (it == cell.edges.end()) {
    cell.edges.push_back(edge);
    sort_edges(cell);
  } else {
    cell.edges.erase(it);
  }
  return out;
}

// Replaces one cell with a fresh random draw; the other two stay untouched.
inline Architecture mutate_resample(const Architecture& arch, uint64_t seed,
                                    double edge_probability = 0.5) {
  Rng rng(derive_seed(seed, {0x4e5au}));
  Architecture out = arch;
  const int stage = int(rng.below(3));
  out.cells[size_t(stage)] = sample_cell(arch.k(), edge_probability, rng);
  return out;
}

// Flat 0/1 text encoding: the three per-cell upper triangles in stage order.
using ArchEncoding = std::string;

inline ArchEncoding encode(const Architecture& arch) {
  const int m = edge_universe_size(arch.k());
  ArchEncoding bits(size_t(3 * m), '0');
  for (int s = 0; s < 3; ++s)
    for (const auto& e : arch.cells[size_t(s)].edges)
      bits[size_t(s * m + edge_index(arch.k(), e.first, e.second))] = '1';
  return bits;
}

inline Architecture decode(const ArchEncoding& bits, int k) {
  const int m = edge_universe_size(k);
  if (int(bits.size()) != 3 * m)
    throw config_error("encoding length " + std::to_string(bits.size()) + " does not match k=" +
                       std::to_string(k));
  Architecture arch;
  for (int s = 0; s < 3; ++s) {
    CellDag& cell = arch.cells[size_t(s)];
    cell.k = k;
    cell.operator_assignment = canonical_assignment(k);
    for (int idx = 0; idx < m; ++idx) {
      const char b = bits[size_t(s * m + idx)];
      if (b != '0' && b != '1') throw config_error("encoding must be a 0/1 string");
      if (b == '1') cell.edges.push_back(edge_at(k, idx));
    }
  }
  return arch;
}

inline CellDag canonical_cell(const std::string& kind, int k) {
  CellDag cell;
  cell.k = k;
  cell.operator_assignment = canonical_assignment(k);
  if (kind == "chain") {
    for (int i = 1; i < k; ++i) cell.edges.emplace_back(i, i + 1);
  } else if (kind == "dense") {
    for (int i = 1; i < k; ++i)
      for (int j = i + 1; j <= k; ++j) cell.edges.emplace_back(i, j);
  } else {
    throw config_error("canonical_cell kind must be chain or dense");
  }
  return cell;
}

inline Architecture canonical_architecture(const std::string& kind, int k) {
  Architecture arch;
  for (int s = 0; s < 3; ++s) arch.cells[size_t(s)] = canonical_cell(kind, k);
  return arch;
}

// Stable short identifier used in file names and records.
inline std::string arch_id(const Architecture& arch) {
  const ArchEncoding bits = encode(arch);
  uint64_t h = fnv1a64(bits);
  h = fnv1a64(&arch.cells[0].k, sizeof(int), h);
  return hex64(h);
}

inline constexpr int kArchSchemaVersion = 1;

inline nlohmann::json arch_to_json(const Architecture& arch) {
  nlohmann::json j;
  j["schema_version"] = kArchSchemaVersion;
  j["k"] = arch.k();
  nlohmann::json ops = nlohmann::json::array();
  for (OperatorKind op : arch.cells[0].operator_assignment) ops.push_back(to_string(op));
  j["operator_assignment"] = ops;
  nlohmann::json cells = nlohmann::json::array();
  for (int s = 0; s < 3; ++s) {
    nlohmann::json edges = nlohmann::json::array();
    for (const auto& e : arch.cells[size_t(s)].edges)
      edges.push_back(nlohmann::json::array({e.first, e.second}));
    cells.push_back(edges);
  }
  j["cells"] = cells;
  return j;
}

inline Architecture arch_from_json(const nlohmann::json& j) {
  if (j.value("schema_version", -1) != kArchSchemaVersion)
    throw config_error("unsupported architecture schema_version");
  const int k = j.at("k").get<int>();
  std::vector<OperatorKind> ops;
  for (const auto& s : j.at("operator_assignment"))
    ops.push_back(operator_from_string(s.get<std::string>()));
  if (int(ops.size()) != k) throw config_error("operator_assignment length != k");
  const auto& cells = j.at("cells");
  if (cells.size() != 3) throw config_error("architecture must have exactly 3 cells");
  Architecture arch;
  for (int s = 0; s < 3; ++s) {
    CellDag& cell = arch.cells[size_t(s)];
    cell.k = k;
    cell.operator_assignment = ops;
    for (const auto& e : cells[size_t(s)])
      cell.edges.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
    sort_edges(cell);
  }
  validate_architecture(arch);
  return arch;
}

}  // namespace dcsod
