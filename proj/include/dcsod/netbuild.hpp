#pragma once

// Compiles an Architecture into an executable Network:
//   stem conv3x3 -> [stage 1: 3 cells] -> transition -> [stage 2] ->
//   transition -> [stage 3] -> global average pool -> linear head.
// Inside a cell every vertex consumes the channel concat of its predecessors
// (or the cell input when it has none) and emits C_s channels; the cell output
// concatenates the leaf vertices and projects back to C_s with a 1x1 conv.
// Transitions are 2x2 average pool + 1x1 conv to the next stage width.
// Every conv is followed by channel norm and ReLU; depthwise vertices run
// depthwise kxk then pointwise 1x1 to C_s before the norm.

#include <array>
#include <string>
#include <vector>

#include "dcsod/graph.hpp"
#include "dcsod/searchspace.hpp"

namespace dcsod {

struct InputSpec {
  int channels = 1;
  int height = 16;
  int width = 16;
};

inline constexpr std::array<int, 3> kDefaultStageWidths{16, 32, 64};
inline constexpr int kCellsPerStage = 3;

namespace detail {

template <class S>
int build_vertex_op(Network<S>& net, const std::string& name, OperatorKind op, int in_node,
                    int in_ch, int out_ch) {
  const int kernel = operator_kernel(op);
  int node;
  if (operator_is_depthwise(op)) {
    node = net.depthwise(in_node, name + ".dw", in_ch, kernel);
    node = net.conv(node, name + ".pw", in_ch, out_ch, 1);
  } else {
    node = net.conv(in_node, name + ".conv", in_ch, out_ch, kernel);
  }
  node = net.norm(node, name + ".norm", out_ch);
  return net.relu(node);
}

template <class S>
int build_cell(Network<S>& net, const CellDag& cell, int input_node, int width,
               const std::string& prefix) {
  const CellValidation v = validate(cell);
  if (!v.ok) throw config_error("cannot compile invalid cell: " + v.error);
  std::vector<int> vertex_node(size_t(cell.k) + 1, -1);
  for (int vtx = 1; vtx <= cell.k; ++vtx) {
    std::vector<int> preds;
    for (const auto& e : cell.edges)
      if (e.second == vtx) preds.push_back(vertex_node[size_t(e.first)]);
    if (preds.empty()) preds.push_back(input_node);  // implicit v0 input
    const int in_ch = int(preds.size()) * width;
    const int in_node = net.concat(preds);
    vertex_node[size_t(vtx)] =
        build_vertex_op(net, prefix + ".v" + std::to_string(vtx),
                        cell.operator_assignment[size_t(vtx - 1)], in_node, in_ch, width);
  }
  std::vector<int> leaf_nodes;
  for (int leaf : v.leaves) leaf_nodes.push_back(vertex_node[size_t(leaf)]);
  const int cat = net.concat(leaf_nodes);
  int out = net.conv(cat, prefix + ".project", int(v.leaves.size()) * width, width, 1);
  out = net.norm(out, prefix + ".project.norm", width);
  return net.relu(out);
}

}  // namespace detail

template <class S = float>
Network<S> compile(const Architecture& arch, const InputSpec& input, int class_count,
                   const std::array<int, 3>& stage_widths = kDefaultStageWidths,
                   uint64_t seed = 0) {
  validate_architecture(arch);
  if (class_count < 2) throw config_error("compile needs class_count >= 2");
  if (input.height % 4 || input.width % 4)
    throw config_error("input spatial size must be divisible by 4 (two downsamples)");
  for (int w : stage_widths)
    if (w <= 0) throw config_error("stage widths must be positive");

  Network<S> net;
  int node = net.add_input();
  node = net.conv(node, "stem.conv", input.channels, stage_widths[0], 3);
  node = net.norm(node, "stem.norm", stage_widths[0]);
  node = net.relu(node);

  for (int s = 0; s < 3; ++s) {
    const std::string sp = "s" + std::to_string(s + 1);
    if (s > 0) {
      node = net.avgpool2(node);
      node = net.conv(node, sp + ".transition.conv", stage_widths[size_t(s - 1)],
                      stage_widths[size_t(s)], 1);
      node = net.norm(node, sp + ".transition.norm", stage_widths[size_t(s)]);
      node = net.relu(node);
    }
    for (int c = 0; c < kCellsPerStage; ++c) {
      node = detail::build_cell(net, arch.cells[size_t(s)], node, stage_widths[size_t(s)],
                                sp + ".c" + std::to_string(c + 1));
    }
  }

  node = net.global_avg_pool(node);
  net.mark_features(node);
  node = net.linear(node, "head", stage_widths[2], class_count);
  net.mark_logits(node);
  net.init_params(seed);
  return net;
}

}  // namespace dcsod
