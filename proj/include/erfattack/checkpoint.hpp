#pragma once

#include <filesystem>
#include <iosfwd>

#include "erfattack/graph.hpp"

namespace erfattack {

// Binary layout, all integers and floats little-endian:
//
//   "ERFGRAPH"                      8-byte magic
//   u32 version (1)
//   u32 input_channels
//   u32 node_count
//   per node:
//     u32 op kind, i32 input node, u32 rank, u64 dims[rank],
//     f64 weights[prod(dims)]       (rank 0 for weightless ops)
//   u32 output_count, i32 outputs[output_count]
void write_checkpoint(std::ostream& out, const Graph& graph);
Graph read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const Graph& graph);
Graph load_checkpoint(const std::filesystem::path& path);

}  // namespace erfattack
