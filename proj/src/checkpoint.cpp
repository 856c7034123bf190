#include "erfattack/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "erfattack/errors.hpp"

namespace erfattack {
namespace {

constexpr std::array<char, 8> kMagic{'E', 'R', 'F', 'G', 'R', 'A', 'P', 'H'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(bytes.data(), bytes.size());
}

template <typename T>
T get(std::istream& in) {
  std::array<char, sizeof(T)> bytes;
  if (!in.read(bytes.data(), bytes.size())) throw IoError("checkpoint truncated");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace

void write_checkpoint(std::ostream& out, const Graph& graph) {
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(graph.input_channels()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(graph.nodes().size()));
  for (const Node& node : graph.nodes()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(node.kind));
    put<std::int32_t>(out, node.input);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(node.weights.rank()));
    for (auto d : node.weights.shape()) put<std::uint64_t>(out, d);
    for (double v : node.weights.data()) put<double>(out, v);
  }
  put<std::uint32_t>(out, static_cast<std::uint32_t>(graph.outputs().size()));
  for (int o : graph.outputs()) put<std::int32_t>(out, o);
  if (!out) throw IoError("failed writing checkpoint");
}

Graph read_checkpoint(std::istream& in) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw IoError("not a graph checkpoint (bad magic)");
  }
  if (const auto version = get<std::uint32_t>(in); version != kVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  Graph graph(get<std::uint32_t>(in));
  const auto count = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto kind = static_cast<OpKind>(get<std::uint32_t>(in));
    const auto input = get<std::int32_t>(in);
    const auto rank = get<std::uint32_t>(in);
    if (rank > 4) throw IoError("implausible tensor rank in checkpoint");
    Tensor weights;
    if (rank > 0) {
      Shape shape(rank);
      for (auto& d : shape) {
        d = get<std::uint64_t>(in);
        if (d == 0 || d > (1u << 20)) throw IoError("implausible tensor dimension in checkpoint");
      }
      std::vector<double> data(shape_size(shape));
      for (auto& v : data) v = get<double>(in);
      weights = Tensor(std::move(shape), std::move(data));
    }
    try {
      switch (kind) {
        case OpKind::Conv2d: graph.add_conv(input, std::move(weights)); break;
        case OpKind::BiasAdd: graph.add_bias(input, std::move(weights)); break;
        case OpKind::Relu: graph.add_relu(input); break;
        case OpKind::Sigmoid: graph.add_sigmoid(input); break;
        case OpKind::MaxPool2: graph.add_maxpool2(input); break;
        default: throw IoError("unknown op kind " + std::to_string(static_cast<unsigned>(kind)));
      }
    } catch (const ConfigError& e) {
      throw IoError(std::string("inconsistent checkpoint: ") + e.what());
    }
  }
  const auto n_out = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n_out; ++i) {
    try {
      graph.add_output(get<std::int32_t>(in));
    } catch (const ConfigError& e) {
      throw IoError(std::string("inconsistent checkpoint: ") + e.what());
    }
  }
  return graph;
}

void save_checkpoint(const std::filesystem::path& path, const Graph& graph) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_checkpoint(out, graph);
}

Graph load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

}  // namespace erfattack
