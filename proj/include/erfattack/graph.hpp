#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "erfattack/tensor.hpp"

namespace erfattack {

/// The fixed primitive set. Convolutions are stride 1 with zero "same"
/// padding and odd square kernels; max pooling is 2x2 with stride 2.
enum class OpKind : std::uint32_t {
  Conv2d = 1,
  BiasAdd = 2,
  Relu = 3,
  Sigmoid = 4,
  MaxPool2 = 5,
};

const char* op_name(OpKind kind);

struct Node {
  OpKind kind;
  int input;       // index of the producing node, -1 for the graph input
  Tensor weights;  // Conv2d: [out, in, k, k]; BiasAdd: [channels]; otherwise empty
  std::size_t channels = 0;  // output channels
};

/// A feed-forward DAG over the primitive set with one input and one or more
/// outputs. Nodes are appended in topological order; channel counts are
/// validated as nodes are added. Spatial size is bound per evaluation, so one
/// graph serves images of any size that survives its pooling stages.
class Graph {
 public:
  explicit Graph(std::size_t input_channels);

  int add_conv(int input, Tensor weights);
  int add_bias(int input, Tensor bias);
  int add_relu(int input);
  int add_sigmoid(int input);
  int add_maxpool2(int input);
  void add_output(int node);

  std::size_t input_channels() const noexcept { return input_channels_; }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  std::vector<Node>& nodes() noexcept { return nodes_; }
  const std::vector<int>& outputs() const noexcept { return outputs_; }

  /// Number of 2x2 pooling stages on the path to `node`.
  int pool_depth(int node) const;
  /// Smallest spatial side an input may have.
  std::size_t min_input_side() const;
  /// Output shape of every node for an input of the given shape.
  std::vector<Shape> infer_shapes(const Shape& input_shape) const;

  std::size_t parameter_count() const;

  bool operator==(const Graph& other) const;

 private:
  std::size_t channels_of(int node) const;
  int push(Node node);

  std::size_t input_channels_;
  std::vector<Node> nodes_;
  std::vector<int> outputs_;
};

/// Every node's value from one forward evaluation.
struct Activations {
  Tensor input;
  std::vector<Tensor> values;
};

struct Gradients {
  Tensor input;
  std::vector<Tensor> weights;  // aligned with graph nodes; empty for weightless ops
};

/// Runs the graph and returns one tensor per output, in output order.
std::vector<Tensor> forward(const Graph& graph, const Tensor& input);
Activations forward_cached(const Graph& graph, const Tensor& input);
std::vector<Tensor> outputs_of(const Graph& graph, const Activations& acts);

/// d/dX of sum_k <cotangent_k, output_k>. An empty cotangent tensor stands for
/// all zeros. Work is restricted to the bounding box of nonzero cotangents, so
/// a cotangent concentrated on a few cells costs only their receptive fields.
Tensor backward_to_input(const Graph& graph, const Activations& acts,
                         std::span<const Tensor> output_cotangents);
Tensor backward_to_input(const Graph& graph, const Tensor& input,
                         std::span<const Tensor> output_cotangents);

/// Input and weight gradients of sum_k <cotangent_k, output_k>.
Gradients backward(const Graph& graph, const Activations& acts,
                   std::span<const Tensor> output_cotangents);

/// w <- w - learning_rate * g for every weighted node.
void sgd_step(Graph& graph, std::span<const Tensor> weight_gradients, double learning_rate);

}  // namespace erfattack
