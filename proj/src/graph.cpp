#include "erfattack/graph.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "erfattack/errors.hpp"

namespace erfattack {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Conv2d: return "conv2d";
    case OpKind::BiasAdd: return "bias_add";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::MaxPool2: return "maxpool2";
  }
  return "unknown";
}

Graph::Graph(std::size_t input_channels) : input_channels_(input_channels) {
  if (input_channels == 0) throw ConfigError("graph input needs at least one channel");
}

std::size_t Graph::channels_of(int node) const {
  if (node == -1) return input_channels_;
  if (node < -1 || node >= static_cast<int>(nodes_.size())) {
    throw ConfigError("node " + std::to_string(node) + " does not exist yet");
  }
  return nodes_[node].channels;
}

int Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<int>(nodes_.size()) - 1;
}

int Graph::add_conv(int input, Tensor weights) {
  const std::size_t in_ch = channels_of(input);
  if (weights.rank() != 4 || weights.dim(2) != weights.dim(3) || weights.dim(2) % 2 == 0) {
    throw ConfigError("conv2d weights must be [out, in, k, k] with odd k, got " +
                      shape_string(weights.shape()));
  }
  if (weights.dim(1) != in_ch) {
    throw ConfigError("conv2d expects " + std::to_string(weights.dim(1)) +
                      " input channels but producer has " + std::to_string(in_ch));
  }
  const std::size_t out_ch = weights.dim(0);
  return push({OpKind::Conv2d, input, std::move(weights), out_ch});
}

int Graph::add_bias(int input, Tensor bias) {
  const std::size_t ch = channels_of(input);
  if (bias.rank() != 1 || bias.dim(0) != ch) {
    throw ConfigError("bias must be [" + std::to_string(ch) + "], got " +
                      shape_string(bias.shape()));
  }
  return push({OpKind::BiasAdd, input, std::move(bias), ch});
}

int Graph::add_relu(int input) { return push({OpKind::Relu, input, {}, channels_of(input)}); }

int Graph::add_sigmoid(int input) {
  return push({OpKind::Sigmoid, input, {}, channels_of(input)});
}

int Graph::add_maxpool2(int input) {
  return push({OpKind::MaxPool2, input, {}, channels_of(input)});
}

void Graph::add_output(int node) {
  if (node < 0 || node >= static_cast<int>(nodes_.size())) {
    throw ConfigError("output node " + std::to_string(node) + " does not exist");
  }
  outputs_.push_back(node);
}

int Graph::pool_depth(int node) const {
  int depth = 0;
  for (int n = node; n != -1; n = nodes_[n].input) {
    if (nodes_[n].kind == OpKind::MaxPool2) ++depth;
  }
  return depth;
}

std::size_t Graph::min_input_side() const {
  int depth = 0;
  for (int i = 0; i < static_cast<int>(nodes_.size()); ++i) depth = std::max(depth, pool_depth(i));
  return std::size_t{1} << depth;
}

std::vector<Shape> Graph::infer_shapes(const Shape& input_shape) const {
  if (input_shape.size() != 3 || input_shape[0] != input_channels_) {
    throw ConfigError("graph expects input [" + std::to_string(input_channels_) +
                      ", H, W], got " + shape_string(input_shape));
  }
  if (input_shape[1] < min_input_side() || input_shape[2] < min_input_side()) {
    throw ConfigError("input " + shape_string(input_shape) + " smaller than " +
                      std::to_string(min_input_side()) + " pixels");
  }
  std::vector<Shape> shapes;
  shapes.reserve(nodes_.size());
  for (const Node& node : nodes_) {
    const Shape& in = node.input == -1 ? input_shape : shapes[node.input];
    if (node.kind == OpKind::MaxPool2) {
      shapes.push_back({node.channels, in[1] / 2, in[2] / 2});
    } else {
      shapes.push_back({node.channels, in[1], in[2]});
    }
  }
  return shapes;
}

std::size_t Graph::parameter_count() const {
  std::size_t n = 0;
  for (const Node& node : nodes_) n += node.weights.size();
  return n;
}

bool Graph::operator==(const Graph& other) const {
  if (input_channels_ != other.input_channels_ || outputs_ != other.outputs_ ||
      nodes_.size() != other.nodes_.size()) {
    return false;
  }
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    const Node& a = nodes_[i];
    const Node& b = other.nodes_[i];
    if (a.kind != b.kind || a.input != b.input || a.channels != b.channels ||
        !(a.weights == b.weights)) {
      return false;
    }
  }
  return true;
}

namespace {

// Half-open bounding box of nonzero cotangent entries in one node's plane.
struct Region {
  std::size_t y0 = 0, y1 = 0, x0 = 0, x1 = 0;
  bool empty() const { return y0 >= y1 || x0 >= x1; }
};

Region unite(const Region& a, const Region& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  return {std::min(a.y0, b.y0), std::max(a.y1, b.y1), std::min(a.x0, b.x0),
          std::max(a.x1, b.x1)};
}

Region nonzero_region(const Tensor& t) {
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  Region r{h, 0, w, 0};
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      const double* row = t.raw() + (ch * h + y) * w;
      for (std::size_t x = 0; x < w; ++x) {
        if (row[x] != 0.0) {
          r.y0 = std::min(r.y0, y);
          r.y1 = std::max(r.y1, y + 1);
          r.x0 = std::min(r.x0, x);
          r.x1 = std::max(r.x1, x + 1);
        }
      }
    }
  }
  return r;
}

Region dilate(const Region& r, std::size_t pad, std::size_t h, std::size_t w) {
  if (r.empty()) return r;
  return {r.y0 > pad ? r.y0 - pad : 0, std::min(h, r.y1 + pad), r.x0 > pad ? r.x0 - pad : 0,
          std::min(w, r.x1 + pad)};
}

void conv_forward(const Tensor& in, const Tensor& weights, Tensor& out) {
  const std::size_t cin = in.dim(0), h = in.dim(1), w = in.dim(2);
  const std::size_t cout = weights.dim(0), k = weights.dim(2);
  const long pad = static_cast<long>(k / 2);
  const std::size_t plane = h * w;
  for (std::size_t oc = 0; oc < cout; ++oc) {
    double* o = out.raw() + oc * plane;
    std::fill(o, o + plane, 0.0);
    for (std::size_t ic = 0; ic < cin; ++ic) {
      const double* ip = in.raw() + ic * plane;
      const double* wk = weights.raw() + (oc * cin + ic) * k * k;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long dy = static_cast<long>(ky) - pad;
        const long ylo = std::max(0L, -dy);
        const long yhi = std::min(static_cast<long>(h), static_cast<long>(h) - dy);
        for (long y = ylo; y < yhi; ++y) {
          double* orow = o + y * w;
          const double* irow = ip + (y + dy) * static_cast<long>(w);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const long dx = static_cast<long>(kx) - pad;
            const double wv = wk[ky * k + kx];
            const long xlo = std::max(0L, -dx);
            const long xhi = std::min(static_cast<long>(w), static_cast<long>(w) - dx);
            const double* src = irow + dx;
            for (long x = xlo; x < xhi; ++x) orow[x] += wv * src[x];
          }
        }
      }
    }
  }
}

// Accumulates into d_in over the output region.
void conv_backward_input(const Tensor& d_out, const Tensor& weights, const Region& r,
                         Tensor& d_in) {
  const std::size_t cin = d_in.dim(0), h = d_in.dim(1), w = d_in.dim(2);
  const std::size_t cout = weights.dim(0), k = weights.dim(2);
  const long pad = static_cast<long>(k / 2);
  const std::size_t plane = h * w;
  for (std::size_t ic = 0; ic < cin; ++ic) {
    double* dip = d_in.raw() + ic * plane;
    for (std::size_t oc = 0; oc < cout; ++oc) {
      const double* dop = d_out.raw() + oc * plane;
      const double* wk = weights.raw() + (oc * cin + ic) * k * k;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long dy = static_cast<long>(ky) - pad;
        const long ylo = std::max(static_cast<long>(r.y0), -dy);
        const long yhi = std::min(static_cast<long>(r.y1), static_cast<long>(h) - dy);
        for (long y = ylo; y < yhi; ++y) {
          const double* grow = dop + y * static_cast<long>(w);
          double* drow = dip + (y + dy) * static_cast<long>(w);
          for (std::size_t kx = 0; kx < k; ++kx) {
            const long dx = static_cast<long>(kx) - pad;
            const double wv = wk[ky * k + kx];
            const long xlo = std::max(static_cast<long>(r.x0), -dx);
            const long xhi = std::min(static_cast<long>(r.x1), static_cast<long>(w) - dx);
            double* dst = drow + dx;
            for (long x = xlo; x < xhi; ++x) dst[x] += wv * grow[x];
          }
        }
      }
    }
  }
}

void conv_backward_weights(const Tensor& d_out, const Tensor& in, const Region& r,
                           Tensor& d_w) {
  const std::size_t cin = in.dim(0), h = in.dim(1), w = in.dim(2);
  const std::size_t cout = d_w.dim(0), k = d_w.dim(2);
  const long pad = static_cast<long>(k / 2);
  const std::size_t plane = h * w;
  for (std::size_t oc = 0; oc < cout; ++oc) {
    const double* dop = d_out.raw() + oc * plane;
    for (std::size_t ic = 0; ic < cin; ++ic) {
      const double* ip = in.raw() + ic * plane;
      double* gk = d_w.raw() + (oc * cin + ic) * k * k;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const long dy = static_cast<long>(ky) - pad;
        const long ylo = std::max(static_cast<long>(r.y0), -dy);
        const long yhi = std::min(static_cast<long>(r.y1), static_cast<long>(h) - dy);
        for (std::size_t kx = 0; kx < k; ++kx) {
          const long dx = static_cast<long>(kx) - pad;
          const long xlo = std::max(static_cast<long>(r.x0), -dx);
          const long xhi = std::min(static_cast<long>(r.x1), static_cast<long>(w) - dx);
          double acc = 0.0;
          for (long y = ylo; y < yhi; ++y) {
            const double* grow = dop + y * static_cast<long>(w);
            const double* irow = ip + (y + dy) * static_cast<long>(w) + dx;
            for (long x = xlo; x < xhi; ++x) acc += grow[x] * irow[x];
          }
          gk[ky * k + kx] += acc;
        }
      }
    }
  }
}

void maxpool_forward(const Tensor& in, Tensor& out) {
  const std::size_t c = in.dim(0), oh = out.dim(1), ow = out.dim(2);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const double a = in.at(ch, 2 * y, 2 * x), b = in.at(ch, 2 * y, 2 * x + 1);
        const double cc = in.at(ch, 2 * y + 1, 2 * x), d = in.at(ch, 2 * y + 1, 2 * x + 1);
        out.at(ch, y, x) = std::max(std::max(a, b), std::max(cc, d));
      }
    }
  }
}

// Routes each output cotangent to the first maximal element of its window,
// scanning the window in row-major order.
void maxpool_backward(const Tensor& d_out, const Tensor& in, const Region& r, Tensor& d_in) {
  const std::size_t c = d_out.dim(0);
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = r.y0; y < r.y1; ++y) {
      for (std::size_t x = r.x0; x < r.x1; ++x) {
        const double g = d_out.at(ch, y, x);
        if (g == 0.0) continue;
        std::size_t by = 2 * y, bx = 2 * x;
        double best = in.at(ch, by, bx);
        for (std::size_t k = 1; k < 4; ++k) {
          const std::size_t yy = 2 * y + k / 2, xx = 2 * x + k % 2;
          if (in.at(ch, yy, xx) > best) {
            best = in.at(ch, yy, xx);
            by = yy;
            bx = xx;
          }
        }
        d_in.at(ch, by, bx) += g;
      }
    }
  }
}

Tensor evaluate(const Node& node, const Tensor& in, const Shape& out_shape) {
  Tensor out(out_shape);
  switch (node.kind) {
    case OpKind::Conv2d:
      conv_forward(in, node.weights, out);
      break;
    case OpKind::BiasAdd: {
      const std::size_t plane = in.dim(1) * in.dim(2);
      for (std::size_t ch = 0; ch < in.dim(0); ++ch) {
        const double b = node.weights[ch];
        for (std::size_t i = 0; i < plane; ++i) out[ch * plane + i] = in[ch * plane + i] + b;
      }
      break;
    }
    case OpKind::Relu:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
      break;
    case OpKind::Sigmoid:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-in[i]));
      break;
    case OpKind::MaxPool2:
      maxpool_forward(in, out);
      break;
  }
  return out;
}

Gradients run_backward(const Graph& graph, const Activations& acts,
                       std::span<const Tensor> cotangents, bool want_weights) {
  const auto& nodes = graph.nodes();
  const auto& outs = graph.outputs();
  if (cotangents.size() != outs.size()) {
    throw ConfigError("expected " + std::to_string(outs.size()) + " cotangents, got " +
                      std::to_string(cotangents.size()));
  }
  std::vector<Tensor> grad(nodes.size());
  std::vector<Region> region(nodes.size());
  for (std::size_t k = 0; k < outs.size(); ++k) {
    const Tensor& ct = cotangents[k];
    if (ct.empty()) continue;
    const int n = outs[k];
    if (ct.shape() != acts.values[n].shape()) {
      throw ConfigError("cotangent " + std::to_string(k) + " has shape " +
                        shape_string(ct.shape()) + " but output is " +
                        shape_string(acts.values[n].shape()));
    }
    const Region r = nonzero_region(ct);
    if (r.empty()) continue;
    if (grad[n].empty()) grad[n] = Tensor::zeros_like(acts.values[n]);
    axpy(grad[n], 1.0, ct);
    region[n] = unite(region[n], r);
  }

  Gradients result;
  result.input = Tensor::zeros_like(acts.input);
  result.weights.resize(nodes.size());
  if (want_weights) {
    for (std::size_t i = 0; i < nodes.size(); ++i) {
      if (!nodes[i].weights.empty()) result.weights[i] = Tensor::zeros_like(nodes[i].weights);
    }
  }
  Region input_region;

  for (int i = static_cast<int>(nodes.size()) - 1; i >= 0; --i) {
    const Region r = region[i];
    if (grad[i].empty() || r.empty()) continue;
    const Node& node = nodes[i];
    const Tensor& in_value = node.input == -1 ? acts.input : acts.values[node.input];
    Tensor* d_in;
    Region* in_region;
    if (node.input == -1) {
      d_in = &result.input;
      in_region = &input_region;
    } else {
      Tensor& g = grad[node.input];
      if (g.empty()) g = Tensor::zeros_like(in_value);
      d_in = &g;
      in_region = &region[node.input];
    }
    const Tensor& d_out = grad[i];
    const Tensor& out_value = acts.values[i];
    const std::size_t h = in_value.dim(1), w = in_value.dim(2);

    switch (node.kind) {
      case OpKind::Conv2d: {
        conv_backward_input(d_out, node.weights, r, *d_in);
        if (want_weights) conv_backward_weights(d_out, in_value, r, result.weights[i]);
        *in_region = unite(*in_region, dilate(r, node.weights.dim(2) / 2, h, w));
        break;
      }
      case OpKind::BiasAdd:
      case OpKind::Relu:
      case OpKind::Sigmoid: {
        for (std::size_t ch = 0; ch < d_out.dim(0); ++ch) {
          double bias_acc = 0.0;
          for (std::size_t y = r.y0; y < r.y1; ++y) {
            const std::size_t base = (ch * h + y) * w;
            for (std::size_t x = r.x0; x < r.x1; ++x) {
              const double g = d_out[base + x];
              double v = g;
              if (node.kind == OpKind::Relu) {
                v = out_value[base + x] > 0.0 ? g : 0.0;
              } else if (node.kind == OpKind::Sigmoid) {
                const double s = out_value[base + x];
                v = g * s * (1.0 - s);
              } else {
                bias_acc += g;
              }
              (*d_in)[base + x] += v;
            }
          }
          if (want_weights && node.kind == OpKind::BiasAdd) result.weights[i][ch] += bias_acc;
        }
        *in_region = unite(*in_region, r);
        break;
      }
      case OpKind::MaxPool2: {
        maxpool_backward(d_out, in_value, r, *d_in);
        *in_region = unite(*in_region, Region{2 * r.y0, std::min(h, 2 * r.y1), 2 * r.x0,
                                              std::min(w, 2 * r.x1)});
        break;
      }
    }
  }
  return result;
}

}  // namespace

Activations forward_cached(const Graph& graph, const Tensor& input) {
  const std::vector<Shape> shapes = graph.infer_shapes(input.shape());
  Activations acts;
  acts.input = input;
  acts.values.reserve(graph.nodes().size());
  for (std::size_t i = 0; i < graph.nodes().size(); ++i) {
    const Node& node = graph.nodes()[i];
    const Tensor& in = node.input == -1 ? acts.input : acts.values[node.input];
    acts.values.push_back(evaluate(node, in, shapes[i]));
  }
  for (int out : graph.outputs()) acts.values[out].check_finite("graph output");
  return acts;
}

std::vector<Tensor> outputs_of(const Graph& graph, const Activations& acts) {
  std::vector<Tensor> outs;
  outs.reserve(graph.outputs().size());
  for (int n : graph.outputs()) outs.push_back(acts.values[n]);
  return outs;
}

std::vector<Tensor> forward(const Graph& graph, const Tensor& input) {
  return outputs_of(graph, forward_cached(graph, input));
}

Tensor backward_to_input(const Graph& graph, const Activations& acts,
                         std::span<const Tensor> output_cotangents) {
  Tensor g = run_backward(graph, acts, output_cotangents, false).input;
  g.check_finite("input gradient");
  return g;
}

Tensor backward_to_input(const Graph& graph, const Tensor& input,
                         std::span<const Tensor> output_cotangents) {
  return backward_to_input(graph, forward_cached(graph, input), output_cotangents);
}

Gradients backward(const Graph& graph, const Activations& acts,
                   std::span<const Tensor> output_cotangents) {
  return run_backward(graph, acts, output_cotangents, true);
}

void sgd_step(Graph& graph, std::span<const Tensor> weight_gradients, double learning_rate) {
  auto& nodes = graph.nodes();
  if (weight_gradients.size() != nodes.size()) {
    throw ConfigError("expected one gradient slot per node");
  }
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (nodes[i].weights.empty()) continue;
    const Tensor& g = weight_gradients[i];
    if (g.empty()) continue;
    if (g.shape() != nodes[i].weights.shape()) {
      throw ConfigError("gradient shape " + shape_string(g.shape()) + " does not match weights " +
                        shape_string(nodes[i].weights.shape()) + " at node " + std::to_string(i));
    }
    axpy(nodes[i].weights, -learning_rate, g);
  }
}

}  // namespace erfattack
