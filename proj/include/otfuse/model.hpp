#pragma once

// Bias-free feedforward networks built from dense and 2-D convolution layers.
//
// Neuron identity: a dense neuron is one row of its layer's weight matrix; a
// conv neuron is one output channel whose row is the flattened filter
// (in_channels x kh x kw). When a dense layer follows a conv layer its columns
// come in per-channel blocks of (pooled) spatial size.

#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "otfuse/detail/conv.hpp"
#include "otfuse/error.hpp"
#include "otfuse/types.hpp"

namespace otfuse {

enum class LayerKind { dense, conv2d };
enum class Activation { relu, none };

inline const char* to_string(LayerKind k) { return k == LayerKind::dense ? "dense" : "conv2d"; }
inline const char* to_string(Activation a) { return a == Activation::relu ? "relu" : "none"; }

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  Index in_width = 0;   // dense: fan-in; conv: input channels
  Index out_width = 0;  // neurons or output channels
  Index kernel_h = 1;
  Index kernel_w = 1;
  Activation activation = Activation::relu;
  bool pool = false;  // conv only: 2x2 max-pool after the activation

  static LayerSpec dense(Index in, Index out, Activation act = Activation::relu) {
    return {LayerKind::dense, in, out, 1, 1, act, false};
  }
  static LayerSpec conv(Index in_channels, Index out_channels, Index kernel, bool pool = false,
                        Activation act = Activation::relu) {
    return {LayerKind::conv2d, in_channels, out_channels, kernel, kernel, act, pool};
  }

  Index weight_cols() const { return kind == LayerKind::dense ? in_width : in_width * kernel_h * kernel_w; }
  bool operator==(const LayerSpec&) const = default;
};

/// Channels x height x width of a feature map; dense features use 1x1 maps.
struct FeatureShape {
  Index channels = 1;
  Index height = 1;
  Index width = 1;
  Index spatial() const { return height * width; }
  Index size() const { return channels * height * width; }
  bool operator==(const FeatureShape&) const = default;
};

class NetworkModel {
 public:
  NetworkModel() = default;

  NetworkModel(FeatureShape input, std::vector<LayerSpec> layers, std::vector<Matrix> weights)
      : input_(input), layers_(std::move(layers)), weights_(std::move(weights)) {
    validate();
  }

  /// Zero-weight model with the given architecture.
  static NetworkModel zeros(FeatureShape input, std::vector<LayerSpec> layers) {
    std::vector<Matrix> w;
    for (const auto& l : layers) w.push_back(Matrix::Zero(l.out_width, l.weight_cols()));
    return NetworkModel(input, std::move(layers), std::move(w));
  }

  /// Dense ReLU stack input_dim -> hidden... -> outputs (linear output layer).
  static NetworkModel mlp(Index input_dim, const std::vector<Index>& hidden, Index outputs) {
    std::vector<LayerSpec> layers;
    Index prev = input_dim;
    for (Index h : hidden) {
      layers.push_back(LayerSpec::dense(prev, h));
      prev = h;
    }
    layers.push_back(LayerSpec::dense(prev, outputs, Activation::none));
    return zeros({input_dim, 1, 1}, std::move(layers));
  }

  const FeatureShape& input_shape() const noexcept { return input_; }
  Index input_dim() const noexcept { return input_.size(); }
  Index depth() const noexcept { return static_cast<Index>(layers_.size()); }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const LayerSpec& layer(Index l) const { return layers_.at(static_cast<std::size_t>(l)); }
  const std::vector<Matrix>& weights() const noexcept { return weights_; }
  const Matrix& weight(Index l) const { return weights_.at(static_cast<std::size_t>(l)); }
  Index width(Index l) const { return layer(l).out_width; }
  Index output_dim() const { return layers_.back().out_width; }

  std::vector<Index> widths() const {
    std::vector<Index> w;
    for (const auto& l : layers_) w.push_back(l.out_width);
    return w;
  }

  /// Feature map entering layer l.
  const FeatureShape& in_shape(Index l) const { return in_shapes_.at(static_cast<std::size_t>(l)); }
  /// Pre-activation map of layer l (before pooling).
  FeatureShape conv_shape(Index l) const {
    const auto& s = in_shape(l);
    return layer(l).kind == LayerKind::conv2d ? FeatureShape{width(l), s.height, s.width} : FeatureShape{width(l), 1, 1};
  }
  /// Feature map leaving layer l (after pooling).
  const FeatureShape& out_shape(Index l) const { return out_shapes_.at(static_cast<std::size_t>(l)); }

  /// Number of weight columns that belong to each neuron of the layer feeding layer l.
  Index incoming_block(Index l) const {
    const LayerSpec& spec = layer(l);
    if (spec.kind == LayerKind::conv2d) return spec.kernel_h * spec.kernel_w;
    return l == 0 ? input_.spatial() : out_shape(l - 1).spatial();
  }

  /// Same architecture, new weights.
  NetworkModel with_weights(std::vector<Matrix> weights) const { return NetworkModel(input_, layers_, std::move(weights)); }

  bool same_architecture(const NetworkModel& other) const {
    return input_ == other.input_ && layers_ == other.layers_;
  }

  std::string describe() const {
    std::ostringstream os;
    os << input_.channels << "x" << input_.height << "x" << input_.width;
    for (const auto& l : layers_) {
      os << " -> " << (l.kind == LayerKind::conv2d ? "conv" : "dense") << l.out_width;
      if (l.kind == LayerKind::conv2d) os << "k" << l.kernel_h << "x" << l.kernel_w << (l.pool ? "p" : "");
    }
    return os.str();
  }

 private:
  void validate() {
    if (layers_.empty()) throw ShapeError("model needs at least one layer");
    if (weights_.size() != layers_.size())
      throw ShapeError("model has " + std::to_string(layers_.size()) + " layers but " + std::to_string(weights_.size()) +
                       " weight matrices");
    if (input_.channels < 1 || input_.height < 1 || input_.width < 1) throw ShapeError("input shape must be positive");
    in_shapes_.clear();
    out_shapes_.clear();
    FeatureShape cur = input_;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const LayerSpec& s = layers_[l];
      const std::string tag = "layer " + std::to_string(l) + ": ";
      if (s.out_width < 1 || s.in_width < 1) throw ShapeError(tag + "widths must be positive");
      in_shapes_.push_back(cur);
      if (s.kind == LayerKind::conv2d) {
        if (s.kernel_h < 1 || s.kernel_w < 1 || s.kernel_h % 2 == 0 || s.kernel_w % 2 == 0)
          throw ShapeError(tag + "conv kernels must be odd-sized for same padding");
        if (s.in_width != cur.channels)
          throw ShapeError(tag + "conv expects " + std::to_string(s.in_width) + " input channels, got " +
                           std::to_string(cur.channels));
        cur = {s.out_width, cur.height, cur.width};
        if (s.pool) {
          if (cur.height < 2 || cur.width < 2) throw ShapeError(tag + "feature map too small to pool");
          cur = {cur.channels, cur.height / 2, cur.width / 2};
        }
      } else {
        if (s.pool) throw ShapeError(tag + "pooling is only supported after conv layers");
        if (s.in_width != cur.size())
          throw ShapeError(tag + "dense fan-in " + std::to_string(s.in_width) + " does not match incoming " +
                           std::to_string(cur.size()) + " features");
        cur = {s.out_width, 1, 1};
      }
      out_shapes_.push_back(cur);
      const Matrix& w = weights_[l];
      if (w.rows() != s.out_width || w.cols() != s.weight_cols())
        throw ShapeError(tag + "weight matrix is " + shape_str(w) + ", expected " + shape_str(s.out_width, s.weight_cols()));
      if (!w.allFinite()) throw DomainError(tag + "weights contain NaN or Inf");
    }
    if (layers_.back().activation != Activation::none) throw ShapeError("final layer must have no activation");
  }

  FeatureShape input_;
  std::vector<LayerSpec> layers_;
  std::vector<Matrix> weights_;
  std::vector<FeatureShape> in_shapes_, out_shapes_;
};

/// Pre-activations per layer; row s belongs to sample s. Conv layers store
/// each sample's map flattened channel-major (c * H * W + position).
struct ActivationTrace {
  std::vector<Matrix> pre_activations;
  std::uint64_t sample_batch_id = 0;

  Index samples() const { return pre_activations.empty() ? 0 : pre_activations.front().rows(); }
};

struct ForwardResult {
  Matrix output;
  ActivationTrace trace;
};

namespace detail {

/// Everything backprop needs from one forward pass.
struct ForwardCache {
  std::vector<Matrix> inputs;        // activation entering each layer
  std::vector<Matrix> pre;           // pre-activations
  std::vector<std::vector<Index>> pool_argmax;  // per layer, samples x pooled cells
  Matrix output;
};

inline void apply_activation(Matrix& z, Activation act) {
  if (act == Activation::relu) z = z.cwiseMax(0.0);
}

inline ForwardCache forward_pass(const NetworkModel& model, const Matrix& inputs, bool keep_inputs) {
  if (inputs.cols() != model.input_dim())
    throw ShapeError("forward: inputs have " + std::to_string(inputs.cols()) + " features, model expects " +
                     std::to_string(model.input_dim()));
  ForwardCache cache;
  const Index m = inputs.rows();
  Matrix a = inputs;
  for (Index l = 0; l < model.depth(); ++l) {
    const LayerSpec& spec = model.layer(l);
    const Matrix& w = model.weight(l);
    Matrix z;
    if (spec.kind == LayerKind::dense) {
      z.noalias() = a * w.transpose();
    } else {
      const FeatureShape in = model.in_shape(l);
      const ConvGeometry g{in.channels, in.height, in.width, spec.kernel_h, spec.kernel_w};
      z.resize(m, spec.out_width * g.positions());
      Matrix cols, resp;
      for (Index s = 0; s < m; ++s) {
        im2col(a.row(s).data(), g, cols);
        resp.noalias() = w * cols;
        z.row(s) = Eigen::Map<const Eigen::RowVectorXd>(resp.data(), resp.size());
      }
    }
    Matrix next = z;
    apply_activation(next, spec.activation);
    std::vector<Index> argmax;
    if (spec.kind == LayerKind::conv2d && spec.pool) {
      const FeatureShape pre = model.conv_shape(l);
      const FeatureShape out = model.out_shape(l);
      Matrix pooled(m, out.size());
      if (keep_inputs) argmax.resize(static_cast<std::size_t>(m * out.size()));
      for (Index s = 0; s < m; ++s)
        max_pool2(next.row(s).data(), pre.channels, pre.height, pre.width, pooled.row(s).data(),
                  keep_inputs ? argmax.data() + s * out.size() : nullptr);
      next = std::move(pooled);
    }
    if (keep_inputs) cache.inputs.push_back(std::move(a));
    cache.pre.push_back(std::move(z));
    cache.pool_argmax.push_back(std::move(argmax));
    a = std::move(next);
  }
  cache.output = std::move(a);
  return cache;
}

}  // namespace detail

/// Runs the model on a batch (one sample per row) and records every layer's
/// pre-activations.
inline ForwardResult forward(const NetworkModel& model, const Matrix& inputs, std::uint64_t sample_batch_id = 0) {
  detail::ForwardCache cache = detail::forward_pass(model, inputs, false);
  ForwardResult r;
  r.output = std::move(cache.output);
  r.trace.pre_activations = std::move(cache.pre);
  r.trace.sample_batch_id = sample_batch_id;
  return r;
}

/// Output scores only.
inline Matrix predict(const NetworkModel& model, const Matrix& inputs) {
  return detail::forward_pass(model, inputs, false).output;
}

using Permutation = std::vector<Index>;

inline bool is_permutation(const Permutation& p, Index n) {
  if (static_cast<Index>(p.size()) != n) return false;
  std::vector<char> seen(static_cast<std::size_t>(n), 0);
  for (Index v : p) {
    if (v < 0 || v >= n || seen[static_cast<std::size_t>(v)]) return false;
    seen[static_cast<std::size_t>(v)] = 1;
  }
  return true;
}

inline Permutation identity_permutation(Index n) {
  Permutation p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), Index{0});
  return p;
}

/// Relabels hidden neurons: neuron i of layer l in the result is neuron
/// perms[l][i] of the input model. The downstream layer's columns (or
/// per-channel column blocks) follow, so the function is unchanged.
inline NetworkModel permute_model(const NetworkModel& model, const std::vector<Permutation>& perms) {
  if (static_cast<Index>(perms.size()) != model.depth())
    throw ShapeError("permute_model: expected " + std::to_string(model.depth()) + " permutations, got " +
                     std::to_string(perms.size()));
  std::vector<Matrix> w = model.weights();
  for (Index l = 0; l < model.depth(); ++l) {
    const Permutation& p = perms[static_cast<std::size_t>(l)];
    if (!is_permutation(p, model.width(l)))
      throw DomainError("permute_model: layer " + std::to_string(l) + " permutation is not a bijection on " +
                        std::to_string(model.width(l)) + " neurons");
    if (l + 1 == model.depth()) {
      if (p != identity_permutation(model.width(l)))
        throw DomainError("permute_model: output layer permutation must be the identity");
      continue;
    }
    const Matrix rows = w[static_cast<std::size_t>(l)];
    for (Index i = 0; i < rows.rows(); ++i) w[static_cast<std::size_t>(l)].row(i) = rows.row(p[static_cast<std::size_t>(i)]);
    const Index block = model.incoming_block(l + 1);
    const Matrix next = w[static_cast<std::size_t>(l + 1)];
    for (Index i = 0; i < model.width(l); ++i)
      w[static_cast<std::size_t>(l + 1)].middleCols(i * block, block) =
          next.middleCols(p[static_cast<std::size_t>(i)] * block, block);
  }
  return model.with_weights(std::move(w));
}

inline Index count_params(const NetworkModel& model) {
  Index n = 0;
  for (const auto& w : model.weights()) n += w.size();
  return n;
}

/// 1 - params(model) / params(reference).
inline double sparsity_vs(const NetworkModel& model, const NetworkModel& reference) {
  return 1.0 - static_cast<double>(count_params(model)) / static_cast<double>(count_params(reference));
}

}  // namespace otfuse
