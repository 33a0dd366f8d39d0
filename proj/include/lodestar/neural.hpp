#pragma once

// Minimal fully-convolutional network: three 3x3 conv+ReLU layers, a 2x2
// max-pool, eight 3x3 conv+ReLU layers and a 1x1 output conv producing
// (dx, dy, extra channels..., rho). Forward and analytic backward passes,
// Adam, and LSTR1 checkpoints.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "lodestar/ltsr.hpp"
#include "lodestar/tensor.hpp"

namespace lodestar::nn {

/// Which equivariant quantities the network predicts besides (x, y).
struct ChannelSet {
  bool z = false;      // axial position (um), propagation symmetry
  bool scale = false;  // log signal scale, scale symmetry

  int extra() const { return (z ? 1 : 0) + (scale ? 1 : 0); }
  /// Number of decoded feature channels: x, y and the extras.
  int features() const { return 2 + extra(); }
  int z_index() const { return z ? 2 : -1; }
  int scale_index() const { return scale ? (z ? 3 : 2) : -1; }

  std::string name() const {
    std::string s = "xy";
    if (z) s += "z";
    if (scale) s += "s";
    return s;
  }
  static ChannelSet parse(const std::string& s) {
    if (s == "xy") return {false, false};
    if (s == "xyz") return {true, false};
    if (s == "xys") return {false, true};
    if (s == "xyzs") return {true, true};
    throw Error("unknown channel set '" + s + "' (expected xy, xyz, xys or xyzs)");
  }
  friend bool operator==(const ChannelSet&, const ChannelSet&) = default;
};

struct Architecture {
  int input_channels = 1;
  ChannelSet channels;
  int width = 32;
  int pre_pool_layers = 3;
  int post_pool_layers = 8;

  int output_channels() const { return 3 + channels.extra(); }
  int conv_layer_count() const { return pre_pool_layers + post_pool_layers + 1; }
  friend bool operator==(const Architecture&, const Architecture&) = default;

  nlohmann::json to_json() const {
    return {{"input_channels", input_channels}, {"channels", channels.name()},
            {"extra_channels", channels.extra()}, {"width", width},
            {"pre_pool_layers", pre_pool_layers}, {"post_pool_layers", post_pool_layers}};
  }
  static Architecture from_json(const nlohmann::json& j) {
    Architecture a;
    a.input_channels = j.at("input_channels").get<int>();
    a.channels = ChannelSet::parse(j.at("channels").get<std::string>());
    a.width = j.at("width").get<int>();
    a.pre_pool_layers = j.at("pre_pool_layers").get<int>();
    a.post_pool_layers = j.at("post_pool_layers").get<int>();
    if (j.at("extra_channels").get<int>() != a.channels.extra()) {
      throw Error("checkpoint: extra_channels disagrees with channel set");
    }
    return a;
  }
};

template <class T>
struct ConvLayer {
  std::string name;
  int in = 0;
  int out = 0;
  int kernel = 3;
  bool relu = true;
  std::vector<T> weight;  // out x (in * kernel * kernel)
  std::vector<T> bias;    // out
  // Adam moments
  std::vector<T> m_weight, v_weight, m_bias, v_bias;

  int fan_in() const { return in * kernel * kernel; }
};

/// Affine corrections applied to the extra channels after pooling; the
/// symmetries fix those quantities only up to an additive constant.
struct Calibration {
  double z_offset = 0.0;
  double scale_offset = 0.0;
  friend bool operator==(const Calibration&, const Calibration&) = default;
};

template <class T>
struct ModelParams {
  Architecture arch;
  std::vector<ConvLayer<T>> layers;
  std::int64_t step = 0;
  Calibration calibration;
  // Bumped on every parameter mutation; forward caches record it.
  std::uint64_t revision = 0;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
  }

  template <class U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.arch = arch;
    out.step = step;
    out.calibration = calibration;
    for (const auto& l : layers) {
      ConvLayer<U> c;
      c.name = l.name;
      c.in = l.in;
      c.out = l.out;
      c.kernel = l.kernel;
      c.relu = l.relu;
      auto conv = [](const std::vector<T>& v) { return std::vector<U>(v.begin(), v.end()); };
      c.weight = conv(l.weight);
      c.bias = conv(l.bias);
      c.m_weight = conv(l.m_weight);
      c.v_weight = conv(l.v_weight);
      c.m_bias = conv(l.m_bias);
      c.v_bias = conv(l.v_bias);
      out.layers.push_back(std::move(c));
    }
    return out;
  }
};

/// Layer list with zero weights and zero moments.
template <class T>
ModelParams<T> make_zero_params(const Architecture& arch) {
  if (arch.input_channels < 1) throw Error("architecture needs at least one input channel");
  ModelParams<T> p;
  p.arch = arch;
  auto add = [&](const std::string& name, int in, int out, int k, bool relu) {
    ConvLayer<T> l;
    l.name = name;
    l.in = in;
    l.out = out;
    l.kernel = k;
    l.relu = relu;
    const std::size_t nw = static_cast<std::size_t>(out) * in * k * k;
    l.weight.assign(nw, T(0));
    l.bias.assign(out, T(0));
    l.m_weight.assign(nw, T(0));
    l.v_weight.assign(nw, T(0));
    l.m_bias.assign(out, T(0));
    l.v_bias.assign(out, T(0));
    p.layers.push_back(std::move(l));
  };
  int in = arch.input_channels;
  for (int i = 0; i < arch.pre_pool_layers; ++i) {
    add("conv" + std::to_string(i + 1), in, arch.width, 3, true);
    in = arch.width;
  }
  for (int i = 0; i < arch.post_pool_layers; ++i) {
    add("conv" + std::to_string(arch.pre_pool_layers + i + 1), in, arch.width, 3, true);
    in = arch.width;
  }
  add("head", in, arch.output_channels(), 1, false);
  return p;
}

/// He-uniform fan-in initialization of all kernels, zero biases.
template <class T>
ModelParams<T> init_params(const Architecture& arch, std::uint64_t seed) {
  auto p = make_zero_params<T>(arch);
  std::mt19937_64 rng(seed);
  for (auto& l : p.layers) {
    const double limit = std::sqrt(6.0 / l.fan_in());
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (auto& w : l.weight) w = static_cast<T>(dist(rng));
  }
  return p;
}

template <class T>
struct LayerGradient {
  std::vector<T> weight;
  std::vector<T> bias;
};

template <class T>
struct Gradients {
  std::vector<LayerGradient<T>> layers;

  static Gradients zeros_like(const ModelParams<T>& p) {
    Gradients g;
    for (const auto& l : p.layers) {
      g.layers.push_back({std::vector<T>(l.weight.size(), T(0)), std::vector<T>(l.bias.size(), T(0))});
    }
    return g;
  }
  void add(const Gradients& other) {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      for (std::size_t k = 0; k < layers[i].weight.size(); ++k)
        layers[i].weight[k] += other.layers[i].weight[k];
      for (std::size_t k = 0; k < layers[i].bias.size(); ++k)
        layers[i].bias[k] += other.layers[i].bias[k];
    }
  }
  bool all_zero() const {
    for (const auto& l : layers) {
      for (auto v : l.weight) if (v != T(0)) return false;
      for (auto v : l.bias) if (v != T(0)) return false;
    }
    return true;
  }
};

/// Activations kept by a forward pass for the matching backward pass.
template <class T>
struct ForwardCache {
  std::uint64_t revision = 0;
  const void* owner = nullptr;
  std::vector<Tensor<T>> layer_inputs;   // input to each conv layer
  std::vector<Tensor<T>> layer_outputs;  // post-activation output of each conv layer
  std::vector<std::uint8_t> pool_argmax;  // 0..3 per pooled element
  bool valid = false;
};

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

// (C*9) x (H*W) patch matrix of a zero-padded 3x3 neighbourhood.
template <class T>
void im2col3x3(const Tensor<T>& in, std::vector<T>& col) {
  const int c_n = in.channels(), h = in.height(), w = in.width();
  const std::size_t hw = in.plane_size();
  col.assign(static_cast<std::size_t>(c_n) * 9 * hw, T(0));
  for (int c = 0; c < c_n; ++c) {
    const T* src = in.plane(c).data();
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        T* dst = col.data() + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
        const int dy = ky - 1, dx = kx - 1;
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          std::copy(src + sy * w + x0 + dx, src + sy * w + x1 + dx, dst + y * w + x0);
        }
      }
  }
}

template <class T>
void col2im3x3(const std::vector<T>& col, Tensor<T>& out) {
  const int c_n = out.channels(), h = out.height(), w = out.width();
  const std::size_t hw = out.plane_size();
  std::fill(out.values().begin(), out.values().end(), T(0));
  for (int c = 0; c < c_n; ++c) {
    T* dst = out.plane(c).data();
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) {
        const T* src = col.data() + (static_cast<std::size_t>(c) * 9 + ky * 3 + kx) * hw;
        const int dy = ky - 1, dx = kx - 1;
        const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + dy;
          if (sy < 0 || sy >= h) continue;
          for (int x = x0; x < x1; ++x) dst[sy * w + x + dx] += src[y * w + x];
        }
      }
  }
}

template <class T>
Tensor<T> conv_forward(const ConvLayer<T>& layer, const Tensor<T>& in, std::vector<T>& col) {
  const int h = in.height(), w = in.width();
  const Eigen::Index hw = static_cast<Eigen::Index>(in.plane_size());
  Tensor<T> out(layer.out, h, w);
  MatMap<T> o(out.data(), layer.out, hw);
  ConstMatMap<T> wm(layer.weight.data(), layer.out, layer.fan_in());
  if (layer.kernel == 3) {
    im2col3x3(in, col);
    ConstMatMap<T> cm(col.data(), layer.fan_in(), hw);
    o.noalias() = wm * cm;
  } else {
    ConstMatMap<T> cm(in.data(), layer.in, hw);
    o.noalias() = wm * cm;
  }
  for (int c = 0; c < layer.out; ++c) {
    const T b = layer.bias[c];
    for (auto& v : out.plane(c)) {
      v += b;
      if (layer.relu && !(v > T(0))) v = T(0);
    }
  }
  return out;
}

// Returns the gradient with respect to the layer input when `need_input`.
template <class T>
Tensor<T> conv_backward(const ConvLayer<T>& layer, const Tensor<T>& in, const Tensor<T>& out,
                        Tensor<T> grad_out, LayerGradient<T>& grad, std::vector<T>& col,
                        bool need_input) {
  const Eigen::Index hw = static_cast<Eigen::Index>(in.plane_size());
  if (layer.relu) {
    for (std::size_t i = 0; i < grad_out.size(); ++i)
      if (!(out.values()[i] > T(0))) grad_out.values()[i] = T(0);
  }
  ConstMatMap<T> g(grad_out.data(), layer.out, hw);
  MatMap<T> gw(grad.weight.data(), layer.out, layer.fan_in());
  ConstMatMap<T> wm(layer.weight.data(), layer.out, layer.fan_in());
  for (int c = 0; c < layer.out; ++c) {
    T s = T(0);
    for (auto v : grad_out.plane(c)) s += v;
    grad.bias[c] += s;
  }
  Tensor<T> grad_in;
  if (layer.kernel == 3) {
    im2col3x3(in, col);
    ConstMatMap<T> cm(col.data(), layer.fan_in(), hw);
    gw.noalias() += g * cm.transpose();
    if (need_input) {
      std::vector<T> gcol(col.size());
      MatMap<T> gc(gcol.data(), layer.fan_in(), hw);
      gc.noalias() = wm.transpose() * g;
      grad_in = Tensor<T>(layer.in, in.height(), in.width());
      col2im3x3(gcol, grad_in);
    }
  } else {
    ConstMatMap<T> cm(in.data(), layer.in, hw);
    gw.noalias() += g * cm.transpose();
    if (need_input) {
      grad_in = Tensor<T>(layer.in, in.height(), in.width());
      MatMap<T> gi(grad_in.data(), layer.in, hw);
      gi.noalias() = wm.transpose() * g;
    }
  }
  return grad_in;
}

template <class T>
Tensor<T> maxpool_forward(const Tensor<T>& in, std::vector<std::uint8_t>& argmax) {
  const int h = in.height() / 2, w = in.width() / 2;
  Tensor<T> out(in.channels(), h, w);
  argmax.assign(out.size(), 0);
  std::size_t k = 0;
  for (int c = 0; c < in.channels(); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x, ++k) {
        // First row-major maximum wins ties.
        T best = in(c, 2 * y, 2 * x);
        std::uint8_t arg = 0;
        const T cand[3] = {in(c, 2 * y, 2 * x + 1), in(c, 2 * y + 1, 2 * x), in(c, 2 * y + 1, 2 * x + 1)};
        for (std::uint8_t i = 0; i < 3; ++i)
          if (cand[i] > best) {
            best = cand[i];
            arg = static_cast<std::uint8_t>(i + 1);
          }
        out(c, y, x) = best;
        argmax[k] = arg;
      }
  return out;
}

template <class T>
Tensor<T> maxpool_backward(const Tensor<T>& grad_out, const std::vector<std::uint8_t>& argmax,
                           int in_h, int in_w) {
  Tensor<T> grad_in(grad_out.channels(), in_h, in_w, T(0));
  std::size_t k = 0;
  for (int c = 0; c < grad_out.channels(); ++c)
    for (int y = 0; y < grad_out.height(); ++y)
      for (int x = 0; x < grad_out.width(); ++x, ++k) {
        const int a = argmax[k];
        grad_in(c, 2 * y + a / 2, 2 * x + a % 2) += grad_out(c, y, x);
      }
  return grad_in;
}

}  // namespace detail

/// Runs the network on one input tensor (channels x H x W, H and W even and
/// >= 16). Returns the raw (3 + E) x H/2 x W/2 output; fills `cache` when given.
template <class T>
Tensor<T> forward(const ModelParams<T>& params, const Tensor<T>& input,
                  ForwardCache<T>* cache = nullptr) {
  const auto& arch = params.arch;
  if (input.height() < 16 || input.width() < 16 || input.height() % 2 || input.width() % 2) {
    throw Error("forward: input must be even-sized and at least 16x16, got " + shape_string(input));
  }
  if (params.layers.size() != static_cast<std::size_t>(arch.conv_layer_count())) {
    throw Error("forward: parameter list does not match the architecture");
  }
  if (cache) {
    cache->layer_inputs.clear();
    cache->layer_outputs.clear();
    cache->valid = false;
  }
  std::vector<T> col;
  Tensor<T> x = input;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    const auto& layer = params.layers[i];
    if (x.channels() != layer.in) {
      throw Error("forward: layer '" + layer.name + "' expects " + std::to_string(layer.in) +
                  " input channels, got " + std::to_string(x.channels()));
    }
    Tensor<T> y = detail::conv_forward(layer, x, col);
    if (cache) {
      cache->layer_inputs.push_back(std::move(x));
      cache->layer_outputs.push_back(y);
    }
    x = std::move(y);
    if (static_cast<int>(i) + 1 == arch.pre_pool_layers) {
      std::vector<std::uint8_t> argmax;
      x = detail::maxpool_forward(x, argmax);
      if (cache) cache->pool_argmax = std::move(argmax);
    }
  }
  if (cache) {
    cache->revision = params.revision;
    cache->owner = &params;
    cache->valid = true;
  }
  return x;
}

/// Parameter gradients for an upstream gradient on the raw output map.
/// Accumulates into `grads` (which must be shaped like `params`).
template <class T>
void backward(const ModelParams<T>& params, const ForwardCache<T>& cache,
              const Tensor<T>& grad_output, Gradients<T>& grads) {
  if (!cache.valid || cache.owner != &params || cache.revision != params.revision) {
    throw Error("backward: stale forward cache");
  }
  if (grads.layers.size() != params.layers.size()) {
    throw Error("backward: gradient buffer does not match parameters");
  }
  const auto& last = cache.layer_outputs.back();
  if (!grad_output.same_shape(last)) {
    throw Error("backward: output gradient has shape " + shape_string(grad_output) +
                ", expected " + shape_string(last));
  }
  std::vector<T> col;
  Tensor<T> g = grad_output;
  for (int i = static_cast<int>(params.layers.size()) - 1; i >= 0; --i) {
    const auto& layer = params.layers[i];
    if (i + 1 == params.arch.pre_pool_layers) {
      const auto& pre = cache.layer_outputs[i];
      g = detail::maxpool_backward(g, cache.pool_argmax, pre.height(), pre.width());
    }
    g = detail::conv_backward(layer, cache.layer_inputs[i], cache.layer_outputs[i], std::move(g),
                              grads.layers[i], col, i > 0);
  }
}

template <class T>
Gradients<T> backward(const ModelParams<T>& params, const ForwardCache<T>& cache,
                      const Tensor<T>& grad_output) {
  auto g = Gradients<T>::zeros_like(params);
  backward(params, cache, grad_output, g);
  return g;
}

// --------------------------------------------------------------------------
// Output decoding

/// Raw network output together with the geometry needed to decode it.
struct FeatureBundle {
  ChannelSet channels;
  int input_height = 0;
  int input_width = 0;
  Tensor<double> raw;  // dx, dy, extras..., rho

  int height() const { return raw.height(); }
  int width() const { return raw.width(); }
  int rho_channel() const { return channels.features(); }
};

inline constexpr int kStride = 2;

/// Decoded maps (x, y, extras...) in input pixels relative to the input
/// center: x = dx + (j + 1/2) k - W/2, y = dy + (i + 1/2) k - H/2; extras
/// pass through unchanged.
inline Tensor<double> decode_positions(const FeatureBundle& b) {
  const int nf = b.channels.features();
  Tensor<double> p(nf, b.height(), b.width());
  for (int i = 0; i < b.height(); ++i)
    for (int j = 0; j < b.width(); ++j) {
      p(0, i, j) = b.raw(0, i, j) + (j + 0.5) * kStride - b.input_width / 2.0;
      p(1, i, j) = b.raw(1, i, j) + (i + 0.5) * kStride - b.input_height / 2.0;
      for (int c = 2; c < nf; ++c) p(c, i, j) = b.raw(c, i, j);
    }
  return p;
}

inline double sigmoid(double v) {
  return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
}

/// Inference weights w = sigmoid(rho), unnormalized.
inline Tensor<double> inference_weights(const FeatureBundle& b) {
  Tensor<double> w(1, b.height(), b.width());
  const auto rho = b.raw.plane(b.rho_channel());
  for (std::size_t i = 0; i < rho.size(); ++i) w.values()[i] = sigmoid(rho[i]);
  return w;
}

template <class T>
FeatureBundle make_bundle(const ModelParams<T>& params, const Tensor<T>& raw, int in_h, int in_w) {
  FeatureBundle b;
  b.channels = params.arch.channels;
  b.input_height = in_h;
  b.input_width = in_w;
  b.raw = raw.template cast<double>();
  return b;
}

// --------------------------------------------------------------------------
// Input normalization

enum class Normalization {
  standardize,  // zero mean per channel, unit variance over all channels
  center,       // zero mean per channel only; preserves signal scale
};

namespace detail {
// Sum in sorted order so the result is independent of pixel arrangement.
inline double ordered_sum(std::vector<double>& v) {
  std::sort(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += x;
  return s;
}
}  // namespace detail

template <class T>
Tensor<T> normalize_input(const Image& image, Normalization mode) {
  Tensor<T> out(image.channels(), image.height(), image.width());
  const double n = static_cast<double>(image.plane_size());
  std::vector<double> means(image.channels());
  std::vector<double> sq;
  for (int c = 0; c < image.channels(); ++c) {
    std::vector<double> v(image.plane(c).begin(), image.plane(c).end());
    means[c] = detail::ordered_sum(v) / n;
    for (double x : image.plane(c)) sq.push_back((x - means[c]) * (x - means[c]));
  }
  double scale = 1.0;
  if (mode == Normalization::standardize) {
    const double var = detail::ordered_sum(sq) / static_cast<double>(sq.size());
    scale = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
  }
  for (int c = 0; c < image.channels(); ++c) {
    auto src = image.plane(c);
    auto dst = out.plane(c);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>((src[i] - means[c]) * scale);
  }
  return out;
}

inline Normalization default_normalization(const ChannelSet&) { return Normalization::center; }

// --------------------------------------------------------------------------
// Adam

struct AdamSettings {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update of a flat parameter block at step `t` (1-based).
template <class T>
void adam_update(std::span<T> param, std::span<const T> grad, std::span<T> m, std::span<T> v,
                 std::int64_t t, const AdamSettings& s) {
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double mi = s.beta1 * m[i] + (1.0 - s.beta1) * g;
    const double vi = s.beta2 * v[i] + (1.0 - s.beta2) * g * g;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double mhat = mi / c1, vhat = vi / c2;
    param[i] = static_cast<T>(param[i] - s.learning_rate * mhat / (std::sqrt(vhat) + s.epsilon));
  }
}

template <class T>
void adam_step(ModelParams<T>& params, const Gradients<T>& grads, const AdamSettings& s = {}) {
  if (grads.layers.size() != params.layers.size()) throw Error("adam: gradient/parameter mismatch");
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    auto finite = [](const std::vector<T>& v) {
      return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
    };
    if (!finite(grads.layers[i].weight) || !finite(grads.layers[i].bias)) {
      throw Error("adam: non-finite gradient in layer '" + params.layers[i].name + "'");
    }
  }
  const std::int64_t t = params.step + 1;
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    auto& l = params.layers[i];
    adam_update<T>(l.weight, grads.layers[i].weight, l.m_weight, l.v_weight, t, s);
    adam_update<T>(l.bias, grads.layers[i].bias, l.m_bias, l.v_bias, t, s);
  }
  params.step = t;
  ++params.revision;
}

// --------------------------------------------------------------------------
// Checkpoints: "LSTR1", u32 header length, JSON header, then one LTSR blob per
// tensor in header order.

inline constexpr char kCheckpointMagic[5] = {'L', 'S', 'T', 'R', '1'};

inline void save_checkpoint(const ModelParams<float>& params, std::ostream& os) {
  nlohmann::json header;
  header["format"] = "LSTR1";
  header["architecture"] = params.arch.to_json();
  header["extra_channels"] = params.arch.channels.extra();
  header["step"] = params.step;
  header["calibration"] = {{"z_offset", params.calibration.z_offset},
                           {"scale_offset", params.calibration.scale_offset}};
  nlohmann::json names = nlohmann::json::array();
  for (const auto& l : params.layers) {
    for (const char* suffix : {"weight", "bias", "m_weight", "v_weight", "m_bias", "v_bias"}) {
      names.push_back(l.name + "." + suffix);
    }
  }
  header["tensors"] = names;
  const std::string text = header.dump();
  os.write(kCheckpointMagic, 5);
  ltsr::detail::put_u32(os, static_cast<std::uint32_t>(text.size()));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& l : params.layers) {
    for (const auto* v : {&l.weight, &l.bias, &l.m_weight, &l.v_weight, &l.m_bias, &l.v_bias}) {
      ltsr::Array a;
      a.dims = {static_cast<std::uint32_t>(v->size())};
      a.values = *v;
      ltsr::write(os, a);
    }
  }
  if (!os) throw Error("checkpoint: write failed");
}

inline void save_checkpoint(const ModelParams<float>& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("checkpoint: cannot open " + path + " for writing");
  save_checkpoint(params, os);
}

inline ModelParams<float> load_checkpoint(std::istream& is) {
  char magic[5];
  if (!is.read(magic, 5) || !std::equal(magic, magic + 5, kCheckpointMagic)) {
    throw Error("checkpoint: bad magic (expected LSTR1)");
  }
  const auto len = ltsr::detail::get_u32(is);
  if (len > (1u << 24)) throw Error("checkpoint: header too large");
  std::string text(len, '\0');
  if (!is.read(text.data(), len)) throw Error("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("checkpoint: corrupt header: ") + e.what());
  }
  if (header.value("format", "") != "LSTR1") throw Error("checkpoint: unsupported format version");
  ModelParams<float> p;
  try {
    p = make_zero_params<float>(Architecture::from_json(header.at("architecture")));
    p.step = header.at("step").get<std::int64_t>();
    p.calibration.z_offset = header.at("calibration").at("z_offset").get<double>();
    p.calibration.scale_offset = header.at("calibration").at("scale_offset").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("checkpoint: malformed header: ") + e.what());
  }
  for (auto& l : p.layers) {
    for (auto* v : {&l.weight, &l.bias, &l.m_weight, &l.v_weight, &l.m_bias, &l.v_bias}) {
      auto a = ltsr::read(is);
      if (a.values.size() != v->size()) {
        throw Error("checkpoint: tensor size mismatch in layer '" + l.name + "'");
      }
      *v = std::move(a.values);
    }
  }
  return p;
}

inline ModelParams<float> load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint: cannot open " + path);
  return load_checkpoint(is);
}

/// Loads and rejects checkpoints whose architecture differs from `expected`.
inline ModelParams<float> load_checkpoint(const std::string& path, const Architecture& expected) {
  auto p = load_checkpoint(path);
  if (!(p.arch == expected)) {
    throw Error("checkpoint: architecture mismatch (file has " + p.arch.to_json().dump() +
                ", runner expects " + expected.to_json().dump() + ")");
  }
  return p;
}

}  // namespace lodestar::nn
