#pragma once

// Small feed-forward networks with hand-derived backward passes: dense,
// valid-padding 2-D convolution and its transpose. Tensors are flat
// row-major CHW vectors of doubles; parameters live in one flat vector per
// network so gradients, checksums and serialization all see the same layout.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deeptamer/random.hpp"

namespace dtamer::nn {

enum class Activation { kLinear, kRelu, kSigmoid, kTanh };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::kLinear: return "linear";
    case Activation::kRelu: return "relu";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kTanh: return "tanh";
  }
  return "linear";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "linear") return Activation::kLinear;
  if (s == "relu") return Activation::kRelu;
  if (s == "sigmoid") return Activation::kSigmoid;
  if (s == "tanh") return Activation::kTanh;
  throw std::invalid_argument("unknown activation: " + s);
}

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::kLinear: return x;
    case Activation::kRelu: return x > 0.0 ? x : 0.0;
    case Activation::kSigmoid: return 1.0 / (1.0 + std::exp(-x));
    case Activation::kTanh: return std::tanh(x);
  }
  return x;
}

// Derivative expressed through the pre-activation z.
inline double activate_grad(Activation a, double z) {
  switch (a) {
    case Activation::kLinear: return 1.0;
    case Activation::kRelu: return z > 0.0 ? 1.0 : 0.0;
    case Activation::kSigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-z));
      return s * (1.0 - s);
    }
    case Activation::kTanh: {
      const double t = std::tanh(z);
      return 1.0 - t * t;
    }
  }
  return 1.0;
}

struct Shape {
  int channels = 1;
  int height = 1;
  int width = 1;
  std::size_t size() const {
    return static_cast<std::size_t>(channels) * height * width;
  }
  friend bool operator==(const Shape&, const Shape&) = default;
};

enum class LayerKind { kDense, kConv, kConvTranspose };

struct Layer {
  LayerKind kind = LayerKind::kDense;
  Shape in;
  Shape out;
  int kernel = 1;
  int stride = 1;
  Activation activation = Activation::kLinear;
  std::size_t param_offset = 0;

  std::size_t weight_count() const {
    switch (kind) {
      case LayerKind::kDense: return in.size() * out.size();
      case LayerKind::kConv:
      case LayerKind::kConvTranspose:
        return static_cast<std::size_t>(in.channels) * out.channels * kernel * kernel;
    }
    return 0;
  }
  std::size_t bias_count() const {
    return kind == LayerKind::kDense ? out.size() : static_cast<std::size_t>(out.channels);
  }
  std::size_t param_count() const { return weight_count() + bias_count(); }
  int fan_in() const {
    switch (kind) {
      case LayerKind::kDense: return static_cast<int>(in.size());
      case LayerKind::kConv: return in.channels * kernel * kernel;
      case LayerKind::kConvTranspose:
        // Each output sees roughly (kernel/stride)^2 input positions per channel.
        return std::max(1, in.channels * (kernel / stride) * (kernel / stride));
    }
    return 1;
  }

  nlohmann::json to_json() const {
    const char* k = kind == LayerKind::kDense  ? "dense"
                    : kind == LayerKind::kConv ? "conv"
                                               : "conv_transpose";
    return {{"kind", k},
            {"in", {in.channels, in.height, in.width}},
            {"out", {out.channels, out.height, out.width}},
            {"kernel", kernel},
            {"stride", stride},
            {"activation", to_string(activation)}};
  }
};

// Per-call activations kept for the backward pass.
struct Trace {
  std::vector<std::vector<double>> inputs;  // input of each layer
  std::vector<std::vector<double>> pre;     // pre-activation of each layer
  std::vector<double> output;
};

class Network {
 public:
  Network() = default;
  explicit Network(Shape input) : input_(input), output_(input) {}

  Network& dense(int units, Activation act) {
    Layer l;
    l.kind = LayerKind::kDense;
    l.in = output_;
    l.out = Shape{1, 1, units};
    l.activation = act;
    return push(l);
  }

  Network& conv(int filters, int kernel, int stride, Activation act) {
    if (kernel > output_.height || kernel > output_.width) {
      throw std::invalid_argument("conv kernel larger than its input");
    }
    Layer l;
    l.kind = LayerKind::kConv;
    l.in = output_;
    l.kernel = kernel;
    l.stride = stride;
    l.out = Shape{filters, (output_.height - kernel) / stride + 1,
                  (output_.width - kernel) / stride + 1};
    l.activation = act;
    return push(l);
  }

  // Transposed convolution producing exactly `out_hw`; the extra rows and
  // columns beyond (in-1)*stride+kernel receive bias only.
  Network& conv_transpose(int filters, int kernel, int stride, int out_h, int out_w,
                          Activation act) {
    Layer l;
    l.kind = LayerKind::kConvTranspose;
    l.in = output_;
    l.kernel = kernel;
    l.stride = stride;
    const int min_h = (output_.height - 1) * stride + kernel;
    const int min_w = (output_.width - 1) * stride + kernel;
    if (out_h < min_h || out_w < min_w || out_h >= min_h + stride || out_w >= min_w + stride) {
      throw std::invalid_argument("conv_transpose: output size not reachable");
    }
    l.out = Shape{filters, out_h, out_w};
    l.activation = act;
    return push(l);
  }

  // Reinterpret the current output as another shape of equal size.
  Network& reshape(Shape s) {
    if (s.size() != output_.size()) throw std::invalid_argument("reshape: size mismatch");
    if (!layers_.empty()) layers_.back().out = s;
    else input_ = s;
    output_ = s;
    return *this;
  }

  const Shape& input_shape() const { return input_; }
  const Shape& output_shape() const { return output_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::size_t param_count() const { return params_.size(); }
  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  // Weights uniform in +-1/sqrt(fan_in), biases zero. Layers listed in
  // `zero_layers` get all-zero weights.
  void init_uniform(Rng& rng, std::span<const std::size_t> zero_layers = {}) {
    std::fill(params_.begin(), params_.end(), 0.0);
    for (std::size_t li = 0; li < layers_.size(); ++li) {
      const Layer& l = layers_[li];
      if (std::find(zero_layers.begin(), zero_layers.end(), li) != zero_layers.end()) continue;
      const double bound = 1.0 / std::sqrt(static_cast<double>(l.fan_in()));
      for (std::size_t i = 0; i < l.weight_count(); ++i) {
        params_[l.param_offset + i] = uniform_real(rng, -bound, bound);
      }
    }
  }

  std::vector<double> forward(std::span<const double> x) const {
    check_input(x);
    std::vector<double> cur(x.begin(), x.end());
    std::vector<double> next;
    for (const Layer& l : layers_) {
      next.assign(l.out.size(), 0.0);
      layer_forward(l, cur, next);
      for (double& v : next) v = activate(l.activation, v);
      cur.swap(next);
    }
    return cur;
  }

  std::vector<double> forward(std::span<const double> x, Trace& trace) const {
    check_input(x);
    trace.inputs.resize(layers_.size());
    trace.pre.resize(layers_.size());
    std::vector<double> cur(x.begin(), x.end());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const Layer& l = layers_[i];
      trace.inputs[i] = cur;
      auto& z = trace.pre[i];
      z.assign(l.out.size(), 0.0);
      layer_forward(l, cur, z);
      cur.resize(z.size());
      for (std::size_t k = 0; k < z.size(); ++k) cur[k] = activate(l.activation, z[k]);
    }
    trace.output = cur;
    return cur;
  }

  // Accumulates dLoss/dparams into `grad` (sized param_count()) given
  // dLoss/doutput. Returns dLoss/dinput when `want_input_grad`.
  std::vector<double> backward(const Trace& trace, std::span<const double> dout,
                               std::span<double> grad, bool want_input_grad = false) const {
    if (grad.size() != params_.size()) throw std::invalid_argument("backward: grad size");
    std::vector<double> delta(dout.begin(), dout.end());
    std::vector<double> din;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      const Layer& l = layers_[i];
      const auto& z = trace.pre[i];
      for (std::size_t k = 0; k < delta.size(); ++k) {
        delta[k] *= activate_grad(l.activation, z[k]);
      }
      const bool need_din = want_input_grad || i > 0;
      if (need_din) din.assign(l.in.size(), 0.0);
      layer_backward(l, trace.inputs[i], delta, grad, need_din ? &din : nullptr);
      if (need_din) delta.swap(din);
    }
    return want_input_grad ? delta : std::vector<double>{};
  }

  nlohmann::json architecture() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : layers_) layers.push_back(l.to_json());
    return {{"input", {input_.channels, input_.height, input_.width}},
            {"layers", layers},
            {"param_count", params_.size()}};
  }

  static Network from_architecture(const nlohmann::json& j) {
    const auto in = j.at("input");
    Network net(Shape{in[0].get<int>(), in[1].get<int>(), in[2].get<int>()});
    for (const auto& lj : j.at("layers")) {
      const std::string kind = lj.at("kind").get<std::string>();
      const auto act = activation_from_string(lj.at("activation").get<std::string>());
      const auto out = lj.at("out");
      const Shape oshape{out[0].get<int>(), out[1].get<int>(), out[2].get<int>()};
      const auto lin = lj.at("in");
      const Shape ishape{lin[0].get<int>(), lin[1].get<int>(), lin[2].get<int>()};
      if (ishape.size() != net.output_.size()) {
        throw std::invalid_argument("architecture: layer input size mismatch");
      }
      net.output_ = ishape;
      if (!net.layers_.empty()) net.layers_.back().out = ishape;
      else net.input_ = ishape;
      if (kind == "dense") {
        net.dense(oshape.size(), act);
        net.reshape(oshape);
      } else if (kind == "conv") {
        net.conv(oshape.channels, lj.at("kernel").get<int>(), lj.at("stride").get<int>(), act);
      } else if (kind == "conv_transpose") {
        net.conv_transpose(oshape.channels, lj.at("kernel").get<int>(),
                           lj.at("stride").get<int>(), oshape.height, oshape.width, act);
      } else {
        throw std::invalid_argument("architecture: unknown layer kind " + kind);
      }
      if (!(net.output_ == oshape)) throw std::invalid_argument("architecture: shape mismatch");
    }
    if (j.contains("param_count") && j.at("param_count").get<std::size_t>() != net.param_count()) {
      throw std::invalid_argument("architecture: parameter count mismatch");
    }
    return net;
  }

 private:
  Network& push(Layer l) {
    l.param_offset = params_.size();
    params_.resize(params_.size() + l.param_count(), 0.0);
    output_ = l.out;
    layers_.push_back(l);
    return *this;
  }

  void check_input(std::span<const double> x) const {
    if (x.size() != input_.size()) {
      throw std::invalid_argument("network input has " + std::to_string(x.size()) +
                                  " values, expected " + std::to_string(input_.size()));
    }
  }

  void layer_forward(const Layer& l, const std::vector<double>& x, std::vector<double>& z) const {
    const double* w = params_.data() + l.param_offset;
    const double* b = w + l.weight_count();
    switch (l.kind) {
      case LayerKind::kDense: {
        const std::size_t n = l.in.size();
        for (std::size_t o = 0; o < z.size(); ++o) {
          const double* row = w + o * n;
          double acc = b[o];
          for (std::size_t i = 0; i < n; ++i) acc += row[i] * x[i];
          z[o] = acc;
        }
        break;
      }
      case LayerKind::kConv: {
        const int C = l.in.channels, H = l.in.height, W = l.in.width;
        const int F = l.out.channels, Ho = l.out.height, Wo = l.out.width;
        const int k = l.kernel, s = l.stride;
        for (int f = 0; f < F; ++f) {
          for (int oy = 0; oy < Ho; ++oy) {
            for (int ox = 0; ox < Wo; ++ox) {
              double acc = b[f];
              for (int c = 0; c < C; ++c) {
                const double* wk = w + ((static_cast<std::size_t>(f) * C + c) * k) * k;
                const double* xc = x.data() + static_cast<std::size_t>(c) * H * W;
                for (int u = 0; u < k; ++u) {
                  const double* xr = xc + static_cast<std::size_t>(oy * s + u) * W + ox * s;
                  for (int v = 0; v < k; ++v) acc += wk[u * k + v] * xr[v];
                }
              }
              z[(static_cast<std::size_t>(f) * Ho + oy) * Wo + ox] = acc;
            }
          }
        }
        break;
      }
      case LayerKind::kConvTranspose: {
        const int C = l.in.channels, H = l.in.height, W = l.in.width;
        const int F = l.out.channels, Ho = l.out.height, Wo = l.out.width;
        const int k = l.kernel, s = l.stride;
        for (int f = 0; f < F; ++f) {
          std::fill(z.begin() + static_cast<std::ptrdiff_t>(f) * Ho * Wo,
                    z.begin() + static_cast<std::ptrdiff_t>(f + 1) * Ho * Wo, b[f]);
        }
        for (int c = 0; c < C; ++c) {
          for (int iy = 0; iy < H; ++iy) {
            for (int ix = 0; ix < W; ++ix) {
              const double xv = x[(static_cast<std::size_t>(c) * H + iy) * W + ix];
              if (xv == 0.0) continue;
              for (int f = 0; f < F; ++f) {
                const double* wk = w + ((static_cast<std::size_t>(c) * F + f) * k) * k;
                double* zf = z.data() + static_cast<std::size_t>(f) * Ho * Wo;
                for (int u = 0; u < k; ++u) {
                  double* zr = zf + static_cast<std::size_t>(iy * s + u) * Wo + ix * s;
                  for (int v = 0; v < k; ++v) zr[v] += xv * wk[u * k + v];
                }
              }
            }
          }
        }
        break;
      }
    }
  }

  void layer_backward(const Layer& l, const std::vector<double>& x,
                      const std::vector<double>& delta, std::span<double> grad,
                      std::vector<double>* din) const {
    const double* w = params_.data() + l.param_offset;
    double* gw = grad.data() + l.param_offset;
    double* gb = gw + l.weight_count();
    switch (l.kind) {
      case LayerKind::kDense: {
        const std::size_t n = l.in.size();
        for (std::size_t o = 0; o < delta.size(); ++o) {
          const double d = delta[o];
          if (d == 0.0) continue;
          gb[o] += d;
          double* grow = gw + o * n;
          for (std::size_t i = 0; i < n; ++i) grow[i] += d * x[i];
          if (din) {
            const double* row = w + o * n;
            for (std::size_t i = 0; i < n; ++i) (*din)[i] += d * row[i];
          }
        }
        break;
      }
      case LayerKind::kConv: {
        const int C = l.in.channels, H = l.in.height, W = l.in.width;
        const int F = l.out.channels, Ho = l.out.height, Wo = l.out.width;
        const int k = l.kernel, s = l.stride;
        for (int f = 0; f < F; ++f) {
          for (int oy = 0; oy < Ho; ++oy) {
            for (int ox = 0; ox < Wo; ++ox) {
              const double d = delta[(static_cast<std::size_t>(f) * Ho + oy) * Wo + ox];
              if (d == 0.0) continue;
              gb[f] += d;
              for (int c = 0; c < C; ++c) {
                const std::size_t wbase = ((static_cast<std::size_t>(f) * C + c) * k) * k;
                const std::size_t xbase = static_cast<std::size_t>(c) * H * W;
                for (int u = 0; u < k; ++u) {
                  const std::size_t xrow = xbase + static_cast<std::size_t>(oy * s + u) * W + ox * s;
                  for (int v = 0; v < k; ++v) {
                    gw[wbase + u * k + v] += d * x[xrow + v];
                    if (din) (*din)[xrow + v] += d * w[wbase + u * k + v];
                  }
                }
              }
            }
          }
        }
        break;
      }
      case LayerKind::kConvTranspose: {
        const int C = l.in.channels, H = l.in.height, W = l.in.width;
        const int F = l.out.channels, Ho = l.out.height, Wo = l.out.width;
        const int k = l.kernel, s = l.stride;
        for (int f = 0; f < F; ++f) {
          double acc = 0.0;
          const double* df = delta.data() + static_cast<std::size_t>(f) * Ho * Wo;
          for (int i = 0; i < Ho * Wo; ++i) acc += df[i];
          gb[f] += acc;
        }
        for (int c = 0; c < C; ++c) {
          for (int iy = 0; iy < H; ++iy) {
            for (int ix = 0; ix < W; ++ix) {
              const std::size_t xi = (static_cast<std::size_t>(c) * H + iy) * W + ix;
              const double xv = x[xi];
              double dx = 0.0;
              for (int f = 0; f < F; ++f) {
                const std::size_t wbase = ((static_cast<std::size_t>(c) * F + f) * k) * k;
                const double* df = delta.data() + static_cast<std::size_t>(f) * Ho * Wo;
                for (int u = 0; u < k; ++u) {
                  const double* dr = df + static_cast<std::size_t>(iy * s + u) * Wo + ix * s;
                  for (int v = 0; v < k; ++v) {
                    gw[wbase + u * k + v] += xv * dr[v];
                    dx += w[wbase + u * k + v] * dr[v];
                  }
                }
              }
              if (din) (*din)[xi] += dx;
            }
          }
        }
        break;
      }
    }
  }

  Shape input_;
  Shape output_;
  std::vector<Layer> layers_;
  std::vector<double> params_;
};

}  // namespace dtamer::nn
