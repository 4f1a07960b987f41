#pragma once

#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "deeptamer/envsim.hpp"
#include "deeptamer/model.hpp"
#include "deeptamer/nn.hpp"
#include "deeptamer/random.hpp"
#include "deeptamer/types.hpp"

namespace dtamer {

enum class Optimizer { kMomentum, kAdam };

inline const char* to_string(Optimizer o) { return o == Optimizer::kAdam ? "adam" : "momentum"; }

inline Optimizer optimizer_from_string(const std::string& s) {
  if (s == "adam") return Optimizer::kAdam;
  if (s == "momentum") return Optimizer::kMomentum;
  throw std::invalid_argument("unknown optimizer: " + s);
}

struct PretrainConfig {
  EncoderConfig encoder;
  int batch_size = 32;
  int epochs = 50;
  double eta = 1e-3;
  Optimizer optimizer = Optimizer::kAdam;
  double momentum = 0.9;  // momentum SGD; Adam's first-moment decay
  double beta2 = 0.999;   // Adam only
  double epsilon = 1e-8;  // Adam only
  std::uint64_t seed = 1;
  bool zero_init = false;  // all parameters zero; only useful for tests
  // Rescale the code to zero mean and unit variance over the training states
  // once training ends (see standardize_code).
  bool standardize = true;
};

struct PretrainResult {
  nn::Network encoder;
  nn::Network decoder;
  // Mean reconstruction error over the training set: entry 0 before any
  // update, then one entry per epoch.
  std::vector<double> loss_history;
};

inline double reconstruction_error(const nn::Network& encoder, const nn::Network& decoder,
                                   std::span<const Observation> states) {
  double total = 0.0;
  for (const auto& s : states) {
    const auto out = decoder.forward(encoder.forward(s.pixels));
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double r = s.pixels[i] - out[i];
      total += r * r;
    }
  }
  return states.empty() ? 0.0 : total / static_cast<double>(states.size());
}

// Gradient of the batch-mean of ||s - g(f(s))||^2 over encoder and decoder
// parameters, concatenated [encoder | decoder].
inline std::vector<double> reconstruction_gradient(const nn::Network& encoder,
                                                   const nn::Network& decoder,
                                                   std::span<const Observation* const> batch) {
  std::vector<double> genc(encoder.param_count(), 0.0);
  std::vector<double> gdec(decoder.param_count(), 0.0);
  const double scale = 1.0 / static_cast<double>(batch.size());
  nn::Trace te;
  nn::Trace td;
  std::vector<double> dout;
  for (const Observation* s : batch) {
    const auto code = encoder.forward(s->pixels, te);
    const auto out = decoder.forward(code, td);
    dout.resize(out.size());
    for (std::size_t i = 0; i < out.size(); ++i) dout[i] = 2.0 * (out[i] - s->pixels[i]) * scale;
    const auto dcode = decoder.backward(td, dout, gdec, true);
    encoder.backward(te, dcode, genc);
  }
  genc.insert(genc.end(), gdec.begin(), gdec.end());
  return genc;
}

// Folds a per-dimension affine map into the encoder's last layer so codes
// have zero mean and unit variance over `states`, and folds the inverse
// into the decoder's first layer so reconstructions are unchanged. The
// reward head then sees inputs of a fixed scale whatever the code magnitudes
// the autoencoder happened to learn. Needs a linear code layer and dense
// layers at both ends of the code.
inline void standardize_code(nn::Network& encoder, nn::Network& decoder,
                             std::span<const Observation> states) {
  const auto& el = encoder.layers().back();
  const auto& dl = decoder.layers().front();
  if (el.kind != nn::LayerKind::kDense || el.activation != nn::Activation::kLinear ||
      dl.kind != nn::LayerKind::kDense) {
    throw std::invalid_argument("code standardization needs a linear dense code layer");
  }
  if (states.empty()) throw std::invalid_argument("code standardization needs states");
  const std::size_t d = el.out.size();
  std::vector<double> mean(d, 0.0), var(d, 0.0);
  std::vector<Embedding> codes;
  codes.reserve(states.size());
  for (const auto& s : states) codes.push_back(encoder.forward(s.pixels));
  for (const auto& c : codes) {
    for (std::size_t k = 0; k < d; ++k) mean[k] += c[k];
  }
  for (auto& m : mean) m /= static_cast<double>(codes.size());
  for (const auto& c : codes) {
    for (std::size_t k = 0; k < d; ++k) var[k] += (c[k] - mean[k]) * (c[k] - mean[k]);
  }
  std::vector<double> sd(d);
  for (std::size_t k = 0; k < d; ++k) {
    sd[k] = std::sqrt(var[k] / static_cast<double>(codes.size()));
    // A constant dimension is only centred.
    if (!(sd[k] > 1e-12)) sd[k] = 1.0;
  }

  // Encoder rows: z' = (W x + b - mean) / sd.
  const std::size_t n_in = el.in.size();
  double* w = encoder.params().data() + el.param_offset;
  double* b = w + el.weight_count();
  for (std::size_t o = 0; o < d; ++o) {
    for (std::size_t i = 0; i < n_in; ++i) w[o * n_in + i] /= sd[o];
    b[o] = (b[o] - mean[o]) / sd[o];
  }
  // Decoder columns: W (sd * z' + mean) + b.
  const std::size_t n_out = dl.out.size();
  double* wd = decoder.params().data() + dl.param_offset;
  double* bd = wd + dl.weight_count();
  for (std::size_t o = 0; o < n_out; ++o) {
    double shift = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
      shift += wd[o * d + k] * mean[k];
      wd[o * d + k] *= sd[k];
    }
    bd[o] += shift;
  }
}

inline PretrainResult pretrain_autoencoder(std::span<const Observation> states,
                                           const PretrainConfig& cfg) {
  if (states.empty()) throw std::invalid_argument("pretraining needs at least one state");
  for (const auto& s : states) {
    if (s.height != states[0].height || s.width != states[0].width ||
        s.pixels.size() != states[0].pixels.size()) {
      throw std::invalid_argument("pretraining states have inconsistent shapes");
    }
  }
  if (states[0].height != cfg.encoder.height || states[0].width != cfg.encoder.width) {
    throw std::invalid_argument("pretraining states do not match the encoder input size");
  }
  if (cfg.batch_size < 1 || cfg.epochs < 0) throw std::invalid_argument("pretrain config");

  Rng rng(cfg.seed);
  PretrainResult r;
  r.encoder = build_encoder(cfg.encoder);
  r.decoder = build_decoder(cfg.encoder, r.encoder);
  if (!cfg.zero_init) {
    r.encoder.init_uniform(rng);
    r.decoder.init_uniform(rng);
  }

  const std::size_t n_enc = r.encoder.param_count();
  std::vector<double> velocity(n_enc + r.decoder.param_count(), 0.0);
  std::vector<double> second(cfg.optimizer == Optimizer::kAdam ? velocity.size() : 0, 0.0);
  double decay1 = 1.0;
  double decay2 = 1.0;
  std::vector<std::size_t> order(states.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<const Observation*> batch;

  r.loss_history.push_back(reconstruction_error(r.encoder, r.decoder, states));
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[uniform_index(rng, i)]);
    }
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      batch.clear();
      for (std::size_t k = start; k < std::min(order.size(), start + cfg.batch_size); ++k) {
        batch.push_back(&states[order[k]]);
      }
      const auto g = reconstruction_gradient(r.encoder, r.decoder, batch);
      for (double v : g) {
        if (!std::isfinite(v)) throw NonFiniteGradient();
      }
      auto& pe = r.encoder.params();
      auto& pd = r.decoder.params();
      if (cfg.optimizer == Optimizer::kAdam) {
        decay1 *= cfg.momentum;
        decay2 *= cfg.beta2;
      }
      for (std::size_t i = 0; i < velocity.size(); ++i) {
        double step;
        if (cfg.optimizer == Optimizer::kAdam) {
          velocity[i] = cfg.momentum * velocity[i] + (1.0 - cfg.momentum) * g[i];
          second[i] = cfg.beta2 * second[i] + (1.0 - cfg.beta2) * g[i] * g[i];
          const double mhat = velocity[i] / (1.0 - decay1);
          const double vhat = second[i] / (1.0 - decay2);
          step = -cfg.eta * mhat / (std::sqrt(vhat) + cfg.epsilon);
        } else {
          velocity[i] = cfg.momentum * velocity[i] - cfg.eta * g[i];
          step = velocity[i];
        }
        if (i < n_enc) pe[i] += step;
        else pd[i - n_enc] += step;
      }
    }
    r.loss_history.push_back(reconstruction_error(r.encoder, r.decoder, states));
  }
  if (cfg.standardize && !cfg.zero_init) standardize_code(r.encoder, r.decoder, states);
  return r;
}

// States visited by a uniformly random policy, one per step, resetting at
// episode ends. These are the autoencoder's training set.
inline std::vector<Observation> collect_random_frames(Environment& env, std::size_t count,
                                                      std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Observation> frames;
  frames.reserve(count);
  std::uint64_t episode = 0;
  env.reset(derive_seed(seed, episode));
  while (frames.size() < count) {
    if (env.done()) env.reset(derive_seed(seed, ++episode));
    frames.push_back(env.step(action_from_index(static_cast<int>(uniform_index(rng, kNumActions)))).observation);
  }
  return frames;
}

}  // namespace dtamer
