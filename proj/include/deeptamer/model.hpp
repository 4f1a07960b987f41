#pragma once

// Reward models H(s, a).
//
// Every model splits into a fixed embedding stage (feature extraction for the
// linear model, the frozen convolutional encoder for the deep model) and a
// trainable stage that maps an embedding to one value per action. Learners
// embed each experience once and train only the second stage.

#include <cmath>
#include <concepts>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deeptamer/nn.hpp"
#include "deeptamer/random.hpp"
#include "deeptamer/types.hpp"

namespace dtamer {

// One term of the weighted squared loss: w * (H(s, a) - h)^2.
struct WeightedSample {
  const Embedding* embedding = nullptr;
  int action = 0;
  double h = 0.0;
  double w = 0.0;
};

struct Gradient {
  std::vector<double> values;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  NonFiniteGradient() : std::runtime_error("non-finite gradient component; update rejected") {}
};

inline double squared_loss(double prediction, double h, double w) {
  const double r = prediction - h;
  return w * r * r;
}

inline void check_batch(std::span<const WeightedSample> batch, int num_actions) {
  if (batch.empty()) throw std::invalid_argument("gradient of an empty batch");
  for (const auto& s : batch) {
    if (s.embedding == nullptr) throw std::invalid_argument("sample without embedding");
    if (s.action < 0 || s.action >= num_actions) throw std::out_of_range("sample action");
    if (!(s.w > 0.0)) throw std::invalid_argument("sample weight must be positive");
  }
}

inline void sgd_update(std::vector<double>& params, const Gradient& g, double eta) {
  if (!(eta > 0.0)) throw std::invalid_argument("step size must be positive");
  if (g.values.size() != params.size()) throw std::invalid_argument("gradient shape mismatch");
  for (double v : g.values) {
    if (!std::isfinite(v)) throw NonFiniteGradient();
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= eta * g.values[i];
}

// A separate weight vector per action over a fixed feature map (raw pixels
// or the environment's feature vector), plus a constant bias feature.
class LinearPerActionModel {
 public:
  enum class Features { kPixels, kEnvFeatures };

  LinearPerActionModel() = default;
  LinearPerActionModel(int num_actions, int input_dim, Features source)
      : num_actions_(num_actions),
        input_dim_(input_dim),
        source_(source),
        weights_(static_cast<std::size_t>(num_actions) * (input_dim + 1), 0.0) {
    if (num_actions < 1 || input_dim < 1) throw std::invalid_argument("linear model dims");
  }

  int num_actions() const { return num_actions_; }
  int feature_dim() const { return input_dim_ + 1; }
  Features source() const { return source_; }

  Embedding embed(const Observation& s) const {
    const auto& src = source_ == Features::kPixels ? s.pixels : s.features;
    if (static_cast<int>(src.size()) != input_dim_) {
      throw std::invalid_argument(
          std::string("linear model expects ") + std::to_string(input_dim_) + " " +
          (source_ == Features::kPixels ? "pixels" : "features") + ", state has " +
          std::to_string(src.size()));
    }
    Embedding phi(src.begin(), src.end());
    phi.push_back(1.0);
    return phi;
  }

  double value(const Embedding& phi, int a) const {
    const double* row = weights_.data() + static_cast<std::size_t>(a) * feature_dim();
    double acc = 0.0;
    for (int i = 0; i < feature_dim(); ++i) acc += row[i] * phi[i];
    return acc;
  }

  std::vector<double> evaluate(const Embedding& phi) const {
    std::vector<double> q(num_actions_);
    for (int a = 0; a < num_actions_; ++a) q[a] = value(phi, a);
    return q;
  }

  std::vector<double> forward(const Observation& s) const { return evaluate(embed(s)); }

  Gradient gradient(std::span<const WeightedSample> batch) const {
    check_batch(batch, num_actions_);
    Gradient g{std::vector<double>(weights_.size(), 0.0)};
    const double scale = 1.0 / static_cast<double>(batch.size());
    for (const auto& s : batch) {
      const double coef = 2.0 * s.w * (value(*s.embedding, s.action) - s.h) * scale;
      double* row = g.values.data() + static_cast<std::size_t>(s.action) * feature_dim();
      for (int i = 0; i < feature_dim(); ++i) row[i] += coef * (*s.embedding)[i];
    }
    return g;
  }

  void sgd_step(const Gradient& g, double eta) { sgd_update(weights_, g, eta); }

  std::vector<double>& parameters() { return weights_; }
  const std::vector<double>& parameters() const { return weights_; }
  // Nothing is frozen in the linear model.
  std::span<const double> frozen_parameters() const { return {}; }

  double& weight(int a, int i) {
    return weights_[static_cast<std::size_t>(a) * feature_dim() + i];
  }

  nlohmann::json architecture() const {
    return {{"kind", "linear"},
            {"num_actions", num_actions_},
            {"input_dim", input_dim_},
            {"features", source_ == Features::kPixels ? "pixels" : "env"}};
  }

  static LinearPerActionModel from_architecture(const nlohmann::json& j) {
    if (j.at("kind") != "linear") throw std::invalid_argument("not a linear model");
    const std::string f = j.at("features").get<std::string>();
    if (f != "pixels" && f != "env") throw std::invalid_argument("linear features: " + f);
    return LinearPerActionModel(j.at("num_actions").get<int>(), j.at("input_dim").get<int>(),
                                f == "pixels" ? Features::kPixels : Features::kEnvFeatures);
  }

 private:
  int num_actions_ = kNumActions;
  int input_dim_ = 1;
  Features source_ = Features::kPixels;
  std::vector<double> weights_;
};

struct ConvSpec {
  int filters = 8;
  int kernel = 5;
  int stride = 2;
};

struct EncoderConfig {
  int height = 32;
  int width = 32;
  std::vector<ConvSpec> conv{{8, 5, 2}, {16, 5, 2}};
  int latent_dim = 16;
  nn::Activation hidden_activation = nn::Activation::kRelu;
  nn::Activation latent_activation = nn::Activation::kLinear;
  nn::Activation output_activation = nn::Activation::kSigmoid;  // decoder output

  // 160x160x2 input, 100-dimensional code.
  static EncoderConfig paper_scale() {
    EncoderConfig c;
    c.height = 160;
    c.width = 160;
    c.conv = {{16, 6, 2}, {32, 5, 2}, {32, 5, 2}, {32, 5, 2}};
    c.latent_dim = 100;
    return c;
  }

  nlohmann::json to_json() const {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& c : conv) {
      layers.push_back({{"filters", c.filters}, {"kernel", c.kernel}, {"stride", c.stride}});
    }
    return {{"height", height},
            {"width", width},
            {"conv", layers},
            {"latent_dim", latent_dim},
            {"hidden_activation", nn::to_string(hidden_activation)},
            {"latent_activation", nn::to_string(latent_activation)},
            {"output_activation", nn::to_string(output_activation)}};
  }

  static EncoderConfig from_json(const nlohmann::json& j) {
    EncoderConfig c;
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    if (j.contains("conv")) {
      c.conv.clear();
      for (const auto& l : j.at("conv")) {
        c.conv.push_back({l.at("filters").get<int>(), l.at("kernel").get<int>(),
                          l.at("stride").get<int>()});
      }
    }
    c.latent_dim = j.value("latent_dim", c.latent_dim);
    if (j.contains("hidden_activation")) {
      c.hidden_activation = nn::activation_from_string(j.at("hidden_activation"));
    }
    if (j.contains("latent_activation")) {
      c.latent_activation = nn::activation_from_string(j.at("latent_activation"));
    }
    if (j.contains("output_activation")) {
      c.output_activation = nn::activation_from_string(j.at("output_activation"));
    }
    return c;
  }
};

// Encoder: convs then a dense layer to the code. Decoder mirrors it with a
// dense layer back to the last conv volume and transposed convs whose output
// sizes retrace the encoder's intermediate shapes.
inline nn::Network build_encoder(const EncoderConfig& cfg) {
  nn::Network enc(nn::Shape{Observation::kFrames, cfg.height, cfg.width});
  for (const auto& c : cfg.conv) enc.conv(c.filters, c.kernel, c.stride, cfg.hidden_activation);
  enc.dense(cfg.latent_dim, cfg.latent_activation);
  return enc;
}

inline nn::Network build_decoder(const EncoderConfig& cfg, const nn::Network& encoder) {
  const auto& layers = encoder.layers();
  const std::size_t n_conv = layers.size() - 1;
  nn::Network dec(nn::Shape{1, 1, cfg.latent_dim});
  if (n_conv == 0) {
    dec.dense(static_cast<int>(encoder.input_shape().size()), cfg.output_activation);
    dec.reshape(encoder.input_shape());
    return dec;
  }
  const nn::Shape volume = layers[n_conv - 1].out;
  dec.dense(static_cast<int>(volume.size()), cfg.hidden_activation);
  dec.reshape(volume);
  for (std::size_t i = n_conv; i-- > 0;) {
    const auto& l = layers[i];
    const auto act = i == 0 ? cfg.output_activation : cfg.hidden_activation;
    dec.conv_transpose(l.in.channels, l.kernel, l.stride, l.in.height, l.in.width, act);
  }
  return dec;
}

struct HeadConfig {
  std::vector<int> hidden{16, 16};
  nn::Activation activation = nn::Activation::kRelu;

  nlohmann::json to_json() const {
    return {{"hidden", hidden}, {"activation", nn::to_string(activation)}};
  }
  static HeadConfig from_json(const nlohmann::json& j) {
    HeadConfig h;
    if (j.contains("hidden")) h.hidden = j.at("hidden").get<std::vector<int>>();
    if (j.contains("activation")) h.activation = nn::activation_from_string(j.at("activation"));
    return h;
  }
};

// Fully connected head: hidden layers then one linear output per action.
inline nn::Network build_head(int input_dim, int num_actions, const HeadConfig& cfg) {
  nn::Network head(nn::Shape{1, 1, input_dim});
  for (int units : cfg.hidden) head.dense(units, cfg.activation);
  head.dense(num_actions, nn::Activation::kLinear);
  return head;
}

// Hidden layers seeded uniform in +-1/sqrt(fan_in); output layer zero so the
// untrained model predicts 0 for every action.
inline void init_head(nn::Network& head, Rng& rng) {
  const std::size_t last = head.layers().size() - 1;
  head.init_uniform(rng, std::span<const std::size_t>(&last, 1));
}

// H(s, a) = head(encoder(s))[a] with the encoder frozen.
class DeepRewardModel {
 public:
  DeepRewardModel() = default;
  DeepRewardModel(nn::Network encoder, nn::Network head)
      : encoder_(std::move(encoder)), head_(std::move(head)) {
    if (encoder_.output_shape().size() != head_.input_shape().size()) {
      throw std::invalid_argument("head input does not match encoder code size");
    }
  }

  static DeepRewardModel create(nn::Network encoder, int num_actions, const HeadConfig& cfg,
                                Rng& rng) {
    auto head = build_head(static_cast<int>(encoder.output_shape().size()), num_actions, cfg);
    init_head(head, rng);
    return DeepRewardModel(std::move(encoder), std::move(head));
  }

  int num_actions() const { return static_cast<int>(head_.output_shape().size()); }

  Embedding embed(const Observation& s) const {
    if (s.pixels.size() != encoder_.input_shape().size()) {
      throw std::invalid_argument("state shape " + std::to_string(Observation::kFrames) + "x" +
                                  std::to_string(s.height) + "x" + std::to_string(s.width) +
                                  " does not match encoder input " +
                                  std::to_string(encoder_.input_shape().channels) + "x" +
                                  std::to_string(encoder_.input_shape().height) + "x" +
                                  std::to_string(encoder_.input_shape().width));
    }
    return encoder_.forward(s.pixels);
  }

  std::vector<double> evaluate(const Embedding& code) const { return head_.forward(code); }
  double value(const Embedding& code, int a) const { return evaluate(code)[a]; }
  std::vector<double> forward(const Observation& s) const { return evaluate(embed(s)); }

  // Averaged gradient of the weighted loss with respect to head parameters.
  // The error enters only through the output node of the sample's action.
  Gradient gradient(std::span<const WeightedSample> batch) const {
    check_batch(batch, num_actions());
    Gradient g{std::vector<double>(head_.param_count(), 0.0)};
    const double scale = 1.0 / static_cast<double>(batch.size());
    nn::Trace trace;
    std::vector<double> dout(num_actions(), 0.0);
    for (const auto& s : batch) {
      const auto q = head_.forward(*s.embedding, trace);
      std::fill(dout.begin(), dout.end(), 0.0);
      dout[s.action] = 2.0 * s.w * (q[s.action] - s.h) * scale;
      head_.backward(trace, dout, g.values);
    }
    return g;
  }

  // Gradient of w * (H(s, a) - h)^2 with respect to the encoder parameters,
  // back-propagated through the head. Used for pretraining-style checks; the
  // interactive learner never applies it.
  std::vector<double> encoder_gradient(const Observation& s, int action, double h,
                                       double w) const {
    nn::Trace enc_trace;
    nn::Trace head_trace;
    const auto code = encoder_.forward(s.pixels, enc_trace);
    const auto q = head_.forward(code, head_trace);
    std::vector<double> dout(num_actions(), 0.0);
    dout[action] = 2.0 * w * (q[action] - h);
    std::vector<double> head_grad(head_.param_count(), 0.0);
    const auto dcode = head_.backward(head_trace, dout, head_grad, true);
    std::vector<double> enc_grad(encoder_.param_count(), 0.0);
    encoder_.backward(enc_trace, dcode, enc_grad);
    return enc_grad;
  }

  void sgd_step(const Gradient& g, double eta) { sgd_update(head_.params(), g, eta); }

  std::vector<double>& parameters() { return head_.params(); }
  const std::vector<double>& parameters() const { return head_.params(); }
  std::span<const double> frozen_parameters() const { return encoder_.params(); }

  const nn::Network& encoder() const { return encoder_; }
  const nn::Network& head() const { return head_; }
  nn::Network& mutable_encoder() { return encoder_; }

  nlohmann::json architecture() const {
    return {{"kind", "deep"},
            {"num_actions", num_actions()},
            {"encoder", encoder_.architecture()},
            {"head", head_.architecture()}};
  }

 private:
  nn::Network encoder_;
  nn::Network head_;
};

inline double loss(double prediction, double h, double w) { return squared_loss(prediction, h, w); }

template <class M>
concept RewardModel = requires(M m, const M cm, const Observation& s, const Embedding& e,
                               std::span<const WeightedSample> batch, const Gradient& g) {
  { cm.num_actions() } -> std::convertible_to<int>;
  { cm.embed(s) } -> std::same_as<Embedding>;
  { cm.evaluate(e) } -> std::same_as<std::vector<double>>;
  { cm.gradient(batch) } -> std::same_as<Gradient>;
  m.sgd_step(g, 0.1);
  { cm.parameters() } -> std::convertible_to<const std::vector<double>&>;
  { cm.frozen_parameters() } -> std::convertible_to<std::span<const double>>;
};

static_assert(RewardModel<LinearPerActionModel>);
static_assert(RewardModel<DeepRewardModel>);

// Mean weighted loss of a batch under the current model.
template <RewardModel M>
double batch_loss(const M& model, std::span<const WeightedSample> batch) {
  if (batch.empty()) return 0.0;
  double total = 0.0;
  for (const auto& s : batch) {
    total += squared_loss(model.evaluate(*s.embedding)[s.action], s.h, s.w);
  }
  return total / static_cast<double>(batch.size());
}

}  // namespace dtamer
