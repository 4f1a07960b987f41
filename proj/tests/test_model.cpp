#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "deeptamer/autoencoder.hpp"
#include "deeptamer/model.hpp"
#include "deeptamer/params_io.hpp"
#include "oracles.hpp"

namespace dtamer {
namespace {

Observation random_state(Rng& rng, int h, int w) {
  Observation s;
  s.height = h;
  s.width = w;
  s.pixels.resize(static_cast<std::size_t>(Observation::kFrames) * h * w);
  for (double& v : s.pixels) v = uniform01(rng);
  return s;
}

std::vector<double> random_vector(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = uniform_real(rng, -scale, scale);
  return v;
}

EncoderConfig tiny_encoder(int h = 9, int w = 9) {
  EncoderConfig c;
  c.height = h;
  c.width = w;
  c.conv = {{3, 3, 2}, {2, 3, 1}};
  c.latent_dim = 4;
  c.hidden_activation = nn::Activation::kTanh;
  c.latent_activation = nn::Activation::kTanh;
  c.output_activation = nn::Activation::kSigmoid;
  return c;
}

TEST(Forward, ZeroOutputLayerGivesZeros) {
  Rng rng(1);
  auto enc = build_encoder(tiny_encoder());
  enc.init_uniform(rng);
  auto m = DeepRewardModel::create(enc, kNumActions, HeadConfig{}, rng);
  for (int i = 0; i < 5; ++i) {
    const auto q = m.forward(random_state(rng, 9, 9));
    ASSERT_EQ(q.size(), 4u);
    for (double v : q) EXPECT_EQ(v, 0.0);
  }
}

TEST(Forward, LinearDotProductIdentity) {
  LinearPerActionModel m(kNumActions, 5, LinearPerActionModel::Features::kEnvFeatures);
  for (int a = 0; a < kNumActions; ++a) m.weight(a, 2) = 1.0;  // row_a = e_2
  Observation s;
  s.features = {0.0, 0.0, 3.5, 0.0, 0.0};
  for (double v : m.forward(s)) EXPECT_EQ(v, 3.5);
}

TEST(Forward, ShapeMismatchRejected) {
  Rng rng(2);
  auto enc = build_encoder(tiny_encoder());
  auto m = DeepRewardModel::create(enc, kNumActions, HeadConfig{}, rng);
  EXPECT_THROW(m.forward(random_state(rng, 8, 9)), std::invalid_argument);
  LinearPerActionModel lin(kNumActions, 10, LinearPerActionModel::Features::kPixels);
  EXPECT_THROW(lin.forward(random_state(rng, 9, 9)), std::invalid_argument);
}

// Straight-line forward pass of a fixed 2-action toy model: 2x5x5 input,
// one 2-filter 3x3 stride-1 ReLU conv, dense to 3 (tanh), head 3 -> 4 (ReLU)
// -> 2. Indices are spelled out against the documented parameter layout.
TEST(Forward, MatchesIndependentReimplementation) {
  EncoderConfig cfg;
  cfg.height = 5;
  cfg.width = 5;
  cfg.conv = {{2, 3, 1}};
  cfg.latent_dim = 3;
  cfg.hidden_activation = nn::Activation::kRelu;
  cfg.latent_activation = nn::Activation::kTanh;
  Rng rng(77);
  auto enc = build_encoder(cfg);
  enc.init_uniform(rng);
  for (double& p : enc.params()) p += 0.05;  // nonzero biases too
  HeadConfig hc;
  hc.hidden = {4};
  auto m = DeepRewardModel::create(enc, 2, hc, rng);
  for (double& p : m.parameters()) p = uniform_real(rng, -0.7, 0.7);
  const auto s = random_state(rng, 5, 5);

  const auto& pe = m.encoder().params();
  // conv: W[f][c][u][v] (2*2*9 = 36) then b[f] (2)
  double conv_out[2][3][3];
  for (int f = 0; f < 2; ++f)
    for (int y = 0; y < 3; ++y)
      for (int x = 0; x < 3; ++x) {
        double acc = pe[36 + f];
        for (int c = 0; c < 2; ++c)
          for (int u = 0; u < 3; ++u)
            for (int v = 0; v < 3; ++v)
              acc += pe[f * 18 + c * 9 + u * 3 + v] * s.pixels[c * 25 + (y + u) * 5 + (x + v)];
        conv_out[f][y][x] = std::max(0.0, acc);
      }
  // dense: W[3][18] at 38, b[3] at 38 + 54
  double code[3];
  for (int o = 0; o < 3; ++o) {
    double acc = pe[38 + 54 + o];
    int i = 0;
    for (int f = 0; f < 2; ++f)
      for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) acc += pe[38 + o * 18 + i++] * conv_out[f][y][x];
    code[o] = std::tanh(acc);
  }
  const auto& ph = m.head().params();
  // W1[4][3] at 0, b1[4] at 12, W2[2][4] at 16, b2[2] at 24
  double hidden[4];
  for (int j = 0; j < 4; ++j) {
    double acc = ph[12 + j];
    for (int i = 0; i < 3; ++i) acc += ph[j * 3 + i] * code[i];
    hidden[j] = std::max(0.0, acc);
  }
  double expected[2];
  for (int a = 0; a < 2; ++a) {
    double acc = ph[24 + a];
    for (int j = 0; j < 4; ++j) acc += ph[16 + a * 4 + j] * hidden[j];
    expected[a] = acc;
  }
  const auto q = m.forward(s);
  EXPECT_NEAR(q[0], expected[0], 1e-14);
  EXPECT_NEAR(q[1], expected[1], 1e-14);
}

TEST(Loss, Examples) {
  EXPECT_EQ(loss(0.0, 1.0, 1.0), 1.0);
  EXPECT_EQ(loss(0.7, 0.7, 3.0), 0.0);
  EXPECT_DOUBLE_EQ(loss(0.5, -1.0, 0.25), 0.5625);
  Rng rng(4);
  for (int i = 0; i < 1000; ++i) {
    const double p = uniform_real(rng, -5, 5);
    const double h = uniform_real(rng, -5, 5);
    const double w = uniform01(rng);
    EXPECT_GE(loss(p, h, w), 0.0);
  }
}

TEST(Grad, TabularHandDerivative) {
  // One-hot single feature without any other input: H(s, a) = theta_a.
  LinearPerActionModel m(kNumActions, 1, LinearPerActionModel::Features::kEnvFeatures);
  Observation s;
  s.features = {0.0};
  const auto phi = m.embed(s);  // [0, 1]: the bias acts as theta_a
  const WeightedSample sample{&phi, 2, 1.0, 0.5};
  const auto g = m.gradient(std::span(&sample, 1));
  for (int a = 0; a < kNumActions; ++a) {
    EXPECT_EQ(g.values[a * 2 + 1], a == 2 ? -1.0 : 0.0);
    EXPECT_EQ(g.values[a * 2 + 0], 0.0);
  }
  m.sgd_step(g, 0.1);
  EXPECT_DOUBLE_EQ(m.evaluate(phi)[2], 0.1);
}

TEST(Grad, BatchOfIdenticalSamplesEqualsSingle) {
  Rng rng(6);
  auto enc = build_encoder(tiny_encoder());
  enc.init_uniform(rng);
  auto m = DeepRewardModel::create(enc, kNumActions, HeadConfig{}, rng);
  for (double& p : m.parameters()) p = uniform_real(rng, -0.5, 0.5);
  const auto code = m.embed(random_state(rng, 9, 9));
  const WeightedSample s{&code, 1, 0.8, 0.3};
  const std::vector<WeightedSample> two{s, s};
  const auto g1 = m.gradient(std::span(&s, 1));
  const auto g2 = m.gradient(two);
  for (std::size_t i = 0; i < g1.values.size(); ++i) EXPECT_DOUBLE_EQ(g1.values[i], g2.values[i]);
}

TEST(Grad, EmptyBatchRejected) {
  LinearPerActionModel m(kNumActions, 3, LinearPerActionModel::Features::kEnvFeatures);
  EXPECT_THROW(m.gradient({}), std::invalid_argument);
}

template <class M>
double batch_objective(const M& m, const std::vector<WeightedSample>& batch) {
  return batch_loss(m, std::span<const WeightedSample>(batch));
}

TEST(GradCheck, LinearMatchesFiniteDifferences) {
  for (int inst = 0; inst < 20; ++inst) {
    Rng rng(100 + inst);
    LinearPerActionModel m(kNumActions, 6, LinearPerActionModel::Features::kEnvFeatures);
    m.parameters() = random_vector(rng, m.parameters().size());
    std::vector<Embedding> codes;
    for (int i = 0; i < 5; ++i) {
      Observation s;
      s.features = random_vector(rng, 6);
      codes.push_back(m.embed(s));
    }
    std::vector<WeightedSample> batch;
    for (const auto& c : codes) {
      batch.push_back({&c, static_cast<int>(uniform_index(rng, kNumActions)),
                       uniform_real(rng, -1, 1), uniform_real(rng, 0.05, 1.0)});
    }
    const auto analytic = m.gradient(batch).values;
    const auto numeric = testing::finite_difference([&] { return batch_objective(m, batch); },
                                                    m.parameters());
    EXPECT_LT(testing::max_relative_error(analytic, numeric), 1e-4) << "instance " << inst;
  }
}

TEST(GradCheck, MlpHeadMatchesFiniteDifferences) {
  for (int inst = 0; inst < 20; ++inst) {
    Rng rng(200 + inst);
    auto enc = build_encoder(tiny_encoder());
    enc.init_uniform(rng);
    HeadConfig hc;
    hc.hidden = {6, 5};
    auto m = DeepRewardModel::create(enc, kNumActions, hc, rng);
    ASSERT_LE(m.parameters().size(), 200u);
    m.parameters() = random_vector(rng, m.parameters().size(), 0.8);
    std::vector<Embedding> codes;
    for (int i = 0; i < 6; ++i) codes.push_back(m.embed(random_state(rng, 9, 9)));
    std::vector<WeightedSample> batch;
    for (const auto& c : codes) {
      batch.push_back({&c, static_cast<int>(uniform_index(rng, kNumActions)),
                       uniform_real(rng, -1, 1), uniform_real(rng, 0.05, 1.0)});
    }
    const auto analytic = m.gradient(batch).values;
    const auto numeric = testing::finite_difference([&] { return batch_objective(m, batch); },
                                                    m.parameters());
    EXPECT_LT(testing::max_relative_error(analytic, numeric), 1e-4) << "instance " << inst;
  }
}

TEST(GradCheck, ConvEncoderPathMatchesFiniteDifferences) {
  for (int inst = 0; inst < 20; ++inst) {
    Rng rng(300 + inst);
    auto enc = build_encoder(tiny_encoder());
    enc.init_uniform(rng);
    for (double& p : enc.params()) p += uniform_real(rng, -0.1, 0.1);
    HeadConfig hc;
    hc.hidden = {5};
    hc.activation = nn::Activation::kTanh;
    auto m = DeepRewardModel::create(enc, kNumActions, hc, rng);
    m.parameters() = random_vector(rng, m.parameters().size(), 0.8);
    const auto s = random_state(rng, 9, 9);
    const int a = static_cast<int>(uniform_index(rng, kNumActions));
    const double h = uniform_real(rng, -1, 1);
    const double w = uniform_real(rng, 0.1, 1.0);
    const auto analytic = m.encoder_gradient(s, a, h, w);
    const auto numeric = testing::finite_difference(
        [&] { return loss(m.forward(s)[a], h, w); }, m.mutable_encoder().params());
    EXPECT_LT(testing::max_relative_error(analytic, numeric), 1e-4) << "instance " << inst;
  }
}

TEST(GradCheck, AutoencoderReconstructionMatchesFiniteDifferences) {
  for (int inst = 0; inst < 5; ++inst) {
    Rng rng(400 + inst);
    const auto cfg = tiny_encoder();
    auto enc = build_encoder(cfg);
    auto dec = build_decoder(cfg, enc);
    enc.init_uniform(rng);
    dec.init_uniform(rng);
    for (double& p : dec.params()) p += uniform_real(rng, -0.1, 0.1);
    std::vector<Observation> states{random_state(rng, 9, 9), random_state(rng, 9, 9)};
    std::vector<const Observation*> ptrs{&states[0], &states[1]};
    const auto analytic = reconstruction_gradient(enc, dec, ptrs);
    auto objective = [&] { return reconstruction_error(enc, dec, states); };
    auto ne = testing::finite_difference(objective, enc.params());
    const auto nd = testing::finite_difference(objective, dec.params());
    ne.insert(ne.end(), nd.begin(), nd.end());
    EXPECT_LT(testing::max_relative_error(analytic, ne), 1e-4) << "instance " << inst;
  }
}

TEST(Grad, OnlyTheSampledActionRowIsTouched) {
  Rng rng(9);
  auto enc = build_encoder(tiny_encoder());
  enc.init_uniform(rng);
  auto m = DeepRewardModel::create(enc, kNumActions, HeadConfig{}, rng);
  m.parameters() = random_vector(rng, m.parameters().size(), 0.5);
  const auto& out = m.head().layers().back();
  const int in = static_cast<int>(out.in.size());
  for (int a = 0; a < kNumActions; ++a) {
    const auto code = m.embed(random_state(rng, 9, 9));
    const WeightedSample s{&code, a, 1.0, 0.7};
    const auto g = m.gradient(std::span(&s, 1));
    for (int other = 0; other < kNumActions; ++other) {
      if (other == a) continue;
      for (int i = 0; i < in; ++i) EXPECT_EQ(g.values[out.param_offset + other * in + i], 0.0);
      EXPECT_EQ(g.values[out.param_offset + out.weight_count() + other], 0.0);
    }
  }
}

TEST(SgdStep, ExamplesAndRejection) {
  LinearPerActionModel m(kNumActions, 2, LinearPerActionModel::Features::kEnvFeatures);
  const auto before = m.parameters();
  m.sgd_step(Gradient{std::vector<double>(before.size(), 0.0)}, 0.1);
  EXPECT_EQ(m.parameters(), before);
  Gradient bad{std::vector<double>(before.size(), 0.0)};
  bad.values[3] = std::nan("");
  EXPECT_THROW(m.sgd_step(bad, 0.1), NonFiniteGradient);
  EXPECT_EQ(m.parameters(), before);
  EXPECT_THROW(m.sgd_step(Gradient{{1.0}}, 0.1), std::invalid_argument);
  EXPECT_THROW(m.sgd_step(Gradient{before}, 0.0), std::invalid_argument);
}

TEST(SgdStep, LinearModelUpdatesCompose) {
  Rng rng(12);
  LinearPerActionModel a(kNumActions, 4, LinearPerActionModel::Features::kEnvFeatures);
  a.parameters() = random_vector(rng, a.parameters().size());
  auto b = a;
  // Parameter updates are additive, so two steps equal one combined step
  // for fixed gradient vectors.
  Gradient g1{random_vector(rng, a.parameters().size())};
  Gradient g2{random_vector(rng, a.parameters().size())};
  a.sgd_step(g1, 0.5);
  a.sgd_step(g2, 0.5);
  Gradient sum{g1.values};
  for (std::size_t i = 0; i < sum.values.size(); ++i) sum.values[i] += g2.values[i];
  b.sgd_step(sum, 0.5);
  for (std::size_t i = 0; i < sum.values.size(); ++i) {
    EXPECT_NEAR(a.parameters()[i], b.parameters()[i], 1e-15);
  }
}

TEST(FrozenEncoder, UntouchedByHeadUpdates) {
  Rng rng(13);
  auto enc = build_encoder(tiny_encoder());
  enc.init_uniform(rng);
  auto m = DeepRewardModel::create(enc, kNumActions, HeadConfig{}, rng);
  const std::vector<double> enc_before(m.frozen_parameters().begin(), m.frozen_parameters().end());
  for (int i = 0; i < 50; ++i) {
    const auto code = m.embed(random_state(rng, 9, 9));
    const WeightedSample s{&code, static_cast<int>(uniform_index(rng, 4)), 1.0, 0.5};
    m.sgd_step(m.gradient(std::span(&s, 1)), 0.05);
  }
  ASSERT_EQ(enc_before.size(), m.frozen_parameters().size());
  EXPECT_EQ(std::memcmp(enc_before.data(), m.frozen_parameters().data(),
                        enc_before.size() * sizeof(double)),
            0);
}

TEST(Policy, ArgmaxInvariantUnderPositiveAffineMaps) {
  Rng rng(14);
  for (int i = 0; i < 1000; ++i) {
    auto q = random_vector(rng, kNumActions, 3.0);
    const double c = uniform_real(rng, 0.01, 10.0);
    const double shift = uniform_real(rng, -5.0, 5.0);
    auto q2 = q;
    for (double& v : q2) v = c * v + shift;
    EXPECT_EQ(std::max_element(q.begin(), q.end()) - q.begin(),
              std::max_element(q2.begin(), q2.end()) - q2.begin());
  }
}

TEST(Pretrain, ZeroFramesZeroNetworkHasZeroLoss) {
  PretrainConfig cfg;
  cfg.encoder = tiny_encoder();
  cfg.encoder.output_activation = nn::Activation::kLinear;
  cfg.zero_init = true;
  cfg.epochs = 0;
  Observation zero;
  zero.height = 9;
  zero.width = 9;
  zero.pixels.assign(2 * 81, 0.0);
  const std::vector<Observation> data{zero};
  const auto r = pretrain_autoencoder(data, cfg);
  ASSERT_EQ(r.loss_history.size(), 1u);
  EXPECT_EQ(r.loss_history[0], 0.0);
}

TEST(Pretrain, IdentityCapableLinearAutoencoderConverges) {
  PretrainConfig cfg;
  cfg.encoder.height = 2;
  cfg.encoder.width = 2;
  cfg.encoder.conv.clear();
  cfg.encoder.latent_dim = 8;  // input dim 2*2*2
  cfg.encoder.latent_activation = nn::Activation::kLinear;
  cfg.encoder.output_activation = nn::Activation::kLinear;
  cfg.batch_size = 10;
  cfg.epochs = 300;
  Rng rng(15);
  std::vector<Observation> data;
  for (int i = 0; i < 100; ++i) data.push_back(random_state(rng, 2, 2));
  cfg.optimizer = Optimizer::kMomentum;
  cfg.eta = 0.02;
  const auto sgd = pretrain_autoencoder(data, cfg);
  EXPECT_LT(sgd.loss_history.back(), 1e-3 * sgd.loss_history.front());
  cfg.optimizer = Optimizer::kAdam;
  cfg.eta = 0.01;
  const auto adam = pretrain_autoencoder(data, cfg);
  EXPECT_LT(adam.loss_history.back(), 1e-3 * adam.loss_history.front());
}

TEST(Pretrain, InconsistentShapesRejected) {
  Rng rng(16);
  PretrainConfig cfg;
  cfg.encoder = tiny_encoder();
  std::vector<Observation> data{random_state(rng, 9, 9), random_state(rng, 9, 8)};
  EXPECT_THROW(pretrain_autoencoder(data, cfg), std::invalid_argument);
  EXPECT_THROW(pretrain_autoencoder({}, cfg), std::invalid_argument);
}

TEST(Decoder, MirrorsEncoderShape) {
  for (auto cfg : {EncoderConfig{}, tiny_encoder(), EncoderConfig::paper_scale()}) {
    const auto enc = build_encoder(cfg);
    const auto dec = build_decoder(cfg, enc);
    EXPECT_EQ(dec.output_shape(), enc.input_shape());
    EXPECT_EQ(enc.output_shape().size(), static_cast<std::size_t>(cfg.latent_dim));
  }
  const auto paper = build_encoder(EncoderConfig::paper_scale());
  EXPECT_EQ(paper.input_shape().size(), 51200u);
  EXPECT_EQ(paper.output_shape().size(), 100u);
}

TEST(ParamsIo, RoundTripIsBitExact) {
  Rng rng(17);
  auto enc = build_encoder(EncoderConfig{});
  enc.init_uniform(rng);
  auto m = DeepRewardModel::create(enc, kNumActions, HeadConfig{}, rng);
  m.parameters() = random_vector(rng, m.parameters().size());
  std::stringstream ss;
  write_param_file(ss, to_param_file(m, 42));
  const auto loaded = deep_from_param_file(read_param_file(ss));
  for (int i = 0; i < 100; ++i) {
    const auto s = random_state(rng, 32, 32);
    const auto a = m.forward(s);
    const auto b = loaded.forward(s);
    EXPECT_EQ(std::memcmp(a.data(), b.data(), a.size() * sizeof(double)), 0);
  }

  LinearPerActionModel lin(kNumActions, 7, LinearPerActionModel::Features::kEnvFeatures);
  lin.parameters() = random_vector(rng, lin.parameters().size());
  std::stringstream ls;
  write_param_file(ls, to_param_file(lin));
  EXPECT_EQ(linear_from_param_file(read_param_file(ls)).parameters(), lin.parameters());
}

TEST(ParamsIo, TruncationAndCorruptionRejected) {
  LinearPerActionModel lin(kNumActions, 7, LinearPerActionModel::Features::kEnvFeatures);
  lin.parameters().assign(lin.parameters().size(), 0.25);
  std::stringstream ss;
  write_param_file(ss, to_param_file(lin));
  const std::string bytes = ss.str();

  std::stringstream truncated(bytes.substr(0, bytes.size() - 5));
  EXPECT_THROW(read_param_file(truncated), ParamFileError);

  std::string flipped = bytes;
  flipped[flipped.size() - 3] ^= 0x10;
  std::stringstream corrupt(flipped);
  EXPECT_THROW(read_param_file(corrupt), ParamFileError);

  std::stringstream empty;
  EXPECT_THROW(read_param_file(empty), ParamFileError);
}

TEST(ParamsIo, ActionCountMismatchRejected) {
  LinearPerActionModel lin(3, 7, LinearPerActionModel::Features::kEnvFeatures);
  const auto f = to_param_file(lin);
  EXPECT_THROW(check_action_count(f, kNumActions), ParamFileError);
  EXPECT_NO_THROW(check_action_count(f, 3));
}

TEST(ParamsIo, EncoderFileRoundTrip) {
  Rng rng(18);
  const EncoderConfig cfg;
  auto enc = build_encoder(cfg);
  auto dec = build_decoder(cfg, enc);
  enc.init_uniform(rng);
  dec.init_uniform(rng);
  std::stringstream ss;
  write_param_file(ss, encoder_param_file(enc, &dec, cfg, 3));
  const auto f = read_param_file(ss);
  EXPECT_EQ(model_kind(f), "encoder");
  const auto loaded = encoder_from_param_file(f);
  EXPECT_EQ(loaded.params(), enc.params());
  EXPECT_EQ(nn::Network::from_architecture(f.manifest["architecture"]["decoder"]).param_count(),
            dec.param_count());
}

}  // namespace
}  // namespace dtamer
