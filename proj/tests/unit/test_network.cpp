#include <doctest.h>

#include "test_util.hpp"
#include "tbd/network.hpp"
#include "tbd/ops.hpp"

using namespace tbd;

namespace {

NoisePredictorConfig small_config() {
  NoisePredictorConfig c;
  c.channels = {8, 16};
  c.d_k = 4;
  c.heads = 2;
  c.frames = 2;
  c.text_dim = 6;
  c.audio_dim = 5;
  c.groupnorm_groups = 4;
  c.latent_size = 8;
  c.time_dim = 8;
  return c;
}

NetworkConditioning random_conditioning(const NoisePredictorConfig& c, int frames, Rng& rng) {
  NetworkConditioning cond;
  cond.text = test::random_tensor({5, c.text_dim}, rng);
  cond.audio = test::random_tensor({frames, 3, c.audio_dim}, rng);
  for (int l = 0; l < c.levels; ++l) {
    cond.reference.push_back(test::random_tensor({c.channels[l], c.level_size(l), c.level_size(l)}, rng));
  }
  return cond;
}

AttentionLayerWeights identity_projections(int d) {
  std::vector<double> eye(static_cast<std::size_t>(d * d), 0.0);
  for (int i = 0; i < d; ++i) eye[static_cast<std::size_t>(i * d + i)] = 1.0;
  AttentionLayerWeights w;
  w.to_q.weight = Tensor::from({d, d}, eye);
  w.to_k.weight = Tensor::from({d, d}, eye);
  w.to_v.weight = Tensor::from({d, d}, eye);
  w.to_out.weight = Tensor::from({d, d}, eye);
  w.heads = 1;
  return w;
}

}  // namespace

TEST_SUITE("network") {

TEST_CASE("cross-attention: two queries, two keys, hand computed") {
  // logits = Q K^T / sqrt(2) with Q = K = I; softmax row 0 = [p, 1 - p],
  // p = 1 / (1 + exp(-1/sqrt(2))).
  const Tensor q = Tensor::from({1, 2, 2}, {1, 0, 0, 1});
  const Tensor ctx_k = Tensor::from({1, 2, 2}, {1, 0, 0, 1});
  const auto w = identity_projections(2);
  AttentionLayerWeights wv = w;
  wv.to_v.weight = Tensor::from({2, 2}, {1, 2, 3, 4});  // rows of V: [1 2], [3 4]
  const Tensor out = cross_attention(q, ctx_k, wv);
  const double expected[4] = {1.6604769013466862, 2.6604769013466862, 2.3395230986533138,
                              3.3395230986533138};
  for (int i = 0; i < 4; ++i) CHECK(std::abs(out[i] - expected[i]) <= 1e-10);
}

TEST_CASE("cross-attention: a single key returns its value exactly") {
  Rng rng(2);
  nn::ParameterStore store;
  auto w = AttentionLayerWeights::make(store, "a", 8, 5, 8, 2, rng);
  w.to_out = identity_projections(8).to_out;
  const Tensor q = test::random_tensor({2, 4, 8}, rng);
  const Tensor c = test::random_tensor({1, 1, 5}, rng);
  const Tensor out = cross_attention(q, c, w);
  const Tensor v = w.to_v(c);
  for (int b = 0; b < 2; ++b)
    for (int i = 0; i < 4; ++i)
      for (int d = 0; d < 8; ++d) CHECK(out[(b * 4 + i) * 8 + d] == v[d]);
}

TEST_CASE("cross-attention is invariant to context permutation") {
  Rng rng(3);
  nn::ParameterStore store;
  const auto w = AttentionLayerWeights::make(store, "a", 4, 4, 8, 2, rng);
  const Tensor q = test::random_tensor({1, 3, 4}, rng);
  const Tensor c = test::random_tensor({1, 4, 4}, rng);
  const Tensor perm = ops::concat({ops::slice(c, 1, 2, 2), ops::slice(c, 1, 0, 2)}, 1);
  const Tensor a = cross_attention(q, c, w);
  const Tensor b = cross_attention(q, perm, w);
  CHECK(test::bytes_equal(a, b));
}

TEST_CASE("attention layers are the identity at initialization") {
  const auto cfg = small_config();
  Rng rng(4);
  nn::ParameterStore store;
  const auto block = AttentionBlock::make(store, "blk", 8, cfg, rng);
  const Tensor x = test::random_tensor({2, 8, 8, 8}, rng);
  const Tensor ref = test::random_tensor({8, 8, 8}, rng);
  CHECK(test::bytes_equal(block.reference(x, ref), x));
  CHECK(test::bytes_equal(block.text(x, test::random_tensor({1, 5, cfg.text_dim}, rng)), x));
  CHECK(test::bytes_equal(block.audio(x, test::random_tensor({2, 3, cfg.audio_dim}, rng)), x));
  CHECK(test::bytes_equal(block.temporal(x), x));
}

TEST_CASE("noise predictor at init equals its convolutional spine") {
  const auto cfg = small_config();
  Rng rng(5);
  nn::ParameterStore store;
  const NoisePredictor net(store, cfg, rng);
  const Tensor z = test::random_tensor({2, 3, 8, 8}, rng);
  const auto cond = random_conditioning(cfg, 2, rng);
  const Tensor full = net.forward(z, 417, cond);
  const Tensor spine = net.forward(z, 417, cond, true);
  CHECK(full.shape() == z.shape());
  CHECK(test::bytes_equal(full, spine));
}

TEST_CASE("forward is bit-identical across reruns with different heap layouts") {
  const auto cfg = small_config();
  Rng rng(15);
  nn::ParameterStore store;
  const NoisePredictor net(store, cfg, rng);
  const Tensor z = test::random_tensor({2, 3, 8, 8}, rng);
  const auto cond = random_conditioning(cfg, 2, rng);
  const Tensor first = net.forward(z, 250, cond);
  std::vector<std::vector<double>> ballast;
  for (int i = 0; i < 6; ++i) {
    ballast.emplace_back(static_cast<std::size_t>(3 * i + 1), 0.0);
    CHECK(test::bytes_equal(net.forward(z, 250, cond), first));
  }
}

TEST_CASE("trained attention makes the output depend on conditioning") {
  const auto cfg = small_config();
  Rng rng(6);
  nn::ParameterStore store;
  const NoisePredictor net(store, cfg, rng);
  for (const auto& [name, p] : store.items()) {
    if (name.find("proj_out") != std::string::npos || name.find("to_out") != std::string::npos) {
      Tensor t = p;
      for (double& v : t.mutable_data()) v = 0.1 * rng.normal();
    }
  }
  const Tensor z = test::random_tensor({2, 3, 8, 8}, rng);
  auto cond = random_conditioning(cfg, 2, rng);
  const Tensor a = net.forward(z, 100, cond);
  cond.text = test::random_tensor({5, cfg.text_dim}, rng);
  const Tensor b = net.forward(z, 100, cond);
  CHECK(test::max_abs_diff(a, b) > 1e-6);
}

TEST_CASE("temporal attention mixes frames only when trained") {
  const auto cfg = small_config();
  Rng rng(7);
  nn::ParameterStore store;
  auto layer = TemporalAttentionLayer::make(store, "t", 8, cfg, rng);
  for (double& v : Tensor(layer.proj_out.weight).mutable_data()) v = 0.2 * rng.normal();
  const Tensor x = test::random_tensor({3, 8, 4, 4}, rng);
  const Tensor y = layer(x);
  // Frame 0 of the output changes when frame 2 of the input changes.
  Tensor x2 = x.clone();
  x2.mutable_data()[2 * 8 * 16] += 1.0;
  const Tensor y2 = layer(x2);
  double diff = 0.0;
  for (int i = 0; i < 8 * 16; ++i) diff += std::abs(y[i] - y2[i]);
  CHECK(diff > 0.0);
}

TEST_CASE("config validation") {
  auto c = small_config();
  CHECK_NOTHROW(c.validate());
  c.channels = {8};
  CHECK_THROWS_AS(c.validate(), ShapeError);
  c = small_config();
  c.groupnorm_groups = 3;
  CHECK_THROWS_AS(c.validate(), ShapeError);
  c = small_config();
  c.latent_size = 7;
  CHECK_THROWS_AS(c.validate(), ShapeError);
  c = small_config();
  c.time_dim = 7;
  CHECK_THROWS_AS(c.validate(), ShapeError);
}

TEST_CASE("forward rejects mismatched shapes") {
  const auto cfg = small_config();
  Rng rng(8);
  nn::ParameterStore store;
  const NoisePredictor net(store, cfg, rng);
  const auto cond = random_conditioning(cfg, 2, rng);
  CHECK_THROWS_AS(net.forward(test::random_tensor({2, 3, 16, 16}, rng), 1, cond), ShapeError);
  auto bad = cond;
  bad.audio = test::random_tensor({3, 3, cfg.audio_dim}, rng);
  CHECK_THROWS_AS(net.forward(test::random_tensor({2, 3, 8, 8}, rng), 1, bad), ShapeError);
}

TEST_CASE("timestep embedding is sinusoidal") {
  const auto e = timestep_embedding(0.0, 8);
  REQUIRE(e.size() == 8);
  for (int i = 0; i < 4; ++i) {
    CHECK(e[static_cast<std::size_t>(i)] == 0.0);
    CHECK(e[static_cast<std::size_t>(4 + i)] == 1.0);
  }
}

}  // TEST_SUITE
