#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "eevit/checkpoint.hpp"
#include "eevit/errors.hpp"
#include "eevit/vit.hpp"
#include "../support/gradcheck.hpp"

using namespace eevit;
using eevit::testing::random_tensor;

namespace {

ViTConfig small_config(int layers = 3) {
  ViTConfig c;
  c.image_side = 8;
  c.channels = 2;
  c.patch_side = 4;
  c.layers = layers;
  c.hidden = 8;
  c.heads = 2;
  c.mlp_ratio = 2;
  c.num_classes = 5;
  return c;
}

void fill(Tensor t, double v) {
  for (auto& x : t.mutable_data()) x = v;
}

void set(Tensor t, std::vector<double> v) {
  REQUIRE(t.numel() == v.size());
  std::copy(v.begin(), v.end(), t.mutable_data().begin());
}

}  // namespace

TEST_CASE("geometry") {
  ViTConfig c;
  CHECK(c.tokens() == 16);
  ViTConfig b16;
  b16.image_side = 224;
  b16.patch_side = 16;
  CHECK(b16.tokens() == 196);
  ViTConfig bad = c;
  bad.patch_side = 7;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = c;
  bad.heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("patchify") {
  Rng rng(1);
  VisionTransformer vit(small_config(), rng);
  Tensor img = random_tensor({2, 2, 8, 8}, rng, -1, 1, false);
  CHECK(vit.patchify(img).shape() == Shape{2, 4, 8});
  CHECK(vit.embed(img).tokens.shape() == Shape{2, 5, 8});
  CHECK_THROWS_AS(vit.patchify(Tensor::zeros({1, 3, 8, 8})), ShapeError);
  CHECK_THROWS_AS(vit.patchify(Tensor::zeros({1, 2, 8})), ShapeError);

  fill(vit.patch_embed.weight, 0.0);
  fill(vit.patch_embed.bias, 0.0);
  const Tensor zero_tokens = vit.patchify(Tensor::zeros({1, 2, 8, 8}));
  for (double v : zero_tokens.data()) CHECK(v == 0.0);

  // Patch rows are (channel, row, column) flattened; pick out one pixel per token.
  fill(vit.patch_embed.weight, 0.0);
  auto w = vit.patch_embed.weight.mutable_data();
  const std::size_t ch1_y2_x3 = 1 * 16 + 2 * 4 + 3;
  w[ch1_y2_x3 * 8 + 0] = 1.0;
  Tensor probe = Tensor::zeros({1, 2, 8, 8});
  auto pv = probe.mutable_data();
  pv[(1 * 8 + (4 + 2)) * 8 + (0 + 3)] = 7.0;  // token (gy=1, gx=0) = index 2
  Tensor toks = vit.patchify(probe);
  CHECK(toks[2 * 8 + 0] == 7.0);
  CHECK(toks[0 * 8 + 0] == 0.0);
}

TEST_CASE("mhsa closed forms") {
  Rng rng(2);
  SUBCASE("single token: attention [[1]], output x W_V W_O") {
    MultiHeadAttention attn(2, 1, rng);
    for (auto* l : {&attn.q, &attn.k, &attn.v, &attn.o}) fill(l->bias, 0.0);
    set(attn.v.weight, {1, 2, 3, 4});
    set(attn.o.weight, {0, 1, 1, 0});
    Tensor w;
    Tensor y = attn.forward(Tensor({1, 1, 2}, {1.0, -1.0}), &w);
    CHECK(w.item() == 1.0);
    // x W_V = [1-3, 2-4] = [-2, -2]; W_O swaps.
    CHECK(y[0] == doctest::Approx(-2.0));
    CHECK(y[1] == doctest::Approx(-2.0));
  }
  SUBCASE("identical tokens attend uniformly") {
    MultiHeadAttention attn(4, 2, rng);
    Tensor x = Tensor({1, 3, 4}, {1, 2, 3, 4, 1, 2, 3, 4, 1, 2, 3, 4});
    Tensor w;
    attn.forward(x, &w);
    for (double v : w.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
  }
  SUBCASE("two tokens, two channels, hand evaluation") {
    MultiHeadAttention attn(2, 1, rng);
    for (auto* l : {&attn.q, &attn.k, &attn.v, &attn.o}) fill(l->bias, 0.0);
    set(attn.q.weight, {1, 0, 0, 1});
    set(attn.k.weight, {2, 0, 0, 1});
    set(attn.v.weight, {1, 2, 3, 4});
    set(attn.o.weight, {1, 0, 0, 1});
    Tensor x({1, 2, 2}, {1, 0, 0, 1});
    Tensor w;
    Tensor y = attn.forward(x, &w);
    // Q = x, K = x diag(2,1): scores = [[2,0],[0,1]] / sqrt(2).
    const double r = std::sqrt(2.0);
    const double p00 = std::exp(2 / r) / (std::exp(2 / r) + 1), p01 = 1 - p00;
    const double p10 = 1 / (1 + std::exp(1 / r)), p11 = 1 - p10;
    CHECK(w[0] == doctest::Approx(p00));
    CHECK(w[1] == doctest::Approx(p01));
    CHECK(w[2] == doctest::Approx(p10));
    CHECK(w[3] == doctest::Approx(p11));
    // V rows [1,2] and [3,4].
    CHECK(y[0] == doctest::Approx(p00 * 1 + p01 * 3));
    CHECK(y[1] == doctest::Approx(p00 * 2 + p01 * 4));
    CHECK(y[2] == doctest::Approx(p10 * 1 + p11 * 3));
    CHECK(y[3] == doctest::Approx(p10 * 2 + p11 * 4));
  }
  CHECK_THROWS_AS(MultiHeadAttention(6, 4, rng), ConfigError);
}

TEST_CASE("layer taps and prefix property") {
  Rng rng(3);
  VisionTransformer vit(small_config(4), rng);
  Tensor img = random_tensor({2, 2, 8, 8}, rng, -1, 1, false);
  AttentionRecord rec;
  EncoderOutput full = vit.forward_to_layer(img, 4, &rec);
  CHECK(full.layer_index == 4);
  REQUIRE(rec.layers.size() == 4);
  for (const auto& w : rec.layers) {
    CHECK(w.shape() == Shape{2, 2, 5, 5});
    for (std::size_t r = 0; r < w.numel() / 5; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < 5; ++c) s += w[r * 5 + c];
      CHECK(std::abs(s - 1.0) < 1e-9);
    }
  }
  EncoderOutput step = vit.forward_to_layer(img, 1);
  for (int m = 2; m <= 4; ++m) step = vit.continue_to(step, m);
  CHECK(std::equal(step.tokens.data().begin(), step.tokens.data().end(), full.tokens.data().begin()));
  CHECK_THROWS_AS(vit.forward_to_layer(img, 5), std::out_of_range);
  CHECK_THROWS_AS(vit.forward_to_layer(img, -1), std::out_of_range);
  CHECK_THROWS_AS(vit.continue_to(full, 2), std::out_of_range);

  Tensor logits = vit.forward(img);
  Tensor again = vit.final_classifier(full);
  CHECK(std::equal(logits.data().begin(), logits.data().end(), again.data().begin()));
  CHECK_THROWS_AS(vit.final_classifier(vit.forward_to_layer(img, 3)), std::invalid_argument);
}

TEST_CASE("taps at {4,6,8,10} of a 12-layer model") {
  Rng rng(4);
  VisionTransformer vit(small_config(12), rng);
  Tensor img = random_tensor({1, 2, 8, 8}, rng, -1, 1, false);
  std::vector<EncoderOutput> taps;
  EncoderOutput x = vit.embed(img);
  for (int m : {4, 6, 8, 10}) {
    x = vit.continue_to(x, m);
    taps.push_back(x);
  }
  REQUIRE(taps.size() == 4);
  CHECK(taps[2].layer_index == 8);
  CHECK(taps[2].patches().shape() == Shape{1, 4, 8});
  CHECK(taps[2].cls().shape() == Shape{1, 8});
}

TEST_CASE("zeroed blocks are identity maps") {
  Rng rng(5);
  VisionTransformer vit(small_config(3), rng);
  for (auto& b : vit.blocks) {
    for (Linear* l : {&b.attn.q, &b.attn.k, &b.attn.v, &b.attn.o, &b.fc1, &b.fc2}) {
      fill(l->weight, 0.0);
      fill(l->bias, 0.0);
    }
  }
  Tensor img = random_tensor({2, 2, 8, 8}, rng, -1, 1, false);
  Tensor e = vit.embed(img).tokens;
  for (int m = 1; m <= 3; ++m) {
    Tensor t = vit.forward_to_layer(img, m).tokens;
    CHECK(std::equal(t.data().begin(), t.data().end(), e.data().begin()));
  }
}

TEST_CASE("final classifier") {
  Rng rng(6);
  ViTConfig c = small_config(2);
  VisionTransformer vit(c, rng);
  Tensor img = random_tensor({2, 2, 8, 8}, rng, -1, 1, false);
  fill(vit.head.weight, 0.0);
  fill(vit.head.bias, 0.0);
  Tensor z = vit.forward(img);
  for (double v : z.data()) CHECK(v == 0.0);
  Tensor p = softmax(z, -1);
  for (double v : p.data()) CHECK(v == doctest::Approx(0.2));

  c.num_classes = 100;
  Rng rng2(6);
  VisionTransformer wide(c, rng2);
  CHECK(wide.forward(img).shape() == Shape{2, 100});

  // Distinct CLS vectors give distinct logits under identity-like weights.
  ViTConfig sq = small_config(1);
  sq.num_classes = sq.hidden;
  Rng rng3(7);
  VisionTransformer v3(sq, rng3);
  fill(v3.head.weight, 0.0);
  for (std::size_t i = 0; i < sq.hidden; ++i) v3.head.weight.mutable_data()[i * sq.hidden + i] = 1.0;
  Tensor l3 = v3.forward(img);
  CHECK_FALSE(std::equal(l3.data().begin(), l3.data().begin() + 8, l3.data().begin() + 8));
}

TEST_CASE("initialisation") {
  Rng rng(8);
  VisionTransformer vit(small_config(), rng);
  for (double v : vit.cls_token.data()) CHECK(v == 0.0);
  for (double v : vit.pos_embed.data()) CHECK(std::abs(v) <= 0.04);
}

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(9);
  VisionTransformer vit(small_config(), rng);
  StateCollector c;
  vit.collect(c);
  auto state = c.all();
  set(state[0].value, std::vector<double>(state[0].value.numel(), -0.0));
  state[1].value.mutable_data()[0] = std::numeric_limits<double>::denorm_min();

  const auto bytes = encode_checkpoint(state);
  REQUIRE(bytes.size() > 6);
  CHECK(std::memcmp(bytes.data(), "EEVIT", 5) == 0);
  CHECK(bytes[5] == kCheckpointVersion);

  const auto path = std::filesystem::temp_directory_path() / "eevit_vit_roundtrip.ckpt";
  save_checkpoint(path, state);
  Rng other(10);
  VisionTransformer copy(small_config(), other);
  StateCollector c2;
  copy.collect(c2);
  load_checkpoint(path, c2.all());
  const auto a = c.all(), b = c2.all();
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].name == b[i].name);
    CHECK(std::memcmp(a[i].value.data().data(), b[i].value.data().data(), a[i].value.numel() * sizeof(double)) == 0);
  }
  CHECK(encode_checkpoint(b) == bytes);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(decode_checkpoint(truncated), FormatError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad_magic), FormatError);

  auto arrays = decode_checkpoint(bytes);
  arrays[0].shape.push_back(1);
  CHECK_THROWS(load_into(arrays, c2.all()));
  arrays = decode_checkpoint(bytes);
  arrays.pop_back();
  CHECK_THROWS(load_into(arrays, c2.all()));
  std::filesystem::remove(path);
}
