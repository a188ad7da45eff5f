#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>

#include "eevit/errors.hpp"
#include "eevit/exit_heads.hpp"
#include "eevit/model.hpp"
#include "../support/gradcheck.hpp"

using namespace eevit;
using eevit::testing::random_tensor;

namespace {

void fill(Tensor t, double v) {
  for (auto& x : t.mutable_data()) x = v;
}

void set_identity(Linear& l) {
  fill(l.weight, 0.0);
  fill(l.bias, 0.0);
  const std::size_t n = l.weight.dim(0);
  for (std::size_t i = 0; i < n; ++i) l.weight.mutable_data()[i * n + i] = 1.0;
}

// [1, 1+N, D] with the given CLS row and patch rows.
EncoderOutput tokens_at(int layer, std::vector<double> cls, std::vector<std::vector<double>> patches) {
  std::vector<double> v = cls;
  for (auto& r : patches) v.insert(v.end(), r.begin(), r.end());
  return {Tensor({1, patches.size() + 1, cls.size()}, v), layer};
}

double gelu_ref(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

// y[t] = x[t] W + b for row-major W [in, out].
std::vector<std::vector<double>> affine(const std::vector<std::vector<double>>& x, const Tensor& w, const Tensor& b) {
  const std::size_t in = w.dim(0), out = w.dim(1);
  std::vector<std::vector<double>> y(x.size(), std::vector<double>(out, 0.0));
  for (std::size_t t = 0; t < x.size(); ++t) {
    for (std::size_t j = 0; j < out; ++j) {
      double s = b[j];
      for (std::size_t i = 0; i < in; ++i) s += x[t][i] * w[i * out + j];
      y[t][j] = s;
    }
  }
  return y;
}

// Brute force: every strictly increasing placement in [1, L), lexicographic order.
std::vector<int> brute_force_placement(const std::vector<double>& macs, int count) {
  const int L = static_cast<int>(macs.size());
  std::vector<double> cum(macs.size() + 1, 0.0);
  for (std::size_t i = 0; i < macs.size(); ++i) cum[i + 1] = cum[i] + macs[i];
  const double total = cum.back();
  std::vector<int> best, cur;
  double best_cost = std::numeric_limits<double>::infinity();
  std::function<void(int)> rec = [&](int start) {
    if (static_cast<int>(cur.size()) == count) {
      double c = 0;
      for (int j = 1; j <= count; ++j) {
        const double d = cum[static_cast<std::size_t>(cur[static_cast<std::size_t>(j - 1)])] - total * j / count;
        c += d * d;
      }
      if (c < best_cost - 1e-12 * std::max(1.0, total * total)) {
        best_cost = c;
        best = cur;
      }
      return;
    }
    for (int p = start; p < L; ++p) {
      cur.push_back(p);
      rec(p + 1);
      cur.pop_back();
    }
  };
  rec(1);
  return best;
}

}  // namespace

TEST_CASE("pdconv") {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({2, 16, 3}, rng, -1, 1, false);
  Tensor same = pdconv(x, Tensor(), Tensor(), 0);
  CHECK(same.node() == x.node());
  CHECK(std::equal(same.data().begin(), same.data().end(), x.data().begin()));

  // Averaging kernel: interior tokens keep the constant, borders see zero padding.
  Tensor avg = Tensor::full({3, 3, 1}, 1.0 / 9.0);
  Tensor y = pdconv(Tensor::full({1, 16, 1}, 2.0), avg, Tensor(), 3);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 4; ++c) {
      const double covered = static_cast<double>((r == 0 || r == 3 ? 2 : 3) * (c == 0 || c == 3 ? 2 : 3));
      CHECK(y[r * 4 + c] == doctest::Approx(2.0 * covered / 9.0));
    }
  }
  CHECK(y[5] == doctest::Approx(2.0));

  // 2x2 grid, k=3, zero padding: each output sees the whole grid at shifted taps.
  Tensor k({3, 3, 1}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor g = pdconv(Tensor({1, 4, 1}, {1, 2, 3, 4}), k, Tensor({1}, {0.5}), 3);
  // out(0,0) = 5*1 + 6*2 + 8*3 + 9*4; out(0,1) = 4*1 + 5*2 + 7*3 + 8*4
  // out(1,0) = 2*1 + 3*2 + 5*3 + 6*4; out(1,1) = 1*1 + 2*2 + 4*3 + 5*4
  CHECK(g[0] == 77.5);
  CHECK(g[1] == 67.5);
  CHECK(g[2] == 47.5);
  CHECK(g[3] == 37.5);
  CHECK_THROWS_AS(pdconv(Tensor::zeros({1, 5, 1}), k, Tensor(), 3), ShapeError);
}

TEST_CASE("pfc") {
  std::vector<double> grid;
  for (int i = 1; i <= 16; ++i) grid.push_back(i);
  Tensor p = pfc(Tensor({1, 16, 1}, grid), 2);
  CHECK(p.shape() == Shape{1, 4, 1});
  CHECK(p[0] == 3.5);
  CHECK(p[1] == 5.5);
  CHECK(p[2] == 11.5);
  CHECK(p[3] == 13.5);

  for (int s : {2, 3, 4, 5}) {
    Tensor c = pfc(Tensor::full({2, 16, 3}, -1.25), s);
    for (double v : c.data()) CHECK(v == doctest::Approx(-1.25));
  }
  // 5x5 with s=2: edge windows average what they cover.
  std::vector<double> g5;
  for (int i = 0; i < 25; ++i) g5.push_back(i);
  Tensor e = pfc(Tensor({1, 25, 1}, g5), 2);
  CHECK(e.dim(1) == 9);
  CHECK(e[2] == doctest::Approx((4 + 9) / 2.0));
  CHECK(e[8] == 24.0);
  // Global mean kept when the side divides.
  std::mt19937_64 rng(2);
  Tensor r = random_tensor({1, 36, 2}, rng, -1, 1, false);
  Tensor pr = pfc(r, 3);
  CHECK(mean(pr).item() == doctest::Approx(mean(r).item()).epsilon(1e-12));
  CHECK_THROWS_AS(pfc(r, 1), ConfigError);
}

TEST_CASE("local perception head") {
  Rng rng(3);
  SUBCASE("collapses to token mean + CLS") {
    LocalPerceptionHead h(3, 1, 0, rng);
    h.set_bypass(true);
    set_identity(h.expand);
    set_identity(h.project);
    auto x = tokens_at(2, {0, 0, 0}, {{1, 2, 3}, {3, 2, 1}, {0, 0, 0}, {4, 4, 4}});
    HeadOutput out = h.forward(x, NormMode::Train);
    CHECK(out.feature[0] == 2.0);
    CHECK(out.feature[1] == 2.0);
    CHECK(out.feature[2] == 2.0);
    auto xc = tokens_at(2, {0.5, -1, 2}, {{1, 2, 3}, {3, 2, 1}, {0, 0, 0}, {4, 4, 4}});
    HeadOutput oc = h.forward(xc, NormMode::Train);
    CHECK(oc.feature[0] - out.feature[0] == 0.5);
    CHECK(oc.feature[1] - out.feature[1] == -1.0);
    CHECK(oc.feature[2] - out.feature[2] == 2.0);
  }
  SUBCASE("hand evaluation with GELU and eval-mode BN, D=4, N=4, k=3") {
    LocalPerceptionHead h(4, 1, 3, rng);
    std::mt19937_64 r(9);
    auto x = EncoderOutput{random_tensor({1, 5, 4}, r, -1, 1, false), 1};
    for (Tensor t : {h.expand.bias, h.project.bias, h.dw_bias}) {
      std::uniform_real_distribution<double> u(-0.3, 0.3);
      for (auto& v : t.mutable_data()) v = u(r);
    }
    HeadOutput out = h.forward(x, NormMode::Eval);

    // Eval BN with fresh statistics: x / sqrt(1 + eps).
    const double bn = 1.0 / std::sqrt(1.0 + 1e-5);
    std::vector<std::vector<double>> t(4, std::vector<double>(4));
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t c = 0; c < 4; ++c) t[i][c] = x.tokens[(1 + i) * 4 + c];
    }
    auto act = [&](std::vector<std::vector<double>> v) {
      for (auto& row : v) {
        for (auto& e : row) e = gelu_ref(e) * bn;
      }
      return v;
    };
    auto a = act(affine(t, h.expand.weight, h.expand.bias));
    std::vector<std::vector<double>> d(4, std::vector<double>(4, 0.0));
    for (int gy = 0; gy < 2; ++gy) {
      for (int gx = 0; gx < 2; ++gx) {
        for (std::size_t c = 0; c < 4; ++c) {
          double s = h.dw_bias[c];
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              const int sy = gy + ky - 1, sx = gx + kx - 1;
              if (sy < 0 || sy > 1 || sx < 0 || sx > 1) continue;
              s += h.dw_weight[(static_cast<std::size_t>(ky) * 3 + static_cast<std::size_t>(kx)) * 4 + c] *
                   a[static_cast<std::size_t>(sy * 2 + sx)][c];
            }
          }
          d[static_cast<std::size_t>(gy * 2 + gx)][c] = s;
        }
      }
    }
    auto f = act(affine(act(d), h.project.weight, h.project.bias));
    for (std::size_t c = 0; c < 4; ++c) {
      const double pooled = (f[0][c] + f[1][c] + f[2][c] + f[3][c]) / 4.0;
      CHECK(out.feature[c] == doctest::Approx(pooled + x.tokens[c]).epsilon(1e-12));
    }
    CHECK(out.feature_map.shape() == Shape{1, 4, 4});
  }
  SUBCASE("expansion widens the hidden stages only") {
    LocalPerceptionHead h(4, 3, 3, rng);
    CHECK(h.dw_weight.shape() == Shape{3, 3, 12});
    std::mt19937_64 r(1);
    HeadOutput out = h.forward({random_tensor({2, 17, 4}, r, -1, 1, false), 1}, NormMode::Train);
    CHECK(out.feature.shape() == Shape{2, 4});
  }
  CHECK_THROWS_AS(LocalPerceptionHead(4, 1, 2, rng), ConfigError);
}

TEST_CASE("global aggregation head") {
  Rng rng(4);
  SUBCASE("single pooled token") {
    GlobalAggregationHead h(2, 1, 2, rng);
    auto x = tokens_at(5, {1, -1}, {{1, 2}, {3, 4}, {5, 6}, {7, 8}});
    Tensor w;
    HeadOutput out = h.forward(x, &w);
    CHECK(w.item() == 1.0);
    auto v = affine(affine({{4, 5}}, h.attn.v.weight, h.attn.v.bias), h.attn.o.weight, h.attn.o.bias);
    CHECK(out.feature[0] == doctest::Approx(v[0][0] + 1));
    CHECK(out.feature[1] == doctest::Approx(v[0][1] - 1));
  }
  SUBCASE("identical tokens attend uniformly") {
    GlobalAggregationHead h(4, 2, 2, rng);
    std::vector<std::vector<double>> rows(16, {0.5, -0.25, 1.0, 2.0});
    auto x = tokens_at(5, {0, 0, 0, 0}, rows);
    Tensor w;
    HeadOutput out = h.forward(x, &w);
    for (double a : w.data()) CHECK(a == doctest::Approx(0.25));
    auto v = affine(affine({rows[0]}, h.attn.v.weight, h.attn.v.bias), h.attn.o.weight, h.attn.o.bias);
    for (std::size_t c = 0; c < 4; ++c) CHECK(out.feature[c] == doctest::Approx(v[0][c]));
  }
  SUBCASE("N=16, s=2, single head, hand evaluation") {
    GlobalAggregationHead h(3, 1, 2, rng);
    for (Tensor t : {h.attn.q.weight, h.attn.k.weight, h.attn.v.weight}) {
      for (auto& e : t.mutable_data()) e *= 40.0;
    }
    std::mt19937_64 r(5);
    EncoderOutput x{random_tensor({1, 17, 3}, r, -1, 1, false), 5};
    HeadOutput out = h.forward(x);
    std::vector<std::vector<double>> pooled(4, std::vector<double>(3, 0.0));
    for (std::size_t gy = 0; gy < 4; ++gy) {
      for (std::size_t gx = 0; gx < 4; ++gx) {
        for (std::size_t c = 0; c < 3; ++c) pooled[(gy / 2) * 2 + gx / 2][c] += x.tokens[(1 + gy * 4 + gx) * 3 + c] / 4;
      }
    }
    auto q = affine(pooled, h.attn.q.weight, h.attn.q.bias);
    auto k = affine(pooled, h.attn.k.weight, h.attn.k.bias);
    auto v = affine(pooled, h.attn.v.weight, h.attn.v.bias);
    std::vector<std::vector<double>> ctx(4, std::vector<double>(3, 0.0));
    for (std::size_t i = 0; i < 4; ++i) {
      std::vector<double> s(4);
      double z = 0;
      for (std::size_t j = 0; j < 4; ++j) {
        double dot = 0;
        for (std::size_t c = 0; c < 3; ++c) dot += q[i][c] * k[j][c];
        s[j] = std::exp(dot / std::sqrt(3.0));
        z += s[j];
      }
      for (std::size_t j = 0; j < 4; ++j) {
        for (std::size_t c = 0; c < 3; ++c) ctx[i][c] += s[j] / z * v[j][c];
      }
    }
    auto f = affine(ctx, h.attn.o.weight, h.attn.o.bias);
    for (std::size_t c = 0; c < 3; ++c) {
      const double p = (f[0][c] + f[1][c] + f[2][c] + f[3][c]) / 4;
      CHECK(out.feature[c] == doctest::Approx(p + x.tokens[c]).epsilon(1e-12));
    }
    CHECK(out.feature_map.shape() == Shape{1, 4, 3});
  }
}

TEST_CASE("mlp baseline head") {
  Rng rng(5);
  MlpHead h(2, rng);
  set_identity(h.fc);
  auto x = tokens_at(3, {9, 9}, {{1, 1}, {3, 3}});
  HeadOutput out = h.forward(x);
  CHECK(out.feature[0] == 2.0);
  CHECK(out.feature[1] == 2.0);
  fill(h.fc.weight, 0.0);
  HeadOutput z = h.forward(x);
  CHECK(z.feature[0] == 0.0);
  CHECK(z.feature[1] == 0.0);
}

TEST_CASE("exit branch") {
  Rng rng(6);
  ExitBranch b(2, HeadKind::Lph, LocalPerceptionHead(4, 1, 3, rng), 4, 7, rng);
  std::mt19937_64 r(1);
  EncoderOutput x{random_tensor({3, 17, 4}, r, -1, 1, false), 2};
  BranchOutput out = b.forward(x, NormMode::Train);
  CHECK(out.feature.shape() == Shape{3, 4});
  CHECK(out.logits.shape() == Shape{3, 7});
  x.layer_index = 3;
  CHECK_THROWS_AS(b.forward(x, NormMode::Train), std::invalid_argument);
  CHECK_THROWS_AS(ExitBranch(2, HeadKind::Gah, MlpHead(4, rng), 4, 7, rng), ConfigError);
}

TEST_CASE("place_exits") {
  std::vector<double> uniform(12, 1.0);
  CHECK(place_exits(uniform, 4) == std::vector<int>{3, 6, 9, 11});
  CHECK(brute_force_placement(uniform, 4) == std::vector<int>{3, 6, 9, 11});
  CHECK_THROWS_AS(place_exits(uniform, 12), ConfigError);
  CHECK_THROWS_AS(place_exits(uniform, 0), ConfigError);

  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const int L = std::uniform_int_distribution<int>(2, 10)(rng);
    const int M = std::uniform_int_distribution<int>(1, L - 1)(rng);
    std::vector<double> macs(static_cast<std::size_t>(L));
    // Integer-valued profiles produce exact ties, exercising the tie rule.
    for (auto& m : macs) m = static_cast<double>(std::uniform_int_distribution<int>(1, 4)(rng));
    CAPTURE(L);
    CAPTURE(M);
    CHECK(place_exits(macs, M) == brute_force_placement(macs, M));
  }
}

TEST_CASE("schedules") {
  KernelSchedule k12 = KernelSchedule::linear({4, 6}, 12, 5);
  CHECK(k12.at(4) == 5);
  CHECK(k12.at(6) == 3);
  CHECK(KernelSchedule::linear({2, 4}, 8, 5).at(4) == 3);
  KernelSchedule all = KernelSchedule::linear({1, 2, 3, 4, 5, 6}, 12, 7);
  CHECK(all.monotone());
  for (const auto& [m, k] : all.kernel) CHECK((k == 0 || (k >= 3 && k % 2 == 1)));
  CHECK(all.at(1) == 7);
  CHECK(all.at(6) == 3);
  CHECK_THROWS_AS(k12.at(5), ConfigError);
  CHECK_THROWS_AS(KernelSchedule::linear({4}, 12, 4), ConfigError);

  WindowSchedule w8 = WindowSchedule::linear({6, 7}, 8, 4);
  CHECK(w8.at(6) == 3);
  CHECK(w8.at(7) == 4);
  WindowSchedule w12 = WindowSchedule::linear({8, 10}, 12, 4);
  CHECK(w12.at(8) == 2);
  CHECK(w12.at(10) == 3);
  WindowSchedule wall = WindowSchedule::linear({7, 8, 9, 10, 11}, 12, 6);
  CHECK(wall.monotone());
  CHECK(wall.at(7) == 2);
  CHECK(wall.at(11) == 6);
  CHECK_THROWS_AS(WindowSchedule::linear({7}, 12, 1), ConfigError);
}

TEST_CASE("placement rules and overrides") {
  ExitPlacement d = ExitPlacement::with_default_kinds({2, 4, 6, 7}, 8);
  CHECK(d.kinds == std::vector<HeadKind>{HeadKind::Lph, HeadKind::Lph, HeadKind::Gah, HeadKind::Gah});
  CHECK_NOTHROW(d.validate(8));
  ExitPlacement bad = d;
  bad.kinds[0] = HeadKind::Gah;
  CHECK_THROWS_AS(bad.validate(8), ConfigError);
  bad.overridden[0] = true;
  CHECK_NOTHROW(bad.validate(8));
  CHECK_THROWS_AS(ExitPlacement::with_default_kinds({2, 2}, 8).validate(8), ConfigError);
  CHECK_THROWS_AS(ExitPlacement::with_default_kinds({2, 8}, 8).validate(8), ConfigError);

  ViTConfig vit;
  vit.layers = 12;
  ExitConfig ec;
  ec.positions = {4, 6, 8, 10};
  ExitLayout layout = resolve_exit_layout(vit, ec);
  CHECK(layout.placement.positions == std::vector<int>{4, 6, 8, 10});
  CHECK(layout.kernels.at(4) == 5);
  CHECK(layout.kernels.at(6) == 3);
  CHECK(layout.windows.at(8) == 2);
  CHECK(layout.windows.at(10) == 3);

  ExitConfig computed;
  ExitLayout c = resolve_exit_layout(vit, computed);
  CHECK(c.placement.positions.size() == 4);
  CHECK(c.placement.positions.back() < 12);
  for (std::size_t i = 0; i < c.placement.count(); ++i) {
    CHECK((c.placement.kinds[i] == HeadKind::Lph) == (c.placement.positions[i] <= 6));
  }
}

TEST_CASE("heads keep width D") {
  Rng rng(8);
  std::mt19937_64 r(2);
  EncoderOutput x{random_tensor({2, 17, 8}, r, -1, 1, false), 1};
  LocalPerceptionHead lph(8, 2, 5, rng);
  GlobalAggregationHead gah(8, 2, 3, rng);
  MlpHead mlp(8, rng);
  CHECK(lph.forward(x, NormMode::Train).feature.dim(1) == 8);
  CHECK(gah.forward(x).feature.dim(1) == 8);
  CHECK(mlp.forward(x).feature.dim(1) == 8);
  CHECK(gah.forward(x).feature_map.dim(1) == 4);
}
