#pragma once

#include <functional>
#include <random>
#include <string>
#include <vector>

#include "eevit/distill.hpp"
#include "eevit/nn.hpp"
#include "eevit/ops.hpp"
#include "gradcheck.hpp"

namespace eevit::testing {

// A differentiable operation wrapped as scalar loss + its leaf inputs.
struct OpCase {
  std::string name;
  std::function<std::pair<std::function<Tensor()>, std::vector<Tensor>>(std::mt19937_64&)> build;
};

inline std::vector<OpCase> differentiable_ops() {
  using R = std::mt19937_64;
  using Built = std::pair<std::function<Tensor()>, std::vector<Tensor>>;
  std::vector<OpCase> ops;
  auto unary = [&ops](std::string name, Shape shape, std::function<Tensor(const Tensor&)> f, double lo = -1.0,
                      double hi = 1.0) {
    ops.push_back({name, [=](R& rng) -> Built {
                     Tensor x = random_tensor(shape, rng, lo, hi);
                     Tensor w = random_tensor(f(x).shape(), rng, -1, 1, false);
                     return {[=] { return sum(mul(f(x), w)); }, {x}};
                   }});
  };
  auto binary = [&ops](std::string name, Shape sa, Shape sb, std::function<Tensor(const Tensor&, const Tensor&)> f) {
    ops.push_back({name, [=](R& rng) -> Built {
                     Tensor a = random_tensor(sa, rng), b = random_tensor(sb, rng);
                     Tensor w = random_tensor(f(a, b).shape(), rng, -1, 1, false);
                     return {[=] { return sum(mul(f(a, b), w)); }, {a, b}};
                   }});
  };

  binary("add", {2, 3}, {2, 3}, [](auto& a, auto& b) { return add(a, b); });
  binary("add_broadcast", {2, 3, 4}, {4}, [](auto& a, auto& b) { return add(a, b); });
  binary("sub_broadcast", {2, 1, 3}, {4, 1}, [](auto& a, auto& b) { return sub(a, b); });
  binary("mul_broadcast", {3, 4}, {1, 4}, [](auto& a, auto& b) { return mul(a, b); });
  unary("scale", {5}, [](auto& x) { return scale(x, -1.7); });
  unary("add_scalar", {5}, [](auto& x) { return add_scalar(x, 0.3); });
  unary("square", {2, 3}, [](auto& x) { return square(x); });
  unary("log", {2, 3}, [](auto& x) { return log(x); }, 0.5, 2.0);
  binary("matmul", {3, 4}, {4, 2}, [](auto& a, auto& b) { return matmul(a, b); });
  binary("matmul_batched", {2, 3, 4}, {2, 4, 5}, [](auto& a, auto& b) { return matmul(a, b); });
  binary("matmul_shared_rhs", {2, 3, 4}, {4, 2}, [](auto& a, auto& b) { return matmul(a, b); });
  unary("reshape", {2, 6}, [](auto& x) { return reshape(x, {3, 4}); });
  unary("permute", {2, 3, 4}, [](auto& x) { return permute(x, {2, 0, 1}); });
  unary("transpose_last", {2, 3, 4}, [](auto& x) { return transpose_last(x); });
  unary("slice", {3, 5}, [](auto& x) { return slice(x, 1, 1, 4); });
  binary("concat", {2, 3}, {2, 2}, [](auto& a, auto& b) { return concat({a, b}, 1); });
  unary("gather", {6}, [](auto& x) { return gather(x, {5, 0, 0, 3}, {2, 2}); });
  unary("sum", {2, 3}, [](auto& x) { return sum(x); });
  unary("mean", {2, 3}, [](auto& x) { return mean(x); });
  unary("sum_axis", {2, 3, 4}, [](auto& x) { return sum_axis(x, 1); });
  unary("avg_pool_global", {2, 5, 3}, [](auto& x) { return avg_pool_global(x, 1); });
  unary("softmax", {3, 5}, [](auto& x) { return softmax(x, -1); }, -3, 3);
  unary("softmax_axis0", {4, 3}, [](auto& x) { return softmax(x, 0); }, -3, 3);
  unary("log_softmax", {3, 5}, [](auto& x) { return log_softmax(x, -1); }, -3, 3);
  unary("gelu", {4, 4}, [](auto& x) { return gelu(x); }, -3, 3);
  ops.push_back({"layer_norm", [](R& rng) -> Built {
                   Tensor x = random_tensor({3, 6}, rng, -2, 2), g = random_tensor({6}, rng), b = random_tensor({6}, rng);
                   Tensor w = random_tensor({3, 6}, rng, -1, 1, false);
                   return {[=] { return sum(mul(layer_norm(x, g, b), w)); }, {x, g, b}};
                 }});
  ops.push_back({"batch_norm_train", [](R& rng) -> Built {
                   Tensor x = random_tensor({3, 4, 5}, rng, -2, 2), g = random_tensor({5}, rng),
                          b = random_tensor({5}, rng);
                   Tensor w = random_tensor({3, 4, 5}, rng, -1, 1, false);
                   auto state = std::make_shared<BatchNormState>();
                   state->running_mean = Tensor::zeros({5});
                   state->running_var = Tensor::ones({5});
                   return {[=] { return sum(mul(batch_norm(x, g, b, *state, NormMode::Train), w)); }, {x, g, b}};
                 }});
  ops.push_back({"batch_norm_eval", [](R& rng) -> Built {
                   Tensor x = random_tensor({2, 4, 3}, rng, -2, 2), g = random_tensor({3}, rng),
                          b = random_tensor({3}, rng);
                   Tensor w = random_tensor({2, 4, 3}, rng, -1, 1, false);
                   auto state = std::make_shared<BatchNormState>();
                   state->running_mean = random_tensor({3}, rng, -1, 1, false);
                   state->running_var = random_tensor({3}, rng, 0.5, 2, false);
                   return {[=] { return sum(mul(batch_norm(x, g, b, *state, NormMode::Eval), w)); }, {x, g, b}};
                 }});
  unary("avg_pool_window", {2, 16, 3}, [](auto& x) { return avg_pool_window(x, 2); });
  unary("avg_pool_window_edge", {1, 25, 2}, [](auto& x) { return avg_pool_window(x, 2); });
  ops.push_back({"depthwise_conv2d", [](R& rng) -> Built {
                   Tensor x = random_tensor({2, 16, 3}, rng), k = random_tensor({3, 3, 3}, rng),
                          b = random_tensor({3}, rng);
                   Tensor w = random_tensor({2, 16, 3}, rng, -1, 1, false);
                   return {[=] { return sum(mul(depthwise_conv2d(x, k, b, 1, 1), w)); }, {x, k, b}};
                 }});
  ops.push_back({"depthwise_conv2d_strided", [](R& rng) -> Built {
                   Tensor x = random_tensor({2, 16, 2}, rng), k = random_tensor({2, 2, 2}, rng),
                          b = random_tensor({2}, rng);
                   Tensor w = random_tensor({2, 4, 2}, rng, -1, 1, false);
                   return {[=] { return sum(mul(depthwise_conv2d(x, k, b, 2, 0), w)); }, {x, k, b}};
                 }});
  ops.push_back({"cross_entropy", [](R& rng) -> Built {
                   Tensor x = random_tensor({4, 5}, rng, -3, 3);
                   std::vector<int> y{0, 4, 2, 2};
                   return {[=] { return cross_entropy(x, y); }, {x}};
                 }});
  ops.push_back({"kl_divergence", [](R& rng) -> Built {
                   Tensor t = random_tensor({3, 4}, rng, -2, 2), s = random_tensor({3, 4}, rng, -2, 2);
                   return {[=] { return kl_divergence(softmax(t, -1), log_softmax(s, -1)); }, {t, s}};
                 }});
  ops.push_back({"loss_kl", [](R& rng) -> Built {
                   Tensor t = random_tensor({2, 5}, rng, -2, 2), s = random_tensor({2, 5}, rng, -2, 2);
                   return {[=] { return loss_kl(softmax(t, -1), softmax(s, -1)); }, {t, s}};
                 }});
  ops.push_back({"mse", [](R& rng) -> Built {
                   Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
                   return {[=] { return mse(a, b); }, {a, b}};
                 }});
  ops.push_back({"gram", [](R& rng) -> Built {
                   Tensor f = random_tensor({2, 5, 3}, rng);
                   Tensor w = random_tensor({2, 3, 3}, rng, -1, 1, false);
                   return {[=] { return sum(mul(gram(f), w)); }, {f}};
                 }});
  ops.push_back({"channel_kl", [](R& rng) -> Built {
                   Tensor t = random_tensor({2, 3, 4}, rng, -2, 2), s = random_tensor({2, 3, 4}, rng, -2, 2);
                   return {[=] { return channel_kl(t, s); }, {t, s}};
                 }});
  ops.push_back({"linear", [](R& rng) -> Built {
                   auto layer = std::make_shared<Linear>(4, 3, rng, 0.5);
                   Tensor x = random_tensor({2, 5, 4}, rng);
                   Tensor w = random_tensor({2, 5, 3}, rng, -1, 1, false);
                   return {[=] { return sum(mul(layer->forward(x), w)); }, {x, layer->weight, layer->bias}};
                 }});
  ops.push_back({"multi_head_attention", [](R& rng) -> Built {
                   auto attn = std::make_shared<MultiHeadAttention>(4, 2, rng);
                   for (Tensor t : {attn->q.weight, attn->k.weight, attn->v.weight, attn->o.weight}) {
                     for (auto& v : t.mutable_data()) v *= 25.0;  // 0.02 init is too flat to exercise softmax
                   }
                   Tensor x = random_tensor({2, 3, 4}, rng);
                   Tensor w = random_tensor({2, 3, 4}, rng, -1, 1, false);
                   return {[=] { return sum(mul(attn->forward(x), w)); },
                           {x, attn->q.weight, attn->k.weight, attn->v.weight, attn->o.weight, attn->q.bias}};
                 }});
  return ops;
}

}  // namespace eevit::testing
