#include "eevit/nn.hpp"

#include <cmath>

#include "eevit/errors.hpp"

namespace eevit {

std::vector<Parameter> StateCollector::all() const {
  std::vector<Parameter> out = params_;
  out.insert(out.end(), buffers_.begin(), buffers_.end());
  return out;
}

Tensor trunc_normal(const Shape& shape, double std, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    double z = dist(rng);
    while (std::abs(z) > 2.0) z = dist(rng);
    x = z * std;
  }
  return Tensor(shape, std::move(v), true);
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, double init_std)
    : weight(trunc_normal({in, out}, init_std, rng)), bias(Tensor::zeros({out}, true)) {}

Tensor Linear::forward(const Tensor& x) const { return add(matmul(x, weight), bias); }

void Linear::collect(StateCollector& c) const {
  c.param("weight", weight);
  c.param("bias", bias);
}

LayerNorm::LayerNorm(std::size_t dim) : gain(Tensor::ones({dim}, true)), bias(Tensor::zeros({dim}, true)) {}

Tensor LayerNorm::forward(const Tensor& x) const {
  if (identity) return x;
  return layer_norm(x, gain, bias);
}

void LayerNorm::collect(StateCollector& c) const {
  c.param("gain", gain);
  c.param("bias", bias);
}

BatchNorm::BatchNorm(std::size_t channels)
    : gain(Tensor::ones({channels}, true)), bias(Tensor::zeros({channels}, true)) {
  state.running_mean = Tensor::zeros({channels});
  state.running_var = Tensor::ones({channels});
}

Tensor BatchNorm::forward(const Tensor& x, NormMode mode) {
  return batch_norm(x, gain, bias, state, identity ? NormMode::Identity : mode);
}

void BatchNorm::collect(StateCollector& c) const {
  c.param("gain", gain);
  c.param("bias", bias);
  c.buffer("running_mean", state.running_mean);
  c.buffer("running_var", state.running_var);
}

MultiHeadAttention::MultiHeadAttention(std::size_t dim, std::size_t heads, Rng& rng)
    : q(dim, dim, rng), k(dim, dim, rng), v(dim, dim, rng), o(dim, dim, rng), dim_(dim), heads_(heads) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("hidden dimension " + std::to_string(dim) + " not divisible by " + std::to_string(heads) + " heads");
  }
}

Tensor MultiHeadAttention::forward(const Tensor& x, Tensor* weights) const {
  if (x.rank() != 3 || x.dim(2) != dim_) {
    throw ShapeError("attention input must be [batch, tokens, " + std::to_string(dim_) + "], got " + shape_str(x.shape()));
  }
  const std::size_t batch = x.dim(0), tokens = x.dim(1), dh = dim_ / heads_;
  auto split = [&](const Tensor& t) { return permute(reshape(t, {batch, tokens, heads_, dh}), {0, 2, 1, 3}); };
  Tensor qh = split(q.forward(x));
  Tensor kh = split(k.forward(x));
  Tensor vh = split(v.forward(x));
  Tensor scores = scale(matmul(qh, transpose_last(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor attn = softmax(scores, -1);
  if (weights) *weights = attn;
  Tensor ctx = reshape(permute(matmul(attn, vh), {0, 2, 1, 3}), {batch, tokens, dim_});
  return o.forward(ctx);
}

void MultiHeadAttention::collect(StateCollector& c) const {
  for (auto [name, lin] : {std::pair{"q", &q}, std::pair{"k", &k}, std::pair{"v", &v}, std::pair{"o", &o}}) {
    c.push(name);
    lin->collect(c);
    c.pop();
  }
}

}  // namespace eevit
