#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "eevit/ops.hpp"
#include "eevit/tensor.hpp"

namespace eevit {

// A trainable (or buffered) tensor under a unique dotted path, e.g.
// "blocks.3.attn.q.weight". The gradient lives on the tensor itself.
struct Parameter {
  std::string name;
  Tensor value;
};

// Collects a model's tensors: trainable parameters and non-trainable buffers
// (batch-norm running statistics). Both are persisted in checkpoints.
class StateCollector {
 public:
  void param(const std::string& name, const Tensor& t) { params_.push_back({prefix_ + name, t}); }
  void buffer(const std::string& name, const Tensor& t) { buffers_.push_back({prefix_ + name, t}); }

  // Scoped name prefix; nest with push/pop.
  void push(const std::string& scope) {
    stack_.push_back(prefix_);
    prefix_ += scope + ".";
  }
  void pop() {
    prefix_ = stack_.back();
    stack_.pop_back();
  }

  const std::vector<Parameter>& params() const { return params_; }
  const std::vector<Parameter>& buffers() const { return buffers_; }
  std::vector<Parameter> all() const;

 private:
  std::string prefix_;
  std::vector<std::string> stack_;
  std::vector<Parameter> params_;
  std::vector<Parameter> buffers_;
};

using Rng = std::mt19937_64;

// Normal(0, std) truncated to two standard deviations.
Tensor trunc_normal(const Shape& shape, double std, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, double init_std = 0.02);

  // x: [..., in] -> [..., out]
  Tensor forward(const Tensor& x) const;
  void collect(StateCollector& c) const;

  Tensor weight;  // [in, out]
  Tensor bias;    // [out]
};

class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);

  Tensor forward(const Tensor& x) const;
  void collect(StateCollector& c) const;

  Tensor gain;
  Tensor bias;
  bool identity = false;  // test toggle: skip normalization entirely
};

class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels);

  // Channels-last; `mode` is overridden to Identity when the toggle is set.
  Tensor forward(const Tensor& x, NormMode mode);
  void collect(StateCollector& c) const;

  Tensor gain;
  Tensor bias;
  BatchNormState state;
  bool identity = false;
};

// softmax(Q K^T / sqrt(d_head)) V per head, heads concatenated, then the
// output projection.
class MultiHeadAttention {
 public:
  MultiHeadAttention() = default;
  MultiHeadAttention(std::size_t dim, std::size_t heads, Rng& rng);

  // x: [batch, T, dim]. When `weights` is non-null it receives the attention
  // probabilities [batch, heads, T, T].
  Tensor forward(const Tensor& x, Tensor* weights = nullptr) const;
  void collect(StateCollector& c) const;

  std::size_t dim() const { return dim_; }
  std::size_t heads() const { return heads_; }

  Linear q, k, v, o;

 private:
  std::size_t dim_ = 0;
  std::size_t heads_ = 1;
};

}  // namespace eevit
