#pragma once

#include <map>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "eevit/nn.hpp"
#include "eevit/vit.hpp"

namespace eevit {

enum class HeadKind { Lph, Gah, Mlp };

std::string to_string(HeadKind kind);
HeadKind parse_head_kind(const std::string& s);

// LPH at positions <= L/2, GAH above.
HeadKind default_head_kind(int position, int layers);

struct ExitPlacement {
  std::vector<int> positions;  // strictly increasing, each in [1, L)
  std::vector<HeadKind> kinds;
  std::vector<bool> overridden;  // kind chosen explicitly rather than by position

  std::size_t count() const { return positions.size(); }
  // Throws ConfigError when positions are not strictly increasing inside
  // [1, L) or a non-overridden kind disagrees with the position rule.
  void validate(int layers) const;

  static ExitPlacement with_default_kinds(std::vector<int> positions, int layers);
};

// Chooses `count` exit layers so that cumulative backbone MACs at the j-th
// exit sit as close as possible (least squares) to j/count of the total, with
// every exit strictly below the last layer. Among equally good placements the
// lexicographically shallowest wins.
std::vector<int> place_exits(std::span<const double> block_macs, int count);

// Kernel size per LPH position; 0 means the depthwise stage is bypassed.
struct KernelSchedule {
  std::map<int, int> kernel;
  int k_max = 5;

  int at(int position) const;
  bool monotone() const;  // non-increasing in position

  // Linear from k_max at the shallowest LPH position down to 1 at layer
  // L/2 + 1, rounded to the nearest odd size; sizes below 3 become 0.
  static KernelSchedule linear(const std::vector<int>& lph_positions, int layers, int k_max);
};

// Pooling window per GAH position.
struct WindowSchedule {
  std::map<int, int> window;
  int g_max = 4;

  int at(int position) const;
  bool monotone() const;  // non-decreasing in position

  // Linear from 2 at layer L/2 + 1 up to g_max at layer L - 1, floored, never below 2.
  static WindowSchedule linear(const std::vector<int>& gah_positions, int layers, int g_max);
};

// Position-wise depthwise convolution over the token grid: k x k, stride 1,
// same padding. kernel == 0 returns x unchanged.
Tensor pdconv(const Tensor& x, const Tensor& weight, const Tensor& bias, int kernel);

// Parameter-free feature convergence: s x s average pooling with stride s
// over the token grid (edge windows average what they cover).
Tensor pfc(const Tensor& x, int window);

struct HeadOutput {
  Tensor feature_map;  // token features before pooling: [batch, tokens, D]
  Tensor feature;      // pooled + CLS: [batch, D]
};

class LocalPerceptionHead {
 public:
  LocalPerceptionHead() = default;
  LocalPerceptionHead(std::size_t dim, std::size_t expansion, int kernel, Rng& rng);

  // 1x1 expand -> PDConv -> 1x1 project (each followed by GELU and BN),
  // global average over patch tokens, plus the CLS token.
  HeadOutput forward(const EncoderOutput& x, NormMode mode);
  void collect(StateCollector& c) const;

  // Test toggle: every GELU+BN pair becomes the identity.
  void set_bypass(bool on);

  Linear expand;
  BatchNorm bn_expand;
  Tensor dw_weight;  // [k, k, e*D]; absent when kernel == 0
  Tensor dw_bias;
  BatchNorm bn_dw;
  Linear project;
  BatchNorm bn_project;
  int kernel = 0;

 private:
  Tensor act_norm(const Tensor& x, BatchNorm& bn, NormMode mode) const;
  bool bypass_ = false;
};

class GlobalAggregationHead {
 public:
  GlobalAggregationHead() = default;
  GlobalAggregationHead(std::size_t dim, std::size_t heads, int window, Rng& rng);

  // PFC -> MHSA -> global average, plus the CLS token.
  HeadOutput forward(const EncoderOutput& x, Tensor* attention = nullptr) const;
  void collect(StateCollector& c) const;

  MultiHeadAttention attn;
  int window = 2;
};

// Baseline exit: average over patch tokens, then one linear layer D -> D.
class MlpHead {
 public:
  MlpHead() = default;
  MlpHead(std::size_t dim, Rng& rng);

  HeadOutput forward(const EncoderOutput& x) const;
  void collect(StateCollector& c) const;

  Linear fc;
};

struct BranchOutput {
  Tensor feature_map;
  Tensor feature;
  Tensor logits;  // [batch, classes]
};

// One exit: a head bound to a backbone layer plus its internal classifier.
class ExitBranch {
 public:
  ExitBranch() = default;
  ExitBranch(int position, HeadKind kind, std::variant<LocalPerceptionHead, GlobalAggregationHead, MlpHead> head,
             std::size_t dim, std::size_t num_classes, Rng& rng);

  // `x` must be the output of layer `position`.
  BranchOutput forward(const EncoderOutput& x, NormMode mode);
  void collect(StateCollector& c) const;

  int position() const { return position_; }
  HeadKind kind() const { return kind_; }

  std::variant<LocalPerceptionHead, GlobalAggregationHead, MlpHead> head;
  Linear classifier;

 private:
  int position_ = 0;
  HeadKind kind_ = HeadKind::Mlp;
};

}  // namespace eevit
