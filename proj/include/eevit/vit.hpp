#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "eevit/nn.hpp"

namespace eevit {

struct ViTConfig {
  std::size_t image_side = 32;
  std::size_t channels = 3;
  std::size_t patch_side = 8;
  int layers = 8;  // L
  std::size_t hidden = 64;  // D
  std::size_t heads = 4;
  std::size_t mlp_ratio = 2;
  std::size_t num_classes = 10;

  // Throws ConfigError on inconsistent geometry.
  void validate() const;
  std::size_t grid() const { return image_side / patch_side; }
  // N: patch tokens, excluding CLS.
  std::size_t tokens() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_side * patch_side * channels; }
};

// Token sequence after `layer_index` encoder blocks (0 = embeddings).
// Token 0 is CLS; 1..N are patches in row-major grid order.
struct EncoderOutput {
  Tensor tokens;  // [batch, N+1, D]
  int layer_index = 0;

  Tensor cls() const;      // [batch, D]
  Tensor patches() const;  // [batch, N, D]
};

// Attention probabilities per executed layer, each [batch, heads, N+1, N+1].
struct AttentionRecord {
  std::vector<Tensor> layers;
};

class EncoderBlock {
 public:
  EncoderBlock() = default;
  EncoderBlock(const ViTConfig& cfg, Rng& rng);

  // Pre-norm: x + MHSA(LN(x)), then + MLP(LN(.)).
  Tensor forward(const Tensor& x, Tensor* attention = nullptr) const;
  void collect(StateCollector& c) const;

  LayerNorm ln1;
  MultiHeadAttention attn;
  LayerNorm ln2;
  Linear fc1;
  Linear fc2;
};

class VisionTransformer {
 public:
  VisionTransformer() = default;
  VisionTransformer(const ViTConfig& cfg, Rng& rng);

  const ViTConfig& config() const { return cfg_; }

  // images [batch, C, H, W] -> linear projection of non-overlapping patches [batch, N, D].
  Tensor patchify(const Tensor& images) const;
  // patchify + CLS + positional embeddings; layer_index 0.
  EncoderOutput embed(const Tensor& images) const;
  // Runs blocks (from.layer_index, to_layer]; `record` collects attention.
  EncoderOutput continue_to(const EncoderOutput& from, int to_layer, AttentionRecord* record = nullptr) const;
  // Embeddings then blocks 1..m.
  EncoderOutput forward_to_layer(const Tensor& images, int m, AttentionRecord* record = nullptr) const;
  // Final norm and linear head on the CLS token of the layer-L output.
  Tensor final_classifier(const EncoderOutput& out) const;
  Tensor forward(const Tensor& images) const;

  void collect(StateCollector& c) const;

  Linear patch_embed;
  Tensor cls_token;  // [1, 1, D]
  Tensor pos_embed;  // [1, N+1, D]
  std::vector<EncoderBlock> blocks;
  LayerNorm final_norm;
  Linear head;

 private:
  ViTConfig cfg_;
};

}  // namespace eevit
