#include "eevit/vit.hpp"

#include <string>

#include "eevit/errors.hpp"

namespace eevit {

void ViTConfig::validate() const {
  if (image_side == 0 || channels == 0 || patch_side == 0 || hidden == 0 || heads == 0 || mlp_ratio == 0 ||
      num_classes == 0) {
    throw ConfigError("model extents must be positive");
  }
  if (layers < 1) throw ConfigError("model.layers must be >= 1");
  if (image_side % patch_side != 0) {
    throw ConfigError("image side " + std::to_string(image_side) + " not divisible by patch side " +
                      std::to_string(patch_side));
  }
  if (hidden % heads != 0) {
    throw ConfigError("hidden " + std::to_string(hidden) + " not divisible by heads " + std::to_string(heads));
  }
}

Tensor EncoderOutput::cls() const {
  const std::size_t batch = tokens.dim(0), d = tokens.dim(2);
  return reshape(slice(tokens, 1, 0, 1), {batch, d});
}

Tensor EncoderOutput::patches() const { return slice(tokens, 1, 1, tokens.dim(1)); }

EncoderBlock::EncoderBlock(const ViTConfig& cfg, Rng& rng)
    : ln1(cfg.hidden),
      attn(cfg.hidden, cfg.heads, rng),
      ln2(cfg.hidden),
      fc1(cfg.hidden, cfg.hidden * cfg.mlp_ratio, rng),
      fc2(cfg.hidden * cfg.mlp_ratio, cfg.hidden, rng) {}

Tensor EncoderBlock::forward(const Tensor& x, Tensor* attention) const {
  Tensor h = add(x, attn.forward(ln1.forward(x), attention));
  return add(h, fc2.forward(gelu(fc1.forward(ln2.forward(h)))));
}

void EncoderBlock::collect(StateCollector& c) const {
  c.push("ln1");
  ln1.collect(c);
  c.pop();
  c.push("attn");
  attn.collect(c);
  c.pop();
  c.push("ln2");
  ln2.collect(c);
  c.pop();
  c.push("fc1");
  fc1.collect(c);
  c.pop();
  c.push("fc2");
  fc2.collect(c);
  c.pop();
}

VisionTransformer::VisionTransformer(const ViTConfig& cfg, Rng& rng) : cfg_(cfg) {
  cfg.validate();
  patch_embed = Linear(cfg.patch_dim(), cfg.hidden, rng);
  cls_token = Tensor::zeros({1, 1, cfg.hidden}, true);
  pos_embed = trunc_normal({1, cfg.tokens() + 1, cfg.hidden}, 0.02, rng);
  blocks.reserve(static_cast<std::size_t>(cfg.layers));
  for (int i = 0; i < cfg.layers; ++i) blocks.emplace_back(cfg, rng);
  final_norm = LayerNorm(cfg.hidden);
  head = Linear(cfg.hidden, cfg.num_classes, rng);
}

Tensor VisionTransformer::patchify(const Tensor& images) const {
  const std::size_t c = cfg_.channels, side = cfg_.image_side, p = cfg_.patch_side, g = cfg_.grid();
  if (images.rank() != 4 || images.dim(1) != c || images.dim(2) != side || images.dim(3) != side) {
    throw ShapeError("expected images [batch, " + std::to_string(c) + ", " + std::to_string(side) + ", " +
                     std::to_string(side) + "], got " + shape_str(images.shape()));
  }
  const std::size_t batch = images.dim(0);
  std::vector<std::size_t> index;
  index.reserve(images.numel());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t gy = 0; gy < g; ++gy) {
      for (std::size_t gx = 0; gx < g; ++gx) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          for (std::size_t py = 0; py < p; ++py) {
            const std::size_t row = ((b * c + ch) * side + gy * p + py) * side + gx * p;
            for (std::size_t px = 0; px < p; ++px) index.push_back(row + px);
          }
        }
      }
    }
  }
  Tensor rows = gather(images, std::move(index), {batch, cfg_.tokens(), cfg_.patch_dim()});
  return patch_embed.forward(rows);
}

EncoderOutput VisionTransformer::embed(const Tensor& images) const {
  Tensor patches = patchify(images);
  const std::size_t batch = patches.dim(0);
  Tensor cls = add(Tensor::zeros({batch, 1, cfg_.hidden}), cls_token);
  return {add(concat({cls, patches}, 1), pos_embed), 0};
}

EncoderOutput VisionTransformer::continue_to(const EncoderOutput& from, int to_layer, AttentionRecord* record) const {
  if (to_layer < from.layer_index || to_layer > cfg_.layers) {
    throw std::out_of_range("cannot run from layer " + std::to_string(from.layer_index) + " to layer " +
                            std::to_string(to_layer) + " of " + std::to_string(cfg_.layers));
  }
  Tensor x = from.tokens;
  for (int i = from.layer_index; i < to_layer; ++i) {
    Tensor attention;
    x = blocks[static_cast<std::size_t>(i)].forward(x, record ? &attention : nullptr);
    if (record) record->layers.push_back(attention);
  }
  return {x, to_layer};
}

EncoderOutput VisionTransformer::forward_to_layer(const Tensor& images, int m, AttentionRecord* record) const {
  if (m < 1 || m > cfg_.layers) {
    throw std::out_of_range("layer " + std::to_string(m) + " outside 1.." + std::to_string(cfg_.layers));
  }
  return continue_to(embed(images), m, record);
}

Tensor VisionTransformer::final_classifier(const EncoderOutput& out) const {
  if (out.layer_index != cfg_.layers) {
    throw std::invalid_argument("final classifier needs the layer-" + std::to_string(cfg_.layers) + " output, got layer " +
                                std::to_string(out.layer_index));
  }
  return head.forward(final_norm.forward(out.cls()));
}

Tensor VisionTransformer::forward(const Tensor& images) const {
  return final_classifier(forward_to_layer(images, cfg_.layers));
}

void VisionTransformer::collect(StateCollector& c) const {
  c.push("patch_embed");
  patch_embed.collect(c);
  c.pop();
  c.param("cls_token", cls_token);
  c.param("pos_embed", pos_embed);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    c.push("blocks." + std::to_string(i));
    blocks[i].collect(c);
    c.pop();
  }
  c.push("final_norm");
  final_norm.collect(c);
  c.pop();
  c.push("head");
  head.collect(c);
  c.pop();
}

}  // namespace eevit
