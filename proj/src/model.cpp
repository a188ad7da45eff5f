#include "eevit/model.hpp"

#include <algorithm>
#include <set>

#include "eevit/errors.hpp"

namespace eevit {

ExitLayout resolve_exit_layout(const ViTConfig& vit, const ExitConfig& exits) {
  vit.validate();
  const int L = vit.layers;
  std::vector<int> positions = exits.positions;
  if (positions.empty()) positions = place_exits(backbone_macs(vit).block_macs(), exits.count);

  ExitLayout out;
  out.expansion = exits.expansion;
  out.gah_heads = exits.gah_heads == 0 ? vit.heads : exits.gah_heads;
  if (exits.mlp_baseline) {
    out.placement.positions = positions;
    out.placement.kinds.assign(positions.size(), HeadKind::Mlp);
    out.placement.overridden.assign(positions.size(), true);
  } else if (exits.kinds.empty()) {
    out.placement = ExitPlacement::with_default_kinds(positions, L);
  } else {
    if (exits.kinds.size() != positions.size()) throw ConfigError("exits.kinds needs one entry per exit position");
    out.placement.positions = positions;
    out.placement.kinds = exits.kinds;
    out.placement.overridden.assign(positions.size(), true);
  }
  out.placement.validate(L);
  if (vit.hidden % out.gah_heads != 0) throw ConfigError("hidden dimension not divisible by exits.gah_heads");

  std::vector<int> lph, gah;
  for (std::size_t i = 0; i < positions.size(); ++i) {
    if (out.placement.kinds[i] == HeadKind::Lph) lph.push_back(positions[i]);
    if (out.placement.kinds[i] == HeadKind::Gah) gah.push_back(positions[i]);
  }
  out.kernels = KernelSchedule::linear(lph, L, exits.k_max);
  out.windows = WindowSchedule::linear(gah, L, exits.g_max);
  if (!exits.kernels.empty()) {
    if (exits.kernels.size() != lph.size()) throw ConfigError("exits.kernels needs one entry per LPH exit");
    for (std::size_t i = 0; i < lph.size(); ++i) {
      const int k = exits.kernels[i];
      if (k < 0 || (k > 0 && (k < 3 || k % 2 == 0))) throw ConfigError("kernel sizes must be 0 or odd >= 3");
      out.kernels.kernel[lph[i]] = k;
    }
  }
  if (!exits.windows.empty()) {
    if (exits.windows.size() != gah.size()) throw ConfigError("exits.windows needs one entry per GAH exit");
    for (std::size_t i = 0; i < gah.size(); ++i) {
      if (exits.windows[i] < 2) throw ConfigError("window sizes must be >= 2");
      out.windows.window[gah[i]] = exits.windows[i];
    }
  }
  return out;
}

std::vector<std::size_t> hete_ordinals(std::size_t exit_count) {
  const std::size_t m = exit_count;
  std::set<std::size_t> s;
  for (std::size_t o : {std::size_t{1}, m / 2, m / 2 + 1, m}) {
    if (o >= 1 && o <= m) s.insert(o - 1);
  }
  return {s.begin(), s.end()};
}

EarlyExitViT::EarlyExitViT(const ViTConfig& vit, const ExitLayout& layout, std::uint64_t seed) : layout_(layout) {
  Rng rng(seed);
  backbone = VisionTransformer(vit, rng);
  layout_.placement.validate(vit.layers);
  const std::size_t d = vit.hidden;
  for (std::size_t i = 0; i < layout_.placement.count(); ++i) {
    const int pos = layout_.placement.positions[i];
    const HeadKind kind = layout_.placement.kinds[i];
    std::variant<LocalPerceptionHead, GlobalAggregationHead, MlpHead> head;
    switch (kind) {
      case HeadKind::Lph: head = LocalPerceptionHead(d, layout_.expansion, layout_.kernels.at(pos), rng); break;
      case HeadKind::Gah: head = GlobalAggregationHead(d, layout_.gah_heads, layout_.windows.at(pos), rng); break;
      case HeadKind::Mlp: head = MlpHead(d, rng); break;
    }
    branches.emplace_back(pos, kind, std::move(head), d, vit.num_classes, rng);
  }
  distilled = hete_ordinals(branches.size());
  for (std::size_t ord : distilled) aligns.emplace_back(d, vit.tokens(), exit_tokens(ord));
}

std::size_t EarlyExitViT::exit_tokens(std::size_t i) const {
  const std::size_t n = config().tokens();
  if (layout_.placement.kinds.at(i) == HeadKind::Gah) {
    return pooled_tokens(n, static_cast<std::uint64_t>(layout_.windows.at(layout_.placement.positions[i])));
  }
  return n;
}

std::vector<Parameter> EarlyExitViT::state() const {
  StateCollector c;
  c.push("backbone");
  backbone.collect(c);
  c.pop();
  for (std::size_t i = 0; i < branches.size(); ++i) {
    c.push("exits." + std::to_string(i));
    branches[i].collect(c);
    c.pop();
  }
  for (std::size_t i = 0; i < aligns.size(); ++i) {
    c.push("align." + std::to_string(distilled[i]));
    aligns[i].collect(c);
    c.pop();
  }
  return c.all();
}

std::vector<Parameter> EarlyExitViT::backbone_parameters() const {
  StateCollector c;
  c.push("backbone");
  backbone.collect(c);
  c.pop();
  return c.params();
}

std::vector<Parameter> EarlyExitViT::exit_parameters() const {
  StateCollector c;
  for (std::size_t i = 0; i < branches.size(); ++i) {
    c.push("exits." + std::to_string(i));
    branches[i].collect(c);
    c.pop();
  }
  for (std::size_t i = 0; i < aligns.size(); ++i) {
    c.push("align." + std::to_string(distilled[i]));
    aligns[i].collect(c);
    c.pop();
  }
  return c.params();
}

MacProfile EarlyExitViT::mac_profile() const {
  return model_macs(config(), layout_.placement, layout_.kernels, layout_.windows, layout_.expansion);
}

}  // namespace eevit
