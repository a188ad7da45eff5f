#pragma once

#include <cstdint>
#include <vector>

#include "eevit/cost_model.hpp"
#include "eevit/distill.hpp"
#include "eevit/exit_heads.hpp"
#include "eevit/vit.hpp"

namespace eevit {

// User-facing exit settings; resolved against a backbone into an ExitLayout.
struct ExitConfig {
  std::vector<int> positions;  // empty: computed by place_exits with `count`
  int count = 4;
  std::vector<HeadKind> kinds;  // empty: position rule; otherwise one per exit, treated as overrides
  bool mlp_baseline = false;    // every exit uses the MLP head
  int k_max = 5;
  int g_max = 4;
  std::vector<int> kernels;  // optional explicit kernel per LPH exit, in order
  std::vector<int> windows;  // optional explicit window per GAH exit, in order
  std::size_t expansion = 1;
  std::size_t gah_heads = 0;  // 0: backbone head count
};

struct ExitLayout {
  ExitPlacement placement;
  KernelSchedule kernels;
  WindowSchedule windows;
  std::size_t expansion = 1;
  std::size_t gah_heads = 1;
};

ExitLayout resolve_exit_layout(const ViTConfig& vit, const ExitConfig& exits);

// Exit ordinals (0-based) that receive heterogeneous distillation: the
// first and last exit of each half, {1, M/2, M/2+1, M} in 1-based terms.
std::vector<std::size_t> hete_ordinals(std::size_t exit_count);

// Backbone, exit branches and the align modules used in stage 2.
class EarlyExitViT {
 public:
  EarlyExitViT(const ViTConfig& vit, const ExitLayout& layout, std::uint64_t seed);

  const ViTConfig& config() const { return backbone.config(); }
  const ExitLayout& layout() const { return layout_; }
  int layers() const { return config().layers; }

  // Token count of exit i's feature map.
  std::size_t exit_tokens(std::size_t i) const;

  // Every parameter and buffer, backbone first; this is the checkpoint content.
  std::vector<Parameter> state() const;
  std::vector<Parameter> backbone_parameters() const;
  // Exit heads, internal classifiers and align modules.
  std::vector<Parameter> exit_parameters() const;

  MacProfile mac_profile() const;

  VisionTransformer backbone;
  std::vector<ExitBranch> branches;
  std::vector<std::size_t> distilled;  // hete_ordinals(branches.size())
  std::vector<AlignModule> aligns;     // parallel to `distilled`

 private:
  ExitLayout layout_;
};

}  // namespace eevit
