#include "eevit/cost_model.hpp"

#include <algorithm>
#include <numeric>

#include "eevit/errors.hpp"

namespace eevit {

Macs mac_conv(std::uint64_t n, std::uint64_t d, std::uint64_t k) { return n * d * d * k * k; }

Macs mac_mhsa(std::uint64_t n, std::uint64_t d) { return 4 * n * d * d + 2 * n * n * d; }

Macs mac_lph(std::uint64_t n, std::uint64_t d, std::uint64_t k) { return mac_lph(n, d, k, 1); }

Macs mac_lph(std::uint64_t n, std::uint64_t d, std::uint64_t k, std::uint64_t expansion) {
  return 2 * expansion * n * d * d + expansion * n * d * k * k;
}

std::uint64_t pooled_tokens(std::uint64_t n, std::uint64_t s) {
  if (s < 1) throw ValueError("pooling window must be >= 1");
  const std::uint64_t side = grid_side(n);
  const std::uint64_t out = (side + s - 1) / s;
  return out * out;
}

Macs mac_gah(std::uint64_t n, std::uint64_t d, std::uint64_t s) {
  if (s < 2) throw ValueError("GAH window must be >= 2");
  return mac_mhsa(pooled_tokens(n, s), d);
}

CostRatios ratio_checks(std::uint64_t n, std::uint64_t d, std::uint64_t k, std::uint64_t s) {
  if (d < 3 || k < 2 || s < 2) {
    throw ValueError("ratio checks require D >= 3, k >= 2, s >= 2 (got D=" + std::to_string(d) +
                     ", k=" + std::to_string(k) + ", s=" + std::to_string(s) + ")");
  }
  const double D = static_cast<double>(d), K = static_cast<double>(k), S = static_cast<double>(s),
               N = static_cast<double>(n);
  return {(2 * D + K * K) / (D * K * K), (2 * D + N / (S * S)) / (2 * D + N)};
}

Macs MacProfile::backbone_total() const {
  return patch_embedding + std::accumulate(blocks.begin(), blocks.end(), Macs{0}) + final_classifier;
}

Macs MacProfile::heads_total() const {
  return std::accumulate(exit_heads.begin(), exit_heads.end(), Macs{0}) +
         std::accumulate(exit_classifiers.begin(), exit_classifiers.end(), Macs{0});
}

std::vector<double> MacProfile::block_macs() const { return {blocks.begin(), blocks.end()}; }

MacProfile backbone_macs(const ViTConfig& cfg) {
  cfg.validate();
  MacProfile p;
  const std::uint64_t n = cfg.tokens(), d = cfg.hidden, t = n + 1;
  p.patch_embedding = n * d * cfg.patch_dim();
  const Macs block = mac_mhsa(t, d) + 2 * t * d * d * cfg.mlp_ratio;
  p.blocks.assign(static_cast<std::size_t>(cfg.layers), block);
  p.final_classifier = d * cfg.num_classes;
  return p;
}

MacProfile model_macs(const ViTConfig& cfg, const ExitPlacement& placement, const KernelSchedule& kernels,
                      const WindowSchedule& windows, std::size_t expansion) {
  MacProfile p = backbone_macs(cfg);
  const std::uint64_t n = cfg.tokens(), d = cfg.hidden;
  for (std::size_t i = 0; i < placement.count(); ++i) {
    const int pos = placement.positions[i];
    Macs head = 0;
    switch (placement.kinds[i]) {
      case HeadKind::Lph: head = mac_lph(n, d, static_cast<std::uint64_t>(kernels.at(pos)), expansion); break;
      case HeadKind::Gah: head = mac_gah(n, d, static_cast<std::uint64_t>(windows.at(pos))); break;
      case HeadKind::Mlp: head = d * d; break;
    }
    p.exit_positions.push_back(pos);
    p.exit_heads.push_back(head);
    p.exit_classifiers.push_back(d * cfg.num_classes);
  }
  return p;
}

std::uint64_t ExitHistogram::total() const { return std::accumulate(counts.begin(), counts.end(), std::uint64_t{0}); }

void ExitHistogram::add(int layer, std::uint64_t n) {
  if (layer < 1 || layer > layers()) throw std::out_of_range("exit layer " + std::to_string(layer) + " outside histogram");
  counts[static_cast<std::size_t>(layer - 1)] += n;
}

double speedup(const ExitHistogram& hist) {
  if (hist.total() == 0) throw ValueError("speed-up of an empty exit histogram is undefined");
  const double L = static_cast<double>(hist.layers());
  double full = 0, executed = 0;
  for (std::size_t i = 0; i < hist.counts.size(); ++i) {
    const double m = static_cast<double>(hist.counts[i]);
    full += L * m;
    executed += static_cast<double>(i + 1) * m;
  }
  return full / executed;
}

std::vector<PathCost> path_costs(const MacProfile& profile, int layers) {
  if (static_cast<int>(profile.blocks.size()) != layers) throw ValueError("profile does not match the layer count");
  std::vector<PathCost> out;
  Macs backbone = profile.patch_embedding;
  Macs heads = 0;
  int done = 0;
  for (std::size_t j = 0; j < profile.exit_positions.size(); ++j) {
    const int pos = profile.exit_positions[j];
    for (; done < pos; ++done) backbone += profile.blocks[static_cast<std::size_t>(done)];
    heads += profile.exit_heads[j] + profile.exit_classifiers[j];
    out.push_back({pos, backbone + heads, backbone});
  }
  for (; done < layers; ++done) backbone += profile.blocks[static_cast<std::size_t>(done)];
  out.push_back({layers, backbone + heads + profile.final_classifier, backbone + profile.final_classifier});
  return out;
}

ExpectedMacs expected_macs(const MacProfile& profile, const ExitHistogram& hist) {
  const auto paths = path_costs(profile, hist.layers());
  const std::uint64_t total = hist.total();
  if (total == 0) throw ValueError("expected MACs of an empty histogram are undefined");
  ExpectedMacs out;
  for (std::size_t i = 0; i < hist.counts.size(); ++i) {
    const std::uint64_t c = hist.counts[i];
    if (c == 0) continue;
    const int layer = static_cast<int>(i) + 1;
    auto it = std::find_if(paths.begin(), paths.end(), [&](const PathCost& p) { return p.layer == layer; });
    if (it == paths.end()) {
      throw ValueError("histogram has samples at layer " + std::to_string(layer) + ", which is not an exit");
    }
    out.with_heads += static_cast<double>(c) * static_cast<double>(it->with_heads);
    out.without_heads += static_cast<double>(c) * static_cast<double>(it->without_heads);
  }
  out.with_heads /= static_cast<double>(total);
  out.without_heads /= static_cast<double>(total);
  return out;
}

}  // namespace eevit
