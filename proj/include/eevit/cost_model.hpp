#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "eevit/exit_heads.hpp"
#include "eevit/vit.hpp"

namespace eevit {

// Analytic multiply-accumulate counts. One MAC per multiply-add; activations,
// norms, softmax and pooling are free.
using Macs = std::uint64_t;

// Standard k x k convolution over N tokens of width D: N D^2 k^2.
Macs mac_conv(std::uint64_t n, std::uint64_t d, std::uint64_t k);
// MHSA with Q/K/V/O projections: 4 N D^2 + 2 N^2 D.
Macs mac_mhsa(std::uint64_t n, std::uint64_t d);
// LPH with expansion 1: 2 N D^2 + N D k^2 (k = 0 bypasses the depthwise stage).
Macs mac_lph(std::uint64_t n, std::uint64_t d, std::uint64_t k);
// General expansion e: 2 e N D^2 + e N D k^2.
Macs mac_lph(std::uint64_t n, std::uint64_t d, std::uint64_t k, std::uint64_t expansion);
// GAH: MHSA over the pooled grid. Divisible grids give 4ND^2/s^2 + 2N^2D/s^4;
// otherwise the true pooled count ceil(sqrt(N)/s)^2 replaces N/s^2. N must be
// a square token count.
Macs mac_gah(std::uint64_t n, std::uint64_t d, std::uint64_t s);
// Token count after s x s pooling of an N-token square grid.
std::uint64_t pooled_tokens(std::uint64_t n, std::uint64_t s);

struct CostRatios {
  double lph_over_conv;  // (2D + k^2) / (D k^2)
  double gah_over_mhsa;  // (2D + N/s^2) / (2D + N)
};

// Closed-form ratios; throws ValueError outside D >= 3, k >= 2, s >= 2.
CostRatios ratio_checks(std::uint64_t n, std::uint64_t d, std::uint64_t k, std::uint64_t s);

// Per-component static MACs of an early-exit model.
struct MacProfile {
  Macs patch_embedding = 0;
  std::vector<Macs> blocks;        // index i -> block i+1
  std::vector<int> exit_positions;
  std::vector<Macs> exit_heads;    // per exit, head only
  std::vector<Macs> exit_classifiers;
  Macs final_classifier = 0;

  Macs backbone_total() const;    // patch + blocks + final classifier
  Macs heads_total() const;       // all exit heads + internal classifiers
  Macs total() const { return backbone_total() + heads_total(); }
  std::vector<double> block_macs() const;
};

MacProfile model_macs(const ViTConfig& cfg, const ExitPlacement& placement, const KernelSchedule& kernels,
                      const WindowSchedule& windows, std::size_t expansion = 1);
// Backbone only (no exits).
MacProfile backbone_macs(const ViTConfig& cfg);

// counts[i] = samples that left at layer i+1, for i in [0, L).
struct ExitHistogram {
  std::vector<std::uint64_t> counts;

  explicit ExitHistogram(int layers = 0) : counts(static_cast<std::size_t>(layers), 0) {}
  int layers() const { return static_cast<int>(counts.size()); }
  std::uint64_t total() const;
  void add(int layer, std::uint64_t n = 1);
};

// (sum_i L m_i) / (sum_i i m_i).
double speedup(const ExitHistogram& hist);

struct PathCost {
  int layer = 0;
  Macs with_heads = 0;     // every exit head and classifier traversed on the way
  Macs without_heads = 0;  // backbone work only (plus the final classifier at L)
};

// Cost of leaving at each exit position, then at L.
std::vector<PathCost> path_costs(const MacProfile& profile, int layers);

struct ExpectedMacs {
  double with_heads = 0;
  double without_heads = 0;
};

// Sample-weighted mean path cost. Histogram mass is allowed only at exit
// positions and at L.
ExpectedMacs expected_macs(const MacProfile& profile, const ExitHistogram& hist);

struct CostReport {
  Macs static_backbone = 0;
  Macs static_with_heads = 0;
  std::vector<PathCost> paths;
  ExpectedMacs expected;
  double speedup = 1.0;
};

}  // namespace eevit
