#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "eevit/data.hpp"
#include "eevit/model.hpp"

namespace eevit {

// Row-major [rows, cols] feature matrix: one row per probe sample.
struct FeatureMatrix {
  std::size_t rows = 0, cols = 0;
  std::vector<double> values;

  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

// Linear CKA after column centering, clamped to [0, 1]. Throws
// std::invalid_argument on a row-count mismatch or fewer than two rows, and
// ValueError when either side is all zero after centering.
double cka(const FeatureMatrix& x, const FeatureMatrix& y);

struct FeatureTap {
  std::string name;  // "layer.m" (all tokens, flattened) or "exit.m" (pooled head feature)
  FeatureMatrix features;
};

// Block outputs 1..L followed by each exit head's pooled feature, eval mode.
std::vector<FeatureTap> collect_taps(EarlyExitViT& model, const Dataset& probe, std::size_t batch_size = 32);

// rows: taps_a, cols: taps_b. Throws std::invalid_argument when the probe sizes differ.
std::vector<std::vector<double>> cka_heatmap(const std::vector<FeatureTap>& taps_a,
                                             const std::vector<FeatureTap>& taps_b);

struct AttentionMap {
  std::size_t side = 0;
  std::vector<double> grid;  // side x side, row-major, CLS row averaged over heads
  double cls_self = 0;       // weight of CLS on itself, excluded from the grid
};

// Throws std::out_of_range unless 1 <= layer <= L.
AttentionMap attention_map(const VisionTransformer& backbone, const Tensor& image, int layer);
void write_attention_csv(const std::filesystem::path& path, const AttentionMap& map);

}  // namespace eevit
