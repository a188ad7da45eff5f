#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "eevit/nn.hpp"
#include "eevit/tensor.hpp"

namespace eevit {

struct ImageGeometry {
  std::size_t side = 32;
  std::size_t channels = 3;

  std::size_t pixels() const { return side * side * channels; }
  // Bytes per record: one label byte plus channel-major pixels.
  std::size_t record_stride() const { return 1 + pixels(); }
};

// Undecoded images exactly as stored on disk.
struct RawDataset {
  ImageGeometry geometry;
  std::size_t classes = 10;
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> pixels;  // record-major, channel-major within a record

  std::size_t size() const { return labels.size(); }
};

// Parses fixed-size records [label u8][H*W*C pixel bytes, channel-major].
// Throws FormatError on a partial trailing record and ValueError on a label
// outside [0, classes).
RawDataset decode_raw_images(std::span<const std::uint8_t> bytes, const ImageGeometry& geometry, std::size_t classes);
std::vector<std::uint8_t> encode_raw_images(const RawDataset& data);
void write_raw_images(const std::filesystem::path& path, const RawDataset& data);

struct Normalization {
  std::vector<double> mean{0.5, 0.5, 0.5};
  std::vector<double> std{0.25, 0.25, 0.25};
};

// Decoded, normalised images ready for batching.
struct Dataset {
  ImageGeometry geometry;
  std::size_t classes = 10;
  std::vector<int> labels;
  std::vector<double> pixels;  // (byte / 255 - mean[c]) / std[c]

  std::size_t size() const { return labels.size(); }
};

Dataset normalize(const RawDataset& raw, const Normalization& norm);
Dataset load_raw_images(const std::filesystem::path& path, const ImageGeometry& geometry, std::size_t classes,
                        const Normalization& norm);

struct Augmentation {
  bool random_crop = false;  // zero-pad by `crop_padding`, crop back at a random offset
  std::size_t crop_padding = 4;
  bool horizontal_flip = false;
};

// images [indices.size(), C, side, side]; `rng` is required when any
// augmentation is enabled.
Tensor make_batch(const Dataset& data, std::span<const std::size_t> indices, const Augmentation& aug = {},
                  Rng* rng = nullptr);
std::vector<int> batch_labels(const Dataset& data, std::span<const std::size_t> indices);

// Class-conditional Gaussian blobs: class c has its own centre on a grid and
// its own colour; `noise` is the per-pixel Gaussian std in [0,1] units.
RawDataset gen_synthetic(std::size_t classes, std::size_t per_class, const ImageGeometry& geometry, std::uint64_t seed,
                         double noise = 0.05);

}  // namespace eevit
