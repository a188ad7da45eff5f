#include "eevit/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

#include "eevit/errors.hpp"

namespace eevit {

RawDataset decode_raw_images(std::span<const std::uint8_t> bytes, const ImageGeometry& geometry, std::size_t classes) {
  if (geometry.side == 0 || geometry.channels == 0) throw ConfigError("image geometry must be positive");
  if (classes == 0 || classes > 256) throw ConfigError("class count must be in [1, 256]");
  const std::size_t stride = geometry.record_stride();
  if (bytes.size() % stride != 0) {
    throw FormatError("dataset length " + std::to_string(bytes.size()) + " is not a multiple of the record stride " +
                      std::to_string(stride) + " (truncated record)");
  }
  RawDataset out;
  out.geometry = geometry;
  out.classes = classes;
  const std::size_t n = bytes.size() / stride;
  out.labels.reserve(n);
  out.pixels.reserve(n * geometry.pixels());
  for (std::size_t r = 0; r < n; ++r) {
    const std::uint8_t label = bytes[r * stride];
    if (label >= classes) {
      throw ValueError("record " + std::to_string(r) + " has label " + std::to_string(label) + " >= class count " +
                       std::to_string(classes));
    }
    out.labels.push_back(label);
    auto first = bytes.begin() + static_cast<std::ptrdiff_t>(r * stride + 1);
    out.pixels.insert(out.pixels.end(), first, first + static_cast<std::ptrdiff_t>(geometry.pixels()));
  }
  return out;
}

std::vector<std::uint8_t> encode_raw_images(const RawDataset& data) {
  const std::size_t px = data.geometry.pixels();
  if (data.pixels.size() != data.size() * px) throw ShapeError("raw dataset pixel buffer does not match its geometry");
  std::vector<std::uint8_t> out;
  out.reserve(data.size() * data.geometry.record_stride());
  for (std::size_t r = 0; r < data.size(); ++r) {
    out.push_back(data.labels[r]);
    auto first = data.pixels.begin() + static_cast<std::ptrdiff_t>(r * px);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(px));
  }
  return out;
}

void write_raw_images(const std::filesystem::path& path, const RawDataset& data) {
  const auto bytes = encode_raw_images(data);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Dataset normalize(const RawDataset& raw, const Normalization& norm) {
  const std::size_t c = raw.geometry.channels;
  if (norm.mean.size() != c || norm.std.size() != c) throw ConfigError("normalization needs one mean/std per channel");
  for (double s : norm.std) {
    if (!(s > 0.0)) throw ConfigError("normalization std must be > 0");
  }
  Dataset out;
  out.geometry = raw.geometry;
  out.classes = raw.classes;
  out.labels.assign(raw.labels.begin(), raw.labels.end());
  out.pixels.resize(raw.pixels.size());
  const std::size_t plane = raw.geometry.side * raw.geometry.side;
  for (std::size_t i = 0; i < raw.pixels.size(); ++i) {
    const std::size_t ch = (i / plane) % c;
    out.pixels[i] = (static_cast<double>(raw.pixels[i]) / 255.0 - norm.mean[ch]) / norm.std[ch];
  }
  return out;
}

Dataset load_raw_images(const std::filesystem::path& path, const ImageGeometry& geometry, std::size_t classes,
                        const Normalization& norm) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open dataset " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return normalize(decode_raw_images(bytes, geometry, classes), norm);
}

Tensor make_batch(const Dataset& data, std::span<const std::size_t> indices, const Augmentation& aug, Rng* rng) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  if ((aug.random_crop || aug.horizontal_flip) && !rng) throw std::invalid_argument("augmentation needs an RNG");
  const std::size_t side = data.geometry.side, c = data.geometry.channels, px = data.geometry.pixels();
  std::vector<double> out(indices.size() * px, 0.0);
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= data.size()) throw std::out_of_range("sample index out of range");
    const double* src = data.pixels.data() + indices[b] * px;
    double* dst = out.data() + b * px;
    long dy = 0, dx = 0;
    bool flip = false;
    if (aug.random_crop) {
      const auto pad = static_cast<long>(aug.crop_padding);
      std::uniform_int_distribution<long> off(-pad, pad);
      dy = off(*rng);
      dx = off(*rng);
    }
    if (aug.horizontal_flip) flip = std::uniform_int_distribution<int>(0, 1)(*rng) == 1;
    const auto s = static_cast<long>(side);
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (long y = 0; y < s; ++y) {
        for (long x = 0; x < s; ++x) {
          const long sy = y + dy;
          long sx = x + dx;
          if (flip) sx = s - 1 - sx;
          if (sy < 0 || sy >= s || sx < 0 || sx >= s) continue;  // padding reads as 0
          dst[(ch * side + static_cast<std::size_t>(y)) * side + static_cast<std::size_t>(x)] =
              src[(ch * side + static_cast<std::size_t>(sy)) * side + static_cast<std::size_t>(sx)];
        }
      }
    }
  }
  return Tensor({indices.size(), c, side, side}, std::move(out));
}

std::vector<int> batch_labels(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(data.labels.at(i));
  return out;
}

RawDataset gen_synthetic(std::size_t classes, std::size_t per_class, const ImageGeometry& geometry, std::uint64_t seed,
                         double noise) {
  if (classes == 0 || classes > 256 || per_class == 0) throw ConfigError("synthetic data needs positive counts");
  if (noise < 0.0) throw ConfigError("noise must be >= 0");
  Rng rng(seed);
  const std::size_t side = geometry.side, c = geometry.channels;
  const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(classes))));
  const std::size_t rows = (classes + cols - 1) / cols;
  const double sigma = static_cast<double>(side) / 8.0;

  struct Blob {
    double cy, cx;
    std::vector<double> color;
  };
  std::vector<Blob> blobs(classes);
  std::uniform_real_distribution<double> tint(0.3, 1.0);
  for (std::size_t k = 0; k < classes; ++k) {
    blobs[k].cy = (static_cast<double>(k / cols) + 0.5) * static_cast<double>(side) / static_cast<double>(rows);
    blobs[k].cx = (static_cast<double>(k % cols) + 0.5) * static_cast<double>(side) / static_cast<double>(cols);
    for (std::size_t ch = 0; ch < c; ++ch) blobs[k].color.push_back(tint(rng));
  }

  RawDataset out;
  out.geometry = geometry;
  out.classes = classes;
  out.labels.reserve(classes * per_class);
  out.pixels.reserve(classes * per_class * geometry.pixels());
  std::normal_distribution<double> jitter(0.0, 1.0);
  // Samples interleave classes: 0,1,...,K-1,0,1,...
  for (std::size_t i = 0; i < per_class; ++i) {
    for (std::size_t k = 0; k < classes; ++k) {
      out.labels.push_back(static_cast<std::uint8_t>(k));
      const Blob& blob = blobs[k];
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < side; ++y) {
          for (std::size_t x = 0; x < side; ++x) {
            const double dy = static_cast<double>(y) + 0.5 - blob.cy;
            const double dx = static_cast<double>(x) + 0.5 - blob.cx;
            double v = blob.color[ch] * std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
            if (noise > 0.0) v += noise * jitter(rng);
            v = std::clamp(v, 0.0, 1.0);
            out.pixels.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
          }
        }
      }
    }
  }
  return out;
}

}  // namespace eevit
