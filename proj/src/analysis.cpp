#include "eevit/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <stdexcept>

#include "eevit/errors.hpp"

namespace eevit {

namespace {

std::vector<double> centered(const FeatureMatrix& m) {
  std::vector<double> out = m.values;
  for (std::size_t c = 0; c < m.cols; ++c) {
    double mu = 0;
    for (std::size_t r = 0; r < m.rows; ++r) mu += out[r * m.cols + c];
    mu /= static_cast<double>(m.rows);
    for (std::size_t r = 0; r < m.rows; ++r) out[r * m.cols + c] -= mu;
  }
  return out;
}

// K = X X^T, [n, n].
std::vector<double> kernel(const std::vector<double>& x, std::size_t n, std::size_t d) {
  std::vector<double> k(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i; j < n; ++j) {
      double s = 0;
      for (std::size_t c = 0; c < d; ++c) s += x[i * d + c] * x[j * d + c];
      k[i * n + j] = k[j * n + i] = s;
    }
  }
  return k;
}

// A^T B for A [n, p], B [n, q] -> [p, q].
std::vector<double> cross(const std::vector<double>& a, std::size_t p, const std::vector<double>& b, std::size_t q,
                          std::size_t n) {
  std::vector<double> out(p * q, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t i = 0; i < p; ++i) {
      const double ai = a[r * p + i];
      for (std::size_t j = 0; j < q; ++j) out[i * q + j] += ai * b[r * q + j];
    }
  }
  return out;
}

double sq_norm(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return s;
}

FeatureMatrix flatten_rows(const Tensor& t) {
  FeatureMatrix m;
  m.rows = t.dim(0);
  m.cols = t.numel() / m.rows;
  m.values.assign(t.data().begin(), t.data().end());
  return m;
}

void append_rows(FeatureMatrix& dst, const FeatureMatrix& src) {
  if (dst.rows == 0) dst.cols = src.cols;
  dst.rows += src.rows;
  dst.values.insert(dst.values.end(), src.values.begin(), src.values.end());
}

}  // namespace

double cka(const FeatureMatrix& x, const FeatureMatrix& y) {
  if (x.rows != y.rows) throw std::invalid_argument("cka needs the same probe samples on both sides");
  if (x.rows < 2) throw std::invalid_argument("cka needs at least two samples");
  if (x.values.size() != x.rows * x.cols || y.values.size() != y.rows * y.cols) {
    throw ShapeError("feature matrix size does not match its extents");
  }
  const std::size_t n = x.rows;
  const auto xc = centered(x), yc = centered(y);
  double num = 0, den_x = 0, den_y = 0;
  // Pick whichever of the feature-space and sample-space forms is cheaper.
  if (n * n <= x.cols * y.cols) {
    const auto kx = kernel(xc, n, x.cols), ky = kernel(yc, n, y.cols);
    for (std::size_t i = 0; i < n * n; ++i) num += kx[i] * ky[i];
    den_x = std::sqrt(sq_norm(kx));
    den_y = std::sqrt(sq_norm(ky));
  } else {
    num = sq_norm(cross(yc, y.cols, xc, x.cols, n));
    den_x = std::sqrt(sq_norm(cross(xc, x.cols, xc, x.cols, n)));
    den_y = std::sqrt(sq_norm(cross(yc, y.cols, yc, y.cols, n)));
  }
  if (den_x == 0.0 || den_y == 0.0) throw ValueError("cka is undefined for features that are constant across samples");
  return std::clamp(num / (den_x * den_y), 0.0, 1.0);
}

std::vector<FeatureTap> collect_taps(EarlyExitViT& model, const Dataset& probe, std::size_t batch_size) {
  if (probe.size() == 0) throw std::invalid_argument("empty probe set");
  NoGradGuard no_grad;
  const int layers = model.layers();
  std::vector<FeatureTap> taps(static_cast<std::size_t>(layers) + model.branches.size());
  for (int m = 1; m <= layers; ++m) taps[static_cast<std::size_t>(m - 1)].name = "layer." + std::to_string(m);
  for (std::size_t e = 0; e < model.branches.size(); ++e) {
    taps[static_cast<std::size_t>(layers) + e].name = "exit." + std::to_string(model.branches[e].position());
  }
  for (std::size_t start = 0; start < probe.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, probe.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    EncoderOutput x = model.backbone.embed(make_batch(probe, idx));
    std::size_t next_exit = 0;
    for (int m = 1; m <= layers; ++m) {
      x = model.backbone.continue_to(x, m);
      append_rows(taps[static_cast<std::size_t>(m - 1)].features, flatten_rows(x.tokens));
      while (next_exit < model.branches.size() && model.branches[next_exit].position() == m) {
        const auto out = model.branches[next_exit].forward(x, NormMode::Eval);
        append_rows(taps[static_cast<std::size_t>(layers) + next_exit].features, flatten_rows(out.feature));
        ++next_exit;
      }
    }
  }
  return taps;
}

std::vector<std::vector<double>> cka_heatmap(const std::vector<FeatureTap>& taps_a,
                                             const std::vector<FeatureTap>& taps_b) {
  std::vector<std::vector<double>> out(taps_a.size(), std::vector<double>(taps_b.size(), 0.0));
  for (std::size_t i = 0; i < taps_a.size(); ++i) {
    for (std::size_t j = 0; j < taps_b.size(); ++j) {
      if (taps_a[i].features.rows != taps_b[j].features.rows) {
        throw std::invalid_argument("probe size mismatch between '" + taps_a[i].name + "' and '" + taps_b[j].name +
                                    "'");
      }
      out[i][j] = cka(taps_a[i].features, taps_b[j].features);
    }
  }
  return out;
}

AttentionMap attention_map(const VisionTransformer& backbone, const Tensor& image, int layer) {
  if (layer < 1 || layer > backbone.config().layers) {
    throw std::out_of_range("attention layer " + std::to_string(layer) + " outside [1, " +
                            std::to_string(backbone.config().layers) + "]");
  }
  if (image.shape().size() != 4 || image.dim(0) != 1) throw ShapeError("attention export takes one image [1, C, H, W]");
  NoGradGuard no_grad;
  AttentionRecord rec;
  backbone.forward_to_layer(image, layer, &rec);
  const Tensor& w = rec.layers.at(static_cast<std::size_t>(layer - 1));  // [1, h, T, T]
  const std::size_t heads = w.dim(1), t = w.dim(2);
  auto v = w.data();
  std::vector<double> row(t, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t j = 0; j < t; ++j) row[j] += v[h * t * t + j] / static_cast<double>(heads);
  }
  AttentionMap map;
  map.side = backbone.config().grid();
  map.cls_self = row[0];
  map.grid.assign(row.begin() + 1, row.end());
  return map;
}

void write_attention_csv(const std::filesystem::path& path, const AttentionMap& map) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  f << std::setprecision(17);
  f << "# cls_self," << map.cls_self << '\n';
  for (std::size_t r = 0; r < map.side; ++r) {
    for (std::size_t c = 0; c < map.side; ++c) f << (c ? "," : "") << map.grid[r * map.side + c];
    f << '\n';
  }
}

}  // namespace eevit
