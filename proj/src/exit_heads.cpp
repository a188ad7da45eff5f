#include "eevit/exit_heads.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "eevit/errors.hpp"

namespace eevit {

std::string to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::Lph: return "lph";
    case HeadKind::Gah: return "gah";
    case HeadKind::Mlp: return "mlp";
  }
  return "?";
}

HeadKind parse_head_kind(const std::string& s) {
  if (s == "lph") return HeadKind::Lph;
  if (s == "gah") return HeadKind::Gah;
  if (s == "mlp") return HeadKind::Mlp;
  throw ConfigError("unknown head kind '" + s + "' (expected lph, gah or mlp)");
}

HeadKind default_head_kind(int position, int layers) { return position <= layers / 2 ? HeadKind::Lph : HeadKind::Gah; }

void ExitPlacement::validate(int layers) const {
  if (positions.empty()) throw ConfigError("at least one exit is required");
  if (kinds.size() != positions.size()) throw ConfigError("one head kind per exit position is required");
  for (std::size_t i = 0; i < positions.size(); ++i) {
    const int p = positions[i];
    if (p < 1 || p >= layers) {
      throw ConfigError("exit position " + std::to_string(p) + " outside [1, " + std::to_string(layers) + ")");
    }
    if (i > 0 && p <= positions[i - 1]) throw ConfigError("exit positions must be strictly increasing");
    const bool forced = i < overridden.size() && overridden[i];
    if (!forced && kinds[i] != default_head_kind(p, layers)) {
      throw ConfigError("exit at layer " + std::to_string(p) + " cannot use " + to_string(kinds[i]) +
                        " under the position rule (LPH <= L/2 < GAH)");
    }
  }
}

ExitPlacement ExitPlacement::with_default_kinds(std::vector<int> positions, int layers) {
  ExitPlacement out;
  for (int p : positions) out.kinds.push_back(default_head_kind(p, layers));
  out.overridden.assign(positions.size(), false);
  out.positions = std::move(positions);
  return out;
}

std::vector<int> place_exits(std::span<const double> block_macs, int count) {
  const int layers = static_cast<int>(block_macs.size());
  if (count < 1) throw ConfigError("exit count must be >= 1");
  if (count >= layers) {
    throw ConfigError("exit count " + std::to_string(count) + " must be below the layer count " + std::to_string(layers));
  }
  std::vector<double> cum(static_cast<std::size_t>(layers) + 1, 0.0);
  for (int i = 0; i < layers; ++i) {
    if (block_macs[static_cast<std::size_t>(i)] < 0) throw ConfigError("block MACs must be nonnegative");
    cum[static_cast<std::size_t>(i) + 1] = cum[static_cast<std::size_t>(i)] + block_macs[static_cast<std::size_t>(i)];
  }
  const double total = cum.back();
  auto term = [&](int j, int p) {
    const double d = cum[static_cast<std::size_t>(p)] - total * j / count;
    return d * d;
  };
  // rest[j][p]: best cost of exits j..count given exit j sits at layer p.
  constexpr double kInf = std::numeric_limits<double>::infinity();
  const auto M = static_cast<std::size_t>(count);
  const auto Lz = static_cast<std::size_t>(layers);
  std::vector<std::vector<double>> rest(M + 2, std::vector<double>(Lz + 1, kInf));
  for (int p = 1; p < layers; ++p) rest[M][static_cast<std::size_t>(p)] = term(count, p);
  for (int j = count - 1; j >= 1; --j) {
    double best_after = kInf;
    for (int p = layers - 1; p >= 1; --p) {
      rest[static_cast<std::size_t>(j)][static_cast<std::size_t>(p)] = term(j, p) + best_after;
      best_after = std::min(best_after, rest[static_cast<std::size_t>(j) + 1][static_cast<std::size_t>(p)]);
    }
  }
  const double tol = 1e-12 * std::max(1.0, total * total);
  std::vector<int> out;
  int prev = 0;
  double budget = kInf;
  // Walk forward taking the shallowest position that still attains the optimum.
  for (int j = 1; j <= count; ++j) {
    double best = budget;
    if (j == 1) {
      for (int p = 1; p < layers; ++p) best = std::min(best, rest[1][static_cast<std::size_t>(p)]);
    }
    for (int p = prev + 1; p < layers; ++p) {
      const double c = rest[static_cast<std::size_t>(j)][static_cast<std::size_t>(p)];
      if (c <= best + tol) {
        out.push_back(p);
        budget = c - term(j, p);
        prev = p;
        break;
      }
    }
  }
  return out;
}

int KernelSchedule::at(int position) const {
  auto it = kernel.find(position);
  if (it == kernel.end()) throw ConfigError("no kernel size scheduled for layer " + std::to_string(position));
  return it->second;
}

bool KernelSchedule::monotone() const {
  int prev = std::numeric_limits<int>::max();
  for (const auto& [pos, k] : kernel) {
    if (k > prev) return false;
    prev = k;
  }
  return true;
}

KernelSchedule KernelSchedule::linear(const std::vector<int>& lph_positions, int layers, int k_max) {
  if (k_max < 3 || k_max % 2 == 0) throw ConfigError("exits.k_max must be an odd size >= 3");
  KernelSchedule out;
  out.k_max = k_max;
  if (lph_positions.empty()) return out;
  const int first = *std::min_element(lph_positions.begin(), lph_positions.end());
  const double span = static_cast<double>(layers / 2 + 1 - first);
  for (int m : lph_positions) {
    const double v = k_max - (k_max - 1) * static_cast<double>(m - first) / span;
    const int odd = 2 * static_cast<int>(std::lround((v - 1.0) / 2.0)) + 1;
    out.kernel[m] = odd < 3 ? 0 : std::min(odd, k_max);
  }
  return out;
}

int WindowSchedule::at(int position) const {
  auto it = window.find(position);
  if (it == window.end()) throw ConfigError("no window size scheduled for layer " + std::to_string(position));
  return it->second;
}

bool WindowSchedule::monotone() const {
  int prev = 0;
  for (const auto& [pos, s] : window) {
    if (s < prev) return false;
    prev = s;
  }
  return true;
}

WindowSchedule WindowSchedule::linear(const std::vector<int>& gah_positions, int layers, int g_max) {
  if (g_max < 2) throw ConfigError("exits.g_max must be >= 2");
  WindowSchedule out;
  out.g_max = g_max;
  const int lo = layers / 2 + 1;
  const int hi = layers - 1;
  for (int m : gah_positions) {
    int s = 2;
    if (hi > lo) {
      const double v = 2.0 + (g_max - 2) * static_cast<double>(m - lo) / static_cast<double>(hi - lo);
      s = std::clamp(static_cast<int>(std::floor(v)), 2, g_max);
    }
    out.window[m] = s;
  }
  return out;
}

Tensor pdconv(const Tensor& x, const Tensor& weight, const Tensor& bias, int kernel) {
  if (kernel == 0) return x;
  if (kernel < 0 || kernel % 2 == 0) throw ConfigError("PDConv kernel must be 0 or odd");
  grid_side(x.dim(1));
  if (weight.dim(0) != static_cast<std::size_t>(kernel)) throw ShapeError("PDConv weight does not match kernel size");
  return depthwise_conv2d(x, weight, bias, 1, static_cast<std::size_t>(kernel / 2));
}

Tensor pfc(const Tensor& x, int window) {
  if (window < 2) throw ConfigError("PFC window must be >= 2, got " + std::to_string(window));
  return avg_pool_window(x, static_cast<std::size_t>(window));
}

LocalPerceptionHead::LocalPerceptionHead(std::size_t dim, std::size_t expansion, int kernel, Rng& rng)
    : expand(dim, dim * expansion, rng),
      bn_expand(dim * expansion),
      bn_dw(dim * expansion),
      project(dim * expansion, dim, rng),
      bn_project(dim),
      kernel(kernel) {
  if (expansion == 0) throw ConfigError("LPH expansion ratio must be >= 1");
  if (kernel < 0 || (kernel > 0 && kernel % 2 == 0)) throw ConfigError("LPH kernel must be 0 or odd");
  if (kernel > 0) {
    const auto k = static_cast<std::size_t>(kernel);
    dw_weight = trunc_normal({k, k, dim * expansion}, 0.2, rng);
    dw_bias = Tensor::zeros({dim * expansion}, true);
  }
}

Tensor LocalPerceptionHead::act_norm(const Tensor& x, BatchNorm& bn, NormMode mode) const {
  if (bypass_) return x;
  return bn.forward(gelu(x), mode);
}

HeadOutput LocalPerceptionHead::forward(const EncoderOutput& x, NormMode mode) {
  Tensor h = act_norm(expand.forward(x.patches()), bn_expand, mode);
  if (kernel > 0) h = act_norm(pdconv(h, dw_weight, dw_bias, kernel), bn_dw, mode);
  Tensor f = act_norm(project.forward(h), bn_project, mode);
  return {f, add(avg_pool_global(f, 1), x.cls())};
}

void LocalPerceptionHead::set_bypass(bool on) { bypass_ = on; }

void LocalPerceptionHead::collect(StateCollector& c) const {
  c.push("expand");
  expand.collect(c);
  c.pop();
  c.push("bn_expand");
  bn_expand.collect(c);
  c.pop();
  if (kernel > 0) {
    c.param("dw.weight", dw_weight);
    c.param("dw.bias", dw_bias);
    c.push("bn_dw");
    bn_dw.collect(c);
    c.pop();
  }
  c.push("project");
  project.collect(c);
  c.pop();
  c.push("bn_project");
  bn_project.collect(c);
  c.pop();
}

GlobalAggregationHead::GlobalAggregationHead(std::size_t dim, std::size_t heads, int window, Rng& rng)
    : attn(dim, heads, rng), window(window) {
  if (window < 2) throw ConfigError("GAH window must be >= 2");
}

HeadOutput GlobalAggregationHead::forward(const EncoderOutput& x, Tensor* attention) const {
  Tensor f = attn.forward(pfc(x.patches(), window), attention);
  return {f, add(avg_pool_global(f, 1), x.cls())};
}

void GlobalAggregationHead::collect(StateCollector& c) const {
  c.push("attn");
  attn.collect(c);
  c.pop();
}

MlpHead::MlpHead(std::size_t dim, Rng& rng) : fc(dim, dim, rng) {}

HeadOutput MlpHead::forward(const EncoderOutput& x) const {
  Tensor tokens = x.patches();
  return {tokens, fc.forward(avg_pool_global(tokens, 1))};
}

void MlpHead::collect(StateCollector& c) const {
  c.push("fc");
  fc.collect(c);
  c.pop();
}

ExitBranch::ExitBranch(int position, HeadKind kind,
                       std::variant<LocalPerceptionHead, GlobalAggregationHead, MlpHead> head, std::size_t dim,
                       std::size_t num_classes, Rng& rng)
    : head(std::move(head)), classifier(dim, num_classes, rng), position_(position), kind_(kind) {
  const bool consistent = (kind == HeadKind::Lph && std::holds_alternative<LocalPerceptionHead>(this->head)) ||
                          (kind == HeadKind::Gah && std::holds_alternative<GlobalAggregationHead>(this->head)) ||
                          (kind == HeadKind::Mlp && std::holds_alternative<MlpHead>(this->head));
  if (!consistent) throw ConfigError("exit head object does not match its declared kind");
}

BranchOutput ExitBranch::forward(const EncoderOutput& x, NormMode mode) {
  if (x.layer_index != position_) {
    throw std::invalid_argument("exit at layer " + std::to_string(position_) + " fed the output of layer " +
                                std::to_string(x.layer_index));
  }
  HeadOutput h = std::visit(
      [&](auto& hd) -> HeadOutput {
        using T = std::decay_t<decltype(hd)>;
        if constexpr (std::is_same_v<T, LocalPerceptionHead>) {
          return hd.forward(x, mode);
        } else {
          return hd.forward(x);
        }
      },
      head);
  return {h.feature_map, h.feature, classifier.forward(h.feature)};
}

void ExitBranch::collect(StateCollector& c) const {
  c.push("head");
  std::visit([&](const auto& hd) { hd.collect(c); }, head);
  c.pop();
  c.push("classifier");
  classifier.collect(c);
  c.pop();
}

}  // namespace eevit
