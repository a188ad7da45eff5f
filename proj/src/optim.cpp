#include "eevit/optim.hpp"

#include <cmath>

#include "eevit/errors.hpp"

namespace eevit {

OptimizerKind parse_optimizer_kind(const std::string& s) {
  if (s == "sgd") return OptimizerKind::Sgd;
  if (s == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + s + "' (expected sgd or adam)");
}

std::string to_string(OptimizerKind kind) { return kind == OptimizerKind::Sgd ? "sgd" : "adam"; }

Optimizer::Optimizer(std::vector<Parameter> params, OptimizerConfig config)
    : params_(std::move(params)), config_(config) {
  if (!(config_.lr >= 0.0)) throw ConfigError("learning rate must be >= 0");
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    m_[i].assign(params_[i].value.numel(), 0.0);
    if (config_.kind == OptimizerKind::Adam) v_[i].assign(params_[i].value.numel(), 0.0);
  }
}

void Optimizer::step() {
  for (const auto& p : params_) {
    if (!p.value.has_grad()) throw ValueError("parameter '" + p.name + "' has no gradient");
  }
  ++step_count_;
  const double lr = config_.lr;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].value;
    auto w = t.mutable_data();
    auto g = t.grad();
    auto& m = m_[i];
    if (config_.kind == OptimizerKind::Sgd) {
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = config_.momentum * m[j] + g[j];
        w[j] -= lr * m[j];
      }
    } else {
      auto& v = v_[i];
      const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
      const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * g[j];
        v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * g[j] * g[j];
        w[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
      }
    }
    t.clear_grad();
  }
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.value.clear_grad();
}

}  // namespace eevit
