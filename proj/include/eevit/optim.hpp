#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "eevit/nn.hpp"

namespace eevit {

enum class OptimizerKind { Sgd, Adam };

OptimizerKind parse_optimizer_kind(const std::string& s);
std::string to_string(OptimizerKind kind);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double lr = 1e-3;
  double momentum = 0.9;  // SGD only; 0 gives plain descent
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// SGD with momentum (v <- mu v + g; w <- w - lr v) or Adam with bias
// correction. step() consumes and clears every parameter's gradient and
// throws ValueError if one is missing.
class Optimizer {
 public:
  Optimizer(std::vector<Parameter> params, OptimizerConfig config);

  void step();
  void zero_grad();

  const OptimizerConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

 private:
  std::vector<Parameter> params_;
  OptimizerConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  long step_count_ = 0;
};

}  // namespace eevit
