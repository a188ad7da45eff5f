#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "eevit/data.hpp"
#include "eevit/model.hpp"
#include "eevit/optim.hpp"

namespace eevit {

struct TrainConfig {
  double alpha = 0.1;
  double beta = 0.1;
  double gamma = 0.5;
  double temperature = 4.0;
  double lr_stage1 = 1e-3;
  double lr_stage2 = 5e-4;
  int epochs_stage1 = 20;
  int epochs_stage2 = 20;
  std::size_t batch_size = 32;
  std::uint64_t seed = 7;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double momentum = 0.9;
  bool distillation = true;  // false: stage 2 trains exits on cross entropy only

  void validate() const;
};

// Per-parameter trainable flags.
struct FreezeMask {
  std::map<std::string, bool> trainable;

  // Stage 2: backbone and final classifier frozen, everything else trainable.
  static FreezeMask stage2(const EarlyExitViT& model);
  std::vector<Parameter> select(const std::vector<Parameter>& params) const;
};

// Everything stage 2 needs from one batch.
struct FeatureBundle {
  std::vector<BranchOutput> exits;  // F_m and logits per exit
  Tensor final_tokens;              // F_L: [batch, N, D], CLS excluded
  Tensor final_logits;              // detached
};

// Backbone without gradient recording, exits with it.
FeatureBundle stage2_forward(EarlyExitViT& model, const Tensor& images, NormMode mode);

LossParts stage2_losses(EarlyExitViT& model, const FeatureBundle& bundle, std::span<const int> labels,
                        const TrainConfig& cfg, NormMode mode);

// Sum of the per-exit cross entropies on every internal classifier.
Tensor exit_cross_entropy(const FeatureBundle& bundle, std::span<const int> labels);

struct LossValues {
  double hete = 0, homo_lph = 0, homo_gah = 0, pred = 0, total = 0, exit_ce = 0;
};

struct EpochReport {
  int stage = 1;
  int epoch = 0;
  double loss = 0;      // mean optimized objective over the epoch
  double accuracy = 0;  // running train accuracy of the final classifier (stage 1)
  LossValues parts;     // stage 2 only
};

using EpochCallback = std::function<void(const EpochReport&)>;

struct StageOptions {
  Augmentation augmentation;
  std::filesystem::path checkpoint;  // rewritten after every epoch when non-empty
  EpochCallback on_epoch;
};

// Cross entropy on the final classifier; only backbone parameters move.
std::vector<EpochReport> stage1_train(EarlyExitViT& model, const Dataset& data, const TrainConfig& cfg,
                                      const StageOptions& opts = {});

// Frozen backbone; exits (and align modules) minimise total_loss plus the
// per-exit cross entropies. Throws std::logic_error if any backbone value
// changed.
std::vector<EpochReport> stage2_train(EarlyExitViT& model, const Dataset& data, const TrainConfig& cfg,
                                      const StageOptions& opts = {});

// Eval-mode mean loss components over a dataset, no updates.
LossValues evaluate_stage2_loss(EarlyExitViT& model, const Dataset& data, const TrainConfig& cfg);

// Eval-mode top-1 accuracy of the final classifier and of each exit.
double final_accuracy(const EarlyExitViT& model, const Dataset& data, std::size_t batch_size = 64);
std::vector<double> exit_accuracies(EarlyExitViT& model, const Dataset& data, std::size_t batch_size = 64);

std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace eevit
