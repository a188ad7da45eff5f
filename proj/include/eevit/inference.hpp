#pragma once

#include <span>
#include <vector>

#include "eevit/cost_model.hpp"
#include "eevit/data.hpp"
#include "eevit/model.hpp"

namespace eevit {

struct ExitPolicy {
  double tau = 0.9;  // fire when confidence > tau; tau >= 1 never fires

  void validate() const;  // ConfigError for negative or non-finite tau
};

// Top-class probability. Throws ValueError unless p is a distribution.
double confidence(std::span<const double> p);

struct InferenceResult {
  int exit_layer = 0;
  int predicted = -1;
  double confidence = 0;
  Macs macs = 0;  // path cost including every head traversed
  std::vector<std::vector<double>> logits;  // one row per visited classifier, final last
};

// Sequential early exit on one image [1, C, H, W] in eval mode.
InferenceResult infer_early_exit(EarlyExitViT& model, const Tensor& image, const ExitPolicy& policy);

// Every exit's confidence and prediction for one sample, plus the final classifier.
struct SampleTrace {
  std::vector<double> confidences;
  std::vector<int> predictions;
  int final_prediction = -1;
  double final_confidence = 0;
};

SampleTrace trace_sample(EarlyExitViT& model, const Tensor& image);

struct EvaluationSummary {
  double tau = 0;
  double accuracy = 0;
  ExitHistogram histogram;
  double speedup = 1;
  ExpectedMacs expected;
};

// Per-sample inference over the whole set. Throws std::invalid_argument when empty.
EvaluationSummary evaluate_dataset(EarlyExitViT& model, const Dataset& data, const ExitPolicy& policy);

// One forward per sample; each tau is then a pure function of the cached traces.
std::vector<EvaluationSummary> threshold_sweep(EarlyExitViT& model, const Dataset& data, std::span<const double> taus);

std::vector<SampleTrace> trace_dataset(EarlyExitViT& model, const Dataset& data);
EvaluationSummary summarize(const EarlyExitViT& model, const std::vector<SampleTrace>& traces,
                            std::span<const int> labels, double tau);

}  // namespace eevit
