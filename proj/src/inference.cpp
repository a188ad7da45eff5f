#include "eevit/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "eevit/errors.hpp"

namespace eevit {

namespace {

std::vector<double> softmax_row(const Tensor& logits) {
  const Tensor p = softmax(logits, -1);
  return std::vector<double>(p.data().begin(), p.data().end());
}

int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

Tensor sample_image(const Dataset& data, std::size_t i) {
  const std::size_t idx[1] = {i};
  return make_batch(data, idx);
}

Macs path_macs(const std::vector<PathCost>& paths, int layer) {
  for (const auto& p : paths) {
    if (p.layer == layer) return p.with_heads;
  }
  throw std::logic_error("no path ends at layer " + std::to_string(layer));
}

}  // namespace

void ExitPolicy::validate() const {
  if (!std::isfinite(tau) || tau < 0.0) throw ConfigError("inference.tau must be a finite value >= 0");
}

double confidence(std::span<const double> p) {
  if (p.empty()) throw ValueError("empty distribution");
  double s = 0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ValueError("distribution has a negative or non-finite entry");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-9) throw ValueError("distribution sums to " + std::to_string(s));
  return *std::max_element(p.begin(), p.end());
}

InferenceResult infer_early_exit(EarlyExitViT& model, const Tensor& image, const ExitPolicy& policy) {
  policy.validate();
  if (image.shape().size() != 4 || image.dim(0) != 1) throw ShapeError("early exit runs one image [1, C, H, W]");
  NoGradGuard no_grad;
  const auto paths = path_costs(model.mac_profile(), model.layers());
  InferenceResult r;
  EncoderOutput x = model.backbone.embed(image);
  for (auto& br : model.branches) {
    x = model.backbone.continue_to(x, br.position());
    Tensor logits = br.forward(x, NormMode::Eval).logits;
    r.logits.emplace_back(logits.data().begin(), logits.data().end());
    const auto p = softmax_row(logits);
    const double c = confidence(p);
    if (c > policy.tau) {
      r.exit_layer = br.position();
      r.predicted = argmax(p);
      r.confidence = c;
      r.macs = path_macs(paths, r.exit_layer);
      return r;
    }
  }
  x = model.backbone.continue_to(x, model.layers());
  Tensor logits = model.backbone.final_classifier(x);
  r.logits.emplace_back(logits.data().begin(), logits.data().end());
  const auto p = softmax_row(logits);
  r.exit_layer = model.layers();
  r.predicted = argmax(p);
  r.confidence = confidence(p);
  r.macs = path_macs(paths, r.exit_layer);
  return r;
}

SampleTrace trace_sample(EarlyExitViT& model, const Tensor& image) {
  if (image.shape().size() != 4 || image.dim(0) != 1) throw ShapeError("trace runs one image [1, C, H, W]");
  NoGradGuard no_grad;
  SampleTrace t;
  EncoderOutput x = model.backbone.embed(image);
  for (auto& br : model.branches) {
    x = model.backbone.continue_to(x, br.position());
    const auto p = softmax_row(br.forward(x, NormMode::Eval).logits);
    t.confidences.push_back(confidence(p));
    t.predictions.push_back(argmax(p));
  }
  x = model.backbone.continue_to(x, model.layers());
  const auto p = softmax_row(model.backbone.final_classifier(x));
  t.final_confidence = confidence(p);
  t.final_prediction = argmax(p);
  return t;
}

std::vector<SampleTrace> trace_dataset(EarlyExitViT& model, const Dataset& data) {
  std::vector<SampleTrace> out;
  out.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) out.push_back(trace_sample(model, sample_image(data, i)));
  return out;
}

EvaluationSummary summarize(const EarlyExitViT& model, const std::vector<SampleTrace>& traces,
                            std::span<const int> labels, double tau) {
  if (traces.empty()) throw std::invalid_argument("empty dataset");
  if (traces.size() != labels.size()) throw std::invalid_argument("trace/label count mismatch");
  ExitPolicy{tau}.validate();
  EvaluationSummary s;
  s.tau = tau;
  s.histogram = ExitHistogram(model.layers());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto& t = traces[i];
    int layer = model.layers(), pred = t.final_prediction;
    for (std::size_t e = 0; e < t.confidences.size(); ++e) {
      if (t.confidences[e] > tau) {
        layer = model.branches[e].position();
        pred = t.predictions[e];
        break;
      }
    }
    s.histogram.add(layer);
    correct += pred == labels[i] ? 1 : 0;
  }
  s.accuracy = static_cast<double>(correct) / static_cast<double>(traces.size());
  s.speedup = speedup(s.histogram);
  s.expected = expected_macs(model.mac_profile(), s.histogram);
  return s;
}

EvaluationSummary evaluate_dataset(EarlyExitViT& model, const Dataset& data, const ExitPolicy& policy) {
  policy.validate();
  if (data.size() == 0) throw std::invalid_argument("empty dataset");
  EvaluationSummary s;
  s.tau = policy.tau;
  s.histogram = ExitHistogram(model.layers());
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto r = infer_early_exit(model, sample_image(data, i), policy);
    s.histogram.add(r.exit_layer);
    correct += r.predicted == data.labels[i] ? 1 : 0;
  }
  s.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
  s.speedup = speedup(s.histogram);
  s.expected = expected_macs(model.mac_profile(), s.histogram);
  return s;
}

std::vector<EvaluationSummary> threshold_sweep(EarlyExitViT& model, const Dataset& data, std::span<const double> taus) {
  if (taus.empty()) throw std::invalid_argument("empty threshold list");
  for (double t : taus) ExitPolicy{t}.validate();
  if (data.size() == 0) throw std::invalid_argument("empty dataset");
  const auto traces = trace_dataset(model, data);
  std::vector<EvaluationSummary> out;
  for (double t : taus) out.push_back(summarize(model, traces, data.labels, t));
  return out;
}

}  // namespace eevit
