#include "eevit/trainer.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

#include "eevit/checkpoint.hpp"
#include "eevit/errors.hpp"

namespace eevit {

namespace {

std::vector<std::vector<std::size_t>> make_batches(std::size_t n, std::size_t batch_size, Rng* rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (rng) std::shuffle(order.begin(), order.end(), *rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
  }
  return out;
}

std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const auto pred = argmax_rows(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
  return correct;
}

std::vector<std::vector<double>> snapshot(const std::vector<Parameter>& params) {
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.value.data().begin(), p.value.data().end());
  return out;
}

// Ordinal of the last exit of each kind, used by prediction distillation.
std::pair<std::size_t, std::size_t> pred_exits(std::size_t count) {
  if (count < 2) throw std::invalid_argument("prediction distillation needs at least two exits (M/2 and M)");
  return {count / 2 - 1, count - 1};
}

}  // namespace

void TrainConfig::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("train.alpha and train.beta must be >= 0");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("train.gamma must lie in [0, 1]");
  if (!(temperature > 0.0)) throw ConfigError("train.temperature must be > 0");
  if (!(lr_stage1 >= 0.0) || !(lr_stage2 >= 0.0)) throw ConfigError("learning rates must be >= 0");
  if (epochs_stage1 < 0 || epochs_stage2 < 0) throw ConfigError("epoch counts must be >= 0");
  if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
}

FreezeMask FreezeMask::stage2(const EarlyExitViT& model) {
  FreezeMask mask;
  for (const auto& p : model.backbone_parameters()) mask.trainable[p.name] = false;
  for (const auto& p : model.exit_parameters()) mask.trainable[p.name] = true;
  return mask;
}

std::vector<Parameter> FreezeMask::select(const std::vector<Parameter>& params) const {
  std::vector<Parameter> out;
  for (const auto& p : params) {
    auto it = trainable.find(p.name);
    if (it != trainable.end() && it->second) out.push_back(p);
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t rows = logits.dim(0), classes = logits.dim(1);
  auto v = logits.data();
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto first = v.begin() + static_cast<std::ptrdiff_t>(r * classes);
    out[r] = static_cast<int>(std::max_element(first, first + static_cast<std::ptrdiff_t>(classes)) - first);
  }
  return out;
}

FeatureBundle stage2_forward(EarlyExitViT& model, const Tensor& images, NormMode mode) {
  std::vector<EncoderOutput> taps;
  EncoderOutput last;
  FeatureBundle bundle;
  {
    NoGradGuard no_grad;
    EncoderOutput x = model.backbone.embed(images);
    for (const auto& br : model.branches) {
      x = model.backbone.continue_to(x, br.position());
      taps.push_back(x);
    }
    last = model.backbone.continue_to(x, model.layers());
    bundle.final_tokens = last.patches();
    bundle.final_logits = model.backbone.final_classifier(last);
  }
  for (std::size_t i = 0; i < model.branches.size(); ++i) bundle.exits.push_back(model.branches[i].forward(taps[i], mode));
  return bundle;
}

LossParts stage2_losses(EarlyExitViT& model, const FeatureBundle& bundle, std::span<const int> labels,
                        const TrainConfig& cfg, NormMode mode) {
  LossParts parts;
  std::vector<Tensor> students, teachers;
  for (std::size_t i = 0; i < model.distilled.size(); ++i) {
    students.push_back(bundle.exits.at(model.distilled[i]).feature_map);
    teachers.push_back(model.aligns[i].forward(bundle.final_tokens, mode));
  }
  parts.hete = loss_hete(students, teachers);

  std::vector<Tensor> lph, gah;
  for (std::size_t i = 0; i < model.branches.size(); ++i) {
    if (model.branches[i].kind() == HeadKind::Lph) lph.push_back(bundle.exits[i].feature_map);
    if (model.branches[i].kind() == HeadKind::Gah) gah.push_back(bundle.exits[i].feature_map);
  }
  parts.homo_lph = loss_homo_lph(lph);
  parts.homo_gah = loss_homo_gah(gah);

  const auto [mid, last] = pred_exits(bundle.exits.size());
  parts.pred = loss_pred(bundle.exits[mid].logits, bundle.exits[last].logits, bundle.final_logits, labels, cfg.gamma,
                         cfg.temperature);
  return parts;
}

Tensor exit_cross_entropy(const FeatureBundle& bundle, std::span<const int> labels) {
  Tensor acc;
  for (const auto& e : bundle.exits) {
    Tensor ce = cross_entropy(e.logits, labels);
    acc = acc.defined() ? add(acc, ce) : ce;
  }
  return acc;
}

std::vector<EpochReport> stage1_train(EarlyExitViT& model, const Dataset& data, const TrainConfig& cfg,
                                      const StageOptions& opts) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("empty training set");
  Optimizer opt(model.backbone_parameters(), {cfg.optimizer, cfg.lr_stage1, cfg.momentum});
  Rng rng(cfg.seed * 2 + 1);
  std::vector<EpochReport> reports;
  for (int epoch = 1; epoch <= cfg.epochs_stage1; ++epoch) {
    double loss_sum = 0;
    std::size_t correct = 0;
    for (const auto& idx : make_batches(data.size(), cfg.batch_size, &rng)) {
      Tensor images = make_batch(data, idx, opts.augmentation, &rng);
      const auto labels = batch_labels(data, idx);
      Tensor logits = model.backbone.forward(images);
      Tensor loss = cross_entropy(logits, labels);
      backward(loss);
      opt.step();
      loss_sum += loss.item() * static_cast<double>(idx.size());
      correct += count_correct(logits, labels);
    }
    EpochReport r;
    r.stage = 1;
    r.epoch = epoch;
    r.loss = loss_sum / static_cast<double>(data.size());
    r.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    if (!opts.checkpoint.empty()) save_checkpoint(opts.checkpoint, model.state());
    if (opts.on_epoch) opts.on_epoch(r);
    reports.push_back(r);
  }
  return reports;
}

std::vector<EpochReport> stage2_train(EarlyExitViT& model, const Dataset& data, const TrainConfig& cfg,
                                      const StageOptions& opts) {
  cfg.validate();
  if (data.size() == 0) throw std::invalid_argument("empty training set");
  FreezeMask mask = FreezeMask::stage2(model);
  std::vector<Parameter> trainable = mask.select(model.exit_parameters());
  if (!cfg.distillation) {
    std::erase_if(trainable, [](const Parameter& p) { return p.name.starts_with("align."); });
  }
  const auto frozen = model.backbone_parameters();
  for (const auto& p : frozen) {
    if (mask.trainable.at(p.name)) throw std::logic_error("backbone parameter '" + p.name + "' is not frozen");
  }
  const auto before = snapshot(frozen);

  Optimizer opt(trainable, {cfg.optimizer, cfg.lr_stage2, cfg.momentum});
  Rng rng(cfg.seed * 2 + 2);
  std::vector<EpochReport> reports;
  for (int epoch = 1; epoch <= cfg.epochs_stage2; ++epoch) {
    LossValues sums;
    for (const auto& idx : make_batches(data.size(), cfg.batch_size, &rng)) {
      Tensor images = make_batch(data, idx, opts.augmentation, &rng);
      const auto labels = batch_labels(data, idx);
      FeatureBundle bundle = stage2_forward(model, images, NormMode::Train);
      Tensor ce = exit_cross_entropy(bundle, labels);
      Tensor objective = ce;
      const double w = static_cast<double>(idx.size());
      if (cfg.distillation) {
        LossParts parts = stage2_losses(model, bundle, labels, cfg, NormMode::Train);
        Tensor total = total_loss(parts, cfg.alpha, cfg.beta);
        objective = add(total, ce);
        sums.hete += parts.hete.item() * w;
        sums.homo_lph += parts.homo_lph.item() * w;
        sums.homo_gah += parts.homo_gah.item() * w;
        sums.pred += parts.pred.item() * w;
        sums.total += total.item() * w;
      }
      sums.exit_ce += ce.item() * w;
      backward(objective);
      opt.step();
    }
    const double n = static_cast<double>(data.size());
    EpochReport r;
    r.stage = 2;
    r.epoch = epoch;
    r.parts = {sums.hete / n, sums.homo_lph / n, sums.homo_gah / n, sums.pred / n, sums.total / n, sums.exit_ce / n};
    r.loss = r.parts.total + r.parts.exit_ce;
    if (!opts.checkpoint.empty()) save_checkpoint(opts.checkpoint, model.state());
    if (opts.on_epoch) opts.on_epoch(r);
    reports.push_back(r);
  }

  const auto after = snapshot(frozen);
  for (std::size_t i = 0; i < frozen.size(); ++i) {
    if (after[i] != before[i]) throw std::logic_error("frozen parameter '" + frozen[i].name + "' changed in stage 2");
  }
  return reports;
}

LossValues evaluate_stage2_loss(EarlyExitViT& model, const Dataset& data, const TrainConfig& cfg) {
  cfg.validate();
  NoGradGuard no_grad;
  LossValues sums;
  for (const auto& idx : make_batches(data.size(), cfg.batch_size, nullptr)) {
    Tensor images = make_batch(data, idx);
    const auto labels = batch_labels(data, idx);
    FeatureBundle bundle = stage2_forward(model, images, NormMode::Eval);
    LossParts parts = stage2_losses(model, bundle, labels, cfg, NormMode::Eval);
    const double w = static_cast<double>(idx.size());
    sums.hete += parts.hete.item() * w;
    sums.homo_lph += parts.homo_lph.item() * w;
    sums.homo_gah += parts.homo_gah.item() * w;
    sums.pred += parts.pred.item() * w;
    sums.total += total_loss(parts, cfg.alpha, cfg.beta).item() * w;
    sums.exit_ce += exit_cross_entropy(bundle, labels).item() * w;
  }
  const double n = static_cast<double>(data.size());
  return {sums.hete / n, sums.homo_lph / n, sums.homo_gah / n, sums.pred / n, sums.total / n, sums.exit_ce / n};
}

double final_accuracy(const EarlyExitViT& model, const Dataset& data, std::size_t batch_size) {
  NoGradGuard no_grad;
  std::size_t correct = 0;
  for (const auto& idx : make_batches(data.size(), batch_size, nullptr)) {
    correct += count_correct(model.backbone.forward(make_batch(data, idx)), batch_labels(data, idx));
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

std::vector<double> exit_accuracies(EarlyExitViT& model, const Dataset& data, std::size_t batch_size) {
  NoGradGuard no_grad;
  std::vector<std::size_t> correct(model.branches.size(), 0);
  for (const auto& idx : make_batches(data.size(), batch_size, nullptr)) {
    FeatureBundle bundle = stage2_forward(model, make_batch(data, idx), NormMode::Eval);
    const auto labels = batch_labels(data, idx);
    for (std::size_t i = 0; i < bundle.exits.size(); ++i) correct[i] += count_correct(bundle.exits[i].logits, labels);
  }
  std::vector<double> out;
  for (auto c : correct) out.push_back(static_cast<double>(c) / static_cast<double>(data.size()));
  return out;
}

}  // namespace eevit
