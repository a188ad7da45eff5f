#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "eevit/errors.hpp"
#include "eevit/inference.hpp"
#include "eevit/trainer.hpp"

using namespace eevit;

namespace {

Dataset data(std::size_t per_class) { return normalize(gen_synthetic(3, per_class, {8, 3}, 5), Normalization{}); }

// L=6 on a 4x4 grid, briefly trained so exit confidences spread over (1/3, 1).
EarlyExitViT trained_model(int layers = 6, std::vector<int> exits = {2, 3, 4, 5}) {
  ViTConfig vit;
  vit.image_side = 8;
  vit.patch_side = 2;
  vit.layers = layers;
  vit.hidden = 8;
  vit.heads = 2;
  vit.num_classes = 3;
  ExitConfig ec;
  ec.positions = std::move(exits);
  EarlyExitViT m(vit, resolve_exit_layout(vit, ec), 21);
  TrainConfig cfg;
  cfg.epochs_stage1 = 60;
  cfg.epochs_stage2 = 30;
  cfg.lr_stage1 = 1e-2;
  cfg.lr_stage2 = 1e-2;
  cfg.batch_size = 8;
  const Dataset train = data(8);
  stage1_train(m, train, cfg);
  stage2_train(m, train, cfg);
  return m;
}


Tensor image(const Dataset& d, std::size_t i) {
  std::vector<std::size_t> idx{i};
  return make_batch(d, idx);
}

}  // namespace

TEST_CASE("confidence") {
  std::vector<double> uniform(100, 0.01);
  CHECK(confidence(uniform) == doctest::Approx(0.01));
  std::vector<double> p{0.7, 0.2, 0.1};
  CHECK(confidence(p) == 0.7);
  std::vector<double> hot{0, 0, 1, 0};
  CHECK(confidence(hot) == 1.0);
  std::vector<double> over{0.5, 0.6}, neg{1.2, -0.2}, nan{std::nan(""), 1.0};
  CHECK_THROWS_AS(confidence(over), ValueError);
  CHECK_THROWS_AS(confidence(neg), ValueError);
  CHECK_THROWS_AS(confidence(nan), ValueError);
  CHECK_THROWS_AS(confidence(std::vector<double>{}), ValueError);

  CHECK_NOTHROW(ExitPolicy{0.0}.validate());
  CHECK_NOTHROW(ExitPolicy{1.5}.validate());
  CHECK_THROWS_AS(ExitPolicy{-0.1}.validate(), ConfigError);
  CHECK_THROWS_AS(ExitPolicy{std::numeric_limits<double>::quiet_NaN()}.validate(), ConfigError);
}

TEST_CASE("policy extremes") {
  EarlyExitViT model = trained_model();
  Dataset d = data(4);
  const auto paths = path_costs(model.mac_profile(), model.layers());
  for (std::size_t i = 0; i < d.size(); ++i) {
    Tensor x = image(d, i);
    Tensor plain = model.backbone.forward(x);
    for (double tau : {1.0, 1.5}) {
      InferenceResult r = infer_early_exit(model, x, {tau});
      CHECK(r.exit_layer == 6);
      CHECK(r.predicted == argmax_rows(plain)[0]);
      CHECK(std::equal(r.logits.back().begin(), r.logits.back().end(), plain.data().begin()));
      CHECK(r.logits.size() == 5);
      CHECK(r.macs == paths.back().with_heads);
    }
    InferenceResult first = infer_early_exit(model, x, {0.0});
    CHECK(first.exit_layer == 2);
    CHECK(first.logits.size() == 1);
    CHECK(first.macs == paths.front().with_heads);
  }
}

TEST_CASE("exit layer is monotone in tau") {
  EarlyExitViT model = trained_model();
  Dataset d = data(10);
  std::set<int> seen;
  for (std::size_t i = 0; i < d.size(); ++i) {
    Tensor x = image(d, i);
    int prev = 0;
    for (int k = 0; k <= 20; ++k) {
      const double tau = k / 20.0;
      InferenceResult r = infer_early_exit(model, x, {tau});
      CHECK(r.exit_layer >= prev);
      if (r.exit_layer != 6) CHECK(r.confidence > tau);
      prev = r.exit_layer;
      seen.insert(r.exit_layer);
    }
  }
  // The grid reaches more than the two extremes.
  CHECK(seen.size() > 2);
}

TEST_CASE("cached sweep equals per-tau inference") {
  EarlyExitViT model = trained_model();
  Dataset d = data(8);
  const std::vector<double> taus{0.0, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0, 1.01};
  auto sweep = threshold_sweep(model, d, taus);
  REQUIRE(sweep.size() == taus.size());
  double prev_speedup = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < taus.size(); ++i) {
    EvaluationSummary naive = evaluate_dataset(model, d, {taus[i]});
    CHECK(sweep[i].tau == taus[i]);
    CHECK(sweep[i].accuracy == naive.accuracy);
    CHECK(sweep[i].histogram.counts == naive.histogram.counts);
    CHECK(sweep[i].speedup == naive.speedup);
    CHECK(sweep[i].expected.with_heads == naive.expected.with_heads);
    CHECK(sweep[i].expected.without_heads == naive.expected.without_heads);
    CHECK(sweep[i].histogram.total() == d.size());
    CHECK(sweep[i].speedup <= prev_speedup);
    prev_speedup = sweep[i].speedup;
  }
  CHECK(sweep.front().speedup == 3.0);
  CHECK(sweep.back().speedup == 1.0);
  CHECK(sweep.back().accuracy == final_accuracy(model, d));
  CHECK_THROWS_AS(threshold_sweep(model, d, std::vector<double>{}), std::invalid_argument);
  CHECK_THROWS_AS(evaluate_dataset(model, Dataset{}, {0.5}), std::invalid_argument);
}

TEST_CASE("summaries from traces") {
  EarlyExitViT model = trained_model(12, {3, 6, 9, 11});
  SampleTrace t;
  t.confidences = {0.2, 0.95, 0.99, 0.99};
  t.predictions = {1, 2, 2, 2};
  t.final_prediction = 0;
  t.final_confidence = 0.5;
  std::vector<SampleTrace> traces{t};
  std::vector<int> labels{2};
  EvaluationSummary s = summarize(model, traces, labels, 0.9);
  CHECK(s.histogram.counts[5] == 1);
  CHECK(s.speedup == 2.0);
  CHECK(s.accuracy == 1.0);
  EvaluationSummary full = summarize(model, traces, labels, 1.0);
  CHECK(full.speedup == 1.0);
  CHECK(full.accuracy == 0.0);
}

TEST_CASE("inference is deterministic") {
  EarlyExitViT model = trained_model();
  Dataset d = data(2);
  Tensor x = image(d, 1);
  InferenceResult a = infer_early_exit(model, x, {0.6});
  InferenceResult b = infer_early_exit(model, x, {0.6});
  CHECK(a.exit_layer == b.exit_layer);
  CHECK(a.confidence == b.confidence);
  CHECK(a.logits == b.logits);
  CHECK_THROWS(infer_early_exit(model, make_batch(d, std::vector<std::size_t>{0, 1}), {0.5}));
}
