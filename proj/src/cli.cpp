#include "eevit/cli.hpp"

#include <CLI11.hpp>
#include <algorithm>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <numeric>

#include "eevit/analysis.hpp"
#include "eevit/checkpoint.hpp"
#include "eevit/config.hpp"
#include "eevit/cost_model.hpp"
#include "eevit/errors.hpp"
#include "eevit/inference.hpp"
#include "eevit/metrics.hpp"
#include "eevit/trainer.hpp"

namespace eevit {

namespace {

using ordered_json = nlohmann::ordered_json;

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
};

RunConfig resolve_config(const Common& c) {
  RunConfig cfg = c.config_path.empty() ? RunConfig{} : load_config(c.config_path);
  for (const auto& o : c.overrides) {
    const auto [k, v] = split_override(o);
    apply_setting(cfg, k, v);
  }
  cfg.validate();
  return cfg;
}


std::filesystem::path metrics_path(const RunConfig& cfg) { return cfg.output_dir / "metrics.jsonl"; }

ordered_json summary_json(const EvaluationSummary& s) {
  ordered_json j;
  j["tau"] = s.tau;
  j["accuracy"] = s.accuracy;
  j["speedup"] = s.speedup;
  j["expected_macs"] = s.expected.with_heads;
  j["expected_macs_backbone"] = s.expected.without_heads;
  ordered_json hist = ordered_json::object();
  for (int l = 1; l <= s.histogram.layers(); ++l) {
    if (const auto c = s.histogram.counts[static_cast<std::size_t>(l - 1)]; c) hist[std::to_string(l)] = c;
  }
  j["histogram"] = hist;
  return j;
}

MetricsRecord summary_record(const RunConfig& cfg, const std::string& phase, const EvaluationSummary& s) {
  MetricsRecord r;
  r.run_id = cfg.run_id;
  r.phase = phase;
  r.metrics = {{"tau", s.tau},
               {"accuracy", s.accuracy},
               {"speedup", s.speedup},
               {"expected_macs", s.expected.with_heads},
               {"expected_macs_backbone", s.expected.without_heads}};
  return r;
}

int cmd_train(const RunConfig& cfg, int stage, const std::string& checkpoint, std::ostream& out) {
  EarlyExitViT model = build_model(cfg);
  const Dataset data = training_data(cfg);
  std::filesystem::create_directories(cfg.output_dir);
  MetricsWriter metrics(metrics_path(cfg), stage == 1);
  StageOptions opts;
  opts.augmentation = cfg.data.augmentation;
  opts.checkpoint = cfg.output_dir / (stage == 1 ? "stage1.ckpt" : "stage2.ckpt");
  opts.on_epoch = [&](const EpochReport& r) {
    MetricsRecord rec;
    rec.run_id = cfg.run_id;
    rec.phase = "train.stage" + std::to_string(stage);
    rec.epoch = r.epoch;
    rec.step = r.epoch;
    if (stage == 1) {
      rec.metrics = {{"loss", r.loss}, {"accuracy", r.accuracy}};
    } else {
      rec.metrics = {{"loss", r.loss},           {"total", r.parts.total}, {"hete", r.parts.hete},
                     {"homo_lph", r.parts.homo_lph}, {"homo_gah", r.parts.homo_gah}, {"pred", r.parts.pred},
                     {"exit_ce", r.parts.exit_ce}};
    }
    metrics.write(rec);
    out << rec.to_line() << '\n';
  };

  if (stage == 1) {
    stage1_train(model, data, cfg.train, opts);
    save_checkpoint(opts.checkpoint, model.state());
    out << "final-classifier train accuracy " << final_accuracy(model, data) << '\n';
  } else {
    const auto from = checkpoint.empty() ? cfg.output_dir / "stage1.ckpt" : std::filesystem::path(checkpoint);
    load_checkpoint(from, model.state());
    stage2_train(model, data, cfg.train, opts);
    save_checkpoint(opts.checkpoint, model.state());
    const auto acc = exit_accuracies(model, data);
    for (std::size_t i = 0; i < acc.size(); ++i) {
      out << "exit " << model.branches[i].position() << " (" << to_string(model.branches[i].kind())
          << ") train accuracy " << acc[i] << '\n';
    }
  }
  out << "checkpoint " << opts.checkpoint.string() << '\n';
  return kExitOk;
}

void load_trained(EarlyExitViT& model, const RunConfig& cfg, const std::string& checkpoint) {
  load_checkpoint(checkpoint.empty() ? cfg.output_dir / "stage2.ckpt" : std::filesystem::path(checkpoint),
                  model.state());
}

int cmd_eval(const RunConfig& cfg, const std::string& checkpoint, const std::string& data_path, std::ostream& out) {
  EarlyExitViT model = build_model(cfg);
  load_trained(model, cfg, checkpoint);
  const Dataset data = evaluation_data(cfg, data_path);
  const auto s = evaluate_dataset(model, data, cfg.policy);
  MetricsWriter(metrics_path(cfg), false).write(summary_record(cfg, "eval", s));
  out << summary_json(s).dump() << '\n';
  return kExitOk;
}

int cmd_sweep(const RunConfig& cfg, const std::vector<double>& taus, const std::string& checkpoint,
              const std::string& data_path, std::ostream& out) {
  EarlyExitViT model = build_model(cfg);
  load_trained(model, cfg, checkpoint);
  const Dataset data = evaluation_data(cfg, data_path);
  const auto summaries = threshold_sweep(model, data, taus);
  std::filesystem::create_directories(cfg.output_dir);
  std::ofstream csv(cfg.output_dir / "sweep.csv");
  std::ofstream jsonl(cfg.output_dir / "sweep.jsonl");
  if (!csv || !jsonl) throw std::runtime_error("cannot write sweep outputs under " + cfg.output_dir.string());
  csv << std::setprecision(17) << "tau,accuracy,speedup,expected_macs\n";
  MetricsWriter metrics(metrics_path(cfg), false);
  for (const auto& s : summaries) {
    csv << s.tau << ',' << s.accuracy << ',' << s.speedup << ',' << s.expected.with_heads << '\n';
    jsonl << summary_json(s).dump() << '\n';
    metrics.write(summary_record(cfg, "sweep", s));
    out << summary_json(s).dump() << '\n';
  }
  return kExitOk;
}

int cmd_macs(const RunConfig& cfg, std::ostream& out) {
  const ExitLayout layout = resolve_exit_layout(cfg.model, cfg.exits);
  const MacProfile p =
      model_macs(cfg.model, layout.placement, layout.kernels, layout.windows, layout.expansion);
  const auto paths = path_costs(p, cfg.model.layers);

  ordered_json j;
  j["backbone_macs"] = p.backbone_total();
  j["total_macs_with_heads"] = p.total();
  j["patch_embedding"] = p.patch_embedding;
  j["blocks"] = p.blocks;
  j["final_classifier"] = p.final_classifier;
  ordered_json exits = ordered_json::array();
  for (std::size_t i = 0; i < p.exit_positions.size(); ++i) {
    exits.push_back({{"layer", p.exit_positions[i]},
                     {"kind", to_string(layout.placement.kinds[i])},
                     {"head", p.exit_heads[i]},
                     {"classifier", p.exit_classifiers[i]}});
  }
  j["exits"] = exits;
  ordered_json pj = ordered_json::array();
  for (const auto& pc : paths) {
    pj.push_back({{"layer", pc.layer}, {"with_heads", pc.with_heads}, {"without_heads", pc.without_heads}});
  }
  j["paths"] = pj;

  out << std::fixed << std::setprecision(3);
  out << "backbone MACs        " << p.backbone_total() << " (" << static_cast<double>(p.backbone_total()) / 1e9
      << " G)\n";
  out << "with exit heads      " << p.total() << " (" << static_cast<double>(p.total()) / 1e9 << " G)\n";
  out << "patch embedding      " << p.patch_embedding << '\n';
  out << "per block            " << (p.blocks.empty() ? 0 : p.blocks.front()) << '\n';
  out << "final classifier     " << p.final_classifier << '\n';
  for (std::size_t i = 0; i < p.exit_positions.size(); ++i) {
    out << "exit @" << p.exit_positions[i] << " " << to_string(layout.placement.kinds[i]) << "  head "
        << p.exit_heads[i] << "  classifier " << p.exit_classifiers[i] << '\n';
  }
  for (const auto& pc : paths) {
    out << "path to layer " << pc.layer << "  " << pc.with_heads << " (backbone only " << pc.without_heads << ")\n";
  }
  std::filesystem::create_directories(cfg.output_dir);
  std::ofstream f(cfg.output_dir / "macs.json");
  if (!f) throw std::runtime_error("cannot write macs.json under " + cfg.output_dir.string());
  f << j.dump(2) << '\n';
  return kExitOk;
}

Dataset take_prefix(const Dataset& d, std::size_t n) {
  Dataset out = d;
  n = std::min(n, d.size());
  out.labels.resize(n);
  out.pixels.resize(n * d.geometry.pixels());
  return out;
}

int cmd_analyze(const RunConfig& cfg, const std::string& kind, const std::string& checkpoint,
                const std::string& other_checkpoint, std::size_t probe, int layer, std::size_t sample,
                std::ostream& out) {
  EarlyExitViT model = build_model(cfg);
  load_trained(model, cfg, checkpoint);
  const Dataset data = evaluation_data(cfg, "");
  std::filesystem::create_directories(cfg.output_dir);
  if (kind == "cka") {
    EarlyExitViT other = build_model(cfg);
    load_trained(other, cfg, other_checkpoint.empty() ? checkpoint : other_checkpoint);
    const Dataset probe_set = take_prefix(data, probe);
    const auto a = collect_taps(model, probe_set);
    const auto b = collect_taps(other, probe_set);
    const auto h = cka_heatmap(a, b);
    std::ofstream f(cfg.output_dir / "cka.csv");
    if (!f) throw std::runtime_error("cannot write cka.csv");
    f << std::setprecision(17) << "tap";
    for (const auto& t : b) f << ',' << t.name;
    f << '\n';
    for (std::size_t i = 0; i < a.size(); ++i) {
      f << a[i].name;
      for (double v : h[i]) f << ',' << v;
      f << '\n';
    }
    out << "wrote " << (cfg.output_dir / "cka.csv").string() << " (" << a.size() << " x " << b.size() << ")\n";
  } else if (kind == "attention") {
    if (sample >= data.size()) throw std::invalid_argument("sample index out of range");
    const std::size_t idx[1] = {sample};
    const auto map = attention_map(model.backbone, make_batch(data, idx), layer);
    const auto path = cfg.output_dir / ("attention_layer" + std::to_string(layer) + ".csv");
    write_attention_csv(path, map);
    out << "wrote " << path.string() << " (cls self-weight " << map.cls_self << ")\n";
  } else {
    throw std::invalid_argument("analyze --kind must be cka or attention");
  }
  return kExitOk;
}

int cmd_gen_data(const RunConfig& cfg, const std::string& path, bool eval_split, std::ostream& out) {
  const auto raw = synthetic_split(cfg, eval_split);
  write_raw_images(path, raw);
  out << "wrote " << raw.size() << " records to " << path << '\n';
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Early-exit vision transformer laboratory"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "config file (section.key = value lines)");
    sub->add_option("-s,--set", common.overrides, "override, key=value (repeatable)");
  };

  int stage = 1;
  std::string checkpoint, other_checkpoint, data_path, out_path, kind = "cka";
  std::optional<double> tau;
  std::vector<double> taus;
  std::size_t probe = 64, sample = 0;
  int layer = 1;
  bool eval_split = false;

  auto* train = app.add_subcommand("train", "run training stage 1 or 2");
  add_common(train);
  train->add_option("--stage", stage, "1: backbone, 2: exits with frozen backbone")->check(CLI::IsMember({1, 2}));
  train->add_option("--checkpoint", checkpoint, "stage 2 input (default <output_dir>/stage1.ckpt)");

  auto* eval = app.add_subcommand("eval", "early-exit evaluation at one threshold");
  add_common(eval);
  eval->add_option("--tau", tau, "confidence threshold");
  eval->add_option("--checkpoint", checkpoint, "default <output_dir>/stage2.ckpt");
  eval->add_option("--data", data_path, "raw dataset file (default: configured evaluation data)");

  auto* sweep = app.add_subcommand("sweep", "evaluate a list of thresholds");
  add_common(sweep);
  sweep->add_option("--taus", taus, "thresholds")->delimiter(',')->required();
  sweep->add_option("--checkpoint", checkpoint, "default <output_dir>/stage2.ckpt");
  sweep->add_option("--data", data_path, "raw dataset file");

  auto* macs = app.add_subcommand("macs", "static multiply-accumulate report");
  add_common(macs);

  auto* analyze = app.add_subcommand("analyze", "CKA heatmap or CLS attention export");
  add_common(analyze);
  analyze->add_option("--kind", kind, "cka or attention")->check(CLI::IsMember({"cka", "attention"}));
  analyze->add_option("--checkpoint", checkpoint, "model A (default <output_dir>/stage2.ckpt)");
  analyze->add_option("--other", other_checkpoint, "model B for cka (default: model A)");
  analyze->add_option("--probe", probe, "probe samples for cka");
  analyze->add_option("--layer", layer, "attention layer, 1..L");
  analyze->add_option("--sample", sample, "evaluation sample index for attention");

  auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset as raw records");
  add_common(gen);
  gen->add_option("--out", out_path, "output file")->required();
  gen->add_flag("--eval", eval_split, "write the evaluation split instead of the training split");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  }

  try {
    RunConfig cfg = resolve_config(common);
    if (*train) return cmd_train(cfg, stage, checkpoint, out);
    if (*eval) {
      if (tau) {
        cfg.policy.tau = *tau;
        cfg.policy.validate();
      }
      return cmd_eval(cfg, checkpoint, data_path, out);
    }
    if (*sweep) return cmd_sweep(cfg, taus, checkpoint, data_path, out);
    if (*macs) return cmd_macs(cfg, out);
    if (*analyze) return cmd_analyze(cfg, kind, checkpoint, other_checkpoint, probe, layer, sample, out);
    if (*gen) return cmd_gen_data(cfg, out_path, eval_split, out);
  } catch (const std::invalid_argument& e) {
    // ConfigError, ValueError and ShapeError all land here.
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::out_of_range& e) {
    err << "error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitValidation;
}

}  // namespace eevit
