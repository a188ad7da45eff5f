#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "eevit/data.hpp"
#include "eevit/inference.hpp"
#include "eevit/model.hpp"
#include "eevit/trainer.hpp"
#include "eevit/vit.hpp"

namespace eevit {

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "raw"
  std::filesystem::path path;        // raw: training records
  std::filesystem::path eval_path;   // raw: evaluation records; empty reuses `path`
  std::size_t per_class = 50;        // synthetic
  std::size_t eval_per_class = 20;   // synthetic, held out from the same draw
  double noise = 0.05;               // synthetic
  Normalization normalization;
  Augmentation augmentation;
};

// Everything a CLI job needs. Keys are `section.key = value`, one per line;
// `#` starts a comment. Lists are comma-separated.
struct RunConfig {
  ViTConfig model;
  ExitConfig exits;
  TrainConfig train;
  ExitPolicy policy;
  DataConfig data;
  std::filesystem::path output_dir = "runs/default";
  std::uint64_t seed = 7;
  std::string run_id = "default";

  // Cross-section consistency; throws ConfigError.
  void validate() const;
  ImageGeometry geometry() const { return {model.image_side, model.channels}; }
};

// Applies one `key = value` assignment. Throws ConfigError on an unknown key
// or a malformed value.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);

// Parses text in the format above on top of `base`. Duplicate keys are an error.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path);

// `key=value` override as given on the command line.
std::pair<std::string, std::string> split_override(const std::string& assignment);

// Every documented key with its current value, in file order.
std::string dump_config(const RunConfig& cfg);

// Seeds derived from run.seed: the model uses it directly, the synthetic
// data an offset so the two streams never coincide.
std::uint64_t model_seed(const RunConfig& cfg);
std::uint64_t data_seed(const RunConfig& cfg);

// Train or held-out half of one synthetic draw.
RawDataset synthetic_split(const RunConfig& cfg, bool eval_split);
Dataset training_data(const RunConfig& cfg);
// `override_path`, when non-empty, replaces the configured evaluation data.
Dataset evaluation_data(const RunConfig& cfg, const std::filesystem::path& override_path = {});
EarlyExitViT build_model(const RunConfig& cfg);

}  // namespace eevit
