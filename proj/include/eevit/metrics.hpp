#pragma once

#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace eevit {

struct MetricsRecord {
  std::string run_id;
  std::string phase;
  int epoch = 0;
  int step = 0;
  std::vector<std::pair<std::string, double>> metrics;
  std::optional<double> timestamp;  // wall-clock seconds; omitted for reproducible streams

  // One JSON object, fields in the order above.
  std::string to_line() const;
};

// Append-only line-delimited metrics stream; writes are serialized.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::filesystem::path& path, bool truncate = true);

  void write(const MetricsRecord& record);

 private:
  std::mutex mu_;
  std::ofstream out_;
};

}  // namespace eevit
