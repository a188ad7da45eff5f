#include "eevit/metrics.hpp"

#include <json.hpp>

namespace eevit {

std::string MetricsRecord::to_line() const {
  nlohmann::ordered_json j;
  j["run_id"] = run_id;
  j["phase"] = phase;
  j["epoch"] = epoch;
  j["step"] = step;
  nlohmann::ordered_json m = nlohmann::ordered_json::object();
  for (const auto& [k, v] : metrics) m[k] = v;
  j["metrics"] = std::move(m);
  if (timestamp) j["timestamp"] = *timestamp;
  return j.dump();
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path, bool truncate) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, truncate ? std::ios::trunc : std::ios::app);
  if (!out_) throw std::runtime_error("cannot open metrics stream " + path.string());
}

void MetricsWriter::write(const MetricsRecord& record) {
  std::lock_guard lock(mu_);
  out_ << record.to_line() << '\n';
  out_.flush();
}

}  // namespace eevit
