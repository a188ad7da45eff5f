#include "eevit/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

#include "eevit/errors.hpp"

namespace eevit {

namespace {

constexpr char kMagic[5] = {'E', 'E', 'V', 'I', 'T'};

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_f64(std::vector<std::uint8_t>& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw FormatError("checkpoint truncated at byte " + std::to_string(pos_));
  }
  std::uint8_t u8() {
    need(1);
    return bytes_[pos_++];
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const std::vector<Parameter>& tensors) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  out.push_back(kCheckpointVersion);
  put_u64(out, tensors.size());
  for (const auto& p : tensors) {
    put_u64(out, p.name.size());
    out.insert(out.end(), p.name.begin(), p.name.end());
    put_u64(out, p.value.rank());
    for (auto e : p.value.shape()) put_u64(out, e);
    for (double v : p.value.data()) put_f64(out, v);
  }
  return out;
}

std::vector<NamedArray> decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) throw FormatError("not a checkpoint (bad magic)");
  const auto version = r.u8();
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t count = r.u64();
  std::vector<NamedArray> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    NamedArray a;
    const std::uint64_t len = r.u64();
    a.name = r.str(len);
    const std::uint64_t rank = r.u64();
    if (rank > r.remaining() / 8) throw FormatError("checkpoint rank field corrupt for '" + a.name + "'");
    std::uint64_t total = 1;
    for (std::uint64_t d = 0; d < rank; ++d) {
      a.shape.push_back(r.u64());
      total *= a.shape.back();
    }
    if (total > r.remaining() / 8) throw FormatError("checkpoint truncated in '" + a.name + "'");
    a.values.resize(total);
    for (auto& v : a.values) v = r.f64();
    out.push_back(std::move(a));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint entries");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const std::vector<Parameter>& tensors) {
  const auto bytes = encode_checkpoint(tensors);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void load_into(const std::vector<NamedArray>& arrays, const std::vector<Parameter>& targets) {
  std::unordered_map<std::string, const NamedArray*> by_name;
  for (const auto& a : arrays) by_name[a.name] = &a;
  if (by_name.size() != targets.size()) {
    throw FormatError("checkpoint holds " + std::to_string(by_name.size()) + " tensors, model expects " +
                      std::to_string(targets.size()));
  }
  for (const auto& t : targets) {
    auto it = by_name.find(t.name);
    if (it == by_name.end()) throw FormatError("checkpoint is missing '" + t.name + "'");
    if (it->second->shape != t.value.shape()) {
      throw FormatError("shape mismatch for '" + t.name + "': file " + shape_str(it->second->shape) + ", model " +
                        shape_str(t.value.shape()));
    }
  }
  for (const auto& t : targets) {
    const auto& src = by_name.at(t.name)->values;
    Tensor dst = t.value;
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
}

void load_checkpoint(const std::filesystem::path& path, const std::vector<Parameter>& targets) {
  load_into(read_checkpoint(path), targets);
}

}  // namespace eevit
