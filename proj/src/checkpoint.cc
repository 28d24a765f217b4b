#include "vlmkit/checkpoint.h"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace vlmkit {

namespace {

constexpr char kMagic[8] = {'V', 'L', 'M', 'K', 'C', 'K', 'P', 'T'};

template <typename T>
void put_le(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.append(reinterpret_cast<const char*>(buf), sizeof(T));
}

void put_str(std::string& out, const std::string& s) {
  put_le<uint32_t>(out, static_cast<uint32_t>(s.size()));
  out += s;
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, buf, sizeof(T));
    return value;
  }

  std::string str() {
    const auto n = get<uint32_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("checkpoint: truncated data");
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::put(const std::string& name, const Tensor& t) {
  tensors[name] = CheckpointEntry{t.shape(), std::vector<double>(t.data().begin(), t.data().end())};
}

void Checkpoint::load_into(const std::string& name, Tensor& t) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
  if (it->second.shape != t.shape()) {
    throw ShapeError("checkpoint: tensor '" + name + "' has shape " + shape_str(it->second.shape) +
                     ", model expects " + shape_str(t.shape()));
  }
  auto dst = t.mutable_data();
  std::copy(it->second.values.begin(), it->second.values.end(), dst.begin());
}

std::string Checkpoint::serialize() const {
  std::string out(kMagic, sizeof(kMagic));
  put_le<uint32_t>(out, kVersion);
  put_le<uint32_t>(out, static_cast<uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    put_str(out, k);
    put_str(out, v);
  }
  put_le<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, entry] : tensors) {
    put_str(out, name);
    put_le<uint32_t>(out, static_cast<uint32_t>(entry.shape.size()));
    for (auto e : entry.shape) put_le<uint64_t>(out, e);
    for (double v : entry.values) put_le<double>(out, v);
  }
  return out;
}

Checkpoint Checkpoint::deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof(kMagic) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("checkpoint: bad magic");
  }
  std::string body = bytes.substr(sizeof(kMagic));
  Reader in(body);
  const auto version = in.get<uint32_t>();
  if (version != kVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  Checkpoint ck;
  const auto n_meta = in.get<uint32_t>();
  for (uint32_t i = 0; i < n_meta; ++i) {
    std::string k = in.str();
    ck.meta[k] = in.str();
  }
  const auto n_tensors = in.get<uint32_t>();
  for (uint32_t i = 0; i < n_tensors; ++i) {
    std::string name = in.str();
    CheckpointEntry e;
    const auto rank = in.get<uint32_t>();
    for (uint32_t d = 0; d < rank; ++d) e.shape.push_back(static_cast<std::size_t>(in.get<uint64_t>()));
    const std::size_t n = shape_numel(e.shape);
    in.need(n * sizeof(double));
    e.values.resize(n);
    for (auto& v : e.values) v = in.get<double>();
    ck.tensors.emplace(std::move(name), std::move(e));
  }
  if (!in.done()) throw FormatError("checkpoint: trailing bytes");
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  const std::string bytes = serialize();
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("short write to checkpoint " + path.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read checkpoint " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return deserialize(ss.str());
}

}  // namespace vlmkit
