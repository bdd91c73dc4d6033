#include "cellscape/diffcore/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace cellscape::ad {

namespace {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}
  template <typename T>
  void put(T v) {
    v = to_little(v);
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void put_string(const std::string& s) {
    put<std::uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  void put_doubles(const std::vector<double>& v) {
    for (double x : v) put(x);
  }
  void put_array(const NamedArray& a) {
    put_string(a.name);
    put<std::uint64_t>(a.shape.size());
    for (std::size_t d : a.shape) put<std::uint64_t>(d);
    if (numel(a.shape) != a.values.size()) throw DimensionMismatch("checkpoint tensor '" + a.name + "'", numel(a.shape), a.values.size());
    put_doubles(a.values);
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}
  template <typename T>
  T get() {
    T v;
    in_.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in_) throw IoError("truncated checkpoint " + path_);
    return to_little(v);
  }
  std::uint64_t get_count(std::uint64_t limit = 1ULL << 40) {
    const auto n = get<std::uint64_t>();
    if (n > limit) throw IoError("corrupt length field in checkpoint " + path_);
    return n;
  }
  std::string get_string() {
    const auto n = get_count(1ULL << 32);
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (!in_) throw IoError("truncated checkpoint " + path_);
    return s;
  }
  std::vector<double> get_doubles(std::uint64_t n) {
    std::vector<double> v(n);
    for (auto& x : v) x = get<double>();
    return v;
  }
  NamedArray get_array() {
    NamedArray a;
    a.name = get_string();
    const auto nd = get_count(16);
    for (std::uint64_t i = 0; i < nd; ++i) a.shape.push_back(get_count());
    a.values = get_doubles(numel(a.shape));
    return a;
  }

 private:
  std::istream& in_;
  std::string path_;
};

}  // namespace

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write("CSK1", 4);
  Writer w(out);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put_string(ckpt.config_json);
  w.put<std::uint64_t>(ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) w.put_array(t);
  w.put<std::uint64_t>(ckpt.buffers.size());
  for (const auto& b : ckpt.buffers) w.put_array(b);
  w.put<std::uint8_t>(ckpt.optimizer ? 1 : 0);
  if (ckpt.optimizer) {
    const auto& o = *ckpt.optimizer;
    w.put<std::uint64_t>(o.step);
    w.put(o.config.learning_rate);
    w.put(o.config.weight_decay);
    w.put(o.config.beta1);
    w.put(o.config.beta2);
    w.put(o.config.eps);
    w.put<std::uint64_t>(o.m.size());
    for (std::size_t k = 0; k < o.m.size(); ++k) {
      w.put<std::uint64_t>(o.m[k].size());
      w.put_doubles(o.m[k]);
      w.put_doubles(o.v[k]);
    }
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "CSK1", 4) != 0) throw IoError("not a CSK1 checkpoint: " + path.string());
  Reader r(in, path.string());
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path.string());
  Checkpoint c;
  c.config_json = r.get_string();
  for (auto n = r.get_count(1 << 20); n > 0; --n) c.tensors.push_back(r.get_array());
  for (auto n = r.get_count(1 << 20); n > 0; --n) c.buffers.push_back(r.get_array());
  if (r.get<std::uint8_t>()) {
    OptimizerState o;
    o.step = r.get<std::uint64_t>();
    o.config.learning_rate = r.get<double>();
    o.config.weight_decay = r.get<double>();
    o.config.beta1 = r.get<double>();
    o.config.beta2 = r.get<double>();
    o.config.eps = r.get<double>();
    for (auto n = r.get_count(1 << 20); n > 0; --n) {
      const auto len = r.get_count();
      o.m.push_back(r.get_doubles(len));
      o.v.push_back(r.get_doubles(len));
    }
    c.optimizer = std::move(o);
  }
  return c;
}

}  // namespace cellscape::ad
