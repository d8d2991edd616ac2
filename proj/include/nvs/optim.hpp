#pragma once

// Named parameter storage, Adam, and the binary checkpoint format:
//
//   "NVSC" | version u32 | count u32 |
//   per parameter: name_len u16 | name bytes | rank u8 | dims u32 x rank | f32 x numel
//
// All integers and floats little-endian.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "nvs/autodiff.hpp"

namespace nvs::ad {

template <typename T>
class ParameterStore {
 public:
  Tensor<T>& add(const std::string& name, Shape shape, std::vector<T> init) {
    if (entries_.count(name)) throw std::invalid_argument("parameter store: duplicate name '" + name + "'");
    order_.push_back(name);
    Entry& e = entries_[name];
    e.tensor = Tensor<T>::parameter(std::move(shape), std::move(init));
    return e.tensor;
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  const Tensor<T>& get(const std::string& name) const { return find(name).tensor; }
  Tensor<T>& get(const std::string& name) { return find(name).tensor; }

  /// Insertion order.
  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, e] : entries_) n += e.tensor.size();
    return n;
  }

  long step_count() const { return step_; }

  void clear_grads() {
    for (auto& [_, e] : entries_) e.tensor.clear_grad();
  }

  /// Overwrites values; shapes must match.
  void assign(const std::string& name, const Shape& shape, std::span<const T> values) {
    Tensor<T>& t = get(name);
    if (t.shape() != shape) throw ShapeError("parameter '" + name + "'", t.shape(), shape);
    std::copy(values.begin(), values.end(), t.data_mut().begin());
  }

  /// Deep copy of values only: no gradients, no optimizer state.
  template <typename U = T>
  ParameterStore<U> snapshot() const {
    ParameterStore<U> out;
    for (const auto& name : order_) {
      const auto& t = entries_.at(name).tensor;
      std::vector<U> v(t.data().begin(), t.data().end());
      out.add(name, t.shape(), std::move(v));
    }
    return out;
  }

  struct Moments {
    std::vector<T> m;
    std::vector<T> v;
  };

  Moments& moments(const std::string& name) { return find(name).moments; }
  void advance_step() { ++step_; }

 private:
  struct Entry {
    Tensor<T> tensor;
    Moments moments;
  };

  Entry& find(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("parameter store: unknown parameter '" + name + "'");
    return it->second;
  }
  const Entry& find(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw std::out_of_range("parameter store: unknown parameter '" + name + "'");
    return it->second;
  }

  std::vector<std::string> order_;
  std::map<std::string, Entry> entries_;
  long step_ = 0;
};

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update over every parameter holding a gradient;
/// parameters without one are skipped. Gradients are cleared afterwards.
template <typename T>
void adam_step(ParameterStore<T>& store, const AdamConfig& cfg = {}) {
  bool any = false;
  for (const auto& name : store.names()) any = any || store.get(name).has_grad();
  if (!any) throw std::logic_error("adam_step: no parameter has a gradient; call backward first");
  store.advance_step();
  const double t = double(store.step_count());
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& name : store.names()) {
    Tensor<T>& p = store.get(name);
    if (!p.has_grad()) continue;
    auto& mom = store.moments(name);
    if (mom.m.empty()) {
      mom.m.assign(p.size(), T{});
      mom.v.assign(p.size(), T{});
    }
    const std::vector<T>& g = p.node()->grad;
    auto values = p.data_mut();
    for (std::size_t i = 0; i < values.size(); ++i) {
      mom.m[i] = T(cfg.beta1 * mom.m[i] + (1.0 - cfg.beta1) * g[i]);
      mom.v[i] = T(cfg.beta2 * mom.v[i] + (1.0 - cfg.beta2) * double(g[i]) * g[i]);
      const double mhat = mom.m[i] / c1;
      const double vhat = mom.v[i] / c2;
      values[i] = T(values[i] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps));
    }
  }
  store.clear_grads();
}

/// Kaiming-uniform values for a layer feeding a leaky-relu of the given slope.
template <typename T>
std::vector<T> kaiming_uniform(std::size_t count, std::size_t fan_in, double slope, std::mt19937_64& rng) {
  const double gain = std::sqrt(2.0 / (1.0 + slope * slope));
  const double bound = gain * std::sqrt(3.0 / double(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<T> v(count);
  for (auto& x : v) x = T(dist(rng));
  return v;
}

// ---------------------------------------------------------------------------
// Checkpoints

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(std::uint8_t(v & 0xff));
  out.push_back(std::uint8_t(v >> 8));
}

struct Reader {
  const std::vector<std::uint8_t>& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw CheckpointError("checkpoint: truncated at byte " + std::to_string(pos));
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::uint16_t u16() {
    need(2);
    const std::uint16_t v = std::uint16_t(buf[pos] | (buf[pos + 1] << 8));
    pos += 2;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return buf[pos++];
  }
};
}  // namespace detail

template <typename T>
std::vector<std::uint8_t> serialize_checkpoint(const ParameterStore<T>& store) {
  std::vector<std::uint8_t> out = {'N', 'V', 'S', 'C'};
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, std::uint32_t(store.size()));
  for (const auto& name : store.names()) {
    if (name.size() > 0xffff) throw CheckpointError("checkpoint: parameter name too long");
    const auto& t = store.get(name);
    detail::put_u16(out, std::uint16_t(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    if (t.rank() > 255) throw CheckpointError("checkpoint: rank too large");
    out.push_back(std::uint8_t(t.rank()));
    for (auto d : t.shape()) detail::put_u32(out, std::uint32_t(d));
    for (T v : t.data()) detail::put_u32(out, std::bit_cast<std::uint32_t>(float(v)));
  }
  return out;
}

template <typename T = float>
ParameterStore<T> deserialize_checkpoint(const std::vector<std::uint8_t>& buf) {
  if (buf.size() < 12 || std::memcmp(buf.data(), "NVSC", 4) != 0) throw CheckpointError("checkpoint: bad magic");
  detail::Reader r{buf, 4};
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  ParameterStore<T> store;
  for (std::uint32_t k = 0; k < count; ++k) {
    const std::uint16_t len = r.u16();
    r.need(len);
    std::string name(reinterpret_cast<const char*>(buf.data() + r.pos), len);
    r.pos += len;
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    const std::size_t n = numel(shape);
    r.need(n * 4);
    std::vector<T> values(n);
    for (auto& v : values) v = T(std::bit_cast<float>(r.u32()));
    store.add(name, std::move(shape), std::move(values));
  }
  if (r.pos != buf.size()) throw CheckpointError("checkpoint: trailing bytes");
  return store;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParameterStore<T>& store) {
  const auto bytes = serialize_checkpoint(store);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint: cannot open for writing: " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!f) throw CheckpointError("checkpoint: write failed: " + path.string());
}

template <typename T = float>
ParameterStore<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("checkpoint: cannot open: " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  return deserialize_checkpoint<T>(bytes);
}

}  // namespace nvs::ad
