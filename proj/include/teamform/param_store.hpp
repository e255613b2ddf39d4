#pragma once

// Named parameter collection, the adaptive optimizer, and the flat binary
// checkpoint format.
//
// Checkpoint layout: magic "TFRM", version u32, parameter count u32, then per
// parameter: name length u32 + name bytes + rank u32 + dims u32 each +
// little-endian 64-bit values. Values are widened to 64-bit on save whatever
// the in-memory precision.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

#include "teamform/tensor.hpp"

namespace teamform {

namespace detail {

inline void put_u32(std::ostream& os, uint32_t v) {
  char b[4] = {char(v & 0xff), char((v >> 8) & 0xff), char((v >> 16) & 0xff),
               char((v >> 24) & 0xff)};
  os.write(b, 4);
}

inline uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

inline void put_f64(std::ostream& os, double v) {
  uint64_t u = std::bit_cast<uint64_t>(v);
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = char((u >> (8 * i)) & 0xff);
  os.write(b, 8);
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  uint64_t u = 0;
  for (int i = 0; i < 8; ++i) u |= uint64_t(b[i]) << (8 * i);
  return std::bit_cast<double>(u);
}

}  // namespace detail

constexpr char kCheckpointMagic[4] = {'T', 'F', 'R', 'M'};
constexpr uint32_t kCheckpointVersion = 1;

template <class Real>
class ParameterStore {
 public:
  struct Slot {
    Tensor<Real> tensor;
    std::vector<Real> m, v;  // optimizer moment buffers, sized on first step
  };

  Tensor<Real>& add(const std::string& name, Tensor<Real> t) {
    auto [it, inserted] = slots_.emplace(name, Slot{std::move(t), {}, {}});
    if (!inserted)
      throw std::invalid_argument("ParameterStore: duplicate parameter '" + name + "'");
    Tensor<Real>& p = it->second.tensor;
    p.requires_grad = true;
    if (!p.grad) p.grad = std::make_shared<std::vector<Real>>(p.data->size(), Real(0));
    return p;
  }

  Tensor<Real>& get(const std::string& name) {
    auto it = slots_.find(name);
    if (it == slots_.end())
      throw std::invalid_argument("ParameterStore: unknown parameter '" + name + "'");
    return it->second.tensor;
  }
  const Tensor<Real>& get(const std::string& name) const {
    return const_cast<ParameterStore*>(this)->get(name);
  }
  bool has(const std::string& name) const { return slots_.count(name) > 0; }

  std::map<std::string, Slot>& slots() { return slots_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }

  size_t size() const { return slots_.size(); }
  long long step_count() const { return step_count_; }
  long long& step_count() { return step_count_; }

  size_t scalar_count() const {
    size_t n = 0;
    for (auto& [k, s] : slots_) n += s.tensor.data->size();
    return n;
  }

  void zero_grads() {
    for (auto& [k, s] : slots_) s.tensor.zero_grad();
  }

  // Deep value copy with gradients disabled; used for target networks.
  ParameterStore clone_detached() const {
    ParameterStore out;
    for (auto& [k, s] : slots_) {
      Tensor<Real> t;
      t.shape = s.tensor.shape;
      t.data = std::make_shared<std::vector<Real>>(*s.tensor.data);
      t.requires_grad = false;
      out.slots_.emplace(k, Slot{std::move(t), {}, {}});
    }
    return out;
  }

  // Copies values from src into this store's existing buffers. After the call
  // every parameter is bit-identical to its source.
  void copy_values_from(const ParameterStore& src) {
    if (src.slots_.size() != slots_.size())
      throw std::invalid_argument("copy_values_from: parameter sets differ");
    for (auto& [k, s] : slots_) {
      auto it = src.slots_.find(k);
      if (it == src.slots_.end() || it->second.tensor.shape != s.tensor.shape)
        throw std::invalid_argument("copy_values_from: mismatch on parameter '" + k + "'");
      *s.tensor.data = *it->second.tensor.data;
    }
  }

  bool values_equal(const ParameterStore& other) const {
    if (other.slots_.size() != slots_.size()) return false;
    for (auto& [k, s] : slots_) {
      auto it = other.slots_.find(k);
      if (it == other.slots_.end() || *it->second.tensor.data != *s.tensor.data) return false;
    }
    return true;
  }

 private:
  std::map<std::string, Slot> slots_;  // ordered: deterministic iteration
  long long step_count_ = 0;
};

// One adaptive first-order update over every parameter with decay constants
// (beta1, beta2), then increments the step counter and clears gradients.
template <class Real>
void optimizer_step(ParameterStore<Real>& store, double learning_rate, double beta1 = 0.9,
                    double beta2 = 0.999, double eps = 1e-8) {
  const long long t = store.step_count() + 1;
  const double bc1 = 1.0 - std::pow(beta1, double(t));
  const double bc2 = 1.0 - std::pow(beta2, double(t));
  for (auto& [name, slot] : store.slots()) {
    Tensor<Real>& p = slot.tensor;
    if (!p.grad) continue;
    const size_t n = p.data->size();
    if (slot.m.empty()) {
      slot.m.assign(n, Real(0));
      slot.v.assign(n, Real(0));
    }
    for (size_t i = 0; i < n; ++i) {
      const double g = double((*p.grad)[i]);
      if (!std::isfinite(g))
        throw std::runtime_error("optimizer_step: non-finite gradient in parameter '" +
                                 name + "'");
      slot.m[i] = Real(beta1 * double(slot.m[i]) + (1.0 - beta1) * g);
      slot.v[i] = Real(beta2 * double(slot.v[i]) + (1.0 - beta2) * g * g);
      const double mhat = double(slot.m[i]) / bc1;
      const double vhat = double(slot.v[i]) / bc2;
      (*p.data)[i] = Real(double((*p.data)[i]) - learning_rate * mhat / (std::sqrt(vhat) + eps));
    }
    p.zero_grad();
  }
  store.step_count() = t;
}

struct CheckpointRecord {
  std::string name;
  std::vector<int> dims;
  std::vector<double> values;
};

template <class Real>
void save_checkpoint(const std::string& path, const ParameterStore<Real>& store) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("save_checkpoint: cannot open '" + path + "'");
  os.write(kCheckpointMagic, 4);
  detail::put_u32(os, kCheckpointVersion);
  detail::put_u32(os, uint32_t(store.size()));
  for (auto& [name, slot] : store.slots()) {
    detail::put_u32(os, uint32_t(name.size()));
    os.write(name.data(), std::streamsize(name.size()));
    detail::put_u32(os, uint32_t(slot.tensor.shape.size()));
    for (int d : slot.tensor.shape) detail::put_u32(os, uint32_t(d));
    for (Real v : *slot.tensor.data) detail::put_f64(os, double(v));
  }
  if (!os) throw std::runtime_error("save_checkpoint: write failed for '" + path + "'");
}

inline std::vector<CheckpointRecord> read_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("read_checkpoint: cannot open '" + path + "'");
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw std::runtime_error("read_checkpoint: bad magic in '" + path + "'");
  uint32_t version = detail::get_u32(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("read_checkpoint: unsupported version " + std::to_string(version));
  uint32_t count = detail::get_u32(is);
  std::vector<CheckpointRecord> records(count);
  for (auto& rec : records) {
    uint32_t len = detail::get_u32(is);
    rec.name.resize(len);
    is.read(rec.name.data(), len);
    uint32_t rank = detail::get_u32(is);
    rec.dims.resize(rank);
    size_t n = 1;
    for (auto& d : rec.dims) {
      d = int(detail::get_u32(is));
      n *= size_t(d);
    }
    rec.values.resize(n);
    for (auto& v : rec.values) v = detail::get_f64(is);
  }
  return records;
}

// Loads checkpoint values into an already-constructed store; names and shapes
// must match exactly.
template <class Real>
void load_checkpoint(const std::string& path, ParameterStore<Real>& store) {
  auto records = read_checkpoint(path);
  if (records.size() != store.size())
    throw std::runtime_error("load_checkpoint: parameter count mismatch in '" + path + "'");
  for (auto& rec : records) {
    Tensor<Real>& p = store.get(rec.name);
    if (p.shape != rec.dims)
      throw std::runtime_error("load_checkpoint: shape mismatch for '" + rec.name + "'");
    for (size_t i = 0; i < rec.values.size(); ++i) (*p.data)[i] = Real(rec.values[i]);
  }
}

}  // namespace teamform
