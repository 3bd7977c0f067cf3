#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "gtr/common.hpp"
#include "gtr/tensor.hpp"

namespace gtr {

/// Xavier/Glorot uniform initialization over +-sqrt(6/(fan_in+fan_out)) for a
/// 2-D shape, deterministic per seed.
template <typename Real>
Tensor<Real> xavier_init(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  if (fan_in == 0 || fan_out == 0) {
    throw ConfigError(str_cat("xavier_init: zero fan (", fan_in, ",", fan_out,
                              ")"));
  }
  const double bound =
      std::sqrt(6.0 / (static_cast<double>(fan_in) + static_cast<double>(fan_out)));
  std::vector<Real> values(fan_in * fan_out);
  for (Real& v : values) {
    v = static_cast<Real>(rng.uniform(-bound, bound));
  }
  return Tensor<Real>::matrix(fan_in, fan_out, std::move(values));
}

// ---------------------------------------------------------------------------
// ParameterStore: named trainable tensors plus their Adam moment buffers.
// Iteration order is by name (std::map), which keeps update sequences and
// checkpoint bytes deterministic.
// ---------------------------------------------------------------------------

template <typename Real>
class ParameterStore {
 public:
  struct Param {
    Tensor<Real> tensor;
    std::vector<Real> adam_m;
    std::vector<Real> adam_v;
  };

  Tensor<Real> add(const std::string& name, Tensor<Real> t) {
    if (params_.count(name)) {
      throw ConfigError(str_cat("parameter '", name, "' already registered"));
    }
    t.set_requires_grad(true);
    t.set_name(name);
    Param p;
    p.tensor = t;
    p.adam_m.assign(t.size(), Real(0));
    p.adam_v.assign(t.size(), Real(0));
    params_.emplace(name, std::move(p));
    return t;
  }

  bool contains(const std::string& name) const { return params_.count(name); }

  Tensor<Real> get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) {
      throw ConfigError(str_cat("unknown parameter '", name, "'"));
    }
    return it->second.tensor;
  }

  std::map<std::string, Param>& all() { return params_; }
  const std::map<std::string, Param>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t total_values() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.tensor.zero_grad();
  }

  std::uint64_t adam_step_count() const { return adam_steps_; }
  void set_adam_step_count(std::uint64_t v) { adam_steps_ = v; }
  void bump_adam_step() { ++adam_steps_; }

  void reset_adam() {
    adam_steps_ = 0;
    for (auto& [_, p] : params_) {
      std::fill(p.adam_m.begin(), p.adam_m.end(), Real(0));
      std::fill(p.adam_v.begin(), p.adam_v.end(), Real(0));
    }
  }

 private:
  std::map<std::string, Param> params_;
  std::uint64_t adam_steps_ = 0;
};

struct BackwardReport {
  std::vector<std::string> unreachable;  // parameters the loss does not touch
};

/// Reverse-mode pass plus parameter bookkeeping: gradients of parameters not
/// reachable from the loss are zero-filled and reported; non-finite parameter
/// gradients raise a NumericError naming the parameter.
template <typename Real>
BackwardReport backward(const Tensor<Real>& loss, ParameterStore<Real>& store) {
  const std::uint64_t epoch = backward(loss);
  BackwardReport report;
  for (auto& [name, p] : store.all()) {
    if (p.tensor.node()->visit_epoch != epoch) {
      p.tensor.zero_grad();
      (void)p.tensor.grad();  // materialize zeros
      report.unreachable.push_back(name);
      continue;
    }
    for (Real g : p.tensor.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError(str_cat("non-finite gradient in parameter '", name,
                                   "'"));
      }
    }
  }
  return report;
}

/// Adam over a subset of parameters: `filter` returns true for names to
/// update. An empty filter updates everything.
template <typename Real>
void adam_step_subset(ParameterStore<Real>& store, double lr, double beta1,
                      double beta2, double eps, std::uint64_t step,
                      const std::function<bool(const std::string&)>& filter) {
  if (step == 0) throw ConfigError("adam_step: step is 1-based");
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (auto& [name, p] : store.all()) {
    if (filter && !filter(name)) continue;
    if (!p.tensor.has_grad()) continue;
    auto& value = p.tensor.value();
    const auto& grad = p.tensor.grad();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      const double m = beta1 * static_cast<double>(p.adam_m[i]) +
                       (1.0 - beta1) * g;
      const double v = beta2 * static_cast<double>(p.adam_v[i]) +
                       (1.0 - beta2) * g * g;
      p.adam_m[i] = static_cast<Real>(m);
      p.adam_v[i] = static_cast<Real>(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      value[i] = static_cast<Real>(static_cast<double>(value[i]) -
                                   lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

/// One bias-corrected Adam update over every parameter in the store, in name
/// order. `step` is 1-based. Gradients are left untouched; call
/// store.zero_grad() before the next accumulation.
template <typename Real>
void adam_step(ParameterStore<Real>& store, double lr, double beta1,
               double beta2, double eps, std::uint64_t step) {
  adam_step_subset(store, lr, beta1, beta2, eps, step, {});
}

// ---------------------------------------------------------------------------
// Checkpoint format (little-endian):
//
//   offset  size  field
//   0       8     magic "GTRCKPT1"
//   8       4     u32 format version (currently 1)
//   12      4     u32 scalar width in bytes (4 = float, 8 = double)
//   16      8     u64 adam step count
//   24      8     u64 seed recorded by the producing command
//   32      8     u64 parameter count
//   then, per parameter, sorted by name:
//   - u32 name length, name bytes (no terminator)
//   - u32 ndims, then u64 dims[ndims]
//   - numel scalars: values
//   - numel scalars: Adam first moments
//   - numel scalars: Adam second moments
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'G', 'T', 'R', 'C',
                                             'K', 'P', 'T', '1'};

namespace detail {

template <typename T>
void write_pod(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in, const char* what) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw DataError(str_cat("checkpoint: truncated while reading ", what));
  }
  return v;
}

template <typename To, typename From>
void read_scalars(std::istream& in, std::vector<To>& dst, std::size_t n,
                  const char* what) {
  std::vector<From> raw(n);
  if (!in.read(reinterpret_cast<char*>(raw.data()),
               static_cast<std::streamsize>(n * sizeof(From)))) {
    throw DataError(str_cat("checkpoint: truncated while reading ", what));
  }
  dst.resize(n);
  for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<To>(raw[i]);
}

}  // namespace detail

template <typename Real>
void save_checkpoint(const ParameterStore<Real>& store,
                     const std::filesystem::path& path, std::uint64_t seed) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw DataError(str_cat("cannot write checkpoint: ", path.string()));
  }
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod<std::uint32_t>(out, 1);
  detail::write_pod<std::uint32_t>(out, sizeof(Real));
  detail::write_pod<std::uint64_t>(out, store.adam_step_count());
  detail::write_pod<std::uint64_t>(out, seed);
  detail::write_pod<std::uint64_t>(out, store.size());
  for (const auto& [name, p] : store.all()) {
    detail::write_pod<std::uint32_t>(out,
                                     static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    const Shape& shape = p.tensor.shape();
    detail::write_pod<std::uint32_t>(out,
                                     static_cast<std::uint32_t>(shape.size()));
    for (std::size_t d : shape) {
      detail::write_pod<std::uint64_t>(out, d);
    }
    auto dump = [&](const std::vector<Real>& v) {
      out.write(reinterpret_cast<const char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(Real)));
    };
    dump(p.tensor.value());
    dump(p.adam_m);
    dump(p.adam_v);
  }
  if (!out) {
    throw DataError(str_cat("failed writing checkpoint: ", path.string()));
  }
}

struct CheckpointInfo {
  std::uint64_t adam_steps = 0;
  std::uint64_t seed = 0;
  std::uint32_t scalar_bytes = 0;
};

/// Loads a checkpoint into an already-registered store. Every parameter in
/// the file must exist in the store with the same shape; shape conflicts are
/// a version error naming both sides. When `apply_moments` is false the Adam
/// state is read but discarded (warm start).
template <typename Real>
CheckpointInfo load_checkpoint(ParameterStore<Real>& store,
                               const std::filesystem::path& path,
                               bool apply_moments = true) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw DataError(str_cat("cannot open checkpoint: ", path.string()));
  }
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw DataError(str_cat("not a checkpoint file: ", path.string()));
  }
  const auto version = detail::read_pod<std::uint32_t>(in, "version");
  if (version != 1) {
    throw ConfigError(str_cat("unsupported checkpoint version ", version,
                              " in ", path.string()));
  }
  CheckpointInfo info;
  info.scalar_bytes = detail::read_pod<std::uint32_t>(in, "scalar width");
  if (info.scalar_bytes != 4 && info.scalar_bytes != 8) {
    throw DataError(str_cat("checkpoint scalar width ", info.scalar_bytes,
                            " is not 4 or 8"));
  }
  info.adam_steps = detail::read_pod<std::uint64_t>(in, "adam steps");
  info.seed = detail::read_pod<std::uint64_t>(in, "seed");
  const auto count = detail::read_pod<std::uint64_t>(in, "parameter count");

  std::size_t seen = 0;
  for (std::uint64_t pi = 0; pi < count; ++pi) {
    const auto name_len = detail::read_pod<std::uint32_t>(in, "name length");
    std::string name(name_len, '\0');
    if (!in.read(name.data(), name_len)) {
      throw DataError("checkpoint: truncated parameter name");
    }
    const auto ndims = detail::read_pod<std::uint32_t>(in, "rank");
    Shape shape(ndims);
    for (auto& d : shape) {
      d = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(in, "dim"));
    }
    const std::size_t numel = shape_numel(shape);
    if (!store.contains(name)) {
      throw ConfigError(str_cat("checkpoint parameter '", name,
                                "' is not part of this model configuration"));
    }
    auto& p = store.all().at(name);
    if (p.tensor.shape() != shape) {
      throw ConfigError(str_cat("checkpoint/config shape mismatch for '", name,
                                "': file ", shape_str(shape), " vs model ",
                                shape_str(p.tensor.shape())));
    }
    std::vector<Real> values, m, v;
    if (info.scalar_bytes == 4) {
      detail::read_scalars<Real, float>(in, values, numel, name.c_str());
      detail::read_scalars<Real, float>(in, m, numel, name.c_str());
      detail::read_scalars<Real, float>(in, v, numel, name.c_str());
    } else {
      detail::read_scalars<Real, double>(in, values, numel, name.c_str());
      detail::read_scalars<Real, double>(in, m, numel, name.c_str());
      detail::read_scalars<Real, double>(in, v, numel, name.c_str());
    }
    p.tensor.value() = std::move(values);
    if (apply_moments) {
      p.adam_m = std::move(m);
      p.adam_v = std::move(v);
    }
    ++seen;
  }
  if (seen != store.size()) {
    throw ConfigError(str_cat("checkpoint holds ", seen, " parameters, model ",
                              "expects ", store.size()));
  }
  if (apply_moments) {
    store.set_adam_step_count(info.adam_steps);
  }
  return info;
}

}  // namespace gtr
