#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <string>

#if defined(__SSE__) || defined(_M_X64)
#include <xmmintrin.h>
#define GAZEDECODE_HAS_MXCSR 1
#endif

#include "gazedecode/errors.hpp"
#include "gazedecode/tensor.hpp"

namespace gazedecode {

template <typename T>
using TensorMap = std::map<std::string, BasicTensor<T>>;

template <typename T>
using Grads = TensorMap<T>;

// Named parameters plus Adam state. Moments are created lazily on the first
// update of each parameter.
template <typename T>
struct ParamSet {
  TensorMap<T> values;
  TensorMap<T> adam_m;
  TensorMap<T> adam_v;
  std::int64_t step = 0;

  BasicTensor<T>& operator[](const std::string& name) { return values.at(name); }
  const BasicTensor<T>& operator[](const std::string& name) const { return values.at(name); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : values) n += t.size();
    return n;
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [name, t] : values) out.values.emplace(name, BasicTensor<U>::cast(t));
    return out;
  }
};

// Flushes subnormal floats to zero for its lifetime. Adam moments of idle
// parameters decay geometrically into the subnormal range, which otherwise
// slows training several-fold on x86.
class ScopedFlushDenormals {
 public:
  ScopedFlushDenormals() {
#ifdef GAZEDECODE_HAS_MXCSR
    saved_ = _mm_getcsr();
    _mm_setcsr(saved_ | 0x8040);  // FTZ | DAZ
#endif
  }
  ~ScopedFlushDenormals() {
#ifdef GAZEDECODE_HAS_MXCSR
    _mm_setcsr(saved_);
#endif
  }
  ScopedFlushDenormals(const ScopedFlushDenormals&) = delete;
  ScopedFlushDenormals& operator=(const ScopedFlushDenormals&) = delete;

 private:
  unsigned saved_ = 0;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update. Parameters without a gradient entry are
// left untouched.
template <typename T>
void adam_step(ParamSet<T>& params, const Grads<T>& grads, const AdamConfig& cfg = {}) {
  for (const auto& [name, g] : grads) {
    auto it = params.values.find(name);
    if (it == params.values.end()) throw DimensionError("gradient for unknown parameter " + name);
    require_shape(g.shape(), it->second.shape(), "gradient of " + name);
  }
  if (params.step < 0) throw ParameterError("negative Adam step counter");
  ++params.step;
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T c1 = static_cast<T>(1.0 - std::pow(cfg.beta1, static_cast<double>(params.step)));
  const T c2 = static_cast<T>(1.0 - std::pow(cfg.beta2, static_cast<double>(params.step)));
  const T lr = static_cast<T>(cfg.lr), eps = static_cast<T>(cfg.eps);
  for (const auto& [name, g] : grads) {
    BasicTensor<T>& p = params.values.at(name);
    auto& m = params.adam_m.try_emplace(name, p.shape()).first->second;
    auto& v = params.adam_v.try_emplace(name, p.shape()).first->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (T{1} - b1) * g[i];
      v[i] = b2 * v[i] + (T{1} - b2) * g[i] * g[i];
      const T m_hat = m[i] / c1;
      const T v_hat = v[i] / c2;
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
    }
  }
}

}  // namespace gazedecode
