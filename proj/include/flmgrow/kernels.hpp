#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "flmgrow/tensor.hpp"

// Row kernels shared by the differentiable ops and the plain vector helpers.
// A null `weights` pointer means every coordinate has weight 1 and d_eff is the row length.
namespace flmgrow::kernels {

inline constexpr double kRmsNormEps = 1e-6;
inline constexpr double kLayerNormEps = 1e-5;

template <Real T>
inline T weight_at(const T* weights, std::size_t i) {
  return weights ? weights[i] : T{1};
}

// y = gain ⊙ x̃ / sqrt(sum(x̃²)/d_eff + eps), x̃ = weights ⊙ x. Returns the denominator.
template <Real T>
T rmsnorm_row(std::span<const T> x, std::span<const T> gain, const T* weights, T d_eff, T eps, std::span<T> out) {
  const std::size_t d = x.size();
  T ss{0};
  for (std::size_t i = 0; i < d; ++i) {
    const T xt = weights ? x[i] * weights[i] : x[i];
    out[i] = xt;
    ss += xt * xt;
  }
  const T denom = std::sqrt(ss / d_eff + eps);
  for (std::size_t i = 0; i < d; ++i) out[i] = gain[i] * (out[i] / denom);
  return denom;
}

template <Real T>
void rmsnorm_row_backward(std::span<const T> x, std::span<const T> gain, const T* weights, T d_eff, T denom,
                          std::span<const T> dy, std::span<T> dx, std::span<T> dgain) {
  const std::size_t d = x.size();
  T dot{0};
  for (std::size_t i = 0; i < d; ++i) {
    const T xt = weights ? x[i] * weights[i] : x[i];
    dot += gain[i] * dy[i] * xt;
  }
  const T k = dot / (d_eff * denom * denom * denom);
  for (std::size_t i = 0; i < d; ++i) {
    const T xt = weights ? x[i] * weights[i] : x[i];
    if (!dgain.empty()) dgain[i] += dy[i] * xt / denom;
    const T dxt = gain[i] * dy[i] / denom - xt * k;
    if (!dx.empty()) dx[i] += weight_at(weights, i) * dxt;
  }
}

// Weighted LayerNorm: x̃ = w⊙x, mu = sum(x̃)/d_eff, c = x̃ - w·mu,
// y = gain ⊙ c / sqrt(sum(c²)/d_eff + eps) + w ⊙ bias. Returns the denominator.
template <Real T>
T layernorm_row(std::span<const T> x, std::span<const T> gain, std::span<const T> bias, const T* weights, T d_eff,
                T eps, std::span<T> out) {
  const std::size_t d = x.size();
  T sum{0};
  for (std::size_t i = 0; i < d; ++i) {
    out[i] = weights ? x[i] * weights[i] : x[i];
    sum += out[i];
  }
  const T mu = sum / d_eff;
  T ss{0};
  for (std::size_t i = 0; i < d; ++i) {
    out[i] -= weights ? weights[i] * mu : mu;
    ss += out[i] * out[i];
  }
  const T denom = std::sqrt(ss / d_eff + eps);
  for (std::size_t i = 0; i < d; ++i) {
    out[i] = gain[i] * (out[i] / denom) + (weights ? weights[i] * bias[i] : bias[i]);
  }
  return denom;
}

template <Real T>
void layernorm_row_backward(std::span<const T> x, std::span<const T> gain, const T* weights, T d_eff, T denom,
                            std::span<const T> dy, std::span<T> dx, std::span<T> dgain, std::span<T> dbias) {
  const std::size_t d = x.size();
  std::vector<T> c(d);
  T sum{0};
  for (std::size_t i = 0; i < d; ++i) sum += weights ? x[i] * weights[i] : x[i];
  const T mu = sum / d_eff;
  T dot{0};
  for (std::size_t i = 0; i < d; ++i) {
    const T w = weight_at(weights, i);
    c[i] = (weights ? x[i] * w : x[i]) - (weights ? w * mu : mu);
    dot += gain[i] * dy[i] * c[i];
  }
  const T k = dot / (d_eff * denom * denom * denom);
  T wdc{0};
  for (std::size_t i = 0; i < d; ++i) {
    const T w = weight_at(weights, i);
    if (!dgain.empty()) dgain[i] += dy[i] * (c[i] / denom);
    if (!dbias.empty()) dbias[i] += w * dy[i];
    c[i] = gain[i] * dy[i] / denom - c[i] * k;  // c now holds d(loss)/dc
    wdc += w * c[i];
  }
  if (dx.empty()) return;
  const T dmu = wdc / d_eff;
  for (std::size_t i = 0; i < d; ++i) {
    const T w = weight_at(weights, i);
    dx[i] += w * (c[i] - dmu);
  }
}

// cos/sin table for rotary embedding: entry [pos * half + i] holds angle pos * base^(-2i/head_dim).
template <Real T>
struct RopeTable {
  std::size_t half = 0;
  std::vector<T> cos, sin;

  RopeTable(std::size_t positions, std::size_t head_dim, double base) : half(head_dim / 2) {
    cos.resize(positions * half);
    sin.resize(positions * half);
    for (std::size_t p = 0; p < positions; ++p) {
      for (std::size_t i = 0; i < half; ++i) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
        const double angle = static_cast<double>(p) * freq;
        cos[p * half + i] = static_cast<T>(std::cos(angle));
        sin[p * half + i] = static_cast<T>(std::sin(angle));
      }
    }
  }

  // Rotates channel pairs (2i, 2i+1) of v in place; inverse rotates by the negated angle.
  void rotate(std::span<T> v, std::size_t pos, bool inverse = false) const {
    for (std::size_t i = 0; i < half; ++i) {
      const T c = cos[pos * half + i];
      const T s = inverse ? -sin[pos * half + i] : sin[pos * half + i];
      const T a = v[2 * i], b = v[2 * i + 1];
      v[2 * i] = a * c - b * s;
      v[2 * i + 1] = a * s + b * c;
    }
  }
};

template <Real T>
inline T silu(T x) {
  return x / (T{1} + std::exp(-x));
}

}  // namespace flmgrow::kernels
