#pragma once

// Symmetric uniform quantizers on the integer grid {-(2^{q-1}-1), ..., 2^{q-1}-1}.
// Per-channel scales run along rows (axis 0) or columns (axis 1) of a matrix;
// rank-4 kernels are handled through their output-channel unfolding.

#include <cstdint>
#include <vector>

#include "ecomp/linalg.hpp"

namespace ecomp {

enum class Granularity { PerTensor, PerChannel };
enum class Rounding { Nearest, Stochastic };
enum class ClipMode { MaxRange, Percentile };

struct QuantRequest {
  int bits = 8;
  Granularity granularity = Granularity::PerTensor;
  int axis = 0;  // channel axis for PerChannel
  ClipMode clip = ClipMode::MaxRange;
  double percentile = 99.9;
  Rounding rounding = Rounding::Nearest;
  std::uint64_t seed = 0;
};

struct QuantSpec {
  int bits = 8;
  Granularity granularity = Granularity::PerTensor;
  int axis = 0;
  ClipMode clip = ClipMode::MaxRange;
  double percentile = 99.9;
  Rounding rounding = Rounding::Nearest;
  std::uint64_t seed = 0;
  Vector scales;  // one entry, or one per channel

  int max_code() const { return (1 << (bits - 1)) - 1; }
  double scale_at(std::size_t i, std::size_t j) const;
};

struct QuantizedFactor {
  QuantSpec spec;
  std::size_t rows = 0, cols = 0;
  std::vector<std::int32_t> codes;  // row-major
};

// Type-7 (linear interpolation) percentile of the values, p in (0, 100].
double percentile(std::vector<double> values, double p);

QuantSpec calibrate_scale(const Matrix& t, const QuantRequest& req);

QuantizedFactor quantize(const Matrix& t, const QuantSpec& spec);
Matrix dequantize(const QuantizedFactor& f);
// dequantize(quantize(t, spec))
Matrix fake_quantize(const Matrix& t, const QuantSpec& spec);

struct SteGradient {
  Matrix d_t;             // upstream masked to in-range entries
  Vector d_log_scale;     // one per scale
};

// Straight-through gradient of fake_quantize. In-range entries pass the
// upstream gradient; the scale gradient is s·Σ g·(round(T/s) − T/s) over
// in-range entries only, expressed with respect to log s.
SteGradient ste_gradient(const Matrix& upstream, const Matrix& t, const QuantSpec& spec);

// Straight-line surrogate with frozen rounding decisions at (t0, spec0):
// in range, T + s·(c0 − T0/s0); saturated, s0·c0. Its exact derivative is the
// STE gradient at the expansion point.
Matrix ste_surrogate(const Matrix& t, const Vector& log_scales, const Matrix& t0,
                     const QuantSpec& spec0);

// Per-channel (axis of spec, or a single entry for PerTensor) mean of
// T − dequantize(quantize(T)) over a calibration batch of tensors.
Vector bias_correction(const std::vector<Matrix>& batch, const QuantSpec& spec);

// Tensor4 helpers through the output-channel unfolding.
QuantSpec calibrate_scale(const Tensor4& t, const QuantRequest& req);
Tensor4 fake_quantize(const Tensor4& t, const QuantSpec& spec);

}  // namespace ecomp
