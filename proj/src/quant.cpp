#include "ecomp/quant.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace ecomp {

namespace {

void check_bits(int bits) {
  if (bits < 2 || bits > 31) throw LinalgError("quant: bits must lie in [2, 31]");
}

std::size_t channel_count(const Matrix& t, Granularity g, int axis) {
  if (g == Granularity::PerTensor) return 1;
  if (axis != 0 && axis != 1) throw LinalgError("quant: channel axis must be 0 or 1");
  return axis == 0 ? t.rows() : t.cols();
}

std::size_t channel_of(std::size_t i, std::size_t j, Granularity g, int axis) {
  if (g == Granularity::PerTensor) return 0;
  return axis == 0 ? i : j;
}

double scale_from(std::vector<double> mags, const QuantRequest& req) {
  if (mags.empty()) return 1.0;
  double range = 0.0;
  if (req.clip == ClipMode::MaxRange) {
    range = *std::max_element(mags.begin(), mags.end());
  } else {
    range = percentile(std::move(mags), req.percentile);
  }
  if (range == 0.0) return 1.0;
  return range / static_cast<double>((1 << (req.bits - 1)) - 1);
}

// Uniform in [0, 1) from the top 53 bits; identical on every platform.
double unit_uniform(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace

double QuantSpec::scale_at(std::size_t i, std::size_t j) const {
  return scales[channel_of(i, j, granularity, axis)];
}

double percentile(std::vector<double> values, double p) {
  if (values.empty()) throw LinalgError("percentile: empty input");
  if (!(p > 0.0 && p <= 100.0)) throw LinalgError("percentile: p must lie in (0, 100]");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * p / 100.0;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

QuantSpec calibrate_scale(const Matrix& t, const QuantRequest& req) {
  check_bits(req.bits);
  if (t.empty()) throw LinalgError("calibrate_scale: empty tensor");
  require_finite(t.data(), "calibrate_scale input");
  QuantSpec spec;
  spec.bits = req.bits;
  spec.granularity = req.granularity;
  spec.axis = req.axis;
  spec.clip = req.clip;
  spec.percentile = req.percentile;
  spec.rounding = req.rounding;
  spec.seed = req.seed;
  const std::size_t nch = channel_count(t, req.granularity, req.axis);
  std::vector<std::vector<double>> mags(nch);
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j)
      mags[channel_of(i, j, req.granularity, req.axis)].push_back(std::abs(t(i, j)));
  spec.scales.resize(nch);
  for (std::size_t c = 0; c < nch; ++c) spec.scales[c] = scale_from(std::move(mags[c]), req);
  return spec;
}

QuantizedFactor quantize(const Matrix& t, const QuantSpec& spec) {
  check_bits(spec.bits);
  if (spec.scales.size() != channel_count(t, spec.granularity, spec.axis))
    throw LinalgError("quantize: scale count does not match tensor channels");
  QuantizedFactor f;
  f.spec = spec;
  f.rows = t.rows();
  f.cols = t.cols();
  f.codes.resize(t.size());
  const double top = spec.max_code();
  std::mt19937_64 rng(spec.seed);
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) {
      const double u = t(i, j) / spec.scale_at(i, j);
      double c;
      if (spec.rounding == Rounding::Nearest) {
        c = std::nearbyint(u);  // default FE_TONEAREST: ties to even
      } else {
        const double fl = std::floor(u);
        c = unit_uniform(rng) < (u - fl) ? fl + 1.0 : fl;
      }
      c = std::clamp(c, -top, top);
      f.codes[i * t.cols() + j] = static_cast<std::int32_t>(c);
    }
  }
  return f;
}

Matrix dequantize(const QuantizedFactor& f) {
  Matrix out(f.rows, f.cols);
  for (std::size_t i = 0; i < f.rows; ++i)
    for (std::size_t j = 0; j < f.cols; ++j)
      out(i, j) = f.spec.scale_at(i, j) * static_cast<double>(f.codes[i * f.cols + j]);
  return out;
}

Matrix fake_quantize(const Matrix& t, const QuantSpec& spec) { return dequantize(quantize(t, spec)); }

SteGradient ste_gradient(const Matrix& upstream, const Matrix& t, const QuantSpec& spec) {
  if (upstream.rows() != t.rows() || upstream.cols() != t.cols())
    throw LinalgError("ste_gradient: shape mismatch");
  SteGradient g{Matrix(t.rows(), t.cols()), Vector(spec.scales.size(), 0.0)};
  const double top = spec.max_code();
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) {
      const double s = spec.scale_at(i, j);
      const double u = t(i, j) / s;
      if (std::abs(u) > top) continue;
      g.d_t(i, j) = upstream(i, j);
      g.d_log_scale[channel_of(i, j, spec.granularity, spec.axis)] +=
          upstream(i, j) * s * (std::nearbyint(u) - u);
    }
  }
  return g;
}

Matrix ste_surrogate(const Matrix& t, const Vector& log_scales, const Matrix& t0,
                     const QuantSpec& spec0) {
  const QuantizedFactor q0 = quantize(t0, spec0);
  const double top = spec0.max_code();
  Matrix out(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    for (std::size_t j = 0; j < t.cols(); ++j) {
      const std::size_t ch = channel_of(i, j, spec0.granularity, spec0.axis);
      const double s0 = spec0.scales[ch];
      const double u0 = t0(i, j) / s0;
      const double c0 = q0.codes[i * t.cols() + j];
      if (std::abs(u0) > top) {
        out(i, j) = s0 * c0;
      } else {
        out(i, j) = t(i, j) + std::exp(log_scales[ch]) * (c0 - u0);
      }
    }
  }
  return out;
}

Vector bias_correction(const std::vector<Matrix>& batch, const QuantSpec& spec) {
  if (batch.empty()) throw LinalgError("bias_correction: empty calibration batch");
  Vector sum(spec.scales.size(), 0.0);
  std::vector<std::size_t> count(spec.scales.size(), 0);
  for (const Matrix& t : batch) {
    const Matrix d = dequantize(quantize(t, spec));
    for (std::size_t i = 0; i < t.rows(); ++i)
      for (std::size_t j = 0; j < t.cols(); ++j) {
        const std::size_t ch = channel_of(i, j, spec.granularity, spec.axis);
        sum[ch] += t(i, j) - d(i, j);
        ++count[ch];
      }
  }
  for (std::size_t c = 0; c < sum.size(); ++c)
    if (count[c] > 0) sum[c] /= static_cast<double>(count[c]);
  return sum;
}

QuantSpec calibrate_scale(const Tensor4& t, const QuantRequest& req) {
  QuantRequest r = req;
  r.axis = 0;
  return calibrate_scale(t.unfold_out(), r);
}

Tensor4 fake_quantize(const Tensor4& t, const QuantSpec& spec) {
  return Tensor4::fold_out(fake_quantize(t.unfold_out(), spec), t.c_in(), t.h(), t.w());
}

}  // namespace ecomp
