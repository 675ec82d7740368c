#include "ecomp/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace ecomp {

namespace {

void same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw LinalgError(std::string("tape: shape mismatch in ") + what);
}

void axpy(Matrix& dst, const Matrix& src, double s = 1.0) {
  auto d = dst.data();
  auto x = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * x[i];
}

Matrix row_softmax(const Matrix& a) {
  Matrix p(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double mx = a(i, 0);
    for (std::size_t j = 1; j < a.cols(); ++j) mx = std::max(mx, a(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) z += (p(i, j) = std::exp(a(i, j) - mx));
    for (std::size_t j = 0; j < a.cols(); ++j) p(i, j) /= z;
  }
  return p;
}

Matrix row_log_softmax(const Matrix& a) {
  Matrix l(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double mx = a(i, 0);
    for (std::size_t j = 1; j < a.cols(); ++j) mx = std::max(mx, a(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) z += std::exp(a(i, j) - mx);
    const double lz = mx + std::log(z);
    for (std::size_t j = 0; j < a.cols(); ++j) l(i, j) = a(i, j) - lz;
  }
  return l;
}

}  // namespace

double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_derivative(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Vector conv2d_same(std::span<const double> x, const Matrix& kernel, std::size_t c_in,
                   std::size_t height, std::size_t width, std::size_t kh, std::size_t kw,
                   std::uint64_t* flops) {
  const std::size_t c_out = kernel.rows();
  if (kernel.cols() != c_in * kh * kw || x.size() != c_in * height * width)
    throw LinalgError("conv2d: shape mismatch");
  const long pt = static_cast<long>((kh - 1) / 2), pl = static_cast<long>((kw - 1) / 2);
  const long H = static_cast<long>(height), W = static_cast<long>(width);
  Vector y(c_out * height * width, 0.0);
  for (std::size_t o = 0; o < c_out; ++o) {
    for (long py = 0; py < H; ++py) {
      for (long px = 0; px < W; ++px) {
        double acc = 0.0;
        for (std::size_t c = 0; c < c_in; ++c)
          for (std::size_t dy = 0; dy < kh; ++dy)
            for (std::size_t dx = 0; dx < kw; ++dx) {
              const long sy = py + static_cast<long>(dy) - pt;
              const long sx = px + static_cast<long>(dx) - pl;
              if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
              acc += kernel(o, (c * kh + dy) * kw + dx) *
                     x[(c * height + static_cast<std::size_t>(sy)) * width + static_cast<std::size_t>(sx)];
            }
        y[(o * height + static_cast<std::size_t>(py)) * width + static_cast<std::size_t>(px)] = acc;
      }
    }
  }
  if (flops) *flops += 2ull * c_out * height * width * c_in * kh * kw;
  return y;
}

Vector conv2d_same_adjoint(std::span<const double> y, const Matrix& kernel, std::size_t c_in,
                           std::size_t height, std::size_t width, std::size_t kh, std::size_t kw) {
  const std::size_t c_out = kernel.rows();
  if (kernel.cols() != c_in * kh * kw || y.size() != c_out * height * width)
    throw LinalgError("conv2d adjoint: shape mismatch");
  const long pt = static_cast<long>((kh - 1) / 2), pl = static_cast<long>((kw - 1) / 2);
  const long H = static_cast<long>(height), W = static_cast<long>(width);
  Vector x(c_in * height * width, 0.0);
  for (std::size_t o = 0; o < c_out; ++o)
    for (long py = 0; py < H; ++py)
      for (long px = 0; px < W; ++px) {
        const double go = y[(o * height + static_cast<std::size_t>(py)) * width + static_cast<std::size_t>(px)];
        if (go == 0.0) continue;
        for (std::size_t c = 0; c < c_in; ++c)
          for (std::size_t dy = 0; dy < kh; ++dy)
            for (std::size_t dx = 0; dx < kw; ++dx) {
              const long sy = py + static_cast<long>(dy) - pt;
              const long sx = px + static_cast<long>(dx) - pl;
              if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
              x[(c * height + static_cast<std::size_t>(sy)) * width + static_cast<std::size_t>(sx)] +=
                  kernel(o, (c * kh + dy) * kw + dx) * go;
            }
      }
  return x;
}

Tape::Id Tape::push(Matrix value, std::function<void()> back) {
  nodes_.push_back({std::move(value), Matrix(), std::move(back)});
  return nodes_.size() - 1;
}

void Tape::note_kink(std::span<const double> xs) {
  for (double x : xs) kink_margin_ = std::min(kink_margin_, std::abs(x));
}

Tape::Id Tape::leaf(Matrix value) { return push(std::move(value)); }
Tape::Id Tape::constant(Matrix value) { return push(std::move(value)); }

Tape::Id Tape::matmul(Id a, Id b) {
  const Id out = push(ecomp::matmul(value(a), value(b)));
  nodes_[out].back = [this, a, b, out] {
    axpy(g(a), ecomp::matmul_nt(g(out), value(b)));
    axpy(g(b), matmul_tn(value(a), g(out)));
  };
  return out;
}

Tape::Id Tape::matmul_nt(Id a, Id b) {
  const Id out = push(ecomp::matmul_nt(value(a), value(b)));
  nodes_[out].back = [this, a, b, out] {
    axpy(g(a), ecomp::matmul(g(out), value(b)));
    axpy(g(b), matmul_tn(g(out), value(a)));
  };
  return out;
}

Tape::Id Tape::transpose(Id a) {
  const Id out = push(value(a).transpose());
  nodes_[out].back = [this, a, out] { axpy(g(a), g(out).transpose()); };
  return out;
}

Tape::Id Tape::add(Id a, Id b) {
  same_shape(value(a), value(b), "add");
  const Id out = push(value(a) + value(b));
  nodes_[out].back = [this, a, b, out] {
    axpy(g(a), g(out));
    axpy(g(b), g(out));
  };
  return out;
}

Tape::Id Tape::sub(Id a, Id b) {
  same_shape(value(a), value(b), "sub");
  const Id out = push(value(a) - value(b));
  nodes_[out].back = [this, a, b, out] {
    axpy(g(a), g(out));
    axpy(g(b), g(out), -1.0);
  };
  return out;
}

Tape::Id Tape::hadamard(Id a, Id b) {
  same_shape(value(a), value(b), "hadamard");
  Matrix v = value(a);
  for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] *= value(b).data()[i];
  const Id out = push(std::move(v));
  nodes_[out].back = [this, a, b, out] {
    for (std::size_t i = 0; i < value(out).size(); ++i) {
      g(a).data()[i] += g(out).data()[i] * value(b).data()[i];
      g(b).data()[i] += g(out).data()[i] * value(a).data()[i];
    }
  };
  return out;
}

Tape::Id Tape::scale(Id a, double s) {
  const Id out = push(s * value(a));
  nodes_[out].back = [this, a, out, s] { axpy(g(a), g(out), s); };
  return out;
}

Tape::Id Tape::add_scalar(Id a, double c) {
  Matrix v = value(a);
  for (double& x : v.data()) x += c;
  const Id out = push(std::move(v));
  nodes_[out].back = [this, a, out] { axpy(g(a), g(out)); };
  return out;
}

Tape::Id Tape::mul_scalar(Id a, Id s) {
  if (value(s).size() != 1) throw LinalgError("tape: mul_scalar expects a 1x1 scale");
  const Id out = push(scalar(s) * value(a));
  nodes_[out].back = [this, a, s, out] {
    axpy(g(a), g(out), scalar(s));
    g(s)(0, 0) += dot(g(out).data(), value(a).data());
  };
  return out;
}

Tape::Id Tape::scale_channels(Id x, Id gam, std::size_t hw) {
  const Matrix& xv = value(x);
  const std::size_t c = value(gam).size();
  if (xv.cols() != c * hw) throw LinalgError("tape: scale_channels shape mismatch");
  Matrix v = xv;
  for (std::size_t b = 0; b < v.rows(); ++b)
    for (std::size_t j = 0; j < v.cols(); ++j) v(b, j) *= value(gam).data()[j / hw];
  const Id out = push(std::move(v));
  nodes_[out].back = [this, x, gam, out, hw] {
    for (std::size_t b = 0; b < value(x).rows(); ++b)
      for (std::size_t j = 0; j < value(x).cols(); ++j) {
        g(x)(b, j) += g(out)(b, j) * value(gam).data()[j / hw];
        g(gam).data()[j / hw] += g(out)(b, j) * value(x)(b, j);
      }
  };
  return out;
}

Tape::Id Tape::shift_channels(Id x, Id bias, std::size_t hw) {
  const Matrix& xv = value(x);
  const std::size_t c = value(bias).size();
  if (xv.cols() != c * hw) throw LinalgError("tape: shift_channels shape mismatch");
  Matrix v = xv;
  for (std::size_t b = 0; b < v.rows(); ++b)
    for (std::size_t j = 0; j < v.cols(); ++j) v(b, j) += value(bias).data()[j / hw];
  const Id out = push(std::move(v));
  nodes_[out].back = [this, x, bias, out, hw] {
    axpy(g(x), g(out));
    for (std::size_t b = 0; b < value(x).rows(); ++b)
      for (std::size_t j = 0; j < value(x).cols(); ++j) g(bias).data()[j / hw] += g(out)(b, j);
  };
  return out;
}

Tape::Id Tape::relu(Id a) {
  note_kink(value(a).data());
  Matrix v = value(a);
  for (double& x : v.data()) x = x > 0.0 ? x : 0.0;
  const Id out = push(std::move(v));
  nodes_[out].back = [this, a, out] {
    for (std::size_t i = 0; i < value(a).size(); ++i)
      if (value(a).data()[i] > 0.0) g(a).data()[i] += g(out).data()[i];
  };
  return out;
}

Tape::Id Tape::gelu(Id a) {
  Matrix v = value(a);
  for (double& x : v.data()) x = gelu_value(x);
  const Id out = push(std::move(v));
  nodes_[out].back = [this, a, out] {
    for (std::size_t i = 0; i < value(a).size(); ++i)
      g(a).data()[i] += g(out).data()[i] * gelu_derivative(value(a).data()[i]);
  };
  return out;
}

Tape::Id Tape::sum(Id a) {
  double s = 0.0;
  for (double x : value(a).data()) s += x;
  const Id out = push(Matrix(1, 1, s));
  nodes_[out].back = [this, a, out] {
    const double go = g(out)(0, 0);
    for (double& x : g(a).data()) x += go;
  };
  return out;
}

Tape::Id Tape::mean(Id a) {
  const double n = static_cast<double>(value(a).size());
  return scale(sum(a), 1.0 / n);
}

Tape::Id Tape::fake_quant(Id t, Id log_scale, int bits, const std::optional<FrozenRounding>& frozen) {
  if (bits < 2 || bits > 31) throw LinalgError("tape: fake_quant bits out of range");
  const Matrix& tv = value(t);
  const double s = std::exp(scalar(log_scale));
  const double top = static_cast<double>((1 << (bits - 1)) - 1);
  const std::size_t n = tv.size();
  // Per entry: frozen code c0, frozen ratio u0, in-range flag.
  std::vector<double> c0(n), u0(n);
  std::vector<char> in(n);
  if (frozen) {
    same_shape(frozen->t0, tv, "fake_quant frozen point");
    for (std::size_t i = 0; i < n; ++i) {
      u0[i] = frozen->t0.data()[i] / frozen->s0;
      c0[i] = std::clamp(std::nearbyint(u0[i]), -top, top);
      in[i] = std::abs(u0[i]) <= top;
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      u0[i] = tv.data()[i] / s;
      c0[i] = std::clamp(std::nearbyint(u0[i]), -top, top);
      in[i] = std::abs(u0[i]) <= top;
    }
  }
  Matrix v(tv.rows(), tv.cols());
  for (std::size_t i = 0; i < n; ++i) {
    if (frozen) {
      v.data()[i] = in[i] ? tv.data()[i] + s * (c0[i] - u0[i]) : frozen->s0 * c0[i];
    } else {
      v.data()[i] = s * c0[i];
    }
  }
  const Id out = push(std::move(v));
  nodes_[out].back = [this, t, log_scale, out, c0 = std::move(c0), u0 = std::move(u0),
                      in = std::move(in)] {
    const double sc = std::exp(scalar(log_scale));
    double dls = 0.0;
    for (std::size_t i = 0; i < in.size(); ++i) {
      if (!in[i]) continue;
      const double go = g(out).data()[i];
      g(t).data()[i] += go;
      dls += go * sc * (c0[i] - u0[i]);
    }
    g(log_scale)(0, 0) += dls;
  };
  return out;
}

Tape::Id Tape::soft_mask(Id logits, const Vector& noise, std::size_t k, double tau) {
  const Matrix& lv = value(logits);
  const std::size_t n = lv.size();
  if (!(tau > 0.0)) throw LinalgError("tape: soft_mask temperature must be positive");
  if (noise.size() != n || k < 1 || k > n) throw LinalgError("tape: soft_mask shape");
  if (k == n) {
    const Id out = push(Matrix(1, n, 1.0));
    return out;
  }
  Vector gsc(n);
  for (std::size_t i = 0; i < n; ++i) gsc[i] = lv.data()[i] + noise[i];
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return gsc[a] > gsc[b]; });
  const std::size_t ia = order[k - 1], ib = order[k];
  const double gap = gsc[ia] - gsc[ib];
  kink_margin_ = std::min(kink_margin_, gap);
  if (k >= 2) kink_margin_ = std::min(kink_margin_, gsc[order[k - 2]] - gsc[ia]);
  if (k + 1 < n) kink_margin_ = std::min(kink_margin_, gsc[ib] - gsc[order[k + 1]]);
  const double thr = 0.5 * (gsc[ia] + gsc[ib]);
  Matrix m(1, n);
  for (std::size_t i = 0; i < n; ++i) m.data()[i] = 1.0 / (1.0 + std::exp(-(gsc[i] - thr) / tau));
  const Id out = push(std::move(m));
  nodes_[out].back = [this, logits, out, ia, ib, tau] {
    double total = 0.0;
    for (std::size_t i = 0; i < value(out).size(); ++i) {
      const double mi = value(out).data()[i];
      const double d = g(out).data()[i] * mi * (1.0 - mi) / tau;
      g(logits).data()[i] += d;
      total += d;
    }
    g(logits).data()[ia] -= 0.5 * total;
    g(logits).data()[ib] -= 0.5 * total;
  };
  return out;
}

Tape::Id Tape::spectral_norm(Id m) {
  const SvdFactors f = svd_full(value(m), 1);
  const Id out = push(Matrix(1, 1, f.sigma.empty() ? 0.0 : f.sigma[0]));
  nodes_[out].back = [this, m, out, u = f.u.col(0), v = f.v.col(0)] {
    const double go = g(out)(0, 0);
    for (std::size_t i = 0; i < u.size(); ++i)
      for (std::size_t j = 0; j < v.size(); ++j) g(m)(i, j) += go * u[i] * v[j];
  };
  return out;
}

Tape::Id Tape::softmax_ce(Id logits, const std::vector<std::size_t>& labels) {
  const Matrix& z = value(logits);
  if (labels.size() != z.rows()) throw LinalgError("tape: label count mismatch");
  const Matrix lp = row_log_softmax(z);
  double loss = 0.0;
  for (std::size_t b = 0; b < z.rows(); ++b) {
    if (labels[b] >= z.cols()) throw LinalgError("tape: label out of range");
    loss -= lp(b, labels[b]);
  }
  const double inv = 1.0 / static_cast<double>(z.rows());
  const Id out = push(Matrix(1, 1, loss * inv));
  nodes_[out].back = [this, logits, out, labels, inv] {
    const Matrix p = row_softmax(value(logits));
    const double go = g(out)(0, 0) * inv;
    for (std::size_t b = 0; b < p.rows(); ++b)
      for (std::size_t c = 0; c < p.cols(); ++c)
        g(logits)(b, c) += go * (p(b, c) - (c == labels[b] ? 1.0 : 0.0));
  };
  return out;
}

Tape::Id Tape::kl(Id p_logits, Id q_logits) {
  same_shape(value(p_logits), value(q_logits), "kl");
  const Matrix lp = row_log_softmax(value(p_logits));
  const Matrix lq = row_log_softmax(value(q_logits));
  const std::size_t B = lp.rows(), C = lp.cols();
  Vector per_row(B, 0.0);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t c = 0; c < C; ++c) per_row[b] += std::exp(lp(b, c)) * (lp(b, c) - lq(b, c));
    total += per_row[b];
  }
  const double inv = 1.0 / static_cast<double>(B);
  const Id out = push(Matrix(1, 1, total * inv));
  nodes_[out].back = [this, p_logits, q_logits, out, lp, lq, per_row, inv] {
    const double go = g(out)(0, 0) * inv;
    for (std::size_t b = 0; b < lp.rows(); ++b)
      for (std::size_t c = 0; c < lp.cols(); ++c) {
        const double p = std::exp(lp(b, c)), q = std::exp(lq(b, c));
        g(p_logits)(b, c) += go * p * ((lp(b, c) - lq(b, c)) - per_row[b]);
        g(q_logits)(b, c) += go * (q - p);
      }
  };
  return out;
}

Tape::Id Tape::softmax_rows(Id a) {
  const Id out = push(row_softmax(value(a)));
  nodes_[out].back = [this, a, out] {
    const Matrix& y = value(out);
    for (std::size_t b = 0; b < y.rows(); ++b) {
      double s = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) s += g(out)(b, j) * y(b, j);
      for (std::size_t j = 0; j < y.cols(); ++j) g(a)(b, j) += y(b, j) * (g(out)(b, j) - s);
    }
  };
  return out;
}

Tape::Id Tape::gumbel_softmax_st(Id logits, const Matrix& noise, double tau) {
  same_shape(value(logits), noise, "gumbel_softmax_st");
  if (!(tau > 0.0)) throw LinalgError("tape: gumbel temperature must be positive");
  Matrix z = value(logits);
  for (std::size_t i = 0; i < z.size(); ++i) z.data()[i] = (z.data()[i] + noise.data()[i]) / tau;
  const Matrix y = row_softmax(z);
  Matrix hard(z.rows(), z.cols());
  for (std::size_t b = 0; b < z.rows(); ++b) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < z.cols(); ++j)
      if (z(b, j) > z(b, best)) best = j;
    hard(b, best) = 1.0;
  }
  const Id out = push(std::move(hard));
  nodes_[out].back = [this, logits, out, y, tau] {
    for (std::size_t b = 0; b < y.rows(); ++b) {
      double s = 0.0;
      for (std::size_t j = 0; j < y.cols(); ++j) s += g(out)(b, j) * y(b, j);
      for (std::size_t j = 0; j < y.cols(); ++j)
        g(logits)(b, j) += y(b, j) * (g(out)(b, j) - s) / tau;
    }
  };
  return out;
}

Tape::Id Tape::conv2d(Id x, Id kernel, std::size_t c_in, std::size_t height, std::size_t width,
                      std::size_t kh, std::size_t kw) {
  const Matrix& xv = value(x);
  const Matrix& kv = value(kernel);
  const std::size_t c_out = kv.rows();
  Matrix y(xv.rows(), c_out * height * width);
  for (std::size_t b = 0; b < xv.rows(); ++b) {
    const Vector yb = conv2d_same(xv.data().subspan(b * xv.cols(), xv.cols()), kv, c_in, height,
                                  width, kh, kw);
    std::copy(yb.begin(), yb.end(), &y(b, 0));
  }
  const Id out = push(std::move(y));
  nodes_[out].back = [this, x, kernel, out, c_in, height, width, kh, kw] {
    const Matrix& xv = value(x);
    const Matrix& kv = value(kernel);
    const std::size_t c_out = kv.rows();
    const long pt = static_cast<long>((kh - 1) / 2), pl = static_cast<long>((kw - 1) / 2);
    const long H = static_cast<long>(height), W = static_cast<long>(width);
    for (std::size_t b = 0; b < xv.rows(); ++b) {
      const std::span<const double> gy(&g(out)(b, 0), g(out).cols());
      const Vector gx = conv2d_same_adjoint(gy, kv, c_in, height, width, kh, kw);
      for (std::size_t j = 0; j < gx.size(); ++j) g(x)(b, j) += gx[j];
      for (std::size_t o = 0; o < c_out; ++o)
        for (long py = 0; py < H; ++py)
          for (long px = 0; px < W; ++px) {
            const double go = gy[(o * height + static_cast<std::size_t>(py)) * width + static_cast<std::size_t>(px)];
            if (go == 0.0) continue;
            for (std::size_t c = 0; c < c_in; ++c)
              for (std::size_t dy = 0; dy < kh; ++dy)
                for (std::size_t dx = 0; dx < kw; ++dx) {
                  const long sy = py + static_cast<long>(dy) - pt;
                  const long sx = px + static_cast<long>(dx) - pl;
                  if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                  g(kernel)(o, (c * kh + dy) * kw + dx) +=
                      go * xv(b, (c * height + static_cast<std::size_t>(sy)) * width + static_cast<std::size_t>(sx));
                }
          }
    }
  };
  return out;
}

void Tape::backward(Id root) {
  if (value(root).size() != 1) throw LinalgError("tape: backward root must be a scalar");
  for (Node& n : nodes_) n.grad = Matrix(n.value.rows(), n.value.cols());
  nodes_[root].grad(0, 0) = 1.0;
  for (std::size_t i = root + 1; i-- > 0;)
    if (nodes_[i].back) nodes_[i].back();
}

}  // namespace ecomp
