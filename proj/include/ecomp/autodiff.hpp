#pragma once

// Tape-based reverse-mode differentiation over matrix-valued nodes. Batches
// are row-major (one sample per row); conv activations are flattened
// channel-major (c·H·W + y·W + x).

#include <cstddef>
#include <functional>
#include <optional>
#include <vector>

#include "ecomp/linalg.hpp"
#include "ecomp/quant.hpp"

namespace ecomp {

class Tape {
 public:
  using Id = std::size_t;

  Id leaf(Matrix value);
  Id constant(Matrix value);

  const Matrix& value(Id id) const { return nodes_[id].value; }
  double scalar(Id id) const { return nodes_[id].value(0, 0); }
  // Valid after backward(); zero matrix for nodes the root does not reach.
  const Matrix& grad(Id id) const { return nodes_[id].grad; }
  std::size_t size() const { return nodes_.size(); }

  Id matmul(Id a, Id b);
  Id matmul_nt(Id a, Id b);  // a·bᵀ
  Id transpose(Id a);
  Id add(Id a, Id b);
  Id sub(Id a, Id b);
  Id hadamard(Id a, Id b);
  Id scale(Id a, double s);
  Id add_scalar(Id a, double c);
  // a · s where s is a 1×1 node.
  Id mul_scalar(Id a, Id s);
  // Per-channel affine pieces: x is B×(C·hw), g/b are 1×C.
  Id scale_channels(Id x, Id g, std::size_t hw);
  Id shift_channels(Id x, Id b, std::size_t hw);
  Id relu(Id a);
  Id gelu(Id a);
  Id sum(Id a);
  Id mean(Id a);

  // Fake quantization with scale exp(log_scale) (1×1 node). With `frozen`
  // set, rounding decisions and the in-range set are taken from that
  // expansion point and the forward is the straight-line surrogate; the
  // gradient is the STE gradient either way.
  struct FrozenRounding {
    Matrix t0;
    double s0;
  };
  Id fake_quant(Id t, Id log_scale, int bits, const std::optional<FrozenRounding>& frozen = {});

  // Gumbel-top-k soft mask on a 1×n logit row.
  Id soft_mask(Id logits, const Vector& noise, std::size_t k, double tau);
  // σ_max of a matrix; gradient u₁v₁ᵀ.
  Id spectral_norm(Id m);
  // Mean softmax cross-entropy over rows; labels index columns.
  Id softmax_ce(Id logits, const std::vector<std::size_t>& labels);
  // Mean over rows of KL(softmax(p) ‖ softmax(q)); differentiable in both.
  Id kl(Id p_logits, Id q_logits);
  Id softmax_rows(Id a);
  // Straight-through Gumbel-softmax: one-hot of argmax((a+noise)/τ) forward,
  // softmax((a+noise)/τ) Jacobian backward.
  Id gumbel_softmax_st(Id logits, const Matrix& noise, double tau);
  // Same-padding stride-1 convolution; kernel is C_out×(C_in·kh·kw).
  Id conv2d(Id x, Id kernel, std::size_t c_in, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw);

  void backward(Id root);

  // Smallest |argument| seen by relu/hinge-type kinks (for finite-difference guards).
  double kink_margin() const { return kink_margin_; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    std::function<void()> back;
  };
  Id push(Matrix value, std::function<void()> back = {});
  Matrix& g(Id id) { return nodes_[id].grad; }
  void note_kink(std::span<const double> xs);

  std::vector<Node> nodes_;
  double kink_margin_ = 1e300;
};

double gelu_value(double x);
double gelu_derivative(double x);

// Same-padding stride-1 correlation on one channel-major sample and its adjoint.
// Kernel is C_out×(C_in·kh·kw); `flops` (if given) is charged 2 per multiply-add
// including taps that fall on padding.
Vector conv2d_same(std::span<const double> x, const Matrix& kernel, std::size_t c_in,
                   std::size_t height, std::size_t width, std::size_t kh, std::size_t kw,
                   std::uint64_t* flops = nullptr);
Vector conv2d_same_adjoint(std::span<const double> y, const Matrix& kernel, std::size_t c_in,
                           std::size_t height, std::size_t width, std::size_t kh, std::size_t kw);

}  // namespace ecomp
