#include <cmath>
#include <random>

#include "doctest.h"
#include "ecomp/network.hpp"
#include "ecomp/synth.hpp"
#include "test_support.hpp"

using namespace ecomp;
using ecomp::testing::l2;
using ecomp::testing::random_matrix;

namespace {

Network single_layer(const Matrix& w, Activation act = Activation::Identity) {
  Network net;
  Block b;
  b.layer = ElasticLayer::dense(w);
  b.act = act;
  net.blocks.push_back(std::move(b));
  return net;
}

// Effective weight from realized factors by explicit triple loop.
Matrix naive_weight(const LayerOp& op) {
  Matrix w(op.u.rows(), op.v.rows());
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j)
      for (std::size_t r = 0; r < op.k; ++r) w(i, j) += op.u(i, r) * op.sigma[r] * op.v(j, r);
  return w;
}

}  // namespace

TEST_CASE("forward: single linear layer on e1 returns the first column") {
  std::mt19937_64 rng(1);
  const Network net = single_layer(random_matrix(4, 3, rng));
  const Profile p{"p", {{2, FactorBits::uniform(6)}}};
  const Vector e1 = {1.0, 0.0, 0.0};
  const Vector z = forward(net, e1, p).logits;
  const Matrix w = compile(net, p).blocks[0].op.dense_weight();
  for (std::size_t i = 0; i < 4; ++i) CHECK(z[i] == doctest::Approx(w(i, 0)).epsilon(1e-13));
}

TEST_CASE("forward: two-layer ReLU net against naive loops") {
  const Network net = random_dense_network({.widths = {5, 7, 3}, .seed = 3});
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Profile p = random_profile(net, rng, {0, 3, 4, 8});
    const CompiledNetwork c = compile(net, p);
    const Vector x = random_input(5, rng);
    Vector a = x;
    for (std::size_t l = 0; l < 2; ++l) {
      const Matrix w = naive_weight(c.blocks[l].op);
      Vector z(w.rows(), 0.0);
      for (std::size_t i = 0; i < w.rows(); ++i) {
        for (std::size_t j = 0; j < w.cols(); ++j) z[i] += w(i, j) * a[j];
        z[i] += (*net.blocks[l].layer.bias())[i];
        if (l == 0) z[i] = std::max(0.0, z[i]);
      }
      a = z;
    }
    CHECK(l2(forward(c, x).logits, a) <= 1e-10);
  }
}

TEST_CASE("forward: k_max unquantized profile equals Full bit-for-bit") {
  const Network net = random_dense_network({.widths = {6, 8, 8, 2}, .norms = true, .seed = 5});
  Profile p = full_profile(net);
  p.id = "max";
  std::mt19937_64 rng(6);
  const Vector x = random_input(6, rng);
  CHECK(forward(net, x, p).logits == forward_full(net, x).logits);
  CHECK(logit_drift(net, x, p) == 0.0);
}

TEST_CASE("forward: trace fidelity") {
  const Network net = random_dense_network(
      {.widths = {6, 6, 6, 3}, .hidden = Activation::Gelu, .norms = true, .residual = true, .seed = 7});
  std::mt19937_64 rng(8);
  const Profile p = random_profile(net, rng, {4, 8});
  const CompiledNetwork c = compile(net, p);
  const ForwardTrace tr = forward(c, random_input(6, rng));
  REQUIRE(tr.inputs.size() == 3);
  for (std::size_t l = 0; l < 3; ++l) {
    CompiledNetwork one;
    one.blocks = {c.blocks[l]};
    CHECK(l2(forward(one, tr.inputs[l]).logits, tr.outputs[l]) <= 1e-12);
  }
}

TEST_CASE("logit_drift: single layer equals the residual applied to x") {
  std::mt19937_64 rng(9);
  const Matrix w = random_matrix(5, 5, rng);
  const Network net = single_layer(w);
  const Profile p{"p", {{2, {}}}};
  const Vector x = random_input(5, rng);
  const Matrix dw = w - truncate_dense(net.blocks[0].layer, 2);
  CHECK(logit_drift(net, x, p) == doctest::Approx(l2(matvec(dw, x))).epsilon(1e-10));
  for (int i = 0; i < 20; ++i) CHECK(logit_drift(net, random_input(5, rng), random_profile(net, rng, {0, 2})) >= 0.0);
}

TEST_CASE("exact_postlayer_lipschitz: closed cases") {
  std::mt19937_64 rng(10);
  const Network net1 = random_dense_network({.widths = {4, 5, 3}, .seed = 11});
  CHECK(exact_postlayer_lipschitz(net1, 1) == 1.0);

  Network lin;
  Block b0;
  b0.layer = ElasticLayer::dense(random_matrix(3, 3, rng));
  b0.act = Activation::Identity;
  Block b1;
  const double d[] = {3, 3, 3};
  b1.layer = ElasticLayer::dense(Matrix::diagonal(d));
  b1.act = Activation::Identity;
  lin.blocks = {b0, b1};
  CHECK(exact_postlayer_lipschitz(lin, 0) == doctest::Approx(3.0).epsilon(1e-12));

  // Residual connection never lowers the bound.
  Network res = random_dense_network({.widths = {4, 4, 4, 2}, .seed = 12});
  const double before = exact_postlayer_lipschitz(res, 0);
  res.blocks[1].residual = true;
  CHECK(exact_postlayer_lipschitz(res, 0) >= before);
}

TEST_CASE("exact_postlayer_lipschitz: dominates sampled local gains") {
  const Network net = random_dense_network({.widths = {6, 8, 8, 3}, .norms = true, .seed = 13});
  const CompiledNetwork full = compile_full(net);
  std::mt19937_64 rng(14);
  for (std::size_t l = 0; l < 3; ++l) {
    const double bound = exact_postlayer_lipschitz(net, l);
    double worst = 0.0;
    for (int s = 0; s < 1000; ++s) {
      const ForwardTrace tr = forward(full, random_input(6, rng));
      // Directional finite difference: perturb z_ℓ, re-run the tail.
      const Vector dir = random_input(tr.preacts[l].size(), rng);
      const double h = 1e-6 / l2(dir);
      CompiledNetwork tail;
      tail.blocks.assign(full.blocks.begin() + static_cast<long>(l) + 1, full.blocks.end());
      auto finish = [&](const Vector& z_l) {
        Vector a(z_l.size());
        const CompiledBlock& b = full.blocks[l];
        for (std::size_t i = 0; i < a.size(); ++i) {
          const double hpre = b.norm ? b.norm->gamma[i] * z_l[i] + b.norm->beta[i] : z_l[i];
          a[i] = activate(b.act, hpre);
        }
        return tail.blocks.empty() ? a : forward(tail, a).logits;
      };
      Vector z(tr.preacts[l].size());
      const CompiledBlock& b = full.blocks[l];
      for (std::size_t i = 0; i < z.size(); ++i)
        z[i] = b.norm ? (tr.preacts[l][i] - b.norm->beta[i]) / b.norm->gamma[i] : tr.preacts[l][i];
      Vector zp = z;
      for (std::size_t i = 0; i < z.size(); ++i) zp[i] += h * dir[i];
      worst = std::max(worst, l2(finish(zp), finish(z)) / (h * l2(dir)));
    }
    CHECK(bound >= worst * (1 - 1e-6));
  }
}

TEST_CASE("GELU Lipschitz constant covers the derivative") {
  double sup = 0.0;
  for (int i = -100000; i <= 100000; ++i) sup = std::max(sup, std::abs(activation_derivative(Activation::Gelu, i * 1e-4)));
  CHECK(sup <= activation_lipschitz(Activation::Gelu));
  CHECK(sup >= 1.12890);
}

TEST_CASE("tail JVP/VJP: finite differences and adjointness") {
  const Network net = random_dense_network(
      {.widths = {5, 6, 6, 3}, .hidden = Activation::Gelu, .norms = true, .residual = true, .seed = 15});
  const CompiledNetwork full = compile_full(net);
  std::mt19937_64 rng(16);
  const ForwardTrace tr = forward(full, random_input(5, rng));
  const Vector dz = random_input(6, rng);
  const Vector jv = tail_jvp(full, tr, 0, dz);
  const Vector g = random_input(3, rng);
  const Vector vj = tail_vjp(full, tr, 0, g);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < 3; ++i) lhs += g[i] * jv[i];
  for (std::size_t i = 0; i < 6; ++i) rhs += vj[i] * dz[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));

  // JVP against a finite difference through block 0's weights direction:
  // perturb the input x along d so z₀ moves along W₀d.
  const Vector d = random_input(5, rng);
  const double h = 1e-6;
  Vector xp = tr.inputs[0], xm = tr.inputs[0];
  for (std::size_t i = 0; i < 5; ++i) {
    xp[i] += h * d[i];
    xm[i] -= h * d[i];
  }
  CompiledBlock lin = full.blocks[0];
  lin.op.bias.reset();
  const Vector wd = linear_apply(lin, d, 1, 1);
  const Vector jd = tail_jvp(full, tr, 0, wd);
  const Vector fp = forward(full, xp).logits, fm = forward(full, xm).logits;
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs((fp[i] - fm[i]) / (2 * h) - jd[i]) <= 1e-6);
}

TEST_CASE("conv blocks: staged forward equals direct convolution; op counts") {
  const Network net = random_conv_network({.height = 5, .width = 4, .channels = {2, 4, 3}, .classes = 2, .seed = 17});
  std::mt19937_64 rng(18);
  const Profile p = random_profile(net, rng, {0});
  const CompiledNetwork c = compile(net, p);
  const Vector x = random_input(net.input_dim(), rng);
  std::uint64_t flops = 0;
  const ForwardTrace tr = forward(c, x, &flops);
  const Tensor4 k0 = c.blocks[0].op.conv_weight();
  Vector z = ecomp::testing::naive_conv_same(x, k0, 5, 4);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += (*c.blocks[0].op.bias)[i / 20];
  CHECK(l2(z, tr.preacts[0]) <= 1e-10);

  std::uint64_t expected = 0;
  for (std::size_t l = 0; l < 2; ++l) {
    const LayerOp& op = c.blocks[l].op;
    const std::uint64_t ci = op.v.rows(), ri = op.v.cols(), ro = op.u.cols(), co = op.u.rows();
    expected += 2ull * 20 * (ci * ri + ro * ri * 9 + co * ro);
  }
  const LayerOp& head = c.blocks[2].op;
  expected += 2ull * head.v.rows() * head.k + head.k + 2ull * head.u.rows() * head.k;
  CHECK(flops == expected);
}

TEST_CASE("validation: tied groups, shapes, fingerprint") {
  Network net = random_dense_network({.widths = {4, 4, 4, 2}, .seed = 19});
  net.blocks[0].layer.set_group_id("g");
  net.blocks[1].layer.set_group_id("g");
  Profile p = full_profile(net);
  p.layers[0].k = 2;
  CHECK_THROWS_AS(compile(net, p), LinalgError);
  p.layers[1].k = 2;
  CHECK_NOTHROW(compile(net, p));
  std::mt19937_64 rng(20);
  for (int i = 0; i < 50; ++i) {
    const Profile r = random_profile(net, rng, {4, 8});
    CHECK(r.layers[0].k == r.layers[1].k);
  }
  const std::uint64_t f0 = fingerprint(net);
  Network copy = net;
  CHECK(fingerprint(copy) == f0);
  copy.blocks[2].layer.mutable_sigma()[0] += 1e-12;
  CHECK(fingerprint(copy) != f0);
  CHECK_THROWS_AS(forward(net, Vector(3, 0.0), p), LinalgError);
}
