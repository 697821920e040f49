#include <doctest.h>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "pibinn/diag.hpp"
#include "pibinn/errors.hpp"
#include "pibinn/physics.hpp"
#include "pibinn/unroll.hpp"

using namespace pibinn;

namespace {

Vector vec(std::initializer_list<double> v) {
  Vector out(v.size());
  std::size_t i = 0;
  for (double x : v) out[i++] = x;
  return out;
}

// Loop-based LISTA step, no Eigen products.
Batch scripted_forward(const UnrolledNet& net, const DenseMatrix& a, const Batch& y) {
  const auto m = a.rows(), n = a.cols();
  Batch x = Batch::Zero(n, y.cols());
  for (const auto& l : net.layers) {
    Batch next(n, y.cols());
    for (Eigen::Index s = 0; s < y.cols(); ++s) {
      std::vector<double> r(m, 0.0);
      for (Eigen::Index i = 0; i < m; ++i) {
        double acc = 0.0;
        for (Eigen::Index j = 0; j < n; ++j) acc += a(i, j) * x(j, s);
        r[i] = acc - y(i, s);
      }
      for (Eigen::Index j = 0; j < n; ++j) {
        double acc = 0.0;
        for (Eigen::Index i = 0; i < m; ++i) acc += net.weight_multiplier() * l.W(i, j) * r[i];
        const double z = net.delta * x(j, s) - acc;
        double out = 0.0;
        if (net.activation == Activation::SoftThreshold) {
          out = std::abs(z) > l.theta ? (z > 0 ? z - l.theta : z + l.theta) : 0.0;
        } else {
          out = std::abs(z) > l.theta ? z : 0.0;
        }
        next(j, s) = out;
      }
    }
    x = next;
  }
  return x;
}

}  // namespace

TEST_CASE("thresholding operators") {
  CHECK(soft_threshold(vec({2.0}), 1.5)[0] == doctest::Approx(0.5));
  CHECK(soft_threshold(vec({-1.0}), 1.5)[0] == 0.0);
  CHECK(hard_threshold(vec({2.0}), 1.5)[0] == 2.0);
  CHECK(hard_threshold(vec({-1.0}), 1.5)[0] == 0.0);
  const Vector x = oracle::random_vector(10, 1);
  CHECK(soft_threshold(x, 0.0) == x);
  CHECK(hard_threshold(x, 0.0) == x);
  CHECK_THROWS_AS(soft_threshold(x, -0.1), InvalidArgument);
  CHECK_THROWS_AS(hard_threshold(x, -0.1), InvalidArgument);
  CHECK(activate(Activation::Relu, -0.3, 5.0) == 0.0);
  CHECK(activate(Activation::Relu, 0.3, 5.0) == 0.3);
  CHECK(activate_dz(Activation::SoftThreshold, 1.0, 1.0) == 0.0);
  CHECK(activate_dtheta(Activation::SoftThreshold, -2.0, 1.0) == 1.0);
  CHECK(activate_dtheta(Activation::HardThreshold, -2.0, 1.0) == 0.0);
}

TEST_CASE("soft threshold zeroes the dead zone") {
  const Vector z = oracle::random_vector(200, 3);
  const Vector out = soft_threshold(z, 0.7);
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    if (std::abs(z[i]) <= 0.7) CHECK(out[i] == 0.0);
  }
}

TEST_CASE("forward small cases") {
  const DenseMatrix id = DenseMatrix::Identity(4, 4);
  Batch y(4, 1);
  y << 1, -2, 3, 0.5;
  const UnrolledNet zero = make_net(1, DenseMatrix::Zero(4, 4), 0.0, Activation::SoftThreshold);
  CHECK(forward(zero, id, y).output().isZero());
  const UnrolledNet one = make_net(1, id, 0.0, Activation::SoftThreshold);
  CHECK(forward(one, id, y).output() == y);
  const ForwardTrace t = forward(make_net(3, id, 0.0, Activation::HardThreshold), id, y);
  CHECK(t.states.size() == 4);
  CHECK(t.pre_activations.size() == 3);
}

TEST_CASE("forward matches scripted recomputation") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const DenseMatrix a = oracle::random_matrix(6, 9, seed, 0.4);
    UnrolledNet net;
    net.activation = seed % 2 ? Activation::SoftThreshold : Activation::HardThreshold;
    net.delta = seed % 3 ? 1.0 : 0.9;
    for (int k = 0; k < 2; ++k) net.layers.push_back({oracle::random_matrix(6, 9, seed * 5 + k, 0.3), 0.05 * (k + 1)});
    if (seed % 4 == 0) {
      net.quant_mode = QuantMode::OneBitGlobal;
      for (auto& l : net.layers) l.W = l.W.unaryExpr([](double w) { return w < 0 ? -0.02 : 0.02; });
      net.scale = 3.5;
    }
    Batch y(6, 3);
    for (int c = 0; c < 3; ++c) y.col(c) = oracle::random_vector(6, seed * 11 + c);
    const Batch got = forward(net, a, y).output();
    CHECK((got - scripted_forward(net, a, y)).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("forward rejects bad shapes and reports non-finite layers") {
  const DenseMatrix a = oracle::random_matrix(3, 5, 1);
  const UnrolledNet net = make_net(2, a, 0.1, Activation::SoftThreshold);
  CHECK_THROWS_AS(forward(net, a, Batch::Ones(4, 1)), DimensionError);
  CHECK_THROWS_AS(forward(net, a, Batch::Ones(3, 1), Batch::Ones(4, 1)), DimensionError);
  UnrolledNet bad = net;
  bad.layers[1].W(0, 0) = std::numeric_limits<double>::infinity();
  try {
    forward(bad, a, Batch::Ones(3, 1));
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("layer 2") != std::string::npos);
  }
}

TEST_CASE("scale multiplies weights exactly") {
  const DenseMatrix a = oracle::random_matrix(5, 8, 4, 0.4);
  UnrolledNet net;
  net.quant_mode = QuantMode::OneBitGlobal;
  net.lambda0 = 0.02;
  for (int k = 0; k < 3; ++k) {
    net.layers.push_back({oracle::random_matrix(5, 8, 40 + k).unaryExpr([](double w) { return w < 0 ? -0.02 : 0.02; }), 0.01});
  }
  net.scale = 2.75;
  UnrolledNet folded = net;
  folded.scale = 1.0;
  for (auto& l : folded.layers) l.W = 2.75 * l.W;
  Batch y(5, 2);
  y.col(0) = oracle::random_vector(5, 1);
  y.col(1) = oracle::random_vector(5, 2);
  CHECK(forward(net, a, y).output() == forward(folded, a, y).output());
}

TEST_CASE("block weights match materialized dense net") {
  const BlockStructure s(3, 4, 6);
  const DenseMatrix block = oracle::random_matrix(4, 6, 9, 0.5);
  const BlockDiagOperator op(block, 3);
  UnrolledNet tied;
  tied.structure = s;
  tied.activation = Activation::SoftThreshold;
  for (int k = 0; k < 3; ++k) tied.layers.push_back({oracle::random_matrix(4, 6, 90 + k, 0.3), 0.02});
  UnrolledNet dense = tied;
  dense.structure.reset();
  for (auto& l : dense.layers) l.W = oracle::block_diag(l.W, 3);
  Batch y(12, 4);
  for (int c = 0; c < 4; ++c) y.col(c) = oracle::random_vector(12, 70 + c);
  const ForwardTrace a = forward(tied, op, y);
  const ForwardTrace b = forward(dense, op.materialize(), y);
  for (std::size_t k = 0; k < a.states.size(); ++k) {
    CHECK((a.states[k] - b.states[k]).cwiseAbs().maxCoeff() <= 1e-10);
  }
  // gradients of the tied block equal the sum of the dense diagonal blocks
  Batch x = Batch::Zero(18, 4);
  for (int c = 0; c < 4; ++c) x(c * 3, c) = 1.0;
  const Gradients gt = backward(tied, op, y, x, a);
  const Gradients gd = backward(dense, op.materialize(), y, x, b);
  for (std::size_t k = 0; k < 3; ++k) {
    DenseMatrix sum = DenseMatrix::Zero(4, 6);
    for (int u = 0; u < 3; ++u) sum += gd.dW[k].block(u * 4, u * 6, 4, 6);
    CHECK((gt.dW[k] - sum).cwiseAbs().maxCoeff() <= 1e-10);
    CHECK(gt.dtheta[k] == doctest::Approx(gd.dtheta[k]).epsilon(1e-10));
  }
}

TEST_CASE("loss values") {
  const Vector a = oracle::random_vector(7, 1);
  CHECK(loss(a, a, LossKind::SquaredError) == 0.0);
  CHECK(loss(vec({1, 0}), vec({0, 0}), LossKind::SquaredError) == 1.0);
  CHECK(loss(vec({1, 0}), vec({0, 0}), LossKind::NormError) == 1.0);
  const Vector b = oracle::random_vector(7, 2);
  double sq = 0.0;
  for (int i = 0; i < 7; ++i) sq += (a[i] - b[i]) * (a[i] - b[i]);
  CHECK(loss(a, b, LossKind::SquaredError) == doctest::Approx(sq).epsilon(1e-14));
  CHECK(loss(a, b, LossKind::NormError) == doctest::Approx(std::sqrt(sq)).epsilon(1e-14));
}

TEST_CASE("gradients match finite differences") {
  std::size_t n = 0;
  for (std::uint64_t seed = 0; seed < 16; ++seed) {
    const Activation act = seed % 2 ? Activation::SoftThreshold : Activation::HardThreshold;
    const double delta = (seed / 2) % 2 ? 0.9 : 1.0;
    const bool one_bit = (seed / 4) % 2;
    const LossKind kind = (seed / 8) % 2 ? LossKind::NormError : LossKind::SquaredError;
    const auto c = gradcheck::random_case(seed, act, delta, one_bit);
    const auto r = gradcheck::check(c.net, c.a, c.y, c.x, kind);
    CHECK(r.max_rel <= 1e-5);
    n += r.checked;
  }
  CHECK(n > 0);
}

TEST_CASE("zero-weight single layer gradient") {
  const DenseMatrix a = oracle::random_matrix(4, 6, 5, 0.5);
  UnrolledNet net = make_net(1, DenseMatrix::Zero(4, 6), 0.0, Activation::SoftThreshold);
  Batch x = Batch::Zero(6, 1);
  x(2, 0) = 1.0;
  const Batch y = a * x;
  // x1 = -W^T(-y) = W^T y; d/dW of ||W^T y - x||^2 at W = 0 is -2 y x^T
  const ForwardTrace t = forward(net, a, y);
  const Gradients g = backward(net, a, y, x, t);
  const DenseMatrix expect = -2.0 * y * x.transpose();
  CHECK((g.dW[0] - expect).cwiseAbs().maxCoeff() <= 1e-12);
  const auto fd = gradcheck::check(net, a, y, x, LossKind::SquaredError);
  CHECK(fd.max_rel <= 1e-6);
}

TEST_CASE("dead zone gives zero gradients") {
  const DenseMatrix a = oracle::random_matrix(4, 6, 6, 0.5);
  const UnrolledNet net = make_net(2, a, 100.0, Activation::SoftThreshold);
  Batch x = Batch::Zero(6, 2);
  x(1, 0) = 1;
  x(3, 1) = -1;
  const Batch y = a * x;
  const Gradients g = backward(net, a, y, x, forward(net, a, y));
  for (std::size_t k = 0; k < 2; ++k) {
    CHECK(g.dW[k].isZero());
    CHECK(g.dtheta[k] == 0.0);
  }
}

TEST_CASE("worker fan-out matches single worker") {
  const auto c = gradcheck::random_case(77, Activation::SoftThreshold, 1.0, true);
  Batch y(c.y.rows(), 13), x(c.x.rows(), 13);
  for (int i = 0; i < 13; ++i) {
    y.col(i) = c.y.col(i % 4) * (1.0 + 0.1 * i);
    x.col(i) = c.x.col(i % 4) * (1.0 + 0.1 * i);
  }
  const Gradients one = loss_and_gradients(c.net, c.a, y, x, LossKind::SquaredError, 1);
  for (std::size_t w : {2, 3, 5}) {
    const Gradients many = loss_and_gradients(c.net, c.a, y, x, LossKind::SquaredError, w);
    CHECK(many.loss == doctest::Approx(one.loss).epsilon(1e-12));
    CHECK(many.dscale == doctest::Approx(one.dscale).epsilon(1e-12));
    for (std::size_t k = 0; k < one.dW.size(); ++k) {
      CHECK((many.dW[k] - one.dW[k]).cwiseAbs().maxCoeff() <= 1e-12);
    }
    const Gradients again = loss_and_gradients(c.net, c.a, y, x, LossKind::SquaredError, w);
    CHECK(again.dscale == many.dscale);
  }
}

TEST_CASE("per-layer errors") {
  const DenseMatrix id = DenseMatrix::Identity(5, 5);
  Batch x = Batch::Zero(5, 3);
  x(0, 0) = 1;
  x(2, 1) = -2;
  x(4, 2) = 0.5;
  const auto perfect = per_layer_errors(make_net(3, id, 0.0, Activation::SoftThreshold), id, x, x);
  for (double v : perfect) CHECK(std::isinf(v));
  const auto zero = per_layer_errors(make_net(2, DenseMatrix::Zero(5, 5), 0.0, Activation::SoftThreshold), id, x, x);
  for (double v : zero) CHECK(v == doctest::Approx(0.0));

  const DenseMatrix a = oracle::random_matrix(4, 5, 8, 0.5);
  UnrolledNet net = make_net(2, a, 0.01, Activation::SoftThreshold);
  const Batch y = a * x;
  const auto curve = per_layer_errors(net, a, y, x);
  const ForwardTrace t = forward(net, a, y);
  for (std::size_t k = 0; k < 2; ++k) {
    double sum = 0.0;
    for (int s = 0; s < 3; ++s) sum += (t.states[k + 1].col(s) - x.col(s)).squaredNorm() / x.col(s).squaredNorm();
    CHECK(curve[k] == doctest::Approx(10 * std::log10(sum / 3)).epsilon(1e-12));
  }
}

TEST_CASE("net validation") {
  const DenseMatrix a = oracle::random_matrix(3, 4, 2);
  UnrolledNet net = make_net(2, a, 0.1, Activation::SoftThreshold);
  CHECK_NOTHROW(net.validate());
  UnrolledNet bad = net;
  bad.layers[0].theta = -1;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = net;
  bad.delta = 1.5;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = net;
  bad.quant_mode = QuantMode::OneBitGlobal;
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  bad = net;
  bad.mask = SparsityMask(3, 4, false);
  CHECK_THROWS_AS(bad.validate(), InvalidArgument);
  enforce_mask(bad);
  CHECK_NOTHROW(bad.validate());
  CHECK(parse_activation("hard") == Activation::HardThreshold);
  CHECK_THROWS_AS(parse_activation("tanh"), ConfigError);
  CHECK(parse_quant_mode("channel_wise") == QuantMode::ChannelWise);
  CHECK(to_string(QuantMode::OneBitGlobal) == "one_bit");
}

TEST_CASE("fully connected baseline gradients") {
  const FcnNet net = make_fcn(3, 4, 6, Activation::SoftThreshold, 0.05, 3);
  CHECK(net.layers[0].W.rows() == 4);
  CHECK(net.layers[1].W.rows() == 6);
  Batch y(4, 3), x = Batch::Zero(6, 3);
  for (int c = 0; c < 3; ++c) {
    y.col(c) = oracle::random_vector(4, 10 + c);
    x(c, c) = 1.0;
  }
  const ForwardTrace t = forward(net, y);
  const Gradients g = backward(net, y, x, t);
  FcnNet probe = net;
  const double h = 1e-6;
  const auto f = [&] { return batch_loss(forward(probe, y).output(), x, LossKind::SquaredError); };
  double worst = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    for (Eigen::Index i = 0; i < probe.layers[k].W.size(); ++i) {
      double& p = probe.layers[k].W.data()[i];
      const double keep = p;
      p = keep + h;
      const double up = f();
      p = keep - h;
      const double down = f();
      p = keep;
      worst = std::max(worst, gradcheck::rel_err(g.dW[k].data()[i], (up - down) / (2 * h)));
    }
  }
  CHECK(worst <= 1e-5);
}
