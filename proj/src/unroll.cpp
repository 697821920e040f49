#include "pibinn/unroll.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <thread>

#include "pibinn/diag.hpp"
#include "pibinn/errors.hpp"
#include "pibinn/rng.hpp"

namespace pibinn {
namespace {

// W^T r for one layer, honoring tied block weights.
Batch weight_transpose_apply(const UnrolledNet& net, const DenseMatrix& w, const Batch& r) {
  if (net.uses_block_weights()) return block_apply_transpose(w, net.structure->u, r);
  if (w.rows() != r.rows()) {
    throw DimensionError("layer weight has " + std::to_string(w.rows()) +
                         " rows but the residual has length " + std::to_string(r.rows()));
  }
  return w.transpose() * r;
}

Batch weight_apply(const UnrolledNet& net, const DenseMatrix& w, const Batch& g) {
  if (net.uses_block_weights()) return block_apply(w, net.structure->u, g);
  return w * g;
}

// d/dW of sum_b <g_b, -W^T r_b>, i.e. -r g^T folded onto the stored shape.
DenseMatrix weight_outer(const UnrolledNet& net, const Batch& r, const Batch& g) {
  if (net.uses_block_weights()) {
    const auto& s = *net.structure;
    const Eigen::Index slices = static_cast<Eigen::Index>(s.u) * r.cols();
    Eigen::Map<const Eigen::MatrixXd> rv(r.data(), s.v, slices);
    Eigen::Map<const Eigen::MatrixXd> gp(g.data(), s.p, slices);
    return -(rv * gp.transpose());
  }
  return -(r * g.transpose());
}

Batch residual(const LinearOperator& sensing, const Batch& x, const Batch& y) {
  Batch r = apply(sensing, x);
  r -= y;
  return r;
}

Batch loss_seed(const Batch& estimate, const Batch& target, LossKind kind) {
  const double inv_b = 1.0 / static_cast<double>(estimate.cols());
  Batch g = estimate - target;
  if (kind == LossKind::SquaredError) {
    g *= 2.0 * inv_b;
  } else {
    for (Eigen::Index c = 0; c < g.cols(); ++c) {
      const double nrm = g.col(c).norm();
      if (nrm > 0.0) {
        g.col(c) *= inv_b / nrm;
      } else {
        g.col(c).setZero();
      }
    }
  }
  return g;
}

void check_finite(const Batch& x, std::size_t layer) {
  if (!x.allFinite()) {
    throw NumericError("non-finite value in layer " + std::to_string(layer));
  }
}

}  // namespace

std::string_view to_string(Activation a) noexcept {
  switch (a) {
    case Activation::SoftThreshold: return "soft";
    case Activation::HardThreshold: return "hard";
    case Activation::Relu: return "relu";
  }
  return "?";
}

std::string_view to_string(QuantMode q) noexcept {
  switch (q) {
    case QuantMode::HighRes: return "high_res";
    case QuantMode::OneBitGlobal: return "one_bit";
    case QuantMode::Ternary: return "ternary";
    case QuantMode::ChannelWise: return "channel_wise";
  }
  return "?";
}

std::string_view to_string(LossKind l) noexcept {
  return l == LossKind::SquaredError ? "squared" : "norm";
}

Activation parse_activation(std::string_view s) {
  if (s == "soft" || s == "st") return Activation::SoftThreshold;
  if (s == "hard" || s == "ht") return Activation::HardThreshold;
  if (s == "relu") return Activation::Relu;
  throw ConfigError("unknown activation '" + std::string(s) + "' (soft|hard|relu)");
}

QuantMode parse_quant_mode(std::string_view s) {
  if (s == "high_res") return QuantMode::HighRes;
  if (s == "one_bit") return QuantMode::OneBitGlobal;
  if (s == "ternary") return QuantMode::Ternary;
  if (s == "channel_wise") return QuantMode::ChannelWise;
  throw ConfigError("unknown quant_mode '" + std::string(s) +
                    "' (high_res|one_bit|ternary|channel_wise)");
}

LossKind parse_loss_kind(std::string_view s) {
  if (s == "squared") return LossKind::SquaredError;
  if (s == "norm") return LossKind::NormError;
  throw ConfigError("unknown loss '" + std::string(s) + "' (squared|norm)");
}

std::size_t UnrolledNet::signal_dim() const {
  if (structure) return structure->cols();
  return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().W.cols());
}

std::size_t UnrolledNet::measurement_dim() const {
  if (structure) return structure->rows();
  return layers.empty() ? 0 : static_cast<std::size_t>(layers.front().W.rows());
}

void UnrolledNet::validate() const {
  if (layers.empty()) throw InvalidArgument("net needs at least one layer");
  if (!(delta > 0.0 && delta <= 1.0)) throw InvalidArgument("delta must lie in (0, 1]");
  if (!(scale > 0.0) || !std::isfinite(scale)) throw InvalidArgument("scale must be positive");
  if (!(lambda0 > 0.0)) throw InvalidArgument("lambda0 must be positive");
  Eigen::Index rows = layers.front().W.rows();
  Eigen::Index cols = layers.front().W.cols();
  if (uses_block_weights()) {
    rows = static_cast<Eigen::Index>(structure->v);
    cols = static_cast<Eigen::Index>(structure->p);
  } else if (structure) {
    rows = static_cast<Eigen::Index>(structure->rows());
    cols = static_cast<Eigen::Index>(structure->cols());
  }
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const auto& l = layers[k];
    if (l.W.rows() != rows || l.W.cols() != cols) {
      throw InvalidArgument("layer " + std::to_string(k) + " weight shape differs");
    }
    if (!(l.theta >= 0.0) || !std::isfinite(l.theta)) {
      throw InvalidArgument("layer " + std::to_string(k) + " threshold must be >= 0");
    }
    if (!all_finite(l.W)) throw InvalidArgument("layer " + std::to_string(k) + " has non-finite weights");
    for (Eigen::Index r = 0; r < l.W.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.W.cols(); ++c) {
        const double w = l.W(r, c);
        const bool active = !mask || mask->active(r, c);
        if (!active && w != 0.0) {
          throw InvalidArgument("layer " + std::to_string(k) + " has a nonzero masked weight");
        }
        if (active && quant_mode == QuantMode::OneBitGlobal && std::abs(w) != lambda0) {
          throw InvalidArgument("layer " + std::to_string(k) +
                                " has a weight outside {-lambda0, +lambda0}");
        }
      }
    }
  }
  if (mask && (mask->rows() != static_cast<std::size_t>(rows) ||
               mask->cols() != static_cast<std::size_t>(cols))) {
    throw InvalidArgument("mask shape differs from weight shape");
  }
}

UnrolledNet make_net(std::size_t layers, const DenseMatrix& init_weight, double theta,
                     Activation activation, double delta) {
  if (layers == 0) throw InvalidArgument("net needs at least one layer");
  UnrolledNet net;
  net.layers.assign(layers, LayerParams{init_weight, theta});
  net.activation = activation;
  net.delta = delta;
  return net;
}

void enforce_mask(UnrolledNet& net) {
  if (!net.mask) return;
  for (auto& l : net.layers) apply_mask_inplace(l.W, *net.mask);
}

double activate(Activation kind, double z, double theta) noexcept {
  switch (kind) {
    case Activation::SoftThreshold:
      if (z > theta) return z - theta;
      if (z < -theta) return z + theta;
      return 0.0;
    case Activation::HardThreshold:
      return std::abs(z) > theta ? z : 0.0;
    case Activation::Relu:
      return z >= 0.0 ? z : 0.0;
  }
  return 0.0;
}

double activate_dz(Activation kind, double z, double theta) noexcept {
  switch (kind) {
    case Activation::SoftThreshold:
    case Activation::HardThreshold:
      return (theta == 0.0 || std::abs(z) > theta) ? 1.0 : 0.0;
    case Activation::Relu:
      return z > 0.0 ? 1.0 : 0.0;
  }
  return 0.0;
}

double activate_dtheta(Activation kind, double z, double theta) noexcept {
  if (kind != Activation::SoftThreshold || std::abs(z) <= theta) return 0.0;
  return z > 0.0 ? -1.0 : 1.0;
}

Vector soft_threshold(const Vector& x, double theta) {
  if (!(theta >= 0.0)) throw InvalidArgument("soft_threshold: theta must be >= 0");
  return x.unaryExpr([theta](double z) { return activate(Activation::SoftThreshold, z, theta); });
}

Vector hard_threshold(const Vector& x, double theta) {
  if (!(theta >= 0.0)) throw InvalidArgument("hard_threshold: theta must be >= 0");
  return x.unaryExpr([theta](double z) { return activate(Activation::HardThreshold, z, theta); });
}

ForwardTrace forward(const UnrolledNet& net, const LinearOperator& sensing, const Batch& y,
                     const std::optional<Batch>& x0) {
  if (net.layers.empty()) throw InvalidArgument("forward: net has no layers");
  const auto n = static_cast<Eigen::Index>(cols(sensing));
  if (static_cast<Eigen::Index>(rows(sensing)) != y.rows()) {
    throw DimensionError("forward: measurement length " + std::to_string(y.rows()) +
                         " does not match sensing rows " + std::to_string(rows(sensing)));
  }
  if (x0 && (x0->rows() != n || x0->cols() != y.cols())) {
    throw DimensionError("forward: x0 shape mismatch");
  }
  if (net.uses_block_weights() &&
      (n != static_cast<Eigen::Index>(net.structure->cols()) ||
       y.rows() != static_cast<Eigen::Index>(net.structure->rows()))) {
    throw DimensionError("forward: block structure does not match the sensing operator");
  }
  if (!net.uses_block_weights() &&
      (net.layers.front().W.rows() != y.rows() || net.layers.front().W.cols() != n)) {
    throw DimensionError("forward: weight shape does not match the sensing operator");
  }

  const double mult = net.weight_multiplier();
  ForwardTrace trace;
  trace.states.reserve(net.depth() + 1);
  trace.pre_activations.reserve(net.depth());
  trace.states.push_back(x0 ? *x0 : Batch::Zero(n, y.cols()));
  for (std::size_t k = 0; k < net.depth(); ++k) {
    const auto& layer = net.layers[k];
    const Batch& x = trace.states.back();
    DenseMatrix scaled;
    if (mult != 1.0) scaled = mult * layer.W;
    const DenseMatrix& w = mult != 1.0 ? scaled : layer.W;
    Batch z = net.delta * x - weight_transpose_apply(net, w, residual(sensing, x, y));
    Batch next = z.unaryExpr(
        [&](double v) { return activate(net.activation, v, layer.theta); });
    check_finite(next, k + 1);
    trace.pre_activations.push_back(std::move(z));
    trace.states.push_back(std::move(next));
  }
  return trace;
}

double loss(const Vector& estimate, const Vector& target, LossKind kind) {
  if (estimate.size() != target.size()) throw DimensionError("loss: length mismatch");
  const double sq = (estimate - target).squaredNorm();
  return kind == LossKind::SquaredError ? sq : std::sqrt(sq);
}

double batch_loss(const Batch& estimate, const Batch& target, LossKind kind) {
  if (estimate.rows() != target.rows() || estimate.cols() != target.cols()) {
    throw DimensionError("batch_loss: shape mismatch");
  }
  if (estimate.cols() == 0) return 0.0;
  double total = 0.0;
  for (Eigen::Index c = 0; c < estimate.cols(); ++c) {
    const double sq = (estimate.col(c) - target.col(c)).squaredNorm();
    total += kind == LossKind::SquaredError ? sq : std::sqrt(sq);
  }
  return total / static_cast<double>(estimate.cols());
}

Gradients Gradients::zeros_like(const UnrolledNet& net) {
  Gradients g;
  for (const auto& l : net.layers) g.dW.push_back(DenseMatrix::Zero(l.W.rows(), l.W.cols()));
  g.dtheta.assign(net.depth(), 0.0);
  return g;
}

void Gradients::axpy(double a, const Gradients& other) {
  for (std::size_t k = 0; k < dW.size(); ++k) dW[k] += a * other.dW[k];
  for (std::size_t k = 0; k < dtheta.size(); ++k) dtheta[k] += a * other.dtheta[k];
  dscale += a * other.dscale;
  loss += a * other.loss;
}

bool Gradients::all_finite() const noexcept {
  for (const auto& w : dW) {
    if (!w.allFinite()) return false;
  }
  for (double t : dtheta) {
    if (!std::isfinite(t)) return false;
  }
  return std::isfinite(dscale) && std::isfinite(loss);
}

Gradients backward(const UnrolledNet& net, const LinearOperator& sensing, const Batch& y,
                   const Batch& x_opt, const ForwardTrace& trace, LossKind kind) {
  if (trace.states.size() != net.depth() + 1 || trace.pre_activations.size() != net.depth()) {
    throw InvalidArgument("backward: trace depth does not match the net");
  }
  const Batch& out = trace.output();
  if (out.cols() != y.cols() || out.rows() != x_opt.rows() || x_opt.cols() != y.cols()) {
    throw InvalidArgument("backward: stale trace (shape differs from inputs)");
  }

  const double mult = net.weight_multiplier();
  Gradients grads = Gradients::zeros_like(net);
  grads.loss = batch_loss(out, x_opt, kind);
  Batch g = loss_seed(out, x_opt, kind);

  for (std::size_t k = net.depth(); k-- > 0;) {
    const auto& layer = net.layers[k];
    const Batch& z = trace.pre_activations[k];
    Batch gz(z.rows(), z.cols());
    double dtheta = 0.0;
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      for (Eigen::Index r = 0; r < z.rows(); ++r) {
        const double zv = z(r, c);
        gz(r, c) = g(r, c) * activate_dz(net.activation, zv, layer.theta);
        dtheta += g(r, c) * activate_dtheta(net.activation, zv, layer.theta);
      }
    }
    grads.dtheta[k] = dtheta;

    const Batch r = residual(sensing, trace.states[k], y);
    const DenseMatrix d_eff = weight_outer(net, r, gz);
    grads.dW[k] = mult * d_eff;
    if (net.quant_mode == QuantMode::OneBitGlobal) {
      grads.dscale += d_eff.cwiseProduct(layer.W).sum();
    }
    if (k > 0) {
      g = net.delta * gz - mult * apply_transpose(sensing, weight_apply(net, layer.W, gz));
    }
  }
  return grads;
}

Gradients loss_and_gradients(const UnrolledNet& net, const LinearOperator& sensing,
                             const Batch& y, const Batch& x_opt, LossKind kind,
                             std::size_t workers) {
  const Eigen::Index total = y.cols();
  workers = std::max<std::size_t>(1, std::min<std::size_t>(workers, total));
  if (workers == 1) {
    return backward(net, sensing, y, x_opt, forward(net, sensing, y), kind);
  }
  std::vector<Gradients> partial(workers);
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::pair<Eigen::Index, Eigen::Index>> ranges(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    const Eigen::Index begin = total * static_cast<Eigen::Index>(w) / static_cast<Eigen::Index>(workers);
    const Eigen::Index end = total * static_cast<Eigen::Index>(w + 1) / static_cast<Eigen::Index>(workers);
    ranges[w] = {begin, end - begin};
  }
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          const auto [begin, len] = ranges[w];
          const Batch yc = y.middleCols(begin, len);
          const Batch xc = x_opt.middleCols(begin, len);
          partial[w] = backward(net, sensing, yc, xc, forward(net, sensing, yc), kind);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  Gradients sum = Gradients::zeros_like(net);
  for (std::size_t w = 0; w < workers; ++w) {
    sum.axpy(static_cast<double>(ranges[w].second) / static_cast<double>(total), partial[w]);
  }
  return sum;
}

std::vector<double> per_layer_errors(const UnrolledNet& net, const LinearOperator& sensing,
                                     const Batch& y, const Batch& x_opt) {
  if (y.cols() == 0) throw InvalidArgument("per_layer_errors: empty dataset");
  const auto trace = forward(net, sensing, y);
  std::vector<double> curve;
  curve.reserve(net.depth());
  for (std::size_t k = 1; k <= net.depth(); ++k) curve.push_back(nmse_db(trace.states[k], x_opt));
  return curve;
}

std::vector<std::span<double>> parameter_spans(UnrolledNet& net) {
  std::vector<std::span<double>> spans;
  for (auto& l : net.layers) spans.emplace_back(l.W.data(), static_cast<std::size_t>(l.W.size()));
  for (auto& l : net.layers) spans.emplace_back(&l.theta, 1);
  return spans;
}

std::vector<std::span<const double>> gradient_spans(const Gradients& grads) {
  std::vector<std::span<const double>> spans;
  for (const auto& w : grads.dW) spans.emplace_back(w.data(), static_cast<std::size_t>(w.size()));
  for (const auto& t : grads.dtheta) spans.emplace_back(&t, 1);
  return spans;
}

FcnNet make_fcn(std::size_t layers, std::size_t m, std::size_t n, Activation activation,
                double theta, std::uint64_t seed) {
  if (layers == 0) throw InvalidArgument("fcn needs at least one layer");
  FcnNet net;
  net.activation = activation;
  for (std::size_t k = 0; k < layers; ++k) {
    const std::size_t fan_in = k == 0 ? m : n;
    DenseMatrix w(fan_in, n);
    const rng::Key key{seed, 0xfc0000ULL + k};
    const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = sd * rng::normal(key, i);
    net.layers.push_back({std::move(w), theta});
  }
  return net;
}

ForwardTrace forward(const FcnNet& net, const Batch& y) {
  if (net.layers.empty()) throw InvalidArgument("forward: fcn has no layers");
  if (net.layers.front().W.rows() != y.rows()) throw DimensionError("forward: fcn input length mismatch");
  ForwardTrace trace;
  trace.states.push_back(y);
  for (std::size_t k = 0; k < net.depth(); ++k) {
    const auto& layer = net.layers[k];
    Batch z = layer.W.transpose() * trace.states.back();
    Batch next = z.unaryExpr([&](double v) { return activate(net.activation, v, layer.theta); });
    check_finite(next, k + 1);
    trace.pre_activations.push_back(std::move(z));
    trace.states.push_back(std::move(next));
  }
  return trace;
}

Gradients backward(const FcnNet& net, const Batch& y, const Batch& x_opt,
                   const ForwardTrace& trace, LossKind kind) {
  if (trace.states.size() != net.depth() + 1) throw InvalidArgument("backward: stale fcn trace");
  (void)y;
  Gradients grads;
  grads.dW.resize(net.depth());
  grads.dtheta.assign(net.depth(), 0.0);
  grads.loss = batch_loss(trace.output(), x_opt, kind);
  Batch g = loss_seed(trace.output(), x_opt, kind);
  for (std::size_t k = net.depth(); k-- > 0;) {
    const auto& layer = net.layers[k];
    const Batch& z = trace.pre_activations[k];
    Batch gz(z.rows(), z.cols());
    double dtheta = 0.0;
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
      for (Eigen::Index r = 0; r < z.rows(); ++r) {
        gz(r, c) = g(r, c) * activate_dz(net.activation, z(r, c), layer.theta);
        dtheta += g(r, c) * activate_dtheta(net.activation, z(r, c), layer.theta);
      }
    }
    grads.dtheta[k] = dtheta;
    grads.dW[k] = trace.states[k] * gz.transpose();
    if (k > 0) g = layer.W * gz;
  }
  return grads;
}

std::vector<std::span<double>> parameter_spans(FcnNet& net) {
  std::vector<std::span<double>> spans;
  for (auto& l : net.layers) spans.emplace_back(l.W.data(), static_cast<std::size_t>(l.W.size()));
  for (auto& l : net.layers) spans.emplace_back(&l.theta, 1);
  return spans;
}

}  // namespace pibinn
