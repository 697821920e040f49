#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pibinn/linalg.hpp"
#include "pibinn/physics.hpp"

namespace pibinn {

enum class Activation { SoftThreshold, HardThreshold, Relu };
enum class QuantMode { HighRes, OneBitGlobal, Ternary, ChannelWise };
enum class LossKind { SquaredError, NormError };

std::string_view to_string(Activation a) noexcept;
std::string_view to_string(QuantMode q) noexcept;
std::string_view to_string(LossKind l) noexcept;
Activation parse_activation(std::string_view s);
QuantMode parse_quant_mode(std::string_view s);
LossKind parse_loss_kind(std::string_view s);

/// One unrolled iteration: x <- act(delta * x - W_eff^T (A x - y)).
/// W has the sensing operator's shape (or the v x p block when the net uses
/// tied block weights).
struct LayerParams {
  DenseMatrix W;
  double theta = 0.0;
};

struct UnrolledNet {
  std::vector<LayerParams> layers;
  double delta = 1.0;
  Activation activation = Activation::SoftThreshold;
  /// Global scale; multiplies the stored weights only in OneBitGlobal mode.
  double scale = 1.0;
  double lambda0 = 0.02;
  QuantMode quant_mode = QuantMode::HighRes;
  /// Physics-driven block structure. When tied, each layer stores a single
  /// v x p block applied as BlockDiag_u(W); otherwise W is dense and the
  /// block pattern is enforced through `mask`.
  std::optional<BlockStructure> structure;
  bool tied_blocks = true;
  /// Zero pattern for dense weights (untied blocks or irregular masks).
  std::optional<SparsityMask> mask;

  std::size_t depth() const noexcept { return layers.size(); }
  bool uses_block_weights() const noexcept { return structure && tied_blocks; }
  /// Factor turning stored weights into effective weights.
  double weight_multiplier() const noexcept {
    return quant_mode == QuantMode::OneBitGlobal ? scale : 1.0;
  }
  /// Signal length n and measurement length m the net expects.
  std::size_t signal_dim() const;
  std::size_t measurement_dim() const;

  /// Checks K >= 1, delta in (0, 1], theta >= 0, scale > 0, consistent
  /// shapes, finiteness, the mask and (in OneBitGlobal mode) that every
  /// active weight is +-lambda0. Throws InvalidArgument.
  void validate() const;
};

/// Net with every W_k = init_weight and theta_k = theta. With a tied block
/// structure, `init_weight` is the v x p block.
UnrolledNet make_net(std::size_t layers, const DenseMatrix& init_weight, double theta,
                     Activation activation, double delta = 1.0);

/// Zeroes masked positions of every layer (no-op without a mask).
void enforce_mask(UnrolledNet& net);

Vector soft_threshold(const Vector& x, double theta);
Vector hard_threshold(const Vector& x, double theta);

double activate(Activation kind, double z, double theta) noexcept;
/// d act / d z with the closed dead zone |z| <= theta giving 0 (theta = 0
/// is the identity, derivative 1).
double activate_dz(Activation kind, double z, double theta) noexcept;
double activate_dtheta(Activation kind, double z, double theta) noexcept;

struct ForwardTrace {
  /// x_0 ... x_K, one sample per column.
  std::vector<Batch> states;
  /// z_1 ... z_K.
  std::vector<Batch> pre_activations;

  const Batch& output() const { return states.back(); }
};

/// Runs every layer on a batch of measurements. x0 defaults to zero. Throws
/// DimensionError on shape mismatch and NumericError (naming the layer) on
/// non-finite intermediates.
ForwardTrace forward(const UnrolledNet& net, const LinearOperator& sensing,
                     const Batch& y, const std::optional<Batch>& x0 = std::nullopt);

/// Per-sample loss.
double loss(const Vector& estimate, const Vector& target, LossKind kind);
/// Mean per-sample loss over a batch.
double batch_loss(const Batch& estimate, const Batch& target, LossKind kind);

/// Gradients of the mean batch loss with respect to the stored weights,
/// thresholds and the global scale.
struct Gradients {
  std::vector<DenseMatrix> dW;
  std::vector<double> dtheta;
  double dscale = 0.0;
  double loss = 0.0;

  static Gradients zeros_like(const UnrolledNet& net);
  void axpy(double a, const Gradients& other);
  bool all_finite() const noexcept;
};

Gradients backward(const UnrolledNet& net, const LinearOperator& sensing, const Batch& y,
                   const Batch& x_opt, const ForwardTrace& trace,
                   LossKind kind = LossKind::SquaredError);

/// forward + backward, optionally fanning contiguous column chunks out to
/// `workers` threads; partial results are reduced in chunk order.
Gradients loss_and_gradients(const UnrolledNet& net, const LinearOperator& sensing,
                             const Batch& y, const Batch& x_opt, LossKind kind,
                             std::size_t workers = 1);

/// Mean NMSE in dB of every layer output x_1..x_K over the samples. Samples
/// with zero-norm targets are skipped; -inf marks exact recovery.
std::vector<double> per_layer_errors(const UnrolledNet& net, const LinearOperator& sensing,
                                     const Batch& y, const Batch& x_opt);

/// Flat views used by the optimizers: one span per weight matrix followed by
/// one span per threshold.
std::vector<std::span<double>> parameter_spans(UnrolledNet& net);
std::vector<std::span<const double>> gradient_spans(const Gradients& grads);

/// Fully connected baseline: h_1 = act(W_1^T y), h_k = act(W_k^T h_{k-1})
/// with W_1 of size m x n and W_k of size n x n for k >= 2.
struct FcnNet {
  std::vector<LayerParams> layers;
  Activation activation = Activation::SoftThreshold;

  std::size_t depth() const noexcept { return layers.size(); }
};

/// Gaussian initialization with variance 1 / fan_in.
FcnNet make_fcn(std::size_t layers, std::size_t m, std::size_t n, Activation activation,
                double theta, std::uint64_t seed);
ForwardTrace forward(const FcnNet& net, const Batch& y);
Gradients backward(const FcnNet& net, const Batch& y, const Batch& x_opt,
                   const ForwardTrace& trace, LossKind kind = LossKind::SquaredError);
std::vector<std::span<double>> parameter_spans(FcnNet& net);

}  // namespace pibinn
