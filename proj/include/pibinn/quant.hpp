#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pibinn/data.hpp"
#include "pibinn/optim.hpp"
#include "pibinn/unroll.hpp"

namespace pibinn {

enum class QatMode { LazyProjection, ProxRegularized };
enum class ScaleAxis { Row, Column, Matrix };

QatMode parse_qat_mode(std::string_view s);
std::string_view to_string(QatMode m) noexcept;
ScaleAxis parse_scale_axis(std::string_view s);
std::string_view to_string(ScaleAxis a) noexcept;

inline constexpr double kDefaultLambda0 = 0.02;

struct QuantConfig {
  QatMode mode = QatMode::LazyProjection;
  double lambda0 = kDefaultLambda0;
  /// Regularization weight of the prox variant.
  double beta = 0.0;
  double lr0 = 1e-3;
  double decay = 0.9;
  std::size_t decay_every = 10;
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::Adam;

  /// Learning rate after `epoch` completed epochs.
  double learning_rate(std::size_t epoch) const;
  void validate() const;
};

nlohmann::ordered_json to_json(const QuantConfig& c);
/// Keys: mode, lambda0, beta, lr0, decay, decay_every, epochs, seed,
/// optimizer. Absent keys keep their defaults; throws ConfigError.
QuantConfig quant_config_from_json(const nlohmann::json& j);

/// Minibatch settings shared by every epoch routine.
struct EpochOptions {
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  /// Epoch index; selects the shuffle.
  std::size_t epoch = 0;
  LossKind loss = LossKind::SquaredError;
  std::size_t workers = 1;
};

/// Deterministic shuffle of [0, count) for one epoch.
std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::size_t epoch);

/// Calls fn(y_batch, x_batch) for every minibatch of the shuffled split.
void for_each_batch(const Split& split, const EpochOptions& opts,
                    const std::function<void(const Batch&, const Batch&)>& fn);

/// Full-precision training epoch on the net itself (used for pretraining).
/// Returns the mean minibatch loss. Thresholds are clamped to >= 0 and the
/// mask re-applied after every step.
double train_epoch(UnrolledNet& net, Optimizer& optimizer, const LinearOperator& sensing,
                   const Split& split, double lr, const EpochOptions& opts);
double train_epoch(FcnNet& net, Optimizer& optimizer, const Split& split, double lr,
                   const EpochOptions& opts);

/// lambda0 * sign(latent) with sign(0) = +1; inactive mask positions are 0.
DenseMatrix sign_project(const DenseMatrix& latent, double lambda0,
                         const std::optional<SparsityMask>& mask = std::nullopt);

/// Latent full-precision parameters behind a quantized net.
struct ShadowState {
  /// Same layout as the quantized net, evaluated in HighRes mode.
  UnrolledNet latent;
  double lambda0 = kDefaultLambda0;
  Optimizer optimizer;

  /// Latent copy of `net` (weights and thresholds).
  static ShadowState from_net(const UnrolledNet& net, double lambda0, OptimizerKind kind);
};

/// Maps a latent weight matrix to the weights stored in the quantized net.
using Projection = std::function<DenseMatrix(const DenseMatrix&)>;

Projection one_bit_projection(double lambda0, const std::optional<SparsityMask>& mask);
Projection ternary_projection(ScaleAxis axis, const std::optional<SparsityMask>& mask);
Projection channelwise_projection(const std::optional<SparsityMask>& mask);

/// Overwrites net weights with project(latent) and copies the thresholds.
void refresh_projection(UnrolledNet& net, const ShadowState& shadow, const Projection& project);

/// Lazy projection / straight-through epoch: gradients are evaluated at the
/// projected net and applied to the latent parameters; the net is refreshed
/// after every step. Throws NumericError on a non-finite gradient.
double ste_epoch(UnrolledNet& net, ShadowState& shadow, const LinearOperator& sensing,
                 const Split& split, double lr, const EpochOptions& opts,
                 const Projection& project);

/// min(|w - lambda0|, |w + lambda0|).
double prox_regularizer(double w, double lambda0);
/// argmin_z 0.5 (z - w)^2 + t * prox_regularizer(z, lambda0): move toward
/// the nearer anchor by t without crossing it; w = 0 moves toward +lambda0.
double prox_step(double w, double t, double lambda0);

/// Gradient step on the latent parameters (evaluated at the latent net)
/// followed by prox_step with t = lr * beta on every active weight. The
/// projected net is refreshed afterwards.
double prox_epoch(UnrolledNet& net, ShadowState& shadow, const LinearOperator& sensing,
                  const Split& split, double lr, double beta, const EpochOptions& opts);

struct ScaleResult {
  double scale = 1.0;
  double initial_loss = 0.0;
  double best_loss = 0.0;
  std::vector<double> epoch_losses;
  bool diverged = false;
};

inline constexpr std::size_t kDivergencePatience = 20;

/// Optimizes the single global scale of a one-bit net with signs and
/// thresholds frozen. Starts from scale 1 and keeps the best full-train-loss
/// scale seen; stops after kDivergencePatience consecutive loss increases.
/// The returned scale is also written into `net`. `on_epoch` sees the epoch
/// index and full train loss while net.scale holds that epoch's value.
using ScaleEpochHook = std::function<void(std::size_t, double)>;
ScaleResult stage2_scale(UnrolledNet& net, const LinearOperator& sensing, const Split& split,
                         double lr, std::size_t epochs, const EpochOptions& opts,
                         OptimizerKind optimizer = OptimizerKind::Adam,
                         const ScaleEpochHook& on_epoch = {});

struct ScaledSigns {
  /// Entries in {-1, 0, +1} (ternary) or {-1, +1} (binary).
  DenseMatrix levels;
  /// One scale per row, per column, or a single entry, depending on axis.
  std::vector<double> scales;
  ScaleAxis axis = ScaleAxis::Row;

  DenseMatrix reconstruction() const;
};

inline constexpr double kTernaryCut = 0.5;

/// Per-group scale gamma = mean |w| (1 for an all-zero group); w / gamma in
/// (-0.5, 0.5) maps to 0, otherwise to its sign.
ScaledSigns ternary_project(const DenseMatrix& w, ScaleAxis axis = ScaleAxis::Row);

/// Per-row gamma = mean |w|, levels sign(w) with sign(0) = +1.
ScaledSigns channelwise_binarize(const DenseMatrix& w);

/// Stored bits: 1 per active one-bit weight, 2 per ternary weight, 32 per
/// full-precision weight, scalar, threshold, row scale or global scale.
/// Structural zeros cost nothing.
/// Ternary nets count one 32-bit scale per group along `axis`.
std::uint64_t effective_bits(const UnrolledNet& net, ScaleAxis axis = ScaleAxis::Row);

/// Weight entries that carry information (active positions).
std::uint64_t stored_weight_count(const UnrolledNet& net);

}  // namespace pibinn
