#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "pibinn/data.hpp"
#include "pibinn/diag.hpp"
#include "pibinn/quant.hpp"
#include "pibinn/unroll.hpp"

namespace pibinn {

enum class ModelKind { Dun, Fcn };
ModelKind parse_model_kind(std::string_view s);
std::string_view to_string(ModelKind k) noexcept;

struct ModelSpec {
  ModelKind kind = ModelKind::Dun;
  std::size_t layers = 5;
  double delta = 1.0;
  Activation activation = Activation::SoftThreshold;
  QuantMode quant_mode = QuantMode::HighRes;
  /// Use the dataset's block structure (tied block weights when
  /// tied_blocks, a block mask otherwise). Ignored without a structure.
  bool use_structure = true;
  bool tied_blocks = true;
  /// Initial threshold in units of 1 / ||A||^2 for unrolled nets; absolute
  /// for the fully connected baseline.
  double theta0 = 0.1;
  LossKind loss = LossKind::SquaredError;
};

nlohmann::ordered_json to_json(const ModelSpec& m);
ModelSpec model_spec_from_json(const nlohmann::json& j);

struct StageSchedule {
  std::size_t epochs = 0;
  double lr0 = 1e-3;
  double decay = 1.0;
  std::size_t decay_every = 10;
  OptimizerKind optimizer = OptimizerKind::Adam;

  double learning_rate(std::size_t epoch) const;
};

nlohmann::ordered_json to_json(const StageSchedule& s);
/// `epochs` is mandatory.
StageSchedule stage_schedule_from_json(const nlohmann::json& j, const std::string& where);

struct TrainConfig {
  ModelSpec model;
  bool pretrain_enabled = true;
  StageSchedule pretrain;
  /// Stage I (one-bit) or the STE loop of the ternary/channel-wise baselines.
  QuantConfig quant;
  StageSchedule stage2{0, 1e-3, 1.0, 10, OptimizerKind::Adam};
  ScaleAxis scale_axis = ScaleAxis::Row;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  std::size_t workers = 1;

  void validate() const;
};

/// Keys: model, pretrain, no_pretrain, quant, stage2, scale_axis,
/// batch_size, seed. Stages that will run must state their epoch count.
TrainConfig train_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const TrainConfig& c);

using Model = std::variant<UnrolledNet, FcnNet>;

/// Initial model for a dataset: W_k = A / ||A||^2 (the block when tied),
/// theta_k = theta0 / ||A||^2; or a Gaussian fully connected net.
Model init_model(const ModelSpec& spec, const Dataset& data, std::uint64_t seed);

/// Network output for a batch of measurements.
Batch predict(const Model& model, const LinearOperator& sensing, const Batch& y);
/// Per-layer NMSE curve of a model.
std::vector<double> layer_curve(const Model& model, const LinearOperator& sensing,
                                const Split& split);

struct EpochRecord {
  std::string stage;
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;
  /// Global scale after the epoch (Stage II only).
  double scale = 1.0;
};

struct TrainResult {
  Model model;
  std::vector<EpochRecord> history;
  std::vector<StageTime> wall_times;
  /// Populated when Stage II ran.
  std::optional<ScaleResult> stage2;
  /// Net right after Stage I (one-bit only), scale still 1.
  std::optional<UnrolledNet> stage1_net;
};

/// Called after every epoch with the current model; used for checkpoints.
using EpochHook = std::function<void(const EpochRecord&, const Model&)>;

/// pretrain (high-res) -> Stage I / STE loop -> Stage II (one-bit only).
/// Errors carry the stage and epoch.
TrainResult train_model(const TrainConfig& config, const Dataset& data,
                        const EpochHook& hook = {});

/// Continues from an existing full-precision net: skips initialization and,
/// when `pretrained` is set, the pretraining stage.
TrainResult train_model_from(const TrainConfig& config, const Dataset& data, Model start,
                             bool pretrained, const EpochHook& hook = {});

/// Effective bits and stored weight count of any model.
std::uint64_t model_bits(const Model& model, ScaleAxis axis = ScaleAxis::Row);
std::uint64_t model_params(const Model& model);

/// Train/test NMSE, gap, per-layer curve (test split), bits and params.
MetricsReport evaluate(const Model& model, const Dataset& data, ScaleAxis axis = ScaleAxis::Row);

/// checkpoint.json + weights.bin in `dir`, written through temporary files
/// and renamed so an interrupted write never leaves a half checkpoint.
void save_checkpoint(const Model& model, const std::filesystem::path& dir);
Model load_checkpoint(const std::filesystem::path& dir);

/// Per-epoch loss log as CSV (stage,epoch,lr,loss,scale).
std::string history_csv(const std::vector<EpochRecord>& history);

}  // namespace pibinn
