#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pibinn/linalg.hpp"

namespace pibinn {

struct UnrolledNet;
struct ForwardTrace;

/// NMSE ratios below this report as exact recovery (-inf dB).
inline constexpr double kNmseFloor = 1e-15;
/// Numeric stand-in for -inf dB in CSV columns.
inline constexpr double kCsvDbFloor = -150.0;

/// Mean of ||x_hat - x||^2 / ||x||^2 over samples with nonzero targets.
/// Throws InvalidArgument when no such sample exists.
double nmse_ratio(const Batch& estimates, const Batch& truths);
/// Samples left out of nmse_ratio because their target is zero.
std::size_t zero_target_count(const Batch& truths);
/// 10 log10 of nmse_ratio; -inf when the ratio is below kNmseFloor.
double nmse_db(const Batch& estimates, const Batch& truths);

double gen_gap(double train_nmse_db, double test_nmse_db);

/// max over i != j of |W_i^T Q_j| for columns W_i of `w` and Q_j of `q`.
double mu_coherence(const DenseMatrix& w, const DenseMatrix& q);

/// || delta I - W_S^T Q_S || for equally shaped r x s matrices.
double spectral_term(const DenseMatrix& w_support, const DenseMatrix& q_support, double delta);

enum class SpectralVariant { SoftThreshold, HardThreshold };
SpectralVariant parse_spectral_variant(std::string_view s);

/// Effective (scaled) weight columns indexed by `support`, shape m x s.
DenseMatrix effective_weight_columns(const UnrolledNet& net, std::size_t layer,
                                     const IndexSet& support);
/// Sensing columns indexed by `support`, shape m x s.
DenseMatrix sensing_columns(const LinearOperator& sensing, const IndexSet& support);
/// Generalized coherence of a layer's effective weights against the sensing
/// operator, evaluated blockwise for tied block nets.
double layer_coherence(const UnrolledNet& net, std::size_t layer, const LinearOperator& sensing);

/// Per-layer f_k = ||delta I - W_{S,k}^T A_S|| (+ mu_k * s for the soft
/// variant) using effective weights. `delta` overrides net.delta when set.
std::vector<double> spectral_fk(const UnrolledNet& net, const LinearOperator& sensing,
                                const IndexSet& support, SpectralVariant variant,
                                std::optional<double> delta = std::nullopt);

struct GoodSetLayer {
  double fk = 0.0;
  bool good = false;
  /// W_i^T A_i for every i in the support.
  std::vector<double> self_products;
};

/// f_k < 1 (strict) per layer plus the diagonal products for inspection.
std::vector<GoodSetLayer> good_set_check(const UnrolledNet& net, const LinearOperator& sensing,
                                         const IndexSet& support, SpectralVariant variant,
                                         double delta);

/// theta_k = mu_k * max over samples of ||x_{k-1} - x_opt||_1 (analysis
/// only).
std::vector<double> theory_theta(const ForwardTrace& trace, const UnrolledNet& net,
                                 const LinearOperator& sensing, const Batch& x_opt);

enum class BitModel { FcnRelu, FcnSt, Dun, OneBitDun };
BitModel parse_bit_model(std::string_view s);

/// Storage bits of the four reference models. The fully connected variants
/// store an m x n input layer plus K - 1 square n x n layers.
std::uint64_t bit_count(BitModel model, std::uint64_t layers, std::uint64_t m, std::uint64_t n);

struct StageTime {
  std::string stage;
  double seconds = 0.0;
};

struct MetricsReport {
  double train_nmse_db = 0.0;
  double test_nmse_db = 0.0;
  double gap_db = 0.0;
  std::uint64_t bits = 0;
  std::uint64_t params = 0;
  std::vector<double> fk_curve;
  std::optional<double> overlap;
  std::vector<double> layer_curve;
  std::vector<StageTime> wall_times;
};

/// Fills gap_db from the two NMSE values.
MetricsReport make_report(double train_nmse_db, double test_nmse_db);

/// -inf becomes the string "-inf", other values stay numbers.
nlohmann::ordered_json db_to_json(double db);
double db_from_json(const nlohmann::json& j);

nlohmann::ordered_json to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);

enum class ReportFormat { Json, Csv };

/// Writes `<base>.json`, or `<base>.csv` with one row per layer (layer,
/// layer_nmse_db, fk). Throws IoError when the file cannot be written.
void emit_report(const MetricsReport& report, const std::filesystem::path& base,
                 ReportFormat format);

/// CSV rendering used by emit_report.
std::string report_csv(const MetricsReport& report);

}  // namespace pibinn
