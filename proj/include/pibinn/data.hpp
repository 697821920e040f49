#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "pibinn/linalg.hpp"
#include "pibinn/physics.hpp"
#include "pibinn/rng.hpp"

namespace pibinn {

/// Generator stream ids; train and test never share a stream.
namespace streams {
inline constexpr std::uint64_t kSensing = 1;
inline constexpr std::uint64_t kTrainSignals = 2;
inline constexpr std::uint64_t kTestSignals = 3;
inline constexpr std::uint64_t kTrainNoise = 4;
inline constexpr std::uint64_t kTestNoise = 5;
inline constexpr std::uint64_t kPatches = 6;
}  // namespace streams

struct DatasetSpec {
  /// Measurement and signal length; with a block structure these are the
  /// per-block sizes v and p.
  std::size_t m = 50;
  std::size_t n = 100;
  double p_nonzero = 0.05;
  std::size_t n_train = 4000;
  std::size_t n_test = 1000;
  double noise_std = 0.0;
  std::uint64_t seed = 0;
  /// When set, only these coordinates may be nonzero (each still drawn with
  /// probability p_nonzero).
  std::optional<IndexSet> fixed_support;
  std::optional<BlockStructure> structure;

  /// Throws ConfigError on an invalid combination.
  void validate() const;
  std::size_t signal_dim() const noexcept { return structure ? structure->cols() : n; }
  std::size_t measurement_dim() const noexcept { return structure ? structure->rows() : m; }
};

nlohmann::ordered_json to_json(const DatasetSpec& spec);
/// Reads a spec, filling defaults for absent keys; throws ConfigError on
/// bad types or values.
DatasetSpec dataset_spec_from_json(const nlohmann::json& j);

/// One half of a dataset; sample i is column i of y and x.
struct Split {
  Batch y;
  Batch x;
  std::vector<IndexSet> supports;

  std::size_t size() const noexcept { return static_cast<std::size_t>(x.cols()); }
  Split subset(std::size_t count) const;
};

struct Dataset {
  DatasetSpec spec;
  LinearOperator sensing;
  Split train;
  Split test;
};

/// i.i.d. N(0, 1/m) entries, a pure function of (m, n, seed).
DenseMatrix gen_sensing(std::size_t m, std::size_t n, std::uint64_t seed);

/// Bernoulli(p) supports (restricted to the fixed support when given) with
/// standard normal values. Sample i depends only on (key, i).
Split gen_signals(const DatasetSpec& spec, std::size_t count, rng::Key key);

/// y = A x + sigma * g column by column; noise for sample i depends only on
/// (key, i).
Batch measure(const LinearOperator& sensing, const Batch& x, double noise_std, rng::Key key);

/// Sensing matrix plus train and test splits from separate streams.
Dataset gen_dataset(const DatasetSpec& spec);

/// Block variant: the sensing operator is BlockDiag_u(A) with one v x p
/// Gaussian block, never materialized.
Dataset gen_block_dataset(const BlockStructure& structure, DatasetSpec spec);

/// Grayscale image with pixel values scaled to [0, 1].
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> pixels;  // row-major

  double at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
};

/// Reads binary (P5) or ASCII (P2) PGM. Throws IoError on malformed files.
GrayImage read_pgm(const std::filesystem::path& path);
/// Writes an 8-bit P5 file; pixels are clamped to [0, 1].
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

/// `count` random patch x patch windows, flattened row-major and mean
/// subtracted, one per column.
Batch extract_patches(const GrayImage& image, std::size_t patch, std::size_t count,
                      std::uint64_t seed);

/// x_opt = D * patch, y = Phi * (D * (patch + sigma * g)).
Split dct_sense(const Batch& patches, const DenseMatrix& phi, const DenseMatrix& dct,
                double noise_std, std::uint64_t seed);

/// x + kappa * artifact.
Vector contaminate(const Vector& clean, const Vector& artifact, double kappa);
/// 10 log10(||clean||^2 / ||kappa * artifact||^2).
double contamination_snr_db(const Vector& clean, const Vector& artifact, double kappa);

/// Directory layout: manifest.json, A.bin or block.bin, Y.bin, X.bin,
/// support.json. Binaries are little-endian float64; Y and X hold the train
/// samples followed by the test samples, one contiguous vector per sample.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
/// Throws CorruptManifest, TruncatedFile or ShapeMismatch.
Dataset load_dataset(const std::filesystem::path& dir);

/// Little-endian float64 helpers shared with the checkpoint format.
void write_f64(const std::filesystem::path& path, const std::vector<double>& values);
/// Reads exactly `count` values; throws TruncatedFile if the file is short
/// and ShapeMismatch if it is longer.
std::vector<double> read_f64(const std::filesystem::path& path, std::size_t count);

}  // namespace pibinn
