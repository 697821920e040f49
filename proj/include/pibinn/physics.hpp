#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "pibinn/linalg.hpp"

namespace pibinn {

/// u diagonal blocks of size v x p.
struct BlockStructure {
  std::size_t u = 1;
  std::size_t v = 1;
  std::size_t p = 1;

  BlockStructure() = default;
  BlockStructure(std::size_t u_, std::size_t v_, std::size_t p_);

  std::size_t rows() const noexcept { return u * v; }
  std::size_t cols() const noexcept { return u * p; }

  friend bool operator==(const BlockStructure&, const BlockStructure&) = default;
};

/// Positions of a rows x cols weight matrix that may be nonzero.
class SparsityMask {
 public:
  SparsityMask() = default;
  SparsityMask(std::size_t rows, std::size_t cols, bool fill = false);
  /// Throws InvalidArgument for positions outside the grid.
  SparsityMask(std::size_t rows, std::size_t cols,
               const std::vector<std::pair<std::size_t, std::size_t>>& active);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool active(std::size_t r, std::size_t c) const noexcept {
    return bits_[r * cols_ + c] != 0;
  }
  void set(std::size_t r, std::size_t c, bool on);
  std::size_t active_count() const noexcept;
  std::size_t zero_count() const noexcept { return rows_ * cols_ - active_count(); }
  std::vector<std::pair<std::size_t, std::size_t>> active_positions() const;

  friend bool operator==(const SparsityMask&, const SparsityMask&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// Union of the u diagonal v x p blocks of the (v*u) x (p*u) grid.
SparsityMask mask_from_block(const BlockStructure& structure);

/// Weight mask induced by a sensing pattern: W(i, j) may be nonzero iff
/// |A'(i, j)| > tol. Weights are stored with the sensing operator's shape
/// (W^T multiplies the residual), so the coupling pattern carries over
/// position-for-position.
SparsityMask mask_from_sensing(const DenseMatrix& sensing_pattern, double tol);

/// Mask of nonzero entries of a matrix (|w| > tol).
SparsityMask mask_from_nonzeros(const DenseMatrix& w, double tol = 0.0);

/// Trainable weight entries K*v*p (one shared block per layer).
std::size_t structured_param_count(const BlockStructure& structure, std::size_t layers);

/// structured_param_count plus K thresholds and one global scale.
std::size_t structured_total_count(const BlockStructure& structure, std::size_t layers);

/// Entries of the dense equivalent network: K * (v*u) * (p*u).
std::size_t dense_weight_count(const BlockStructure& structure, std::size_t layers);

/// |zeros(reference) ∩ zeros(other)| / |zeros(reference)|; std::nullopt when
/// the reference mask has no zeros. Throws DimensionError on shape mismatch.
std::optional<double> overlap_fraction(const SparsityMask& reference,
                                       const SparsityMask& other);

/// Zeroes every inactive position.
DenseMatrix apply_mask(const DenseMatrix& w, const SparsityMask& mask);
void apply_mask_inplace(DenseMatrix& w, const SparsityMask& mask);

}  // namespace pibinn
