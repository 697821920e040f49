#include "pibinn/physics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pibinn/errors.hpp"

namespace pibinn {

BlockStructure::BlockStructure(std::size_t u_, std::size_t v_, std::size_t p_)
    : u(u_), v(v_), p(p_) {
  if (u == 0 || v == 0 || p == 0) {
    throw InvalidArgument("block structure needs u, v, p >= 1");
  }
}

SparsityMask::SparsityMask(std::size_t rows, std::size_t cols, bool fill)
    : rows_(rows), cols_(cols), bits_(rows * cols, fill ? 1 : 0) {}

SparsityMask::SparsityMask(std::size_t rows, std::size_t cols,
                           const std::vector<std::pair<std::size_t, std::size_t>>& active)
    : SparsityMask(rows, cols, false) {
  for (const auto& [r, c] : active) {
    if (r >= rows || c >= cols) {
      throw InvalidArgument("mask position (" + std::to_string(r) + ", " +
                            std::to_string(c) + ") outside " + std::to_string(rows) +
                            "x" + std::to_string(cols));
    }
    set(r, c, true);
  }
}

void SparsityMask::set(std::size_t r, std::size_t c, bool on) {
  bits_[r * cols_ + c] = on ? 1 : 0;
}

std::size_t SparsityMask::active_count() const noexcept {
  return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1));
}

std::vector<std::pair<std::size_t, std::size_t>> SparsityMask::active_positions() const {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t r = 0; r < rows_; ++r) {
    for (std::size_t c = 0; c < cols_; ++c) {
      if (active(r, c)) out.emplace_back(r, c);
    }
  }
  return out;
}

SparsityMask mask_from_block(const BlockStructure& s) {
  SparsityMask mask(s.rows(), s.cols());
  for (std::size_t b = 0; b < s.u; ++b) {
    for (std::size_t i = 0; i < s.v; ++i) {
      for (std::size_t j = 0; j < s.p; ++j) mask.set(b * s.v + i, b * s.p + j, true);
    }
  }
  return mask;
}

SparsityMask mask_from_sensing(const DenseMatrix& pattern, double tol) {
  if (!(tol >= 0.0)) throw InvalidArgument("mask_from_sensing: tol must be >= 0");
  return mask_from_nonzeros(pattern, tol);
}

SparsityMask mask_from_nonzeros(const DenseMatrix& w, double tol) {
  SparsityMask mask(w.rows(), w.cols());
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      if (std::abs(w(r, c)) > tol) mask.set(r, c, true);
    }
  }
  return mask;
}

std::size_t structured_param_count(const BlockStructure& s, std::size_t layers) {
  return layers * s.v * s.p;
}

std::size_t structured_total_count(const BlockStructure& s, std::size_t layers) {
  return structured_param_count(s, layers) + layers + 1;
}

std::size_t dense_weight_count(const BlockStructure& s, std::size_t layers) {
  return layers * s.rows() * s.cols();
}

std::optional<double> overlap_fraction(const SparsityMask& reference,
                                       const SparsityMask& other) {
  if (reference.rows() != other.rows() || reference.cols() != other.cols()) {
    throw DimensionError("overlap_fraction: mask shapes differ");
  }
  std::size_t ref_zeros = 0;
  std::size_t shared = 0;
  for (std::size_t r = 0; r < reference.rows(); ++r) {
    for (std::size_t c = 0; c < reference.cols(); ++c) {
      if (reference.active(r, c)) continue;
      ++ref_zeros;
      if (!other.active(r, c)) ++shared;
    }
  }
  if (ref_zeros == 0) return std::nullopt;
  return static_cast<double>(shared) / static_cast<double>(ref_zeros);
}

DenseMatrix apply_mask(const DenseMatrix& w, const SparsityMask& mask) {
  DenseMatrix out = w;
  apply_mask_inplace(out, mask);
  return out;
}

void apply_mask_inplace(DenseMatrix& w, const SparsityMask& mask) {
  if (static_cast<std::size_t>(w.rows()) != mask.rows() ||
      static_cast<std::size_t>(w.cols()) != mask.cols()) {
    throw DimensionError("apply_mask: mask shape differs from weight shape");
  }
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) {
      if (!mask.active(r, c)) w(r, c) = 0.0;
    }
  }
}

}  // namespace pibinn
