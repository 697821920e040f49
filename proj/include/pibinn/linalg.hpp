#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include <Eigen/Dense>

namespace pibinn {

/// Dense real matrix, row-major so the flat entry order matches the on-disk
/// layout.
using DenseMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
/// A batch of vectors, one sample per column.
using Batch = Eigen::MatrixXd;

/// BlockDiag_u(block) of shape (v*u) x (p*u), never materialized.
class BlockDiagOperator {
 public:
  BlockDiagOperator(DenseMatrix block, std::size_t repeat);

  const DenseMatrix& block() const noexcept { return block_; }
  std::size_t repeat() const noexcept { return repeat_; }
  std::size_t rows() const noexcept { return block_.rows() * repeat_; }
  std::size_t cols() const noexcept { return block_.cols() * repeat_; }

  /// Test helper: the explicit (v*u) x (p*u) matrix.
  DenseMatrix materialize() const;

 private:
  DenseMatrix block_;
  std::size_t repeat_;
};

/// Sensing operators are either an explicit matrix or a block-diagonal
/// operator with a shared block.
using LinearOperator = std::variant<DenseMatrix, BlockDiagOperator>;

std::size_t rows(const LinearOperator& op) noexcept;
std::size_t cols(const LinearOperator& op) noexcept;

/// Sorted, distinct positions into an ambient dimension.
class IndexSet {
 public:
  IndexSet() = default;
  /// Sorts and checks the indices; throws InvalidArgument on duplicates or
  /// out-of-range entries.
  IndexSet(std::vector<std::size_t> indices, std::size_t ambient);

  static IndexSet all(std::size_t ambient);

  const std::vector<std::size_t>& indices() const noexcept { return indices_; }
  std::size_t ambient() const noexcept { return ambient_; }
  std::size_t size() const noexcept { return indices_.size(); }
  bool empty() const noexcept { return indices_.empty(); }
  bool contains(std::size_t i) const noexcept;

  friend bool operator==(const IndexSet&, const IndexSet&) = default;

 private:
  std::vector<std::size_t> indices_;
  std::size_t ambient_ = 0;
};

Vector matvec(const DenseMatrix& m, const Vector& x);
Vector matvec(const BlockDiagOperator& m, const Vector& x);
Vector matvec(const LinearOperator& m, const Vector& x);

Vector transpose_matvec(const DenseMatrix& m, const Vector& x);
Vector transpose_matvec(const BlockDiagOperator& m, const Vector& x);
Vector transpose_matvec(const LinearOperator& m, const Vector& x);

/// Column-wise products over a batch.
Batch apply(const LinearOperator& m, const Batch& x);
Batch apply_transpose(const LinearOperator& m, const Batch& x);

/// BlockDiag_u(block) * x for a batch, where only the block is given.
Batch block_apply(const DenseMatrix& block, std::size_t repeat, const Batch& x);
Batch block_apply_transpose(const DenseMatrix& block, std::size_t repeat,
                            const Batch& x);

inline constexpr double kSpectralTol = 1e-9;
inline constexpr std::size_t kSpectralMaxIter = 10000;

/// Largest singular value by power iteration on M^T M from a fixed
/// pseudo-random start vector. Throws ConvergenceError after max_iter.
double spectral_norm(const DenseMatrix& m, double tol = kSpectralTol,
                     std::size_t max_iter = kSpectralMaxIter);

/// M[rows, cols]; std::nullopt selects every index on that axis.
DenseMatrix submatrix(const DenseMatrix& m, const std::optional<IndexSet>& rows,
                      const std::optional<IndexSet>& cols);

/// Orthonormal DCT-II matrix; row k is the k-th cosine basis vector.
DenseMatrix dct_matrix(std::size_t n);

bool all_finite(const DenseMatrix& m) noexcept;

}  // namespace pibinn
