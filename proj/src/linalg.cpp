#include "pibinn/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "pibinn/errors.hpp"
#include "pibinn/rng.hpp"

namespace pibinn {
namespace {

void require_dims(std::size_t expected, std::size_t got, const char* what) {
  if (expected != got) {
    throw DimensionError(std::string(what) + ": expected length " +
                         std::to_string(expected) + ", got " +
                         std::to_string(got));
  }
}

}  // namespace

BlockDiagOperator::BlockDiagOperator(DenseMatrix block, std::size_t repeat)
    : block_(std::move(block)), repeat_(repeat) {
  if (repeat_ == 0) throw InvalidArgument("block operator repeat must be >= 1");
  if (block_.size() == 0) throw InvalidArgument("block operator needs a non-empty block");
}

DenseMatrix BlockDiagOperator::materialize() const {
  const auto v = block_.rows();
  const auto p = block_.cols();
  DenseMatrix full = DenseMatrix::Zero(rows(), cols());
  for (std::size_t b = 0; b < repeat_; ++b) {
    full.block(b * v, b * p, v, p) = block_;
  }
  return full;
}

std::size_t rows(const LinearOperator& op) noexcept {
  return std::visit([](const auto& m) { return static_cast<std::size_t>(m.rows()); }, op);
}

std::size_t cols(const LinearOperator& op) noexcept {
  return std::visit([](const auto& m) { return static_cast<std::size_t>(m.cols()); }, op);
}

IndexSet::IndexSet(std::vector<std::size_t> indices, std::size_t ambient)
    : indices_(std::move(indices)), ambient_(ambient) {
  std::sort(indices_.begin(), indices_.end());
  if (std::adjacent_find(indices_.begin(), indices_.end()) != indices_.end()) {
    throw InvalidArgument("index set contains duplicates");
  }
  if (!indices_.empty() && indices_.back() >= ambient_) {
    throw InvalidArgument("index " + std::to_string(indices_.back()) +
                          " out of range for ambient dimension " +
                          std::to_string(ambient_));
  }
}

IndexSet IndexSet::all(std::size_t ambient) {
  std::vector<std::size_t> idx(ambient);
  for (std::size_t i = 0; i < ambient; ++i) idx[i] = i;
  return IndexSet(std::move(idx), ambient);
}

bool IndexSet::contains(std::size_t i) const noexcept {
  return std::binary_search(indices_.begin(), indices_.end(), i);
}

Vector matvec(const DenseMatrix& m, const Vector& x) {
  require_dims(m.cols(), x.size(), "matvec");
  return m * x;
}

Vector matvec(const BlockDiagOperator& m, const Vector& x) {
  require_dims(m.cols(), x.size(), "matvec");
  return block_apply(m.block(), m.repeat(), x);
}

Vector matvec(const LinearOperator& m, const Vector& x) {
  return std::visit([&](const auto& op) { return matvec(op, x); }, m);
}

Vector transpose_matvec(const DenseMatrix& m, const Vector& x) {
  require_dims(m.rows(), x.size(), "transpose_matvec");
  return m.transpose() * x;
}

Vector transpose_matvec(const BlockDiagOperator& m, const Vector& x) {
  require_dims(m.rows(), x.size(), "transpose_matvec");
  return block_apply_transpose(m.block(), m.repeat(), x);
}

Vector transpose_matvec(const LinearOperator& m, const Vector& x) {
  return std::visit([&](const auto& op) { return transpose_matvec(op, x); }, m);
}

// A (p*u) x B column-major batch is, in memory, a p x (u*B) matrix whose
// columns are the per-block slices, so one GEMM applies every block.
Batch block_apply(const DenseMatrix& block, std::size_t repeat, const Batch& x) {
  const Eigen::Index v = block.rows();
  const Eigen::Index p = block.cols();
  require_dims(p * repeat, x.rows(), "block_apply");
  const Eigen::Index slices = static_cast<Eigen::Index>(repeat) * x.cols();
  Batch out(v * repeat, x.cols());
  Eigen::Map<const Eigen::MatrixXd> in_view(x.data(), p, slices);
  Eigen::Map<Eigen::MatrixXd> out_view(out.data(), v, slices);
  out_view.noalias() = block * in_view;
  return out;
}

Batch block_apply_transpose(const DenseMatrix& block, std::size_t repeat,
                            const Batch& x) {
  const Eigen::Index v = block.rows();
  const Eigen::Index p = block.cols();
  require_dims(v * repeat, x.rows(), "block_apply_transpose");
  const Eigen::Index slices = static_cast<Eigen::Index>(repeat) * x.cols();
  Batch out(p * repeat, x.cols());
  Eigen::Map<const Eigen::MatrixXd> in_view(x.data(), v, slices);
  Eigen::Map<Eigen::MatrixXd> out_view(out.data(), p, slices);
  out_view.noalias() = block.transpose() * in_view;
  return out;
}

Batch apply(const LinearOperator& m, const Batch& x) {
  if (const auto* dense = std::get_if<DenseMatrix>(&m)) {
    require_dims(dense->cols(), x.rows(), "apply");
    return *dense * x;
  }
  const auto& op = std::get<BlockDiagOperator>(m);
  return block_apply(op.block(), op.repeat(), x);
}

Batch apply_transpose(const LinearOperator& m, const Batch& x) {
  if (const auto* dense = std::get_if<DenseMatrix>(&m)) {
    require_dims(dense->rows(), x.rows(), "apply_transpose");
    return dense->transpose() * x;
  }
  const auto& op = std::get<BlockDiagOperator>(m);
  return block_apply_transpose(op.block(), op.repeat(), x);
}

double spectral_norm(const DenseMatrix& m, double tol, std::size_t max_iter) {
  if (!(tol > 0.0)) throw InvalidArgument("spectral_norm: tol must be positive");
  if (!all_finite(m)) throw NumericError("spectral_norm: non-finite entries");
  if (m.size() == 0) return 0.0;

  const rng::Key key{0x5eed5eedULL, 0};
  Vector x(m.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = rng::normal(key, i);
  x.normalize();

  // Rayleigh quotient of M^T M converges to sigma_max^2; stop once the
  // singular value estimate stabilizes relative to its size.
  double sigma = 0.0;
  for (std::size_t it = 0; it < max_iter; ++it) {
    const Vector mx = m * x;
    const double next = mx.norm();
    if (next == 0.0) {
      // x is in the null space; either M == 0 or the start was unlucky.
      if (m.cwiseAbs().maxCoeff() == 0.0) return 0.0;
      x = Vector::Unit(m.cols(), it % m.cols());
      continue;
    }
    Vector y = m.transpose() * mx;
    const double ynorm = y.norm();
    const double estimate = std::sqrt(ynorm);
    x = y / ynorm;
    if (std::abs(estimate - sigma) <= tol * std::max(1.0, estimate)) {
      return estimate;
    }
    sigma = estimate;
  }
  throw ConvergenceError("spectral_norm: no convergence after " +
                             std::to_string(max_iter) + " iterations",
                         sigma);
}

DenseMatrix submatrix(const DenseMatrix& m, const std::optional<IndexSet>& rows,
                      const std::optional<IndexSet>& cols) {
  auto check = [](const std::optional<IndexSet>& s, Eigen::Index extent, const char* axis) {
    if (s && !s->empty() && s->indices().back() >= static_cast<std::size_t>(extent)) {
      throw InvalidArgument(std::string("submatrix: ") + axis + " index out of range");
    }
  };
  check(rows, m.rows(), "row");
  check(cols, m.cols(), "column");
  const auto pick = [](const std::optional<IndexSet>& s, Eigen::Index extent) {
    std::vector<Eigen::Index> idx;
    if (s) {
      idx.assign(s->indices().begin(), s->indices().end());
    } else {
      idx.resize(extent);
      for (Eigen::Index i = 0; i < extent; ++i) idx[i] = i;
    }
    return idx;
  };
  const auto r = pick(rows, m.rows());
  const auto c = pick(cols, m.cols());
  return m(r, c);
}

DenseMatrix dct_matrix(std::size_t n) {
  if (n == 0) throw InvalidArgument("dct_matrix: n must be >= 1");
  DenseMatrix d(n, n);
  const double nn = static_cast<double>(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double scale = k == 0 ? std::sqrt(1.0 / nn) : std::sqrt(2.0 / nn);
    for (std::size_t j = 0; j < n; ++j) {
      d(k, j) = scale * std::cos(std::numbers::pi * (2.0 * j + 1.0) * k / (2.0 * nn));
    }
  }
  return d;
}

bool all_finite(const DenseMatrix& m) noexcept { return m.allFinite(); }

}  // namespace pibinn
