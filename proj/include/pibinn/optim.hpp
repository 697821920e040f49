#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

namespace pibinn {

enum class OptimizerKind { Sgd, Adam };

OptimizerKind parse_optimizer(std::string_view s);
std::string_view to_string(OptimizerKind k) noexcept;

/// First-order optimizer over a fixed list of parameter spans. Adam moment
/// buffers are allocated on the first step and keyed by span position, so
/// the same parameter layout must be passed every time.
class Optimizer {
 public:
  explicit Optimizer(OptimizerKind kind = OptimizerKind::Adam, double beta1 = 0.9,
                     double beta2 = 0.999, double eps = 1e-8);

  void step(const std::vector<std::span<double>>& params,
            const std::vector<std::span<const double>>& grads, double lr);

  OptimizerKind kind() const noexcept { return kind_; }
  std::size_t steps() const noexcept { return t_; }

 private:
  OptimizerKind kind_;
  double beta1_;
  double beta2_;
  double eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace pibinn
