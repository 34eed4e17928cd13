#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace xaidiag {

/// Values with 1-based mid-ranks: tied values share the mean of the ranks
/// they occupy.
struct RankedSeries {
  std::vector<double> values;
  std::vector<double> ranks;

  static RankedSeries from(std::span<const double> values);
};

std::vector<double> mid_ranks(std::span<const double> values);

/// Ranks items by descending score (ties by ascending index) and averages the
/// precision at the rank of every relevant item. Throws NoPositives.
double average_precision(std::span<const std::uint8_t> relevance, std::span<const double> scores);

struct Correlation {
  double rho = 0.0;
  double p = 1.0;
};

/// Pearson correlation of mid-ranks. The two-sided p-value uses exact
/// permutation enumeration for n <= 9, a fixed-seed Monte Carlo permutation
/// test for 10 <= n < 20 and the Student-t approximation for n >= 20.
/// Throws ConstantSeries if either series is constant, LengthMismatch when
/// sizes differ or n < 3.
Correlation spearman(std::span<const double> x, std::span<const double> y);

double pearson(std::span<const double> x, std::span<const double> y);

// 2 * P(T_{n-2} > |rho| * sqrt((n - 2) / (1 - rho^2))).
double spearman_t_p_value(double rho, std::size_t n);

struct LogisticModel {
  std::vector<double> weights;
  double bias = 0.0;

  double predict(std::span<const double> features) const;
};

/// Minimizes mean cross-entropy of sigmoid(w.f + b) against soft targets in
/// [0, 1] plus (l2 / 2) * |w|^2, by full-batch gradient descent with
/// Armijo backtracking from a zero start.
LogisticModel logistic_fit(const std::vector<std::vector<double>>& features,
                           std::span<const double> targets, double l2,
                           std::size_t iters = 5000);

/// Trapezoidal area divided by the x range, so a curve bounded in [0, 1]
/// yields a value in [0, 1]. Throws NotAscending.
double auc_trapezoid(std::span<const double> xs, std::span<const double> ys);

struct ScaledValues {
  std::vector<double> values;
  // Set when the input was constant; every value is then 0.5.
  bool constant = false;
};

ScaledValues minmax_scale(std::span<const double> values);

double mae(std::span<const double> predicted, std::span<const double> gold);

}  // namespace xaidiag
