#include "xaidiag/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <boost/math/distributions/students_t.hpp>

#include "xaidiag/error.hpp"

namespace xaidiag {

std::vector<double> mid_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

RankedSeries RankedSeries::from(std::span<const double> values) {
  return {std::vector<double>(values.begin(), values.end()), mid_ranks(values)};
}

double average_precision(std::span<const std::uint8_t> relevance,
                         std::span<const double> scores) {
  if (relevance.size() != scores.size()) {
    throw Error(ErrorCode::kLengthMismatch, "relevance and scores differ in length");
  }
  const auto positives = std::count_if(relevance.begin(), relevance.end(),
                                       [](std::uint8_t r) { return r != 0; });
  if (positives == 0) throw Error(ErrorCode::kNoPositives, "no relevant items");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double total = 0.0;
  std::size_t hits = 0;
  for (std::size_t rank = 0; rank < order.size(); ++rank) {
    if (relevance[order[rank]] == 0) continue;
    ++hits;
    total += static_cast<double>(hits) / static_cast<double>(rank + 1);
  }
  return total / static_cast<double>(positives);
}

double pearson(std::span<const double> x, std::span<const double> y) {
  const std::size_t n = x.size();
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

double spearman_t_p_value(double rho, std::size_t n) {
  if (n < 3) return 1.0;
  const double r = std::clamp(rho, -1.0, 1.0);
  if (std::abs(r) >= 1.0) return 0.0;
  const double dof = static_cast<double>(n - 2);
  const double t = std::abs(r) * std::sqrt(dof / ((1.0 - r) * (1.0 + r)));
  boost::math::students_t_distribution<double> dist(dof);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, t));
}

namespace {

constexpr double kRhoSlack = 1e-12;

double permutation_p_value(const std::vector<double>& rx, std::vector<double> ry, double rho) {
  const std::size_t n = rx.size();
  const double threshold = std::abs(rho) - kRhoSlack;
  std::size_t extreme = 0;
  std::size_t total = 0;
  if (n <= 9) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<double> shuffled(n);
    do {
      for (std::size_t i = 0; i < n; ++i) shuffled[i] = ry[perm[i]];
      if (std::abs(pearson(rx, shuffled)) >= threshold) ++extreme;
      ++total;
    } while (std::next_permutation(perm.begin(), perm.end()));
    return static_cast<double>(extreme) / static_cast<double>(total);
  }
  constexpr std::size_t kDraws = 20000;
  std::mt19937_64 rng(0x5EA12A11ULL + n);
  for (std::size_t d = 0; d < kDraws; ++d) {
    std::shuffle(ry.begin(), ry.end(), rng);
    if (std::abs(pearson(rx, ry)) >= threshold) ++extreme;
  }
  // Add-one estimator keeps the p-value strictly positive.
  return static_cast<double>(extreme + 1) / static_cast<double>(kDraws + 1);
}

bool is_constant(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [&](double x) { return x == v.front(); });
}

}  // namespace

Correlation spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw Error(ErrorCode::kLengthMismatch, "spearman series lengths");
  if (x.size() < 3) throw Error(ErrorCode::kLengthMismatch, "spearman needs at least 3 points");
  if (is_constant(x) || is_constant(y)) {
    throw Error(ErrorCode::kConstantSeries, "spearman of a constant series");
  }
  const std::vector<double> rx = mid_ranks(x);
  const std::vector<double> ry = mid_ranks(y);
  Correlation out;
  out.rho = std::clamp(pearson(rx, ry), -1.0, 1.0);
  out.p = x.size() < 20 ? permutation_p_value(rx, ry, out.rho)
                        : spearman_t_p_value(out.rho, x.size());
  return out;
}

double LogisticModel::predict(std::span<const double> features) const {
  double z = bias;
  for (std::size_t i = 0; i < weights.size(); ++i) z += weights[i] * features[i];
  return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
}

namespace {

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

}  // namespace

LogisticModel logistic_fit(const std::vector<std::vector<double>>& features,
                           std::span<const double> targets, double l2, std::size_t iters) {
  const std::size_t n = features.size();
  if (n < 2 || targets.size() != n) {
    throw Error(ErrorCode::kLengthMismatch, "logistic fit needs >= 2 aligned samples");
  }
  const std::size_t dim = features.front().size();
  for (const auto& f : features) {
    if (f.size() != dim) throw Error(ErrorCode::kLengthMismatch, "ragged feature rows");
  }
  for (double t : targets) {
    if (!(t >= 0.0 && t <= 1.0)) throw Error(ErrorCode::kBadConfig, "targets must be in [0, 1]");
  }
  const double inv_n = 1.0 / static_cast<double>(n);

  // Cross-entropy against a soft target: softplus(z) - t * z.
  auto objective = [&](const std::vector<double>& w, double b) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double z = b;
      for (std::size_t k = 0; k < dim; ++k) z += w[k] * features[i][k];
      total += softplus(z) - targets[i] * z;
    }
    double reg = 0.0;
    for (double wk : w) reg += wk * wk;
    return total * inv_n + 0.5 * l2 * reg;
  };

  LogisticModel model;
  model.weights.assign(dim, 0.0);
  std::vector<double> gw(dim);
  std::vector<double> trial_w(dim);
  double loss = objective(model.weights, model.bias);
  double step = 1.0;
  for (std::size_t it = 0; it < iters; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double residual = model.predict(features[i]) - targets[i];
      for (std::size_t k = 0; k < dim; ++k) gw[k] += residual * features[i][k];
      gb += residual;
    }
    double norm2 = 0.0;
    for (std::size_t k = 0; k < dim; ++k) {
      gw[k] = gw[k] * inv_n + l2 * model.weights[k];
      norm2 += gw[k] * gw[k];
    }
    gb *= inv_n;
    norm2 += gb * gb;
    if (norm2 < 1e-24) break;

    bool accepted = false;
    while (step > 1e-16) {
      for (std::size_t k = 0; k < dim; ++k) trial_w[k] = model.weights[k] - step * gw[k];
      const double trial_b = model.bias - step * gb;
      const double trial_loss = objective(trial_w, trial_b);
      if (!std::isfinite(trial_loss)) {
        step *= 0.5;
        continue;
      }
      if (trial_loss <= loss - 0.5 * step * norm2) {
        model.weights = trial_w;
        model.bias = trial_b;
        loss = trial_loss;
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;
    step *= 2.0;
  }
  if (!std::isfinite(loss)) throw Error(ErrorCode::kNonFinite, "logistic loss diverged");
  return model;
}

double auc_trapezoid(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw Error(ErrorCode::kLengthMismatch, "auc curve lengths");
  if (xs.size() < 2) throw Error(ErrorCode::kNotAscending, "auc needs at least two points");
  double area = 0.0;
  for (std::size_t i = 0; i + 1 < xs.size(); ++i) {
    if (!(xs[i + 1] > xs[i])) throw Error(ErrorCode::kNotAscending, "x values must ascend");
    area += 0.5 * (ys[i] + ys[i + 1]) * (xs[i + 1] - xs[i]);
  }
  return area / (xs.back() - xs.front());
}

ScaledValues minmax_scale(std::span<const double> values) {
  ScaledValues out;
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) {
    out.values.assign(values.size(), 0.5);
    out.constant = true;
    return out;
  }
  out.values.reserve(values.size());
  for (double v : values) out.values.push_back((v - *lo) / range);
  return out;
}

double mae(std::span<const double> predicted, std::span<const double> gold) {
  if (predicted.size() != gold.size() || predicted.empty()) {
    throw Error(ErrorCode::kLengthMismatch, "mae needs equal non-empty inputs");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < gold.size(); ++i) total += std::abs(predicted[i] - gold[i]);
  return total / static_cast<double>(gold.size());
}

}  // namespace xaidiag
