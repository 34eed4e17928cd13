#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "xaidiag/data.hpp"
#include "xaidiag/tensor.hpp"

namespace testing {

inline xaidiag::Tensor random_tensor(xaidiag::Shape shape, std::mt19937_64& rng,
                                     double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  xaidiag::Tensor t(std::move(shape));
  for (double& v : t.data()) v = normal(rng);
  return t;
}

// Central differences, written independently of the library helper.
inline std::vector<double> numeric_grad(const std::function<double(const xaidiag::Tensor&)>& f,
                                        xaidiag::Tensor x, double h = 1e-6) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f(x);
    x[i] = saved - h;
    const double down = f(x);
    x[i] = saved;
    out[i] = (up - down) / (2.0 * h);
  }
  return out;
}

// ||a - b|| / max(||a||, ||b||, floor)
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b,
                             double floor = 1e-8) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

inline xaidiag::Instance make_instance(std::string id, std::vector<std::size_t> ids,
                                       std::size_t label,
                                       std::vector<std::uint8_t> rationale = {}) {
  xaidiag::Instance inst;
  inst.id = std::move(id);
  for (std::size_t t : ids) inst.tokens.push_back("t" + std::to_string(t));
  inst.token_ids = std::move(ids);
  inst.label = label;
  inst.rationale = rationale.empty() ? std::vector<std::uint8_t>(inst.token_ids.size(), 0)
                                     : std::move(rationale);
  return inst;
}

}  // namespace testing
