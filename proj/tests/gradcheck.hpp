#pragma once

#include "gaitstr/autograd.hpp"
#include "gaitstr/params.hpp"
#include "gaitstr/rng.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

namespace testutil {

using gaitstr::Rng;
using gaitstr::Tensor;
namespace ad = gaitstr::ad;

struct GradCheckReport {
  double worst = 0.0;  // largest norm-wise relative error over the checked tensors
  std::string worst_name;
  std::size_t coordinates = 0;
};

// Compares analytic gradients of the scalar `loss()` with central differences
// for every tensor in `leaves`. At most `max_coords` coordinates per tensor are
// probed (all when the tensor is small enough). Per tensor the error is
// ||g_analytic - g_numeric|| / max(||g_analytic|| + ||g_numeric||, 1e-12) over
// the probed coordinates.
inline GradCheckReport gradcheck(const std::vector<std::pair<std::string, ad::Var>>& leaves,
                                 const std::function<ad::Var()>& loss, std::size_t max_coords = 64,
                                 double h = 1e-6, std::uint64_t seed = 1) {
  for (const auto& [name, v] : leaves) {
    v->requires_grad = true;
    v->grad = Tensor();
  }
  ad::backward(loss());

  GradCheckReport report;
  Rng rng(seed);
  ad::NoGradGuard no_grad;
  for (const auto& [name, v] : leaves) {
    const std::size_t n = v->value.size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > max_coords) {
      rng.shuffle(coords.begin(), coords.end());
      coords.resize(max_coords);
    }
    double diff2 = 0.0, a2 = 0.0, n2 = 0.0;
    for (std::size_t i : coords) {
      const double saved = v->value[i];
      v->value[i] = saved + h;
      const double up = loss()->value[0];
      v->value[i] = saved - h;
      const double down = loss()->value[0];
      v->value[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = v->grad.empty() ? 0.0 : v->grad[i];
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
    }
    const double err = std::sqrt(diff2) / std::max(std::sqrt(a2) + std::sqrt(n2), 1e-12);
    report.coordinates += coords.size();
    if (err >= report.worst) {
      report.worst = err;
      report.worst_name = name;
    }
  }
  return report;
}

inline Tensor random_tensor(gaitstr::Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(shape);
  for (double& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

// Moves every parameter off zero so no rectifier sits exactly on its kink.
inline void randomize(gaitstr::ParameterStore& store, Rng& rng, double scale = 0.3) {
  for (const auto& v : store.vars())
    for (double& x : v->value.storage()) x = rng.uniform(-scale, scale);
}

inline std::vector<std::pair<std::string, ad::Var>> named(const gaitstr::ParameterStore& store) {
  std::vector<std::pair<std::string, ad::Var>> out;
  for (std::size_t i = 0; i < store.size(); ++i) out.emplace_back(store.names()[i], store.vars()[i]);
  return out;
}

}  // namespace testutil
