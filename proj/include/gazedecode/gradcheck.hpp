#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "gazedecode/errors.hpp"
#include "gazedecode/optim.hpp"

namespace gazedecode {

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t flagged = 0;  // entries above tolerance
  std::size_t skipped = 0;  // stencil crossed a kink
  bool passed = true;
};

// |a - n| / max(|a|, |n|, floor). The absolute floor keeps entries whose
// true gradient is zero (dead ReLU units, unused bias rows) from turning
// finite-difference roundoff into a large relative error.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

template <typename T>
using ActivationPattern = std::function<std::vector<bool>(const ParamSet<T>&)>;

// Compares `analytic` (gradients of `loss` at `params`) against central
// differences with step h. Every entry of every parameter that has an
// analytic gradient is perturbed. When `pattern` is given (e.g. the ReLU
// sign pattern of a network), entries whose +h or -h evaluation changes the
// pattern are counted as skipped instead of compared: the loss is not
// differentiable on that stencil.
template <typename T>
GradcheckReport gradcheck(const std::function<T(const ParamSet<T>&)>& loss, ParamSet<T> params,
                          const Grads<T>& analytic, double tolerance, double h = 1e-3,
                          const ActivationPattern<T>& pattern = {}) {
  std::size_t total = 0;
  for (const auto& [name, g] : analytic) {
    if (!g.all_finite()) throw NumericError("non-finite analytic gradient for " + name);
    total += g.size();
  }
  if (total >= 10000)
    throw ParameterError("gradcheck limited to fewer than 1e4 scalars, got " +
                         std::to_string(total));
  GradcheckReport report;
  const std::vector<bool> base = pattern ? pattern(params) : std::vector<bool>{};
  for (const auto& [name, g] : analytic) {
    BasicTensor<T>& p = params.values.at(name);
    require_shape(g.shape(), p.shape(), "analytic gradient of " + name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T saved = p[i];
      p[i] = saved + static_cast<T>(h);
      const double up = static_cast<double>(loss(params));
      bool smooth = !pattern || pattern(params) == base;
      p[i] = saved - static_cast<T>(h);
      const double down = static_cast<double>(loss(params));
      smooth = smooth && (!pattern || pattern(params) == base);
      p[i] = saved;
      if (!smooth) {
        ++report.skipped;
        continue;
      }
      const double numeric = (up - down) / (2.0 * h);
      const double err = relative_error(static_cast<double>(g[i]), numeric);
      ++report.checked;
      if (err > tolerance) ++report.flagged;
      if (report.worst_param.empty() || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = name;
        report.worst_index = i;
        report.worst_analytic = static_cast<double>(g[i]);
        report.worst_numeric = numeric;
      }
    }
  }
  report.passed = report.flagged == 0;
  return report;
}

}  // namespace gazedecode
