#include "tsode/diffkit/adam.hpp"

#include <cmath>

#include "tsode/faults.hpp"

namespace tsode::diffkit {

void adam_step(std::span<double> params, std::span<const double> grads,
               std::span<double> m, std::span<double> v, const AdamParams& hp, long t) {
  if (t < 1) throw UsageFault("adam_step t must be >= 1");
  const std::size_t n = params.size();
  if (grads.size() != n || m.size() != n || v.size() != n)
    throw ConfigFault("adam_step span length mismatch");
  if (!(hp.lr > 0) || !(hp.beta1 >= 0 && hp.beta1 < 1) || !(hp.beta2 >= 0 && hp.beta2 < 1) ||
      !(hp.eps > 0))
    throw ConfigFault("adam hyperparameters out of range");

  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grads[i];
    if (!std::isfinite(g)) throw NumericalFault("adam_step: non-finite gradient");
    m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g;
    v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g * g;
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    params[i] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
  }
}

}  // namespace tsode::diffkit
