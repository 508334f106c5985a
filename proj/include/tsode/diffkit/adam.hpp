#pragma once
#include <span>

namespace tsode::diffkit {

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One Adam update, in place, with bias correction. t is the 1-based update
// count. All four spans must have equal length.
void adam_step(std::span<double> params, std::span<const double> grads,
               std::span<double> m, std::span<double> v, const AdamParams& hp, long t);

}  // namespace tsode::diffkit
