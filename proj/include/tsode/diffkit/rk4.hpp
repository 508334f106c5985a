#pragma once
#include <functional>
#include <vector>

#include "tsode/diffkit/tape.hpp"
#include "tsode/diffkit/tensor.hpp"

namespace tsode::diffkit {

using OdeFn = std::function<Var(Tape&, Var)>;
using PlainOdeFn = std::function<Tensor(const Tensor&)>;

// Classical fourth-order Runge-Kutta with fixed step h. Returns the state
// after each of the n_steps steps (z_1..z_n). A non-finite intermediate
// state raises NumericalFault naming the step index.
std::vector<Var> rk4_integrate(Tape& tape, const OdeFn& f, Var z0, int n_steps, double h);
std::vector<Tensor> rk4_integrate(const PlainOdeFn& f, const Tensor& z0, int n_steps, double h);

}  // namespace tsode::diffkit
