#include "tsode/diffkit/rk4.hpp"

#include <cmath>
#include <string>

#include "tsode/faults.hpp"

namespace tsode::diffkit {

// Both paths evaluate the update in the exact same floating-point order:
//   incr = ((k1 + 2*k2) + 2*k3) + k4;  z' = z + (h/6)*incr
std::vector<Var> rk4_integrate(Tape& tape, const OdeFn& f, Var z0, int n_steps, double h) {
  if (n_steps < 1) throw ConfigFault("rk4 n_steps must be >= 1");
  if (!(h > 0) || !std::isfinite(h)) throw ConfigFault("rk4 h must be finite and > 0");
  std::vector<Var> out;
  out.reserve(static_cast<size_t>(n_steps));
  Var z = z0;
  for (int s = 0; s < n_steps; ++s) {
    Var k1 = f(tape, z);
    Var k2 = f(tape, tape.axpy(z, k1, h / 2));
    Var k3 = f(tape, tape.axpy(z, k2, h / 2));
    Var k4 = f(tape, tape.axpy(z, k3, h));
    Var incr = tape.axpy(tape.axpy(tape.axpy(k1, k2, 2.0), k3, 2.0), k4, 1.0);
    z = tape.axpy(z, incr, h / 6.0);
    if (!tape.finite(z))
      throw NumericalFault("rk4 state non-finite at step " + std::to_string(s + 1));
    out.push_back(z);
  }
  return out;
}

std::vector<Tensor> rk4_integrate(const PlainOdeFn& f, const Tensor& z0, int n_steps, double h) {
  if (n_steps < 1) throw ConfigFault("rk4 n_steps must be >= 1");
  if (!(h > 0) || !std::isfinite(h)) throw ConfigFault("rk4 h must be finite and > 0");
  const int n = z0.size();
  std::vector<Tensor> out;
  out.reserve(static_cast<size_t>(n_steps));
  Tensor z = z0;
  Tensor tmp(z0.rows, z0.cols);
  for (int s = 0; s < n_steps; ++s) {
    const Tensor k1 = f(z);
    for (int i = 0; i < n; ++i) tmp.v[static_cast<size_t>(i)] = z.v[static_cast<size_t>(i)] + (h / 2) * k1.v[static_cast<size_t>(i)];
    const Tensor k2 = f(tmp);
    for (int i = 0; i < n; ++i) tmp.v[static_cast<size_t>(i)] = z.v[static_cast<size_t>(i)] + (h / 2) * k2.v[static_cast<size_t>(i)];
    const Tensor k3 = f(tmp);
    for (int i = 0; i < n; ++i) tmp.v[static_cast<size_t>(i)] = z.v[static_cast<size_t>(i)] + h * k3.v[static_cast<size_t>(i)];
    const Tensor k4 = f(tmp);
    bool ok = true;
    for (int i = 0; i < n; ++i) {
      const double incr = ((k1.v[static_cast<size_t>(i)] + 2.0 * k2.v[static_cast<size_t>(i)]) + 2.0 * k3.v[static_cast<size_t>(i)]) + 1.0 * k4.v[static_cast<size_t>(i)];
      z.v[static_cast<size_t>(i)] = z.v[static_cast<size_t>(i)] + (h / 6.0) * incr;
      ok = ok && std::isfinite(z.v[static_cast<size_t>(i)]);
    }
    if (!ok) throw NumericalFault("rk4 state non-finite at step " + std::to_string(s + 1));
    out.push_back(z);
  }
  return out;
}

}  // namespace tsode::diffkit
