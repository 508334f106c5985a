#pragma once
#include <stdexcept>
#include <string>

namespace tsode {

// Invalid parameter values, malformed config files, dimension mismatches.
struct ConfigFault : std::runtime_error {
  explicit ConfigFault(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf encountered, ODE state blow-up, training divergence.
struct NumericalFault : std::runtime_error {
  explicit NumericalFault(const std::string& msg) : std::runtime_error(msg) {}
};

// API called out of contract (e.g. backward twice on one tape).
struct UsageFault : std::logic_error {
  explicit UsageFault(const std::string& msg) : std::logic_error(msg) {}
};

}  // namespace tsode
