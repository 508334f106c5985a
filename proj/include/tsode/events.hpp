#pragma once

namespace tsode::looprt {

struct DoseEvent {
  double time_min = 0.0;  // episode clock at delivery
  double units = 0.0;
};

struct CarbEvent {
  double time_min = 0.0;
  double grams = 0.0;
};

}  // namespace tsode::looprt
