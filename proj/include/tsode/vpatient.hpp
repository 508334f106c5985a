#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "tsode/rng.hpp"

namespace tsode::vpatient {

// Two-compartment subcutaneous insulin and gut carb chains feeding a single
// glucose pool. Linear dynamics: total effect of one unit (one gram) on BG is
// exactly insulin_sensitivity (carb_sensitivity) once the chain has drained.
struct PatientParams {
  double insulin_sensitivity = 32.0;        // mg/dL per U
  double carb_sensitivity = 2.0;            // mg/dL per g
  double glucose_clearance_rate = 0.006;    // 1/min
  double insulin_absorption_halftime = 25.0;  // min
  double carb_absorption_halftime = 15.0;     // min
  double endogenous_production = 0.0;       // mg/dL per min; see solve_endogenous_production
  double basal_rate = 1.0;                  // U/hr
  double icr = 20.0;                        // g of carbs covered per U
  // Fasting glucose under basal alone. Deliberately hyperglycemic: the basal
  // program under-replaces, so a controller has to add insulin to reach range.
  double initial_bg = 160.0;                // mg/dL
  // Dawn phenomenon: endogenous production swings sinusoidally over the day,
  // peaking at 06:00. Zero by default (time-invariant plant); cohort patients
  // get a nonzero amplitude.
  double diurnal_amplitude = 0.0;           // fraction of endogenous_production

  void validate() const;  // throws ConfigFault
  // Picks endogenous_production so that basal_rate holds initial_bg at rest.
  void solve_endogenous_production();
};

struct MealEvent {
  double time_of_day = 0.0;  // min into the day, [0, 1440)
  double carbs = 0.0;        // g
};

struct PatientState {
  double plasma_glucose = 0.0;  // mg/dL
  double insulin_sc1 = 0.0;     // U
  double insulin_sc2 = 0.0;     // U
  double gut_carbs1 = 0.0;      // g
  double gut_carbs2 = 0.0;      // g
  double clock = 0.0;           // min since episode start
};

// Resting state consistent with params (glucose at initial_bg, chains at
// their basal equilibrium, empty gut).
PatientState equilibrium_from(const PatientParams& p);

// Advances dt minutes with classical RK4 on 1-min internal substeps. The
// bolus is an impulse into insulin_sc1; daily-recurring meals whose next
// occurrence falls in (clock, clock+dt] are impulses into gut_carbs1.
// Compartments stay nonnegative; glucose is clamped to [20, 600].
PatientState step(const PatientState& s, const PatientParams& p, double bolus_u,
                  double basal_u_per_hr, const std::vector<MealEvent>& meals,
                  double dt_min);

// CGM reading: truth plus Gaussian noise, clamped to the sensor range [40, 400].
double observe(const PatientState& s, Rng& noise_rng, double noise_sd);

// True if the meal's next daily occurrence lies in (clock, clock+dt].
bool meal_due(const MealEvent& m, double clock, double dt_min);

struct NamedPatient {
  std::string name;
  PatientParams params;
};

// count patients named adult#001.. with parameters jittered around the
// defaults (+/-15% on the insulin axis, +/-25% elsewhere); deterministic in
// seed. Cohort patients also get a nonzero diurnal_amplitude.
std::vector<NamedPatient> make_cohort(int count, std::uint64_t seed);

std::string params_to_json(const PatientParams& p);
PatientParams params_from_json(const std::string& text);

void cohort_to_json_file(const std::vector<NamedPatient>& cohort, const std::string& path);
std::vector<NamedPatient> cohort_from_json_file(const std::string& path);

}  // namespace tsode::vpatient
