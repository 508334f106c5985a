#pragma once
#include <span>
#include <vector>

#include "tsode/events.hpp"
#include "tsode/rng.hpp"
#include "tsode/tspolicy.hpp"
#include "tsode/vpatient.hpp"

namespace tsode::baselines {

// Feed-forward meal announcement dosing: carbs/icr at meal steps, nothing
// otherwise, clamped to a hard maximum.
double meal_bolus_controller(std::span<const vpatient::MealEvent> meals_due, double icr,
                             double max_dose);

struct PidConfig {
  double setpoint = 120.0;        // mg/dL
  double kp = 0.025;              // U per mg/dL
  double ki = 1.0e-4;             // U per (mg/dL * min)
  double kd = 0.30;               // U per (mg/dL / min)
  double integral_clamp = 3000.0; // mg/dL * min
  double out_max = 3.0;           // U per decision
  void validate() const;
};

struct PidState {
  double integral = 0.0;
  double last_bg = 0.0;
  bool has_last = false;
};

// Micro-bolus PID on the glucose error with derivative-on-measurement and
// clamped integral. Output in [0, out_max]; no meal feedforward, no IOB
// awareness.
double pid_controller(double bg_obs, double dt_min, const PidConfig& cfg, PidState& st);

struct TsmpcConfig {
  int horizon = 10;
  double dt = 3.0;
  double setpoint = 120.0;
  double bg_floor = 80.0;               // constraint on its own prediction
  double dose_penalty = 800.0;          // rho
  double insulin_sensitivity = 32.0;    // mg/dL per U (total effect)
  double carb_sensitivity = 2.0;        // mg/dL per g
  double dia_min = 240.0;
  double carb_duration_min = 180.0;
  std::vector<double> multipliers = {0.5, 0.75, 1.0, 1.25, 1.5};
  void validate() const;
  // Therapy parameters a clinician would program: population-typical
  // sensitivities, not the individual patient's. The linear-ramp kinetics are
  // likewise the controller's own (wrong) assumption; the multiplier bandit
  // is what adapts the result to the person.
  static TsmpcConfig population();
};

struct TsmpcContext {
  double bg_obs = 0.0;
  double trend = 0.0;  // mg/dL per min
  double now_min = 0.0;
  std::span<const looprt::DoseEvent> dose_hist;
  std::span<const looprt::CarbEvent> carb_hist;
  std::span<const vpatient::MealEvent> meals_due;
};

// Grid search over candidate doses on a linear-ramp response model, subject
// to the model's own bg floor; the winner is scaled by a Thompson-sampled
// multiplier and projected back to the grid. Returns the chosen grid dose
// and reports the multiplier arm for crediting.
struct TsmpcDecision {
  double dose = 0.0;
  int multiplier_arm = 0;
  int state = 0;
};

TsmpcDecision tsmpc_controller(const TsmpcContext& ctx, const TsmpcConfig& cfg,
                               const tspolicy::PolicyTable& mult_table,
                               const tspolicy::BinSpec& bins, const tspolicy::ActionGrid& grid,
                               Rng& rng, bool explore);

// Model-predicted BG change at lead time tau for one unit/gram given at age
// `age` before now (linear ramp to full effect).
double ramp_fraction(double tau, double full_time);

}  // namespace tsode::baselines
