#include "tsode/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "tsode/faults.hpp"

namespace tsode::baselines {

double meal_bolus_controller(std::span<const vpatient::MealEvent> meals_due, double icr,
                             double max_dose) {
  if (!(icr > 0)) throw ConfigFault("icr must be > 0");
  if (!(max_dose >= 0)) throw ConfigFault("max_dose must be >= 0");
  double carbs = 0.0;
  for (const auto& m : meals_due) carbs += m.carbs;
  return std::min(carbs / icr, max_dose);
}

void PidConfig::validate() const {
  if (!(setpoint > 0)) throw ConfigFault("pid setpoint must be > 0");
  if (!(kp >= 0 && ki >= 0 && kd >= 0)) throw ConfigFault("pid gains must be >= 0");
  if (!(integral_clamp > 0)) throw ConfigFault("pid integral_clamp must be > 0");
  if (!(out_max > 0)) throw ConfigFault("pid out_max must be > 0");
}

double pid_controller(double bg_obs, double dt_min, const PidConfig& cfg, PidState& st) {
  cfg.validate();
  if (!(dt_min > 0)) throw ConfigFault("dt_min must be > 0");
  if (!std::isfinite(bg_obs)) throw ConfigFault("bg_obs must be finite");
  const double err = bg_obs - cfg.setpoint;
  st.integral = std::clamp(st.integral + err * dt_min, -cfg.integral_clamp, cfg.integral_clamp);
  double deriv = 0.0;
  if (st.has_last) deriv = (bg_obs - st.last_bg) / dt_min;
  st.last_bg = bg_obs;
  st.has_last = true;
  const double u = cfg.kp * err + cfg.ki * st.integral + cfg.kd * deriv;
  return std::clamp(u, 0.0, cfg.out_max);
}

void TsmpcConfig::validate() const {
  if (horizon < 1) throw ConfigFault("tsmpc horizon must be >= 1");
  if (!(dt > 0)) throw ConfigFault("tsmpc dt must be > 0");
  if (!(setpoint > 0) || !(bg_floor > 0)) throw ConfigFault("tsmpc setpoint/floor must be > 0");
  if (!(dose_penalty >= 0)) throw ConfigFault("tsmpc dose_penalty must be >= 0");
  if (!(insulin_sensitivity > 0) || !(carb_sensitivity > 0))
    throw ConfigFault("tsmpc sensitivities must be > 0");
  if (!(dia_min > 0) || !(carb_duration_min > 0)) throw ConfigFault("tsmpc durations must be > 0");
  if (multipliers.empty()) throw ConfigFault("tsmpc needs at least one multiplier");
}

TsmpcConfig TsmpcConfig::population() {
  const vpatient::PatientParams typical;
  TsmpcConfig cfg;
  cfg.insulin_sensitivity = typical.insulin_sensitivity;
  cfg.carb_sensitivity = typical.carb_sensitivity;
  return cfg;
}

double ramp_fraction(double tau, double full_time) {
  if (tau <= 0) return 0.0;
  return std::min(1.0, tau / full_time);
}

namespace {

// Predicted BG at lead time tau under the controller's linear-ramp model,
// including pending insulin/carb tails and the candidate dose u.
double predict_bg(const TsmpcContext& ctx, const TsmpcConfig& cfg, double u, double tau) {
  double bg = ctx.bg_obs;
  for (const auto& d : ctx.dose_hist) {
    const double age = ctx.now_min - d.time_min;
    bg -= cfg.insulin_sensitivity * d.units *
          (ramp_fraction(age + tau, cfg.dia_min) - ramp_fraction(age, cfg.dia_min));
  }
  for (const auto& c : ctx.carb_hist) {
    const double age = ctx.now_min - c.time_min;
    bg += cfg.carb_sensitivity * c.grams *
          (ramp_fraction(age + tau, cfg.carb_duration_min) -
           ramp_fraction(age, cfg.carb_duration_min));
  }
  for (const auto& m : ctx.meals_due)
    bg += cfg.carb_sensitivity * m.carbs * ramp_fraction(tau, cfg.carb_duration_min);
  bg -= cfg.insulin_sensitivity * u * ramp_fraction(tau, cfg.dia_min);
  return bg;
}

}  // namespace

TsmpcDecision tsmpc_controller(const TsmpcContext& ctx, const TsmpcConfig& cfg,
                               const tspolicy::PolicyTable& mult_table,
                               const tspolicy::BinSpec& bins, const tspolicy::ActionGrid& grid,
                               Rng& rng, bool explore) {
  cfg.validate();
  TsmpcDecision out;
  out.state = tspolicy::discretize(ctx.bg_obs, ctx.trend, bins);

  double best_cost = 0.0;
  double best_dose = 0.0;
  bool found = false;
  for (double u : grid.doses) {
    double cost = cfg.dose_penalty * u * u;
    bool feasible = true;
    for (int j = 1; j <= cfg.horizon; ++j) {
      const double bg = predict_bg(ctx, cfg, u, j * cfg.dt);
      if (bg < cfg.bg_floor) {
        feasible = false;
        break;
      }
      const double e = bg - cfg.setpoint;
      cost += e * e;
    }
    if (!feasible) continue;
    if (!found || cost < best_cost) {
      best_cost = cost;
      best_dose = u;
      found = true;
    }
  }

  out.multiplier_arm = tspolicy::select(
      mult_table, out.state, rng,
      explore ? tspolicy::SelectMode::kExplore : tspolicy::SelectMode::kGreedy);
  const double scaled = best_dose * cfg.multipliers[static_cast<size_t>(out.multiplier_arm)];
  out.dose = grid.doses[static_cast<size_t>(grid.nearest_index(scaled))];
  return out;
}

}  // namespace tsode::baselines
