#include "tsode/safegate.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

#include "tsode/faults.hpp"

namespace tsode::safegate {

void SafetyConfig::validate() const {
  if (!(floor_bg > 0)) throw ConfigFault("floor_bg must be > 0");
  if (!(max_descent >= 0)) throw ConfigFault("max_descent must be >= 0");
  if (!(alpha > 0 && alpha < 1)) throw ConfigFault("alpha must be in (0, 1)");
  if (!(decay_lambda >= 0)) throw ConfigFault("decay_lambda must be >= 0");
  if (horizon != forecaster::kHorizon) throw ConfigFault("horizon must match the forecaster");
  if (!(dt > 0)) throw ConfigFault("dt must be > 0");
  if (!(bypass_bg > 0)) throw ConfigFault("bypass_bg must be > 0");
  if (!(guard_bg_min > 0)) throw ConfigFault("guard_bg_min must be > 0");
  if (!(iob_cap >= 0)) throw ConfigFault("iob_cap must be >= 0");
  if (!(night_start >= 0 && night_start < 1440)) throw ConfigFault("night_start out of range");
  if (!(night_end >= 0 && night_end <= 1440)) throw ConfigFault("night_end out of range");
  if (!(night_cap >= 0)) throw ConfigFault("night_cap must be >= 0");
  if (!(bisection_tol > 0)) throw ConfigFault("bisection_tol must be > 0");
}

double conformal_quantile(std::vector<double> abs_residuals, double alpha) {
  if (abs_residuals.empty()) throw ConfigFault("conformal_quantile needs residuals");
  if (!(alpha > 0 && alpha < 1)) throw ConfigFault("alpha must be in (0, 1)");
  for (double r : abs_residuals)
    if (!std::isfinite(r) || r < 0)
      throw ConfigFault("residuals must be finite and nonnegative");
  std::sort(abs_residuals.begin(), abs_residuals.end());
  const long n = static_cast<long>(abs_residuals.size());
  long k = static_cast<long>(std::ceil((static_cast<double>(n) + 1.0) * (1.0 - alpha)));
  if (k > n) k = n;
  if (k < 1) k = 1;
  return abs_residuals[static_cast<size_t>(k - 1)];
}

std::string ConformalCalibration::to_json() const {
  nlohmann::json j{{"alpha", alpha}, {"q_alpha", q_alpha}, {"n", n}, {"per_step", per_step},
                   {"q_step", q_step}};
  return j.dump(2);
}

ConformalCalibration ConformalCalibration::from_json(const std::string& text) {
  ConformalCalibration c;
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    c.alpha = j.at("alpha").get<double>();
    c.q_alpha = j.at("q_alpha").get<double>();
    c.n = j.at("n").get<long>();
    c.per_step = j.at("per_step").get<bool>();
    c.q_step = j.at("q_step").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigFault(std::string("bad calibration json: ") + e.what());
  }
  return c;
}

std::vector<double> make_weights(int k, double lambda) {
  if (k < 1) throw ConfigFault("make_weights needs k >= 1");
  if (!(lambda >= 0)) throw ConfigFault("lambda must be >= 0");
  std::vector<double> w(static_cast<size_t>(k));
  double total = 0.0;
  for (int i = 0; i < k; ++i) {
    w[static_cast<size_t>(i)] = std::exp(-lambda * i);
    total += w[static_cast<size_t>(i)];
  }
  for (auto& x : w) x /= total;
  return w;
}

double weighted_average(std::span<const double> mu, std::span<const double> weights) {
  if (mu.empty() || mu.size() != weights.size())
    throw ConfigFault("weighted_average length mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < mu.size(); ++i) acc += weights[i] * mu[i];
  return acc;
}

double slope(std::span<const double> mu, double bg_now, double dt) {
  if (mu.empty()) throw ConfigFault("slope needs a non-empty forecast");
  if (!(dt > 0)) throw ConfigFault("dt must be > 0");
  return (mu.back() - bg_now) / (static_cast<double>(mu.size()) * dt);
}

SafetyCheck check_safety(const forecaster::ForecastDist& dist, double bg_now,
                         const ConformalCalibration& cal, const SafetyConfig& cfg) {
  const int k = cfg.horizon;
  std::vector<double> shifted(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i) {
    const double q = cal.per_step ? cal.q_step.at(static_cast<size_t>(i)) : cal.q_alpha;
    const double m = dist.mu[static_cast<size_t>(i)] - q;
    if (!std::isfinite(m)) throw NumericalFault("check_safety: non-finite shifted forecast");
    shifted[static_cast<size_t>(i)] = m;
  }
  const std::vector<double> w = make_weights(k, cfg.decay_lambda);
  SafetyCheck out;
  out.w_lcb = weighted_average(shifted, w);
  out.s_lcb = slope(shifted, bg_now, cfg.dt);
  out.passes = out.w_lcb >= cfg.floor_bg && out.s_lcb >= -cfg.max_descent;
  return out;
}

double largest_safe_dose(const PredictFn& predict, double u_prop, double bg_now,
                         const ConformalCalibration& cal, const SafetyConfig& cfg,
                         const tspolicy::ActionGrid& grid) {
  if (!predict) throw UsageFault("largest_safe_dose needs a predict function");
  if (!(u_prop >= 0) || !std::isfinite(u_prop)) throw ConfigFault("u_prop must be finite and >= 0");
  if (u_prop == 0.0) return 0.0;

  const auto safe = [&](double u) { return check_safety(predict(u), bg_now, cal, cfg).passes; };

  double lo = 0.0, hi = u_prop;
  while (hi - lo > cfg.bisection_tol) {
    const double mid = 0.5 * (lo + hi);
    if (safe(mid)) lo = mid; else hi = mid;
  }

  const int top = grid.floor_index(u_prop);
  const int candidate = std::min(grid.floor_index(lo), top);
  if (candidate >= 1 && safe(grid.doses[static_cast<size_t>(candidate)]))
    return grid.doses[static_cast<size_t>(candidate)];
  // Non-monotone predicate: the bisection bracket is unreliable, so scan the
  // whole admissible grid from the top.
  for (int i = top; i >= 1; --i) {
    if (i == candidate) continue;
    if (safe(grid.doses[static_cast<size_t>(i)])) return grid.doses[static_cast<size_t>(i)];
  }
  return 0.0;
}

const char* decision_name(SafetyVerdict::Decision d) {
  switch (d) {
    case SafetyVerdict::Decision::kAccept: return "accept";
    case SafetyVerdict::Decision::kScaled: return "scaled";
    case SafetyVerdict::Decision::kReject: return "reject";
    case SafetyVerdict::Decision::kBypassed: return "bypassed";
    case SafetyVerdict::Decision::kGuardrailBlocked: return "guardrail_blocked";
    case SafetyVerdict::Decision::kGuardrailCapped: return "guardrail_capped";
  }
  return "unknown";
}

SafetyVerdict gate(double proposed_dose, double bg_now, double trend, double iob,
                   double time_of_day_min, const PredictFn& predict,
                   const ConformalCalibration* cal, const SafetyConfig& cfg,
                   const tspolicy::ActionGrid& grid) {
  cfg.validate();
  if (!(proposed_dose >= 0) || !std::isfinite(proposed_dose))
    throw ConfigFault("proposed_dose must be finite and >= 0");
  if (!std::isfinite(bg_now) || !std::isfinite(trend) || !std::isfinite(iob))
    throw ConfigFault("gate inputs must be finite");

  SafetyVerdict v;
  v.proposed_dose = proposed_dose;

  if (proposed_dose == 0.0) {
    v.decision = SafetyVerdict::Decision::kAccept;
    v.final_dose = 0.0;
    return v;
  }

  if (bg_now < cfg.guard_bg_min ||
      (trend < cfg.guard_trend_min && bg_now < 120.0)) {
    v.decision = SafetyVerdict::Decision::kGuardrailBlocked;
    v.final_dose = 0.0;
    return v;
  }

  double dose = proposed_dose;
  if (iob + dose > cfg.iob_cap) {
    const double room = std::max(0.0, cfg.iob_cap - iob);
    const int idx = grid.floor_index(std::min(dose, room));
    dose = idx >= 0 ? grid.doses[static_cast<size_t>(idx)] : 0.0;
  }
  const double tod = std::fmod(time_of_day_min, 1440.0);
  if (tod >= cfg.night_start && tod < cfg.night_end && dose > cfg.night_cap) {
    const int idx = grid.floor_index(cfg.night_cap);
    dose = idx >= 0 ? grid.doses[static_cast<size_t>(idx)] : 0.0;
  }
  const bool capped = dose < proposed_dose - 1e-12;
  if (dose == 0.0) {
    v.decision = SafetyVerdict::Decision::kGuardrailCapped;
    v.final_dose = 0.0;
    return v;
  }

  if (bg_now >= cfg.bypass_bg && trend >= cfg.bypass_trend) {
    v.decision = SafetyVerdict::Decision::kBypassed;
    v.final_dose = dose;
    return v;
  }

  if (cal == nullptr || !predict) {
    v.decision = capped ? SafetyVerdict::Decision::kGuardrailCapped
                        : SafetyVerdict::Decision::kAccept;
    v.final_dose = dose;
    return v;
  }

  const SafetyCheck at_dose = check_safety(predict(dose), bg_now, *cal, cfg);
  v.forecast_evaluated = true;
  v.w_lcb = at_dose.w_lcb;
  v.s_lcb = at_dose.s_lcb;
  if (at_dose.passes) {
    v.decision = capped ? SafetyVerdict::Decision::kGuardrailCapped
                        : SafetyVerdict::Decision::kAccept;
    v.final_dose = dose;
    return v;
  }

  const double d_star = largest_safe_dose(predict, dose, bg_now, *cal, cfg, grid);
  if (d_star > 0.0) {
    const SafetyCheck at_final = check_safety(predict(d_star), bg_now, *cal, cfg);
    v.w_lcb = at_final.w_lcb;
    v.s_lcb = at_final.s_lcb;
    v.decision = SafetyVerdict::Decision::kScaled;
    v.final_dose = d_star;
  } else {
    v.decision = SafetyVerdict::Decision::kReject;
    v.final_dose = 0.0;
  }
  return v;
}

ConformalCalibration calibrate(const forecaster::ForecasterModel& model,
                               std::span<const forecaster::TrainRecord> records, double alpha,
                               bool per_step) {
  if (records.empty()) throw ConfigFault("calibrate needs records");
  std::vector<std::vector<double>> by_step(forecaster::kHorizon);
  std::vector<double> pooled;
  pooled.reserve(records.size() * forecaster::kHorizon);
  for (const auto& rec : records) {
    const forecaster::ForecastDist d = model.predict(rec.window, rec.dose);
    for (int k = 0; k < forecaster::kHorizon; ++k) {
      const double r = std::abs(rec.target[static_cast<size_t>(k)] - d.mu[static_cast<size_t>(k)]);
      pooled.push_back(r);
      by_step[static_cast<size_t>(k)].push_back(r);
    }
  }
  ConformalCalibration cal;
  cal.alpha = alpha;
  cal.n = static_cast<long>(pooled.size());
  cal.q_alpha = conformal_quantile(std::move(pooled), alpha);
  cal.per_step = per_step;
  if (per_step)
    for (auto& rs : by_step) cal.q_step.push_back(conformal_quantile(std::move(rs), alpha));
  return cal;
}

}  // namespace tsode::safegate
