#pragma once
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tsode/forecaster.hpp"
#include "tsode/tspolicy.hpp"

namespace tsode::safegate {

struct SafetyConfig {
  double floor_bg = 90.0;        // L: weighted forecast average must stay above this
  double max_descent = 1.5;      // gamma: slope floor is -gamma mg/dL per min
  double alpha = 0.1;            // conformal miscoverage rate
  double decay_lambda = 0.15;    // horizon weight decay
  int horizon = 10;              // forecast steps consulted
  double dt = 3.0;               // minutes per forecast step
  double bypass_bg = 250.0;      // hyperglycemia bypass threshold
  double bypass_trend = 0.5;     // mg/dL per min, rising
  double guard_bg_min = 90.0;    // no delivery below this reading
  double guard_trend_min = -1.0; // no delivery when falling faster and bg < 120
  double iob_cap = 5.0;          // U of insulin on board
  double night_start = 0.0;      // minutes into the day
  double night_end = 360.0;
  double night_cap = 0.5;        // U per decision during the night window
  double bisection_tol = 0.01;   // U
  bool per_step_quantiles = false;

  void validate() const;
};

// ceil((n+1)(1-alpha))-th smallest of the pooled absolute residuals, clamped
// to the maximum when the index overflows.
double conformal_quantile(std::vector<double> abs_residuals, double alpha);

struct ConformalCalibration {
  double alpha = 0.1;
  double q_alpha = 0.0;
  long n = 0;                  // residual count the quantile was computed from
  bool per_step = false;
  std::vector<double> q_step;  // per-horizon-step quantiles when per_step

  std::string to_json() const;
  static ConformalCalibration from_json(const std::string& text);
};

// Exponentially decaying weights w_k proportional to exp(-lambda*(k-1)),
// normalized to sum to one.
std::vector<double> make_weights(int k, double lambda);

double weighted_average(std::span<const double> mu, std::span<const double> weights);

// (mu_K - bg_now) / (K * dt), mg/dL per min.
double slope(std::span<const double> mu, double bg_now, double dt);

struct SafetyCheck {
  bool passes = false;
  double w_lcb = 0.0;
  double s_lcb = 0.0;
};

// Applies the conformal margin to the forecast mean, then tests both the
// weighted-average floor and the descent-rate floor on the shifted curve.
SafetyCheck check_safety(const forecaster::ForecastDist& dist, double bg_now,
                         const ConformalCalibration& cal, const SafetyConfig& cfg);

using PredictFn = std::function<forecaster::ForecastDist(double)>;

// Largest grid dose in [0, u_prop] passing check_safety, located by bisection
// (callers arrive here only after u_prop itself failed). The bisection
// assumes a monotone predicate; the result is verified at the grid dose and,
// when verification fails (non-monotone predicate), a descending grid scan
// guarantees a passing dose is returned whenever one exists. Zero is safe by
// definition and needs no forecast.
double largest_safe_dose(const PredictFn& predict, double u_prop, double bg_now,
                         const ConformalCalibration& cal, const SafetyConfig& cfg,
                         const tspolicy::ActionGrid& grid);

struct SafetyVerdict {
  enum class Decision {
    kAccept,
    kScaled,
    kReject,
    kBypassed,
    kGuardrailBlocked,
    kGuardrailCapped,
  };
  Decision decision = Decision::kAccept;
  double proposed_dose = 0.0;
  double final_dose = 0.0;
  double w_lcb = 0.0;  // meaningful only when forecast_evaluated
  double s_lcb = 0.0;
  bool forecast_evaluated = false;
};

const char* decision_name(SafetyVerdict::Decision d);

// Full gate: hard guardrails (low bg, falling trend, IOB cap, night cap)
// always apply; the hyperglycemia bypass skips only the forecast test; the
// forecast test itself runs when a calibration is supplied. The final dose
// never exceeds the proposed dose.
SafetyVerdict gate(double proposed_dose, double bg_now, double trend, double iob,
                   double time_of_day_min, const PredictFn& predict,
                   const ConformalCalibration* cal, const SafetyConfig& cfg,
                   const tspolicy::ActionGrid& grid);

// Pooled (or per-step) absolute residuals of the model on held-out records.
ConformalCalibration calibrate(const forecaster::ForecasterModel& model,
                               std::span<const forecaster::TrainRecord> records, double alpha,
                               bool per_step = false);

}  // namespace tsode::safegate
