#pragma once
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tsode/baselines.hpp"
#include "tsode/events.hpp"
#include "tsode/forecaster.hpp"
#include "tsode/rng.hpp"
#include "tsode/safegate.hpp"
#include "tsode/tspolicy.hpp"
#include "tsode/vpatient.hpp"

namespace tsode::looprt {

struct LoopConfig {
  double dt = 3.0;                  // min per control step
  double dia_min = 240.0;           // insulin-on-board decay span
  double carb_duration_min = 180.0; // carbs-on-board decay span
  double refractory_min = 20.0;     // min between nonzero boluses
  double noise_sd = 5.0;            // CGM noise
  int reward_horizon = 10;          // steps credited after each decision
  double prebolus_cap = 3.0;        // U
  void validate() const;
};

// Nearest grid dose; exact midpoints round down.
double project(double dose, const tspolicy::ActionGrid& grid);

// Linear decay: each bolus contributes units * (1 - age/dia) until it ages out.
double iob_of(std::span<const DoseEvent> hist, double now_min, double dia_min);
double cob_of(std::span<const CarbEvent> hist, double now_min, double duration_min);

// Feed-forward bolus for meals due this step: carbs/icr, capped.
double prebolus(std::span<const vpatient::MealEvent> meals_due, double icr, double cap);

enum class Mode { kWarmup, kEval };
enum class ControllerKind { kMealBolus, kPid, kTsmpc, kTsode };

const char* controller_name(ControllerKind k);
ControllerKind controller_of(const std::string& name);

struct StepRecord {
  long step = 0;
  double clock_min = 0.0;  // episode time at decision
  double bg_true = 0.0;
  double bg_obs = 0.0;
  double iob = 0.0;
  double cob = 0.0;
  int state = -1;          // -1 while the window is cold
  int action = -1;         // executed grid index (TS controllers)
  double proposed_u = 0.0;
  std::string decision;    // gate decision, or "direct" for ungated controllers
  double final_u = 0.0;
  double delivered_u = 0.0;
  double w_lcb = 0.0;
  double s_lcb = 0.0;
  bool forecast_evaluated = false;
  double reward = 0.0;
  bool has_reward = false;
  std::string note;        // "", "cold_start", "refractory"
};

void write_trace_csv(const std::string& path, std::span<const StepRecord> trace, double q_alpha);
std::vector<StepRecord> read_trace_csv(const std::string& path);

struct EpisodeConfig {
  vpatient::NamedPatient patient;
  std::vector<vpatient::MealEvent> meals;
  LoopConfig loop;
  safegate::SafetyConfig safety;
  tspolicy::BinSpec bins;
  tspolicy::ActionGrid grid = tspolicy::ActionGrid::insulin_default();
  ControllerKind kind = ControllerKind::kTsode;
  std::uint64_t seed = 0;
  baselines::PidConfig pid;
  baselines::TsmpcConfig tsmpc;
  double mealbolus_max = 10.0;
};

// Owns the patient, the controller state, and the rng streams of one
// episode. Successive run() calls continue the same episode, so a warm-up
// phase flows into an evaluation phase without a state reset.
class EpisodeRunner {
 public:
  explicit EpisodeRunner(EpisodeConfig cfg);

  // Advances n_days at loop.dt per step; returns the records of this call.
  std::vector<StepRecord> run(int n_days, Mode mode);

  // Attaches the trained forecaster and its calibration; from here on the
  // gate runs the forecast test. Pointers must outlive the runner.
  void arm_forecast(const forecaster::ForecasterModel* model,
                    const safegate::ConformalCalibration* cal);

  tspolicy::PolicyTable& policy_table() { return table_; }
  const tspolicy::PolicyTable& policy_table() const { return table_; }
  const std::vector<StepRecord>& trace() const { return trace_; }
  // Per-step feature rows (dose filled in), aligned with trace().
  const std::vector<forecaster::StepFeatures>& feature_rows() const { return features_; }
  forecaster::FeatureWindow window_ending_at(std::size_t step_idx) const;
  const EpisodeConfig& config() const { return cfg_; }

 private:
  void step_once(Mode mode);
  void process_matured_credits();
  void decide_tsode(StepRecord& rec, Mode mode,
                    std::span<const vpatient::MealEvent> meals_due, double trend, double tod);
  void decide_baseline(StepRecord& rec, Mode mode,
                       std::span<const vpatient::MealEvent> meals_due, double trend);
  void prune_histories(double now);

  EpisodeConfig cfg_;
  vpatient::PatientState pstate_;
  Rng noise_rng_;
  Rng policy_rng_;
  tspolicy::PolicyTable table_;
  baselines::PidState pid_state_;
  std::vector<double> bg_obs_hist_;
  std::vector<forecaster::StepFeatures> features_;
  std::vector<DoseEvent> dose_hist_;
  std::vector<CarbEvent> carb_hist_;
  std::size_t dose_hist_live_ = 0;  // first still-active event
  std::size_t carb_hist_live_ = 0;
  double last_bolus_time_ = -1e18;
  struct PendingCredit {
    long step;
    int state;
    int action;
  };
  std::vector<PendingCredit> pending_;
  const forecaster::ForecasterModel* model_ = nullptr;
  const safegate::ConformalCalibration* cal_ = nullptr;
  std::vector<StepRecord> trace_;
  long step_count_ = 0;
};

}  // namespace tsode::looprt
