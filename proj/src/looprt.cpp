#include "tsode/looprt.hpp"

#include <algorithm>
#include <cmath>

#include "tsode/csvio.hpp"
#include "tsode/faults.hpp"

namespace tsode::looprt {

namespace {
constexpr double kTwoPi = 6.283185307179586476925286766559;
}

void LoopConfig::validate() const {
  if (!(dt > 0)) throw ConfigFault("loop dt must be > 0");
  if (!(dia_min > 0)) throw ConfigFault("dia_min must be > 0");
  if (!(carb_duration_min > 0)) throw ConfigFault("carb_duration_min must be > 0");
  if (!(refractory_min >= 0)) throw ConfigFault("refractory_min must be >= 0");
  if (!(noise_sd >= 0)) throw ConfigFault("noise_sd must be >= 0");
  if (reward_horizon < 1) throw ConfigFault("reward_horizon must be >= 1");
  if (!(prebolus_cap >= 0)) throw ConfigFault("prebolus_cap must be >= 0");
}

double project(double dose, const tspolicy::ActionGrid& grid) {
  if (!std::isfinite(dose)) throw ConfigFault("project: dose must be finite");
  return grid.doses[static_cast<size_t>(grid.nearest_index(dose))];
}

double iob_of(std::span<const DoseEvent> hist, double now_min, double dia_min) {
  if (!(dia_min > 0)) throw ConfigFault("dia_min must be > 0");
  double acc = 0.0;
  for (const auto& d : hist) {
    const double age = now_min - d.time_min;
    if (age < 0 || age >= dia_min) continue;
    acc += d.units * (1.0 - age / dia_min);
  }
  return acc;
}

double cob_of(std::span<const CarbEvent> hist, double now_min, double duration_min) {
  if (!(duration_min > 0)) throw ConfigFault("duration_min must be > 0");
  double acc = 0.0;
  for (const auto& c : hist) {
    const double age = now_min - c.time_min;
    if (age < 0 || age >= duration_min) continue;
    acc += c.grams * (1.0 - age / duration_min);
  }
  return acc;
}

double prebolus(std::span<const vpatient::MealEvent> meals_due, double icr, double cap) {
  if (!(icr > 0)) throw ConfigFault("icr must be > 0");
  if (!(cap >= 0)) throw ConfigFault("prebolus cap must be >= 0");
  double carbs = 0.0;
  for (const auto& m : meals_due) carbs += m.carbs;
  return std::min(carbs / icr, cap);
}

const char* controller_name(ControllerKind k) {
  switch (k) {
    case ControllerKind::kMealBolus: return "mealbolus";
    case ControllerKind::kPid: return "pid";
    case ControllerKind::kTsmpc: return "tsmpc";
    case ControllerKind::kTsode: return "tsode";
  }
  return "unknown";
}

ControllerKind controller_of(const std::string& name) {
  if (name == "mealbolus") return ControllerKind::kMealBolus;
  if (name == "pid") return ControllerKind::kPid;
  if (name == "tsmpc") return ControllerKind::kTsmpc;
  if (name == "tsode") return ControllerKind::kTsode;
  throw ConfigFault("unknown controller: " + name);
}

namespace {

tspolicy::PolicyTable make_table(const EpisodeConfig& cfg) {
  switch (cfg.kind) {
    case ControllerKind::kTsode:
      return {cfg.bins.state_count(), cfg.grid.size()};
    case ControllerKind::kTsmpc:
      return {cfg.bins.state_count(), static_cast<int>(cfg.tsmpc.multipliers.size())};
    default:
      return {1, 1};
  }
}

}  // namespace

EpisodeRunner::EpisodeRunner(EpisodeConfig cfg)
    : cfg_(std::move(cfg)),
      pstate_(vpatient::equilibrium_from(cfg_.patient.params)),
      noise_rng_(Rng(cfg_.seed).fork("cgm")),
      policy_rng_(Rng(cfg_.seed).fork("policy")),
      table_(make_table(cfg_)) {
  cfg_.patient.params.validate();
  cfg_.loop.validate();
  cfg_.safety.validate();
  cfg_.bins.validate();
  cfg_.grid.validate();
  if (cfg_.kind == ControllerKind::kPid) cfg_.pid.validate();
  if (cfg_.kind == ControllerKind::kTsmpc) cfg_.tsmpc.validate();
}

void EpisodeRunner::arm_forecast(const forecaster::ForecasterModel* model,
                                 const safegate::ConformalCalibration* cal) {
  if ((model == nullptr) != (cal == nullptr))
    throw UsageFault("arm_forecast needs both the model and the calibration");
  model_ = model;
  cal_ = cal;
}

forecaster::FeatureWindow EpisodeRunner::window_ending_at(std::size_t step_idx) const {
  if (step_idx + 1 < static_cast<std::size_t>(forecaster::kWindow) ||
      step_idx >= features_.size())
    throw UsageFault("window_ending_at: window not warm at this step");
  forecaster::FeatureWindow w;
  for (int r = 0; r < forecaster::kWindow; ++r) {
    const auto& s = features_[step_idx + 1 - forecaster::kWindow + static_cast<std::size_t>(r)];
    w.at(r, 0) = s.bg;
    w.at(r, 1) = s.iob;
    w.at(r, 2) = s.cob;
    w.at(r, 3) = s.sin_tod;
    w.at(r, 4) = s.cos_tod;
    w.at(r, 5) = s.lbgi;
    w.at(r, 6) = s.hbgi;
  }
  return w;
}

void EpisodeRunner::prune_histories(double now) {
  while (dose_hist_live_ < dose_hist_.size() &&
         now - dose_hist_[dose_hist_live_].time_min >= cfg_.loop.dia_min)
    ++dose_hist_live_;
  while (carb_hist_live_ < carb_hist_.size() &&
         now - carb_hist_[carb_hist_live_].time_min >= cfg_.loop.carb_duration_min)
    ++carb_hist_live_;
}

void EpisodeRunner::process_matured_credits() {
  const int k = cfg_.loop.reward_horizon;
  std::size_t done = 0;
  for (const PendingCredit& pc : pending_) {
    if (pc.step + k > step_count_) break;
    const double reward = tspolicy::shaped_reward(
        {bg_obs_hist_.data() + pc.step + 1, static_cast<std::size_t>(k)});
    table_.update(pc.state, pc.action, reward);
    trace_[static_cast<std::size_t>(pc.step)].reward = reward;
    trace_[static_cast<std::size_t>(pc.step)].has_reward = true;
    ++done;
  }
  pending_.erase(pending_.begin(), pending_.begin() + static_cast<long>(done));
}

void EpisodeRunner::decide_tsode(StepRecord& rec, Mode mode,
                                 std::span<const vpatient::MealEvent> meals_due, double trend,
                                 double tod) {
  if (features_.size() < static_cast<std::size_t>(forecaster::kWindow)) {
    rec.note = "cold_start";
    rec.decision = "none";
    return;
  }
  rec.state = tspolicy::discretize(rec.bg_obs, trend, cfg_.bins);
  const int a = tspolicy::select(table_, rec.state, policy_rng_,
                                 mode == Mode::kWarmup ? tspolicy::SelectMode::kExplore
                                                       : tspolicy::SelectMode::kGreedy);
  const double u_policy = cfg_.grid.doses[static_cast<size_t>(a)];
  const double u_pre = prebolus(meals_due, cfg_.patient.params.icr, cfg_.loop.prebolus_cap);
  const double u_prop = project(u_policy + u_pre, cfg_.grid);
  rec.proposed_u = u_prop;

  const double now = rec.clock_min;
  if (u_prop > 0 && now - last_bolus_time_ < cfg_.loop.refractory_min) {
    rec.note = "refractory";
    rec.decision = "none";
    rec.action = 0;
    if (mode == Mode::kWarmup) pending_.push_back({rec.step, rec.state, 0});
    return;
  }

  safegate::PredictFn pf;
  if (model_ != nullptr) {
    const forecaster::FeatureWindow w = window_ending_at(static_cast<std::size_t>(rec.step));
    pf = [this, w](double u) { return model_->predict(w, u); };
  }
  const safegate::SafetyVerdict v = safegate::gate(u_prop, rec.bg_obs, trend, rec.iob, tod, pf,
                                                   cal_, cfg_.safety, cfg_.grid);
  rec.decision = safegate::decision_name(v.decision);
  rec.final_u = v.final_dose;
  rec.delivered_u = v.final_dose;
  rec.w_lcb = v.w_lcb;
  rec.s_lcb = v.s_lcb;
  rec.forecast_evaluated = v.forecast_evaluated;
  rec.action = std::max(0, cfg_.grid.floor_index(v.final_dose));
  if (v.final_dose > 0) last_bolus_time_ = now;
  if (mode == Mode::kWarmup) pending_.push_back({rec.step, rec.state, rec.action});
}

void EpisodeRunner::decide_baseline(StepRecord& rec, Mode mode,
                                    std::span<const vpatient::MealEvent> meals_due,
                                    double trend) {
  // Baselines share the actuation protocol (grid, cap, refractory) but skip
  // the forecaster gate; their raw output is projected onto the grid first.
  double u_raw = 0.0;
  bool tsmpc_credit = false;
  switch (cfg_.kind) {
    case ControllerKind::kMealBolus:
      u_raw = baselines::meal_bolus_controller(meals_due, cfg_.patient.params.icr,
                                               cfg_.mealbolus_max);
      break;
    case ControllerKind::kPid:
      u_raw = baselines::pid_controller(rec.bg_obs, cfg_.loop.dt, cfg_.pid, pid_state_);
      break;
    case ControllerKind::kTsmpc: {
      if (features_.size() < static_cast<std::size_t>(forecaster::kWindow)) {
        rec.note = "cold_start";
        rec.decision = "none";
        return;
      }
      baselines::TsmpcContext ctx;
      ctx.bg_obs = rec.bg_obs;
      ctx.trend = trend;
      ctx.now_min = rec.clock_min;
      ctx.dose_hist = {dose_hist_.data() + dose_hist_live_, dose_hist_.size() - dose_hist_live_};
      ctx.carb_hist = {carb_hist_.data() + carb_hist_live_, carb_hist_.size() - carb_hist_live_};
      ctx.meals_due = meals_due;
      const baselines::TsmpcDecision d =
          baselines::tsmpc_controller(ctx, cfg_.tsmpc, table_, cfg_.bins, cfg_.grid, policy_rng_,
                                      mode == Mode::kWarmup);
      rec.state = d.state;
      rec.action = d.multiplier_arm;
      u_raw = d.dose;
      tsmpc_credit = mode == Mode::kWarmup;
      break;
    }
    case ControllerKind::kTsode:
      throw UsageFault("decide_baseline called for tsode");
  }

  const double u_prop = project(u_raw, cfg_.grid);
  rec.proposed_u = u_prop;
  const double now = rec.clock_min;
  if (u_prop > 0 && now - last_bolus_time_ < cfg_.loop.refractory_min) {
    rec.note = "refractory";
    rec.decision = "none";
    return;
  }
  rec.decision = "direct";
  rec.final_u = u_prop;
  rec.delivered_u = u_prop;
  if (u_prop > 0) last_bolus_time_ = now;
  if (tsmpc_credit) pending_.push_back({rec.step, rec.state, rec.action});
}

void EpisodeRunner::step_once(Mode mode) {
  const double now = pstate_.clock;
  const double tod = std::fmod(now, 1440.0);
  const double bg_true = pstate_.plasma_glucose;
  const double bg_obs = vpatient::observe(pstate_, noise_rng_, cfg_.loop.noise_sd);
  bg_obs_hist_.push_back(bg_obs);
  const double trend = tspolicy::trend_of(bg_obs_hist_, cfg_.loop.dt);

  prune_histories(now);
  const double iob = iob_of({dose_hist_.data() + dose_hist_live_, dose_hist_.size() - dose_hist_live_},
                            now, cfg_.loop.dia_min);
  const double cob = cob_of({carb_hist_.data() + carb_hist_live_, carb_hist_.size() - carb_hist_live_},
                            now, cfg_.loop.carb_duration_min);

  forecaster::StepFeatures sf;
  sf.bg = bg_obs;
  sf.iob = iob;
  sf.cob = cob;
  sf.sin_tod = std::sin(kTwoPi * tod / 1440.0);
  sf.cos_tod = std::cos(kTwoPi * tod / 1440.0);
  sf.lbgi = tspolicy::lbgi_of(bg_obs);
  sf.hbgi = tspolicy::hbgi_of(bg_obs);
  features_.push_back(sf);

  process_matured_credits();

  std::vector<vpatient::MealEvent> meals_due;
  for (const auto& m : cfg_.meals)
    if (vpatient::meal_due(m, now, cfg_.loop.dt)) meals_due.push_back(m);

  StepRecord rec;
  rec.step = step_count_;
  rec.clock_min = now;
  rec.bg_true = bg_true;
  rec.bg_obs = bg_obs;
  rec.iob = iob;
  rec.cob = cob;

  if (cfg_.kind == ControllerKind::kTsode)
    decide_tsode(rec, mode, meals_due, trend, tod);
  else
    decide_baseline(rec, mode, meals_due, trend);

  features_.back().dose = rec.delivered_u;
  if (rec.delivered_u > 0) dose_hist_.push_back({now, rec.delivered_u});
  for (const auto& m : meals_due) carb_hist_.push_back({now, m.carbs});

  pstate_ = vpatient::step(pstate_, cfg_.patient.params, rec.delivered_u,
                           cfg_.patient.params.basal_rate, cfg_.meals, cfg_.loop.dt);

  trace_.push_back(std::move(rec));
  step_count_ += 1;
}

std::vector<StepRecord> EpisodeRunner::run(int n_days, Mode mode) {
  if (n_days < 1) throw ConfigFault("run needs n_days >= 1");
  const long steps = std::lround(n_days * 1440.0 / cfg_.loop.dt);
  const std::size_t start = trace_.size();
  for (long i = 0; i < steps; ++i) step_once(mode);
  return {trace_.begin() + static_cast<long>(start), trace_.end()};
}

void write_trace_csv(const std::string& path, std::span<const StepRecord> trace, double q_alpha) {
  csvio::Table t;
  t.header = {"step", "clock_min", "bg_true", "bg_obs", "iob", "cob", "state", "action",
              "proposed_u", "decision", "final_u", "delivered_u", "w_lcb", "s_lcb", "q_alpha",
              "reward", "note"};
  const std::string q_str = std::isfinite(q_alpha) ? csvio::fmt(q_alpha) : std::string();
  for (const auto& r : trace) {
    std::vector<std::string> row;
    row.reserve(t.header.size());
    row.push_back(csvio::fmt(r.step));
    row.push_back(csvio::fmt(r.clock_min));
    row.push_back(csvio::fmt(r.bg_true));
    row.push_back(csvio::fmt(r.bg_obs));
    row.push_back(csvio::fmt(r.iob));
    row.push_back(csvio::fmt(r.cob));
    row.push_back(csvio::fmt(r.state));
    row.push_back(csvio::fmt(r.action));
    row.push_back(csvio::fmt(r.proposed_u));
    row.push_back(r.decision);
    row.push_back(csvio::fmt(r.final_u));
    row.push_back(csvio::fmt(r.delivered_u));
    row.push_back(r.forecast_evaluated ? csvio::fmt(r.w_lcb) : std::string());
    row.push_back(r.forecast_evaluated ? csvio::fmt(r.s_lcb) : std::string());
    row.push_back(q_str);
    row.push_back(r.has_reward ? csvio::fmt(r.reward) : std::string());
    row.push_back(r.note);
    t.rows.push_back(std::move(row));
  }
  csvio::write_csv(path, t);
}

std::vector<StepRecord> read_trace_csv(const std::string& path) {
  const csvio::Table t = csvio::read_csv(path);
  auto need = [&](const char* name) {
    const int c = t.col(name);
    if (c < 0) throw ConfigFault(std::string("trace csv missing column ") + name + ": " + path);
    return c;
  };
  const int c_step = need("step"), c_clock = need("clock_min"), c_bgt = need("bg_true"),
            c_bgo = need("bg_obs"), c_iob = need("iob"), c_cob = need("cob"),
            c_state = need("state"), c_action = need("action"), c_prop = need("proposed_u"),
            c_dec = need("decision"), c_fin = need("final_u"), c_del = need("delivered_u"),
            c_w = need("w_lcb"), c_s = need("s_lcb"), c_rew = need("reward"), c_note = need("note");
  std::vector<StepRecord> out;
  out.reserve(t.rows.size());
  for (const auto& row : t.rows) {
    StepRecord r;
    r.step = std::stol(row[static_cast<size_t>(c_step)]);
    r.clock_min = std::stod(row[static_cast<size_t>(c_clock)]);
    r.bg_true = std::stod(row[static_cast<size_t>(c_bgt)]);
    r.bg_obs = std::stod(row[static_cast<size_t>(c_bgo)]);
    r.iob = std::stod(row[static_cast<size_t>(c_iob)]);
    r.cob = std::stod(row[static_cast<size_t>(c_cob)]);
    r.state = std::stoi(row[static_cast<size_t>(c_state)]);
    r.action = std::stoi(row[static_cast<size_t>(c_action)]);
    r.proposed_u = std::stod(row[static_cast<size_t>(c_prop)]);
    r.decision = row[static_cast<size_t>(c_dec)];
    r.final_u = std::stod(row[static_cast<size_t>(c_fin)]);
    r.delivered_u = std::stod(row[static_cast<size_t>(c_del)]);
    const std::string& w = row[static_cast<size_t>(c_w)];
    if (!w.empty()) {
      r.w_lcb = std::stod(w);
      r.s_lcb = std::stod(row[static_cast<size_t>(c_s)]);
      r.forecast_evaluated = true;
    }
    const std::string& rew = row[static_cast<size_t>(c_rew)];
    if (!rew.empty()) {
      r.reward = std::stod(rew);
      r.has_reward = true;
    }
    r.note = row[static_cast<size_t>(c_note)];
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace tsode::looprt
