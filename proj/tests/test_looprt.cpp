#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tsode/csvio.hpp"
#include "tsode/faults.hpp"
#include "tsode/looprt.hpp"

using namespace tsode;
using namespace tsode::looprt;

namespace {

EpisodeConfig base_config(ControllerKind kind, std::uint64_t seed) {
  EpisodeConfig cfg;
  cfg.patient.name = "bench";
  cfg.patient.params.solve_endogenous_production();
  cfg.meals = {{480.0, 50.0}, {750.0, 70.0}, {960.0, 15.0}, {1140.0, 60.0}};
  cfg.kind = kind;
  cfg.seed = seed;
  return cfg;
}

std::string tmp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("iob decays linearly and ages out at dia") {
  const std::vector<DoseEvent> doses = {{0.0, 2.0}, {60.0, 1.0}};
  REQUIRE(iob_of(doses, 0.0, 240.0) == 2.0);  // fresh bolus counts in full, future one not at all
  REQUIRE(iob_of(doses, 120.0, 240.0) == doctest::Approx(2.0 * 0.5 + 1.0 * 0.75));
  REQUIRE(iob_of(doses, 240.0, 240.0) == doctest::Approx(1.0 * 0.25));  // first one aged out
  REQUIRE(iob_of(doses, 300.0, 240.0) == 0.0);
  REQUIRE(iob_of({}, 10.0, 240.0) == 0.0);
  REQUIRE_THROWS_AS(iob_of(doses, 0.0, 0.0), ConfigFault);
}

TEST_CASE("cob mirrors iob with the carb duration") {
  const std::vector<CarbEvent> carbs = {{100.0, 60.0}};
  REQUIRE(cob_of(carbs, 100.0, 180.0) == 60.0);
  REQUIRE(cob_of(carbs, 190.0, 180.0) == doctest::Approx(30.0));
  REQUIRE(cob_of(carbs, 280.0, 180.0) == 0.0);
  REQUIRE(cob_of(carbs, 50.0, 180.0) == 0.0);
  REQUIRE_THROWS_AS(cob_of(carbs, 0.0, -1.0), ConfigFault);
}

TEST_CASE("project snaps to the nearest grid dose, midpoints down") {
  const auto grid = tspolicy::ActionGrid::insulin_default();
  REQUIRE(project(1.47, grid) == grid.doses[7]);
  REQUIRE(project(1.5, grid) == grid.doses[7]);  // exact midpoint rounds down
  REQUIRE(project(1.51, grid) == grid.doses[8]);
  REQUIRE(project(-0.4, grid) == 0.0);
  REQUIRE(project(9.0, grid) == grid.doses[15]);
  REQUIRE_THROWS_AS(project(std::nan(""), grid), ConfigFault);
}

TEST_CASE("prebolus covers due carbs through the icr, capped") {
  std::vector<vpatient::MealEvent> due = {{480.0, 50.0}};
  REQUIRE(prebolus(due, 10.0, 3.0) == 3.0);  // 5 U wanted
  REQUIRE(prebolus(due, 20.0, 3.0) == 2.5);
  due.push_back({485.0, 30.0});
  REQUIRE(prebolus(due, 20.0, 3.0) == 3.0);  // 4 U wanted
  REQUIRE(prebolus({}, 20.0, 3.0) == 0.0);
  REQUIRE_THROWS_AS(prebolus(due, 0.0, 3.0), ConfigFault);
  REQUIRE_THROWS_AS(prebolus(due, 20.0, -1.0), ConfigFault);
}

TEST_CASE("loop config validation rejects nonsense") {
  LoopConfig c;
  c.validate();
  c.dt = 0.0;
  REQUIRE_THROWS_AS(c.validate(), ConfigFault);
  c = {};
  c.dia_min = -240.0;
  REQUIRE_THROWS_AS(c.validate(), ConfigFault);
  c = {};
  c.carb_duration_min = 0.0;
  REQUIRE_THROWS_AS(c.validate(), ConfigFault);
  c = {};
  c.refractory_min = -1.0;
  REQUIRE_THROWS_AS(c.validate(), ConfigFault);
  c = {};
  c.noise_sd = -0.1;
  REQUIRE_THROWS_AS(c.validate(), ConfigFault);
  c = {};
  c.reward_horizon = 0;
  REQUIRE_THROWS_AS(c.validate(), ConfigFault);
  c = {};
  c.prebolus_cap = -1.0;
  REQUIRE_THROWS_AS(c.validate(), ConfigFault);
}

TEST_CASE("controller names round-trip") {
  for (auto k : {ControllerKind::kMealBolus, ControllerKind::kPid, ControllerKind::kTsmpc,
                 ControllerKind::kTsode})
    REQUIRE(controller_of(controller_name(k)) == k);
  REQUIRE_THROWS_AS(controller_of("openloop"), ConfigFault);
}

TEST_CASE("trace csv round-trips every field") {
  std::vector<StepRecord> tr(3);
  tr[0].step = 0;
  tr[0].clock_min = 0.0;
  tr[0].bg_true = 160.5;
  tr[0].bg_obs = 158.25;
  tr[0].decision = "none";
  tr[0].note = "cold_start";
  tr[1].step = 1;
  tr[1].clock_min = 3.0;
  tr[1].bg_true = 161.0;
  tr[1].bg_obs = 163.5;
  tr[1].iob = 1.25;
  tr[1].cob = 42.5;
  tr[1].state = 42;
  tr[1].action = 7;
  tr[1].proposed_u = 1.4;
  tr[1].decision = "scaled";
  tr[1].final_u = 0.6;
  tr[1].delivered_u = 0.6;
  tr[1].w_lcb = 101.25;
  tr[1].s_lcb = -0.75;
  tr[1].forecast_evaluated = true;
  tr[1].reward = -3.5;
  tr[1].has_reward = true;
  tr[2].step = 2;
  tr[2].clock_min = 6.0;
  tr[2].bg_true = 159.75;
  tr[2].bg_obs = 157.0;
  tr[2].state = 41;
  tr[2].action = 0;
  tr[2].proposed_u = 0.8;
  tr[2].decision = "none";
  tr[2].note = "refractory";

  const std::string path = tmp_path("tsode_trace_rt.csv");
  write_trace_csv(path, tr, 12.5);

  const csvio::Table raw = csvio::read_csv(path);
  REQUIRE(raw.header.size() == 17);
  REQUIRE(raw.header[14] == "q_alpha");
  for (const auto& row : raw.rows) REQUIRE(row[14] == "12.5");
  // w/s and reward cells stay empty until the gate and the credit fill them
  REQUIRE(raw.rows[0][12].empty());
  REQUIRE(raw.rows[2][15].empty());

  const auto back = read_trace_csv(path);
  REQUIRE(back.size() == tr.size());
  for (std::size_t i = 0; i < tr.size(); ++i) {
    REQUIRE(back[i].step == tr[i].step);
    REQUIRE(back[i].clock_min == tr[i].clock_min);
    REQUIRE(back[i].bg_true == tr[i].bg_true);
    REQUIRE(back[i].bg_obs == tr[i].bg_obs);
    REQUIRE(back[i].iob == tr[i].iob);
    REQUIRE(back[i].cob == tr[i].cob);
    REQUIRE(back[i].state == tr[i].state);
    REQUIRE(back[i].action == tr[i].action);
    REQUIRE(back[i].proposed_u == tr[i].proposed_u);
    REQUIRE(back[i].decision == tr[i].decision);
    REQUIRE(back[i].final_u == tr[i].final_u);
    REQUIRE(back[i].delivered_u == tr[i].delivered_u);
    REQUIRE(back[i].forecast_evaluated == tr[i].forecast_evaluated);
    if (tr[i].forecast_evaluated) {
      REQUIRE(back[i].w_lcb == tr[i].w_lcb);
      REQUIRE(back[i].s_lcb == tr[i].s_lcb);
    }
    REQUIRE(back[i].has_reward == tr[i].has_reward);
    if (tr[i].has_reward) REQUIRE(back[i].reward == tr[i].reward);
    REQUIRE(back[i].note == tr[i].note);
  }

  // no calibration armed: the q column is blank
  write_trace_csv(path, tr, std::nan(""));
  const csvio::Table raw2 = csvio::read_csv(path);
  for (const auto& row : raw2.rows) REQUIRE(row[14].empty());
  std::remove(path.c_str());
}

TEST_CASE("read_trace_csv rejects a file missing columns") {
  const std::string path = tmp_path("tsode_trace_bad.csv");
  std::ofstream out(path);
  out << "step,clock_min\n0,0\n";
  out.close();
  REQUIRE_THROWS_AS(read_trace_csv(path), ConfigFault);
  std::remove(path.c_str());
}

TEST_CASE("mealbolus episode doses exactly at meal announcements") {
  EpisodeConfig cfg = base_config(ControllerKind::kMealBolus, 11);
  EpisodeRunner runner(cfg);
  const auto tr = runner.run(2, Mode::kEval);
  REQUIRE(tr.size() == 960);
  const auto& grid = cfg.grid;
  for (const auto& r : tr) {
    REQUIRE(r.decision == "direct");
    REQUIRE(r.state == -1);
    REQUIRE(r.action == -1);
    REQUIRE(r.delivered_u == r.proposed_u);
    const double tod = std::fmod(r.clock_min, 1440.0);
    // announcements land one step before the impulse; icr 20 covers
    // 50/70/15/60 g with 2.5/3.5/0.75/3.0 U before grid projection
    if (tod == 477.0)
      REQUIRE(r.delivered_u == grid.doses[12]);  // 2.5 -> midpoint, down to 2.4
    else if (tod == 747.0)
      REQUIRE(r.delivered_u == grid.doses[15]);  // 3.5 -> grid top
    else if (tod == 957.0)
      REQUIRE(r.delivered_u == grid.doses[4]);  // 0.75 -> 0.8
    else if (tod == 1137.0)
      REQUIRE(r.delivered_u == grid.doses[15]);
    else
      REQUIRE(r.delivered_u == 0.0);
    if (tod == 480.0) {
      REQUIRE(r.cob == doctest::Approx(50.0 * (1.0 - 3.0 / 180.0)));
      REQUIRE(r.iob == doctest::Approx(grid.doses[12] * (1.0 - 3.0 / 240.0)));
    }
  }
}

TEST_CASE("episode iob and cob columns match the public decay functions") {
  EpisodeConfig cfg = base_config(ControllerKind::kPid, 3);
  EpisodeRunner runner(cfg);
  const auto tr = runner.run(2, Mode::kEval);
  for (std::size_t i = 0; i < tr.size(); ++i) {
    double iob = 0.0;
    for (std::size_t j = 0; j < i; ++j) {
      if (tr[j].delivered_u <= 0.0) continue;
      const double age = tr[i].clock_min - tr[j].clock_min;
      if (age < cfg.loop.dia_min) iob += tr[j].delivered_u * (1.0 - age / cfg.loop.dia_min);
    }
    REQUIRE(tr[i].iob == doctest::Approx(iob).epsilon(1e-12));
    double cob = 0.0;
    for (const auto& m : cfg.meals)
      for (int day = 0; day < 2; ++day) {
        const double t = day * 1440.0 + m.time_of_day - cfg.loop.dt;
        const double age = tr[i].clock_min - t;
        if (age > 0.0 && age < cfg.loop.carb_duration_min)
          cob += m.carbs * (1.0 - age / cfg.loop.carb_duration_min);
      }
    REQUIRE(tr[i].cob == doctest::Approx(cob).epsilon(1e-12));
  }
}

TEST_CASE("pid episode respects actuation protocol") {
  EpisodeConfig cfg = base_config(ControllerKind::kPid, 19);
  EpisodeRunner runner(cfg);
  const auto tr = runner.run(2, Mode::kEval);
  const auto& grid = cfg.grid;
  double last_bolus = -1e18;
  int n_doses = 0, n_refractory = 0;
  for (const auto& r : tr) {
    REQUIRE(r.state == -1);
    REQUIRE(r.delivered_u == grid.doses[static_cast<size_t>(grid.nearest_index(r.delivered_u))]);
    if (r.note == "refractory") {
      REQUIRE(r.decision == "none");
      REQUIRE(r.proposed_u > 0.0);
      REQUIRE(r.delivered_u == 0.0);
      ++n_refractory;
    } else {
      REQUIRE(r.decision == "direct");
      REQUIRE(r.delivered_u == r.proposed_u);
    }
    if (r.delivered_u > 0.0) {
      REQUIRE(r.clock_min - last_bolus >= cfg.loop.refractory_min);
      last_bolus = r.clock_min;
      ++n_doses;
    }
  }
  // the under-replaced basal leaves room: pid has to dose, and often enough
  // to trip the refractory window
  REQUIRE(n_doses > 20);
  REQUIRE(n_refractory > 0);
}

TEST_CASE("tsode episode: sizing, continuation, cold start") {
  EpisodeConfig cfg = base_config(ControllerKind::kTsode, 5);
  EpisodeRunner runner(cfg);
  const auto warm = runner.run(2, Mode::kWarmup);
  const auto ev = runner.run(1, Mode::kEval);
  REQUIRE(warm.size() == 960);
  REQUIRE(ev.size() == 480);
  REQUIRE(runner.trace().size() == 1440);
  REQUIRE(ev.front().step == 960);
  REQUIRE(ev.front().clock_min == 960 * 3.0);
  for (std::size_t i = 0; i < 9; ++i) {
    REQUIRE(warm[i].note == "cold_start");
    REQUIRE(warm[i].state == -1);
    REQUIRE(warm[i].decision == "none");
    REQUIRE(warm[i].delivered_u == 0.0);
  }
  REQUIRE(warm[9].state >= 0);
  REQUIRE_THROWS_AS(runner.run(0, Mode::kEval), ConfigFault);
}

TEST_CASE("tsode states and executed actions reconstruct from the trace") {
  EpisodeConfig cfg = base_config(ControllerKind::kTsode, 5);
  EpisodeRunner runner(cfg);
  runner.run(2, Mode::kWarmup);
  runner.run(1, Mode::kEval);
  const auto& tr = runner.trace();
  const auto& grid = cfg.grid;
  for (std::size_t i = 9; i < tr.size(); ++i) {
    const auto& r = tr[i];
    const double trend = (tr[i].bg_obs - tr[i - 2].bg_obs) / (2.0 * cfg.loop.dt);
    REQUIRE(r.state == tspolicy::discretize(r.bg_obs, trend, cfg.bins));
    REQUIRE_FALSE(r.forecast_evaluated);  // nothing armed
    if (r.note == "refractory") {
      REQUIRE(r.action == 0);
      REQUIRE(r.delivered_u == 0.0);
      REQUIRE(r.decision == "none");
    } else {
      // credit goes to what was executed, not what the policy asked for
      REQUIRE(r.action == std::max(0, grid.floor_index(r.final_u)));
      REQUIRE(r.delivered_u == r.final_u);
      REQUIRE((r.decision == "accept" || r.decision == "guardrail_blocked" ||
               r.decision == "guardrail_capped" || r.decision == "bypassed"));
    }
  }
}

TEST_CASE("tsode rewards mature onto the executed action") {
  EpisodeConfig cfg = base_config(ControllerKind::kTsode, 5);
  EpisodeRunner runner(cfg);
  runner.run(2, Mode::kWarmup);
  runner.run(1, Mode::kEval);
  const auto& tr = runner.trace();
  const int k = cfg.loop.reward_horizon;

  std::vector<double> bg;
  bg.reserve(tr.size());
  for (const auto& r : tr) bg.push_back(r.bg_obs);

  std::map<std::pair<int, int>, std::vector<double>> credited;
  for (std::size_t i = 0; i < tr.size(); ++i) {
    const auto& r = tr[i];
    if (i < 9) {
      REQUIRE_FALSE(r.has_reward);  // cold rows never enter the table
    } else if (i < 960) {
      REQUIRE(r.has_reward);  // eval steps matured the warmup tail
      const std::span<const double> wnd(bg.data() + i + 1, static_cast<std::size_t>(k));
      REQUIRE(r.reward == tspolicy::shaped_reward(wnd));
      credited[{r.state, r.action}].push_back(r.reward);
    } else {
      REQUIRE_FALSE(r.has_reward);  // greedy phase does not learn
    }
  }

  const auto& table = runner.policy_table();
  long total = 0;
  for (int s = 0; s < table.n_states(); ++s)
    for (int a = 0; a < table.n_actions(); ++a) total += table.count(s, a);
  REQUIRE(total == 960 - 9);
  for (const auto& [sa, rewards] : credited) {
    REQUIRE(table.count(sa.first, sa.second) == static_cast<long>(rewards.size()));
    double mean = 0.0;
    for (double x : rewards) mean += x;
    mean /= static_cast<double>(rewards.size());
    REQUIRE(table.mean(sa.first, sa.second) == doctest::Approx(mean).epsilon(1e-9));
  }
}

TEST_CASE("guardrails hold over the whole tsode trace") {
  EpisodeConfig cfg = base_config(ControllerKind::kTsode, 23);
  EpisodeRunner runner(cfg);
  runner.run(2, Mode::kWarmup);
  runner.run(1, Mode::kEval);
  double last_bolus = -1e18;
  for (const auto& r : runner.trace()) {
    REQUIRE(r.final_u <= r.proposed_u + 1e-12);
    REQUIRE(r.final_u >= 0.0);
    if (r.bg_obs < cfg.safety.guard_bg_min) REQUIRE(r.delivered_u == 0.0);
    REQUIRE(r.delivered_u + r.iob <= cfg.safety.iob_cap + 1e-9);
    const double tod = std::fmod(r.clock_min, 1440.0);
    if (tod >= cfg.safety.night_start && tod < cfg.safety.night_end)
      REQUIRE(r.delivered_u <= cfg.safety.night_cap);
    if (r.delivered_u > 0.0) {
      REQUIRE(r.clock_min - last_bolus >= cfg.loop.refractory_min);
      last_bolus = r.clock_min;
    }
  }
}

TEST_CASE("episodes are deterministic in the seed") {
  EpisodeConfig cfg = base_config(ControllerKind::kTsode, 31);
  EpisodeRunner a(cfg);
  EpisodeRunner b(cfg);
  a.run(1, Mode::kWarmup);
  b.run(1, Mode::kWarmup);
  const auto& ta = a.trace();
  const auto& tb = b.trace();
  REQUIRE(ta.size() == tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) {
    REQUIRE(ta[i].bg_true == tb[i].bg_true);
    REQUIRE(ta[i].bg_obs == tb[i].bg_obs);
    REQUIRE(ta[i].state == tb[i].state);
    REQUIRE(ta[i].action == tb[i].action);
    REQUIRE(ta[i].decision == tb[i].decision);
    REQUIRE(ta[i].delivered_u == tb[i].delivered_u);
  }

  cfg.seed = 32;
  EpisodeRunner c(cfg);
  c.run(1, Mode::kWarmup);
  bool any_diff = false;
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (c.trace()[i].bg_obs != ta[i].bg_obs) any_diff = true;
  REQUIRE(any_diff);
}

TEST_CASE("feature rows and windows align with the trace") {
  EpisodeConfig cfg = base_config(ControllerKind::kTsode, 5);
  EpisodeRunner runner(cfg);
  runner.run(1, Mode::kWarmup);
  const auto& tr = runner.trace();
  const auto& rows = runner.feature_rows();
  REQUIRE(rows.size() == tr.size());
  for (std::size_t i = 0; i < tr.size(); ++i) {
    REQUIRE(rows[i].bg == tr[i].bg_obs);
    REQUIRE(rows[i].iob == tr[i].iob);
    REQUIRE(rows[i].cob == tr[i].cob);
    REQUIRE(rows[i].dose == tr[i].delivered_u);
    REQUIRE(rows[i].lbgi == tspolicy::lbgi_of(tr[i].bg_obs));
    REQUIRE(rows[i].hbgi == tspolicy::hbgi_of(tr[i].bg_obs));
    const double two_pi = 6.283185307179586476925286766559;
    const double tod = std::fmod(tr[i].clock_min, 1440.0);
    REQUIRE(rows[i].sin_tod == doctest::Approx(std::sin(two_pi * tod / 1440.0)));
    REQUIRE(rows[i].cos_tod == doctest::Approx(std::cos(two_pi * tod / 1440.0)));
  }

  const std::size_t idx = 42;
  const auto w = runner.window_ending_at(idx);
  for (int r = 0; r < forecaster::kWindow; ++r) {
    const auto& src = rows[idx + 1 - forecaster::kWindow + static_cast<std::size_t>(r)];
    REQUIRE(w.at(r, 0) == src.bg);
    REQUIRE(w.at(r, 1) == src.iob);
    REQUIRE(w.at(r, 2) == src.cob);
    REQUIRE(w.at(r, 3) == src.sin_tod);
    REQUIRE(w.at(r, 4) == src.cos_tod);
    REQUIRE(w.at(r, 5) == src.lbgi);
    REQUIRE(w.at(r, 6) == src.hbgi);
  }
  REQUIRE_THROWS_AS(runner.window_ending_at(8), UsageFault);
  REQUIRE_THROWS_AS(runner.window_ending_at(tr.size()), UsageFault);
}

TEST_CASE("arm_forecast wants the model and calibration together") {
  EpisodeConfig cfg = base_config(ControllerKind::kTsode, 5);
  EpisodeRunner runner(cfg);
  forecaster::ForecasterModel model;
  model.init(1);
  safegate::ConformalCalibration cal;
  cal.alpha = 0.1;
  cal.q_alpha = 10.0;
  cal.n = 100;
  REQUIRE_THROWS_AS(runner.arm_forecast(&model, nullptr), UsageFault);
  REQUIRE_THROWS_AS(runner.arm_forecast(nullptr, &cal), UsageFault);
  runner.arm_forecast(&model, &cal);
  runner.arm_forecast(nullptr, nullptr);  // disarming is fine
}

TEST_CASE("runner constructor validates the bundle") {
  EpisodeConfig cfg = base_config(ControllerKind::kTsode, 5);
  cfg.loop.dt = 0.0;
  REQUIRE_THROWS_AS(EpisodeRunner{cfg}, ConfigFault);
  cfg = base_config(ControllerKind::kTsode, 5);
  cfg.patient.params.icr = -1.0;
  REQUIRE_THROWS_AS(EpisodeRunner{cfg}, ConfigFault);
  cfg = base_config(ControllerKind::kTsode, 5);
  cfg.safety.alpha = 1.5;
  REQUIRE_THROWS_AS(EpisodeRunner{cfg}, ConfigFault);
}
