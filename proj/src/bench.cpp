#include "tsode/bench.hpp"

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <json.hpp>
#include <utility>

#include "tsode/csvio.hpp"
#include "tsode/faults.hpp"
#include "tsode/forecaster.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace tsode::bench {
namespace {

std::string sanitize(std::string s) {
  for (char& c : s)
    if (c == '#') c = '-';
  return s;
}

std::string cell_stub(const CellSpec& spec) {
  return sanitize(spec.patient.name) + "_" + spec.controller + "_seed" +
         std::to_string(spec.seed);
}

std::string traces_dir(const ExperimentConfig& cfg) {
  return (fs::path(cfg.out_dir) / "traces").string();
}
std::string policies_dir(const ExperimentConfig& cfg) {
  return (fs::path(cfg.out_dir) / "policies").string();
}
std::string models_dir(const ExperimentConfig& cfg) {
  return (fs::path(cfg.out_dir) / "models").string();
}

void make_out_dirs(const ExperimentConfig& cfg) {
  fs::create_directories(traces_dir(cfg));
  fs::create_directories(policies_dir(cfg));
  fs::create_directories(models_dir(cfg));
}

std::string config_hash_hex(const ExperimentConfig& cfg) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(cfg.to_json())));
  return buf;
}

std::vector<vpatient::MealEvent> meal_events(const ExperimentConfig& cfg) {
  std::vector<vpatient::MealEvent> out;
  out.reserve(cfg.meals.size());
  for (const auto& m : cfg.meals) out.push_back({m.time_min, m.grams});
  return out;
}

void write_sidecar(const std::string& trace_path, const ExperimentConfig& cfg,
                   const CellSpec& spec, const char* phase, int days, long steps,
                   double q_alpha) {
  json j{{"patient", spec.patient.name}, {"controller", spec.controller},
         {"seed", spec.seed},            {"phase", phase},
         {"days", days},                 {"steps", steps},
         {"dt_min", cfg.loop.dt},        {"config_hash", config_hash_hex(cfg)}};
  if (std::isfinite(q_alpha)) j["q_alpha"] = q_alpha;
  csvio::write_text_file(trace_path + ".meta.json", j.dump(2) + "\n");
}

const std::vector<std::string> kMetricsHeader = {
    "patient",      "controller",    "seed",    "tir_pct", "below_70_pct",
    "below_54_pct", "above_180_pct", "mean_bg", "eval_days"};

std::vector<std::string> metrics_csv_row(const MetricsRow& r) {
  return {r.patient,
          r.controller,
          std::to_string(r.seed),
          csvio::fmt(r.tir_pct),
          csvio::fmt(r.below_70_pct),
          csvio::fmt(r.below_54_pct),
          csvio::fmt(r.above_180_pct),
          csvio::fmt(r.mean_bg),
          std::to_string(r.eval_days)};
}

void write_metrics_file(const std::string& path, std::span<const MetricsRow> rows) {
  csvio::Table t;
  t.header = kMetricsHeader;
  for (const auto& r : rows) t.rows.push_back(metrics_csv_row(r));
  csvio::write_csv(path, t);
}

// Mean over rows; patient/controller labels supplied by the caller.
MetricsRow mean_of(std::span<const MetricsRow> rows, const std::string& patient,
                   const std::string& controller) {
  MetricsRow m;
  m.patient = patient;
  m.controller = controller;
  m.eval_days = rows.empty() ? 0 : rows.front().eval_days;
  for (const auto& r : rows) {
    m.tir_pct += r.tir_pct;
    m.below_70_pct += r.below_70_pct;
    m.below_54_pct += r.below_54_pct;
    m.above_180_pct += r.above_180_pct;
    m.mean_bg += r.mean_bg;
  }
  const double n = static_cast<double>(rows.size());
  if (n > 0) {
    m.tir_pct /= n;
    m.below_70_pct /= n;
    m.below_54_pct /= n;
    m.above_180_pct /= n;
    m.mean_bg /= n;
  }
  return m;
}

void progress_line(const CellResult& r, std::size_t done, std::size_t total) {
  if (r.failed) {
    std::fprintf(stderr, "[%zu/%zu] %s %s seed %llu FAILED: %s\n", done, total,
                 r.spec.patient.name.c_str(), r.spec.controller.c_str(),
                 static_cast<unsigned long long>(r.spec.seed), r.error.c_str());
  } else {
    std::fprintf(stderr, "[%zu/%zu] %s %s seed %llu tir=%.1f%% below70=%.1f%%\n", done, total,
                 r.spec.patient.name.c_str(), r.spec.controller.c_str(),
                 static_cast<unsigned long long>(r.spec.seed), r.row.tir_pct,
                 r.row.below_70_pct);
  }
}

const vpatient::NamedPatient& find_patient(const std::vector<vpatient::NamedPatient>& cohort,
                                           const std::string& name) {
  for (const auto& p : cohort)
    if (p.name == name) return p;
  throw ConfigFault("patient not in cohort: " + name);
}

looprt::EpisodeConfig episode_config_impl(const ExperimentConfig& cfg, const CellSpec& spec) {
  looprt::EpisodeConfig ecfg;
  ecfg.patient = spec.patient;
  ecfg.meals = meal_events(cfg);
  ecfg.loop = cfg.loop;
  ecfg.safety = cfg.safety;
  ecfg.kind = looprt::controller_of(spec.controller);
  ecfg.seed = cell_seed(spec.seed, spec.patient.name, spec.controller);
  ecfg.pid = cfg.pid;
  ecfg.tsmpc = baselines::TsmpcConfig::population();
  ecfg.tsmpc.dose_penalty = cfg.tsmpc_dose_penalty;
  ecfg.tsmpc.dt = cfg.loop.dt;
  ecfg.tsmpc.dia_min = cfg.loop.dia_min;
  ecfg.tsmpc.carb_duration_min = cfg.loop.carb_duration_min;
  return ecfg;
}

struct SplitRecords {
  std::vector<forecaster::TrainRecord> train;
  std::vector<forecaster::TrainRecord> cal;
  std::vector<forecaster::TrainRecord> val;
};

// Chronological 70/15/15 split of one warm-up log; windows never straddle a
// split boundary because each segment is extracted on its own.
SplitRecords split_warmup(std::span<const forecaster::StepFeatures> feats, int train_stride,
                          const std::string& source_id) {
  const std::size_t n = feats.size();
  const std::size_t train_end = n * 7 / 10;
  const std::size_t cal_end = n * 85 / 100;
  SplitRecords out;
  out.train = forecaster::extract_records(feats.subspan(0, train_end), train_stride, source_id);
  out.cal = forecaster::extract_records(feats.subspan(train_end, cal_end - train_end), 1, source_id);
  out.val = forecaster::extract_records(feats.subspan(cal_end), 1, source_id);
  return out;
}

forecaster::TrainOptions train_options(const ExperimentConfig& cfg, std::uint64_t episode_seed) {
  forecaster::TrainOptions topt;
  topt.epochs = cfg.forecaster_hp.epochs;
  topt.lr = cfg.forecaster_hp.lr;
  topt.batch = cfg.forecaster_hp.batch;
  topt.seed = Rng(episode_seed).fork("train").seed();
  topt.threads = 1;  // cells are the parallel unit of the sweep
  return topt;
}

void run_cell_impl(const ExperimentConfig& cfg, const CellSpec& spec, CellResult& res) {
  make_out_dirs(cfg);
  looprt::EpisodeRunner runner(make_episode_config(cfg, spec));
  const auto warmup = runner.run(cfg.days_warmup, looprt::Mode::kWarmup);

  const std::string stub = cell_stub(spec);
  forecaster::ForecasterModel model;
  safegate::ConformalCalibration cal;
  double q_for_trace = std::nan("");

  if (runner.config().kind == looprt::ControllerKind::kTsode) {
    auto split = split_warmup(runner.feature_rows(), cfg.forecaster_hp.train_stride,
                              spec.patient.name);
    if (split.train.empty() || split.cal.empty())
      throw ConfigFault("warm-up too short to train the forecaster");

    const std::uint64_t eseed = runner.config().seed;
    model = forecaster::ForecasterModel::init(Rng(eseed).fork("model-init").seed());
    const auto tr = forecaster::train(model, split.train, train_options(cfg, eseed));
    res.train_loss_first = tr.epoch_loss.front();
    res.train_loss_last = tr.epoch_loss.back();

    cal = safegate::calibrate(model, split.cal, cfg.safety.alpha, cfg.safety.per_step_quantiles);
    res.q_alpha = cal.q_alpha;

    long covered = 0, total = 0;
    for (const auto& r : split.val) {
      const auto d = model.predict(r.window, r.dose);
      for (int k = 0; k < forecaster::kHorizon; ++k) {
        if (std::abs(r.target[k] - d.mu[k]) <= cal.q_alpha) ++covered;
        ++total;
      }
    }
    res.n_val_residuals = total;
    res.val_coverage = total > 0 ? static_cast<double>(covered) / static_cast<double>(total) : 0.0;

    model.save(models_dir(cfg) + "/" + stub + ".ckpt");
    csvio::write_text_file(models_dir(cfg) + "/" + stub + ".cal.json", cal.to_json() + "\n");
    runner.arm_forecast(&model, &cal);
    q_for_trace = cal.q_alpha;
  }

  const auto eval = runner.run(cfg.days_eval, looprt::Mode::kEval);
  res.row = compute_metrics(eval, spec.patient.name, spec.controller, spec.seed, cfg.days_eval);

  const std::string warm_path = traces_dir(cfg) + "/" + stub + "_warmup.csv";
  const std::string eval_path = traces_dir(cfg) + "/" + stub + "_eval.csv";
  looprt::write_trace_csv(warm_path, warmup, std::nan(""));
  looprt::write_trace_csv(eval_path, eval, q_for_trace);
  write_sidecar(warm_path, cfg, spec, "warmup", cfg.days_warmup,
                static_cast<long>(warmup.size()), std::nan(""));
  write_sidecar(eval_path, cfg, spec, "eval", cfg.days_eval, static_cast<long>(eval.size()),
                q_for_trace);

  const auto kind = runner.config().kind;
  if (kind == looprt::ControllerKind::kTsode || kind == looprt::ControllerKind::kTsmpc)
    runner.policy_table().to_csv(policies_dir(cfg) + "/" + stub + "_policy.csv");
}

json cells_manifest(std::span<const CellResult> results) {
  json arr = json::array();
  for (const auto& r : results) {
    json c{{"patient", r.spec.patient.name},
           {"controller", r.spec.controller},
           {"seed", r.spec.seed},
           {"status", r.failed ? "failed" : "ok"}};
    if (r.failed) c["error"] = r.error;
    arr.push_back(std::move(c));
  }
  return arr;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (days_warmup <= 0 || days_eval <= 0)
    throw ConfigFault("days_warmup and days_eval must be positive");
  if (seeds.empty()) throw ConfigFault("experiment needs at least one seed");
  if (controllers.empty()) throw ConfigFault("experiment needs at least one controller");
  for (const auto& c : controllers) looprt::controller_of(c);
  if (cohort_file.empty() && cohort_size <= 0)
    throw ConfigFault("cohort size must be positive when no cohort file is given");
  for (const auto& m : meals)
    if (!(m.time_min >= 0.0 && m.time_min < 1440.0) || !(m.grams >= 0.0))
      throw ConfigFault("meal time must lie in [0, 1440) with nonnegative grams");
  if (forecaster_hp.epochs <= 0 || !(forecaster_hp.lr > 0.0) || forecaster_hp.batch <= 0 ||
      forecaster_hp.train_stride < 1)
    throw ConfigFault("forecaster hyperparameters must be positive");
  if (!(tsmpc_dose_penalty >= 0.0)) throw ConfigFault("tsmpc dose_penalty must be nonnegative");
  if (workers < 0) throw ConfigFault("workers must be nonnegative");
  if (out_dir.empty()) throw ConfigFault("out_dir must be set");
  loop.validate();
  safety.validate();
  pid.validate();
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["cohort"] = {{"size", cohort_size}, {"seed", cohort_seed}, {"file", cohort_file}};
  j["patients"] = patients;
  j["controllers"] = controllers;
  j["seeds"] = seeds;
  j["days_warmup"] = days_warmup;
  j["days_eval"] = days_eval;
  json mj = json::array();
  for (const auto& m : meals) mj.push_back({{"time_min", m.time_min}, {"grams", m.grams}});
  j["meals"] = mj;
  j["loop"] = {{"dt", loop.dt},
               {"dia_min", loop.dia_min},
               {"carb_duration_min", loop.carb_duration_min},
               {"refractory_min", loop.refractory_min},
               {"noise_sd", loop.noise_sd},
               {"reward_horizon", loop.reward_horizon},
               {"prebolus_cap", loop.prebolus_cap}};
  j["safety"] = {{"L", safety.floor_bg},
                 {"gamma", safety.max_descent},
                 {"alpha", safety.alpha},
                 {"decay_lambda", safety.decay_lambda},
                 {"K", safety.horizon},
                 {"dt", safety.dt},
                 {"bypass_bg", safety.bypass_bg},
                 {"bypass_trend", safety.bypass_trend},
                 {"guard_bg_min", safety.guard_bg_min},
                 {"guard_trend_min", safety.guard_trend_min},
                 {"iob_cap", safety.iob_cap},
                 {"night_window", json::array({safety.night_start, safety.night_end})},
                 {"night_cap", safety.night_cap},
                 {"bisection_tol", safety.bisection_tol},
                 {"per_step_quantiles", safety.per_step_quantiles}};
  j["forecaster"] = {{"epochs", forecaster_hp.epochs},
                     {"lr", forecaster_hp.lr},
                     {"batch", forecaster_hp.batch},
                     {"train_stride", forecaster_hp.train_stride}};
  j["pid"] = {{"setpoint", pid.setpoint}, {"kp", pid.kp},
              {"ki", pid.ki},             {"kd", pid.kd},
              {"integral_clamp", pid.integral_clamp}, {"out_max", pid.out_max}};
  j["tsmpc"] = {{"dose_penalty", tsmpc_dose_penalty}};
  j["transfer"] = {{"sources", transfer.sources}, {"target", transfer.target}};
  j["workers"] = workers;
  j["out_dir"] = out_dir;
  return j.dump(2) + "\n";
}

ExperimentConfig ExperimentConfig::from_json(const std::string& text) {
  ExperimentConfig c;
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigFault(std::string("experiment config: ") + e.what());
  }
  try {
    if (j.contains("cohort")) {
      const auto& cj = j.at("cohort");
      c.cohort_size = cj.value("size", c.cohort_size);
      c.cohort_seed = cj.value("seed", c.cohort_seed);
      c.cohort_file = cj.value("file", c.cohort_file);
    }
    c.patients = j.value("patients", c.patients);
    c.controllers = j.value("controllers", c.controllers);
    c.seeds = j.value("seeds", c.seeds);
    c.days_warmup = j.value("days_warmup", c.days_warmup);
    c.days_eval = j.value("days_eval", c.days_eval);
    if (j.contains("meals")) {
      c.meals.clear();
      for (const auto& mj : j.at("meals"))
        c.meals.push_back({mj.at("time_min").get<double>(), mj.at("grams").get<double>()});
    }
    if (j.contains("loop")) {
      const auto& lj = j.at("loop");
      c.loop.dt = lj.value("dt", c.loop.dt);
      c.loop.dia_min = lj.value("dia_min", c.loop.dia_min);
      c.loop.carb_duration_min = lj.value("carb_duration_min", c.loop.carb_duration_min);
      c.loop.refractory_min = lj.value("refractory_min", c.loop.refractory_min);
      c.loop.noise_sd = lj.value("noise_sd", c.loop.noise_sd);
      c.loop.reward_horizon = lj.value("reward_horizon", c.loop.reward_horizon);
      c.loop.prebolus_cap = lj.value("prebolus_cap", c.loop.prebolus_cap);
    }
    if (j.contains("safety")) {
      const auto& sj = j.at("safety");
      c.safety.floor_bg = sj.value("L", c.safety.floor_bg);
      c.safety.max_descent = sj.value("gamma", c.safety.max_descent);
      c.safety.alpha = sj.value("alpha", c.safety.alpha);
      c.safety.decay_lambda = sj.value("decay_lambda", c.safety.decay_lambda);
      c.safety.horizon = sj.value("K", c.safety.horizon);
      c.safety.dt = sj.value("dt", c.safety.dt);
      c.safety.bypass_bg = sj.value("bypass_bg", c.safety.bypass_bg);
      c.safety.bypass_trend = sj.value("bypass_trend", c.safety.bypass_trend);
      c.safety.guard_bg_min = sj.value("guard_bg_min", c.safety.guard_bg_min);
      c.safety.guard_trend_min = sj.value("guard_trend_min", c.safety.guard_trend_min);
      c.safety.iob_cap = sj.value("iob_cap", c.safety.iob_cap);
      if (sj.contains("night_window")) {
        const auto& nw = sj.at("night_window");
        if (!nw.is_array() || nw.size() != 2)
          throw ConfigFault("safety.night_window must be [start_min, end_min)");
        c.safety.night_start = nw[0].get<double>();
        c.safety.night_end = nw[1].get<double>();
      }
      c.safety.night_cap = sj.value("night_cap", c.safety.night_cap);
      c.safety.bisection_tol = sj.value("bisection_tol", c.safety.bisection_tol);
      c.safety.per_step_quantiles = sj.value("per_step_quantiles", c.safety.per_step_quantiles);
    }
    if (j.contains("forecaster")) {
      const auto& fj = j.at("forecaster");
      c.forecaster_hp.epochs = fj.value("epochs", c.forecaster_hp.epochs);
      c.forecaster_hp.lr = fj.value("lr", c.forecaster_hp.lr);
      c.forecaster_hp.batch = fj.value("batch", c.forecaster_hp.batch);
      c.forecaster_hp.train_stride = fj.value("train_stride", c.forecaster_hp.train_stride);
    }
    if (j.contains("pid")) {
      const auto& pj = j.at("pid");
      c.pid.setpoint = pj.value("setpoint", c.pid.setpoint);
      c.pid.kp = pj.value("kp", c.pid.kp);
      c.pid.ki = pj.value("ki", c.pid.ki);
      c.pid.kd = pj.value("kd", c.pid.kd);
      c.pid.integral_clamp = pj.value("integral_clamp", c.pid.integral_clamp);
      c.pid.out_max = pj.value("out_max", c.pid.out_max);
    }
    if (j.contains("tsmpc"))
      c.tsmpc_dose_penalty = j.at("tsmpc").value("dose_penalty", c.tsmpc_dose_penalty);
    if (j.contains("transfer")) {
      const auto& tj = j.at("transfer");
      c.transfer.sources = tj.value("sources", c.transfer.sources);
      c.transfer.target = tj.value("target", c.transfer.target);
    }
    c.workers = j.value("workers", c.workers);
    c.out_dir = j.value("out_dir", c.out_dir);
  } catch (const json::exception& e) {
    throw ConfigFault(std::string("experiment config: ") + e.what());
  }
  return c;
}

ExperimentConfig ExperimentConfig::from_json_file(const std::string& path) {
  return from_json(csvio::read_text_file(path));
}

MetricsRow compute_metrics(std::span<const looprt::StepRecord> eval_steps,
                           const std::string& patient, const std::string& controller,
                           std::uint64_t seed, int eval_days) {
  if (eval_steps.empty()) throw ConfigFault("metrics need a non-empty eval trace");
  long tir = 0, b70 = 0, b54 = 0, a180 = 0;
  double sum = 0.0;
  for (const auto& r : eval_steps) {
    const double g = r.bg_true;
    sum += g;
    if (g < 70.0) ++b70;
    if (g < 54.0) ++b54;
    if (g > 180.0) ++a180;
    if (g >= 70.0 && g <= 180.0) ++tir;
  }
  const double n = static_cast<double>(eval_steps.size());
  MetricsRow row;
  row.patient = patient;
  row.controller = controller;
  row.seed = seed;
  row.tir_pct = 100.0 * static_cast<double>(tir) / n;
  row.below_70_pct = 100.0 * static_cast<double>(b70) / n;
  row.below_54_pct = 100.0 * static_cast<double>(b54) / n;
  row.above_180_pct = 100.0 * static_cast<double>(a180) / n;
  row.mean_bg = sum / n;
  row.eval_days = eval_days;
  return row;
}

std::uint64_t cell_seed(std::uint64_t seed, const std::string& patient,
                        const std::string& controller) {
  return Rng(seed).fork(patient).fork(controller).seed();
}

looprt::EpisodeConfig make_episode_config(const ExperimentConfig& cfg, const CellSpec& spec) {
  return episode_config_impl(cfg, spec);
}

CellResult run_cell(const ExperimentConfig& cfg, const CellSpec& spec) {
  CellResult res;
  res.spec = spec;
  try {
    run_cell_impl(cfg, spec, res);
  } catch (const std::exception& e) {
    res.failed = true;
    res.error = e.what();
  }
  return res;
}

std::vector<CellResult> run_cells_serial(const ExperimentConfig& cfg,
                                         std::span<const CellSpec> cells) {
  std::vector<CellResult> out;
  out.reserve(cells.size());
  for (const auto& c : cells) {
    out.push_back(run_cell(cfg, c));
    progress_line(out.back(), out.size(), cells.size());
  }
  return out;
}

std::vector<CellResult> run_cells_parallel(const ExperimentConfig& cfg,
                                           std::span<const CellSpec> cells, int workers) {
  const int n = static_cast<int>(cells.size());
  std::vector<CellResult> out(static_cast<std::size_t>(n));
  const int w = workers > 0 ? workers : omp_get_max_threads();
  std::size_t done = 0;
#pragma omp parallel for schedule(dynamic) num_threads(w)
  for (int i = 0; i < n; ++i) {
    CellResult r = run_cell(cfg, cells[static_cast<std::size_t>(i)]);
#pragma omp critical
    {
      ++done;
      progress_line(r, done, cells.size());
      out[static_cast<std::size_t>(i)] = std::move(r);
    }
  }
  return out;
}

std::vector<vpatient::NamedPatient> load_cohort(const ExperimentConfig& cfg) {
  if (!cfg.cohort_file.empty()) return vpatient::cohort_from_json_file(cfg.cohort_file);
  return vpatient::make_cohort(cfg.cohort_size, cfg.cohort_seed);
}

SweepResult run_experiment(const ExperimentConfig& cfg) {
  cfg.validate();
  make_out_dirs(cfg);

  SweepResult sw;
  sw.cohort = load_cohort(cfg);
  vpatient::cohort_to_json_file(sw.cohort, (fs::path(cfg.out_dir) / "cohort.json").string());

  std::vector<vpatient::NamedPatient> chosen;
  if (cfg.patients.empty()) {
    chosen = sw.cohort;
  } else {
    for (const auto& name : cfg.patients) chosen.push_back(find_patient(sw.cohort, name));
  }

  std::vector<CellSpec> cells;
  cells.reserve(chosen.size() * cfg.controllers.size() * cfg.seeds.size());
  for (const auto& p : chosen)
    for (const auto& c : cfg.controllers)
      for (const auto s : cfg.seeds) cells.push_back({p, c, s});

  sw.cells = cfg.workers == 1 ? run_cells_serial(cfg, cells)
                              : run_cells_parallel(cfg, cells, cfg.workers);

  std::vector<MetricsRow> rows;
  for (const auto& r : sw.cells)
    if (!r.failed) rows.push_back(r.row);
  sw.metrics_path = (fs::path(cfg.out_dir) / "metrics.csv").string();
  write_metrics_file(sw.metrics_path, rows);

  // Summary: per (patient, controller) mean over seeds, then cohort rows as
  // the arithmetic mean of the patient rows.
  std::vector<MetricsRow> patient_rows;
  for (const auto& p : chosen) {
    for (const auto& c : cfg.controllers) {
      std::vector<MetricsRow> group;
      for (const auto& r : rows)
        if (r.patient == p.name && r.controller == c) group.push_back(r);
      if (!group.empty()) patient_rows.push_back(mean_of(group, p.name, c));
    }
  }
  std::vector<MetricsRow> summary = patient_rows;
  for (const auto& c : cfg.controllers) {
    std::vector<MetricsRow> group;
    for (const auto& r : patient_rows)
      if (r.controller == c) group.push_back(r);
    if (!group.empty()) summary.push_back(mean_of(group, "cohort", c));
  }
  sw.summary_path = (fs::path(cfg.out_dir) / "summary.csv").string();
  {
    csvio::Table t;
    t.header = {"patient", "controller", "tir_pct", "below_70_pct", "below_54_pct",
                "above_180_pct", "mean_bg", "n"};
    for (const auto& r : summary) {
      long n_avg = 0;
      if (r.patient == "cohort") {
        for (const auto& pr : patient_rows) n_avg += pr.controller == r.controller ? 1 : 0;
      } else {
        for (const auto& rr : rows)
          n_avg += (rr.patient == r.patient && rr.controller == r.controller) ? 1 : 0;
      }
      t.rows.push_back({r.patient, r.controller, csvio::fmt(r.tir_pct),
                        csvio::fmt(r.below_70_pct), csvio::fmt(r.below_54_pct),
                        csvio::fmt(r.above_180_pct), csvio::fmt(r.mean_bg),
                        std::to_string(n_avg)});
    }
    csvio::write_csv(sw.summary_path, t);
  }

  json manifest;
  manifest["config"] = json::parse(cfg.to_json());
  manifest["config_hash"] = config_hash_hex(cfg);
  manifest["versions"] = {{"tsode", "0.1.0"}, {"trace_format", 1}, {"checkpoint_format", 1}};
  manifest["seeds"] = cfg.seeds;
  json names = json::array();
  for (const auto& p : sw.cohort) names.push_back(p.name);
  manifest["cohort"] = names;
  manifest["cells"] = cells_manifest(sw.cells);
  manifest["outputs"] = {{"metrics", "metrics.csv"},
                         {"summary", "summary.csv"},
                         {"cohort", "cohort.json"},
                         {"traces", "traces/"}};
  sw.manifest_path = (fs::path(cfg.out_dir) / "manifest.json").string();
  csvio::write_text_file(sw.manifest_path, manifest.dump(2) + "\n");
  return sw;
}

TransferResult transfer_scenario(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.transfer.sources.empty())
    throw ConfigFault("transfer needs at least one source patient");
  make_out_dirs(cfg);

  const auto cohort = load_cohort(cfg);
  const auto& target = find_patient(cohort, cfg.transfer.target);
  const std::uint64_t seed0 = cfg.seeds.front();

  std::vector<forecaster::TrainRecord> train_recs, cal_recs;
  std::vector<tspolicy::PolicyTable> tables;
  for (const auto& src_name : cfg.transfer.sources) {
    const auto& src = find_patient(cohort, src_name);
    looprt::EpisodeRunner runner(make_episode_config(cfg, {src, "tsode", seed0}));
    runner.run(cfg.days_warmup, looprt::Mode::kWarmup);
    auto split = split_warmup(runner.feature_rows(), cfg.forecaster_hp.train_stride, src.name);
    train_recs.insert(train_recs.end(), split.train.begin(), split.train.end());
    cal_recs.insert(cal_recs.end(), split.cal.begin(), split.cal.end());
    tables.push_back(runner.policy_table());
  }
  if (train_recs.empty() || cal_recs.empty())
    throw ConfigFault("transfer warm-up produced no training records");

  // Provenance check: every pooled record must come from a configured source.
  for (const auto* recs : {&train_recs, &cal_recs}) {
    for (const auto& r : *recs) {
      if (std::find(cfg.transfer.sources.begin(), cfg.transfer.sources.end(), r.source_id) ==
          cfg.transfer.sources.end())
        throw ConfigFault("transfer record from unexpected source: " + r.source_id);
    }
  }

  std::vector<const tspolicy::PolicyTable*> ptrs;
  for (const auto& t : tables) ptrs.push_back(&t);
  const auto merged = tspolicy::PolicyTable::merge(ptrs);

  const std::uint64_t tseed = cell_seed(seed0, target.name, "tsode_transfer");
  auto model = forecaster::ForecasterModel::init(Rng(tseed).fork("model-init").seed());
  forecaster::train(model, train_recs, train_options(cfg, tseed));
  const auto cal =
      safegate::calibrate(model, cal_recs, cfg.safety.alpha, cfg.safety.per_step_quantiles);

  const CellSpec tspec{target, "tsode_transfer", seed0};
  looprt::EpisodeConfig tcfg = make_episode_config(cfg, {target, "tsode", seed0});
  tcfg.seed = tseed;
  looprt::EpisodeRunner trunner(std::move(tcfg));
  trunner.policy_table() = merged;
  trunner.arm_forecast(&model, &cal);
  const auto burnin = trunner.run(cfg.days_warmup, looprt::Mode::kEval);
  const auto eval = trunner.run(cfg.days_eval, looprt::Mode::kEval);

  TransferResult out;
  out.transferred = compute_metrics(eval, target.name, "tsode_transfer", seed0, cfg.days_eval);

  const std::string stub = cell_stub(tspec);
  const std::string burn_path = traces_dir(cfg) + "/" + stub + "_burnin.csv";
  const std::string eval_path = traces_dir(cfg) + "/" + stub + "_eval.csv";
  looprt::write_trace_csv(burn_path, burnin, cal.q_alpha);
  looprt::write_trace_csv(eval_path, eval, cal.q_alpha);
  write_sidecar(burn_path, cfg, tspec, "burnin", cfg.days_warmup,
                static_cast<long>(burnin.size()), cal.q_alpha);
  write_sidecar(eval_path, cfg, tspec, "eval", cfg.days_eval, static_cast<long>(eval.size()),
                cal.q_alpha);
  model.save(models_dir(cfg) + "/" + stub + ".ckpt");
  csvio::write_text_file(models_dir(cfg) + "/" + stub + ".cal.json", cal.to_json() + "\n");

  const CellResult own = run_cell(cfg, {target, "tsode", seed0});
  if (own.failed)
    throw NumericalFault("own-trained comparison cell failed: " + own.error);
  out.own = own.row;
  out.own.controller = "tsode_own";

  out.metrics_path = (fs::path(cfg.out_dir) / "transfer_metrics.csv").string();
  const MetricsRow rows[2] = {out.transferred, out.own};
  write_metrics_file(out.metrics_path, rows);
  return out;
}

void report(const std::string& dir, const std::string& out_csv) {
  std::vector<MetricsRow> rows;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string p = entry.path().string();
    if (!p.ends_with(".meta.json")) continue;
    json j;
    try {
      j = json::parse(csvio::read_text_file(p));
    } catch (const json::exception& e) {
      throw ConfigFault("trace sidecar " + p + ": " + e.what());
    }
    if (j.value("phase", std::string()) != "eval") continue;
    const std::string trace_path = p.substr(0, p.size() - std::string(".meta.json").size());
    const auto trace = looprt::read_trace_csv(trace_path);
    rows.push_back(compute_metrics(trace, j.at("patient").get<std::string>(),
                                   j.at("controller").get<std::string>(),
                                   j.at("seed").get<std::uint64_t>(), j.value("days", 0)));
  }
  if (rows.empty()) throw ConfigFault("no eval traces under " + dir);
  std::sort(rows.begin(), rows.end(), [](const MetricsRow& a, const MetricsRow& b) {
    if (a.patient != b.patient) return a.patient < b.patient;
    if (a.controller != b.controller) return a.controller < b.controller;
    return a.seed < b.seed;
  });
  write_metrics_file(out_csv, rows);
}

}  // namespace tsode::bench
