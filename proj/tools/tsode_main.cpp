// Command-line front end: simulate one episode, train or calibrate a
// forecaster from trace logs, run the full benchmark sweep, run the transfer
// scenario, or recompute metrics from trace files.
#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "tsode/bench.hpp"
#include "tsode/csvio.hpp"
#include "tsode/faults.hpp"
#include "tsode/forecaster.hpp"
#include "tsode/looprt.hpp"
#include "tsode/safegate.hpp"
#include "tsode/tspolicy.hpp"

namespace {

using namespace tsode;

bench::ExperimentConfig load_config(const std::string& path) {
  if (path.empty()) return bench::ExperimentConfig{};
  return bench::ExperimentConfig::from_json_file(path);
}

const vpatient::NamedPatient& pick_patient(const std::vector<vpatient::NamedPatient>& cohort,
                                           const std::string& name) {
  for (const auto& p : cohort)
    if (p.name == name) return p;
  throw ConfigFault("patient not in cohort: " + name);
}

// Rebuilds the forecaster's feature rows from a trace file, mirroring the
// loop runtime's own featurization.
std::vector<forecaster::StepFeatures> features_from_trace(const std::string& path) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  std::vector<forecaster::StepFeatures> out;
  for (const auto& r : looprt::read_trace_csv(path)) {
    const double tod = std::fmod(r.clock_min, 1440.0);
    forecaster::StepFeatures sf;
    sf.bg = r.bg_obs;
    sf.iob = r.iob;
    sf.cob = r.cob;
    sf.sin_tod = std::sin(kTwoPi * tod / 1440.0);
    sf.cos_tod = std::cos(kTwoPi * tod / 1440.0);
    sf.lbgi = tspolicy::lbgi_of(r.bg_obs);
    sf.hbgi = tspolicy::hbgi_of(r.bg_obs);
    sf.dose = r.delivered_u;
    out.push_back(sf);
  }
  return out;
}

std::vector<forecaster::TrainRecord> records_from_traces(const std::vector<std::string>& traces,
                                                         int stride) {
  std::vector<forecaster::TrainRecord> records;
  for (const auto& path : traces) {
    const auto feats = features_from_trace(path);
    auto recs = forecaster::extract_records(feats, stride, path);
    records.insert(records.end(), recs.begin(), recs.end());
  }
  if (records.empty()) throw ConfigFault("traces too short: no training windows extracted");
  return records;
}

void print_row(const bench::MetricsRow& r) {
  std::printf("%-12s %-16s tir=%6.2f%%  <70=%5.2f%%  <54=%5.2f%%  >180=%6.2f%%  mean_bg=%6.1f\n",
              r.patient.c_str(), r.controller.c_str(), r.tir_pct, r.below_70_pct, r.below_54_pct,
              r.above_180_pct, r.mean_bg);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tsode: safe Thompson-sampling insulin dosing benchmark"};
  app.require_subcommand(1);

  std::string config_path, out_arg, patient_arg, controller_arg;
  std::uint64_t seed_arg = 0;
  bool seed_set = false;
  int workers_arg = -1;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config JSON");
    sub->add_option("--out", out_arg, "output path or directory");
    sub->add_option("--seed", seed_arg, "override the seed list with one seed")
        ->each([&](const std::string&) { seed_set = true; });
    sub->add_option("--workers", workers_arg, "parallel sweep cells (0 = all cores)");
    sub->add_option("--controller", controller_arg, "restrict to one controller");
    sub->add_option("--patient", patient_arg, "restrict to one patient");
  };

  // simulate
  auto* sim = app.add_subcommand("simulate", "run one episode and write its trace");
  add_common(sim);
  int sim_days = 30;
  std::string sim_mode = "warmup";
  std::string sim_model, sim_cal;
  sim->add_option("--days", sim_days, "episode length in days");
  sim->add_option("--mode", sim_mode, "warmup (learning) or eval (frozen greedy)")
      ->check(CLI::IsMember({"warmup", "eval"}));
  sim->add_option("--model", sim_model, "forecaster checkpoint to arm the gate with");
  sim->add_option("--cal", sim_cal, "conformal calibration JSON (required with --model)");
  sim->callback([&] {
    auto cfg = load_config(config_path);
    if (seed_set) cfg.seeds = {seed_arg};
    const auto cohort = bench::load_cohort(cfg);
    const std::string pname = patient_arg.empty() ? cohort.front().name : patient_arg;
    const std::string ctrl = controller_arg.empty() ? "tsode" : controller_arg;
    const bench::CellSpec spec{pick_patient(cohort, pname), ctrl, cfg.seeds.front()};
    looprt::EpisodeRunner runner(bench::make_episode_config(cfg, spec));

    forecaster::ForecasterModel model;
    safegate::ConformalCalibration cal;
    if (!sim_model.empty()) {
      if (sim_cal.empty()) throw ConfigFault("--model needs --cal");
      model = forecaster::ForecasterModel::load(sim_model);
      cal = safegate::ConformalCalibration::from_json(csvio::read_text_file(sim_cal));
      runner.arm_forecast(&model, &cal);
    }
    const auto mode = sim_mode == "eval" ? looprt::Mode::kEval : looprt::Mode::kWarmup;
    const auto trace = runner.run(sim_days, mode);
    const std::string path = out_arg.empty() ? "trace.csv" : out_arg;
    looprt::write_trace_csv(path, trace, sim_model.empty() ? std::nan("") : cal.q_alpha);
    const auto row = bench::compute_metrics(trace, pname, ctrl, cfg.seeds.front(), sim_days);
    print_row(row);
    std::printf("trace: %s (%zu steps)\n", path.c_str(), trace.size());
  });

  // train
  auto* train_cmd = app.add_subcommand("train", "train a forecaster from trace logs");
  add_common(train_cmd);
  std::vector<std::string> train_traces;
  int train_stride = 0;
  train_cmd->add_option("--trace", train_traces, "trace CSV (repeatable)")->required();
  train_cmd->add_option("--stride", train_stride, "window stride (default from config)");
  train_cmd->callback([&] {
    auto cfg = load_config(config_path);
    const int stride = train_stride > 0 ? train_stride : cfg.forecaster_hp.train_stride;
    const auto records = records_from_traces(train_traces, stride);
    const std::uint64_t seed = seed_set ? seed_arg : cfg.seeds.front();
    auto model = forecaster::ForecasterModel::init(Rng(seed).fork("model-init").seed());
    forecaster::TrainOptions topt;
    topt.epochs = cfg.forecaster_hp.epochs;
    topt.lr = cfg.forecaster_hp.lr;
    topt.batch = cfg.forecaster_hp.batch;
    topt.seed = Rng(seed).fork("train").seed();
    const auto tr = forecaster::train(model, records, topt);
    const std::string path = out_arg.empty() ? "model.ckpt" : out_arg;
    model.save(path);
    std::printf("trained on %zu windows, %d epochs: nll %.4f -> %.4f\n", records.size(),
                topt.epochs, tr.epoch_loss.front(), tr.epoch_loss.back());
    std::printf("checkpoint: %s\n", path.c_str());
  });

  // calibrate
  auto* cal_cmd = app.add_subcommand("calibrate", "conformal calibration from trace logs");
  add_common(cal_cmd);
  std::vector<std::string> cal_traces;
  std::string cal_model;
  double cal_alpha = -1.0;
  bool cal_per_step = false;
  cal_cmd->add_option("--trace", cal_traces, "trace CSV (repeatable)")->required();
  cal_cmd->add_option("--model", cal_model, "forecaster checkpoint")->required();
  cal_cmd->add_option("--alpha", cal_alpha, "miscoverage level (default from config)");
  cal_cmd->add_flag("--per-step", cal_per_step, "per-horizon-step quantiles");
  cal_cmd->callback([&] {
    auto cfg = load_config(config_path);
    const double alpha = cal_alpha > 0.0 ? cal_alpha : cfg.safety.alpha;
    const auto records = records_from_traces(cal_traces, 1);
    const auto model = forecaster::ForecasterModel::load(cal_model);
    const auto cal = safegate::calibrate(model, records, alpha, cal_per_step);
    const std::string path = out_arg.empty() ? "calibration.json" : out_arg;
    csvio::write_text_file(path, cal.to_json() + "\n");
    std::printf("q_alpha=%.3f mg/dL from %ld residuals (alpha=%.3f)\n", cal.q_alpha, cal.n,
                alpha);
    std::printf("calibration: %s\n", path.c_str());
  });

  // run
  auto* run_cmd = app.add_subcommand("run", "full cohort x controller x seed sweep");
  add_common(run_cmd);
  run_cmd->callback([&] {
    auto cfg = load_config(config_path);
    if (!out_arg.empty()) cfg.out_dir = out_arg;
    if (seed_set) cfg.seeds = {seed_arg};
    if (workers_arg >= 0) cfg.workers = workers_arg;
    if (!controller_arg.empty()) cfg.controllers = {controller_arg};
    if (!patient_arg.empty()) cfg.patients = {patient_arg};
    const auto sw = bench::run_experiment(cfg);
    int failed = 0;
    for (const auto& c : sw.cells) failed += c.failed ? 1 : 0;
    std::printf("%zu cells (%d failed)\n", sw.cells.size(), failed);
    // cohort summary to stdout
    for (const auto& ctrl : cfg.controllers) {
      std::vector<bench::MetricsRow> rows;
      for (const auto& c : sw.cells)
        if (!c.failed && c.spec.controller == ctrl) rows.push_back(c.row);
      if (rows.empty()) continue;
      bench::MetricsRow mean;
      mean.patient = "cohort";
      mean.controller = ctrl;
      for (const auto& r : rows) {
        mean.tir_pct += r.tir_pct;
        mean.below_70_pct += r.below_70_pct;
        mean.below_54_pct += r.below_54_pct;
        mean.above_180_pct += r.above_180_pct;
        mean.mean_bg += r.mean_bg;
      }
      const double n = static_cast<double>(rows.size());
      mean.tir_pct /= n;
      mean.below_70_pct /= n;
      mean.below_54_pct /= n;
      mean.above_180_pct /= n;
      mean.mean_bg /= n;
      print_row(mean);
    }
    std::printf("metrics: %s\nsummary: %s\nmanifest: %s\n", sw.metrics_path.c_str(),
                sw.summary_path.c_str(), sw.manifest_path.c_str());
  });

  // transfer
  auto* tr_cmd = app.add_subcommand("transfer", "train on source patients, test on the target");
  add_common(tr_cmd);
  tr_cmd->callback([&] {
    auto cfg = load_config(config_path);
    if (!out_arg.empty()) cfg.out_dir = out_arg;
    if (seed_set) cfg.seeds = {seed_arg};
    const auto res = bench::transfer_scenario(cfg);
    print_row(res.transferred);
    print_row(res.own);
    std::printf("metrics: %s\n", res.metrics_path.c_str());
  });

  // report
  auto* rep_cmd = app.add_subcommand("report", "recompute metrics from trace files");
  add_common(rep_cmd);
  std::string rep_traces;
  rep_cmd->add_option("--traces", rep_traces, "directory of trace CSVs and sidecars");
  rep_cmd->callback([&] {
    auto cfg = load_config(config_path);
    const std::string dir = rep_traces.empty() ? cfg.out_dir + "/traces" : rep_traces;
    const std::string path = out_arg.empty() ? "metrics_recomputed.csv" : out_arg;
    bench::report(dir, path);
    std::printf("recomputed metrics: %s\n", path.c_str());
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
