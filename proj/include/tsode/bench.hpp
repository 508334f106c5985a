#pragma once
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tsode/baselines.hpp"
#include "tsode/looprt.hpp"
#include "tsode/safegate.hpp"
#include "tsode/vpatient.hpp"

namespace tsode::bench {

struct MealSpec {
  double time_min = 0.0;
  double grams = 0.0;
};

struct ForecasterHp {
  int epochs = 120;
  double lr = 1e-3;
  int batch = 32;
  int train_stride = 6;  // subsampling of training windows
};

struct TransferSpec {
  std::vector<std::string> sources = {"adult#001", "adult#002"};
  std::string target = "adult#005";
};

struct ExperimentConfig {
  int cohort_size = 10;
  std::uint64_t cohort_seed = 7;
  std::string cohort_file;  // empty: generate deterministically
  std::vector<std::string> patients;  // empty: whole cohort
  std::vector<std::string> controllers = {"mealbolus", "pid", "tsmpc", "tsode"};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  int days_warmup = 30;
  int days_eval = 14;
  std::vector<MealSpec> meals = {{480, 50}, {750, 70}, {960, 15}, {1140, 60}};
  looprt::LoopConfig loop;
  safegate::SafetyConfig safety;
  ForecasterHp forecaster_hp;
  baselines::PidConfig pid;
  double tsmpc_dose_penalty = 800.0;
  TransferSpec transfer;
  int workers = 0;  // 0: one OpenMP thread per available core
  std::string out_dir = "out";

  void validate() const;
  static ExperimentConfig from_json(const std::string& text);
  static ExperimentConfig from_json_file(const std::string& path);
  std::string to_json() const;  // canonical form used for the config hash
};

struct MetricsRow {
  std::string patient;
  std::string controller;
  std::uint64_t seed = 0;
  double tir_pct = 0.0;        // 70..180 inclusive, true bg
  double below_70_pct = 0.0;
  double below_54_pct = 0.0;
  double above_180_pct = 0.0;
  double mean_bg = 0.0;
  int eval_days = 0;
};

MetricsRow compute_metrics(std::span<const looprt::StepRecord> eval_steps,
                           const std::string& patient, const std::string& controller,
                           std::uint64_t seed, int eval_days);

struct CellSpec {
  vpatient::NamedPatient patient;
  std::string controller;
  std::uint64_t seed = 0;
};

struct CellResult {
  CellSpec spec;
  MetricsRow row;
  bool failed = false;
  std::string error;
  // TSODE extras, for coverage accounting
  double q_alpha = 0.0;
  double val_coverage = 0.0;  // fraction of validation residuals within q_alpha
  long n_val_residuals = 0;
  double train_loss_first = 0.0;
  double train_loss_last = 0.0;
};

// Deterministic per-cell seed derived from the sweep seed and the cell
// coordinates.
std::uint64_t cell_seed(std::uint64_t seed, const std::string& patient,
                        const std::string& controller);

// Episode wiring for one cell: meals, loop, safety, per-patient TSMPC
// sensitivities, and the forked episode seed.
looprt::EpisodeConfig make_episode_config(const ExperimentConfig& cfg, const CellSpec& spec);

// One (patient, controller, seed) episode end to end: warm-up, TSODE
// training and calibration when applicable, gated evaluation, trace and
// artifact files under out_dir. Never throws; failures land in the result.
CellResult run_cell(const ExperimentConfig& cfg, const CellSpec& spec);

// The serial reference and the OpenMP sweep produce identical results and
// files; cells are independent and land in spec order either way.
std::vector<CellResult> run_cells_serial(const ExperimentConfig& cfg,
                                         std::span<const CellSpec> cells);
std::vector<CellResult> run_cells_parallel(const ExperimentConfig& cfg,
                                           std::span<const CellSpec> cells, int workers);

struct SweepResult {
  std::vector<CellResult> cells;
  std::vector<vpatient::NamedPatient> cohort;
  std::string metrics_path;
  std::string summary_path;
  std::string manifest_path;
};

SweepResult run_experiment(const ExperimentConfig& cfg);

struct TransferResult {
  MetricsRow transferred;  // controller "tsode_transfer"
  MetricsRow own;          // controller "tsode_own"
  std::string metrics_path;
};

// Trains the forecaster on pooled source warm-up logs, merges the source
// policy tables, then runs the target patient frozen-greedy under the gate
// (30-day burn-in, metrics on the following eval window). The own-trained
// row repeats the standard pipeline on the target for comparison.
TransferResult transfer_scenario(const ExperimentConfig& cfg);

// Recomputes metrics rows from the trace files under traces_dir (using their
// sidecar metadata) and writes them to out_csv, sorted by patient,
// controller, seed.
void report(const std::string& traces_dir, const std::string& out_csv);

std::vector<vpatient::NamedPatient> load_cohort(const ExperimentConfig& cfg);

}  // namespace tsode::bench
