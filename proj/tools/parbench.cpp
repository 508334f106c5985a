// Timing comparison of the serial reference implementations against their
// OpenMP counterparts: per-batch gradient accumulation and sweep cells. Both
// pairs are required to produce identical results, so this doubles as a
// quick equivalence check.
#include <omp.h>

#include <CLI11.hpp>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <vector>

#include "tsode/bench.hpp"
#include "tsode/forecaster.hpp"
#include "tsode/rng.hpp"

namespace fs = std::filesystem;
using namespace tsode;

namespace {

std::vector<forecaster::StepFeatures> synth_stream(int len, Rng& rng) {
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  std::vector<forecaster::StepFeatures> out;
  out.reserve(static_cast<std::size_t>(len));
  double bg = rng.uniform(90.0, 200.0);
  for (int t = 0; t < len; ++t) {
    bg = std::min(400.0, std::max(40.0, bg + rng.normal(0.0, 6.0)));
    const double tod = std::fmod(3.0 * t, 1440.0);
    forecaster::StepFeatures sf;
    sf.bg = bg;
    sf.iob = rng.uniform(0.0, 4.0);
    sf.cob = rng.uniform(0.0, 60.0);
    sf.sin_tod = std::sin(kTwoPi * tod / 1440.0);
    sf.cos_tod = std::cos(kTwoPi * tod / 1440.0);
    sf.lbgi = tspolicy::lbgi_of(bg);
    sf.hbgi = tspolicy::hbgi_of(bg);
    sf.dose = 0.2 * rng.uniform_int(0, 15);
    out.push_back(sf);
  }
  return out;
}

void bench_gradients(int n_records, int repeats, int threads) {
  Rng rng(42);
  const auto stream = synth_stream(n_records + forecaster::kWindow + forecaster::kHorizon, rng);
  const auto records = forecaster::extract_records(stream, 1, "synthetic");
  auto model = forecaster::ForecasterModel::init(7);
  model.stand = forecaster::fit_standardizer(records);
  const auto prepared = forecaster::prepare_records(model.stand, records);

  std::vector<int> idx(prepared.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  const std::size_t np = static_cast<std::size_t>(model.param_count());
  std::vector<double> g_serial(np), g_parallel(np);

  // warm both paths once before timing
  double loss_s = forecaster::accumulate_batch_gradients_serial(model, prepared, idx, g_serial);
  omp_set_num_threads(threads);
  double loss_p = forecaster::accumulate_batch_gradients_parallel(model, prepared, idx, g_parallel);

  double t0 = omp_get_wtime();
  for (int r = 0; r < repeats; ++r)
    loss_s = forecaster::accumulate_batch_gradients_serial(model, prepared, idx, g_serial);
  const double serial_s = omp_get_wtime() - t0;

  t0 = omp_get_wtime();
  for (int r = 0; r < repeats; ++r)
    loss_p = forecaster::accumulate_batch_gradients_parallel(model, prepared, idx, g_parallel);
  const double parallel_s = omp_get_wtime() - t0;

  const bool same = loss_s == loss_p &&
                    std::memcmp(g_serial.data(), g_parallel.data(), np * sizeof(double)) == 0;
  std::printf("batch gradients  (%zu records x %d repeats, %zu params)\n", prepared.size(),
              repeats, np);
  std::printf("  serial       %8.3f s   %7.2f ms/pass\n", serial_s,
              1e3 * serial_s / repeats);
  std::printf("  omp x%-2d      %8.3f s   %7.2f ms/pass   speedup %.2fx   bitwise equal: %s\n",
              threads, parallel_s, 1e3 * parallel_s / repeats, serial_s / parallel_s,
              same ? "yes" : "NO");
  if (!same) std::exit(1);
}

void bench_cells(int threads) {
  bench::ExperimentConfig cfg;
  cfg.cohort_size = 2;
  cfg.controllers = {"pid", "tsmpc"};
  cfg.seeds = {1, 2};
  cfg.days_warmup = 3;
  cfg.days_eval = 2;

  const auto cohort = bench::load_cohort(cfg);
  std::vector<bench::CellSpec> cells;
  for (const auto& p : cohort)
    for (const auto& c : cfg.controllers)
      for (const auto s : cfg.seeds) cells.push_back({p, c, s});

  const auto tmp = fs::temp_directory_path();
  auto cfg_serial = cfg;
  cfg_serial.out_dir = (tmp / "tsode-parbench-serial").string();
  auto cfg_par = cfg;
  cfg_par.out_dir = (tmp / "tsode-parbench-omp").string();

  double t0 = omp_get_wtime();
  const auto rs = bench::run_cells_serial(cfg_serial, cells);
  const double serial_s = omp_get_wtime() - t0;

  t0 = omp_get_wtime();
  const auto rp = bench::run_cells_parallel(cfg_par, cells, threads);
  const double parallel_s = omp_get_wtime() - t0;

  bool same = rs.size() == rp.size();
  for (std::size_t i = 0; same && i < rs.size(); ++i) {
    same = !rs[i].failed && !rp[i].failed && rs[i].row.tir_pct == rp[i].row.tir_pct &&
           rs[i].row.mean_bg == rp[i].row.mean_bg &&
           rs[i].row.below_70_pct == rp[i].row.below_70_pct;
  }
  std::printf("sweep cells      (%zu cells: 2 patients x {pid,tsmpc} x 2 seeds, 5 days)\n",
              cells.size());
  std::printf("  serial       %8.3f s\n", serial_s);
  std::printf("  omp x%-2d      %8.3f s   speedup %.2fx   results equal: %s\n", threads,
              parallel_s, serial_s / parallel_s, same ? "yes" : "NO");

  fs::remove_all(cfg_serial.out_dir);
  fs::remove_all(cfg_par.out_dir);
  if (!same) std::exit(1);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"parbench: serial reference vs OpenMP kernels"};
  int records = 192;
  int repeats = 20;
  int threads = omp_get_max_threads();
  bool skip_cells = false;
  app.add_option("--records", records, "synthetic training windows");
  app.add_option("--repeats", repeats, "timed passes per variant");
  app.add_option("--threads", threads, "OpenMP thread count");
  app.add_flag("--skip-cells", skip_cells, "only benchmark gradient accumulation");
  CLI11_PARSE(app, argc, argv);

  bench_gradients(records, repeats, threads);
  if (!skip_cells) bench_cells(threads);
  return 0;
}
