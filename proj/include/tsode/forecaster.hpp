#pragma once
#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tsode/diffkit/nn.hpp"
#include "tsode/diffkit/tensor.hpp"
#include "tsode/rng.hpp"

namespace tsode::forecaster {

inline constexpr int kWindow = 10;    // history steps fed to the encoder
inline constexpr int kHorizon = 10;   // forecast steps (one RK4 step each)
inline constexpr int kFeatures = 7;   // bg, iob, cob, sin_tod, cos_tod, lbgi, hbgi
inline constexpr int kHidden = 32;
inline constexpr int kLatent = 16;

// One controller step as seen by the forecaster. bg is the observed CGM
// reading; dose is what was actually delivered at this step.
struct StepFeatures {
  double bg = 0.0;
  double iob = 0.0;
  double cob = 0.0;
  double sin_tod = 0.0;
  double cos_tod = 0.0;
  double lbgi = 0.0;
  double hbgi = 0.0;
  double dose = 0.0;
};

// Raw (unstandardized) H x F history block, oldest row first.
struct FeatureWindow {
  std::array<double, static_cast<size_t>(kWindow) * kFeatures> m{};
  double at(int row, int col) const { return m[static_cast<size_t>(row) * kFeatures + col]; }
  double& at(int row, int col) { return m[static_cast<size_t>(row) * kFeatures + col]; }
};

struct Standardizer {
  std::array<double, kFeatures> mean{};
  std::array<double, kFeatures> sd{};
  double dose_mean = 0.0;
  double dose_sd = 1.0;
  double bg_mean() const { return mean[0]; }
  double bg_sd() const { return sd[0]; }
};

// Forecast over the horizon in raw mg/dL units. var already has the floor
// applied.
struct ForecastDist {
  std::array<double, kHorizon> mu{};
  std::array<double, kHorizon> var{};
  double dose = 0.0;
};

struct TrainRecord {
  FeatureWindow window;
  double dose = 0.0;
  std::array<double, kHorizon> target{};  // observed bg at t+1..t+K
  std::string source_id;
};

// GRU encoder -> latent projection -> dose-augmented latent state advanced
// by an MLP vector field under RK4 -> per-step Gaussian decoder.
struct ForecasterModel {
  diffkit::GruCell gru;       // kFeatures -> kHidden
  diffkit::Dense latent_proj; // kHidden -> kLatent
  diffkit::Mlp dynamics;      // kLatent+1 -> 64 -> kLatent+1 (tanh hidden)
  diffkit::Dense decoder;     // kLatent -> 2 (mean, log-variance)
  Standardizer stand;
  double var_floor = 1.0;     // mg/dL^2

  static ForecasterModel init(std::uint64_t seed);

  // z0 = [latent_proj(gru(window)); standardized dose], length kLatent+1.
  diffkit::Tensor encode(const FeatureWindow& window, double dose) const;
  ForecastDist predict(const FeatureWindow& window, double dose) const;

  void save(const std::string& path) const;
  static ForecasterModel load(const std::string& path);

  std::vector<diffkit::Tensor*> params();
  int param_count();
};

// Gaussian negative log-likelihood, averaged over the horizon, in
// standardized units (matching the training objective).
double nll(const ForecastDist& pred, std::span<const double> target, const Standardizer& stand);

// Sliding windows over one contiguous trace segment; a record is emitted
// every `stride` steps. Segments must not cross episode phase boundaries,
// which holds by construction since the caller passes a single segment.
std::vector<TrainRecord> extract_records(std::span<const StepFeatures> steps, int stride,
                                         const std::string& source_id);

Standardizer fit_standardizer(std::span<const TrainRecord> records);

// Standardized, ready-to-train form of a TrainRecord.
struct PreparedRecord {
  std::vector<diffkit::Tensor> rows;  // kWindow vectors of kFeatures
  double dose_std = 0.0;
  std::array<double, kHorizon> target_std{};
};

std::vector<PreparedRecord> prepare_records(const Standardizer& stand,
                                            std::span<const TrainRecord> records);

// Sum of per-record gradients for the given record indices, written to
// grad_out (layout: model.params() flattened in order). Returns the summed
// loss. The parallel variant partitions records across OpenMP threads and
// reduces per-record buffers in index order, so its result is bit-identical
// to the serial one.
double accumulate_batch_gradients_serial(ForecasterModel& model,
                                         std::span<const PreparedRecord> records,
                                         std::span<const int> idx, std::span<double> grad_out);
double accumulate_batch_gradients_parallel(ForecasterModel& model,
                                           std::span<const PreparedRecord> records,
                                           std::span<const int> idx, std::span<double> grad_out);

struct TrainOptions {
  int epochs = 30;
  double lr = 1e-3;
  int batch = 64;
  std::uint64_t seed = 0;
  int threads = 1;  // 1 = serial reference; >1 = OpenMP batch parallelism
};

struct TrainResult {
  std::vector<double> epoch_loss;  // mean NLL per epoch, in pass order
};

// Fits the standardizer from the records, then runs Adam over shuffled
// mini-batches. Deterministic in (model init seed, options.seed), and
// independent of options.threads. Non-finite loss raises NumericalFault
// naming epoch and batch.
TrainResult train(ForecasterModel& model, std::span<const TrainRecord> records,
                  const TrainOptions& opt);

}  // namespace tsode::forecaster
