#include "tsode/forecaster.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

#include <omp.h>

#include "tsode/diffkit/adam.hpp"
#include "tsode/diffkit/checkpoint.hpp"
#include "tsode/diffkit/rk4.hpp"
#include "tsode/diffkit/tape.hpp"
#include "tsode/faults.hpp"

namespace tsode::forecaster {

using diffkit::Tape;
using diffkit::Tensor;
using diffkit::Var;

namespace {

constexpr int kAug = kLatent + 1;  // latent plus the dose channel

double std_floor(double sd, double floor) { return sd > floor ? sd : floor; }

Tensor standardized_row(const FeatureWindow& w, int row, const Standardizer& st) {
  Tensor x(kFeatures, 1);
  for (int f = 0; f < kFeatures; ++f) {
    const double raw = w.at(row, f);
    if (!std::isfinite(raw)) throw NumericalFault("feature window contains non-finite value");
    const double z = (raw - st.mean[static_cast<size_t>(f)]) / st.sd[static_cast<size_t>(f)];
    if (std::abs(z) > 100.0)
      throw ConfigFault("feature window wildly out of distribution (|z| > 100)");
    x.v[static_cast<size_t>(f)] = z;
  }
  return x;
}

struct BoundModel {
  diffkit::BoundGru gru;
  diffkit::BoundDense proj;
  diffkit::BoundMlp dyn;
  diffkit::BoundDense dec;
  Var mask;
  std::vector<Var> leaves;  // parameter leaves, params() order
};

BoundModel bind_model(Tape& tape, const ForecasterModel& m) {
  BoundModel b;
  b.gru = bind(tape, m.gru);
  b.proj = bind(tape, m.latent_proj);
  b.dyn = bind(tape, m.dynamics);
  b.dec = bind(tape, m.decoder);
  Tensor mask(kAug, 1);
  for (int i = 0; i < kLatent; ++i) mask.v[static_cast<size_t>(i)] = 1.0;
  b.mask = tape.leaf(mask);
  b.leaves = {b.gru.wz, b.gru.uz, b.gru.bz, b.gru.wr, b.gru.ur, b.gru.br,
              b.gru.wn, b.gru.un, b.gru.bn, b.proj.w,  b.proj.b};
  for (const auto& l : b.dyn.layers) {
    b.leaves.push_back(l.w);
    b.leaves.push_back(l.b);
  }
  b.leaves.push_back(b.dec.w);
  b.leaves.push_back(b.dec.b);
  return b;
}

struct TapedDist {
  std::vector<Var> mu_std;
  std::vector<Var> var_std;
};

TapedDist forward_dist(Tape& tape, const BoundModel& b, std::span<const Tensor> rows_std,
                       double dose_std, double floor_std) {
  Var h = tape.leaf(Tensor(kHidden, 1));
  for (const Tensor& row : rows_std) h = gru_step(tape, b.gru, tape.leaf(row), h);
  Var lat = apply(tape, b.proj, h);
  Var z0 = tape.concat(lat, tape.leaf_scalar(dose_std));
  diffkit::OdeFn f = [&b](Tape& t, Var z) { return t.hadamard(apply(t, b.dyn, z), b.mask); };
  const std::vector<Var> zs = rk4_integrate(tape, f, z0, kHorizon, 1.0);
  TapedDist out;
  for (const Var& z : zs) {
    Var dec = apply(tape, b.dec, tape.slice(z, 0, kLatent));
    out.mu_std.push_back(tape.slice(dec, 0, 1));
    out.var_std.push_back(tape.clamp_min(tape.exp(tape.slice(dec, 1, 1)), floor_std));
  }
  return out;
}

Var record_loss(Tape& tape, const BoundModel& b, const PreparedRecord& rec, double floor_std) {
  const TapedDist d = forward_dist(tape, b, rec.rows, rec.dose_std, floor_std);
  Var total{};
  for (int k = 0; k < kHorizon; ++k) {
    Var resid = tape.sub(d.mu_std[static_cast<size_t>(k)],
                         tape.leaf_scalar(rec.target_std[static_cast<size_t>(k)]));
    Var term = tape.axpy(tape.log(d.var_std[static_cast<size_t>(k)]),
                         tape.div(tape.square(resid), d.var_std[static_cast<size_t>(k)]), 1.0);
    total = k == 0 ? term : tape.add(total, term);
  }
  return tape.scale(total, 0.5 / kHorizon);
}

// Forward + backward for one record; adds parameter gradients into grad_out.
double record_pass(const ForecasterModel& model, const PreparedRecord& rec,
                   std::span<double> grad_out) {
  static thread_local Tape tape;
  tape.reset();
  const BoundModel b = bind_model(tape, model);
  const double floor_std = model.var_floor / (model.stand.bg_sd() * model.stand.bg_sd());
  const Var loss = record_loss(tape, b, rec, floor_std);
  tape.backward(loss);
  std::size_t off = 0;
  for (const Var& leaf : b.leaves) {
    const auto g = tape.grad(leaf);
    for (double gv : g) grad_out[off++] += gv;
  }
  return tape.value_scalar(loss);
}

}  // namespace

ForecasterModel ForecasterModel::init(std::uint64_t seed) {
  Rng root(seed);
  ForecasterModel m;
  Rng r1 = root.fork("gru");
  m.gru = diffkit::GruCell::init(kFeatures, kHidden, r1);
  Rng r2 = root.fork("latent_proj");
  m.latent_proj = diffkit::Dense::init(kHidden, kLatent, r2);
  Rng r3 = root.fork("dynamics");
  const int dims[] = {kAug, 64, kAug};
  m.dynamics = diffkit::Mlp::init(dims, r3);
  Rng r4 = root.fork("decoder");
  m.decoder = diffkit::Dense::init(kLatent, 2, r4);
  for (int f = 0; f < kFeatures; ++f) {
    m.stand.mean[static_cast<size_t>(f)] = 0.0;
    m.stand.sd[static_cast<size_t>(f)] = 1.0;
  }
  return m;
}

Tensor ForecasterModel::encode(const FeatureWindow& window, double dose) const {
  if (!std::isfinite(dose) || dose < 0) throw ConfigFault("encode: dose must be finite and >= 0");
  Tensor h(kHidden, 1);
  for (int r = 0; r < kWindow; ++r) h = gru.step(standardized_row(window, r, stand), h);
  const Tensor lat = latent_proj.apply(h);
  Tensor z0(kAug, 1);
  for (int i = 0; i < kLatent; ++i) z0.v[static_cast<size_t>(i)] = lat.v[static_cast<size_t>(i)];
  z0.v[kLatent] = (dose - stand.dose_mean) / stand.dose_sd;
  return z0;
}

ForecastDist ForecasterModel::predict(const FeatureWindow& window, double dose) const {
  const Tensor z0 = encode(window, dose);
  const double floor_std = var_floor / (stand.bg_sd() * stand.bg_sd());
  diffkit::PlainOdeFn f = [this](const Tensor& z) {
    Tensor y = dynamics.apply(z);
    y.v[kLatent] *= 0.0;
    return y;
  };
  const std::vector<Tensor> zs = rk4_integrate(f, z0, kHorizon, 1.0);
  ForecastDist out;
  out.dose = dose;
  Tensor z16(kLatent, 1);
  for (int k = 0; k < kHorizon; ++k) {
    for (int i = 0; i < kLatent; ++i)
      z16.v[static_cast<size_t>(i)] = zs[static_cast<size_t>(k)].v[static_cast<size_t>(i)];
    const Tensor dec = decoder.apply(z16);
    const double mu_std = dec.v[0];
    const double var_std = std::max(std::exp(dec.v[1]), floor_std);
    out.mu[static_cast<size_t>(k)] = mu_std * stand.bg_sd() + stand.bg_mean();
    out.var[static_cast<size_t>(k)] = var_std * stand.bg_sd() * stand.bg_sd();
    if (!std::isfinite(out.mu[static_cast<size_t>(k)]) || !std::isfinite(out.var[static_cast<size_t>(k)]))
      throw NumericalFault("forecast non-finite at horizon step " + std::to_string(k + 1));
  }
  return out;
}

std::vector<Tensor*> ForecasterModel::params() {
  std::vector<Tensor*> out = gru.params();
  for (auto* t : latent_proj.params()) out.push_back(t);
  for (auto* t : dynamics.params()) out.push_back(t);
  for (auto* t : decoder.params()) out.push_back(t);
  return out;
}

int ForecasterModel::param_count() {
  int n = 0;
  for (auto* t : params()) n += t->size();
  return n;
}

void ForecasterModel::save(const std::string& path) const {
  ForecasterModel& self = const_cast<ForecasterModel&>(*this);
  static const char* names[] = {"gru.wz", "gru.uz", "gru.bz", "gru.wr", "gru.ur", "gru.br",
                                "gru.wn", "gru.un", "gru.bn", "latent_proj.w", "latent_proj.b",
                                "dynamics.0.w", "dynamics.0.b", "dynamics.1.w", "dynamics.1.b",
                                "decoder.w", "decoder.b"};
  std::vector<diffkit::NamedTensor> ts;
  const auto ps = self.params();
  if (ps.size() != std::size(names)) throw UsageFault("parameter list out of sync");
  for (size_t i = 0; i < ps.size(); ++i) ts.push_back({names[i], *ps[i]});
  Tensor mean_t(kFeatures, 1), sd_t(kFeatures, 1);
  for (int f = 0; f < kFeatures; ++f) {
    mean_t.v[static_cast<size_t>(f)] = stand.mean[static_cast<size_t>(f)];
    sd_t.v[static_cast<size_t>(f)] = stand.sd[static_cast<size_t>(f)];
  }
  ts.push_back({"stand.mean", mean_t});
  ts.push_back({"stand.sd", sd_t});
  ts.push_back({"stand.dose", Tensor::vec({stand.dose_mean, stand.dose_sd})});
  ts.push_back({"var_floor", Tensor::vec({var_floor})});
  diffkit::save_checkpoint(path, ts);
}

ForecasterModel ForecasterModel::load(const std::string& path) {
  const auto ts = diffkit::load_checkpoint(path);
  std::map<std::string, const Tensor*> by_name;
  for (const auto& nt : ts) by_name[nt.name] = &nt.t;
  auto get = [&](const std::string& name, int rows, int cols) -> const Tensor& {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw ConfigFault("checkpoint missing tensor " + name + ": " + path);
    if (it->second->rows != rows || it->second->cols != cols)
      throw ConfigFault("checkpoint tensor " + name + " has wrong shape: " + path);
    return *it->second;
  };
  ForecasterModel m = ForecasterModel::init(0);
  m.gru.wz = get("gru.wz", kHidden, kFeatures);
  m.gru.uz = get("gru.uz", kHidden, kHidden);
  m.gru.bz = get("gru.bz", kHidden, 1);
  m.gru.wr = get("gru.wr", kHidden, kFeatures);
  m.gru.ur = get("gru.ur", kHidden, kHidden);
  m.gru.br = get("gru.br", kHidden, 1);
  m.gru.wn = get("gru.wn", kHidden, kFeatures);
  m.gru.un = get("gru.un", kHidden, kHidden);
  m.gru.bn = get("gru.bn", kHidden, 1);
  m.latent_proj.w = get("latent_proj.w", kLatent, kHidden);
  m.latent_proj.b = get("latent_proj.b", kLatent, 1);
  m.dynamics.layers[0].w = get("dynamics.0.w", 64, kAug);
  m.dynamics.layers[0].b = get("dynamics.0.b", 64, 1);
  m.dynamics.layers[1].w = get("dynamics.1.w", kAug, 64);
  m.dynamics.layers[1].b = get("dynamics.1.b", kAug, 1);
  m.decoder.w = get("decoder.w", 2, kLatent);
  m.decoder.b = get("decoder.b", 2, 1);
  const Tensor& mean_t = get("stand.mean", kFeatures, 1);
  const Tensor& sd_t = get("stand.sd", kFeatures, 1);
  for (int f = 0; f < kFeatures; ++f) {
    m.stand.mean[static_cast<size_t>(f)] = mean_t.v[static_cast<size_t>(f)];
    m.stand.sd[static_cast<size_t>(f)] = sd_t.v[static_cast<size_t>(f)];
  }
  const Tensor& dose_t = get("stand.dose", 2, 1);
  m.stand.dose_mean = dose_t.v[0];
  m.stand.dose_sd = dose_t.v[1];
  m.var_floor = get("var_floor", 1, 1).v[0];
  return m;
}

double nll(const ForecastDist& pred, std::span<const double> target, const Standardizer& stand) {
  if (target.size() != kHorizon) throw ConfigFault("nll target length mismatch");
  const double sd2 = stand.bg_sd() * stand.bg_sd();
  double acc = 0.0;
  for (int k = 0; k < kHorizon; ++k) {
    const double var_std = pred.var[static_cast<size_t>(k)] / sd2;
    const double mu_std = (pred.mu[static_cast<size_t>(k)] - stand.bg_mean()) / stand.bg_sd();
    const double t_std = (target[static_cast<size_t>(k)] - stand.bg_mean()) / stand.bg_sd();
    const double resid = mu_std - t_std;
    acc += std::log(var_std) + resid * resid / var_std;
  }
  return 0.5 * acc / kHorizon;
}

std::vector<TrainRecord> extract_records(std::span<const StepFeatures> steps, int stride,
                                         const std::string& source_id) {
  if (stride < 1) throw ConfigFault("extract_records stride must be >= 1");
  std::vector<TrainRecord> out;
  const int n = static_cast<int>(steps.size());
  for (int t = kWindow - 1; t + kHorizon < n; t += stride) {
    TrainRecord rec;
    for (int r = 0; r < kWindow; ++r) {
      const StepFeatures& s = steps[static_cast<size_t>(t - kWindow + 1 + r)];
      rec.window.at(r, 0) = s.bg;
      rec.window.at(r, 1) = s.iob;
      rec.window.at(r, 2) = s.cob;
      rec.window.at(r, 3) = s.sin_tod;
      rec.window.at(r, 4) = s.cos_tod;
      rec.window.at(r, 5) = s.lbgi;
      rec.window.at(r, 6) = s.hbgi;
    }
    rec.dose = steps[static_cast<size_t>(t)].dose;
    for (int k = 0; k < kHorizon; ++k)
      rec.target[static_cast<size_t>(k)] = steps[static_cast<size_t>(t + 1 + k)].bg;
    rec.source_id = source_id;
    out.push_back(std::move(rec));
  }
  return out;
}

Standardizer fit_standardizer(std::span<const TrainRecord> records) {
  if (records.empty()) throw ConfigFault("fit_standardizer needs records");
  Standardizer st;
  for (int f = 0; f < kFeatures; ++f) {
    double mean = 0.0, m2 = 0.0;
    long n = 0;
    for (const auto& rec : records)
      for (int r = 0; r < kWindow; ++r) {
        const double x = rec.window.at(r, f);
        n += 1;
        const double d = x - mean;
        mean += d / static_cast<double>(n);
        m2 += d * (x - mean);
      }
    st.mean[static_cast<size_t>(f)] = mean;
    st.sd[static_cast<size_t>(f)] = std_floor(std::sqrt(m2 / static_cast<double>(n)), 1e-6);
  }
  {
    double mean = 0.0, m2 = 0.0;
    long n = 0;
    for (const auto& rec : records) {
      n += 1;
      const double d = rec.dose - mean;
      mean += d / static_cast<double>(n);
      m2 += d * (rec.dose - mean);
    }
    st.dose_mean = mean;
    st.dose_sd = std_floor(std::sqrt(m2 / static_cast<double>(n)), 0.25);
  }
  return st;
}

std::vector<PreparedRecord> prepare_records(const Standardizer& stand,
                                            std::span<const TrainRecord> records) {
  std::vector<PreparedRecord> out;
  out.reserve(records.size());
  for (const auto& rec : records) {
    PreparedRecord p;
    p.rows.reserve(kWindow);
    for (int r = 0; r < kWindow; ++r) p.rows.push_back(standardized_row(rec.window, r, stand));
    p.dose_std = (rec.dose - stand.dose_mean) / stand.dose_sd;
    for (int k = 0; k < kHorizon; ++k)
      p.target_std[static_cast<size_t>(k)] =
          (rec.target[static_cast<size_t>(k)] - stand.bg_mean()) / stand.bg_sd();
    out.push_back(std::move(p));
  }
  return out;
}

double accumulate_batch_gradients_serial(ForecasterModel& model,
                                         std::span<const PreparedRecord> records,
                                         std::span<const int> idx, std::span<double> grad_out) {
  std::fill(grad_out.begin(), grad_out.end(), 0.0);
  double loss_sum = 0.0;
  for (int i : idx) loss_sum += record_pass(model, records[static_cast<size_t>(i)], grad_out);
  return loss_sum;
}

double accumulate_batch_gradients_parallel(ForecasterModel& model,
                                           std::span<const PreparedRecord> records,
                                           std::span<const int> idx, std::span<double> grad_out) {
  const int b = static_cast<int>(idx.size());
  const std::size_t p = grad_out.size();
  std::vector<double> slot_grads(static_cast<std::size_t>(b) * p, 0.0);
  std::vector<double> slot_loss(static_cast<std::size_t>(b), 0.0);
#pragma omp parallel for schedule(static)
  for (int s = 0; s < b; ++s) {
    std::span<double> slot(slot_grads.data() + static_cast<std::size_t>(s) * p, p);
    slot_loss[static_cast<size_t>(s)] =
        record_pass(model, records[static_cast<size_t>(idx[static_cast<size_t>(s)])], slot);
  }
  // Reduce in slot order: bit-identical to the serial accumulation.
  std::fill(grad_out.begin(), grad_out.end(), 0.0);
  double loss_sum = 0.0;
  for (int s = 0; s < b; ++s) {
    const double* g = slot_grads.data() + static_cast<std::size_t>(s) * p;
    for (std::size_t j = 0; j < p; ++j) grad_out[j] += g[j];
    loss_sum += slot_loss[static_cast<size_t>(s)];
  }
  return loss_sum;
}

TrainResult train(ForecasterModel& model, std::span<const TrainRecord> records,
                  const TrainOptions& opt) {
  if (records.empty()) throw ConfigFault("train needs at least one record");
  if (opt.epochs < 1 || opt.batch < 1) throw ConfigFault("train epochs and batch must be >= 1");
  model.stand = fit_standardizer(records);
  const std::vector<PreparedRecord> prepared = prepare_records(model.stand, records);

  const auto ps = model.params();
  std::size_t p_total = 0;
  for (auto* t : ps) p_total += static_cast<std::size_t>(t->size());
  std::vector<double> grad(p_total), m(p_total, 0.0), v(p_total, 0.0);

  Rng shuffle_rng = Rng(opt.seed).fork("shuffle");
  std::vector<int> idx(prepared.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);

  const diffkit::AdamParams hp{opt.lr, 0.9, 0.999, 1e-8};
  TrainResult result;
  long t_adam = 0;
  const int n = static_cast<int>(prepared.size());
  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    for (int i = n - 1; i >= 1; --i)
      std::swap(idx[static_cast<size_t>(i)],
                idx[static_cast<size_t>(shuffle_rng.uniform_int(0, i))]);
    double epoch_loss = 0.0;
    int batch_no = 0;
    for (int start = 0; start < n; start += opt.batch, ++batch_no) {
      const int count = std::min(opt.batch, n - start);
      const std::span<const int> batch_idx(idx.data() + start, static_cast<size_t>(count));
      const double loss_sum =
          opt.threads > 1
              ? accumulate_batch_gradients_parallel(model, prepared, batch_idx, grad)
              : accumulate_batch_gradients_serial(model, prepared, batch_idx, grad);
      if (!std::isfinite(loss_sum))
        throw NumericalFault("training diverged at epoch " + std::to_string(epoch + 1) +
                             " batch " + std::to_string(batch_no + 1));
      epoch_loss += loss_sum;
      const double inv = 1.0 / count;
      for (auto& g : grad) g *= inv;
      t_adam += 1;
      std::size_t off = 0;
      for (auto* tensor : ps) {
        const std::size_t len = static_cast<std::size_t>(tensor->size());
        adam_step({tensor->v.data(), len}, {grad.data() + off, len}, {m.data() + off, len},
                  {v.data() + off, len}, hp, t_adam);
        off += len;
      }
    }
    result.epoch_loss.push_back(epoch_loss / n);
  }
  return result;
}

}  // namespace tsode::forecaster
