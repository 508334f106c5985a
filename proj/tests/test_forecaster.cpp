#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <vector>

#include "tsode/diffkit/checkpoint.hpp"
#include "tsode/faults.hpp"
#include "tsode/forecaster.hpp"
#include "tsode/rng.hpp"

using namespace tsode;
using namespace tsode::forecaster;

namespace {

std::vector<StepFeatures> synthetic_steps(int n, Rng& rng) {
  std::vector<StepFeatures> steps(static_cast<size_t>(n));
  for (int t = 0; t < n; ++t) {
    StepFeatures& s = steps[static_cast<size_t>(t)];
    const double tod = std::fmod(t * 3.0, 1440.0);
    s.bg = 140.0 + 40.0 * std::sin(2.0 * M_PI * t / 48.0) + rng.normal(0.0, 2.0);
    s.iob = 1.0 + 0.5 * std::sin(2.0 * M_PI * t / 37.0);
    s.cob = std::max(0.0, 30.0 * std::cos(2.0 * M_PI * t / 53.0));
    s.sin_tod = std::sin(2.0 * M_PI * tod / 1440.0);
    s.cos_tod = std::cos(2.0 * M_PI * tod / 1440.0);
    s.lbgi = 0.3;
    s.hbgi = 2.0;
    s.dose = 0.2 * (t % 4);
  }
  return steps;
}

PreparedRecord random_prepared(Rng& rng) {
  PreparedRecord p;
  for (int r = 0; r < kWindow; ++r) {
    diffkit::Tensor row(kFeatures, 1);
    for (double& x : row.v) x = rng.uniform(-1.0, 1.0);
    p.rows.push_back(row);
  }
  p.dose_std = rng.uniform(-1.0, 1.0);
  for (int k = 0; k < kHorizon; ++k) p.target_std[static_cast<size_t>(k)] = rng.uniform(-1.0, 1.0);
  return p;
}

bool tensors_bitwise_equal(const diffkit::Tensor& a, const diffkit::Tensor& b) {
  if (a.rows != b.rows || a.cols != b.cols) return false;
  return std::memcmp(a.v.data(), b.v.data(), a.v.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("extract_records windows, targets, and stride") {
  std::vector<StepFeatures> steps(26);
  for (int t = 0; t < 26; ++t) {
    steps[static_cast<size_t>(t)].bg = 1000.0 + t;
    steps[static_cast<size_t>(t)].iob = 0.1 * t;
    steps[static_cast<size_t>(t)].dose = 0.01 * t;
  }

  // first admissible anchor is t = kWindow-1; targets need kHorizon more steps
  const auto one = extract_records(std::span(steps).subspan(0, 20), 1, "p1");
  REQUIRE(one.size() == 1);
  REQUIRE(one[0].source_id == "p1");
  REQUIRE(one[0].dose == doctest::Approx(0.09).epsilon(1e-12));
  for (int r = 0; r < kWindow; ++r) {
    REQUIRE(one[0].window.at(r, 0) == doctest::Approx(1000.0 + r).epsilon(1e-12));
    REQUIRE(one[0].window.at(r, 1) == doctest::Approx(0.1 * r).epsilon(1e-12));
  }
  for (int k = 0; k < kHorizon; ++k)
    REQUIRE(one[0].target[static_cast<size_t>(k)] ==
            doctest::Approx(1000.0 + kWindow + k).epsilon(1e-12));

  REQUIRE(extract_records(std::span(steps).subspan(0, 19), 1, "p").empty());

  const auto strided = extract_records(steps, 6, "p");
  REQUIRE(strided.size() == 2);  // anchors 9 and 15
  REQUIRE(strided[1].dose == doctest::Approx(0.15).epsilon(1e-12));

  REQUIRE_THROWS_AS(extract_records(steps, 0, "p"), ConfigFault);
}

TEST_CASE("standardizer uses population moments with floored spreads") {
  std::vector<TrainRecord> recs(2);
  for (int r = 0; r < kWindow; ++r) {
    recs[0].window.at(r, 0) = 100.0;
    recs[1].window.at(r, 0) = 120.0;
    recs[0].window.at(r, 1) = 5.0;  // constant feature
    recs[1].window.at(r, 1) = 5.0;
  }
  recs[0].dose = 1.0;
  recs[1].dose = 1.0;

  const Standardizer st = fit_standardizer(recs);
  REQUIRE(st.bg_mean() == doctest::Approx(110.0).epsilon(1e-12));
  REQUIRE(st.bg_sd() == doctest::Approx(10.0).epsilon(1e-12));
  REQUIRE(st.mean[1] == doctest::Approx(5.0).epsilon(1e-12));
  REQUIRE(st.sd[1] == doctest::Approx(1e-6).epsilon(1e-9));  // floor, not zero
  REQUIRE(st.dose_mean == doctest::Approx(1.0).epsilon(1e-12));
  REQUIRE(st.dose_sd == doctest::Approx(0.25).epsilon(1e-12));  // dose floor
  REQUIRE_THROWS_AS(fit_standardizer({}), ConfigFault);
}

TEST_CASE("prepare_records standardizes windows, dose, and targets") {
  Rng rng(3);
  const auto steps = synthetic_steps(40, rng);
  const auto recs = extract_records(steps, 5, "p");
  REQUIRE(recs.size() >= 2);
  const Standardizer st = fit_standardizer(recs);
  const auto prepared = prepare_records(st, recs);
  REQUIRE(prepared.size() == recs.size());
  for (size_t i = 0; i < recs.size(); ++i) {
    for (int r = 0; r < kWindow; ++r)
      for (int f = 0; f < kFeatures; ++f) {
        const double want = (recs[i].window.at(r, f) - st.mean[static_cast<size_t>(f)]) /
                            st.sd[static_cast<size_t>(f)];
        REQUIRE(prepared[i].rows[static_cast<size_t>(r)].v[static_cast<size_t>(f)] ==
                doctest::Approx(want).epsilon(1e-12));
      }
    REQUIRE(prepared[i].dose_std ==
            doctest::Approx((recs[i].dose - st.dose_mean) / st.dose_sd).epsilon(1e-12));
    for (int k = 0; k < kHorizon; ++k)
      REQUIRE(prepared[i].target_std[static_cast<size_t>(k)] ==
              doctest::Approx((recs[i].target[static_cast<size_t>(k)] - st.bg_mean()) /
                              st.bg_sd())
                  .epsilon(1e-12));
  }

  // a reading wildly outside the fitted distribution is rejected
  auto bad = recs;
  bad[0].window.at(0, 0) = 1e7;
  REQUIRE_THROWS_AS(prepare_records(st, bad), ConfigFault);
  bad = recs;
  bad[0].window.at(0, 2) = std::nan("");
  REQUIRE_THROWS_AS(prepare_records(st, bad), NumericalFault);
}

TEST_CASE("nll closed form") {
  Standardizer st;  // identity
  for (int f = 0; f < kFeatures; ++f) {
    st.mean[static_cast<size_t>(f)] = 0.0;
    st.sd[static_cast<size_t>(f)] = 1.0;
  }
  ForecastDist d;
  std::vector<double> target(kHorizon);
  for (int k = 0; k < kHorizon; ++k) {
    d.mu[static_cast<size_t>(k)] = 1.0 + k;
    d.var[static_cast<size_t>(k)] = std::exp(1.0);  // log var = 1
    target[static_cast<size_t>(k)] = 1.0 + k;       // zero residual
  }
  REQUIRE(nll(d, target, st) == doctest::Approx(0.5).epsilon(1e-12));

  // one unit of residual at unit variance adds 0.5/K
  target[0] += 1.0;
  d.var[0] = 1.0;
  const double expect = 0.5 * (9.0 * 1.0 + 0.0 + 1.0) / kHorizon;
  REQUIRE(nll(d, target, st) == doctest::Approx(expect).epsilon(1e-12));

  std::vector<double> short_target(kHorizon - 1);
  REQUIRE_THROWS_AS(nll(d, short_target, st), ConfigFault);
}

TEST_CASE("training loss gradients match finite differences") {
  ForecasterModel model = ForecasterModel::init(12);
  model.var_floor = 0.01;  // keep most variance heads off the clamp
  Rng rng(90);
  std::vector<PreparedRecord> recs;
  for (int i = 0; i < 3; ++i) recs.push_back(random_prepared(rng));
  const std::vector<int> idx = {0, 1, 2};

  const auto ps = model.params();
  std::size_t p_total = 0;
  for (auto* t : ps) p_total += static_cast<std::size_t>(t->size());
  std::vector<double> grad(p_total);
  accumulate_batch_gradients_serial(model, recs, idx, grad);

  std::vector<double> dummy(p_total);
  auto loss_at = [&] { return accumulate_batch_gradients_serial(model, recs, idx, dummy); };

  // a few coordinates of every parameter tensor
  const double eps = 1e-5;
  std::size_t off = 0;
  for (auto* tensor : ps) {
    for (int probe = 0; probe < 2; ++probe) {
      const int i = rng.uniform_int(0, tensor->size() - 1);
      const double saved = tensor->v[static_cast<size_t>(i)];
      tensor->v[static_cast<size_t>(i)] = saved + eps;
      const double up = loss_at();
      tensor->v[static_cast<size_t>(i)] = saved - eps;
      const double dn = loss_at();
      tensor->v[static_cast<size_t>(i)] = saved;
      const double fd = (up - dn) / (2.0 * eps);
      const double an = grad[off + static_cast<size_t>(i)];
      const double scale = std::max({std::abs(fd), std::abs(an), 1e-4});
      REQUIRE(std::abs(fd - an) / scale < 1e-4);
    }
    off += static_cast<std::size_t>(tensor->size());
  }
}

TEST_CASE("parallel batch gradients are bit-identical to serial") {
  ForecasterModel model = ForecasterModel::init(21);
  Rng rng(44);
  std::vector<PreparedRecord> recs;
  for (int i = 0; i < 8; ++i) recs.push_back(random_prepared(rng));
  std::vector<int> idx = {3, 0, 7, 1, 6, 2, 5, 4};

  std::size_t p_total = 0;
  for (auto* t : model.params()) p_total += static_cast<std::size_t>(t->size());
  std::vector<double> gs(p_total), gp(p_total);
  const double ls = accumulate_batch_gradients_serial(model, recs, idx, gs);
  const double lp = accumulate_batch_gradients_parallel(model, recs, idx, gp);
  REQUIRE(ls == lp);
  REQUIRE(std::memcmp(gs.data(), gp.data(), p_total * sizeof(double)) == 0);
}

TEST_CASE("public nll matches the training objective on a record") {
  Rng rng(8);
  const auto steps = synthetic_steps(60, rng);
  const auto recs = extract_records(steps, 7, "p");
  REQUIRE(!recs.empty());
  ForecasterModel model = ForecasterModel::init(5);
  model.stand = fit_standardizer(recs);
  const auto prepared = prepare_records(model.stand, recs);

  std::size_t p_total = 0;
  for (auto* t : model.params()) p_total += static_cast<std::size_t>(t->size());
  std::vector<double> dummy(p_total);
  const std::vector<int> first = {0};
  const double train_loss = accumulate_batch_gradients_serial(model, prepared, first, dummy);

  const ForecastDist d = model.predict(recs[0].window, recs[0].dose);
  REQUIRE(nll(d, recs[0].target, model.stand) == doctest::Approx(train_loss).epsilon(1e-9));
}

TEST_CASE("predict floors the variance and rejects non-finite outputs") {
  Rng rng(6);
  const auto steps = synthetic_steps(60, rng);
  const auto recs = extract_records(steps, 7, "p");
  ForecasterModel model = ForecasterModel::init(5);
  model.stand = fit_standardizer(recs);

  const ForecastDist d = model.predict(recs[0].window, recs[0].dose);
  for (int k = 0; k < kHorizon; ++k)
    REQUIRE(d.var[static_cast<size_t>(k)] >= model.var_floor - 1e-12);
  REQUIRE(d.dose == recs[0].dose);

  // identical inputs give identical outputs
  const ForecastDist d2 = model.predict(recs[0].window, recs[0].dose);
  REQUIRE(std::memcmp(d.mu.data(), d2.mu.data(), sizeof(d.mu)) == 0);
  REQUIRE(std::memcmp(d.var.data(), d2.var.data(), sizeof(d.var)) == 0);

  REQUIRE_THROWS_AS(model.predict(recs[0].window, -0.5), ConfigFault);

  ForecasterModel sick = model;
  sick.decoder.b.v[1] = 800.0;  // exp overflows the variance head
  REQUIRE_THROWS_AS(sick.predict(recs[0].window, 1.0), NumericalFault);
}

TEST_CASE("encode appends the standardized dose to the latent state") {
  Rng rng(6);
  const auto steps = synthetic_steps(60, rng);
  const auto recs = extract_records(steps, 7, "p");
  ForecasterModel model = ForecasterModel::init(5);
  model.stand = fit_standardizer(recs);
  const auto z0 = model.encode(recs[0].window, 2.0);
  REQUIRE(z0.rows == kLatent + 1);
  REQUIRE(z0.v[static_cast<size_t>(kLatent)] ==
          doctest::Approx((2.0 - model.stand.dose_mean) / model.stand.dose_sd).epsilon(1e-12));
}

TEST_CASE("checkpoints round-trip the model bit-exactly") {
  Rng rng(14);
  const auto steps = synthetic_steps(60, rng);
  const auto recs = extract_records(steps, 7, "p");
  ForecasterModel model = ForecasterModel::init(33);
  model.stand = fit_standardizer(recs);
  model.var_floor = 2.5;

  const auto path = (std::filesystem::temp_directory_path() / "tsode_fc_test.ckpt").string();
  model.save(path);
  ForecasterModel back = ForecasterModel::load(path);

  auto pa = model.params();
  auto pb = back.params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) REQUIRE(tensors_bitwise_equal(*pa[i], *pb[i]));
  REQUIRE(back.var_floor == model.var_floor);
  for (int f = 0; f < kFeatures; ++f) {
    REQUIRE(back.stand.mean[static_cast<size_t>(f)] == model.stand.mean[static_cast<size_t>(f)]);
    REQUIRE(back.stand.sd[static_cast<size_t>(f)] == model.stand.sd[static_cast<size_t>(f)]);
  }
  REQUIRE(back.stand.dose_mean == model.stand.dose_mean);
  REQUIRE(back.stand.dose_sd == model.stand.dose_sd);

  const ForecastDist da = model.predict(recs[0].window, 1.0);
  const ForecastDist db = back.predict(recs[0].window, 1.0);
  REQUIRE(std::memcmp(da.mu.data(), db.mu.data(), sizeof(da.mu)) == 0);

  // a checkpoint missing tensors is rejected
  diffkit::save_checkpoint(path, {{"gru.wz", diffkit::Tensor(2, 2)}});
  REQUIRE_THROWS_AS(ForecasterModel::load(path), ConfigFault);
  std::remove(path.c_str());
}

TEST_CASE("training is deterministic, thread-independent, and converges") {
  Rng rng(55);
  const auto steps = synthetic_steps(220, rng);
  const auto recs = extract_records(steps, 3, "p");
  REQUIRE(recs.size() >= 50);

  TrainOptions opt;
  opt.epochs = 10;
  opt.batch = 16;
  opt.lr = 1e-3;
  opt.seed = 99;
  opt.threads = 1;

  ForecasterModel a = ForecasterModel::init(7);
  const TrainResult ra = train(a, recs, opt);
  REQUIRE(ra.epoch_loss.size() == 10);
  REQUIRE(ra.epoch_loss.back() < ra.epoch_loss.front());
  for (double l : ra.epoch_loss) REQUIRE(std::isfinite(l));

  ForecasterModel b = ForecasterModel::init(7);
  const TrainResult rb = train(b, recs, opt);
  REQUIRE(ra.epoch_loss == rb.epoch_loss);

  TrainOptions par = opt;
  par.threads = 2;
  ForecasterModel c = ForecasterModel::init(7);
  const TrainResult rc = train(c, recs, par);
  REQUIRE(ra.epoch_loss == rc.epoch_loss);

  auto pa = a.params();
  auto pb = b.params();
  auto pc = c.params();
  for (size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(tensors_bitwise_equal(*pa[i], *pb[i]));
    REQUIRE(tensors_bitwise_equal(*pa[i], *pc[i]));
  }

  REQUIRE_THROWS_AS(train(a, {}, opt), ConfigFault);
  TrainOptions bad = opt;
  bad.epochs = 0;
  REQUIRE_THROWS_AS(train(a, recs, bad), ConfigFault);
}
