#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <vector>

#include "tsode/faults.hpp"
#include "tsode/rng.hpp"
#include "tsode/tspolicy.hpp"

using namespace tsode;
using namespace tsode::tspolicy;

TEST_CASE("risk index hits precomputed values") {
  REQUIRE(kovatchev_risk(50.0) == doctest::Approx(22.50044545257435).epsilon(1e-12));
  REQUIRE(kovatchev_risk(300.0) == doctest::Approx(33.95198752406567).epsilon(1e-12));
  // the zero of the index
  REQUIRE(kovatchev_risk(112.51738459804369) < 1e-20);
  REQUIRE(kovatchev_risk(100.0) == doctest::Approx(0.4820511254088502).epsilon(1e-12));
}

TEST_CASE("risk splits into low and high components") {
  REQUIRE(lbgi_of(50.0) == doctest::Approx(kovatchev_risk(50.0)).epsilon(1e-12));
  REQUIRE(hbgi_of(50.0) == 0.0);
  REQUIRE(hbgi_of(300.0) == doctest::Approx(kovatchev_risk(300.0)).epsilon(1e-12));
  REQUIRE(lbgi_of(300.0) == 0.0);
  for (double g = 45.0; g <= 380.0; g += 7.3)
    REQUIRE(lbgi_of(g) + hbgi_of(g) == doctest::Approx(kovatchev_risk(g)).epsilon(1e-12));
  // steeper on the hypo side: equal offsets from the zero cost more below it
  REQUIRE(kovatchev_risk(72.5) > kovatchev_risk(152.5));
  REQUIRE_THROWS_AS(kovatchev_risk(0.0), ConfigFault);
  REQUIRE_THROWS_AS(kovatchev_risk(-5.0), ConfigFault);
}

TEST_CASE("shaped reward applies hypo penalties on the window minimum") {
  const double w1[] = {100.0, 65.0, 120.0};
  REQUIRE(shaped_reward(w1) == doctest::Approx(-13.659208517050738).epsilon(1e-12));

  const double w2[] = {100.0, 120.0};
  const double expect2 = -(kovatchev_risk(100.0) + kovatchev_risk(120.0)) / 2.0;
  REQUIRE(shaped_reward(w2) == doctest::Approx(expect2).epsilon(1e-12));

  // below 54 stacks both penalties
  const double w3[] = {100.0, 53.0};
  const double base3 = -(kovatchev_risk(100.0) + kovatchev_risk(53.0)) / 2.0;
  REQUIRE(shaped_reward(w3) == doctest::Approx(base3 - 30.0).epsilon(1e-12));

  REQUIRE_THROWS_AS(shaped_reward({}), ConfigFault);
  const double bad[] = {100.0, std::nan("")};
  REQUIRE_THROWS_AS(shaped_reward(bad), NumericalFault);
}

TEST_CASE("discretize maps every finite reading to a valid state") {
  BinSpec bins;
  bins.validate();
  REQUIRE(bins.bg_bins() == 13);
  REQUIRE(bins.trend_bins() == 7);
  REQUIRE(bins.state_count() == 91);

  for (double bg = 1.0; bg <= 500.0; bg += 3.7)
    for (double tr = -10.0; tr <= 10.0; tr += 0.9) {
      const int s = discretize(bg, tr, bins);
      REQUIRE(s >= 0);
      REQUIRE(s < 91);
    }
}

TEST_CASE("discretize bin arithmetic and edge clamping") {
  BinSpec bins;
  // bg-major index: bg_bin * 7 + trend_bin; trend 0 sits in the center bin 3
  REQUIRE(discretize(100.0, 0.0, bins) == 3 * 7 + 3);
  REQUIRE(discretize(40.0, 0.0, bins) == 3);
  REQUIRE(discretize(59.9, 0.0, bins) == 3);
  REQUIRE(discretize(60.0, 0.0, bins) == 7 + 3);
  REQUIRE(discretize(299.9, 0.0, bins) == 12 * 7 + 3);
  // out-of-range readings clamp into the edge bins
  REQUIRE(discretize(20.0, 0.0, bins) == 3);
  REQUIRE(discretize(420.0, 0.0, bins) == 12 * 7 + 3);
  // trend edges are lower-inclusive
  REQUIRE(discretize(100.0, -3.0, bins) == 3 * 7 + 0);
  REQUIRE(discretize(100.0, -2.0, bins) == 3 * 7 + 1);
  REQUIRE(discretize(100.0, -0.3, bins) == 3 * 7 + 3);
  REQUIRE(discretize(100.0, 0.3, bins) == 3 * 7 + 4);
  REQUIRE(discretize(100.0, 2.0, bins) == 3 * 7 + 6);
  REQUIRE(discretize(100.0, 9.0, bins) == 3 * 7 + 6);
  REQUIRE_THROWS_AS(discretize(std::nan(""), 0.0, bins), ConfigFault);

  BinSpec bad = bins;
  bad.bg_width = 0.0;
  REQUIRE_THROWS_AS(bad.validate(), ConfigFault);
  bad = bins;
  bad.bg_high = 301.0;  // not a multiple of the width
  REQUIRE_THROWS_AS(bad.validate(), ConfigFault);
  bad = bins;
  bad.trend_edges = {1.0, -1.0};
  REQUIRE_THROWS_AS(bad.validate(), ConfigFault);
  bad = bins;
  bad.trend_edges.clear();
  REQUIRE_THROWS_AS(bad.validate(), ConfigFault);
}

TEST_CASE("trend is the central difference over the last three readings") {
  const double w[] = {100.0, 106.0, 112.0};
  REQUIRE(trend_of(w, 3.0) == doctest::Approx(2.0).epsilon(1e-12));
  const double longer[] = {50.0, 100.0, 106.0, 112.0};  // only the tail counts
  REQUIRE(trend_of(longer, 3.0) == doctest::Approx(2.0).epsilon(1e-12));
  const double two[] = {100.0, 120.0};
  REQUIRE(trend_of(two, 3.0) == 0.0);
  REQUIRE(trend_of({}, 3.0) == 0.0);
  REQUIRE_THROWS_AS(trend_of(w, 0.0), ConfigFault);
}

TEST_CASE("action grid indexing") {
  const ActionGrid g = ActionGrid::insulin_default();
  g.validate();
  REQUIRE(g.size() == 16);
  REQUIRE(g.doses.front() == 0.0);
  REQUIRE(g.doses.back() == doctest::Approx(3.0).epsilon(1e-12));

  REQUIRE(g.floor_index(-0.1) == -1);
  REQUIRE(g.floor_index(0.0) == 0);
  REQUIRE(g.floor_index(0.39) == 1);
  REQUIRE(g.floor_index(0.4 - 1e-10) == 2);  // tolerance absorbs representation error
  REQUIRE(g.floor_index(99.0) == 15);

  REQUIRE(g.nearest_index(1.47) == 7);
  REQUIRE(g.nearest_index(1.5) == 7);  // exact midpoint takes the lower dose
  REQUIRE(g.nearest_index(1.53) == 8);
  REQUIRE(g.nearest_index(-4.0) == 0);
  REQUIRE(g.nearest_index(11.0) == 15);

  ActionGrid bad;
  REQUIRE_THROWS_AS(bad.validate(), ConfigFault);
  bad.doses = {0.0, 0.2, 0.2};
  REQUIRE_THROWS_AS(bad.validate(), ConfigFault);
  bad.doses = {-0.2, 0.0};
  REQUIRE_THROWS_AS(bad.validate(), ConfigFault);
}

TEST_CASE("welford statistics match a two-pass computation") {
  PolicyTable t(1, 1);
  Rng rng(77);
  std::vector<double> xs;
  for (int i = 0; i < 1000; ++i) {
    const double x = rng.normal(-4.0, 2.5) + 0.3 * i / 1000.0;
    xs.push_back(x);
    t.update(0, 0, x);
  }
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double m2 = 0.0;
  for (double x : xs) m2 += (x - mean) * (x - mean);
  const double var = m2 / static_cast<double>(xs.size() - 1);

  REQUIRE(t.count(0, 0) == 1000);
  REQUIRE(t.mean(0, 0) == doctest::Approx(mean).epsilon(1e-9));
  REQUIRE(t.variance(0, 0) == doctest::Approx(var).epsilon(1e-9));
}

TEST_CASE("variance of arms with fewer than two pulls is the prior") {
  PolicyTable t(2, 2);
  REQUIRE(t.variance(0, 0) == 1.0);
  t.update(0, 0, -5.0);
  REQUIRE(t.variance(0, 0) == 1.0);
  REQUIRE(t.mean(0, 0) == -5.0);
  t.update(0, 0, -7.0);
  REQUIRE(t.variance(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("merge pools sufficient statistics exactly") {
  Rng rng(31);
  PolicyTable a(3, 4), b(3, 4), whole(3, 4);
  for (int i = 0; i < 400; ++i) {
    const int s = rng.uniform_int(0, 2);
    const int arm = rng.uniform_int(0, 3);
    const double r = rng.normal(-2.0, 1.3);
    (i % 2 == 0 ? a : b).update(s, arm, r);
    whole.update(s, arm, r);
  }
  const PolicyTable* parts[] = {&a, &b};
  const PolicyTable m = PolicyTable::merge(parts);
  for (int s = 0; s < 3; ++s)
    for (int arm = 0; arm < 4; ++arm) {
      REQUIRE(m.count(s, arm) == whole.count(s, arm));
      REQUIRE(m.mean(s, arm) == doctest::Approx(whole.mean(s, arm)).epsilon(1e-10));
      REQUIRE(m.variance(s, arm) == doctest::Approx(whole.variance(s, arm)).epsilon(1e-9));
    }

  PolicyTable other(2, 4);
  const PolicyTable* bad[] = {&a, &other};
  REQUIRE_THROWS_AS(PolicyTable::merge(bad), ConfigFault);
  REQUIRE_THROWS_AS(PolicyTable::merge({}), ConfigFault);
}

TEST_CASE("policy table round-trips through csv") {
  PolicyTable t(5, 3);
  Rng rng(19);
  for (int i = 0; i < 120; ++i)
    t.update(rng.uniform_int(0, 4), rng.uniform_int(0, 2), rng.normal(-3.0, 2.0));
  t.update(4, 2, -1.25);  // make sure an n == 1 cell is present

  const auto path = (std::filesystem::temp_directory_path() / "tsode_policy_test.csv").string();
  t.to_csv(path);
  const PolicyTable back = PolicyTable::from_csv(path, 5, 3);
  for (int s = 0; s < 5; ++s)
    for (int a = 0; a < 3; ++a) {
      REQUIRE(back.count(s, a) == t.count(s, a));
      REQUIRE(back.mean(s, a) == doctest::Approx(t.mean(s, a)).epsilon(1e-12));
      REQUIRE(back.variance(s, a) == doctest::Approx(t.variance(s, a)).epsilon(1e-9));
    }
  REQUIRE_THROWS_AS(PolicyTable::from_csv(path, 2, 3), ConfigFault);  // cells out of range
  std::remove(path.c_str());
}

TEST_CASE("greedy selection follows empirical means with spec tie rules") {
  Rng rng(1);
  PolicyTable t(1, 3);
  for (int rep = 0; rep < 2; ++rep) {
    t.update(0, 0, 1.0);
    t.update(0, 1, 3.0);
    t.update(0, 2, 2.0);
  }
  REQUIRE(select(t, 0, rng, SelectMode::kGreedy) == 1);

  // unvisited arms compete with mean zero, so with all-negative rewards the
  // lowest unvisited arm wins
  PolicyTable u(1, 16);
  for (int a = 0; a < 4; ++a)
    for (int rep = 0; rep < 3; ++rep) u.update(0, a, -1.0 - a);
  REQUIRE(select(u, 0, rng, SelectMode::kGreedy) == 4);

  // exact mean ties break toward the lower dose
  PolicyTable tie(1, 8);
  for (int rep = 0; rep < 2; ++rep) {
    tie.update(0, 2, 1.0);
    tie.update(0, 5, 1.0);
  }
  REQUIRE(select(tie, 0, rng, SelectMode::kGreedy) == 2);

  REQUIRE_THROWS_AS(select(t, 5, rng, SelectMode::kGreedy), UsageFault);
}

TEST_CASE("explore draws single-pull arms from the standard normal prior") {
  // an arm with one pull must behave exactly like an unvisited arm, so two
  // tables differing only in such an arm give identical selection streams
  PolicyTable a(1, 6), b(1, 6);
  a.update(0, 2, -100.0);
  for (std::uint64_t seed = 10; seed < 30; ++seed) {
    Rng ra(seed), rb(seed);
    REQUIRE(select(a, 0, ra, SelectMode::kExplore) == select(b, 0, rb, SelectMode::kExplore));
  }
}

TEST_CASE("explore is deterministic in the rng seed and touches every arm") {
  PolicyTable t(1, 16);
  Rng r1(42), r2(42);
  for (int i = 0; i < 50; ++i)
    REQUIRE(select(t, 0, r1, SelectMode::kExplore) == select(t, 0, r2, SelectMode::kExplore));

  Rng r3(43);
  std::vector<int> hits(16, 0);
  for (int i = 0; i < 4000; ++i) hits[static_cast<size_t>(select(t, 0, r3, SelectMode::kExplore))]++;
  for (int a = 0; a < 16; ++a) REQUIRE(hits[static_cast<size_t>(a)] > 0);
}

TEST_CASE("thompson sampling concentrates on the best arm") {
  // stationary 16-arm bandit, well separated means, noisy rewards
  Rng env(7);
  Rng sel(8);
  PolicyTable t(1, 16);
  const int best = 7;
  auto true_mean = [&](int a) { return -0.5 * std::abs(a - best); };
  int late_best = 0, late_total = 0;
  for (int round = 0; round < 5000; ++round) {
    const int a = select(t, 0, sel, SelectMode::kExplore);
    t.update(0, a, true_mean(a) + env.normal(0.0, 0.2));
    if (round >= 4000) {
      ++late_total;
      if (a == best) ++late_best;
    }
  }
  REQUIRE(select(t, 0, sel, SelectMode::kGreedy) == best);
  REQUIRE(static_cast<double>(late_best) / late_total >= 0.95);
}

TEST_CASE("policy table rejects bad construction and updates") {
  REQUIRE_THROWS_AS(PolicyTable(0, 4), ConfigFault);
  REQUIRE_THROWS_AS(PolicyTable(4, 0), ConfigFault);
  PolicyTable t(2, 2);
  REQUIRE_THROWS_AS(t.update(2, 0, 1.0), UsageFault);
  REQUIRE_THROWS_AS(t.update(0, -1, 1.0), UsageFault);
  REQUIRE_THROWS_AS(t.update(0, 0, std::nan("")), NumericalFault);
}
