#pragma once
#include <span>
#include <string>
#include <vector>

#include "tsode/rng.hpp"

namespace tsode::tspolicy {

// 13 BG bins of width 20 over [40, 300) crossed with 7 trend bins. Readings
// outside the range clamp into the edge bins, so every finite (bg, trend)
// maps to a state.
struct BinSpec {
  double bg_low = 40.0;
  double bg_high = 300.0;
  double bg_width = 20.0;
  std::vector<double> trend_edges = {-2.0, -1.0, -0.3, 0.3, 1.0, 2.0};  // mg/dL per min

  int bg_bins() const { return static_cast<int>((bg_high - bg_low) / bg_width); }
  int trend_bins() const { return static_cast<int>(trend_edges.size()) + 1; }
  int state_count() const { return bg_bins() * trend_bins(); }
  void validate() const;
};

// State index is bg-major: bg_bin * trend_bins + trend_bin.
int discretize(double bg, double trend, const BinSpec& bins);

// Central difference over the last three readings: (bg[t] - bg[t-2]) / (2 dt).
// Fewer than three readings -> 0.
double trend_of(std::span<const double> recent_bg, double dt_min);

struct ActionGrid {
  std::vector<double> doses;  // ascending, nonnegative
  static ActionGrid insulin_default();  // 0.0 to 3.0 U in 0.2 U increments
  int size() const { return static_cast<int>(doses.size()); }
  // Largest index whose dose is <= u (within 1e-9); -1 when u < doses[0].
  int floor_index(double u) const;
  // Index of the grid dose closest to u; exact midpoints take the lower one.
  int nearest_index(double u) const;
  void validate() const;
};

enum class SelectMode { kExplore, kGreedy };

// Per-(state, action) reward statistics, updated online (Welford). Arms with
// fewer than two pulls are treated as draws from the standard normal prior
// during exploration.
class PolicyTable {
 public:
  PolicyTable(int n_states, int n_actions);

  void update(int state, int action, double reward);
  long count(int state, int action) const;
  double mean(int state, int action) const;
  // Sample variance for n >= 2; the prior variance 1.0 otherwise.
  double variance(int state, int action) const;

  int n_states() const { return n_states_; }
  int n_actions() const { return n_actions_; }

  // Pools the sufficient statistics of several tables of identical shape.
  static PolicyTable merge(std::span<const PolicyTable* const> tables);

  void to_csv(const std::string& path) const;
  static PolicyTable from_csv(const std::string& path, int n_states, int n_actions);

 private:
  friend int select(const PolicyTable&, int, Rng&, SelectMode);
  struct Cell {
    long n = 0;
    double mean = 0.0;
    double m2 = 0.0;
  };
  const Cell& cell(int s, int a) const;
  Cell& cell(int s, int a);
  int n_states_;
  int n_actions_;
  std::vector<Cell> cells_;
};

// Thompson sampling in explore mode (one posterior draw per arm, argmax);
// empirical-mean argmax in greedy mode. Ties break toward the lower index,
// i.e. the lower dose.
int select(const PolicyTable& table, int state, Rng& rng, SelectMode mode);

// Quadratic risk of a single glucose reading; zero near 112.5 mg/dL, rising
// toward both tails, steeper on the hypo side.
double kovatchev_risk(double g);
double lbgi_of(double g);  // low-side component of the risk
double hbgi_of(double g);  // high-side component

// Mean negated risk over the coming window plus penalty -10 if any reading
// dips below 70 and a further -20 below 54.
double shaped_reward(std::span<const double> bg_window);

}  // namespace tsode::tspolicy
