#include "tsode/tspolicy.hpp"

#include <algorithm>
#include <cmath>

#include "tsode/csvio.hpp"
#include "tsode/faults.hpp"

namespace tsode::tspolicy {

void BinSpec::validate() const {
  if (!(bg_low < bg_high) || !(bg_width > 0)) throw ConfigFault("bad bg bin range");
  const double nb = (bg_high - bg_low) / bg_width;
  if (std::abs(nb - std::round(nb)) > 1e-9) throw ConfigFault("bg range not a multiple of width");
  if (trend_edges.empty()) throw ConfigFault("trend_edges must be non-empty");
  if (!std::is_sorted(trend_edges.begin(), trend_edges.end()))
    throw ConfigFault("trend_edges must be ascending");
}

int discretize(double bg, double trend, const BinSpec& bins) {
  if (!std::isfinite(bg) || !std::isfinite(trend))
    throw ConfigFault("discretize requires finite inputs");
  int bg_bin = static_cast<int>(std::floor((bg - bins.bg_low) / bins.bg_width));
  bg_bin = std::clamp(bg_bin, 0, bins.bg_bins() - 1);
  int trend_bin = 0;
  while (trend_bin < static_cast<int>(bins.trend_edges.size()) &&
         trend >= bins.trend_edges[static_cast<size_t>(trend_bin)])
    ++trend_bin;
  return bg_bin * bins.trend_bins() + trend_bin;
}

double trend_of(std::span<const double> recent_bg, double dt_min) {
  if (!(dt_min > 0)) throw ConfigFault("dt_min must be > 0");
  const size_t n = recent_bg.size();
  if (n < 3) return 0.0;
  return (recent_bg[n - 1] - recent_bg[n - 3]) / (2.0 * dt_min);
}

ActionGrid ActionGrid::insulin_default() {
  ActionGrid g;
  for (int i = 0; i <= 15; ++i) g.doses.push_back(i * 0.2);
  return g;
}

void ActionGrid::validate() const {
  if (doses.empty()) throw ConfigFault("action grid must be non-empty");
  if (doses.front() < 0) throw ConfigFault("doses must be nonnegative");
  for (size_t i = 1; i < doses.size(); ++i)
    if (!(doses[i] > doses[i - 1])) throw ConfigFault("doses must be strictly ascending");
}

int ActionGrid::floor_index(double u) const {
  int idx = -1;
  for (int i = 0; i < size(); ++i)
    if (doses[static_cast<size_t>(i)] <= u + 1e-9) idx = i;
  return idx;
}

int ActionGrid::nearest_index(double u) const {
  int best = 0;
  double best_dist = std::abs(u - doses[0]);
  for (int i = 1; i < size(); ++i) {
    const double d = std::abs(u - doses[static_cast<size_t>(i)]);
    if (d < best_dist) {
      best_dist = d;
      best = i;
    }
  }
  return best;
}

PolicyTable::PolicyTable(int n_states, int n_actions)
    : n_states_(n_states), n_actions_(n_actions) {
  if (n_states < 1 || n_actions < 1) throw ConfigFault("policy table dims must be >= 1");
  cells_.resize(static_cast<size_t>(n_states) * n_actions);
}

const PolicyTable::Cell& PolicyTable::cell(int s, int a) const {
  if (s < 0 || s >= n_states_ || a < 0 || a >= n_actions_)
    throw UsageFault("policy table index out of range");
  return cells_[static_cast<size_t>(s) * n_actions_ + a];
}

PolicyTable::Cell& PolicyTable::cell(int s, int a) {
  return const_cast<Cell&>(static_cast<const PolicyTable*>(this)->cell(s, a));
}

void PolicyTable::update(int state, int action, double reward) {
  if (!std::isfinite(reward)) throw NumericalFault("policy update with non-finite reward");
  Cell& c = cell(state, action);
  c.n += 1;
  const double delta = reward - c.mean;
  c.mean += delta / static_cast<double>(c.n);
  c.m2 += delta * (reward - c.mean);
}

long PolicyTable::count(int state, int action) const { return cell(state, action).n; }

double PolicyTable::mean(int state, int action) const { return cell(state, action).mean; }

double PolicyTable::variance(int state, int action) const {
  const Cell& c = cell(state, action);
  if (c.n < 2) return 1.0;
  return c.m2 / static_cast<double>(c.n - 1);
}

PolicyTable PolicyTable::merge(std::span<const PolicyTable* const> tables) {
  if (tables.empty()) throw ConfigFault("merge needs at least one table");
  const int ns = tables[0]->n_states(), na = tables[0]->n_actions();
  for (const auto* t : tables)
    if (t->n_states() != ns || t->n_actions() != na)
      throw ConfigFault("merge with mismatched table shapes");
  PolicyTable out(ns, na);
  for (size_t i = 0; i < out.cells_.size(); ++i) {
    Cell acc;
    for (const auto* t : tables) {
      const Cell& c = t->cells_[i];
      if (c.n == 0) continue;
      if (acc.n == 0) {
        acc = c;
        continue;
      }
      const long n = acc.n + c.n;
      const double delta = c.mean - acc.mean;
      acc.mean += delta * static_cast<double>(c.n) / static_cast<double>(n);
      acc.m2 += c.m2 + delta * delta * static_cast<double>(acc.n) *
                           static_cast<double>(c.n) / static_cast<double>(n);
      acc.n = n;
    }
    out.cells_[i] = acc;
  }
  return out;
}

void PolicyTable::to_csv(const std::string& path) const {
  csvio::Table t;
  t.header = {"state", "action", "n", "mean", "variance"};
  for (int s = 0; s < n_states_; ++s)
    for (int a = 0; a < n_actions_; ++a) {
      const Cell& c = cell(s, a);
      if (c.n == 0) continue;
      const double var = c.n >= 2 ? c.m2 / static_cast<double>(c.n - 1) : 0.0;
      t.rows.push_back({csvio::fmt(s), csvio::fmt(a), csvio::fmt(c.n), csvio::fmt(c.mean),
                        csvio::fmt(var)});
    }
  csvio::write_csv(path, t);
}

PolicyTable PolicyTable::from_csv(const std::string& path, int n_states, int n_actions) {
  const csvio::Table t = csvio::read_csv(path);
  const int cs = t.col("state"), ca = t.col("action"), cn = t.col("n"), cm = t.col("mean"),
            cv = t.col("variance");
  if (cs < 0 || ca < 0 || cn < 0 || cm < 0 || cv < 0)
    throw ConfigFault("policy csv missing required columns: " + path);
  PolicyTable out(n_states, n_actions);
  for (const auto& row : t.rows) {
    const int s = std::stoi(row[static_cast<size_t>(cs)]);
    const int a = std::stoi(row[static_cast<size_t>(ca)]);
    if (s < 0 || s >= n_states || a < 0 || a >= n_actions)
      throw ConfigFault("policy csv cell out of range: " + path);
    Cell& c = out.cell(s, a);
    c.n = std::stol(row[static_cast<size_t>(cn)]);
    c.mean = std::stod(row[static_cast<size_t>(cm)]);
    const double var = std::stod(row[static_cast<size_t>(cv)]);
    c.m2 = c.n >= 2 ? var * static_cast<double>(c.n - 1) : 0.0;
  }
  return out;
}

int select(const PolicyTable& table, int state, Rng& rng, SelectMode mode) {
  if (state < 0 || state >= table.n_states()) throw UsageFault("select: state out of range");
  int best = 0;
  double best_score = -1e300;
  for (int a = 0; a < table.n_actions(); ++a) {
    double score;
    if (mode == SelectMode::kExplore) {
      const PolicyTable::Cell& c = table.cell(state, a);
      if (c.n < 2) {
        score = rng.normal();
      } else {
        const double var = c.m2 / static_cast<double>(c.n - 1);
        score = rng.normal(c.mean, std::sqrt(var / static_cast<double>(c.n)));
      }
    } else {
      score = table.mean(state, a);
    }
    if (score > best_score) {
      best_score = score;
      best = a;
    }
  }
  return best;
}

double kovatchev_risk(double g) {
  if (!(g > 0) || !std::isfinite(g)) throw ConfigFault("risk requires g > 0");
  const double f = 1.509 * (std::pow(std::log(g), 1.084) - 5.381);
  return 10.0 * f * f;
}

double lbgi_of(double g) {
  if (!(g > 0) || !std::isfinite(g)) throw ConfigFault("risk requires g > 0");
  const double f = 1.509 * (std::pow(std::log(g), 1.084) - 5.381);
  return f < 0 ? 10.0 * f * f : 0.0;
}

double hbgi_of(double g) {
  if (!(g > 0) || !std::isfinite(g)) throw ConfigFault("risk requires g > 0");
  const double f = 1.509 * (std::pow(std::log(g), 1.084) - 5.381);
  return f > 0 ? 10.0 * f * f : 0.0;
}

double shaped_reward(std::span<const double> bg_window) {
  if (bg_window.empty()) throw ConfigFault("shaped_reward needs a non-empty window");
  double risk_sum = 0.0;
  double lo = bg_window[0];
  for (double g : bg_window) {
    if (!std::isfinite(g)) throw NumericalFault("shaped_reward: non-finite reading");
    risk_sum += kovatchev_risk(g);
    lo = std::min(lo, g);
  }
  double r = -risk_sum / static_cast<double>(bg_window.size());
  if (lo < 70.0) r -= 10.0;
  if (lo < 54.0) r -= 20.0;
  return r;
}

}  // namespace tsode::tspolicy
