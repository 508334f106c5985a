#include "tsode/vpatient.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "tsode/faults.hpp"

namespace tsode::vpatient {

namespace {

constexpr double kLn2 = 0.6931471805599453;
constexpr double kTwoPi = 6.283185307179586476925286766559;
constexpr double kDiurnalPeakMin = 360.0;  // 06:00

struct Derivs {
  double g, i1, i2, q1, q2;
};

Derivs rhs(const PatientState& s, const PatientParams& p, double basal_u_per_hr) {
  const double ki = kLn2 / p.insulin_absorption_halftime;
  const double kc = kLn2 / p.carb_absorption_halftime;
  const double egp =
      p.endogenous_production *
      (1.0 + p.diurnal_amplitude * std::cos(kTwoPi * (s.clock - kDiurnalPeakMin) / 1440.0));
  Derivs d;
  d.i1 = basal_u_per_hr / 60.0 - ki * s.insulin_sc1;
  d.i2 = ki * (s.insulin_sc1 - s.insulin_sc2);
  d.q1 = -kc * s.gut_carbs1;
  d.q2 = kc * (s.gut_carbs1 - s.gut_carbs2);
  d.g = egp - p.glucose_clearance_rate * s.plasma_glucose -
        p.insulin_sensitivity * ki * s.insulin_sc2 + p.carb_sensitivity * kc * s.gut_carbs2;
  return d;
}

PatientState advanced(const PatientState& s, const Derivs& d, double h) {
  PatientState r = s;
  r.plasma_glucose += h * d.g;
  r.insulin_sc1 += h * d.i1;
  r.insulin_sc2 += h * d.i2;
  r.gut_carbs1 += h * d.q1;
  r.gut_carbs2 += h * d.q2;
  r.clock += h;
  return r;
}

bool all_finite(const PatientState& s) {
  return std::isfinite(s.plasma_glucose) && std::isfinite(s.insulin_sc1) &&
         std::isfinite(s.insulin_sc2) && std::isfinite(s.gut_carbs1) &&
         std::isfinite(s.gut_carbs2);
}

}  // namespace

void PatientParams::validate() const {
  if (!(insulin_sensitivity > 0)) throw ConfigFault("insulin_sensitivity must be > 0");
  if (!(carb_sensitivity > 0)) throw ConfigFault("carb_sensitivity must be > 0");
  if (!(glucose_clearance_rate > 0)) throw ConfigFault("glucose_clearance_rate must be > 0");
  if (!(insulin_absorption_halftime > 0)) throw ConfigFault("insulin_absorption_halftime must be > 0");
  if (!(carb_absorption_halftime > 0)) throw ConfigFault("carb_absorption_halftime must be > 0");
  if (!(basal_rate >= 0)) throw ConfigFault("basal_rate must be >= 0");
  if (!(icr > 0)) throw ConfigFault("icr must be > 0");
  if (!(initial_bg >= 40 && initial_bg <= 400)) throw ConfigFault("initial_bg must be in [40, 400]");
  if (!std::isfinite(endogenous_production) || endogenous_production < 0)
    throw ConfigFault("endogenous_production must be finite and >= 0");
  if (!(diurnal_amplitude >= 0 && diurnal_amplitude < 1))
    throw ConfigFault("diurnal_amplitude must be in [0, 1)");
}

void PatientParams::solve_endogenous_production() {
  // At rest: clearance of initial_bg plus basal insulin action, no carbs.
  endogenous_production =
      glucose_clearance_rate * initial_bg + insulin_sensitivity * basal_rate / 60.0;
}

PatientState equilibrium_from(const PatientParams& p) {
  const double ki = kLn2 / p.insulin_absorption_halftime;
  PatientState s;
  s.plasma_glucose = p.initial_bg;
  s.insulin_sc1 = (p.basal_rate / 60.0) / ki;
  s.insulin_sc2 = s.insulin_sc1;
  s.gut_carbs1 = 0.0;
  s.gut_carbs2 = 0.0;
  s.clock = 0.0;
  return s;
}

bool meal_due(const MealEvent& m, double clock, double dt_min) {
  const double offset = std::fmod(m.time_of_day, 1440.0);
  const double t_in_day = std::fmod(clock, 1440.0);
  double delta = offset - t_in_day;
  if (delta <= 0.0) delta += 1440.0;
  return delta <= dt_min;
}

PatientState step(const PatientState& s, const PatientParams& p, double bolus_u,
                  double basal_u_per_hr, const std::vector<MealEvent>& meals,
                  double dt_min) {
  if (!(dt_min > 0)) throw ConfigFault("dt_min must be > 0");
  if (!(bolus_u >= 0) || !std::isfinite(bolus_u)) throw ConfigFault("bolus_u must be finite and >= 0");
  if (!(basal_u_per_hr >= 0)) throw ConfigFault("basal_u_per_hr must be >= 0");

  PatientState cur = s;
  cur.insulin_sc1 += bolus_u;
  for (const auto& m : meals)
    if (meal_due(m, s.clock, dt_min)) cur.gut_carbs1 += m.carbs;

  const int n_sub = static_cast<int>(std::ceil(dt_min));
  const double h = dt_min / n_sub;
  for (int i = 0; i < n_sub; ++i) {
    const Derivs k1 = rhs(cur, p, basal_u_per_hr);
    const Derivs k2 = rhs(advanced(cur, k1, h / 2), p, basal_u_per_hr);
    const Derivs k3 = rhs(advanced(cur, k2, h / 2), p, basal_u_per_hr);
    const Derivs k4 = rhs(advanced(cur, k3, h), p, basal_u_per_hr);
    PatientState nxt = cur;
    nxt.plasma_glucose += h / 6.0 * (k1.g + 2 * k2.g + 2 * k3.g + k4.g);
    nxt.insulin_sc1 += h / 6.0 * (k1.i1 + 2 * k2.i1 + 2 * k3.i1 + k4.i1);
    nxt.insulin_sc2 += h / 6.0 * (k1.i2 + 2 * k2.i2 + 2 * k3.i2 + k4.i2);
    nxt.gut_carbs1 += h / 6.0 * (k1.q1 + 2 * k2.q1 + 2 * k3.q1 + k4.q1);
    nxt.gut_carbs2 += h / 6.0 * (k1.q2 + 2 * k2.q2 + 2 * k3.q2 + k4.q2);
    nxt.clock = cur.clock + h;
    if (!all_finite(nxt)) throw NumericalFault("patient state non-finite during step");
    nxt.insulin_sc1 = std::max(0.0, nxt.insulin_sc1);
    nxt.insulin_sc2 = std::max(0.0, nxt.insulin_sc2);
    nxt.gut_carbs1 = std::max(0.0, nxt.gut_carbs1);
    nxt.gut_carbs2 = std::max(0.0, nxt.gut_carbs2);
    nxt.plasma_glucose = std::clamp(nxt.plasma_glucose, 20.0, 600.0);
    cur = nxt;
  }
  cur.clock = s.clock + dt_min;
  return cur;
}

double observe(const PatientState& s, Rng& noise_rng, double noise_sd) {
  if (noise_sd < 0) throw ConfigFault("noise_sd must be >= 0");
  double g = s.plasma_glucose;
  if (noise_sd > 0) g += noise_sd * noise_rng.normal();
  return std::clamp(g, 40.0, 400.0);
}

std::vector<NamedPatient> make_cohort(int count, std::uint64_t seed) {
  if (count < 1) throw ConfigFault("cohort count must be >= 1");
  Rng root(seed);
  std::vector<NamedPatient> out;
  out.reserve(count);
  for (int i = 1; i <= count; ++i) {
    Rng r = root.fork(static_cast<std::uint64_t>(i));
    PatientParams p;
    p.insulin_sensitivity *= r.uniform(0.85, 1.15);
    p.carb_sensitivity *= r.uniform(0.75, 1.25);
    p.glucose_clearance_rate *= r.uniform(0.85, 1.15);
    p.insulin_absorption_halftime *= r.uniform(0.75, 1.25);
    p.carb_absorption_halftime *= r.uniform(0.75, 1.25);
    p.basal_rate *= r.uniform(0.75, 1.25);
    p.icr *= r.uniform(0.85, 1.15);
    p.initial_bg *= r.uniform(0.9, 1.1);
    p.diurnal_amplitude = 0.12 * r.uniform(0.75, 1.25);
    p.solve_endogenous_production();
    p.validate();
    char name[24];
    std::snprintf(name, sizeof name, "adult#%03d", i);
    out.push_back({name, p});
  }
  return out;
}

namespace {

nlohmann::json params_json(const PatientParams& p) {
  return nlohmann::json{{"insulin_sensitivity", p.insulin_sensitivity},
                        {"carb_sensitivity", p.carb_sensitivity},
                        {"glucose_clearance_rate", p.glucose_clearance_rate},
                        {"insulin_absorption_halftime", p.insulin_absorption_halftime},
                        {"carb_absorption_halftime", p.carb_absorption_halftime},
                        {"endogenous_production", p.endogenous_production},
                        {"basal_rate", p.basal_rate},
                        {"icr", p.icr},
                        {"initial_bg", p.initial_bg},
                        {"diurnal_amplitude", p.diurnal_amplitude}};
}

PatientParams params_of(const nlohmann::json& j) {
  PatientParams p;
  try {
    p.insulin_sensitivity = j.at("insulin_sensitivity").get<double>();
    p.carb_sensitivity = j.at("carb_sensitivity").get<double>();
    p.glucose_clearance_rate = j.at("glucose_clearance_rate").get<double>();
    p.insulin_absorption_halftime = j.at("insulin_absorption_halftime").get<double>();
    p.carb_absorption_halftime = j.at("carb_absorption_halftime").get<double>();
    p.endogenous_production = j.at("endogenous_production").get<double>();
    p.basal_rate = j.at("basal_rate").get<double>();
    p.icr = j.at("icr").get<double>();
    p.initial_bg = j.at("initial_bg").get<double>();
    p.diurnal_amplitude = j.at("diurnal_amplitude").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigFault(std::string("bad patient params: ") + e.what());
  }
  p.validate();
  return p;
}

}  // namespace

std::string params_to_json(const PatientParams& p) { return params_json(p).dump(2); }

PatientParams params_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigFault(std::string("bad patient params json: ") + e.what());
  }
  return params_of(j);
}

void cohort_to_json_file(const std::vector<NamedPatient>& cohort, const std::string& path) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& np : cohort)
    arr.push_back({{"name", np.name}, {"params", params_json(np.params)}});
  nlohmann::json root{{"patients", arr}};
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw ConfigFault("cannot write cohort file: " + path);
  const std::string text = root.dump(2);
  std::fwrite(text.data(), 1, text.size(), f);
  std::fclose(f);
}

std::vector<NamedPatient> cohort_from_json_file(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw ConfigFault("cannot open cohort file: " + path);
  std::string text;
  char buf[4096];
  size_t n;
  while ((n = std::fread(buf, 1, sizeof buf, f)) > 0) text.append(buf, n);
  std::fclose(f);
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigFault(std::string("bad cohort json: ") + e.what());
  }
  std::vector<NamedPatient> out;
  for (const auto& item : root.at("patients")) {
    NamedPatient np;
    np.name = item.at("name").get<std::string>();
    np.params = params_of(item.at("params"));
    out.push_back(std::move(np));
  }
  return out;
}

}  // namespace tsode::vpatient
