#include "rlmpc/engine_sim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "rlmpc/rng.hpp"

namespace rlmpc {

void PlantConfig::validate() const {
  if (!(rail_pressure > 0.0)) {
    throw ConfigError("plant rail_pressure must be positive");
  }
  if (!(coeff.imep_lag >= 0.0 && coeff.imep_lag < 1.0)) {
    throw ConfigError("plant imep_lag must lie in [0, 1)");
  }
  if (noise_std.imep < 0.0 || noise_std.mprr < 0.0 || noise_std.nox < 0.0) {
    throw ConfigError("plant noise_std must be non-negative");
  }
  if (!(u_min.soi_diesel < u_max.soi_diesel && u_min.doi_diesel < u_max.doi_diesel &&
        u_min.doi_hydrogen < u_max.doi_hydrogen)) {
    throw ConfigError("plant control box must have u_min < u_max");
  }
}

double rail_scale(double rail_pressure) {
  if (!(rail_pressure > 0.0)) {
    throw ConfigError("rail_scale: rail pressure must be positive");
  }
  return std::sqrt(rail_pressure / 1000.0);
}

PlantState initial_plant_state(const PlantConfig& cfg) {
  PlantState s;
  s.imep_prev = cfg.coeff.imep_offset;
  s.rng.seed(cfg.seed);
  return s;
}

namespace {

double clamp_channel(double v, double lo, double hi, const char* name, bool& clamped) {
  if (v < lo || v > hi) {
    clamped = true;
    std::fprintf(stderr, "engine_sim: clamping %s %.6g into [%.6g, %.6g]\n", name, v, lo, hi);
    return std::clamp(v, lo, hi);
  }
  return v;
}

}  // namespace

CombustionOutput plant_step(PlantState& state, const ControlInput& u_in, const PlantConfig& cfg) {
  const PlantCoefficients& c = cfg.coeff;

  bool clamped = false;
  ControlInput u;
  u.soi_diesel = clamp_channel(u_in.soi_diesel, cfg.u_min.soi_diesel, cfg.u_max.soi_diesel,
                               "soi_diesel", clamped);
  u.doi_diesel = clamp_channel(u_in.doi_diesel, cfg.u_min.doi_diesel, cfg.u_max.doi_diesel,
                               "doi_diesel", clamped);
  u.doi_hydrogen = clamp_channel(u_in.doi_hydrogen, cfg.u_min.doi_hydrogen, cfg.u_max.doi_hydrogen,
                                 "doi_hydrogen", clamped);

  const double scale = rail_scale(cfg.rail_pressure);
  const double soi_dev = (u.soi_diesel - c.soi_peak) / c.soi_width;
  const double eta = std::exp(-soi_dev * soi_dev);
  const double e_diesel = c.diesel_gain * u.doi_diesel * scale;
  const double e_hydrogen = c.hydrogen_gain * u.doi_hydrogen;
  const double fuel = e_diesel + e_hydrogen;
  const double imep_raw = c.imep_offset + fuel * eta;

  // Fixed draw order keeps the stream identical whichever stds are zero.
  const double n_imep = gauss(state.rng) * cfg.noise_std.imep;
  const double n_mprr = gauss(state.rng) * cfg.noise_std.mprr;
  const double n_nox = gauss(state.rng) * cfg.noise_std.nox;

  CombustionOutput y;
  y.imep = (1.0 - c.imep_lag) * imep_raw + c.imep_lag * state.imep_prev + n_imep;
  y.mprr = std::max(0.0, c.mprr_offset + c.mprr_h2_quad * e_hydrogen * e_hydrogen +
                             c.mprr_energy * fuel +
                             c.mprr_soi_gain * (u.soi_diesel - c.mprr_soi_ref) + n_mprr);
  const double h2_share = fuel > 1e-12 ? e_hydrogen / fuel : 0.0;
  y.nox = std::max(0.0, c.nox_offset + c.nox_imep_quad * imep_raw * imep_raw +
                            c.nox_h2_share * h2_share + n_nox);

  state.imep_prev = y.imep;
  return y;
}

namespace {

// Fibonacci LFSR over 11 bits, taps 11 and 9 (x^11 + x^9 + 1): maximal
// length 2047.
class Prbs11 {
 public:
  explicit Prbs11(std::uint64_t seed) {
    reg_ = static_cast<std::uint32_t>(splitmix64(seed) & 0x7ff);
    if (reg_ == 0) reg_ = 1;
  }

  bool next() {
    const bool out = (reg_ & 1u) != 0;
    const std::uint32_t feedback = ((reg_ >> 10) ^ (reg_ >> 8)) & 1u;
    reg_ = static_cast<std::uint32_t>((reg_ >> 1) | (feedback << 10));
    return out;
  }

 private:
  std::uint32_t reg_;
};

}  // namespace

Dataset run_prbs_segment(PlantState& state, const PlantConfig& cfg, const PrbsLevels& levels,
                         int n_cycles, int hold, std::uint64_t seed) {
  if (n_cycles < 1) throw ConfigError("prbs: n_cycles must be >= 1");
  if (hold < 1) throw ConfigError("prbs: hold must be >= 1");
  for (const auto& [name, p] : {std::pair{"soi_diesel", levels.soi_diesel},
                                std::pair{"doi_diesel", levels.doi_diesel},
                                std::pair{"doi_hydrogen", levels.doi_hydrogen}}) {
    if (p.low == p.high) {
      throw ConfigError(std::string("prbs: degenerate levels for ") + name);
    }
  }

  Prbs11 soi_seq(derive_seed(seed, 1));
  Prbs11 doi_d_seq(derive_seed(seed, 2));
  Prbs11 doi_h_seq(derive_seed(seed, 3));

  Dataset data;
  data.reserve(static_cast<std::size_t>(n_cycles));
  ControlInput u;
  for (int i = 0; i < n_cycles; ++i) {
    if (i % hold == 0) {
      u.soi_diesel = soi_seq.next() ? levels.soi_diesel.high : levels.soi_diesel.low;
      u.doi_diesel = doi_d_seq.next() ? levels.doi_diesel.high : levels.doi_diesel.low;
      u.doi_hydrogen = doi_h_seq.next() ? levels.doi_hydrogen.high : levels.doi_hydrogen.low;
    }
    data.push_back({u, plant_step(state, u, cfg)});
  }
  return data;
}

Dataset generate_prbs_dataset(int n_cycles, const PlantConfig& cfg, const PrbsLevels& levels,
                              int hold, std::uint64_t seed) {
  PlantState state = initial_plant_state(cfg);
  return run_prbs_segment(state, cfg, levels, n_cycles, hold, seed);
}

}  // namespace rlmpc
