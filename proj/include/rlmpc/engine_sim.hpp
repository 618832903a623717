#pragma once

#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "rlmpc/core_types.hpp"

namespace rlmpc {

// Synthetic cycle-to-cycle H2DF engine response. Closed forms (all
// coefficients live in PlantCoefficients, fuel terms in bar):
//
//   scale     = sqrt(rail_pressure / 1000)                  [orifice flow]
//   eta(soi)  = exp(-((soi - soi_peak) / soi_width)^2)      [conversion bump]
//   e_d       = diesel_gain * doi_diesel * scale
//   e_h       = hydrogen_gain * doi_hydrogen
//   fuel      = e_d + e_h
//   imep_raw  = imep_offset + fuel * eta(soi)
//   imep      = (1 - imep_lag) * imep_raw + imep_lag * imep_prev + noise
//   mprr      = max(0, mprr_offset + mprr_h2_quad * e_h^2 + mprr_energy * fuel
//                      + mprr_soi_gain * (soi - mprr_soi_ref) + noise)
//   nox       = max(0, nox_offset + nox_imep_quad * imep_raw^2
//                      + nox_h2_share * e_h / fuel + noise)
//
// The lag applies to IMEP only; MPRR and NOx are static maps of the cycle.

struct PlantCoefficients {
  double imep_offset{0.5};     // bar, motoring output with no fuel
  double diesel_gain{5.0};     // bar per ms diesel DOI at 1000 bar rail
  double hydrogen_gain{0.45};  // bar per ms hydrogen DOI
  double soi_peak{10.0};       // degCA bTDC of peak conversion efficiency
  double soi_width{12.0};      // degCA, efficiency bump width
  double imep_lag{0.15};       // first-order pole on IMEP
  double mprr_offset{0.3};
  double mprr_h2_quad{0.25};   // per (bar hydrogen energy)^2
  double mprr_energy{0.55};    // per bar of total fuel energy
  double mprr_soi_gain{0.10};  // per degCA of advance beyond mprr_soi_ref
  double mprr_soi_ref{2.0};    // degCA bTDC
  double nox_offset{100.0};
  double nox_imep_quad{14.0};  // per bar^2 of imep_raw
  double nox_h2_share{350.0};  // per unit hydrogen energy share
};

struct NoiseStd {
  double imep{0.05};  // bar
  double mprr{0.15};  // bar/degCA
  double nox{20.0};   // ppm
};

struct PlantConfig {
  double rail_pressure{1000.0};  // bar
  PlantCoefficients coeff;
  NoiseStd noise_std;
  ControlInput u_min{2.0, 0.2, 0.0};
  ControlInput u_max{20.0, 1.2, 8.0};
  std::uint64_t seed{0};

  void validate() const;
};

struct PlantState {
  double imep_prev{0.0};  // bar, realized IMEP of the previous cycle
  std::mt19937_64 rng;
};

/// Fuel-mass multiplier sqrt(rail_pressure / 1000). Monotone increasing.
double rail_scale(double rail_pressure);

/// Fresh state at the motoring level, RNG seeded from the config.
PlantState initial_plant_state(const PlantConfig& cfg);

/// Advance one combustion cycle. Inputs outside the physical box are clamped
/// (with a warning on stderr). Always consumes exactly three noise draws.
CombustionOutput plant_step(PlantState& state, const ControlInput& u, const PlantConfig& cfg);

struct IoSample {
  ControlInput u;
  CombustionOutput y;
};
using Dataset = std::vector<IoSample>;

struct PrbsLevels {
  struct Pair {
    double low{0.0};
    double high{1.0};
  };
  Pair soi_diesel{6.0, 14.0};
  Pair doi_diesel{0.3, 1.1};
  Pair doi_hydrogen{1.0, 7.0};
};

/// Excite the plant with independent maximal-length (11-bit) PRBS sequences
/// on each control channel, each chip held `hold` cycles. Continues from the
/// given plant state so segments can be chained into one dataset.
Dataset run_prbs_segment(PlantState& state, const PlantConfig& cfg, const PrbsLevels& levels,
                         int n_cycles, int hold, std::uint64_t seed);

/// Single-segment identification dataset from a fresh plant.
Dataset generate_prbs_dataset(int n_cycles, const PlantConfig& cfg, const PrbsLevels& levels,
                              int hold, std::uint64_t seed);

}  // namespace rlmpc
