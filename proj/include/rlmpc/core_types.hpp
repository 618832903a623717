#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>

namespace rlmpc {

/// Raised on invalid configuration (bad ranges, unknown channels, malformed files).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Raised when a computation produces non-finite values.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Physical signal channels. Used as keys into the scaling table.
enum class Channel : int {
  Imep = 0,      // bar
  Nox,           // ppm
  Mprr,          // bar/degCA
  SoiDiesel,     // degCA bTDC
  DoiDiesel,     // ms
  DoiHydrogen,   // ms
};
inline constexpr int kNumChannels = 6;

const char* channel_name(Channel ch);

/// One cycle's actuation commands.
struct ControlInput {
  double soi_diesel{0.0};    // start of diesel injection, degCA bTDC
  double doi_diesel{0.0};    // diesel injection duration, ms
  double doi_hydrogen{0.0};  // hydrogen injection duration, ms
};

/// One cycle's measured combustion metrics.
struct CombustionOutput {
  double imep{0.0};  // bar
  double mprr{0.0};  // bar/degCA
  double nox{0.0};   // ppm
};

/// RL observation: previous-cycle metrics plus current and previous load reference.
struct AgentState {
  double imep_prev{0.0};      // bar
  double nox_prev{0.0};       // ppm
  double mprr_prev{0.0};      // bar/degCA
  double ref_imep_curr{0.0};  // bar
  double ref_imep_prev{0.0};  // bar

  Eigen::Matrix<double, 5, 1> to_vector() const {
    Eigen::Matrix<double, 5, 1> v;
    v << imep_prev, nox_prev, mprr_prev, ref_imep_curr, ref_imep_prev;
    return v;
  }
};

/// Full per-cycle log row.
struct CycleRecord {
  std::int64_t cycle_index{0};
  double ref_imep{0.0};   // unshifted load reference, bar
  double delta_ref{0.0};  // RL reference offset, bar
  ControlInput control;
  CombustionOutput output;
  double reward{0.0};
  double rail_pressure{0.0};  // bar
};

/// Per-channel affine scaling to [-1, 1].
struct ScalingTable {
  struct Range {
    double min{0.0};
    double max{1.0};
  };

  std::array<Range, kNumChannels> ranges{{
      {4.5, 9.0},   // Imep, bar
      {0.0, 1850.0},// Nox, ppm
      {0.0, 10.0},  // Mprr, bar/degCA
      {2.0, 20.0},  // SoiDiesel, degCA bTDC
      {0.2, 1.2},   // DoiDiesel, ms
      {0.0, 8.0},   // DoiHydrogen, ms
  }};

  const Range& range(Channel ch) const;
  void validate() const;  // throws ConfigError if any min >= max

  double normalize(double value, Channel ch) const {
    const Range& r = range(ch);
    return 2.0 * (value - r.min) / (r.max - r.min) - 1.0;
  }
  double denormalize(double value, Channel ch) const {
    const Range& r = range(ch);
    return r.min + 0.5 * (value + 1.0) * (r.max - r.min);
  }
  /// (max - min) / 2; divides physical values in offset-free cost scaling.
  double half_range(Channel ch) const {
    const Range& r = range(ch);
    return 0.5 * (r.max - r.min);
  }
  /// d(normalized)/d(physical) = 2 / (max - min).
  double norm_slope(Channel ch) const { return 1.0 / half_range(ch); }
};

// Model-facing vector conventions. The plant model consumes
//   u = [imep_prev, soi_diesel, doi_hydrogen, doi_diesel]
// and emits
//   y = [imep, nox, mprr].
inline constexpr int kUImepPrev = 0;
inline constexpr int kUSoiDiesel = 1;
inline constexpr int kUDoiHydrogen = 2;
inline constexpr int kUDoiDiesel = 3;
inline constexpr int kYImep = 0;
inline constexpr int kYNox = 1;
inline constexpr int kYMprr = 2;

inline constexpr std::array<Channel, 4> kModelInputChannels = {
    Channel::Imep, Channel::SoiDiesel, Channel::DoiHydrogen, Channel::DoiDiesel};
inline constexpr std::array<Channel, 3> kModelOutputChannels = {
    Channel::Imep, Channel::Nox, Channel::Mprr};

inline Eigen::Vector4d model_input_vector(double imep_prev, const ControlInput& u) {
  return {imep_prev, u.soi_diesel, u.doi_hydrogen, u.doi_diesel};
}
inline ControlInput control_from_model_input(const Eigen::Vector4d& u) {
  return {u[kUSoiDiesel], u[kUDoiDiesel], u[kUDoiHydrogen]};
}
inline Eigen::Vector3d output_vector(const CombustionOutput& y) {
  return {y.imep, y.nox, y.mprr};
}
inline CombustionOutput output_from_vector(const Eigen::Vector3d& y) {
  return {y[kYImep], y[kYMprr], y[kYNox]};
}

/// Eq.-1 observation from the tail of an episode log. An empty log is the
/// cold start: IMEP history is filled with the current reference, emission
/// and noise metrics with zero.
AgentState build_agent_state(std::span<const CycleRecord> log, double ref_curr);

}  // namespace rlmpc
