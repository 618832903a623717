#pragma once

#include <Eigen/Core>

#include <span>
#include <vector>

#include "rlmpc/core_types.hpp"
#include "rlmpc/neural_plant.hpp"

namespace rlmpc {

/// OCP weights, bounds and solver knobs. Output and input weights act on
/// half-range-scaled channels, so a weight of 1 prices a full-range error at
/// roughly 1 per stage regardless of physical units.
struct OcpConfig {
  int horizon{5};

  double q_imep{1.0};
  double q_mprr{0.05};
  double q_nox{0.02};
  double r_doi_diesel{0.05};
  double r_doi_hydrogen{0.01};
  /// Increment weights per model input channel (imep_prev, soi, doi_h2,
  /// doi_diesel). The imep channel is determined by the model feedback, not a
  /// decision variable; its weight defaults to zero.
  Eigen::Vector4d r_delta{0.0, 0.05, 0.05, 0.2};

  ControlInput u_min{2.0, 0.2, 0.0};
  ControlInput u_max{20.0, 1.2, 8.0};
  double y_max_mprr{10.0};
  ControlInput delta_u_max{1.0, 0.05, 0.25};

  /// 0/1 gates: which model input channels get box constraints and which
  /// outputs get the upper bound.
  Eigen::Vector4d f_u{0.0, 1.0, 1.0, 1.0};
  Eigen::Vector3d f_y{0.0, 0.0, 1.0};

  int sqp_iters{3};
  double qp_tolerance{1e-8};
  double slack_weight{1e3};  // L1 price per physical unit of MPRR violation
  double hessian_reg{1e-8};
  int qp_max_iter{200};

  void validate() const;
};

enum class SolveStatus { Optimal, MaxIter, InfeasibleRelaxed };

struct Solution {
  Eigen::MatrixX4d delta_u_sequence;  // N x 4, model input order
  Eigen::MatrixX3d predicted_y;       // (N+1) x 3
  double cost{0.0};
  SolveStatus qp_status{SolveStatus::Optimal};
  double kkt_residual{0.0};
};

/// Eq.-4 stage cost on half-range-scaled channels. y = (imep, nox, mprr),
/// u and delta_u in model input order, all physical units.
double stage_cost(const Eigen::Vector3d& y, const Eigen::Vector4d& u,
                  const Eigen::Vector4d& delta_u, double ref_imep, double delta_ref,
                  const OcpConfig& cfg, const ScalingTable& scaling);

/// Receding-horizon OCP solver: sequential quadratic programming over the
/// linearized model with a condensed dense QP per iteration. Within the
/// horizon the model's imep feedback input is substituted with the decoder
/// prediction; stage 0 keeps the measured value stored in x0.u_prev.
class MpcSolver {
 public:
  MpcSolver(const DynamicsModel& model, OcpConfig cfg);

  /// ref_imep must provide horizon + 1 values. delta_ref shifts the tracking
  /// target uniformly over the horizon.
  Solution solve(const AugmentedState& x0, std::span<const double> ref_imep, double delta_ref,
                 const Solution* warm_start = nullptr) const;

  /// First-move application with rate clamp and box clamp.
  ControlInput apply(const Solution& solution, const ControlInput& u_prev) const;

  const OcpConfig& config() const { return cfg_; }

 private:
  const DynamicsModel& model_;
  OcpConfig cfg_;
};

}  // namespace rlmpc
