#include "rlmpc/mpc_solver.hpp"

#include <algorithm>
#include <cmath>

#include "rlmpc/qp.hpp"

namespace rlmpc {

namespace {

// Actuator triple in model-input tail order: (soi, doi_h2, doi_diesel).
Eigen::Vector3d act_from_control(const ControlInput& c) {
  return {c.soi_diesel, c.doi_hydrogen, c.doi_diesel};
}
ControlInput control_from_act(const Eigen::Vector3d& a) { return {a[0], a[2], a[1]}; }

// Embeds actuator increments into the 4-channel model input increment.
Eigen::Matrix<double, 4, 3> act_embedding() {
  Eigen::Matrix<double, 4, 3> m = Eigen::Matrix<double, 4, 3>::Zero();
  m(1, 0) = m(2, 1) = m(3, 2) = 1.0;
  return m;
}

}  // namespace

void OcpConfig::validate() const {
  if (horizon < 1) throw ConfigError("ocp horizon must be >= 1");
  if (q_imep < 0 || q_mprr < 0 || q_nox < 0 || r_doi_diesel < 0 || r_doi_hydrogen < 0 ||
      (r_delta.array() < 0).any()) {
    throw ConfigError("ocp weights must be non-negative");
  }
  const Eigen::Vector3d lo = act_from_control(u_min);
  const Eigen::Vector3d hi = act_from_control(u_max);
  if (!((lo.array() < hi.array()).all())) {
    throw ConfigError("ocp control box must have u_min < u_max componentwise");
  }
  if (!((act_from_control(delta_u_max).array() > 0).all())) {
    throw ConfigError("ocp delta_u_max must be positive");
  }
  for (int i = 0; i < 4; ++i) {
    if (f_u[i] != 0.0 && f_u[i] != 1.0) throw ConfigError("ocp f_u entries must be 0 or 1");
  }
  for (int i = 0; i < 3; ++i) {
    if (f_y[i] != 0.0 && f_y[i] != 1.0) throw ConfigError("ocp f_y entries must be 0 or 1");
  }
  if (sqp_iters < 1) throw ConfigError("ocp sqp_iters must be >= 1");
  if (qp_tolerance <= 0 || hessian_reg < 0 || slack_weight < 0) {
    throw ConfigError("ocp tolerances and penalties must be non-negative");
  }
}

double stage_cost(const Eigen::Vector3d& y, const Eigen::Vector4d& u,
                  const Eigen::Vector4d& delta_u, double ref_imep, double delta_ref,
                  const OcpConfig& cfg, const ScalingTable& scaling) {
  const double hr_imep = scaling.half_range(Channel::Imep);
  const double hr_mprr = scaling.half_range(Channel::Mprr);
  const double hr_nox = scaling.half_range(Channel::Nox);
  const double hr_dd = scaling.half_range(Channel::DoiDiesel);
  const double hr_dh = scaling.half_range(Channel::DoiHydrogen);

  const double e_track = (ref_imep + delta_ref - y[kYImep]) / hr_imep;
  double cost = cfg.q_imep * e_track * e_track;
  cost += cfg.q_mprr * (y[kYMprr] / hr_mprr) * (y[kYMprr] / hr_mprr);
  cost += cfg.q_nox * (y[kYNox] / hr_nox) * (y[kYNox] / hr_nox);
  cost += cfg.r_doi_diesel * (u[kUDoiDiesel] / hr_dd) * (u[kUDoiDiesel] / hr_dd);
  cost += cfg.r_doi_hydrogen * (u[kUDoiHydrogen] / hr_dh) * (u[kUDoiHydrogen] / hr_dh);
  for (int c = 0; c < 4; ++c) {
    const double hr = scaling.half_range(kModelInputChannels[static_cast<std::size_t>(c)]);
    cost += cfg.r_delta[c] * (delta_u[c] / hr) * (delta_u[c] / hr);
  }
  return cost;
}

MpcSolver::MpcSolver(const DynamicsModel& model, OcpConfig cfg)
    : model_(model), cfg_(std::move(cfg)) {
  cfg_.validate();
}

namespace {

struct Nominal {
  std::vector<AugmentedState> x;     // stages 0..N
  std::vector<Eigen::Vector4d> du;   // stages 0..N (terminal actuators zero)
  std::vector<Eigen::Vector3d> y;    // stages 0..N
  std::vector<Eigen::Vector3d> act;  // applied actuators per stage
  double merit{0.0};
};

}  // namespace

Solution MpcSolver::solve(const AugmentedState& x0, std::span<const double> ref_imep,
                          double delta_ref, const Solution* warm_start) const {
  const int n_stage = cfg_.horizon;
  if (static_cast<int>(ref_imep.size()) != n_stage + 1) {
    throw ConfigError("solve: reference window must have horizon + 1 values");
  }

  const Eigen::Matrix<double, 4, 3> embed = act_embedding();
  const Eigen::Vector3d act_lo = act_from_control(cfg_.u_min);
  const Eigen::Vector3d act_hi = act_from_control(cfg_.u_max);
  const Eigen::Vector3d rate = act_from_control(cfg_.delta_u_max);
  const ScalingTable& sc = model_.scaling();

  // Clamp increments to the rate box and the cumulative actuators into the
  // control box, so every SQP iterate satisfies the QP's hard rows.
  auto project = [&](std::vector<Eigen::Vector3d>& deltas) {
    Eigen::Vector3d act = x0.u_prev.tail<3>();
    for (Eigen::Vector3d& d : deltas) {
      for (int c = 0; c < 3; ++c) {
        d[c] = std::clamp(d[c], -rate[c], rate[c]);
        const double next = std::clamp(act[c] + d[c], act_lo[c], act_hi[c]);
        d[c] = next - act[c];
        act[c] = next;
      }
    }
  };

  // Nominal rollout with the imep-feedback substitution: stage 0 keeps the
  // measured value in x0.u_prev, later stages feed the model's own previous
  // IMEP prediction.
  auto roll = [&](const std::vector<Eigen::Vector3d>& deltas) -> Nominal {
    Nominal nom;
    const auto n = static_cast<std::size_t>(n_stage);
    nom.x.resize(n + 1);
    nom.du.resize(n + 1);
    nom.y.resize(n + 1);
    nom.act.resize(n + 1);
    nom.x[0] = x0;
    nom.merit = 0.0;
    for (int i = 0; i <= n_stage; ++i) {
      const auto k = static_cast<std::size_t>(i);
      const double du_imep =
          i == 0 ? 0.0 : nom.y[k - 1][kYImep] - nom.x[k].u_prev[kUImepPrev];
      Eigen::Vector4d du;
      if (i < n_stage) {
        du << du_imep, deltas[k][0], deltas[k][1], deltas[k][2];
      } else {
        du << du_imep, 0.0, 0.0, 0.0;
      }
      auto [xn, yi] = model_.forward_step(nom.x[k], du);
      nom.du[k] = du;
      nom.y[k] = yi;
      nom.act[k] = xn.u_prev.tail<3>();
      if (i < n_stage) nom.x[k + 1] = xn;

      const Eigen::Vector4d u_abs = nom.x[k].u_prev + du;
      nom.merit += stage_cost(yi, u_abs, du, ref_imep[static_cast<std::size_t>(i)], delta_ref,
                              cfg_, sc);
      if (cfg_.f_y[kYMprr] != 0.0 && std::isfinite(cfg_.y_max_mprr)) {
        nom.merit += cfg_.slack_weight * std::max(0.0, yi[kYMprr] - cfg_.y_max_mprr);
      }
    }
    return nom;
  };

  // Warm start: shift the previous plan one stage, append a zero move.
  std::vector<Eigen::Vector3d> deltas(static_cast<std::size_t>(n_stage),
                                      Eigen::Vector3d::Zero());
  if (warm_start != nullptr && warm_start->delta_u_sequence.rows() == n_stage) {
    for (int i = 0; i + 1 < n_stage; ++i) {
      deltas[static_cast<std::size_t>(i)] =
          warm_start->delta_u_sequence.row(i + 1).tail<3>().transpose();
    }
  }
  project(deltas);

  Nominal nom = roll(deltas);
  SolveStatus status = SolveStatus::Optimal;
  double kkt = 0.0;

  const int nv = 3 * n_stage;
  const bool mprr_bound = cfg_.f_y[kYMprr] != 0.0 && std::isfinite(cfg_.y_max_mprr);
  const int ns = mprr_bound ? n_stage + 1 : 0;
  const int nz = nv + ns;

  const double hr_imep = sc.half_range(Channel::Imep);
  const double hr_mprr = sc.half_range(Channel::Mprr);
  const double hr_nox = sc.half_range(Channel::Nox);
  const double hr_dd = sc.half_range(Channel::DoiDiesel);
  const double hr_dh = sc.half_range(Channel::DoiHydrogen);

  for (int iter = 0; iter < cfg_.sqp_iters; ++iter) {
    Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(nz, nz);
    Eigen::VectorXd grad = Eigen::VectorXd::Zero(nz);
    std::vector<Eigen::RowVectorXd> ineq_rows;
    std::vector<double> ineq_rhs;

    auto add_quad = [&](const Eigen::RowVectorXd& gmap, double a0, double w) {
      if (w == 0.0) return;
      hess.noalias() += (2.0 * w) * gmap.transpose() * gmap;
      grad.noalias() += (2.0 * w * a0) * gmap.transpose();
    };

    Eigen::MatrixXd sens = Eigen::MatrixXd::Zero(kStateDim, nz);  // d x_i / d z
    Eigen::MatrixXd act_map = Eigen::MatrixXd::Zero(3, nz);       // d act_i / d z
    for (int i = 0; i <= n_stage; ++i) {
      const auto k = static_cast<std::size_t>(i);
      const Linearization lin = model_.linearize(nom.x[k], nom.du[k]);

      Eigen::Matrix<double, 4, kStateDim> p = Eigen::Matrix<double, 4, kStateDim>::Zero();
      if (i >= 1) {
        p.block<1, kHiddenDim>(kUImepPrev, 0) = model_.output_jacobian(nom.x[k]).row(kYImep);
        p(kUImepPrev, kHiddenDim + kUImepPrev) = -1.0;
      }

      Eigen::MatrixXd y_map = (lin.c + lin.d * p) * sens;  // 3 x nz
      Eigen::MatrixXd du_map = p * sens;                   // 4 x nz
      if (i < n_stage) {
        y_map.block(0, 3 * i, 3, 3) += lin.d * embed;
        du_map.block(0, 3 * i, 4, 3) += embed;
        act_map.block(0, 3 * i, 3, 3) += Eigen::Matrix3d::Identity();
      }

      add_quad(y_map.row(kYImep),
               nom.y[k][kYImep] - (ref_imep[static_cast<std::size_t>(i)] + delta_ref),
               cfg_.q_imep / (hr_imep * hr_imep));
      add_quad(y_map.row(kYNox), nom.y[k][kYNox], cfg_.q_nox / (hr_nox * hr_nox));
      add_quad(y_map.row(kYMprr), nom.y[k][kYMprr], cfg_.q_mprr / (hr_mprr * hr_mprr));
      add_quad(act_map.row(2), nom.act[k][2], cfg_.r_doi_diesel / (hr_dd * hr_dd));
      add_quad(act_map.row(1), nom.act[k][1], cfg_.r_doi_hydrogen / (hr_dh * hr_dh));
      for (int c = 0; c < 4; ++c) {
        const double hr = sc.half_range(kModelInputChannels[static_cast<std::size_t>(c)]);
        add_quad(du_map.row(c), nom.du[k][c], cfg_.r_delta[c] / (hr * hr));
      }

      if (i < n_stage) {
        for (int c = 0; c < 3; ++c) {
          Eigen::RowVectorXd e = Eigen::RowVectorXd::Zero(nz);
          e[3 * i + c] = 1.0;
          ineq_rows.push_back(e);
          ineq_rhs.push_back(rate[c] - deltas[k][c]);
          ineq_rows.push_back(-e);
          ineq_rhs.push_back(rate[c] + deltas[k][c]);
        }
        for (int c = 0; c < 3; ++c) {
          if (cfg_.f_u[c + 1] == 0.0) continue;
          ineq_rows.push_back(act_map.row(c));
          ineq_rhs.push_back(std::max(0.0, act_hi[c] - nom.act[k][c]));
          ineq_rows.push_back(-act_map.row(c));
          ineq_rhs.push_back(std::max(0.0, nom.act[k][c] - act_lo[c]));
        }
      }
      if (mprr_bound) {
        Eigen::RowVectorXd row = y_map.row(kYMprr);
        row[nv + i] += -1.0;
        ineq_rows.push_back(row);
        ineq_rhs.push_back(cfg_.y_max_mprr - nom.y[k][kYMprr]);
        Eigen::RowVectorXd spos = Eigen::RowVectorXd::Zero(nz);
        spos[nv + i] = -1.0;
        ineq_rows.push_back(spos);
        ineq_rhs.push_back(0.0);
        grad[nv + i] += cfg_.slack_weight;
      }

      if (i < n_stage) {
        const Eigen::MatrixXd bb = lin.b * embed;
        sens = ((lin.a + lin.b * p) * sens).eval();
        sens.block(0, 3 * i, kStateDim, 3) += bb;
      }
    }
    hess.diagonal().array() += cfg_.hessian_reg;

    QpProblem qp;
    qp.h = std::move(hess);
    qp.g = std::move(grad);
    qp.a.resize(static_cast<Eigen::Index>(ineq_rows.size()), nz);
    qp.b.resize(static_cast<Eigen::Index>(ineq_rhs.size()));
    for (std::size_t r = 0; r < ineq_rows.size(); ++r) {
      qp.a.row(static_cast<Eigen::Index>(r)) = ineq_rows[r];
      qp.b[static_cast<Eigen::Index>(r)] = ineq_rhs[r];
    }

    Eigen::VectorXd z0 = Eigen::VectorXd::Zero(nz);
    if (mprr_bound) {
      for (int i = 0; i <= n_stage; ++i) {
        z0[nv + i] =
            std::max(0.0, nom.y[static_cast<std::size_t>(i)][kYMprr] - cfg_.y_max_mprr);
      }
    }

    const QpResult qr = solve_qp(qp, z0, cfg_.qp_max_iter, cfg_.qp_tolerance);
    kkt = qr.kkt_residual;
    if (qr.status == QpStatus::Infeasible) {
      status = SolveStatus::InfeasibleRelaxed;
      const std::vector<Eigen::Vector3d> hold(static_cast<std::size_t>(n_stage),
                                              Eigen::Vector3d::Zero());
      nom = roll(hold);
      break;
    }
    status = qr.status == QpStatus::Optimal ? SolveStatus::Optimal : SolveStatus::MaxIter;

    // backtracking on the true rollout merit
    bool accepted = false;
    for (const double alpha : {1.0, 0.5, 0.25, 0.125, 0.0625}) {
      std::vector<Eigen::Vector3d> cand = deltas;
      for (int i = 0; i < n_stage; ++i) {
        cand[static_cast<std::size_t>(i)] += alpha * qr.z.segment(3 * i, 3);
      }
      Nominal cand_nom = roll(cand);
      if (cand_nom.merit < nom.merit - 1e-12) {
        deltas = std::move(cand);
        nom = std::move(cand_nom);
        accepted = true;
        break;
      }
    }
    if (!accepted) break;  // stationary: no descent step accepted
  }

  Solution sol;
  sol.delta_u_sequence.resize(n_stage, 4);
  for (int i = 0; i < n_stage; ++i) {
    sol.delta_u_sequence.row(i) = nom.du[static_cast<std::size_t>(i)].transpose();
  }
  sol.predicted_y.resize(n_stage + 1, 3);
  for (int i = 0; i <= n_stage; ++i) {
    sol.predicted_y.row(i) = nom.y[static_cast<std::size_t>(i)].transpose();
  }
  sol.cost = nom.merit;
  sol.qp_status = status;
  sol.kkt_residual = kkt;
  return sol;
}

ControlInput MpcSolver::apply(const Solution& solution, const ControlInput& u_prev) const {
  Eigen::Vector3d du = Eigen::Vector3d::Zero();
  if (solution.delta_u_sequence.rows() > 0) {
    du = solution.delta_u_sequence.row(0).tail<3>().transpose();
  }
  const Eigen::Vector3d rate = act_from_control(cfg_.delta_u_max);
  const Eigen::Vector3d lo = act_from_control(cfg_.u_min);
  const Eigen::Vector3d hi = act_from_control(cfg_.u_max);
  const Eigen::Vector3d prev = act_from_control(u_prev);
  Eigen::Vector3d next;
  for (int c = 0; c < 3; ++c) {
    next[c] = std::clamp(prev[c] + std::clamp(du[c], -rate[c], rate[c]), lo[c], hi[c]);
  }
  return control_from_act(next);
}

}  // namespace rlmpc
