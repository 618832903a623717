#pragma once

#include <Eigen/Core>

namespace rlmpc {

/// min 1/2 z'Hz + g'z  s.t.  A z <= b, with H symmetric positive definite.
struct QpProblem {
  Eigen::MatrixXd h;
  Eigen::VectorXd g;
  Eigen::MatrixXd a;
  Eigen::VectorXd b;
};

enum class QpStatus { Optimal, MaxIter, Infeasible };

struct QpResult {
  Eigen::VectorXd z;
  QpStatus status{QpStatus::Optimal};
  double kkt_residual{0.0};
  int iterations{0};
};

/// Dense primal active-set method. z0 must be feasible; constraints active at
/// z0 seed the working set. Active constraints are satisfied to factorization
/// accuracy, so solutions sit exactly on their bounds.
QpResult solve_qp(const QpProblem& p, const Eigen::VectorXd& z0, int max_iter = 200,
                  double tol = 1e-10);

}  // namespace rlmpc
