#include "rlmpc/qp.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <vector>

namespace rlmpc {

namespace {

double kkt_residual(const QpProblem& p, const Eigen::VectorXd& z,
                    const std::vector<int>& working, const Eigen::VectorXd& lambda) {
  Eigen::VectorXd stat = p.h * z + p.g;
  const std::size_t nl = std::min(working.size(), static_cast<std::size_t>(lambda.size()));
  for (std::size_t k = 0; k < nl; ++k) {
    stat += lambda[static_cast<Eigen::Index>(k)] * p.a.row(working[k]).transpose();
  }
  double res = stat.lpNorm<Eigen::Infinity>();
  if (p.a.rows() > 0) {
    const Eigen::VectorXd viol = p.a * z - p.b;
    res = std::max(res, viol.maxCoeff());
  }
  return res;
}

}  // namespace

QpResult solve_qp(const QpProblem& p, const Eigen::VectorXd& z0, int max_iter, double tol) {
  const Eigen::Index n = p.g.size();
  const Eigen::Index m = p.b.size();
  QpResult result;
  result.z = z0;

  if (m > 0 && ((p.a * z0 - p.b).maxCoeff() > 1e-8)) {
    result.status = QpStatus::Infeasible;
    return result;
  }

  const Eigen::LLT<Eigen::MatrixXd> h_llt(p.h);
  if (h_llt.info() != Eigen::Success) {
    result.status = QpStatus::Infeasible;
    return result;
  }

  std::vector<int> working;
  for (Eigen::Index i = 0; i < m; ++i) {
    if (std::abs(p.a.row(i).dot(z0) - p.b[i]) <= tol) working.push_back(static_cast<int>(i));
  }

  Eigen::VectorXd z = z0;
  Eigen::VectorXd lambda;
  for (int iter = 0; iter < max_iter; ++iter) {
    result.iterations = iter + 1;
    const Eigen::VectorXd q = p.h * z + p.g;
    const Eigen::VectorXd h_inv_q = h_llt.solve(q);

    Eigen::VectorXd step;
    const auto nw = static_cast<Eigen::Index>(working.size());
    if (nw == 0) {
      step = -h_inv_q;
      lambda.resize(0);
    } else {
      Eigen::MatrixXd aw(nw, n);
      for (Eigen::Index k = 0; k < nw; ++k) {
        aw.row(k) = p.a.row(working[static_cast<std::size_t>(k)]);
      }
      const Eigen::MatrixXd h_inv_awt = h_llt.solve(aw.transpose());
      const Eigen::MatrixXd schur = aw * h_inv_awt;
      lambda = schur.ldlt().solve(-(aw * h_inv_q));
      if (!lambda.allFinite()) {
        result.status = QpStatus::MaxIter;
        result.kkt_residual = kkt_residual(p, z, working, lambda);
        result.z = z;
        return result;
      }
      step = -h_inv_q - h_inv_awt * lambda;
    }

    if (step.lpNorm<Eigen::Infinity>() < tol) {
      // stationary on the working set; check multiplier signs
      int drop = -1;
      double most_negative = -tol;
      for (Eigen::Index k = 0; k < nw; ++k) {
        if (lambda[k] < most_negative) {
          most_negative = lambda[k];
          drop = static_cast<int>(k);
        }
      }
      if (drop < 0) {
        result.z = z;
        result.status = QpStatus::Optimal;
        result.kkt_residual = kkt_residual(p, z, working, lambda);
        return result;
      }
      working.erase(working.begin() + drop);
      continue;
    }

    // longest feasible step along `step`
    double alpha = 1.0;
    int blocking = -1;
    for (Eigen::Index i = 0; i < m; ++i) {
      if (std::find(working.begin(), working.end(), static_cast<int>(i)) != working.end()) {
        continue;
      }
      const double dir = p.a.row(i).dot(step);
      if (dir > tol) {
        const double gap = p.b[i] - p.a.row(i).dot(z);
        const double a_i = std::max(0.0, gap / dir);
        if (a_i < alpha) {
          alpha = a_i;
          blocking = static_cast<int>(i);
        }
      }
    }
    z += alpha * step;
    if (blocking >= 0 && alpha < 1.0) working.push_back(blocking);
  }

  result.z = z;
  result.status = QpStatus::MaxIter;
  result.kkt_residual = kkt_residual(p, z, working, lambda);
  return result;
}

}  // namespace rlmpc
