#pragma once

#include <Eigen/Core>

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "rlmpc/core_types.hpp"
#include "rlmpc/rng.hpp"

// Small dense-network toolkit shared by the plant model and the RL agent.
// Batches are stored column-wise: X is (features x batch).

namespace rlmpc::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation { Tanh, Relu, Linear };

inline Matrix activate(const Matrix& z, Activation act) {
  switch (act) {
    case Activation::Tanh: return z.array().tanh().matrix();
    case Activation::Relu: return z.cwiseMax(0.0);
    case Activation::Linear: return z;
  }
  return z;
}

/// Elementwise activation derivative from pre-activation z and output a.
inline Matrix activate_grad(const Matrix& z, const Matrix& a, Activation act) {
  switch (act) {
    case Activation::Tanh: return (1.0 - a.array().square()).matrix();
    case Activation::Relu: return (z.array() > 0.0).cast<double>().matrix();
    case Activation::Linear: return Matrix::Ones(z.rows(), z.cols());
  }
  return Matrix::Ones(z.rows(), z.cols());
}

struct Dense {
  Matrix w;  // out x in
  Vector b;  // out
  Activation act{Activation::Linear};
};

/// Uniform fan-in init, U(-1/sqrt(in), 1/sqrt(in)).
inline Dense make_dense(int in, int out, Activation act, std::mt19937_64& rng) {
  Dense d;
  d.w.resize(out, in);
  d.b = Vector::Zero(out);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  for (Eigen::Index j = 0; j < d.w.cols(); ++j) {
    for (Eigen::Index i = 0; i < d.w.rows(); ++i) {
      d.w(i, j) = uniform(rng, -bound, bound);
    }
  }
  for (Eigen::Index i = 0; i < d.b.size(); ++i) {
    d.b[i] = uniform(rng, -bound, bound);
  }
  d.act = act;
  return d;
}

/// Mutable view of one parameter block, for optimizers and Polyak updates.
struct ParamRef {
  double* data;
  Eigen::Index size;
};

inline ParamRef param_ref(Matrix& m) { return {m.data(), m.size()}; }
inline ParamRef param_ref(Vector& v) { return {v.data(), v.size()}; }

inline void collect_params(Dense& d, std::vector<ParamRef>& out) {
  out.push_back(param_ref(d.w));
  out.push_back(param_ref(d.b));
}

/// Adam over an ordered list of parameter blocks. Gradient blocks passed to
/// step() must align with the attached parameter list.
class Adam {
 public:
  explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void attach(std::vector<ParamRef> params) {
    params_ = std::move(params);
    m_.clear();
    v_.clear();
    for (const ParamRef& p : params_) {
      m_.push_back(Vector::Zero(p.size));
      v_.push_back(Vector::Zero(p.size));
    }
    t_ = 0;
  }

  void step(const std::vector<ParamRef>& grads) {
    if (grads.size() != params_.size()) {
      throw NumericError("Adam: gradient/parameter block count mismatch");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Eigen::Map<Vector> p(params_[k].data, params_[k].size);
      Eigen::Map<const Vector> g(grads[k].data, grads[k].size);
      m_[k] = beta1_ * m_[k] + (1.0 - beta1_) * g;
      v_[k] = beta2_ * v_[k] + (1.0 - beta2_) * g.cwiseProduct(g);
      p.array() -= lr_ * (m_[k].array() / bc1) /
                   ((v_[k].array() / bc2).sqrt() + eps_);
    }
  }

  double learning_rate() const { return lr_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  long t_{0};
  std::vector<ParamRef> params_;
  std::vector<Vector> m_, v_;
};

/// Plain fully connected stack.
class Mlp {
 public:
  Mlp() = default;

  /// dims = {in, h1, ..., out}; hidden activation on all but the last layer.
  Mlp(const std::vector<int>& dims, Activation hidden, Activation output,
      std::mt19937_64& rng, bool zero_final = false) {
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      const bool last = i + 2 == dims.size();
      layers_.push_back(make_dense(dims[i], dims[i + 1], last ? output : hidden, rng));
    }
    if (zero_final && !layers_.empty()) {
      layers_.back().w.setZero();
      layers_.back().b.setZero();
    }
  }

  struct Cache {
    std::vector<Matrix> a;  // a[0] = input, a[i] = output of layer i
    std::vector<Matrix> z;  // pre-activations per layer
  };

  Matrix forward(const Matrix& x, Cache* cache = nullptr) const {
    Matrix a = x;
    if (cache) {
      cache->a.clear();
      cache->z.clear();
      cache->a.push_back(a);
    }
    for (const Dense& l : layers_) {
      Matrix z = l.w * a;
      z.colwise() += l.b;
      a = activate(z, l.act);
      if (cache) {
        cache->z.push_back(std::move(z));
        cache->a.push_back(a);
      }
    }
    return a;
  }

  /// Backprop dL/d(output) through the stack; fills grads (same layout as
  /// layers) and returns dL/d(input).
  Matrix backward(const Matrix& dy, const Cache& cache, std::vector<Dense>& grads) const {
    grads.resize(layers_.size());
    Matrix delta = dy;
    for (int i = static_cast<int>(layers_.size()) - 1; i >= 0; --i) {
      const auto k = static_cast<std::size_t>(i);
      delta = delta.cwiseProduct(activate_grad(cache.z[k], cache.a[k + 1], layers_[k].act));
      grads[k].w = delta * cache.a[k].transpose();
      grads[k].b = delta.rowwise().sum();
      delta = (layers_[k].w.transpose() * delta).eval();
    }
    return delta;
  }

  std::vector<Dense>& layers() { return layers_; }
  const std::vector<Dense>& layers() const { return layers_; }

  std::vector<ParamRef> params() {
    std::vector<ParamRef> out;
    for (Dense& l : layers_) collect_params(l, out);
    return out;
  }

 private:
  std::vector<Dense> layers_;
};

/// theta_target <- tau * theta + (1 - tau) * theta_target, elementwise.
inline void polyak_update(const std::vector<ParamRef>& online,
                          const std::vector<ParamRef>& target, double tau) {
  for (std::size_t k = 0; k < online.size(); ++k) {
    Eigen::Map<const Vector> on(online[k].data, online[k].size);
    Eigen::Map<Vector> tg(target[k].data, target[k].size);
    tg = tau * on + (1.0 - tau) * tg;
  }
}

}  // namespace rlmpc::nn
