#include "rlmpc/neural_plant.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rlmpc/io.hpp"

namespace rlmpc {

using nn::Dense;
using nn::Matrix;
using nn::Vector;

namespace {

struct FcCache {
  std::vector<Matrix> a;  // a[0] = input, a[i] = layer i output
  std::vector<Matrix> z;
};

Matrix fc_forward(const std::vector<Dense>& layers, const Matrix& x, FcCache* cache) {
  Matrix a = x;
  if (cache) {
    cache->a.assign(1, a);
    cache->z.clear();
  }
  for (const Dense& l : layers) {
    Matrix z = l.w * a;
    z.colwise() += l.b;
    a = nn::activate(z, l.act);
    if (cache) {
      cache->z.push_back(std::move(z));
      cache->a.push_back(a);
    }
  }
  return a;
}

/// Accumulates into grads (already shaped/zeroed); returns dL/d(input).
Matrix fc_backward(const std::vector<Dense>& layers, const Matrix& dy, const FcCache& cache,
                   std::vector<Dense>& grads) {
  Matrix delta = dy;
  for (int i = static_cast<int>(layers.size()) - 1; i >= 0; --i) {
    const auto k = static_cast<std::size_t>(i);
    delta = delta.cwiseProduct(nn::activate_grad(cache.z[k], cache.a[k + 1], layers[k].act));
    grads[k].w += delta * cache.a[k].transpose();
    grads[k].b += delta.rowwise().sum();
    delta = (layers[k].w.transpose() * delta).eval();
  }
  return delta;
}

/// Jacobian of the stack at one point, d(out)/d(in).
Matrix fc_point_jacobian(const std::vector<Dense>& layers, const Vector& x) {
  Matrix jac = Matrix::Identity(x.size(), x.size());
  Vector a = x;
  for (const Dense& l : layers) {
    Vector z = l.w * a + l.b;
    a = nn::activate(z, l.act);
    Matrix dact = nn::activate_grad(z, a, l.act);
    jac = dact.col(0).asDiagonal() * (l.w * jac).eval();
  }
  return jac;
}

Matrix sigmoid(const Matrix& z) { return (1.0 + (-z.array()).exp()).inverse().matrix(); }

struct GruCache {
  Matrix h_prev, e, r, zg, n, hn_lin;
};

Matrix gru_forward(const GruCell& g, const Matrix& h, const Matrix& e, GruCache* cache) {
  Matrix ar = g.w_ir * e + g.w_hr * h;
  ar.colwise() += g.b_ir + g.b_hr;
  Matrix az = g.w_iz * e + g.w_hz * h;
  az.colwise() += g.b_iz + g.b_hz;
  Matrix r = sigmoid(ar);
  Matrix zg = sigmoid(az);
  Matrix hn_lin = g.w_hn * h;
  hn_lin.colwise() += g.b_hn;
  Matrix an = g.w_in * e + r.cwiseProduct(hn_lin);
  an.colwise() += g.b_in;
  Matrix n = an.array().tanh().matrix();
  Matrix h_next = ((1.0 - zg.array()) * n.array() + zg.array() * h.array()).matrix();
  if (cache) {
    cache->h_prev = h;
    cache->e = e;
    cache->r = std::move(r);
    cache->zg = std::move(zg);
    cache->n = std::move(n);
    cache->hn_lin = std::move(hn_lin);
  }
  return h_next;
}

/// Accumulates weight grads; writes dL/dh_prev and dL/de.
void gru_backward(const GruCell& g, const GruCache& c, const Matrix& dh_next, GruCell& grads,
                  Matrix& dh_prev, Matrix& de) {
  const Matrix dzg = dh_next.cwiseProduct(c.h_prev - c.n);
  const Matrix dn = dh_next.cwiseProduct((1.0 - c.zg.array()).matrix());
  dh_prev = dh_next.cwiseProduct(c.zg);

  const Matrix dan = dn.cwiseProduct((1.0 - c.n.array().square()).matrix());
  const Matrix dr = dan.cwiseProduct(c.hn_lin);
  const Matrix dhn_lin = dan.cwiseProduct(c.r);
  const Matrix dar = dr.cwiseProduct((c.r.array() * (1.0 - c.r.array())).matrix());
  const Matrix daz = dzg.cwiseProduct((c.zg.array() * (1.0 - c.zg.array())).matrix());

  grads.w_in += dan * c.e.transpose();
  grads.b_in += dan.rowwise().sum();
  grads.w_hn += dhn_lin * c.h_prev.transpose();
  grads.b_hn += dhn_lin.rowwise().sum();
  grads.w_ir += dar * c.e.transpose();
  grads.b_ir += dar.rowwise().sum();
  grads.w_hr += dar * c.h_prev.transpose();
  grads.b_hr += dar.rowwise().sum();
  grads.w_iz += daz * c.e.transpose();
  grads.b_iz += daz.rowwise().sum();
  grads.w_hz += daz * c.h_prev.transpose();
  grads.b_hz += daz.rowwise().sum();

  dh_prev += g.w_hn.transpose() * dhn_lin + g.w_hr.transpose() * dar + g.w_hz.transpose() * daz;
  de = g.w_in.transpose() * dan + g.w_ir.transpose() * dar + g.w_iz.transpose() * daz;
}

/// d(h_next)/d(h) and d(h_next)/d(e) at one point.
void gru_point_jacobians(const GruCell& g, const Vector& h, const Vector& e, Matrix& dh,
                         Matrix& de) {
  GruCache c;
  gru_forward(g, h, e, &c);
  const Vector r = c.r.col(0);
  const Vector zg = c.zg.col(0);
  const Vector n = c.n.col(0);
  const Vector hn_lin = c.hn_lin.col(0);

  const Vector dr_act = (r.array() * (1.0 - r.array())).matrix();
  const Vector dz_act = (zg.array() * (1.0 - zg.array())).matrix();
  const Vector dn_act = (1.0 - n.array().square()).matrix();
  const Vector h_minus_n = h - n;
  const Vector one_minus_z = (1.0 - zg.array()).matrix();

  const Matrix jr_h = dr_act.asDiagonal() * g.w_hr;
  const Matrix jr_e = dr_act.asDiagonal() * g.w_ir;
  const Matrix jz_h = dz_act.asDiagonal() * g.w_hz;
  const Matrix jz_e = dz_act.asDiagonal() * g.w_iz;
  const Matrix jn_h =
      dn_act.asDiagonal() * Matrix(r.asDiagonal() * g.w_hn + hn_lin.asDiagonal() * jr_h);
  const Matrix jn_e = dn_act.asDiagonal() * Matrix(g.w_in + hn_lin.asDiagonal() * jr_e);

  dh = Matrix(zg.asDiagonal()) + h_minus_n.asDiagonal() * jz_h +
       one_minus_z.asDiagonal() * jn_h;
  de = h_minus_n.asDiagonal() * jz_e + one_minus_z.asDiagonal() * jn_e;
}

GruCell make_gru(int input, int hidden, std::mt19937_64& rng) {
  GruCell g;
  const double bi = 1.0 / std::sqrt(static_cast<double>(input));
  const double bh = 1.0 / std::sqrt(static_cast<double>(hidden));
  auto fill = [&rng](Matrix& m, int rows, int cols, double bound) {
    m.resize(rows, cols);
    for (Eigen::Index j = 0; j < cols; ++j) {
      for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = uniform(rng, -bound, bound);
    }
  };
  auto fill_b = [&rng](Vector& v, int n, double bound) {
    v.resize(n);
    for (int i = 0; i < n; ++i) v[i] = uniform(rng, -bound, bound);
  };
  fill(g.w_ir, hidden, input, bi);
  fill(g.w_iz, hidden, input, bi);
  fill(g.w_in, hidden, input, bi);
  fill(g.w_hr, hidden, hidden, bh);
  fill(g.w_hz, hidden, hidden, bh);
  fill(g.w_hn, hidden, hidden, bh);
  fill_b(g.b_ir, hidden, bi);
  fill_b(g.b_iz, hidden, bi);
  fill_b(g.b_in, hidden, bi);
  fill_b(g.b_hr, hidden, bh);
  fill_b(g.b_hz, hidden, bh);
  fill_b(g.b_hn, hidden, bh);
  return g;
}

GruCell zeros_like(const GruCell& g) {
  GruCell z;
  z.w_ir = Matrix::Zero(g.w_ir.rows(), g.w_ir.cols());
  z.w_iz = Matrix::Zero(g.w_iz.rows(), g.w_iz.cols());
  z.w_in = Matrix::Zero(g.w_in.rows(), g.w_in.cols());
  z.w_hr = Matrix::Zero(g.w_hr.rows(), g.w_hr.cols());
  z.w_hz = Matrix::Zero(g.w_hz.rows(), g.w_hz.cols());
  z.w_hn = Matrix::Zero(g.w_hn.rows(), g.w_hn.cols());
  z.b_ir = Vector::Zero(g.b_ir.size());
  z.b_iz = Vector::Zero(g.b_iz.size());
  z.b_in = Vector::Zero(g.b_in.size());
  z.b_hr = Vector::Zero(g.b_hr.size());
  z.b_hz = Vector::Zero(g.b_hz.size());
  z.b_hn = Vector::Zero(g.b_hn.size());
  return z;
}

std::vector<Dense> zeros_like(const std::vector<Dense>& layers) {
  std::vector<Dense> z;
  z.reserve(layers.size());
  for (const Dense& l : layers) {
    Dense d;
    d.w = Matrix::Zero(l.w.rows(), l.w.cols());
    d.b = Vector::Zero(l.b.size());
    d.act = l.act;
    z.push_back(std::move(d));
  }
  return z;
}

void collect_gru_params(GruCell& g, std::vector<nn::ParamRef>& out) {
  for (Matrix* m : {&g.w_ir, &g.w_iz, &g.w_in, &g.w_hr, &g.w_hz, &g.w_hn}) {
    out.push_back(nn::param_ref(*m));
  }
  for (Vector* v : {&g.b_ir, &g.b_iz, &g.b_in, &g.b_hr, &g.b_hz, &g.b_hn}) {
    out.push_back(nn::param_ref(*v));
  }
}

/// Fixed parameter order shared by the optimizer, the finite-difference
/// gradient check, and the weight file.
std::vector<nn::ParamRef> collect_all_params(NetworkWeights& w) {
  std::vector<nn::ParamRef> out;
  for (Dense& l : w.encoder) nn::collect_params(l, out);
  collect_gru_params(w.gru, out);
  for (Dense& l : w.decoder) nn::collect_params(l, out);
  return out;
}

struct NetGrads {
  std::vector<Dense> encoder, decoder;
  GruCell gru;

  explicit NetGrads(const NetworkWeights& w)
      : encoder(zeros_like(w.encoder)), decoder(zeros_like(w.decoder)), gru(zeros_like(w.gru)) {}

  void zero() {
    for (Dense& l : encoder) {
      l.w.setZero();
      l.b.setZero();
    }
    for (Dense& l : decoder) {
      l.w.setZero();
      l.b.setZero();
    }
    GruCell z = zeros_like(gru);
    gru = std::move(z);
  }

  std::vector<nn::ParamRef> params() {
    std::vector<nn::ParamRef> out;
    for (Dense& l : encoder) nn::collect_params(l, out);
    collect_gru_params(gru, out);
    for (Dense& l : decoder) nn::collect_params(l, out);
    return out;
  }
};

}  // namespace

void NetworkWeights::validate() const {
  if (encoder.size() != 3 || decoder.size() != 3) {
    throw ConfigError("network must have exactly 3 encoder and 3 decoder FC layers");
  }
  if (encoder.front().w.cols() != kInputDim) {
    throw ConfigError("encoder input width must be 4");
  }
  for (std::size_t i = 1; i < encoder.size(); ++i) {
    if (encoder[i].w.cols() != encoder[i - 1].w.rows()) {
      throw ConfigError("encoder layer widths are inconsistent");
    }
  }
  if (gru.w_hr.rows() != kHiddenDim || gru.w_hr.cols() != kHiddenDim) {
    throw ConfigError("GRU hidden dimension must be exactly 8");
  }
  if (gru.w_ir.cols() != encoder.back().w.rows()) {
    throw ConfigError("GRU input width must match encoder output width");
  }
  if (decoder.front().w.cols() != kHiddenDim) {
    throw ConfigError("decoder input width must be 8");
  }
  for (std::size_t i = 1; i < decoder.size(); ++i) {
    if (decoder[i].w.cols() != decoder[i - 1].w.rows()) {
      throw ConfigError("decoder layer widths are inconsistent");
    }
  }
  if (decoder.back().w.rows() != kOutputDim) {
    throw ConfigError("decoder output width must be 3");
  }
  auto& self = const_cast<NetworkWeights&>(*this);
  for (const nn::ParamRef& p : collect_all_params(self)) {
    for (Eigen::Index i = 0; i < p.size; ++i) {
      if (!std::isfinite(p.data[i])) throw NumericError("non-finite network weight");
    }
  }
  scaling.validate();
}

NeuralPlant::NeuralPlant(NetworkWeights w) : weights_(std::move(w)) { weights_.validate(); }

NeuralPlant NeuralPlant::random_init(const ScalingTable& scaling, std::uint64_t seed,
                                     int enc_hidden, int gru_input, int dec_hidden) {
  std::mt19937_64 rng(seed);
  NetworkWeights w;
  w.encoder.push_back(nn::make_dense(kInputDim, enc_hidden, nn::Activation::Tanh, rng));
  w.encoder.push_back(nn::make_dense(enc_hidden, enc_hidden, nn::Activation::Tanh, rng));
  w.encoder.push_back(nn::make_dense(enc_hidden, gru_input, nn::Activation::Tanh, rng));
  w.gru = make_gru(gru_input, kHiddenDim, rng);
  w.decoder.push_back(nn::make_dense(kHiddenDim, dec_hidden, nn::Activation::Tanh, rng));
  w.decoder.push_back(nn::make_dense(dec_hidden, dec_hidden, nn::Activation::Tanh, rng));
  w.decoder.push_back(nn::make_dense(dec_hidden, kOutputDim, nn::Activation::Linear, rng));
  w.scaling = scaling;
  return NeuralPlant(std::move(w));
}

std::pair<AugmentedState, Eigen::Vector3d> NeuralPlant::forward_step(
    const AugmentedState& x, const Eigen::Vector4d& delta_u) const {
  for (int i = 0; i < kHiddenDim; ++i) {
    if (!std::isfinite(x.h[i])) {
      throw NumericError("forward_step: non-finite hidden state at index " + std::to_string(i));
    }
  }
  for (int i = 0; i < kInputDim; ++i) {
    if (!std::isfinite(x.u_prev[i])) {
      throw NumericError("forward_step: non-finite u_prev at index " + std::to_string(i));
    }
    if (!std::isfinite(delta_u[i])) {
      throw NumericError("forward_step: non-finite delta_u at index " + std::to_string(i));
    }
  }

  const Eigen::Vector4d u_curr = x.u_prev + delta_u;
  Vector v(kInputDim);
  for (int i = 0; i < kInputDim; ++i) {
    v[i] = weights_.scaling.normalize(u_curr[i], kModelInputChannels[static_cast<std::size_t>(i)]);
  }
  const Matrix e = fc_forward(weights_.encoder, v, nullptr);
  const Matrix h_next = gru_forward(weights_.gru, x.h, e, nullptr);
  const Matrix y_norm = fc_forward(weights_.decoder, h_next, nullptr);

  AugmentedState x_next;
  x_next.h = h_next.col(0);
  x_next.u_prev = u_curr;
  Eigen::Vector3d y;
  for (int i = 0; i < kOutputDim; ++i) {
    y[i] = weights_.scaling.denormalize(y_norm(i, 0),
                                        kModelOutputChannels[static_cast<std::size_t>(i)]);
  }
  return {x_next, y};
}

std::vector<Eigen::Vector3d> NeuralPlant::rollout(
    const AugmentedState& x0, std::span<const Eigen::Vector4d> delta_us) const {
  if (delta_us.empty()) throw ConfigError("rollout requires at least one input increment");
  std::vector<Eigen::Vector3d> ys;
  ys.reserve(delta_us.size() + 1);
  AugmentedState x = x0;
  for (const Eigen::Vector4d& du : delta_us) {
    auto [x_next, y] = forward_step(x, du);
    ys.push_back(y);
    x = x_next;
  }
  // terminal stage holds the last input
  ys.push_back(forward_step(x, Eigen::Vector4d::Zero()).second);
  return ys;
}

Eigen::Vector3d NeuralPlant::output_at(const AugmentedState& x) const {
  const Matrix y_norm = fc_forward(weights_.decoder, x.h, nullptr);
  Eigen::Vector3d y;
  for (int i = 0; i < kOutputDim; ++i) {
    y[i] = weights_.scaling.denormalize(y_norm(i, 0),
                                        kModelOutputChannels[static_cast<std::size_t>(i)]);
  }
  return y;
}

Eigen::Matrix<double, kOutputDim, kHiddenDim> NeuralPlant::output_jacobian(
    const AugmentedState& x) const {
  Matrix j = fc_point_jacobian(weights_.decoder, x.h);
  for (int i = 0; i < kOutputDim; ++i) {
    j.row(i) *= weights_.scaling.half_range(kModelOutputChannels[static_cast<std::size_t>(i)]);
  }
  return j;
}

Linearization NeuralPlant::linearize(const AugmentedState& x,
                                     const Eigen::Vector4d& delta_u) const {
  const Eigen::Vector4d u_curr = x.u_prev + delta_u;
  Vector v(kInputDim);
  Vector norm_slopes(kInputDim);
  for (int i = 0; i < kInputDim; ++i) {
    const Channel ch = kModelInputChannels[static_cast<std::size_t>(i)];
    v[i] = weights_.scaling.normalize(u_curr[i], ch);
    norm_slopes[i] = weights_.scaling.norm_slope(ch);
  }

  const Matrix j_enc = fc_point_jacobian(weights_.encoder, v);  // enc_out x 4 (normalized)
  const Vector e = fc_forward(weights_.encoder, v, nullptr).col(0);

  Matrix gh, ge;
  gru_point_jacobians(weights_.gru, x.h, e, gh, ge);  // 8x8, 8xenc_out

  const Vector h_next = gru_forward(weights_.gru, x.h, e, nullptr).col(0);
  Matrix j_dec = fc_point_jacobian(weights_.decoder, h_next);  // 3x8 (normalized out)
  for (int i = 0; i < kOutputDim; ++i) {
    j_dec.row(i) *= weights_.scaling.half_range(kModelOutputChannels[static_cast<std::size_t>(i)]);
  }

  // d h_next / d u_curr in physical input units
  const Matrix dh_du = ge * j_enc * Matrix(norm_slopes.asDiagonal());

  Linearization lin;
  lin.a.setZero();
  lin.a.topLeftCorner<kHiddenDim, kHiddenDim>() = gh;
  lin.a.topRightCorner<kHiddenDim, kInputDim>() = dh_du;
  lin.a.bottomRightCorner<kInputDim, kInputDim>().setIdentity();
  lin.b.setZero();
  lin.b.topRows<kHiddenDim>() = dh_du;
  lin.b.bottomRows<kInputDim>().setIdentity();
  lin.c.leftCols<kHiddenDim>() = j_dec * gh;
  lin.c.rightCols<kInputDim>() = j_dec * dh_du;
  lin.d = j_dec * dh_du;

  if (!lin.a.allFinite() || !lin.b.allFinite() || !lin.c.allFinite() || !lin.d.allFinite()) {
    throw NumericError("linearize produced non-finite Jacobian entries");
  }
  return lin;
}

namespace {

Eigen::Matrix<double, 15, 1> stack_step(const NeuralPlant& plant, const AugmentedState& x,
                                        const Eigen::Vector4d& du) {
  auto [xn, y] = plant.forward_step(x, du);
  Eigen::Matrix<double, 15, 1> s;
  s << xn.to_vector(), y;
  return s;
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1.0});
}

}  // namespace

double NeuralPlant::gradient_check(const AugmentedState& x, const Eigen::Vector4d& delta_u,
                                   double perturbation) const {
  const double eps = perturbation;
  double max_err = 0.0;

  // --- Jacobians w.r.t. state and input vs. linearize() ---
  const Linearization lin = linearize(x, delta_u);
  Eigen::Matrix<double, 15, 16> analytic;
  analytic << lin.a, lin.b, lin.c, lin.d;

  for (int j = 0; j < 16; ++j) {
    AugmentedState xp = x, xm = x;
    Eigen::Vector4d dup = delta_u, dum = delta_u;
    auto bump = [&](double sign) -> void {
      if (j < kStateDim) {
        Eigen::Matrix<double, kStateDim, 1> v = x.to_vector();
        v[j] += sign * eps;
        (sign > 0 ? xp : xm) = AugmentedState::from_vector(v);
      } else {
        (sign > 0 ? dup : dum)[j - kStateDim] += sign * eps;
      }
    };
    bump(+1.0);
    bump(-1.0);
    const Eigen::Matrix<double, 15, 1> fd =
        (stack_step(*this, xp, dup) - stack_step(*this, xm, dum)) / (2.0 * eps);
    for (int i = 0; i < 15; ++i) {
      max_err = std::max(max_err, rel_err(analytic(i, j), fd[i]));
    }
  }

  // --- Jacobians w.r.t. weights: analytic rows by backprop, FD columns ---
  NeuralPlant mutable_copy = *this;
  std::vector<nn::ParamRef> params = collect_all_params(mutable_copy.weights_);
  Eigen::Index n_params = 0;
  for (const auto& p : params) n_params += p.size;

  // forward with caches at the nominal point (batch of one)
  const Eigen::Vector4d u_curr = x.u_prev + delta_u;
  Vector v(kInputDim);
  for (int i = 0; i < kInputDim; ++i) {
    v[i] = weights_.scaling.normalize(u_curr[i], kModelInputChannels[static_cast<std::size_t>(i)]);
  }
  FcCache enc_cache, dec_cache;
  const Matrix e = fc_forward(weights_.encoder, v, &enc_cache);
  GruCache gru_cache;
  const Matrix h_next = gru_forward(weights_.gru, x.h, e, &gru_cache);
  fc_forward(weights_.decoder, h_next, &dec_cache);

  Matrix analytic_w(15, n_params);
  analytic_w.setZero();
  for (int row = 0; row < 15; ++row) {
    if (row >= kHiddenDim && row < kStateDim) continue;  // u_curr rows: no weight dependence
    NetGrads grads(weights_);
    Matrix dh = Matrix::Zero(kHiddenDim, 1);
    if (row < kHiddenDim) {
      dh(row, 0) = 1.0;
    } else {
      const int yi = row - kStateDim;
      Matrix dy_norm = Matrix::Zero(kOutputDim, 1);
      dy_norm(yi, 0) =
          weights_.scaling.half_range(kModelOutputChannels[static_cast<std::size_t>(yi)]);
      dh = fc_backward(weights_.decoder, dy_norm, dec_cache, grads.decoder);
    }
    Matrix dh_prev, de;
    gru_backward(weights_.gru, gru_cache, dh, grads.gru, dh_prev, de);
    fc_backward(weights_.encoder, de, enc_cache, grads.encoder);

    Eigen::Index off = 0;
    for (const nn::ParamRef& p : grads.params()) {
      analytic_w.row(row).segment(off, p.size) =
          Eigen::Map<const Vector>(p.data, p.size).transpose();
      off += p.size;
    }
  }

  Eigen::Index off = 0;
  for (const nn::ParamRef& p : params) {
    for (Eigen::Index k = 0; k < p.size; ++k) {
      const double saved = p.data[k];
      p.data[k] = saved + eps;
      const auto sp = stack_step(mutable_copy, x, delta_u);
      p.data[k] = saved - eps;
      const auto sm = stack_step(mutable_copy, x, delta_u);
      p.data[k] = saved;
      const Eigen::Matrix<double, 15, 1> fd = (sp - sm) / (2.0 * eps);
      for (int i = 0; i < 15; ++i) {
        max_err = std::max(max_err, rel_err(analytic_w(i, off + k), fd[i]));
      }
    }
    off += p.size;
  }
  return max_err;
}

std::vector<EpochLoss> NeuralPlant::train(const Dataset& data, const TrainHyper& hyper) {
  const int window = hyper.truncation;
  if (window < 1 || hyper.batch_size < 1 || hyper.stride < 1) {
    throw ConfigError("train: truncation, batch_size and stride must be >= 1");
  }
  if (static_cast<int>(data.size()) < 2 * window) {
    throw ConfigError("train: dataset must span at least 2x the truncation length");
  }

  // Rows i >= 1: input (imep_{i-1}, soi_i, doi_h2_i, doi_d_i), target (imep, nox, mprr)_i,
  // all normalized.
  const int m = static_cast<int>(data.size()) - 1;
  Matrix inputs(kInputDim, m), targets(kOutputDim, m);
  const ScalingTable& sc = weights_.scaling;
  for (int i = 0; i < m; ++i) {
    const IoSample& row = data[static_cast<std::size_t>(i + 1)];
    const Eigen::Vector4d u =
        model_input_vector(data[static_cast<std::size_t>(i)].y.imep, row.u);
    for (int k = 0; k < kInputDim; ++k) {
      inputs(k, i) = sc.normalize(u[k], kModelInputChannels[static_cast<std::size_t>(k)]);
    }
    const Eigen::Vector3d y = output_vector(row.y);
    for (int k = 0; k < kOutputDim; ++k) {
      targets(k, i) = sc.normalize(y[k], kModelOutputChannels[static_cast<std::size_t>(k)]);
    }
  }

  const int m_train = std::max(window, static_cast<int>(std::floor(
                                           static_cast<double>(m) * (1.0 - hyper.val_fraction))));
  std::vector<int> train_starts, val_starts;
  for (int s = 0; s + window <= m_train; s += hyper.stride) train_starts.push_back(s);
  for (int s = m_train; s + window <= m; s += window) val_starts.push_back(s);
  if (train_starts.empty()) throw ConfigError("train: no training windows available");

  std::mt19937_64 rng(hyper.seed);
  nn::Adam adam(hyper.learning_rate);
  std::vector<nn::ParamRef> params = collect_all_params(weights_);
  adam.attach(params);
  NetGrads grads(weights_);

  const int enc_out = static_cast<int>(weights_.encoder.back().w.rows());

  auto run_batch = [&](std::span<const int> starts, bool learn) -> double {
    const int batch = static_cast<int>(starts.size());
    std::vector<FcCache> enc_caches(static_cast<std::size_t>(window));
    std::vector<FcCache> dec_caches(static_cast<std::size_t>(window));
    std::vector<GruCache> gru_caches(static_cast<std::size_t>(window));
    std::vector<Matrix> errors(static_cast<std::size_t>(window));

    Matrix h = Matrix::Zero(kHiddenDim, batch);
    double sum_sq = 0.0;
    for (int t = 0; t < window; ++t) {
      Matrix vt(kInputDim, batch), yt(kOutputDim, batch);
      for (int b = 0; b < batch; ++b) {
        vt.col(b) = inputs.col(starts[static_cast<std::size_t>(b)] + t);
        yt.col(b) = targets.col(starts[static_cast<std::size_t>(b)] + t);
      }
      const auto ti = static_cast<std::size_t>(t);
      const Matrix e = fc_forward(weights_.encoder, vt, learn ? &enc_caches[ti] : nullptr);
      h = gru_forward(weights_.gru, h, e, learn ? &gru_caches[ti] : nullptr);
      const Matrix out = fc_forward(weights_.decoder, h, learn ? &dec_caches[ti] : nullptr);
      errors[ti] = out - yt;
      sum_sq += errors[ti].squaredNorm();
    }
    const double denom = static_cast<double>(kOutputDim * window * batch);
    if (!learn) return sum_sq;

    grads.zero();
    Matrix dh_carry = Matrix::Zero(kHiddenDim, batch);
    for (int t = window - 1; t >= 0; --t) {
      const auto ti = static_cast<std::size_t>(t);
      const Matrix dout = errors[ti] * (2.0 / denom);
      Matrix dh = fc_backward(weights_.decoder, dout, dec_caches[ti], grads.decoder);
      dh += dh_carry;
      Matrix dh_prev, de(enc_out, batch);
      gru_backward(weights_.gru, gru_caches[ti], dh, grads.gru, dh_prev, de);
      fc_backward(weights_.encoder, de, enc_caches[ti], grads.encoder);
      dh_carry = std::move(dh_prev);
    }
    adam.step(grads.params());
    return sum_sq;
  };

  std::vector<EpochLoss> trace;
  trace.reserve(static_cast<std::size_t>(hyper.epochs));
  std::vector<int> order = train_starts;
  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    // deterministic Fisher-Yates
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(rng, 0, i));
      std::swap(order[static_cast<std::size_t>(i)], order[j]);
    }
    double sum_sq = 0.0;
    long count = 0;
    for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(hyper.batch_size)) {
      const auto n = std::min(static_cast<std::size_t>(hyper.batch_size), order.size() - pos);
      sum_sq += run_batch(std::span<const int>(order.data() + pos, n), true);
      count += kOutputDim * window * static_cast<long>(n);
    }
    EpochLoss loss;
    loss.train_mse = sum_sq / static_cast<double>(count);
    if (!std::isfinite(loss.train_mse)) {
      throw NumericError("train: NaN loss at epoch " + std::to_string(epoch));
    }
    if (!val_starts.empty()) {
      double vs = 0.0;
      for (int s : val_starts) {
        vs += run_batch(std::span<const int>(&s, 1), false);
      }
      loss.val_mse =
          vs / static_cast<double>(kOutputDim * window * static_cast<int>(val_starts.size()));
    } else {
      loss.val_mse = loss.train_mse;
    }
    trace.push_back(loss);
  }
  return trace;
}

namespace {

void push_layer(io::Json& layers, const std::string& name, const Matrix& m) {
  io::Json e = io::matrix_json(m);
  e["name"] = name;
  layers.push_back(std::move(e));
}

Matrix take_matrix(const io::Json& container, const std::string& name) {
  return io::matrix_from_json(io::find_layer(container, name), name);
}

}  // namespace

void NeuralPlant::save(const std::string& path) const {
  io::Json j;
  j["format"] = "rlmpc-weights";
  j["version"] = 1;
  io::Json layers = io::Json::array();
  for (std::size_t i = 0; i < weights_.encoder.size(); ++i) {
    push_layer(layers, "enc." + std::to_string(i) + ".w", weights_.encoder[i].w);
    push_layer(layers, "enc." + std::to_string(i) + ".b", weights_.encoder[i].b);
  }
  const GruCell& g = weights_.gru;
  push_layer(layers, "gru.w_ir", g.w_ir);
  push_layer(layers, "gru.w_iz", g.w_iz);
  push_layer(layers, "gru.w_in", g.w_in);
  push_layer(layers, "gru.w_hr", g.w_hr);
  push_layer(layers, "gru.w_hz", g.w_hz);
  push_layer(layers, "gru.w_hn", g.w_hn);
  push_layer(layers, "gru.b_ir", g.b_ir);
  push_layer(layers, "gru.b_iz", g.b_iz);
  push_layer(layers, "gru.b_in", g.b_in);
  push_layer(layers, "gru.b_hr", g.b_hr);
  push_layer(layers, "gru.b_hz", g.b_hz);
  push_layer(layers, "gru.b_hn", g.b_hn);
  for (std::size_t i = 0; i < weights_.decoder.size(); ++i) {
    push_layer(layers, "dec." + std::to_string(i) + ".w", weights_.decoder[i].w);
    push_layer(layers, "dec." + std::to_string(i) + ".b", weights_.decoder[i].b);
  }
  j["layers"] = std::move(layers);
  j["scaling"] = io::scaling_json(weights_.scaling);
  io::write_json_file(path, j);
}

NeuralPlant NeuralPlant::load(const std::string& path) {
  const io::Json j = io::read_json_file(path);
  if (!j.contains("format") || j["format"] != "rlmpc-weights") {
    throw ConfigError("not a weight file: " + path);
  }
  if (!j.contains("version") || j["version"].get<int>() != 1) {
    throw ConfigError("unsupported weight file version in " + path);
  }
  NetworkWeights w;
  const nn::Activation acts[3] = {nn::Activation::Tanh, nn::Activation::Tanh,
                                  nn::Activation::Tanh};
  for (int i = 0; i < 3; ++i) {
    Dense d;
    d.w = take_matrix(j, "enc." + std::to_string(i) + ".w");
    d.b = take_matrix(j, "enc." + std::to_string(i) + ".b").col(0);
    d.act = acts[i];
    w.encoder.push_back(std::move(d));
  }
  GruCell& g = w.gru;
  g.w_ir = take_matrix(j, "gru.w_ir");
  g.w_iz = take_matrix(j, "gru.w_iz");
  g.w_in = take_matrix(j, "gru.w_in");
  g.w_hr = take_matrix(j, "gru.w_hr");
  g.w_hz = take_matrix(j, "gru.w_hz");
  g.w_hn = take_matrix(j, "gru.w_hn");
  g.b_ir = take_matrix(j, "gru.b_ir").col(0);
  g.b_iz = take_matrix(j, "gru.b_iz").col(0);
  g.b_in = take_matrix(j, "gru.b_in").col(0);
  g.b_hr = take_matrix(j, "gru.b_hr").col(0);
  g.b_hz = take_matrix(j, "gru.b_hz").col(0);
  g.b_hn = take_matrix(j, "gru.b_hn").col(0);
  for (int i = 0; i < 3; ++i) {
    Dense d;
    d.w = take_matrix(j, "dec." + std::to_string(i) + ".w");
    d.b = take_matrix(j, "dec." + std::to_string(i) + ".b").col(0);
    d.act = i == 2 ? nn::Activation::Linear : nn::Activation::Tanh;
    w.decoder.push_back(std::move(d));
  }
  if (!j.contains("scaling")) throw ConfigError("weight file missing scaling snapshot");
  w.scaling = io::scaling_from_json(j["scaling"]);
  return NeuralPlant(std::move(w));
}

}  // namespace rlmpc
