#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rlmpc/core_types.hpp"
#include "rlmpc/engine_sim.hpp"
#include "rlmpc/nn.hpp"

namespace rlmpc {

inline constexpr int kHiddenDim = 8;
inline constexpr int kStateDim = 12;  // 8 GRU hidden + 4 previous model inputs
inline constexpr int kInputDim = 4;
inline constexpr int kOutputDim = 3;

/// GRU cell, hidden size 8:
///   r = sigmoid(w_ir e + b_ir + w_hr h + b_hr)
///   z = sigmoid(w_iz e + b_iz + w_hz h + b_hz)
///   n = tanh(w_in e + b_in + r .* (w_hn h + b_hn))
///   h' = (1 - z) .* n + z .* h
struct GruCell {
  nn::Matrix w_ir, w_iz, w_in;  // hidden x input
  nn::Matrix w_hr, w_hz, w_hn;  // hidden x hidden
  nn::Vector b_ir, b_iz, b_in, b_hr, b_hz, b_hn;
};

/// Six FC layers around one GRU layer. Encoder and decoder hidden layers are
/// tanh; the decoder output layer is linear. The scaling snapshot taken at
/// training time travels with the weights.
struct NetworkWeights {
  std::vector<nn::Dense> encoder;  // 3 layers, default 4 -> 16 -> 16 -> 8
  GruCell gru;
  std::vector<nn::Dense> decoder;  // 3 layers, default 8 -> 16 -> 16 -> 3
  ScalingTable scaling;

  void validate() const;  // shape consistency, hidden dim 8, finiteness
};

/// MPC-facing model state: GRU hidden units plus the previous model input
/// (imep_prev, soi, doi_h2, doi_diesel), physical units.
struct AugmentedState {
  Eigen::Matrix<double, kHiddenDim, 1> h = Eigen::Matrix<double, kHiddenDim, 1>::Zero();
  Eigen::Vector4d u_prev = Eigen::Vector4d::Zero();

  Eigen::Matrix<double, kStateDim, 1> to_vector() const {
    Eigen::Matrix<double, kStateDim, 1> v;
    v << h, u_prev;
    return v;
  }
  static AugmentedState from_vector(const Eigen::Matrix<double, kStateDim, 1>& v) {
    AugmentedState x;
    x.h = v.head<kHiddenDim>();
    x.u_prev = v.tail<kInputDim>();
    return x;
  }
};

/// Exact Jacobians of forward_step at a point:
///   x_next = A dx + B ddu,  y = C dx + D ddu  (first order)
struct Linearization {
  Eigen::Matrix<double, kStateDim, kStateDim> a;
  Eigen::Matrix<double, kStateDim, kInputDim> b;
  Eigen::Matrix<double, kOutputDim, kStateDim> c;
  Eigen::Matrix<double, kOutputDim, kInputDim> d;
};

struct TrainHyper {
  int epochs{400};
  double learning_rate{1e-3};
  int truncation{32};   // BPTT window length, cycles
  int batch_size{64};
  int stride{16};       // window start spacing in the training split
  double val_fraction{0.2};
  std::uint64_t seed{0};
};

struct EpochLoss {
  double train_mse{0.0};
  double val_mse{0.0};
};

/// Prediction-model surface the OCP solver linearizes along its nominal
/// trajectory. NeuralPlant is the production implementation; tests substitute
/// known linear dynamics.
class DynamicsModel {
 public:
  virtual ~DynamicsModel() = default;
  virtual std::pair<AugmentedState, Eigen::Vector3d> forward_step(
      const AugmentedState& x, const Eigen::Vector4d& delta_u) const = 0;
  virtual Linearization linearize(const AugmentedState& x,
                                  const Eigen::Vector4d& delta_u) const = 0;
  virtual Eigen::Vector3d output_at(const AugmentedState& x) const = 0;
  virtual Eigen::Matrix<double, kOutputDim, kHiddenDim> output_jacobian(
      const AugmentedState& x) const = 0;
  virtual const ScalingTable& scaling() const = 0;
};

class NeuralPlant final : public DynamicsModel {
 public:
  NeuralPlant() = default;
  explicit NeuralPlant(NetworkWeights w);

  /// Seed-deterministic fan-in uniform init. Widths are the encoder/decoder
  /// hidden widths; layer counts are fixed at three FC on each side.
  static NeuralPlant random_init(const ScalingTable& scaling, std::uint64_t seed,
                                 int enc_hidden = 16, int gru_input = 8, int dec_hidden = 16);

  /// u_curr = u_prev + delta_u; h' = GRU(h, enc(norm(u_curr)));
  /// y = denorm(dec(h')); x_next = (h', u_curr).
  std::pair<AugmentedState, Eigen::Vector3d> forward_step(
      const AugmentedState& x, const Eigen::Vector4d& delta_u) const override;

  /// Iterated forward_step over N increments plus one terminal zero-increment
  /// step: returns N + 1 outputs.
  std::vector<Eigen::Vector3d> rollout(const AugmentedState& x0,
                                       std::span<const Eigen::Vector4d> delta_us) const;

  Linearization linearize(const AugmentedState& x,
                          const Eigen::Vector4d& delta_u) const override;

  /// Decoder readout of the current hidden state, physical units. This is the
  /// model output that produced x.h (forward_step computes y from the new
  /// hidden state), so it equals the previous stage's prediction.
  Eigen::Vector3d output_at(const AugmentedState& x) const override;
  /// d output_at / d h, 3 x 8, physical units per hidden unit.
  Eigen::Matrix<double, kOutputDim, kHiddenDim> output_jacobian(
      const AugmentedState& x) const override;

  /// Max relative error between the analytic Jacobians of (x_next, y) w.r.t.
  /// (x, delta_u, weights) and central finite differences.
  double gradient_check(const AugmentedState& x, const Eigen::Vector4d& delta_u,
                        double perturbation = 1e-5) const;

  /// Truncated BPTT on normalized channels, minimizing output MSE with Adam.
  /// The model input at row i uses the measured IMEP of row i-1, so training
  /// consumes rows 1..n-1 of a continuous dataset. Deterministic per seed.
  std::vector<EpochLoss> train(const Dataset& data, const TrainHyper& hyper);

  const NetworkWeights& weights() const { return weights_; }
  NetworkWeights& weights() { return weights_; }
  const ScalingTable& scaling() const override { return weights_.scaling; }

  void save(const std::string& path) const;
  static NeuralPlant load(const std::string& path);

 private:
  NetworkWeights weights_;
};

}  // namespace rlmpc
