#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rlmpc/core_types.hpp"
#include "rlmpc/nn.hpp"

namespace rlmpc {

/// Eq.-2 load-tracking reward: r = -0.05 e^2 - 0.45 tanh(e^2),
/// e = ref_imep - imep. The tanh term saturates for large deviations.
inline double compute_reward(double ref_imep, double imep) {
  const double e = ref_imep - imep;
  const double e2 = e * e;
  return -0.05 * e2 - 0.45 * std::tanh(e2);
}

struct Td3Hyperparams {
  double gamma{0.99};
  double tau{0.005};
  int policy_delay{2};
  double target_noise_std{0.2};   // bar
  double target_noise_clip{0.5};  // bar
  double exploration_noise_std{0.3};  // bar
  std::size_t buffer_capacity{200000};
  int batch_size{256};
  double actor_lr{1e-3};
  double critic_lr{1e-3};
  double action_limit{2.0};  // bar
  int update_after{5000};    // transitions required before the harness trains
  int state_dim{5};
  int action_dim{1};
  int hidden_width{64};
  std::uint64_t seed{0};

  void validate() const;
};

struct Transition {
  Eigen::VectorXd s;
  Eigen::VectorXd a;
  double r{0.0};
  Eigen::VectorXd s_next;
  bool done{false};
};

/// Fixed-capacity ring buffer; the oldest transition is evicted first.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  void store(Transition t);
  std::size_t size() const { return data_.size(); }
  std::size_t capacity() const { return capacity_; }
  /// Logical index: 0 is the oldest retained transition.
  const Transition& at(std::size_t i) const;

 private:
  std::vector<Transition> data_;
  std::size_t capacity_;
  std::size_t head_{0};  // next overwrite position once full
};

struct UpdateReport {
  bool skipped{false};
  double critic1_loss{0.0};
  double critic2_loss{0.0};
  std::optional<double> actor_loss;  // present only on delayed actor steps
};

/// Twin critics, delayed deterministic actor, target-policy smoothing and
/// Polyak-averaged target networks. States are fed already normalized; the
/// action is the load-reference offset in bar.
class Td3Agent {
 public:
  explicit Td3Agent(const Td3Hyperparams& hyper);

  /// clip(mu(s) + N(0, noise_std), +-action_limit); noise_std = 0 is the
  /// deterministic policy and consumes no randomness.
  Eigen::VectorXd select_action(const Eigen::VectorXd& s, double noise_std);
  double select_action_scalar(const Eigen::VectorXd& s, double noise_std) {
    return select_action(s, noise_std)[0];
  }

  void store(Transition t) { buffer_.store(std::move(t)); }

  /// One TD3 gradient step on a uniform batch; no-op report when the buffer
  /// holds fewer than batch_size transitions.
  UpdateReport update();

  const ReplayBuffer& buffer() const { return buffer_; }
  const Td3Hyperparams& hyper() const { return hyper_; }
  long update_count() const { return updates_; }

  nn::Mlp& actor() { return actor_; }
  nn::Mlp& actor_target() { return actor_target_; }
  nn::Mlp& critic1() { return critic1_; }
  nn::Mlp& critic2() { return critic2_; }
  nn::Mlp& critic1_target() { return critic1_target_; }
  nn::Mlp& critic2_target() { return critic2_target_; }

  /// Checkpoint container: hyperparameters, scaling snapshot and all six
  /// networks.
  void save(const std::string& path, const ScalingTable& scaling) const;
  static Td3Agent load(const std::string& path, ScalingTable* scaling_out = nullptr);

 private:
  Td3Hyperparams hyper_;
  nn::Mlp actor_, critic1_, critic2_;
  nn::Mlp actor_target_, critic1_target_, critic2_target_;
  nn::Adam actor_opt_, critic1_opt_, critic2_opt_;
  ReplayBuffer buffer_;
  std::mt19937_64 noise_rng_, sample_rng_;
  long updates_{0};
};

/// Eq.-1 observation on normalized channels (references share the IMEP
/// scaling).
Eigen::Matrix<double, 5, 1> encode_agent_state(const AgentState& s, const ScalingTable& sc);

}  // namespace rlmpc
