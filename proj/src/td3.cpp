#include "rlmpc/td3.hpp"

#include <algorithm>
#include <cmath>

#include "rlmpc/io.hpp"
#include "rlmpc/rng.hpp"

namespace rlmpc {

using nn::Matrix;
using nn::Vector;

void Td3Hyperparams::validate() const {
  if (!(gamma > 0.0 && gamma < 1.0)) throw ConfigError("td3 gamma must lie in (0, 1)");
  if (!(tau > 0.0 && tau <= 1.0)) throw ConfigError("td3 tau must lie in (0, 1]");
  if (policy_delay < 1) throw ConfigError("td3 policy_delay must be >= 1");
  if (!(action_limit > 0.0)) throw ConfigError("td3 action_limit must be positive");
  if (buffer_capacity == 0 || batch_size < 1) {
    throw ConfigError("td3 buffer_capacity and batch_size must be positive");
  }
  if (target_noise_std < 0 || target_noise_clip < 0 || exploration_noise_std < 0) {
    throw ConfigError("td3 noise parameters must be non-negative");
  }
  if (state_dim < 1 || action_dim < 1 || hidden_width < 1) {
    throw ConfigError("td3 network dimensions must be positive");
  }
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw ConfigError("replay buffer capacity must be positive");
  data_.reserve(capacity_);
}

void ReplayBuffer::store(Transition t) {
  if (data_.size() < capacity_) {
    data_.push_back(std::move(t));
  } else {
    data_[head_] = std::move(t);
    head_ = (head_ + 1) % capacity_;
  }
}

const Transition& ReplayBuffer::at(std::size_t i) const {
  if (i >= size()) throw ConfigError("replay buffer index out of range");
  if (data_.size() < capacity_) return data_[i];
  return data_[(head_ + i) % capacity_];
}

Td3Agent::Td3Agent(const Td3Hyperparams& hyper)
    : hyper_(hyper),
      actor_opt_(hyper.actor_lr),
      critic1_opt_(hyper.critic_lr),
      critic2_opt_(hyper.critic_lr),
      buffer_(hyper.buffer_capacity),
      noise_rng_(derive_seed(hyper.seed, 1)),
      sample_rng_(derive_seed(hyper.seed, 2)) {
  hyper_.validate();
  std::mt19937_64 init_rng(derive_seed(hyper.seed, 0));
  const std::vector<int> actor_dims = {hyper_.state_dim, hyper_.hidden_width,
                                       hyper_.hidden_width, hyper_.action_dim};
  const std::vector<int> critic_dims = {hyper_.state_dim + hyper_.action_dim,
                                        hyper_.hidden_width, hyper_.hidden_width, 1};
  // Zero final actor layer: the untrained policy emits exactly zero offset,
  // so the hybrid controller starts as the plain MPC.
  actor_ = nn::Mlp(actor_dims, nn::Activation::Relu, nn::Activation::Tanh, init_rng, true);
  critic1_ = nn::Mlp(critic_dims, nn::Activation::Relu, nn::Activation::Linear, init_rng);
  critic2_ = nn::Mlp(critic_dims, nn::Activation::Relu, nn::Activation::Linear, init_rng);
  actor_target_ = actor_;
  critic1_target_ = critic1_;
  critic2_target_ = critic2_;
  actor_opt_.attach(actor_.params());
  critic1_opt_.attach(critic1_.params());
  critic2_opt_.attach(critic2_.params());
}

Eigen::VectorXd Td3Agent::select_action(const Eigen::VectorXd& s, double noise_std) {
  if (s.size() != hyper_.state_dim) throw ConfigError("select_action: wrong state dimension");
  Vector a = actor_.forward(s) * hyper_.action_limit;
  if (noise_std > 0.0) {
    for (Eigen::Index i = 0; i < a.size(); ++i) a[i] += noise_std * gauss(noise_rng_);
  }
  return a.cwiseMax(-hyper_.action_limit).cwiseMin(hyper_.action_limit);
}

UpdateReport Td3Agent::update() {
  UpdateReport report;
  const auto batch = static_cast<std::size_t>(hyper_.batch_size);
  if (buffer_.size() < batch) {
    report.skipped = true;
    return report;
  }

  const int sd = hyper_.state_dim;
  const int ad = hyper_.action_dim;
  const auto bn = static_cast<Eigen::Index>(batch);
  Matrix s(sd, bn), s2(sd, bn), a(ad, bn);
  Eigen::RowVectorXd r(bn);
  for (Eigen::Index k = 0; k < bn; ++k) {
    const auto idx = static_cast<std::size_t>(
        uniform_int(sample_rng_, 0, static_cast<std::int64_t>(buffer_.size()) - 1));
    const Transition& t = buffer_.at(idx);
    s.col(k) = t.s;
    s2.col(k) = t.s_next;
    a.col(k) = t.a;
    r[k] = t.r;
  }

  // Target action with clipped smoothing noise.
  Matrix a2 = actor_target_.forward(s2) * hyper_.action_limit;
  for (Eigen::Index j = 0; j < a2.cols(); ++j) {
    for (Eigen::Index i = 0; i < a2.rows(); ++i) {
      const double eps = std::clamp(hyper_.target_noise_std * gauss(noise_rng_),
                                    -hyper_.target_noise_clip, hyper_.target_noise_clip);
      a2(i, j) = std::clamp(a2(i, j) + eps, -hyper_.action_limit, hyper_.action_limit);
    }
  }

  Matrix sa2(sd + ad, bn);
  sa2 << s2, a2;
  const Eigen::RowVectorXd q1t = critic1_target_.forward(sa2).row(0);
  const Eigen::RowVectorXd q2t = critic2_target_.forward(sa2).row(0);
  // Continuing-task convention: the episode boundary is not a terminal state,
  // so the bootstrap ignores the done flag.
  const Eigen::RowVectorXd target = r + hyper_.gamma * q1t.cwiseMin(q2t);

  Matrix sa(sd + ad, bn);
  sa << s, a;
  std::vector<nn::Dense> grads;
  const double inv_b = 1.0 / static_cast<double>(batch);

  nn::Mlp::Cache c1_cache;
  const Eigen::RowVectorXd q1 = critic1_.forward(sa, &c1_cache).row(0);
  const Eigen::RowVectorXd e1 = q1 - target;
  report.critic1_loss = e1.squaredNorm() * inv_b;
  critic1_.backward(Matrix(e1 * (2.0 * inv_b)), c1_cache, grads);
  critic1_opt_.step([&grads] {
    std::vector<nn::ParamRef> refs;
    for (nn::Dense& d : grads) nn::collect_params(d, refs);
    return refs;
  }());

  nn::Mlp::Cache c2_cache;
  const Eigen::RowVectorXd q2 = critic2_.forward(sa, &c2_cache).row(0);
  const Eigen::RowVectorXd e2 = q2 - target;
  report.critic2_loss = e2.squaredNorm() * inv_b;
  critic2_.backward(Matrix(e2 * (2.0 * inv_b)), c2_cache, grads);
  critic2_opt_.step([&grads] {
    std::vector<nn::ParamRef> refs;
    for (nn::Dense& d : grads) nn::collect_params(d, refs);
    return refs;
  }());

  ++updates_;
  if (updates_ % hyper_.policy_delay == 0) {
    // Actor ascends Q1(s, mu(s)).
    nn::Mlp::Cache pi_cache;
    Matrix a_pi = actor_.forward(s, &pi_cache) * hyper_.action_limit;
    Matrix sapi(sd + ad, bn);
    sapi << s, a_pi;
    nn::Mlp::Cache q_cache;
    const Eigen::RowVectorXd q_pi = critic1_.forward(sapi, &q_cache).row(0);
    report.actor_loss = -q_pi.sum() * inv_b;

    std::vector<nn::Dense> discard;
    const Matrix dsa = critic1_.backward(Matrix::Constant(1, bn, -inv_b), q_cache, discard);
    const Matrix da = dsa.bottomRows(ad) * hyper_.action_limit;
    std::vector<nn::Dense> actor_grads;
    actor_.backward(da, pi_cache, actor_grads);
    actor_opt_.step([&actor_grads] {
      std::vector<nn::ParamRef> refs;
      for (nn::Dense& d : actor_grads) nn::collect_params(d, refs);
      return refs;
    }());

    nn::polyak_update(actor_.params(), actor_target_.params(), hyper_.tau);
    nn::polyak_update(critic1_.params(), critic1_target_.params(), hyper_.tau);
    nn::polyak_update(critic2_.params(), critic2_target_.params(), hyper_.tau);
  }
  return report;
}

namespace {

void save_mlp(io::Json& layers, const std::string& prefix, const nn::Mlp& mlp) {
  const auto& ls = mlp.layers();
  for (std::size_t i = 0; i < ls.size(); ++i) {
    io::Json w = io::matrix_json(ls[i].w);
    w["name"] = prefix + "." + std::to_string(i) + ".w";
    layers.push_back(std::move(w));
    io::Json b = io::matrix_json(ls[i].b);
    b["name"] = prefix + "." + std::to_string(i) + ".b";
    layers.push_back(std::move(b));
  }
}

void load_mlp(const io::Json& j, const std::string& prefix, nn::Mlp& mlp) {
  auto& ls = mlp.layers();
  for (std::size_t i = 0; i < ls.size(); ++i) {
    const std::string base = prefix + "." + std::to_string(i);
    const Eigen::MatrixXd w = io::matrix_from_json(io::find_layer(j, base + ".w"), base + ".w");
    const Eigen::MatrixXd b = io::matrix_from_json(io::find_layer(j, base + ".b"), base + ".b");
    if (w.rows() != ls[i].w.rows() || w.cols() != ls[i].w.cols() || b.rows() != ls[i].b.size() ||
        b.cols() != 1) {
      throw ConfigError("agent checkpoint shape mismatch at " + base);
    }
    ls[i].w = w;
    ls[i].b = b.col(0);
  }
}

}  // namespace

void Td3Agent::save(const std::string& path, const ScalingTable& scaling) const {
  io::Json j;
  j["format"] = "rlmpc-agent";
  j["version"] = 1;
  io::Json hp;
  hp["gamma"] = hyper_.gamma;
  hp["tau"] = hyper_.tau;
  hp["policy_delay"] = hyper_.policy_delay;
  hp["target_noise_std"] = hyper_.target_noise_std;
  hp["target_noise_clip"] = hyper_.target_noise_clip;
  hp["exploration_noise_std"] = hyper_.exploration_noise_std;
  hp["buffer_capacity"] = hyper_.buffer_capacity;
  hp["batch_size"] = hyper_.batch_size;
  hp["actor_lr"] = hyper_.actor_lr;
  hp["critic_lr"] = hyper_.critic_lr;
  hp["action_limit"] = hyper_.action_limit;
  hp["update_after"] = hyper_.update_after;
  hp["state_dim"] = hyper_.state_dim;
  hp["action_dim"] = hyper_.action_dim;
  hp["hidden_width"] = hyper_.hidden_width;
  hp["seed"] = hyper_.seed;
  j["hyper"] = std::move(hp);
  j["scaling"] = io::scaling_json(scaling);
  io::Json layers = io::Json::array();
  save_mlp(layers, "actor", actor_);
  save_mlp(layers, "critic1", critic1_);
  save_mlp(layers, "critic2", critic2_);
  save_mlp(layers, "actor_target", actor_target_);
  save_mlp(layers, "critic1_target", critic1_target_);
  save_mlp(layers, "critic2_target", critic2_target_);
  j["layers"] = std::move(layers);
  io::write_json_file(path, j);
}

Td3Agent Td3Agent::load(const std::string& path, ScalingTable* scaling_out) {
  const io::Json j = io::read_json_file(path);
  if (!j.contains("format") || j["format"] != "rlmpc-agent") {
    throw ConfigError("not an agent checkpoint: " + path);
  }
  if (!j.contains("version") || j["version"].get<int>() != 1) {
    throw ConfigError("unsupported agent checkpoint version in " + path);
  }
  const io::Json& hp = j.at("hyper");
  Td3Hyperparams hyper;
  hyper.gamma = hp.at("gamma").get<double>();
  hyper.tau = hp.at("tau").get<double>();
  hyper.policy_delay = hp.at("policy_delay").get<int>();
  hyper.target_noise_std = hp.at("target_noise_std").get<double>();
  hyper.target_noise_clip = hp.at("target_noise_clip").get<double>();
  hyper.exploration_noise_std = hp.at("exploration_noise_std").get<double>();
  hyper.buffer_capacity = hp.at("buffer_capacity").get<std::size_t>();
  hyper.batch_size = hp.at("batch_size").get<int>();
  hyper.actor_lr = hp.at("actor_lr").get<double>();
  hyper.critic_lr = hp.at("critic_lr").get<double>();
  hyper.action_limit = hp.at("action_limit").get<double>();
  hyper.update_after = hp.at("update_after").get<int>();
  hyper.state_dim = hp.at("state_dim").get<int>();
  hyper.action_dim = hp.at("action_dim").get<int>();
  hyper.hidden_width = hp.at("hidden_width").get<int>();
  hyper.seed = hp.at("seed").get<std::uint64_t>();

  Td3Agent agent(hyper);
  load_mlp(j, "actor", agent.actor_);
  load_mlp(j, "critic1", agent.critic1_);
  load_mlp(j, "critic2", agent.critic2_);
  load_mlp(j, "actor_target", agent.actor_target_);
  load_mlp(j, "critic1_target", agent.critic1_target_);
  load_mlp(j, "critic2_target", agent.critic2_target_);
  if (scaling_out != nullptr && j.contains("scaling")) {
    *scaling_out = io::scaling_from_json(j["scaling"]);
  }
  return agent;
}

Eigen::Matrix<double, 5, 1> encode_agent_state(const AgentState& s, const ScalingTable& sc) {
  Eigen::Matrix<double, 5, 1> v;
  v << sc.normalize(s.imep_prev, Channel::Imep), sc.normalize(s.nox_prev, Channel::Nox),
      sc.normalize(s.mprr_prev, Channel::Mprr), sc.normalize(s.ref_imep_curr, Channel::Imep),
      sc.normalize(s.ref_imep_prev, Channel::Imep);
  return v;
}

}  // namespace rlmpc
