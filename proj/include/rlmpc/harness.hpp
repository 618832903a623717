#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rlmpc/core_types.hpp"
#include "rlmpc/engine_sim.hpp"
#include "rlmpc/io.hpp"
#include "rlmpc/mpc_solver.hpp"
#include "rlmpc/neural_plant.hpp"
#include "rlmpc/td3.hpp"

namespace rlmpc {

/// Raised when agent training diverges (validation RMSE above twice the
/// baseline for three consecutive validation episodes).
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ScheduleConfig {
  int episodes_total{56};
  int cycles_per_episode{2000};
  int train_per_validation{4};
};

struct ReferenceConfig {
  double level_min{4.5};  // bar
  double level_max{9.0};  // bar
  int hold_min{100};      // cycles
  int hold_max{300};      // cycles
};

struct MismatchConfig {
  double train_rail_bar{1000.0};
  double eval_rail_bar{800.0};
};

struct PrbsSegmentConfig {
  int n_cycles{4000};
  int hold{3};
  PrbsLevels levels;
};

struct ExperimentConfig {
  PlantConfig plant;
  ScalingTable scaling;
  std::vector<PrbsSegmentConfig> prbs;
  TrainHyper plant_training;
  OcpConfig ocp;
  Td3Hyperparams td3;
  ScheduleConfig schedule;
  ReferenceConfig reference;
  MismatchConfig mismatch;
  std::uint64_t master_seed{1};
  std::string output_dir{"out"};

  void validate() const;
};

/// Built-in defaults for the full experiment (identification levels, weights,
/// schedule). Everything is overridable through the JSON config file.
ExperimentConfig default_config();
ExperimentConfig config_from_json(const io::Json& j);
io::Json config_to_json(const ExperimentConfig& cfg);

enum class EpisodeKind { Train, Validation, Baseline };
const char* episode_kind_name(EpisodeKind k);

struct EpisodeSummary {
  double rmse_imep{0.0};
  double mean_reward{0.0};
  long mprr_violations{0};
};

struct EpisodeLog {
  std::vector<CycleRecord> records;
  EpisodeKind kind{EpisodeKind::Baseline};
  EpisodeSummary summary;
};

enum class ReferenceKind { Training, Evaluation };

/// Training profiles are random steps in [level_min, level_max] held 100-300
/// cycles; the evaluation profile is a fixed deterministic step-and-ramp
/// sequence spanning the full load range (seed ignored).
std::vector<double> generate_reference(ReferenceKind kind, const ReferenceConfig& cfg,
                                       int n_cycles, std::uint64_t seed);

struct Kpi {
  double rmse_imep{0.0};
  double mean_reward{0.0};
  double mprr_violation_rate{0.0};
};

/// RMSE against the unshifted reference; the RL offset changes the closed
/// loop, never the metric.
Kpi compute_kpi(const EpisodeLog& log, double y_max_mprr);

struct ClosedLoopOptions {
  double rail_pressure{800.0};
  bool plant_noise{true};
  std::uint64_t plant_noise_seed{0};
  double exploration_noise_std{0.0};
  /// Inference-only policy; null runs the plain MPC (delta_ref = 0).
  Td3Agent* agent{nullptr};
  /// When true (and agent set), store transitions and run per-cycle updates.
  bool learn{false};
  EpisodeKind kind{EpisodeKind::Baseline};
  std::function<void(long step, const UpdateReport&)> on_update;
};

/// One closed-loop episode: agent offset -> OCP solve -> plant step ->
/// reward, with the model state advanced on measured IMEP.
EpisodeLog run_closed_loop(const ExperimentConfig& cfg, const NeuralPlant& model,
                           const std::vector<double>& reference, const ClosedLoopOptions& opt);

struct RewardCurvePoint {
  int episode{0};
  EpisodeKind kind{EpisodeKind::Train};
  double rmse_imep{0.0};
  double mean_reward{0.0};
};

struct TrainAgentResult {
  std::vector<RewardCurvePoint> curve;
  double best_validation_rmse{0.0};
  int best_episode{-1};
};

/// Repeated blocks of noisy training episodes followed by one deterministic
/// validation episode on the fixed profile, all at the mismatch rail
/// pressure. The checkpoint with the best validation RMSE is kept at
/// checkpoint_path; the reward curve and update telemetry stream to their
/// CSVs as the run progresses. Throws DivergenceError per the 2x-baseline
/// rule.
TrainAgentResult train_agent(const ExperimentConfig& cfg, const NeuralPlant& model,
                             Td3Agent& agent, double baseline_rmse,
                             const std::string& checkpoint_path,
                             const std::string& update_telemetry_path,
                             const std::string& reward_curve_path);

// --- file exports (full precision, bitwise round-trip) ---
void export_episode_csv(const EpisodeLog& log, const std::string& path);
std::vector<CycleRecord> import_episode_csv(const std::string& path);
void export_dataset_csv(const Dataset& data, const std::string& path);
Dataset import_dataset_csv(const std::string& path);

// --- pipeline stages used by the CLI and the acceptance suite ---
void run_gen_data(const ExperimentConfig& cfg);
void run_train_plant(const ExperimentConfig& cfg);
void run_baseline(const ExperimentConfig& cfg);
void run_train_agent(const ExperimentConfig& cfg);
void run_evaluate(const ExperimentConfig& cfg);
void run_report(const ExperimentConfig& cfg);

}  // namespace rlmpc
