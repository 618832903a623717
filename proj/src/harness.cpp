#include "rlmpc/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#include "rlmpc/rng.hpp"

namespace rlmpc {

namespace {

// Named sub-streams of the master seed.
constexpr std::uint64_t kSeedPrbsBase = 10;     // + segment index
constexpr std::uint64_t kSeedModelInit = 2;
constexpr std::uint64_t kSeedModelTrain = 3;
constexpr std::uint64_t kSeedTd3 = 4;
constexpr std::uint64_t kSeedPlantGen = 5;
constexpr std::uint64_t kSeedEvalNoise = 3000;  // shared by paired eval runs
constexpr std::uint64_t kSeedRefBase = 1000;    // + episode index
constexpr std::uint64_t kSeedNoiseBase = 2000;  // + episode index

std::string join(const std::string& dir, const char* name) { return dir + "/" + name; }

template <typename T>
T get_or(const io::Json& j, const char* key, T def) {
  if (!j.contains(key)) return def;
  return j.at(key).get<T>();
}

ControlInput control_from_json(const io::Json& j, const ControlInput& def) {
  ControlInput c = def;
  c.soi_diesel = get_or(j, "soi_diesel", def.soi_diesel);
  c.doi_diesel = get_or(j, "doi_diesel", def.doi_diesel);
  c.doi_hydrogen = get_or(j, "doi_hydrogen", def.doi_hydrogen);
  return c;
}

io::Json control_to_json(const ControlInput& c) {
  return io::Json{{"soi_diesel", c.soi_diesel},
                  {"doi_diesel", c.doi_diesel},
                  {"doi_hydrogen", c.doi_hydrogen}};
}

}  // namespace

void ExperimentConfig::validate() const {
  plant.validate();
  scaling.validate();
  ocp.validate();
  td3.validate();
  if (prbs.empty()) throw ConfigError("config needs at least one prbs segment");
  for (const PrbsSegmentConfig& s : prbs) {
    if (s.n_cycles < 1 || s.hold < 1) throw ConfigError("prbs segment needs n_cycles, hold >= 1");
  }
  if (schedule.episodes_total < 1 || schedule.cycles_per_episode < 1 ||
      schedule.train_per_validation < 1) {
    throw ConfigError("schedule values must be positive");
  }
  if (!(mismatch.train_rail_bar > 0.0 && mismatch.eval_rail_bar > 0.0)) {
    throw ConfigError("rail pressures must be positive");
  }
  if (!(reference.level_min < reference.level_max) || reference.hold_min < 1 ||
      reference.hold_max < reference.hold_min) {
    throw ConfigError("reference profile configuration invalid");
  }
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  // Three identification segments with distinct level pairs: corner coverage
  // plus interior support for the nonlinear response surfaces.
  cfg.prbs.clear();
  PrbsSegmentConfig wide;
  wide.n_cycles = 4000;
  wide.hold = 3;
  wide.levels.soi_diesel = {4.0, 16.0};
  wide.levels.doi_diesel = {0.25, 1.15};
  wide.levels.doi_hydrogen = {0.5, 7.5};
  PrbsSegmentConfig mid;
  mid.n_cycles = 4000;
  mid.hold = 5;
  mid.levels.soi_diesel = {7.0, 13.0};
  mid.levels.doi_diesel = {0.45, 0.95};
  mid.levels.doi_hydrogen = {2.0, 6.0};
  PrbsSegmentConfig skew;
  skew.n_cycles = 4000;
  skew.hold = 2;
  skew.levels.soi_diesel = {6.0, 18.0};
  skew.levels.doi_diesel = {0.35, 1.05};
  skew.levels.doi_hydrogen = {1.0, 5.0};
  cfg.prbs = {wide, mid, skew};
  return cfg;
}

ExperimentConfig config_from_json(const io::Json& j) {
  ExperimentConfig cfg = default_config();
  cfg.master_seed = get_or<std::uint64_t>(j, "master_seed", cfg.master_seed);
  cfg.output_dir = get_or<std::string>(j, "output_dir", cfg.output_dir);

  if (j.contains("plant")) {
    const io::Json& p = j["plant"];
    cfg.plant.rail_pressure = get_or(p, "rail_pressure_bar", cfg.plant.rail_pressure);
    if (p.contains("coefficients")) {
      const io::Json& c = p["coefficients"];
      PlantCoefficients& pc = cfg.plant.coeff;
      pc.imep_offset = get_or(c, "imep_offset", pc.imep_offset);
      pc.diesel_gain = get_or(c, "diesel_gain", pc.diesel_gain);
      pc.hydrogen_gain = get_or(c, "hydrogen_gain", pc.hydrogen_gain);
      pc.soi_peak = get_or(c, "soi_peak", pc.soi_peak);
      pc.soi_width = get_or(c, "soi_width", pc.soi_width);
      pc.imep_lag = get_or(c, "imep_lag", pc.imep_lag);
      pc.mprr_offset = get_or(c, "mprr_offset", pc.mprr_offset);
      pc.mprr_h2_quad = get_or(c, "mprr_h2_quad", pc.mprr_h2_quad);
      pc.mprr_energy = get_or(c, "mprr_energy", pc.mprr_energy);
      pc.mprr_soi_gain = get_or(c, "mprr_soi_gain", pc.mprr_soi_gain);
      pc.mprr_soi_ref = get_or(c, "mprr_soi_ref", pc.mprr_soi_ref);
      pc.nox_offset = get_or(c, "nox_offset", pc.nox_offset);
      pc.nox_imep_quad = get_or(c, "nox_imep_quad", pc.nox_imep_quad);
      pc.nox_h2_share = get_or(c, "nox_h2_share", pc.nox_h2_share);
    }
    if (p.contains("noise_std")) {
      const io::Json& nz = p["noise_std"];
      cfg.plant.noise_std.imep = get_or(nz, "imep", cfg.plant.noise_std.imep);
      cfg.plant.noise_std.mprr = get_or(nz, "mprr", cfg.plant.noise_std.mprr);
      cfg.plant.noise_std.nox = get_or(nz, "nox", cfg.plant.noise_std.nox);
    }
    if (p.contains("u_min")) cfg.plant.u_min = control_from_json(p["u_min"], cfg.plant.u_min);
    if (p.contains("u_max")) cfg.plant.u_max = control_from_json(p["u_max"], cfg.plant.u_max);
  }

  if (j.contains("scaling")) cfg.scaling = io::scaling_from_json(j["scaling"]);

  if (j.contains("prbs")) {
    cfg.prbs.clear();
    for (const io::Json& s : j["prbs"]) {
      PrbsSegmentConfig seg;
      seg.n_cycles = get_or(s, "n_cycles", seg.n_cycles);
      seg.hold = get_or(s, "hold", seg.hold);
      if (s.contains("levels")) {
        const io::Json& l = s["levels"];
        auto pair_of = [](const io::Json& arr) {
          if (!arr.is_array() || arr.size() != 2) {
            throw ConfigError("prbs levels must be [low, high]");
          }
          return PrbsLevels::Pair{arr[0].get<double>(), arr[1].get<double>()};
        };
        if (l.contains("soi_diesel")) seg.levels.soi_diesel = pair_of(l["soi_diesel"]);
        if (l.contains("doi_diesel")) seg.levels.doi_diesel = pair_of(l["doi_diesel"]);
        if (l.contains("doi_hydrogen")) seg.levels.doi_hydrogen = pair_of(l["doi_hydrogen"]);
      }
      cfg.prbs.push_back(seg);
    }
  }

  if (j.contains("plant_training")) {
    const io::Json& t = j["plant_training"];
    TrainHyper& th = cfg.plant_training;
    th.epochs = get_or(t, "epochs", th.epochs);
    th.learning_rate = get_or(t, "learning_rate", th.learning_rate);
    th.truncation = get_or(t, "truncation", th.truncation);
    th.batch_size = get_or(t, "batch_size", th.batch_size);
    th.stride = get_or(t, "stride", th.stride);
    th.val_fraction = get_or(t, "val_fraction", th.val_fraction);
  }

  if (j.contains("ocp")) {
    const io::Json& o = j["ocp"];
    OcpConfig& oc = cfg.ocp;
    oc.horizon = get_or(o, "horizon", oc.horizon);
    oc.q_imep = get_or(o, "q_imep", oc.q_imep);
    oc.q_mprr = get_or(o, "q_mprr", oc.q_mprr);
    oc.q_nox = get_or(o, "q_nox", oc.q_nox);
    oc.r_doi_diesel = get_or(o, "r_doi_diesel", oc.r_doi_diesel);
    oc.r_doi_hydrogen = get_or(o, "r_doi_hydrogen", oc.r_doi_hydrogen);
    if (o.contains("r_delta")) {
      const auto v = o["r_delta"].get<std::vector<double>>();
      if (v.size() != 4) throw ConfigError("ocp r_delta must have 4 entries");
      oc.r_delta = Eigen::Vector4d(v[0], v[1], v[2], v[3]);
    }
    if (o.contains("u_min")) oc.u_min = control_from_json(o["u_min"], oc.u_min);
    if (o.contains("u_max")) oc.u_max = control_from_json(o["u_max"], oc.u_max);
    oc.y_max_mprr = get_or(o, "y_max_mprr", oc.y_max_mprr);
    if (o.contains("delta_u_max")) {
      oc.delta_u_max = control_from_json(o["delta_u_max"], oc.delta_u_max);
    }
    if (o.contains("f_u")) {
      const auto v = o["f_u"].get<std::vector<double>>();
      if (v.size() != 4) throw ConfigError("ocp f_u must have 4 entries");
      oc.f_u = Eigen::Vector4d(v[0], v[1], v[2], v[3]);
    }
    if (o.contains("f_y")) {
      const auto v = o["f_y"].get<std::vector<double>>();
      if (v.size() != 3) throw ConfigError("ocp f_y must have 3 entries");
      oc.f_y = Eigen::Vector3d(v[0], v[1], v[2]);
    }
    oc.sqp_iters = get_or(o, "sqp_iters", oc.sqp_iters);
    oc.qp_tolerance = get_or(o, "qp_tolerance", oc.qp_tolerance);
    oc.slack_weight = get_or(o, "slack_weight", oc.slack_weight);
    oc.hessian_reg = get_or(o, "hessian_reg", oc.hessian_reg);
  }

  if (j.contains("td3")) {
    const io::Json& t = j["td3"];
    Td3Hyperparams& h = cfg.td3;
    h.gamma = get_or(t, "gamma", h.gamma);
    h.tau = get_or(t, "tau", h.tau);
    h.policy_delay = get_or(t, "policy_delay", h.policy_delay);
    h.target_noise_std = get_or(t, "target_noise_std", h.target_noise_std);
    h.target_noise_clip = get_or(t, "target_noise_clip", h.target_noise_clip);
    h.exploration_noise_std = get_or(t, "exploration_noise_std", h.exploration_noise_std);
    h.buffer_capacity = get_or(t, "buffer_capacity", h.buffer_capacity);
    h.batch_size = get_or(t, "batch_size", h.batch_size);
    h.actor_lr = get_or(t, "actor_lr", h.actor_lr);
    h.critic_lr = get_or(t, "critic_lr", h.critic_lr);
    h.action_limit = get_or(t, "action_limit", h.action_limit);
    h.update_after = get_or(t, "update_after", h.update_after);
    h.hidden_width = get_or(t, "hidden_width", h.hidden_width);
  }

  if (j.contains("schedule")) {
    const io::Json& s = j["schedule"];
    cfg.schedule.episodes_total = get_or(s, "episodes_total", cfg.schedule.episodes_total);
    cfg.schedule.cycles_per_episode =
        get_or(s, "cycles_per_episode", cfg.schedule.cycles_per_episode);
    cfg.schedule.train_per_validation =
        get_or(s, "train_per_validation", cfg.schedule.train_per_validation);
  }

  if (j.contains("reference")) {
    const io::Json& r = j["reference"];
    cfg.reference.level_min = get_or(r, "level_min", cfg.reference.level_min);
    cfg.reference.level_max = get_or(r, "level_max", cfg.reference.level_max);
    cfg.reference.hold_min = get_or(r, "hold_min", cfg.reference.hold_min);
    cfg.reference.hold_max = get_or(r, "hold_max", cfg.reference.hold_max);
  }

  if (j.contains("mismatch")) {
    const io::Json& m = j["mismatch"];
    cfg.mismatch.train_rail_bar = get_or(m, "train_rail_bar", cfg.mismatch.train_rail_bar);
    cfg.mismatch.eval_rail_bar = get_or(m, "eval_rail_bar", cfg.mismatch.eval_rail_bar);
  }

  cfg.validate();
  return cfg;
}

io::Json config_to_json(const ExperimentConfig& cfg) {
  io::Json j;
  j["master_seed"] = cfg.master_seed;
  j["output_dir"] = cfg.output_dir;
  j["plant"] = {
      {"rail_pressure_bar", cfg.plant.rail_pressure},
      {"coefficients",
       {{"imep_offset", cfg.plant.coeff.imep_offset},
        {"diesel_gain", cfg.plant.coeff.diesel_gain},
        {"hydrogen_gain", cfg.plant.coeff.hydrogen_gain},
        {"soi_peak", cfg.plant.coeff.soi_peak},
        {"soi_width", cfg.plant.coeff.soi_width},
        {"imep_lag", cfg.plant.coeff.imep_lag},
        {"mprr_offset", cfg.plant.coeff.mprr_offset},
        {"mprr_h2_quad", cfg.plant.coeff.mprr_h2_quad},
        {"mprr_energy", cfg.plant.coeff.mprr_energy},
        {"mprr_soi_gain", cfg.plant.coeff.mprr_soi_gain},
        {"mprr_soi_ref", cfg.plant.coeff.mprr_soi_ref},
        {"nox_offset", cfg.plant.coeff.nox_offset},
        {"nox_imep_quad", cfg.plant.coeff.nox_imep_quad},
        {"nox_h2_share", cfg.plant.coeff.nox_h2_share}}},
      {"noise_std",
       {{"imep", cfg.plant.noise_std.imep},
        {"mprr", cfg.plant.noise_std.mprr},
        {"nox", cfg.plant.noise_std.nox}}},
      {"u_min", control_to_json(cfg.plant.u_min)},
      {"u_max", control_to_json(cfg.plant.u_max)}};
  j["scaling"] = io::scaling_json(cfg.scaling);
  io::Json segs = io::Json::array();
  for (const PrbsSegmentConfig& s : cfg.prbs) {
    segs.push_back(
        {{"n_cycles", s.n_cycles},
         {"hold", s.hold},
         {"levels",
          {{"soi_diesel", {s.levels.soi_diesel.low, s.levels.soi_diesel.high}},
           {"doi_diesel", {s.levels.doi_diesel.low, s.levels.doi_diesel.high}},
           {"doi_hydrogen", {s.levels.doi_hydrogen.low, s.levels.doi_hydrogen.high}}}}});
  }
  j["prbs"] = std::move(segs);
  j["plant_training"] = {{"epochs", cfg.plant_training.epochs},
                         {"learning_rate", cfg.plant_training.learning_rate},
                         {"truncation", cfg.plant_training.truncation},
                         {"batch_size", cfg.plant_training.batch_size},
                         {"stride", cfg.plant_training.stride},
                         {"val_fraction", cfg.plant_training.val_fraction}};
  j["ocp"] = {{"horizon", cfg.ocp.horizon},
              {"q_imep", cfg.ocp.q_imep},
              {"q_mprr", cfg.ocp.q_mprr},
              {"q_nox", cfg.ocp.q_nox},
              {"r_doi_diesel", cfg.ocp.r_doi_diesel},
              {"r_doi_hydrogen", cfg.ocp.r_doi_hydrogen},
              {"r_delta",
               {cfg.ocp.r_delta[0], cfg.ocp.r_delta[1], cfg.ocp.r_delta[2], cfg.ocp.r_delta[3]}},
              {"u_min", control_to_json(cfg.ocp.u_min)},
              {"u_max", control_to_json(cfg.ocp.u_max)},
              {"y_max_mprr", cfg.ocp.y_max_mprr},
              {"delta_u_max", control_to_json(cfg.ocp.delta_u_max)},
              {"f_u", {cfg.ocp.f_u[0], cfg.ocp.f_u[1], cfg.ocp.f_u[2], cfg.ocp.f_u[3]}},
              {"f_y", {cfg.ocp.f_y[0], cfg.ocp.f_y[1], cfg.ocp.f_y[2]}},
              {"sqp_iters", cfg.ocp.sqp_iters},
              {"qp_tolerance", cfg.ocp.qp_tolerance},
              {"slack_weight", cfg.ocp.slack_weight},
              {"hessian_reg", cfg.ocp.hessian_reg}};
  j["td3"] = {{"gamma", cfg.td3.gamma},
              {"tau", cfg.td3.tau},
              {"policy_delay", cfg.td3.policy_delay},
              {"target_noise_std", cfg.td3.target_noise_std},
              {"target_noise_clip", cfg.td3.target_noise_clip},
              {"exploration_noise_std", cfg.td3.exploration_noise_std},
              {"buffer_capacity", cfg.td3.buffer_capacity},
              {"batch_size", cfg.td3.batch_size},
              {"actor_lr", cfg.td3.actor_lr},
              {"critic_lr", cfg.td3.critic_lr},
              {"action_limit", cfg.td3.action_limit},
              {"update_after", cfg.td3.update_after},
              {"hidden_width", cfg.td3.hidden_width}};
  j["schedule"] = {{"episodes_total", cfg.schedule.episodes_total},
                   {"cycles_per_episode", cfg.schedule.cycles_per_episode},
                   {"train_per_validation", cfg.schedule.train_per_validation}};
  j["reference"] = {{"level_min", cfg.reference.level_min},
                    {"level_max", cfg.reference.level_max},
                    {"hold_min", cfg.reference.hold_min},
                    {"hold_max", cfg.reference.hold_max}};
  j["mismatch"] = {{"train_rail_bar", cfg.mismatch.train_rail_bar},
                   {"eval_rail_bar", cfg.mismatch.eval_rail_bar}};
  return j;
}

const char* episode_kind_name(EpisodeKind k) {
  switch (k) {
    case EpisodeKind::Train: return "train";
    case EpisodeKind::Validation: return "validation";
    case EpisodeKind::Baseline: return "baseline";
  }
  return "unknown";
}

std::vector<double> generate_reference(ReferenceKind kind, const ReferenceConfig& cfg,
                                       int n_cycles, std::uint64_t seed) {
  if (n_cycles < 1) throw ConfigError("reference length must be >= 1");
  std::vector<double> ref(static_cast<std::size_t>(n_cycles));

  if (kind == ReferenceKind::Training) {
    std::mt19937_64 rng(seed);
    int i = 0;
    while (i < n_cycles) {
      const double level = uniform(rng, cfg.level_min, cfg.level_max);
      const int hold = static_cast<int>(uniform_int(rng, cfg.hold_min, cfg.hold_max));
      for (int k = 0; k < hold && i < n_cycles; ++k, ++i) {
        ref[static_cast<std::size_t>(i)] = level;
      }
    }
    return ref;
  }

  // Fixed evaluation profile: four steps and two ramps spanning the full load
  // range. Breakpoints are fractions of the episode so shorter test episodes
  // keep the same shape; at 2000 cycles and the default 4.5-9.0 bar range the
  // canonical profile (5, 7, ramp to 9, 9, 6, 8, ramp to 4.5, 5.5) appears.
  auto at = [&](double f) { return static_cast<int>(f * n_cycles); };
  auto level = [&](double f) { return cfg.level_min + f * (cfg.level_max - cfg.level_min); };
  struct Piece {
    int begin, end;  // [begin, end)
    double v0, v1;   // linear between endpoints; v0 == v1 is a hold
  };
  const std::vector<Piece> pieces = {
      {at(0.00), at(0.15), level(1.0 / 9), level(1.0 / 9)},
      {at(0.15), at(0.30), level(5.0 / 9), level(5.0 / 9)},
      {at(0.30), at(0.45), level(5.0 / 9), level(1.0)},  // slow up-ramp
      {at(0.45), at(0.55), level(1.0), level(1.0)},
      {at(0.55), at(0.675), level(3.0 / 9), level(3.0 / 9)},
      {at(0.675), at(0.775), level(7.0 / 9), level(7.0 / 9)},
      {at(0.775), at(0.90), level(7.0 / 9), level(0.0)},  // down-ramp to the range bottom
      {at(0.90), n_cycles, level(2.0 / 9), level(2.0 / 9)},
  };
  for (const Piece& p : pieces) {
    const int len = p.end - p.begin;
    for (int i = p.begin; i < p.end && i < n_cycles; ++i) {
      const double f = len > 1 ? static_cast<double>(i - p.begin) / (len - 1) : 0.0;
      ref[static_cast<std::size_t>(i)] = p.v0 + f * (p.v1 - p.v0);
    }
  }
  return ref;
}

Kpi compute_kpi(const EpisodeLog& log, double y_max_mprr) {
  if (log.records.empty()) throw ConfigError("compute_kpi: empty log");
  double sq = 0.0, reward = 0.0;
  long viol = 0;
  for (const CycleRecord& r : log.records) {
    const double e = r.ref_imep - r.output.imep;
    sq += e * e;
    reward += r.reward;
    if (r.output.mprr > y_max_mprr) ++viol;
  }
  const auto n = static_cast<double>(log.records.size());
  return {std::sqrt(sq / n), reward / n, static_cast<double>(viol) / n};
}

EpisodeLog run_closed_loop(const ExperimentConfig& cfg, const NeuralPlant& model,
                           const std::vector<double>& reference, const ClosedLoopOptions& opt) {
  if (reference.empty()) throw ConfigError("run_closed_loop: empty reference");
  const int n = static_cast<int>(reference.size());
  const int horizon = cfg.ocp.horizon;

  PlantConfig pc = cfg.plant;
  pc.rail_pressure = opt.rail_pressure;
  pc.seed = opt.plant_noise_seed;
  if (!opt.plant_noise) pc.noise_std = {0.0, 0.0, 0.0};
  PlantState plant = initial_plant_state(pc);
  plant.imep_prev = reference[0];

  MpcSolver solver(model, cfg.ocp);

  ControlInput u_prev{0.5 * (cfg.ocp.u_min.soi_diesel + cfg.ocp.u_max.soi_diesel),
                      0.5 * (cfg.ocp.u_min.doi_diesel + cfg.ocp.u_max.doi_diesel),
                      0.5 * (cfg.ocp.u_min.doi_hydrogen + cfg.ocp.u_max.doi_hydrogen)};
  double imep_meas_prev = reference[0];
  AugmentedState x;
  x.h.setZero();
  x.u_prev = model_input_vector(imep_meas_prev, u_prev);

  EpisodeLog log;
  log.kind = opt.kind;
  log.records.reserve(static_cast<std::size_t>(n));

  Solution warm;
  bool have_warm = false;
  double reward_sum = 0.0;
  long viol = 0;
  long update_step = 0;

  std::vector<double> window(static_cast<std::size_t>(horizon) + 1);
  for (int k = 0; k < n; ++k) {
    const AgentState s = build_agent_state(log.records, reference[static_cast<std::size_t>(k)]);
    double delta_ref = 0.0;
    Eigen::Matrix<double, 5, 1> s_enc = Eigen::Matrix<double, 5, 1>::Zero();
    if (opt.agent != nullptr) {
      s_enc = encode_agent_state(s, model.scaling());
      delta_ref = opt.agent->select_action_scalar(s_enc, opt.exploration_noise_std);
    }

    for (int j2 = 0; j2 <= horizon; ++j2) {
      window[static_cast<std::size_t>(j2)] =
          reference[static_cast<std::size_t>(std::min(k + j2, n - 1))];
    }
    const Solution sol = solver.solve(x, window, delta_ref, have_warm ? &warm : nullptr);
    const ControlInput u = solver.apply(sol, u_prev);

    // the applied move must honor the box and the rate limits
    const auto check = [](double v, double lo2, double hi2, double prev, double dmax) {
      return v >= lo2 - 1e-9 && v <= hi2 + 1e-9 && std::abs(v - prev) <= dmax + 1e-9;
    };
    if (!check(u.soi_diesel, cfg.ocp.u_min.soi_diesel, cfg.ocp.u_max.soi_diesel,
               u_prev.soi_diesel, cfg.ocp.delta_u_max.soi_diesel) ||
        !check(u.doi_diesel, cfg.ocp.u_min.doi_diesel, cfg.ocp.u_max.doi_diesel,
               u_prev.doi_diesel, cfg.ocp.delta_u_max.doi_diesel) ||
        !check(u.doi_hydrogen, cfg.ocp.u_min.doi_hydrogen, cfg.ocp.u_max.doi_hydrogen,
               u_prev.doi_hydrogen, cfg.ocp.delta_u_max.doi_hydrogen)) {
      throw NumericError("run_closed_loop: applied input violates constraints");
    }

    const CombustionOutput y = plant_step(plant, u, pc);
    const double r = compute_reward(reference[static_cast<std::size_t>(k)], y.imep);

    CycleRecord rec;
    rec.cycle_index = k;
    rec.ref_imep = reference[static_cast<std::size_t>(k)];
    rec.delta_ref = delta_ref;
    rec.control = u;
    rec.output = y;
    rec.reward = r;
    rec.rail_pressure = pc.rail_pressure;
    log.records.push_back(rec);

    reward_sum += r;
    if (y.mprr > cfg.ocp.y_max_mprr) ++viol;

    // advance the model on measured data
    const Eigen::Vector4d u_model = model_input_vector(imep_meas_prev, u);
    x = model.forward_step(x, u_model - x.u_prev).first;
    x.u_prev[kUImepPrev] = y.imep;
    imep_meas_prev = y.imep;
    u_prev = u;
    warm = sol;
    have_warm = true;

    if (opt.agent != nullptr && opt.learn) {
      const double ref_next = reference[static_cast<std::size_t>(std::min(k + 1, n - 1))];
      const AgentState s_next = build_agent_state(log.records, ref_next);
      Transition t;
      t.s = s_enc;
      t.a = Eigen::VectorXd::Constant(1, delta_ref);
      t.r = r;
      t.s_next = encode_agent_state(s_next, model.scaling());
      t.done = k + 1 == n;
      opt.agent->store(std::move(t));
      if (opt.agent->buffer().size() >=
          static_cast<std::size_t>(opt.agent->hyper().update_after)) {
        const UpdateReport rep = opt.agent->update();
        if (opt.on_update) opt.on_update(update_step, rep);
        ++update_step;
      }
    }
  }

  const auto count = static_cast<double>(n);
  double sq = 0.0;
  for (const CycleRecord& r : log.records) {
    const double e = r.ref_imep - r.output.imep;
    sq += e * e;
  }
  log.summary.rmse_imep = std::sqrt(sq / count);
  log.summary.mean_reward = reward_sum / count;
  log.summary.mprr_violations = viol;
  return log;
}

TrainAgentResult train_agent(const ExperimentConfig& cfg, const NeuralPlant& model,
                             Td3Agent& agent, double baseline_rmse,
                             const std::string& checkpoint_path,
                             const std::string& update_telemetry_path,
                             const std::string& reward_curve_path) {
  const int block = cfg.schedule.train_per_validation + 1;
  const int cycles = cfg.schedule.cycles_per_episode;

  io::CsvWriter telemetry(update_telemetry_path,
                          std::vector<std::string>{"update_step", "critic1_loss", "critic2_loss",
                                                   "actor_loss"});
  io::CsvWriter curve_csv(reward_curve_path,
                          std::vector<std::string>{"episode", "kind", "rmse_imep_bar",
                                                   "mean_reward"});
  long update_base = 0;

  TrainAgentResult result;
  result.best_validation_rmse = std::numeric_limits<double>::infinity();
  int consecutive_bad = 0;

  for (int e = 0; e < cfg.schedule.episodes_total; ++e) {
    const bool is_validation = e % block == cfg.schedule.train_per_validation;
    ClosedLoopOptions opt;
    opt.rail_pressure = cfg.mismatch.eval_rail_bar;
    opt.plant_noise = true;
    opt.plant_noise_seed =
        derive_seed(cfg.master_seed, kSeedNoiseBase + static_cast<std::uint64_t>(e));
    opt.agent = &agent;

    std::vector<double> ref;
    EpisodeLog log;
    if (is_validation) {
      ref = generate_reference(ReferenceKind::Evaluation, cfg.reference, cycles, 0);
      opt.kind = EpisodeKind::Validation;
      opt.learn = false;
      opt.exploration_noise_std = 0.0;
      log = run_closed_loop(cfg, model, ref, opt);
    } else {
      ref = generate_reference(
          ReferenceKind::Training, cfg.reference, cycles,
          derive_seed(cfg.master_seed, kSeedRefBase + static_cast<std::uint64_t>(e)));
      opt.kind = EpisodeKind::Train;
      opt.learn = true;
      opt.exploration_noise_std = cfg.td3.exploration_noise_std;
      opt.on_update = [&telemetry, &update_base](long step, const UpdateReport& rep) {
        telemetry.row({static_cast<double>(update_base + step), rep.critic1_loss,
                       rep.critic2_loss,
                       rep.actor_loss ? *rep.actor_loss
                                      : std::numeric_limits<double>::quiet_NaN()});
      };
      log = run_closed_loop(cfg, model, ref, opt);
      update_base += static_cast<long>(cycles);
    }

    result.curve.push_back({e, opt.kind, log.summary.rmse_imep, log.summary.mean_reward});
    curve_csv.row({static_cast<double>(e), is_validation ? 1.0 : 0.0, log.summary.rmse_imep,
                   log.summary.mean_reward});

    if (is_validation) {
      if (log.summary.rmse_imep < result.best_validation_rmse) {
        result.best_validation_rmse = log.summary.rmse_imep;
        result.best_episode = e;
        agent.save(checkpoint_path, model.scaling());
      }
      if (log.summary.rmse_imep > 2.0 * baseline_rmse) {
        if (++consecutive_bad >= 3) {
          throw DivergenceError(
              "validation RMSE exceeded 2x baseline for 3 consecutive validations (episode " +
              std::to_string(e) + ")");
        }
      } else {
        consecutive_bad = 0;
      }
    }
  }
  return result;
}

void export_episode_csv(const EpisodeLog& log, const std::string& path) {
  const std::vector<std::string> header = {
      "cycle",          "ref_imep_bar", "delta_ref_bar", "imep_bar",
      "mprr_bar_per_deg", "nox_ppm",    "soi_diesel_deg", "doi_diesel_s",
      "doi_hydrogen_s", "reward",       "rail_pressure_bar"};
  io::CsvWriter w(path, header);
  for (const CycleRecord& r : log.records) {
    w.row({static_cast<double>(r.cycle_index), r.ref_imep, r.delta_ref, r.output.imep,
           r.output.mprr, r.output.nox, r.control.soi_diesel, r.control.doi_diesel / 1000.0,
           r.control.doi_hydrogen / 1000.0, r.reward, r.rail_pressure});
  }
}

std::vector<CycleRecord> import_episode_csv(const std::string& path) {
  const io::CsvTable t = io::read_csv(path);
  if (t.header.size() != 11 || t.header[0] != "cycle") {
    throw ConfigError("unexpected episode csv schema in " + path);
  }
  std::vector<CycleRecord> records;
  records.reserve(t.rows.size());
  for (const auto& row : t.rows) {
    CycleRecord r;
    r.cycle_index = static_cast<std::int64_t>(row[0]);
    r.ref_imep = row[1];
    r.delta_ref = row[2];
    r.output.imep = row[3];
    r.output.mprr = row[4];
    r.output.nox = row[5];
    r.control.soi_diesel = row[6];
    r.control.doi_diesel = row[7] * 1000.0;
    r.control.doi_hydrogen = row[8] * 1000.0;
    r.reward = row[9];
    r.rail_pressure = row[10];
    records.push_back(r);
  }
  return records;
}

void export_dataset_csv(const Dataset& data, const std::string& path) {
  const std::vector<std::string> header = {"cycle",    "soi_diesel_deg", "doi_diesel_ms",
                                           "doi_hydrogen_ms", "imep_bar", "mprr_bar_per_deg",
                                           "nox_ppm"};
  io::CsvWriter w(path, header);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const IoSample& s = data[i];
    w.row({static_cast<double>(i), s.u.soi_diesel, s.u.doi_diesel, s.u.doi_hydrogen, s.y.imep,
           s.y.mprr, s.y.nox});
  }
}

Dataset import_dataset_csv(const std::string& path) {
  const io::CsvTable t = io::read_csv(path);
  if (t.header.size() != 7 || t.header[0] != "cycle") {
    throw ConfigError("unexpected dataset csv schema in " + path);
  }
  Dataset data;
  data.reserve(t.rows.size());
  for (const auto& row : t.rows) {
    IoSample s;
    s.u.soi_diesel = row[1];
    s.u.doi_diesel = row[2];
    s.u.doi_hydrogen = row[3];
    s.y.imep = row[4];
    s.y.mprr = row[5];
    s.y.nox = row[6];
    data.push_back(s);
  }
  return data;
}

namespace {

io::Json kpi_json(const Kpi& k) {
  return {{"rmse_imep_bar", k.rmse_imep},
          {"mean_reward", k.mean_reward},
          {"mprr_violation_rate", k.mprr_violation_rate}};
}

Kpi kpi_of_records(std::vector<CycleRecord> records, double y_max) {
  EpisodeLog log;
  log.records = std::move(records);
  return compute_kpi(log, y_max);
}

}  // namespace

void run_gen_data(const ExperimentConfig& cfg) {
  std::filesystem::create_directories(cfg.output_dir);
  PlantConfig pc = cfg.plant;
  pc.rail_pressure = cfg.mismatch.train_rail_bar;
  pc.seed = derive_seed(cfg.master_seed, kSeedPlantGen);
  PlantState state = initial_plant_state(pc);
  Dataset all;
  for (std::size_t i = 0; i < cfg.prbs.size(); ++i) {
    const PrbsSegmentConfig& seg = cfg.prbs[i];
    const Dataset part =
        run_prbs_segment(state, pc, seg.levels, seg.n_cycles, seg.hold,
                         derive_seed(cfg.master_seed, kSeedPrbsBase + i));
    all.insert(all.end(), part.begin(), part.end());
  }
  export_dataset_csv(all, join(cfg.output_dir, "dataset.csv"));
}

void run_train_plant(const ExperimentConfig& cfg) {
  const Dataset data = import_dataset_csv(join(cfg.output_dir, "dataset.csv"));
  NeuralPlant model = NeuralPlant::random_init(cfg.scaling,
                                               derive_seed(cfg.master_seed, kSeedModelInit));
  TrainHyper hyper = cfg.plant_training;
  hyper.seed = derive_seed(cfg.master_seed, kSeedModelTrain);
  const std::vector<EpochLoss> trace = model.train(data, hyper);
  model.save(join(cfg.output_dir, "plant_weights.json"));
  io::CsvWriter w(join(cfg.output_dir, "plant_training.csv"),
                  std::vector<std::string>{"epoch", "train_mse", "val_mse"});
  for (std::size_t e = 0; e < trace.size(); ++e) {
    w.row({static_cast<double>(e), trace[e].train_mse, trace[e].val_mse});
  }
}

void run_baseline(const ExperimentConfig& cfg) {
  const NeuralPlant model = NeuralPlant::load(join(cfg.output_dir, "plant_weights.json"));
  const std::vector<double> ref = generate_reference(ReferenceKind::Evaluation, cfg.reference,
                                                     cfg.schedule.cycles_per_episode, 0);
  ClosedLoopOptions opt;
  opt.plant_noise = true;
  opt.plant_noise_seed = derive_seed(cfg.master_seed, kSeedEvalNoise);
  opt.kind = EpisodeKind::Baseline;

  opt.rail_pressure = cfg.mismatch.train_rail_bar;
  const EpisodeLog nominal = run_closed_loop(cfg, model, ref, opt);
  export_episode_csv(nominal, join(cfg.output_dir, "baseline_nominal.csv"));

  opt.rail_pressure = cfg.mismatch.eval_rail_bar;
  const EpisodeLog mismatch = run_closed_loop(cfg, model, ref, opt);
  export_episode_csv(mismatch, join(cfg.output_dir, "baseline_mismatch.csv"));

  io::Json j;
  j["nominal"] = kpi_json(compute_kpi(nominal, cfg.ocp.y_max_mprr));
  j["mismatch"] = kpi_json(compute_kpi(mismatch, cfg.ocp.y_max_mprr));
  io::write_json_file(join(cfg.output_dir, "kpi_baseline.json"), j);
}

void run_train_agent(const ExperimentConfig& cfg) {
  const NeuralPlant model = NeuralPlant::load(join(cfg.output_dir, "plant_weights.json"));
  const io::Json baseline = io::read_json_file(join(cfg.output_dir, "kpi_baseline.json"));
  const double baseline_rmse = baseline.at("mismatch").at("rmse_imep_bar").get<double>();

  Td3Hyperparams hyper = cfg.td3;
  hyper.seed = derive_seed(cfg.master_seed, kSeedTd3);
  Td3Agent agent(hyper);

  train_agent(cfg, model, agent, baseline_rmse, join(cfg.output_dir, "agent_checkpoint.json"),
              join(cfg.output_dir, "td3_updates.csv"), join(cfg.output_dir, "reward_curve.csv"));
}

void run_evaluate(const ExperimentConfig& cfg) {
  const NeuralPlant model = NeuralPlant::load(join(cfg.output_dir, "plant_weights.json"));
  Td3Agent agent = Td3Agent::load(join(cfg.output_dir, "agent_checkpoint.json"));
  const std::vector<double> ref = generate_reference(ReferenceKind::Evaluation, cfg.reference,
                                                     cfg.schedule.cycles_per_episode, 0);
  ClosedLoopOptions opt;
  opt.rail_pressure = cfg.mismatch.eval_rail_bar;
  opt.plant_noise = true;
  opt.plant_noise_seed = derive_seed(cfg.master_seed, kSeedEvalNoise);
  opt.agent = &agent;
  opt.learn = false;
  opt.exploration_noise_std = 0.0;
  opt.kind = EpisodeKind::Validation;
  const EpisodeLog log = run_closed_loop(cfg, model, ref, opt);
  export_episode_csv(log, join(cfg.output_dir, "hybrid.csv"));
  io::write_json_file(join(cfg.output_dir, "kpi_hybrid.json"),
                      kpi_json(compute_kpi(log, cfg.ocp.y_max_mprr)));
}

void run_report(const ExperimentConfig& cfg) {
  const double y_max = cfg.ocp.y_max_mprr;
  const Kpi nominal =
      kpi_of_records(import_episode_csv(join(cfg.output_dir, "baseline_nominal.csv")), y_max);
  const Kpi mismatch =
      kpi_of_records(import_episode_csv(join(cfg.output_dir, "baseline_mismatch.csv")), y_max);
  const Kpi hybrid = kpi_of_records(import_episode_csv(join(cfg.output_dir, "hybrid.csv")), y_max);

  const double improvement =
      100.0 * (mismatch.rmse_imep - hybrid.rmse_imep) / mismatch.rmse_imep;

  io::Json j;
  j["baseline_nominal"] = kpi_json(nominal);
  j["baseline_mismatch"] = kpi_json(mismatch);
  j["hybrid"] = kpi_json(hybrid);
  j["improvement_percent"] = improvement;
  io::write_json_file(join(cfg.output_dir, "summary.json"), j);

  std::ofstream txt(join(cfg.output_dir, "summary.txt"));
  if (!txt) throw ConfigError("cannot write summary.txt");
  char buf[256];
  std::snprintf(buf, sizeof(buf), "baseline rmse @ %.0f bar rail: %.6f bar\n",
                cfg.mismatch.train_rail_bar, nominal.rmse_imep);
  txt << buf;
  std::snprintf(buf, sizeof(buf), "baseline rmse @ %.0f bar rail: %.6f bar\n",
                cfg.mismatch.eval_rail_bar, mismatch.rmse_imep);
  txt << buf;
  std::snprintf(buf, sizeof(buf), "hybrid   rmse @ %.0f bar rail: %.6f bar\n",
                cfg.mismatch.eval_rail_bar, hybrid.rmse_imep);
  txt << buf;
  std::snprintf(buf, sizeof(buf), "improvement over mismatch baseline: %.2f %%\n", improvement);
  txt << buf;
  std::snprintf(buf, sizeof(buf), "mprr violation rates: %.4f / %.4f / %.4f\n",
                nominal.mprr_violation_rate, mismatch.mprr_violation_rate,
                hybrid.mprr_violation_rate);
  txt << buf;
}

}  // namespace rlmpc
