#include "aat/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "aat/errors.hpp"

namespace aat::pipeline {

namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

env::GridPixels& require_grid(env::Environment& environment) {
  auto* grid = dynamic_cast<env::GridPixels*>(&environment);
  if (grid == nullptr) throw ConfigError("policy training supports the grid environment only");
  return *grid;
}

int auto_or(const Config& cfg, const std::string& key, int fallback) {
  return cfg.str(key) == "auto" ? fallback : cfg.integer(key);
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + p.string());
  out << text;
}

}  // namespace

std::unique_ptr<env::Environment> make_env(const Config& cfg) { return env::make_environment(cfg.str("env")); }

policy::TrainResult train_victim(const Config& cfg, env::Environment& environment, bool substitute) {
  policy::TrainOptions opts;
  opts.episodes = cfg.integer("victim.episodes");
  opts.eval_episodes = cfg.integer("victim.eval_episodes");
  const std::uint64_t seed = env::derive_seed(cfg.seed("seed"), substitute ? 2 : 1);
  return policy::train_toy_policy(require_grid(environment),
                                  policy::parse_training_algorithm(cfg.str("victim.algorithm")), opts, seed);
}

std::map<std::string, double> collector_mix(const Config& cfg) {
  std::map<std::string, double> mix;
  for (const char* name : {"random", "fgsm"}) {
    const double f = cfg.real(std::string("collect.mix.") + name);
    if (f < 0.0) throw ConfigError("collector fractions must be non-negative");
    if (f > 0.0) mix[name] = f;
  }
  return mix;
}

data::Dataset collect(const Config& cfg, env::Environment& environment, const policy::Policy& policy) {
  return data::collect_mix(environment, policy, collector_mix(cfg), cfg.integer("collect.episodes"),
                           cfg.real("epsilon"), env::derive_seed(cfg.seed("seed"), 3));
}

value::ValueConfig value_config(const Config& cfg) {
  value::ValueConfig v;
  v.gamma = cfg.real("value.gamma");
  v.sigma = cfg.real("value.sigma");
  v.lambda = cfg.real("value.lambda");
  v.hidden = cfg.int_list("value.hidden");
  v.reward = value::parse_reward_signal(cfg.str("value.reward"));
  v.batch_size = cfg.integer("value.batch");
  v.target_refresh = cfg.integer("value.target_refresh");
  v.validate();
  return v;
}

double delta_scale(const Config& cfg, const data::Dataset& dataset) {
  if (cfg.str("value.delta_scale") != "auto") return cfg.real("value.delta_scale");
  const double eps = dataset.manifest.epsilon;
  return eps > 0.0 ? std::sqrt(static_cast<double>(dataset.manifest.observation_shape.size())) / eps : 1.0;
}

value::ValueHeads train_values(const Config& cfg, data::Dataset& dataset, value::TrainReport* report) {
  ad::Rng rng(env::derive_seed(cfg.seed("seed"), 4));
  value::ValueHeads heads(dataset.manifest.observation_shape.size(), dataset.manifest.num_actions, value_config(cfg),
                          delta_scale(cfg, dataset), rng);
  auto r = value::train_stage1(dataset, heads, cfg.integer("value.steps"), cfg.real("value.lr"), rng);
  const bool weighted = data::parse_condition(cfg.str("generator.condition")) != data::Condition::ordinary_advantage;
  value::annotate_dataset(dataset, heads, weighted);
  if (report != nullptr) *report = std::move(r);
  return heads;
}

predictor::PredictorConfig predictor_config(const Config& cfg) {
  predictor::PredictorConfig p;
  p.kappa = cfg.real("predictor.kappa");
  p.neighbors = cfg.integer("predictor.neighbors");
  p.proposals = cfg.integer("predictor.proposals");
  p.rule = predictor::parse_target_rule(cfg.str("predictor.target_rule"));
  p.architecture = predictor::parse_architecture(cfg.str("predictor.architecture"));
  p.max_targets = cfg.integer("predictor.targets");
  p.lambda = cfg.real("value.lambda");
  p.weighted = data::parse_condition(cfg.str("generator.condition")) != data::Condition::ordinary_advantage;
  p.validate();
  return p;
}

predictor::AdvantagePredictor train_predictor(const Config& cfg, const data::Dataset& dataset,
                                              const value::ValueHeads& heads, predictor::PredictorReport* report) {
  ad::Rng rng(env::derive_seed(cfg.seed("seed"), 5));
  predictor::AdvantagePredictor p(dataset.manifest.observation_shape, predictor_config(cfg), rng);
  auto r = predictor::train_predictor(dataset, heads, p, cfg.integer("predictor.steps"), cfg.real("predictor.lr"), rng);
  if (report != nullptr) *report = std::move(r);
  return p;
}

gen::GeneratorConfig generator_config(const Config& cfg) {
  const std::string preset = cfg.str("generator.preset");
  gen::GeneratorConfig g;
  if (preset == "desk") {
    g = gen::GeneratorConfig::desk();
  } else if (preset != "full") {
    throw ConfigError("generator.preset must be desk or full, got '" + preset + "'");
  }
  g.embedding.model_dim = auto_or(cfg, "generator.model_dim", g.embedding.model_dim);
  g.embedding.num_heads = auto_or(cfg, "generator.num_heads", g.embedding.num_heads);
  g.embedding.num_layers = auto_or(cfg, "generator.num_layers", g.embedding.num_layers);
  g.embedding.dropout_rate = cfg.real("generator.dropout");
  g.scales.num_scales = cfg.integer("generator.num_scales");
  g.scales.base_window = cfg.integer("generator.base_window");
  g.scales.growth = seq::parse_window_growth(cfg.str("generator.growth"));
  g.scales.growth_ratio = cfg.real("generator.growth_ratio");
  g.context_steps = cfg.integer("generator.context");
  g.omega = cfg.real("generator.omega");
  g.epsilon = cfg.real("epsilon");
  g.norm = ad::parse_norm_kind(cfg.str("generator.norm"));
  g.condition = data::parse_condition(cfg.str("generator.condition"));
  g.batch_size = cfg.integer("generator.batch");
  g.segment_stride = std::max(1, g.context_steps / 2);
  g.validate();
  for (const std::string& w : g.scales.warnings()) spdlog::warn("{}", w);
  return g;
}

gen::GeneratorModel train_generator(const Config& cfg, const data::Dataset& dataset, const policy::Policy& victim,
                                    gen::GeneratorReport* report) {
  ad::Rng rng(env::derive_seed(cfg.seed("seed"), 6));
  gen::GeneratorModel m(dataset.manifest.observation_shape, dataset.manifest.num_actions, generator_config(cfg), rng);
  auto r = gen::train_generator(dataset, m, victim, cfg.integer("generator.steps"), cfg.real("generator.lr"), rng);
  if (report != nullptr) *report = std::move(r);
  return m;
}

double rtg_start(const data::Dataset& dataset) {
  double top = 0.0;
  for (const auto& t : dataset.trajectories) {
    if (!t.rtg.empty()) top = std::max(top, t.rtg.front());
  }
  return top;
}

attack::AttackReport attack(const Config& cfg, env::Environment& environment,
                            std::shared_ptr<const gen::GeneratorModel> generator,
                            std::shared_ptr<const predictor::AdvantagePredictor> predictor,
                            std::shared_ptr<const policy::Policy> target, const policy::Policy* substitute,
                            double rtg_target) {
  const std::string mode = cfg.str("attack.mode");
  const double eps = cfg.real("epsilon");
  if (mode == "white_box") {
    attack::AttackSession s(std::move(generator), std::move(predictor), std::move(target), eps,
                            attack::AccessMode::white_box);
    return attack::run_attack(s, environment, cfg.integer("attack.episodes"), cfg.seed("attack.seed"), rtg_target);
  }
  if (mode != "black_box") throw ConfigError("attack.mode must be white_box or black_box, got '" + mode + "'");
  if (substitute == nullptr) throw ConfigError("black-box attacks need a substitute policy");
  auto s = attack::black_box_session(*substitute, std::move(target), std::move(generator), std::move(predictor), eps);
  return attack::run_attack(s, environment, cfg.integer("attack.episodes"), cfg.seed("attack.seed"), rtg_target);
}

PipelineResult run(const Config& cfg) {
  PipelineResult out;
  auto environment = make_env(cfg);
  const bool black_box = cfg.str("attack.mode") == "black_box";

  auto t0 = Clock::now();
  out.victim = train_victim(cfg, *environment);
  spdlog::info("victim: {} (mean return {:.2f}, oracle {:.2f})", out.victim.reached_threshold ? "ok" : "below threshold",
               out.victim.evaluation.mean_return, out.victim.evaluation.mean_oracle);
  const policy::Policy* trainer = &out.victim.policy;
  if (black_box) {
    out.substitute = std::make_shared<policy::ToyPolicy>(train_victim(cfg, *environment, true).policy);
    trainer = out.substitute.get();
  }
  out.timings.victim_s = seconds_since(t0);

  t0 = Clock::now();
  out.dataset = collect(cfg, *environment, *trainer);
  out.timings.collect_s = seconds_since(t0);
  spdlog::info("collected {} episodes, {} steps in {:.1f}s", out.dataset.trajectories.size(), out.dataset.num_steps(),
               out.timings.collect_s);

  t0 = Clock::now();
  out.heads = train_values(cfg, out.dataset, &out.value_report);
  out.timings.values_s = seconds_since(t0);
  spdlog::info("value heads trained in {:.1f}s", out.timings.values_s);

  const bool rtg = data::parse_condition(cfg.str("generator.condition")) == data::Condition::returns_to_go;
  t0 = Clock::now();
  if (!rtg) {
    out.predictor = std::make_shared<predictor::AdvantagePredictor>(
        train_predictor(cfg, out.dataset, out.heads, &out.predictor_report));
  }
  out.timings.predictor_s = seconds_since(t0);

  t0 = Clock::now();
  out.generator =
      std::make_shared<gen::GeneratorModel>(train_generator(cfg, out.dataset, *trainer, &out.generator_report));
  out.timings.generator_s = seconds_since(t0);
  spdlog::info("generator trained in {:.1f}s", out.timings.generator_s);

  t0 = Clock::now();
  auto target = std::make_shared<policy::ToyPolicy>(out.victim.policy);
  out.attack = attack(cfg, *environment, out.generator, out.predictor, target, trainer, rtg_start(out.dataset));
  out.timings.attack_s = seconds_since(t0);
  spdlog::info("attack: clean {:.2f}, attacked {:.2f}", out.attack.clean.mean, out.attack.attacked.mean);
  return out;
}

std::string axis_key(const std::string& axis) {
  if (axis == "condition") return "generator.condition";
  if (axis == "scales") return "generator.num_scales";
  if (axis == "window") return "generator.base_window";
  if (axis == "norm") return "generator.norm";
  throw ConfigError("unknown ablation axis '" + axis + "' (expected condition, scales, window or norm)");
}

std::vector<std::string> axis_values(const std::string& axis) {
  if (axis == "condition") return {"weighted_advantage", "returns_to_go", "ordinary_advantage"};
  if (axis == "scales") return {"1", "2", "3", "4", "5"};
  if (axis == "window") return {"1", "2", "3", "4", "5", "6", "7", "8", "9", "10"};
  if (axis == "norm") return {"l1", "l2", "linf"};
  axis_key(axis);
  return {};
}

AblationRow run_variant(const Config& cfg, const SharedStages& shared,
                        std::shared_ptr<predictor::AdvantagePredictor> predictor) {
  if (shared.dataset == nullptr || shared.heads == nullptr || shared.trainer == nullptr || !shared.target) {
    throw ConfigError("ablation: shared stages are incomplete");
  }
  const data::Condition condition = data::parse_condition(cfg.str("generator.condition"));
  data::Dataset dataset = *shared.dataset;
  value::annotate_dataset(dataset, *shared.heads, condition != data::Condition::ordinary_advantage);
  if (condition != data::Condition::returns_to_go && !predictor) {
    predictor = std::make_shared<predictor::AdvantagePredictor>(train_predictor(cfg, dataset, *shared.heads));
  }
  if (condition == data::Condition::returns_to_go) predictor.reset();
  AblationRow row;
  auto t0 = Clock::now();
  auto generator = std::make_shared<gen::GeneratorModel>(train_generator(cfg, dataset, *shared.trainer, &row.generator));
  row.generator_s = seconds_since(t0);
  row.attack = attack(cfg, *make_env(cfg), generator, predictor, shared.target, shared.trainer, rtg_start(dataset));
  return row;
}

AblationTable ablate(const Config& cfg, const std::string& axis, const std::vector<std::string>& values,
                     const SharedStages& shared) {
  AblationTable table;
  table.axis = axis;
  table.key = axis_key(axis);
  // Predictors depend only on whether advantages are weighted; share them.
  std::map<bool, std::shared_ptr<predictor::AdvantagePredictor>> predictors;
  for (const std::string& v : values) {
    Config variant = cfg;
    variant.set(table.key, v);
    const data::Condition c = data::parse_condition(variant.str("generator.condition"));
    std::shared_ptr<predictor::AdvantagePredictor> p;
    if (c != data::Condition::returns_to_go) {
      const bool weighted = c != data::Condition::ordinary_advantage;
      auto& slot = predictors[weighted];
      if (!slot) {
        data::Dataset annotated = *shared.dataset;
        value::annotate_dataset(annotated, *shared.heads, weighted);
        slot = std::make_shared<predictor::AdvantagePredictor>(train_predictor(variant, annotated, *shared.heads));
      }
      p = slot;
    }
    spdlog::info("ablation {}={}", table.key, v);
    table.rows.push_back(run_variant(variant, shared, p));
    spdlog::info("ablation {}={}: clean {:.2f}, attacked {:.2f}", table.key, v, table.rows.back().attack.clean.mean,
                 table.rows.back().attack.attacked.mean);
  }
  return table;
}

std::string content_hash(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void save_model_dir(const std::string& dir, const Config& cfg, const gen::GeneratorModel& generator,
                    const predictor::AdvantagePredictor* predictor, const value::ValueHeads& heads,
                    const gen::GeneratorReport& report, double rtg_target) {
  const fs::path root(dir);
  fs::create_directories(root);
  nlohmann::json losses = nlohmann::json::array();
  for (const auto& l : report.losses) losses.push_back({l.action_loss, l.norm_loss, l.total});
  const std::string hash = content_hash(cfg.to_text());
  nlohmann::json g = generator.to_json();
  g["loss_curve"] = losses;
  g["config_hash"] = hash;
  nlohmann::json pj = predictor != nullptr ? predictor->to_json() : nlohmann::json();
  if (predictor != nullptr) pj["config_hash"] = hash;
  nlohmann::json vj = heads.to_json();
  vj["config_hash"] = hash;
  const std::string gtext = g.dump();
  const std::string ptext = predictor != nullptr ? pj.dump() : "";
  const std::string vtext = vj.dump();
  write_file(root / "generator.json", gtext);
  if (predictor != nullptr) write_file(root / "predictor.json", ptext);
  write_file(root / "value_heads.json", vtext);
  nlohmann::json manifest = {
      {"schema_version", 1},
      {"config", cfg.to_json()},
      {"config_hash", hash},
      {"generator", config_to_json(generator.config())},
      {"predictor", predictor != nullptr ? predictor->to_json().at("manifest") : nlohmann::json()},
      {"rtg_target", rtg_target},
      {"content_hash", content_hash(gtext + ptext + vtext)},
  };
  write_file(root / "manifest.json", manifest.dump(2) + "\n");
}

ModelDir load_model_dir(const std::string& dir) {
  const fs::path root(dir);
  if (!fs::exists(root / "manifest.json")) throw DependencyError("model directory " + dir + " has no manifest.json");
  ModelDir m;
  const std::string gtext = read_file(root / "generator.json");
  const bool has_predictor = fs::exists(root / "predictor.json");
  const std::string ptext = has_predictor ? read_file(root / "predictor.json") : "";
  const std::string vtext = read_file(root / "value_heads.json");
  try {
    m.manifest = nlohmann::json::parse(read_file(root / "manifest.json"));
    if (m.manifest.at("content_hash").get<std::string>() != content_hash(gtext + ptext + vtext)) {
      throw DataError("model directory " + dir + ": content hash mismatch");
    }
    m.generator = std::make_shared<gen::GeneratorModel>(gen::GeneratorModel::from_json(nlohmann::json::parse(gtext)));
    if (has_predictor) {
      m.predictor = std::make_shared<predictor::AdvantagePredictor>(
          predictor::AdvantagePredictor::from_json(nlohmann::json::parse(ptext)));
    }
    m.rtg_target = m.manifest.at("rtg_target").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("model directory " + dir + ": " + e.what());
  }
  return m;
}

}  // namespace aat::pipeline
