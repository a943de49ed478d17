#include "aat/workspace.hpp"

#include <spdlog/spdlog.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "aat/errors.hpp"
#include "aat/report.hpp"

namespace aat::workspace {

namespace fs = std::filesystem;

namespace {

fs::path require(const fs::path& p, const std::string& producer) {
  if (!fs::exists(p)) {
    throw DependencyError("missing upstream artifact " + p.string() + " (run `aat " + producer + "` first)");
  }
  return p;
}

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw DataError("cannot read " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(p.string() + ": " + e.what());
  }
}

void write_json(const fs::path& p, nlohmann::json j, const std::string& hash) {
  if (j.is_object()) j["config_hash"] = hash;
  report::write_text(p.string(), j.dump(2) + "\n");
}

void stamp(const Config& cfg, const fs::path& root) {
  report::write_text((root / "config.txt").string(),
                     "# config_hash=" + config_hash(cfg) + "\n" + cfg.to_text());
}

void write_curves(const fs::path& dir, const std::string& title, const std::vector<report::Series>& series,
                  const std::string& hash) {
  report::write_text((dir / "loss.csv").string(), report::to_csv(report::series_table(series), hash));
  report::write_text((dir / "loss.svg").string(), report::line_chart_svg(title, series, hash));
}

policy::ToyPolicy load_policy(const fs::path& p) { return policy::ToyPolicy::from_json(read_json(require(p, "collect"))); }

// The policy the generator trains against.
policy::ToyPolicy load_trainer(const Config& cfg, const fs::path& root) {
  const bool black_box = cfg.str("attack.mode") == "black_box";
  return load_policy(root / "victim" / (black_box ? "substitute.json" : "victim.json"));
}

}  // namespace

std::string config_hash(const Config& cfg) { return pipeline::content_hash(cfg.to_text()); }

void collect(const Config& cfg, const std::string& root_str) {
  const fs::path root(root_str);
  const std::string hash = config_hash(cfg);
  auto environment = pipeline::make_env(cfg);
  const auto victim = pipeline::train_victim(cfg, *environment);
  spdlog::info("victim: mean return {:.2f}, oracle {:.2f}", victim.evaluation.mean_return,
               victim.evaluation.mean_oracle);
  write_json(root / "victim" / "victim.json", victim.policy.to_json(), hash);
  write_json(root / "victim" / "evaluation.json",
             {{"mean_return", victim.evaluation.mean_return},
              {"mean_oracle", victim.evaluation.mean_oracle},
              {"returns", victim.evaluation.returns},
              {"reached_threshold", victim.reached_threshold}},
             hash);
  const policy::Policy* trainer = &victim.policy;
  policy::TrainResult substitute;
  if (cfg.str("attack.mode") == "black_box") {
    substitute = pipeline::train_victim(cfg, *environment, true);
    write_json(root / "victim" / "substitute.json", substitute.policy.to_json(), hash);
    trainer = &substitute.policy;
  }
  data::Dataset dataset = pipeline::collect(cfg, *environment, *trainer);
  dataset.manifest.config_hash = hash;
  fs::create_directories(root / "data");
  data::serialize(dataset, (root / "data" / "dataset.jsonl").string());
  spdlog::info("collected {} episodes ({} steps)", dataset.trajectories.size(), dataset.num_steps());
  stamp(cfg, root);
}

void train_values(const Config& cfg, const std::string& root_str) {
  const fs::path root(root_str);
  const std::string hash = config_hash(cfg);
  data::Dataset dataset = data::deserialize(require(root / "data" / "dataset.jsonl", "collect").string());
  value::TrainReport r;
  const value::ValueHeads heads = pipeline::train_values(cfg, dataset, &r);
  dataset.manifest.config_hash = hash;
  const fs::path dir = root / "values";
  write_json(dir / "value_heads.json", heads.to_json(), hash);
  data::serialize(dataset, (dir / "dataset.jsonl").string());
  write_curves(dir, "Stage 1 losses", {{"q_loss", r.q_loss}, {"v_loss", r.v_loss}}, hash);
  stamp(cfg, root);
}

void train_predictor(const Config& cfg, const std::string& root_str) {
  const fs::path root(root_str);
  const std::string hash = config_hash(cfg);
  const data::Dataset dataset = data::deserialize(require(root / "values" / "dataset.jsonl", "train-values").string());
  const auto heads = value::ValueHeads::from_json(read_json(require(root / "values" / "value_heads.json", "train-values")));
  predictor::PredictorReport r;
  const auto p = pipeline::train_predictor(cfg, dataset, heads, &r);
  const fs::path dir = root / "predictor";
  write_json(dir / "predictor.json", p.to_json(), hash);
  write_curves(dir, "Advantage predictor loss", {{"loss", r.loss}, {"regression", r.regression}}, hash);
  stamp(cfg, root);
}

void train_generator(const Config& cfg, const std::string& root_str) {
  const fs::path root(root_str);
  const std::string hash = config_hash(cfg);
  const data::Dataset dataset = data::deserialize(require(root / "values" / "dataset.jsonl", "train-values").string());
  const auto heads = value::ValueHeads::from_json(read_json(require(root / "values" / "value_heads.json", "train-values")));
  const bool rtg = data::parse_condition(cfg.str("generator.condition")) == data::Condition::returns_to_go;
  std::unique_ptr<predictor::AdvantagePredictor> p;
  if (!rtg) {
    p = std::make_unique<predictor::AdvantagePredictor>(predictor::AdvantagePredictor::from_json(
        read_json(require(root / "predictor" / "predictor.json", "train-predictor"))));
  }
  const policy::ToyPolicy trainer = load_trainer(cfg, root);
  gen::GeneratorReport r;
  const gen::GeneratorModel model = pipeline::train_generator(cfg, dataset, trainer, &r);
  const fs::path dir = root / "model";
  pipeline::save_model_dir(dir.string(), cfg, model, p.get(), heads, r, pipeline::rtg_start(dataset));
  std::vector<double> la, ln, total;
  for (const auto& l : r.losses) {
    la.push_back(l.action_loss);
    ln.push_back(l.norm_loss);
    total.push_back(l.total);
  }
  write_curves(dir, "Generator loss", {{"L_a", la}, {"L_norm", ln}, {"L", total}}, hash);
  stamp(cfg, root);
}

attack::AttackReport attack(const Config& cfg, const std::string& root_str) {
  const fs::path root(root_str);
  const std::string hash = config_hash(cfg);
  require(root / "model" / "manifest.json", "train-generator");
  const pipeline::ModelDir m = pipeline::load_model_dir((root / "model").string());
  auto target = std::make_shared<policy::ToyPolicy>(load_policy(root / "victim" / "victim.json"));
  std::unique_ptr<policy::ToyPolicy> substitute;
  if (cfg.str("attack.mode") == "black_box") {
    substitute = std::make_unique<policy::ToyPolicy>(load_policy(root / "victim" / "substitute.json"));
  }
  auto environment = pipeline::make_env(cfg);
  const attack::AttackReport r =
      pipeline::attack(cfg, *environment, m.generator, m.predictor, target, substitute.get(), m.rtg_target);
  const fs::path dir = root / "attack";
  write_json(dir / "report.json", attack::report_to_json(r), hash);
  if (cfg.flag("attack.trace")) attack::write_trace_csv(r, (dir / "trace.csv").string(), hash);
  report::Table t;
  t.header = {"episode", "clean", "attacked"};
  for (std::size_t i = 0; i < r.attacked.returns.size(); ++i) {
    t.rows.push_back({std::to_string(i), report::format_number(r.clean.returns[i]),
                      report::format_number(r.attacked.returns[i])});
  }
  report::write_text((dir / "returns.csv").string(), report::to_csv(t, hash));
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < r.attacked.returns.size(); ++i) labels.push_back(std::to_string(i));
  report::write_text((dir / "returns.svg").string(),
                     report::bar_chart_svg("Episode returns", labels,
                                           {{"clean", r.clean.returns}, {"attacked", r.attacked.returns}}, hash));
  spdlog::info("attack: clean {:.2f}, attacked {:.2f} ({} episodes)", r.clean.mean, r.attacked.mean, r.episodes);
  stamp(cfg, root);
  return r;
}

std::vector<verify::SuiteResult> verify(const Config& cfg, const std::string& root_str, const std::string& suite) {
  const fs::path root(root_str);
  const auto results = verify::run_suite(suite, cfg.seed("seed"));
  write_json(root / "verify" / "report.json", verify::report_to_json(results, cfg.seed("seed")), config_hash(cfg));
  for (const auto& r : results) {
    spdlog::info("verify {}: {} (worst {}, {:.2f}s)", r.name, r.passed ? "pass" : "FAIL",
                 report::format_number(r.worst), r.seconds);
  }
  return results;
}

pipeline::AblationTable ablate(const Config& cfg, const std::string& root_str, const std::string& axis,
                               const std::vector<std::string>& values) {
  const fs::path root(root_str);
  const std::string hash = config_hash(cfg);
  pipeline::axis_key(axis);
  const data::Dataset dataset = data::deserialize(require(root / "values" / "dataset.jsonl", "train-values").string());
  const auto heads = value::ValueHeads::from_json(read_json(require(root / "values" / "value_heads.json", "train-values")));
  auto target = std::make_shared<policy::ToyPolicy>(load_policy(root / "victim" / "victim.json"));
  const policy::ToyPolicy trainer = load_trainer(cfg, root);
  pipeline::SharedStages shared;
  shared.target = target;
  shared.trainer = &trainer;
  shared.dataset = &dataset;
  shared.heads = &heads;
  const auto table = pipeline::ablate(cfg, axis, values.empty() ? pipeline::axis_values(axis) : values, shared);

  const fs::path dir = root / "ablate" / axis;
  write_json(dir / "table.json", ablation_to_json(table), hash);
  report::Table t;
  t.header = {table.key, "clean_mean", "attacked_mean", "attacked_std", "reduction", "mean_delta_norm", "generator_s"};
  std::vector<std::string> labels;
  std::vector<double> clean, attacked;
  for (const auto& row : table.rows) {
    t.rows.push_back({row.value, report::format_number(row.attack.clean.mean),
                      report::format_number(row.attack.attacked.mean), report::format_number(row.attack.attacked.stddev),
                      report::format_number(row.attack.reduction), report::format_number(row.attack.mean_delta_norm),
                      report::format_number(row.generator_s)});
    labels.push_back(row.value);
    clean.push_back(row.attack.clean.mean);
    attacked.push_back(row.attack.attacked.mean);
  }
  report::write_text((dir / "table.csv").string(), report::to_csv(t, hash));
  report::write_text((dir / "table.svg").string(),
                     report::bar_chart_svg("Ablation over " + table.key, labels,
                                           {{"clean", clean}, {"attacked", attacked}}, hash));
  stamp(cfg, root);
  return table;
}

nlohmann::json ablation_to_json(const pipeline::AblationTable& table) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : table.rows) {
    nlohmann::json a = attack::report_to_json(row.attack);
    rows.push_back({{"value", row.value}, {"attack", a}, {"generator_s", row.generator_s}});
  }
  return {{"schema_version", 1}, {"axis", table.axis}, {"key", table.key}, {"rows", rows}};
}

}  // namespace aat::workspace
