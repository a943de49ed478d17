#pragma once

// End-to-end desk pipeline: victim training, data collection, value heads
// (stage 1), predictor and generator (stage 2), and the online attack
// (stage 3). Each stage is a free function of the flat Config so the CLI
// can run them one at a time.

#include <memory>
#include <string>

#include "aat/attack.hpp"
#include "aat/config.hpp"
#include "aat/generator.hpp"
#include "aat/predictor.hpp"
#include "aat/value.hpp"

namespace aat::pipeline {

std::unique_ptr<env::Environment> make_env(const Config& cfg);

/// Victim (white-box) or substitute (black-box) policy; substitute training
/// uses a different seed so it is a distinct network.
policy::TrainResult train_victim(const Config& cfg, env::Environment& environment, bool substitute = false);

std::map<std::string, double> collector_mix(const Config& cfg);
data::Dataset collect(const Config& cfg, env::Environment& environment, const policy::Policy& policy);

value::ValueConfig value_config(const Config& cfg);
/// sqrt(n) / epsilon unless set explicitly.
double delta_scale(const Config& cfg, const data::Dataset& dataset);
/// Trains Q and V, then annotates every record (raw A for ordinary_advantage).
value::ValueHeads train_values(const Config& cfg, data::Dataset& dataset, value::TrainReport* report = nullptr);

predictor::PredictorConfig predictor_config(const Config& cfg);
predictor::AdvantagePredictor train_predictor(const Config& cfg, const data::Dataset& dataset,
                                              const value::ValueHeads& heads,
                                              predictor::PredictorReport* report = nullptr);

gen::GeneratorConfig generator_config(const Config& cfg);
gen::GeneratorModel train_generator(const Config& cfg, const data::Dataset& dataset, const policy::Policy& victim,
                                    gen::GeneratorReport* report = nullptr);

/// Largest initial returns-to-go in the dataset: the starting target for
/// returns-to-go conditioning.
double rtg_start(const data::Dataset& dataset);

/// Runs stage 3. `substitute` is required for black-box mode.
attack::AttackReport attack(const Config& cfg, env::Environment& environment,
                            std::shared_ptr<const gen::GeneratorModel> generator,
                            std::shared_ptr<const predictor::AdvantagePredictor> predictor,
                            std::shared_ptr<const policy::Policy> target, const policy::Policy* substitute,
                            double rtg_target);

struct Timings {
  double victim_s = 0.0;
  double collect_s = 0.0;
  double values_s = 0.0;
  double predictor_s = 0.0;
  double generator_s = 0.0;
  double attack_s = 0.0;

  double total() const { return victim_s + collect_s + values_s + predictor_s + generator_s + attack_s; }
};

struct PipelineResult {
  policy::TrainResult victim;
  std::shared_ptr<policy::ToyPolicy> substitute;  // black-box mode only
  data::Dataset dataset;
  value::ValueHeads heads;
  value::TrainReport value_report;
  std::shared_ptr<predictor::AdvantagePredictor> predictor;
  predictor::PredictorReport predictor_report;
  std::shared_ptr<gen::GeneratorModel> generator;
  gen::GeneratorReport generator_report;
  attack::AttackReport attack;
  Timings timings;
};

/// All stages in order.
PipelineResult run(const Config& cfg);

/// Stages that ablation variants share: the victim, the collected data
/// and the value heads. `trainer` is the policy the generator trains
/// against (the victim, or the substitute in black-box mode).
struct SharedStages {
  std::shared_ptr<const policy::Policy> target;
  const policy::Policy* trainer = nullptr;
  const data::Dataset* dataset = nullptr;  // annotated or not; re-annotated per variant
  const value::ValueHeads* heads = nullptr;
};

struct AblationRow {
  std::string value;
  attack::AttackReport attack;
  gen::GeneratorReport generator;
  double generator_s = 0.0;
};

struct AblationTable {
  std::string axis;
  std::string key;
  std::vector<AblationRow> rows;
};

/// condition, scales, window or norm, mapped to its config key.
std::string axis_key(const std::string& axis);
/// The sweep for an axis: three conditions, K in 1..5, Len in 1..10, three norms.
std::vector<std::string> axis_values(const std::string& axis);

/// Trains the predictor (unless conditioning on returns-to-go) and the
/// generator for `cfg`, then attacks with the shared seeds. A non-null
/// `predictor` is reused instead of training one.
AblationRow run_variant(const Config& cfg, const SharedStages& shared,
                        std::shared_ptr<predictor::AdvantagePredictor> predictor = nullptr);

/// One row per value of the axis; every row uses the same victim, data,
/// value heads and attack seeds.
AblationTable ablate(const Config& cfg, const std::string& axis, const std::vector<std::string>& values,
                     const SharedStages& shared);

/// Generator, predictor, value-head snapshot and a manifest with the full
/// config and a content hash of the checkpoints. `predictor` may be null
/// (returns-to-go conditioning).
void save_model_dir(const std::string& dir, const Config& cfg, const gen::GeneratorModel& generator,
                    const predictor::AdvantagePredictor* predictor, const value::ValueHeads& heads,
                    const gen::GeneratorReport& report, double rtg_target);

struct ModelDir {
  std::shared_ptr<gen::GeneratorModel> generator;
  std::shared_ptr<predictor::AdvantagePredictor> predictor;  // null without one
  nlohmann::json manifest;
  double rtg_target = 0.0;
};

ModelDir load_model_dir(const std::string& dir);

/// FNV-1a 64-bit digest, hex encoded.
std::string content_hash(const std::string& bytes);

}  // namespace aat::pipeline
