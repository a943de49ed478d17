#pragma once

// Stage-by-stage commands over one artifact root. Each command reads its
// upstream artifacts from the root (DependencyError naming the missing
// path otherwise) and writes its own, stamped with the config hash.
//
//   <root>/config.txt                 effective config of the last command
//   <root>/victim/                    victim.json, substitute.json, evaluation.json
//   <root>/data/dataset.jsonl         raw collected trajectories
//   <root>/values/                    value_heads.json, dataset.jsonl (annotated), loss.csv/.svg
//   <root>/predictor/                 predictor.json, loss.csv/.svg
//   <root>/model/                     generator + manifest (load_model_dir), loss.csv/.svg
//   <root>/attack/                    report.json, trace.csv, returns.csv/.svg
//   <root>/verify/report.json
//   <root>/ablate/<axis>/             table.json, table.csv, table.svg

#include <string>
#include <vector>

#include "aat/pipeline.hpp"
#include "aat/verify.hpp"

namespace aat::workspace {

/// FNV-1a digest of the effective config text.
std::string config_hash(const Config& cfg);

void collect(const Config& cfg, const std::string& root);
void train_values(const Config& cfg, const std::string& root);
void train_predictor(const Config& cfg, const std::string& root);
void train_generator(const Config& cfg, const std::string& root);
attack::AttackReport attack(const Config& cfg, const std::string& root);
/// Returns the suite results; the report is written either way.
std::vector<verify::SuiteResult> verify(const Config& cfg, const std::string& root, const std::string& suite);
/// Uses the root's victim and value stages (DependencyError if absent).
pipeline::AblationTable ablate(const Config& cfg, const std::string& root, const std::string& axis,
                               const std::vector<std::string>& values);

nlohmann::json ablation_to_json(const pipeline::AblationTable& table);

}  // namespace aat::workspace
