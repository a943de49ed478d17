// aat: stage-by-stage command-line driver. All artifacts go under --out.

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <iostream>
#include <string>
#include <vector>

#include "aat/errors.hpp"
#include "aat/workspace.hpp"

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kDependency = 3, kVerification = 4 };

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out = "runs/default";
  bool quiet = false;
};

aat::Config load(const Common& c) {
  aat::Config cfg = c.config_path.empty() ? aat::Config() : aat::Config::from_file(c.config_path);
  for (const auto& o : c.overrides) cfg.set(o);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Offline-trained adversarial perturbation attacks on a desk-scale pixel environment"};
  app.require_subcommand(1);
  Common common;
  std::string suite = "all";
  std::string axis;
  std::vector<std::string> values;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "flat key = value config file")->check(CLI::ExistingFile);
    sub->add_option("-s,--set", common.overrides, "override, key=value (repeatable)");
    sub->add_option("-o,--out", common.out, "artifact root")->capture_default_str();
    sub->add_flag("-q,--quiet", common.quiet, "warnings and errors only");
  };

  auto* collect = app.add_subcommand("collect", "train the victim and collect offline trajectories");
  auto* values_cmd = app.add_subcommand("train-values", "stage 1: fit Q and V, annotate the dataset");
  auto* predictor = app.add_subcommand("train-predictor", "fit the advantage predictor");
  auto* generator = app.add_subcommand("train-generator", "stage 2: train the perturbation generator");
  auto* attack = app.add_subcommand("attack", "stage 3: attack the victim online");
  auto* run = app.add_subcommand("run", "every stage in order");
  auto* verify = app.add_subcommand("verify", "property and oracle suites");
  auto* ablate = app.add_subcommand("ablate", "sweep one axis over shared victim and value stages");
  for (auto* sub : {collect, values_cmd, predictor, generator, attack, run, verify, ablate}) add_common(sub);
  verify->add_option("--suite", suite, "lemma1, theorem1, causality, advantage, expectile, gradients or all")
      ->capture_default_str();
  ablate->add_option("--axis", axis, "condition, scales, window or norm")->required();
  ablate->add_option("--values", values, "values to sweep (default: the whole axis)")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }
  spdlog::set_level(common.quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    const aat::Config cfg = load(common);
    namespace ws = aat::workspace;
    spdlog::info("config hash {}", ws::config_hash(cfg));
    if (*collect) ws::collect(cfg, common.out);
    if (*values_cmd) ws::train_values(cfg, common.out);
    if (*predictor) ws::train_predictor(cfg, common.out);
    if (*generator) ws::train_generator(cfg, common.out);
    if (*attack) ws::attack(cfg, common.out);
    if (*run) {
      ws::collect(cfg, common.out);
      ws::train_values(cfg, common.out);
      if (aat::data::parse_condition(cfg.str("generator.condition")) != aat::data::Condition::returns_to_go) {
        ws::train_predictor(cfg, common.out);
      }
      ws::train_generator(cfg, common.out);
      ws::attack(cfg, common.out);
    }
    if (*verify) {
      bool ok = true;
      for (const auto& r : ws::verify(cfg, common.out, suite)) ok = ok && r.passed;
      if (!ok) {
        spdlog::error("verification failed; see {}/verify/report.json", common.out);
        return kVerification;
      }
    }
    if (*ablate) ws::ablate(cfg, common.out, axis, values);
  } catch (const aat::ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kConfig;
  } catch (const aat::ParseError& e) {
    spdlog::error("config error: {}", e.what());
    return kConfig;
  } catch (const aat::DependencyError& e) {
    spdlog::error("dependency error: {}", e.what());
    return kDependency;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kOther;
  }
  return kOk;
}
