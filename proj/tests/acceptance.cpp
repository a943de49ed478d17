// Acceptance run: one PASS/FAIL line per criterion, exit 1 if any gating
// criterion fails. Criterion 9 is reported but never gates.
//
//   acceptance [--out DIR] [--seed N] [--skip-e2e]

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <random>

#include "aat/errors.hpp"
#include "aat/pipeline.hpp"
#include "aat/report.hpp"
#include "aat/verify.hpp"
#include "aat/workspace.hpp"

namespace fs = std::filesystem;
namespace data = aat::data;
namespace pipeline = aat::pipeline;
namespace verify = aat::verify;
using aat::ad::Rng;

namespace {

struct Line {
  int id = 0;
  std::string name;
  bool passed = false;
  bool gating = true;
  std::string detail;
};

std::vector<Line> lines;

std::string summary;

void emit(Line l) {
  const char* verdict = l.passed ? "PASS" : (l.gating ? "FAIL" : "FAIL (reported, not gating)");
  char head[96];
  std::snprintf(head, sizeof head, "criterion %2d: %-4s  %-22s ", l.id, verdict, l.name.c_str());
  const std::string text = head + l.detail + "\n";
  std::fputs(text.c_str(), stdout);
  std::fflush(stdout);
  summary += text;
  lines.push_back(std::move(l));
}

std::string printf_str(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void suite_line(int id, const std::string& name, const verify::SuiteResult& r, double max_seconds) {
  const bool in_time = max_seconds <= 0.0 || r.seconds <= max_seconds;
  std::string detail = printf_str("%d instances, worst %s, %.2fs", r.instances, aat::report::format_number(r.worst).c_str(),
                           r.seconds);
  if (max_seconds > 0.0) detail += printf_str(" (limit %.0fs)", max_seconds);
  if (!r.detail.empty()) detail += "; " + r.detail;
  emit({id, name, r.passed && in_time, true, detail});
}

bool same_bits(const aat::ad::Matrix& a, const aat::ad::Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0;
}

bool same_dataset(const data::Dataset& a, const data::Dataset& b) {
  if (data::manifest_to_json(a.manifest) != data::manifest_to_json(b.manifest)) return false;
  if (a.trajectories.size() != b.trajectories.size()) return false;
  for (std::size_t i = 0; i < a.trajectories.size(); ++i) {
    const auto& x = a.trajectories[i];
    const auto& y = b.trajectories[i];
    if (x.collector != y.collector || x.seed != y.seed || x.terminal != y.terminal || x.truncated != y.truncated ||
        x.actions != y.actions || !same_bits(x.states, y.states) || !same_bits(x.perturbations, y.perturbations) ||
        !same_bits(x.rewards, y.rewards) || !same_bits(x.rtg, y.rtg) || x.wadv.size() != y.wadv.size()) {
      return false;
    }
    for (std::size_t t = 0; t < x.wadv.size(); ++t) {
      if (x.wadv[t].has_value() != y.wadv[t].has_value()) return false;
      if (x.wadv[t] && std::memcmp(&*x.wadv[t], &*y.wadv[t], sizeof(double)) != 0) return false;
    }
  }
  return true;
}

// Awkward doubles on purpose: subnormals, huge magnitudes, negative zero.
double nasty(Rng& rng) {
  std::uniform_int_distribution<int> kind(0, 9);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  switch (kind(rng)) {
    case 0: return -0.0;
    case 1: return 4.9e-324 * (1 + kind(rng));
    case 2: return u(rng) * 1e300;
    case 3: return std::nextafter(1.0, 2.0);
    default: return u(rng);
  }
}

data::Dataset random_dataset(Rng& rng, int trajectories) {
  std::uniform_int_distribution<int> len(1, 12), side(1, 5), act(0, 5);
  std::uniform_real_distribution<double> reward(1e-3, 1.0);
  data::Dataset d;
  d.manifest.env_id = "grid";
  d.manifest.collector_mix = {{"random", 0.25}, {"fgsm", 0.75}};
  d.manifest.episode_count = trajectories;
  d.manifest.epsilon = nasty(rng);
  d.manifest.seed = rng();
  d.manifest.reward_normalization = {{"grid", {0.0, 1.0}}};
  d.manifest.observation_shape = {side(rng), side(rng), 1 + side(rng) % 3};
  d.manifest.num_actions = 6;
  const int n = d.manifest.observation_shape.size();
  for (int e = 0; e < trajectories; ++e) {
    data::Trajectory t;
    const int T = len(rng);
    t.collector = e % 2 ? "fgsm" : "random";
    t.seed = rng();
    t.terminal = e % 3 != 0;
    t.truncated = !t.terminal;
    t.states.resize(T, n);
    t.perturbations.resize(T, n);
    for (Eigen::Index i = 0; i < t.states.size(); ++i) {
      t.states.data()[i] = nasty(rng);
      t.perturbations.data()[i] = nasty(rng);
    }
    for (int k = 0; k < T; ++k) {
      t.actions.push_back(act(rng));
      t.rewards.push_back(reward(rng));
      t.wadv.push_back(k % 4 == 1 ? std::nullopt : std::optional<double>(nasty(rng)));
    }
    t.rtg = data::returns_to_go_all(t.rewards);
    d.trajectories.push_back(std::move(t));
  }
  return d;
}

void criterion_10(const fs::path& out, std::uint64_t seed, const data::Dataset* collected) {
  const auto start = std::chrono::steady_clock::now();
  Rng rng(seed);
  std::uniform_int_distribution<int> side(1, 7), count(1, 6), channels(1, 3);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  int patch_failures = 0;
  for (int i = 0; i < 1000; ++i) {
    const int s = side(rng);
    const aat::env::ObservationShape shape{s * count(rng), s * count(rng), channels(rng)};
    Eigen::RowVectorXd img(shape.size());
    for (Eigen::Index k = 0; k < img.size(); ++k) img(k) = i % 5 == 0 ? nasty(rng) : u(rng);
    const auto grid = data::patchify(img, shape, s);
    const auto back = data::unpatchify(grid);
    if (grid.count() != data::patch_count(shape, s) || back.size() != img.size() ||
        std::memcmp(back.data(), img.data(), sizeof(double) * static_cast<std::size_t>(img.size())) != 0) {
      ++patch_failures;
    }
  }

  // 1000 random trajectories across 50 files, then the collected dataset.
  int data_failures = 0;
  const fs::path path = out / "roundtrip.jsonl";
  for (int i = 0; i < 50; ++i) {
    const auto d = random_dataset(rng, 20);
    data::serialize(d, path.string());
    const auto back = data::deserialize(path.string());
    const fs::path again = out / "roundtrip2.jsonl";
    data::serialize(back, again.string());
    std::ifstream a(path, std::ios::binary), b(again, std::ios::binary);
    const std::string ta((std::istreambuf_iterator<char>(a)), {}), tb((std::istreambuf_iterator<char>(b)), {});
    if (!same_dataset(d, back) || ta != tb) ++data_failures;
  }
  std::string detail = printf_str("patchify 1000 instances, %d mismatches; serialization 1000 trajectories, %d mismatching files",
                           patch_failures, data_failures);
  bool collected_ok = true;
  if (collected != nullptr) {
    data::serialize(*collected, path.string());
    collected_ok = same_dataset(*collected, data::deserialize(path.string()));
    detail += printf_str("; collected dataset (%zu episodes) re-read %s", collected->trajectories.size(),
                  collected_ok ? "equal" : "DIFFERENT");
  }
  fs::remove(path);
  fs::remove(out / "roundtrip2.jsonl");
  detail += printf_str(", %.2fs", std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  emit({10, "round trips", patch_failures == 0 && data_failures == 0 && collected_ok, true, detail});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria 1-10"};
  std::string out_dir = "acceptance";
  std::uint64_t seed = 0;
  bool skip_e2e = false;
  app.add_option("--out", out_dir, "artifact directory")->capture_default_str();
  app.add_option("--seed", seed, "seed for the property suites")->capture_default_str();
  app.add_flag("--skip-e2e", skip_e2e, "skip criteria 7-9 (the desk pipeline)");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);
  const fs::path out(out_dir);
  fs::create_directories(out);

  std::vector<verify::SuiteResult> suites;
  auto suite = [&](int id, const std::string& name, verify::SuiteResult r, double limit) {
    suite_line(id, name, r, limit);
    suites.push_back(std::move(r));
  };
  suite(1, "causality", verify::causality_suite(100, seed), 30.0);
  suite(2, "weighted advantage", verify::advantage_suite(100000, seed), 5.0);
  suite(3, "expectile", verify::expectile_suite(1000, seed), 0.0);
  suite(4, "lemma oracle", verify::lemma_suite(1000, seed), 60.0);
  suite(5, "theorem check", verify::theorem_suite(1000, seed), 0.0);
  suite(6, "gradient checks", verify::gradient_suite(seed), 120.0);
  aat::report::write_text((out / "verify.json").string(), verify::report_to_json(suites, seed).dump(2) + "\n");

  std::unique_ptr<pipeline::PipelineResult> run;
  if (!skip_e2e) {
    const aat::Config cfg;  // desk defaults: 2000 episodes, eps = 1.5, 20 attack episodes
    const std::string hash = aat::workspace::config_hash(cfg);
    run = std::make_unique<pipeline::PipelineResult>(pipeline::run(cfg));
    const auto& r = run->attack;
    const double eps = cfg.real("epsilon");

    std::size_t over = 0;
    double worst = 0.0;
    for (const auto& s : r.trace) {
      worst = std::max(worst, s.delta_norm);
      if (s.delta_norm > eps + 1e-9) ++over;
    }
    const bool budget = over == 0 && r.budget_violations == 0 && r.max_delta_norm <= eps + 1e-9 &&
                        r.trace.size() == r.total_steps && r.episodes == 20;
    const bool single_pass = r.forward_passes == r.total_steps;
    emit({7, "budget", budget && single_pass, true,
          printf_str("%d episodes, %zu perturbations, %zu over budget, max ||delta||_2 %.12g (eps %.3g); forward passes %llu, "
              "timesteps %llu",
              r.episodes, r.trace.size(), over, worst, eps, static_cast<unsigned long long>(r.forward_passes),
              static_cast<unsigned long long>(r.total_steps))});

    const auto& ev = run->victim.evaluation;
    const bool victim_ok = ev.mean_return >= 0.9 * ev.mean_oracle;
    const bool halved = r.attacked.mean <= 0.5 * r.clean.mean;
    const double total = run->timings.total();
    emit({8, "end-to-end attack", victim_ok && halved && total <= 900.0, true,
          printf_str("victim %.2f vs oracle %.2f (>= 0.9x: %s); %zu episodes collected; clean %.2f, attacked %.2f "
              "(%.1f%% of clean, limit 50%%); pipeline %.0fs (limit 900s)",
              ev.mean_return, ev.mean_oracle, victim_ok ? "yes" : "no", run->dataset.trajectories.size(), r.clean.mean,
              r.attacked.mean, 100.0 * r.attacked.mean / r.clean.mean, total)});
    aat::attack::write_report(r, (out / "attack_report.json").string());

    // Same victim, data, value heads and attack seeds; only the condition differs.
    aat::Config rtg_cfg = cfg;
    rtg_cfg.set("generator.condition", "returns_to_go");
    pipeline::SharedStages shared;
    shared.target = std::make_shared<aat::policy::ToyPolicy>(run->victim.policy);
    shared.trainer = &run->victim.policy;
    shared.dataset = &run->dataset;
    shared.heads = &run->heads;
    pipeline::AblationTable table;
    table.axis = "condition";
    table.key = pipeline::axis_key("condition");
    table.rows.push_back({"weighted_advantage", r, run->generator_report, run->timings.generator_s});
    table.rows.push_back(pipeline::run_variant(rtg_cfg, shared));
    table.rows.back().value = "returns_to_go";
    const double wa = table.rows[0].attack.attacked.mean;
    const double rtg = table.rows[1].attack.attacked.mean;
    const double slack = 0.1 * std::abs(rtg);
    aat::report::write_text((out / "ablation_condition.json").string(),
                            aat::workspace::ablation_to_json(table).dump(2) + "\n");
    aat::report::Table csv;
    csv.header = {"condition", "clean_mean", "attacked_mean", "attacked_std"};
    for (const auto& row : table.rows) {
      csv.rows.push_back({row.value, aat::report::format_number(row.attack.clean.mean),
                          aat::report::format_number(row.attack.attacked.mean),
                          aat::report::format_number(row.attack.attacked.stddev)});
    }
    aat::report::write_text((out / "ablation_condition.csv").string(), aat::report::to_csv(csv, hash));
    emit({9, "conditioning ablation", wa <= rtg + slack, false,
          printf_str("attacked return: weighted advantage %.2f, returns-to-go %.2f (allowed <= %.2f); clean %.2f",
              wa, rtg, rtg + slack, r.clean.mean)});
  } else {
    for (int id : {7, 8, 9}) emit({id, "skipped", false, id != 9, "--skip-e2e"});
  }

  criterion_10(out, seed, run ? &run->dataset : nullptr);

  int failed = 0;
  for (const auto& l : lines) failed += l.gating && !l.passed;
  summary += printf_str("%s: %d gating criteria failed\n", failed == 0 ? "ACCEPTED" : "REJECTED", failed);
  std::fputs(summary.c_str() + summary.rfind("\n", summary.size() - 2) + 1, stdout);
  aat::report::write_text((out / "summary.txt").string(), summary);
  return failed == 0 ? 0 : 1;
}
