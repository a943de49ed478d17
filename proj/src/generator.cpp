#include "aat/generator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "aat/errors.hpp"
#include "aat/grad_check.hpp"

namespace aat::gen {

namespace {

std::string growth_name(seq::WindowGrowth g) { return seq::to_string(g); }

}  // namespace

GeneratorConfig GeneratorConfig::desk() {
  GeneratorConfig c;
  c.embedding.model_dim = 32;
  c.embedding.num_heads = 4;
  c.embedding.num_layers = 2;
  return c;
}

void GeneratorConfig::validate() const {
  embedding.validate();
  (void)scales.windows();
  if (context_steps <= 0) throw ConfigError("generator: context_steps must be positive");
  if (!(epsilon >= 0.0)) throw ConfigError("generator: epsilon must be non-negative");
  if (!std::isfinite(omega)) throw ConfigError("generator: omega must be finite");
  if (!(condition_scale > 0.0)) throw ConfigError("generator: condition_scale must be positive");
  if (head_hidden <= 0 || head_channels <= 0 || head_stride <= 0 || batch_size <= 0 || segment_stride <= 0) {
    throw ConfigError("generator: head sizes, batch size and segment stride must be positive");
  }
}

nlohmann::json config_to_json(const GeneratorConfig& c) {
  return {
      {"model_dim", c.embedding.model_dim},
      {"num_heads", c.embedding.num_heads},
      {"num_layers", c.embedding.num_layers},
      {"dropout_rate", c.embedding.dropout_rate},
      {"max_sequence_length", c.embedding.max_sequence_length},
      {"num_scales", c.scales.num_scales},
      {"base_window", c.scales.base_window},
      {"growth", growth_name(c.scales.growth)},
      {"growth_ratio", c.scales.growth_ratio},
      {"context_steps", c.context_steps},
      {"patch_side", c.patch_side},
      {"omega", c.omega},
      {"epsilon", c.epsilon},
      {"norm", ad::to_string(c.norm)},
      {"condition", data::to_string(c.condition)},
      {"condition_scale", c.condition_scale},
      {"head_hidden", c.head_hidden},
      {"head_channels", c.head_channels},
      {"head_stride", c.head_stride},
      {"batch_size", c.batch_size},
      {"segment_stride", c.segment_stride},
  };
}

GeneratorConfig config_from_json(const nlohmann::json& j) {
  try {
    GeneratorConfig c;
    c.embedding.model_dim = j.at("model_dim").get<int>();
    c.embedding.num_heads = j.at("num_heads").get<int>();
    c.embedding.num_layers = j.at("num_layers").get<int>();
    c.embedding.dropout_rate = j.at("dropout_rate").get<double>();
    c.embedding.max_sequence_length = j.at("max_sequence_length").get<int>();
    c.scales.num_scales = j.at("num_scales").get<int>();
    c.scales.base_window = j.at("base_window").get<int>();
    c.scales.growth = seq::parse_window_growth(j.at("growth").get<std::string>());
    c.scales.growth_ratio = j.at("growth_ratio").get<double>();
    c.context_steps = j.at("context_steps").get<int>();
    c.patch_side = j.at("patch_side").get<int>();
    c.omega = j.at("omega").get<double>();
    c.epsilon = j.at("epsilon").get<double>();
    c.norm = ad::parse_norm_kind(j.at("norm").get<std::string>());
    c.condition = data::parse_condition(j.at("condition").get<std::string>());
    c.condition_scale = j.at("condition_scale").get<double>();
    c.head_hidden = j.at("head_hidden").get<int>();
    c.head_channels = j.at("head_channels").get<int>();
    c.head_stride = j.at("head_stride").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.segment_stride = j.at("segment_stride").get<int>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("generator config: ") + e.what());
  }
}

GeneratorModel::GeneratorModel(const data::ObservationShape& shape, int num_actions, GeneratorConfig config, Rng& rng)
    : shape_(shape), num_actions_(num_actions), config_(std::move(config)) {
  config_.validate();
  if (num_actions_ <= 0) throw ConfigError("generator: num_actions must be positive");
  patches_ = data::patch_count(shape_, config_.patch_side);
  if (shape_.height % config_.head_stride != 0 || shape_.width % config_.head_stride != 0) {
    throw ConfigError("generator: observation size must be divisible by the deconvolution stride");
  }
  const int d = config_.embedding.model_dim;
  const int tokens = config_.context_steps * tokens_per_step();
  if (tokens > config_.embedding.max_sequence_length) {
    throw ConfigError("generator: context of " + std::to_string(tokens) + " tokens exceeds max_sequence_length");
  }
  const int patch_dim = config_.patch_side * config_.patch_side * shape_.channels;
  condition_embed_ = nn::Linear("gen.embed.condition", 1, d, rng);
  patch_embed_ = nn::Linear("gen.embed.patch", patch_dim, d, rng);
  perturbation_embed_ = nn::Linear("gen.embed.perturbation", shape_.size(), d, rng);
  action_embed_ = nn::Linear("gen.embed.action", num_actions_, d, rng);
  positions_ = ad::Parameter("gen.embed.positions", nn::uniform_init(tokens, d, d, rng));
  embed_norm_ = nn::LayerNormParams("gen.embed.norm", d);
  for (int l = 0; l < config_.embedding.num_layers; ++l) {
    const std::string p = "gen.block" + std::to_string(l);
    blocks_.push_back(Block{seq::MscsaBlock(p + ".mscsa", d, config_.scales.num_scales, rng),
                            nn::LayerNormParams(p + ".norm1", d), nn::Mlp(p + ".ffn", d, {2 * d}, d, rng),
                            nn::LayerNormParams(p + ".norm2", d)});
  }
  const int s = config_.head_stride;
  const int grid = (shape_.height / s) * (shape_.width / s) * config_.head_channels;
  head1_ = nn::Linear("gen.head.fc1", d, config_.head_hidden, rng);
  head2_ = nn::Linear("gen.head.fc2", config_.head_hidden, grid, rng);
  deconv_weight_ = ad::Parameter("gen.head.deconv.weight",
                                 nn::uniform_init(config_.head_channels, s * s * shape_.channels,
                                                  config_.head_channels, rng));
  deconv_bias_ = ad::Parameter("gen.head.deconv.bias", Matrix::Zero(1, shape_.channels));
}

std::vector<int> GeneratorModel::token_windows() const {
  std::vector<int> w = config_.scales.windows();
  for (int& x : w) x *= tokens_per_step();
  return w;
}

Var GeneratorModel::embed(Tape& tape, const data::TokenSequence& tokens) const {
  const int steps = tokens.steps;
  if (steps <= 0) throw ShapeError("generator: empty token sequence");
  if (steps > config_.context_steps) {
    throw LengthError("generator: " + std::to_string(steps) + " steps exceed the context of " +
                      std::to_string(config_.context_steps));
  }
  if (!(tokens.shape == shape_) || tokens.patches_per_step != patches_ || tokens.patch_side != config_.patch_side) {
    throw ShapeError("generator: token layout does not match the model");
  }
  const int per = tokens_per_step();
  const int pd = static_cast<int>(tokens.patches.front().cols());
  Matrix cond(steps, 1);
  Matrix patches(steps * patches_, pd);
  Matrix actions = Matrix::Zero(steps, num_actions_);
  std::vector<int> cond_rows, patch_rows, delta_rows, action_rows;
  for (int t = 0; t < steps; ++t) {
    cond(t, 0) = tokens.conditions[t] * config_.condition_scale;
    patches.middleRows(t * patches_, patches_) = tokens.patches[t];
    const int a = tokens.actions[t];
    if (a >= 0 && a < num_actions_) actions(t, a) = 1.0;  // negative marks an unknown (zero-filled) action
    cond_rows.push_back(t * per);
    for (int x = 0; x < patches_; ++x) patch_rows.push_back(t * per + 1 + x);
    delta_rows.push_back(t * per + patches_ + 1);
    action_rows.push_back(t * per + patches_ + 2);
  }
  Var e = ad::scatter_rows({{condition_embed_.forward(tape, tape.constant(cond)), cond_rows},
                            {patch_embed_.forward(tape, tape.constant(patches)), patch_rows},
                            {perturbation_embed_.forward(tape, tape.constant(tokens.perturbations)), delta_rows},
                            {action_embed_.forward(tape, tape.constant(actions)), action_rows}},
                           steps * per, config_.embedding.model_dim);
  e = ad::add(e, ad::slice_rows(tape.parameter(positions_), 0, steps * per));
  return embed_norm_.forward(tape, e);
}

Var GeneratorModel::head(Tape& tape, Var readout) const {
  const int s = config_.head_stride;
  ad::ConvTransposeGeometry g;
  g.in_height = shape_.height / s;
  g.in_width = shape_.width / s;
  g.in_channels = config_.head_channels;
  g.out_channels = shape_.channels;
  g.kernel = s;
  g.stride = s;
  Var x = ad::relu(head1_.forward(tape, readout));
  x = head2_.forward(tape, x);
  return ad::conv_transpose2d(x, tape.parameter(deconv_weight_), tape.parameter(deconv_bias_), g);
}

Var GeneratorModel::decode(Tape& tape, const data::TokenSequence& tokens, Var* raw) const {
  const double rate = config_.embedding.dropout_rate;
  const std::vector<int> windows = token_windows();
  Var h = embed(tape, tokens);
  for (const Block& b : blocks_) {
    h = b.norm1.forward(tape, ad::add(h, b.attention.forward(tape, h, windows, config_.embedding.num_heads, rate)));
    h = b.norm2.forward(tape, ad::add(h, ad::dropout(b.feed_forward.forward(tape, h), rate)));
  }
  std::vector<int> readout(tokens.steps);
  for (int t = 0; t < tokens.steps; ++t) readout[t] = t * tokens_per_step() + patches_;
  Var delta = head(tape, ad::gather_rows(h, readout));
  if (raw != nullptr) *raw = delta;
  return ad::project_rows_l2(delta, config_.epsilon);
}

data::Observation GeneratorModel::forward_perturbation(const data::TokenSequence& history) const {
  for (double c : history.conditions) {
    if (!std::isfinite(c)) throw DomainError("generator: non-finite condition");
  }
  ++forward_count_;
  Tape tape(false);
  Var delta = decode(tape, history);
  return delta.value().row(delta.rows() - 1);
}

void GeneratorModel::parameters(ad::ParameterRefs& out) {
  condition_embed_.parameters(out);
  patch_embed_.parameters(out);
  perturbation_embed_.parameters(out);
  action_embed_.parameters(out);
  out.push_back(&positions_);
  embed_norm_.parameters(out);
  for (Block& b : blocks_) {
    b.attention.parameters(out);
    b.norm1.parameters(out);
    b.feed_forward.parameters(out);
    b.norm2.parameters(out);
  }
  head1_.parameters(out);
  head2_.parameters(out);
  out.push_back(&deconv_weight_);
  out.push_back(&deconv_bias_);
}

nlohmann::json GeneratorModel::to_json() const {
  ad::ParameterRefs params;
  const_cast<GeneratorModel&>(*this).parameters(params);
  return {{"config", config_to_json(config_)},
          {"shape", {shape_.height, shape_.width, shape_.channels}},
          {"num_actions", num_actions_},
          {"parameters", nn::to_json(params)}};
}

GeneratorModel GeneratorModel::from_json(const nlohmann::json& j) {
  try {
    const auto& s = j.at("shape");
    data::ObservationShape shape{s.at(0).get<int>(), s.at(1).get<int>(), s.at(2).get<int>()};
    Rng rng(0);
    GeneratorModel m(shape, j.at("num_actions").get<int>(), config_from_json(j.at("config")), rng);
    ad::ParameterRefs params;
    m.parameters(params);
    nn::from_json(j.at("parameters"), params);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("generator checkpoint: ") + e.what());
  }
}

Var action_loss(Tape& tape, Var perturbations, const Matrix& states, const std::vector<int>& actions,
                const policy::Policy& victim) {
  if (!victim.white_box()) throw CapabilityError("action loss needs gradient access to '" + victim.id() + "'");
  if (states.rows() != perturbations.rows() || states.rows() != static_cast<Eigen::Index>(actions.size())) {
    throw ShapeError("action loss: states, perturbations and actions disagree in length");
  }
  Matrix target = Matrix::Zero(states.rows(), victim.num_actions());
  for (std::size_t t = 0; t < actions.size(); ++t) target(static_cast<Eigen::Index>(t), actions[t]) = 1.0;
  Var probs = ad::softmax_rows(victim.logits(tape, ad::add(tape.constant(states), perturbations)));
  return ad::sum(ad::square(ad::sub(probs, tape.constant(target))));
}

Var norm_loss(Var perturbations, NormKind kind) { return ad::mean(ad::row_norms(perturbations, kind)); }

SegmentSampler::SegmentSampler(std::vector<Segment> segments, double omega) : segments_(std::move(segments)) {
  if (segments_.empty()) throw DataError("segment sampler: no segments");
  // Shift by the maximum so large conditions cannot overflow exp.
  double top = -INFINITY;
  for (const Segment& s : segments_) top = std::max(top, omega * s.mean_condition);
  for (const Segment& s : segments_) weights_.push_back(std::exp(omega * s.mean_condition - top));
}

std::size_t SegmentSampler::sample(Rng& rng) const {
  std::discrete_distribution<std::size_t> pick(weights_.begin(), weights_.end());
  return pick(rng);
}

std::vector<double> SegmentSampler::probabilities() const {
  const double total = std::accumulate(weights_.begin(), weights_.end(), 0.0);
  std::vector<double> p;
  for (double w : weights_) p.push_back(w / total);
  return p;
}

std::vector<double> condition_values(const data::Trajectory& trajectory, data::Condition condition) {
  if (condition == data::Condition::returns_to_go) return trajectory.rtg;
  std::vector<double> out;
  for (std::size_t t = 0; t < trajectory.wadv.size(); ++t) {
    if (!trajectory.wadv[t]) throw DataError("generator: step " + std::to_string(t) + " has no advantage annotation");
    out.push_back(*trajectory.wadv[t]);
  }
  return out;
}

std::vector<Segment> make_segments(const data::Dataset& dataset, const GeneratorConfig& config) {
  std::vector<Segment> out;
  for (int i = 0; i < static_cast<int>(dataset.trajectories.size()); ++i) {
    const auto& tr = dataset.trajectories[i];
    const int n = tr.length();
    if (n == 0) continue;
    const std::vector<double> c = condition_values(tr, config.condition);
    auto add = [&](int start) {
      Segment s{i, start, std::min(config.context_steps, n - start), 0.0};
      for (int t = start; t < start + s.length; ++t) s.mean_condition += c[t] * config.condition_scale;
      s.mean_condition /= s.length;
      out.push_back(s);
    };
    int start = 0;
    for (; start + config.context_steps < n; start += config.segment_stride) add(start);
    add(std::max(0, n - config.context_steps));
  }
  return out;
}

data::TokenSequence segment_tokens(const data::Dataset& dataset, const Segment& segment,
                                   const GeneratorConfig& config) {
  const auto& tr = dataset.trajectories.at(segment.trajectory);
  std::vector<data::TrajectoryRecord> records;
  for (int t = segment.start; t < segment.start + segment.length; ++t) {
    records.push_back(tr.record(t));
    if (config.condition != data::Condition::returns_to_go && !records.back().weighted_advantage) {
      throw DataError("generator: step " + std::to_string(t) + " has no advantage annotation");
    }
  }
  return data::build_token_sequence(records, config.condition, dataset.manifest.observation_shape,
                                    config.patch_side);
}

Var generator_loss(Tape& tape, const GeneratorModel& model, const data::Dataset& dataset,
                   const std::vector<Segment>& batch, const policy::Policy& victim, LossReport* report) {
  if (batch.empty()) throw DataError("generator: empty batch");
  std::vector<Var> action_terms;
  std::vector<Var> deltas;
  for (const Segment& s : batch) {
    const data::TokenSequence tokens = segment_tokens(dataset, s, model.config());
    Var delta = model.decode(tape, tokens);
    const auto& tr = dataset.trajectories[s.trajectory];
    const Matrix states = tr.states.middleRows(s.start, s.length);
    const std::vector<int> actions(tr.actions.begin() + s.start, tr.actions.begin() + s.start + s.length);
    action_terms.push_back(action_loss(tape, delta, states, actions, victim));
    deltas.push_back(delta);
  }
  Var la = ad::scale(ad::sum(ad::concat_rows(action_terms)), 1.0 / static_cast<double>(batch.size()));
  Var ln = norm_loss(ad::concat_rows(deltas), model.config().norm);
  Var total = ad::add(la, ln);
  if (report != nullptr) {
    report->action_loss = la.value()(0, 0);
    report->norm_loss = ln.value()(0, 0);
    report->total = total.value()(0, 0);
  }
  return total;
}

GeneratorReport train_generator(const data::Dataset& dataset, GeneratorModel& model, const policy::Policy& victim,
                                int steps, double lr, Rng& rng) {
  if (dataset.num_steps() == 0) throw DataError("generator: empty dataset");
  if (!(dataset.manifest.observation_shape == model.shape())) {
    throw ConfigError("generator: dataset observation shape does not match the model");
  }
  GeneratorConfig& cfg = model.config();
  if (cfg.condition == data::Condition::returns_to_go) {
    // Returns-to-go grow with the horizon; bring them to O(1) before embedding.
    double top = 0.0;
    for (const auto& tr : dataset.trajectories) {
      for (double r : tr.rtg) top = std::max(top, std::abs(r));
    }
    cfg.condition_scale = top > 0.0 ? 1.0 / top : 1.0;
  } else {
    cfg.condition_scale = 1.0;
  }
  GeneratorReport report;
  report.condition_scale = cfg.condition_scale;
  const SegmentSampler sampler(make_segments(dataset, cfg), cfg.omega);
  ad::ParameterRefs params;
  model.parameters(params);
  nn::Adam adam(nn::AdamOptions{lr, 0.9, 0.999, 1e-8, 1.0});
  for (int step = 0; step < steps; ++step) {
    std::vector<Segment> batch;
    for (int b = 0; b < cfg.batch_size; ++b) batch.push_back(sampler.segments()[sampler.sample(rng)]);
    Tape tape(true, &rng);
    LossReport r;
    Var loss = generator_loss(tape, model, dataset, batch, victim, &r);
    tape.backward(loss);
    if (lr > 0.0) adam.step(params, tape.parameter_gradients());
    report.losses.push_back(r);
  }
  if (!nn::all_finite(params)) throw DataError("generator: parameters became non-finite");
  return report;
}

double gradient_check(GeneratorModel& model, const data::Dataset& dataset, const std::vector<Segment>& batch,
                      const policy::Policy& victim, Rng& rng, std::size_t max_entries) {
  ad::ParameterRefs params;
  model.parameters(params);
  const auto loss = [&](Tape& tape) { return generator_loss(tape, model, dataset, batch, victim); };
  return ad::check_gradients(params, loss, max_entries, rng).max_relative_error;
}

}  // namespace aat::gen
