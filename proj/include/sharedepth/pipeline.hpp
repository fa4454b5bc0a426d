#pragma once

// Three-stage pipeline: independent task training with Fisher estimation,
// proxy-based choice of (C, w_A), weighted joint training, branch assembly,
// optional decoder-only refinement and prediction.

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "sharedepth/checkpoint.hpp"
#include "sharedepth/data.hpp"
#include "sharedepth/error.hpp"
#include "sharedepth/fisher.hpp"
#include "sharedepth/info.hpp"
#include "sharedepth/nn.hpp"

namespace sharedepth {

/// Where the log-prior logit offsets enter: inside the training likelihood
/// (inference then uses raw logits), subtracted from raw logits at
/// inference only, or nowhere.
enum class LogitAdjust { training, posthoc, none };

inline const char* to_string(LogitAdjust a) {
  switch (a) {
    case LogitAdjust::training: return "training";
    case LogitAdjust::posthoc: return "posthoc";
    case LogitAdjust::none: return "none";
  }
  return "?";
}

inline LogitAdjust parse_logit_adjust(const std::string& s) {
  if (s == "training") return LogitAdjust::training;
  if (s == "posthoc") return LogitAdjust::posthoc;
  if (s == "none") return LogitAdjust::none;
  throw ConfigError("unknown logit adjustment mode '" + s + "'");
}

struct RunConfig {
  std::vector<int> trunk_widths{32, 32};
  Activation activation = Activation::relu;
  OptimizerSettings stage1{0.05, 0.9, 60, 64, 11};
  OptimizerSettings stage2{0.05, 0.9, 60, 64, 12};
  OptimizerSettings refine{0.05, 0.9, 20, 64, 13};
  std::uint64_t init_seed = 7;
  bool warm_start = false;
  std::vector<int> grid_c;  // empty: 0..L
  std::vector<double> grid_w = default_w_grid();
  double tau = 1.0;
  LogitAdjust adjust = LogitAdjust::training;
  bool refine_enabled = true;

  void validate() const {
    if (trunk_widths.empty()) throw ConfigError("trunk needs at least one layer");
    for (const auto* o : {&stage1, &stage2, &refine})
      if (o->epochs < 0) throw ConfigError("epochs must be >= 0");
    if (!(tau >= 0.0)) throw ConfigError("tau must be >= 0");
    for (double w : grid_w)
      if (!(w >= 0.0 && w <= 1.0)) throw ConfigError("w grid values must lie in [0, 1]");
    for (int c : grid_c)
      if (c < 0 || c > static_cast<int>(trunk_widths.size())) throw ConfigError("C grid values must lie in 0..L");
  }

  std::vector<int> c_candidates() const {
    if (!grid_c.empty()) return grid_c;
    std::vector<int> c;
    for (int i = 0; i <= static_cast<int>(trunk_widths.size()); ++i) c.push_back(i);
    return c;
  }
};

/// offset_k = tau * log(pi_k).
inline std::vector<double> logit_offsets(const std::vector<double>& priors, double tau) {
  if (!(tau >= 0.0)) throw DomainError("tau must be >= 0");
  std::vector<double> out(priors.size());
  for (std::size_t k = 0; k < priors.size(); ++k) {
    if (!(priors[k] > 0.0)) throw DomainError("logit adjustment needs strictly positive priors");
    out[k] = tau * std::log(priors[k]);
  }
  return out;
}

/// Reorders per-class values into per-task column order.
inline LogitOffsets split_offsets(const std::vector<double>& per_class, const TaskSplit& split) {
  LogitOffsets o;
  if (per_class.empty()) return o;
  for (int k : split.head) o.a.push_back(per_class[k]);
  for (int k : split.tail) o.b.push_back(per_class[k]);
  return o;
}

struct PreparedData {
  ModelSpec spec;
  TaskSplit split;
  Batch batch;
  std::vector<double> priors;
  LogitOffsets offsets;  // training-likelihood offsets (empty unless adjust == training)

  std::size_t size() const { return static_cast<std::size_t>(batch.rows()); }

  /// Features plus the labels of one task only.
  Batch task_batch(Task t) const {
    Batch b;
    b.features = batch.features;
    (t == Task::A ? b.z_a : b.z_b) = batch.labels(t);
    return b;
  }
};

inline ModelSpec model_spec_for(const RunConfig& cfg, int input_dim, const TaskSplit& split) {
  ModelSpec spec;
  spec.input_dim = input_dim;
  spec.trunk_widths = cfg.trunk_widths;
  spec.activation = cfg.activation;
  spec.head_dims = {static_cast<int>(split.head.size()), static_cast<int>(split.tail.size())};
  spec.validate();
  return spec;
}

/// Splits classes by training frequency and projects the labels. Priors
/// default to the training-set class frequencies.
inline PreparedData prepare(const LongTailDataset& train, const RunConfig& cfg,
                            std::optional<std::vector<double>> priors = std::nullopt) {
  cfg.validate();
  PreparedData d;
  const auto counts = train.class_counts();
  d.split = split_classes(counts);
  d.spec = model_spec_for(cfg, static_cast<int>(train.features.cols()), d.split);
  d.batch = make_batch(train, d.split);
  d.priors = priors ? *priors : train.priors();
  if (cfg.adjust == LogitAdjust::training) d.offsets = split_offsets(logit_offsets(d.priors, cfg.tau), d.split);
  return d;
}

// ---------------------------------------------------------------------------
// Stage 1

struct Stage1Result {
  ParamVector params_a;
  ParamVector params_b;
  DiagFisher fisher_a;
  DiagFisher fisher_b;
  std::vector<double> loss_a;  // per-epoch training loss
  std::vector<double> loss_b;

  const ParamVector& params(Task t) const { return t == Task::A ? params_a : params_b; }
  const DiagFisher& fisher(Task t) const { return t == Task::A ? fisher_a : fisher_b; }
};

inline TaskWeights single_task(Task t) { return t == Task::A ? TaskWeights{1.0, 0.0} : TaskWeights{0.0, 1.0}; }

/// Trains each task from the shared initialization and estimates its
/// diagonal Fisher at the trained parameters.
inline Stage1Result stage1(const RunConfig& cfg, const PreparedData& data) {
  const ParamVector init = init_params(data.spec, cfg.init_seed);
  Stage1Result r;
  for (Task t : {Task::A, Task::B}) {
    const Batch tb = data.task_batch(t);
    auto trained = train(init, data.spec, tb, single_task(t), cfg.stage1, all_blocks(), data.offsets);
    auto fisher = estimate_diag_fisher(trained.params, data.spec, tb, t, data.offsets.of(t));
    if (t == Task::A) {
      r.params_a = std::move(trained.params);
      r.loss_a = std::move(trained.epoch_loss);
      r.fisher_a = std::move(fisher);
    } else {
      r.params_b = std::move(trained.params);
      r.loss_b = std::move(trained.epoch_loss);
      r.fisher_b = std::move(fisher);
    }
  }
  return r;
}

/// Proxy grid over (C, w_A) from Stage-1 statistics.
inline GridResult select_structure(const Stage1Result& s1, const ModelSpec& spec, std::size_t N,
                                   const std::vector<int>& c_candidates, const std::vector<double>& w_candidates) {
  const auto delta = encoder_mismatch(s1.params_a, s1.params_b, spec.depth());
  return grid_search(s1.fisher_a, s1.fisher_b, delta.delta, N, spec, c_candidates, w_candidates);
}

// ---------------------------------------------------------------------------
// Stage 2

struct Stage2Result {
  ParamVector params;
  std::vector<double> epoch_loss;
};

/// Stage-2 starting point: the shared fresh initialization, or (warm start)
/// the w-weighted average of the Stage-1 trunks with each head taken from
/// its own Stage-1 run.
inline ParamVector stage2_init(const RunConfig& cfg, const PreparedData& data, TaskWeights w,
                               const Stage1Result* warm) {
  ParamVector p = init_params(data.spec, cfg.init_seed);
  if (!cfg.warm_start) return p;
  if (warm == nullptr) throw ConfigError("warm start needs Stage-1 parameters");
  const auto trunk = warm->params_a.encoder_slice(data.spec.depth()).size();
  for (std::size_t j = 0; j < trunk; ++j)
    p.values()[j] = w.a * warm->params_a.values()[j] + w.b * warm->params_b.values()[j];
  for (Task t : {Task::A, Task::B}) {
    const int b = data.spec.head_block(t);
    const auto src = warm->params(t).block(b);
    std::copy(src.begin(), src.end(), p.block(b).begin());
  }
  return p;
}

inline Stage2Result stage2(const RunConfig& cfg, const PreparedData& data, double w_a,
                           const Stage1Result* warm = nullptr) {
  if (!(w_a >= 0.0 && w_a <= 1.0)) throw ConfigError("w_A must lie in [0, 1]");
  const TaskWeights w{w_a, 1.0 - w_a};
  auto trained = train(stage2_init(cfg, data, w, warm), data.spec, data.batch, w, cfg.stage2, all_blocks(),
                       data.offsets);
  return {std::move(trained.params), std::move(trained.epoch_loss)};
}

/// First C trunk layers of a trained network.
inline std::vector<double> extract_encoder(const ParamVector& params, int C) {
  const auto s = params.encoder_slice(C);
  return {s.begin(), s.end()};
}

// ---------------------------------------------------------------------------
// Stage 3

struct AssembledModel {
  ModelSpec spec;
  int C = 0;
  std::vector<double> encoder;                 // trunk layers 1..C
  std::array<std::vector<double>, 2> decoder;  // trunk layers C+1..L then head t
  TaskSplit split;
  std::vector<double> priors;
  double tau = 1.0;
  LogitAdjust adjust = LogitAdjust::training;

  /// Task-t network in the full parameter layout; the other head is zero.
  ParamVector branch(Task t) const {
    ParamVector p(spec);
    std::copy(encoder.begin(), encoder.end(), p.values().begin());
    const auto& dec = decoder[index(t)];
    const std::size_t trunk_rest = spec.encoder_param_count(spec.depth()) - encoder.size();
    std::copy(dec.begin(), dec.begin() + static_cast<std::ptrdiff_t>(trunk_rest),
              p.values().begin() + static_cast<std::ptrdiff_t>(encoder.size()));
    auto head = p.block(spec.head_block(t));
    std::copy(dec.begin() + static_cast<std::ptrdiff_t>(trunk_rest), dec.end(), head.begin());
    return p;
  }

  LogitOffsets training_offsets() const {
    if (adjust != LogitAdjust::training) return {};
    return split_offsets(logit_offsets(priors, tau), split);
  }

  Matrix raw_logits(Task t, const Matrix& features) const { return forward(branch(t), spec, features, t); }

  /// Logits of the fitted likelihood model (raw plus training offsets).
  Matrix likelihood_logits(Task t, const Matrix& features) const {
    Matrix s = raw_logits(t, features);
    const auto off = training_offsets().of(t);
    for (std::size_t k = 0; k < off.size(); ++k) s.col(static_cast<Eigen::Index>(k)).array() += off[k];
    return s;
  }

  /// Per-class scores in original class order used for prediction.
  Matrix class_scores(const Matrix& features) const {
    Matrix s(features.rows(), split.num_classes());
    for (Task t : {Task::A, Task::B}) {
      const Matrix part = raw_logits(t, features);
      const auto& cls = split.classes(t);
      for (std::size_t c = 0; c < cls.size(); ++c) s.col(cls[c]) = part.col(static_cast<Eigen::Index>(c));
    }
    if (adjust == LogitAdjust::posthoc) {
      const auto off = logit_offsets(priors, tau);
      for (std::size_t k = 0; k < off.size(); ++k) s.col(static_cast<Eigen::Index>(k)).array() -= off[k];
    }
    return s;
  }

  bool operator==(const AssembledModel&) const = default;
};

/// Shared encoder from Stage 2 plus each task's Stage-1 decoder. No training.
inline AssembledModel assemble(const ModelSpec& spec, const ParamVector& stage2_params, const Stage1Result& s1,
                               int C, const TaskSplit& split, const std::vector<double>& priors, double tau,
                               LogitAdjust adjust) {
  if (C < 0 || C > spec.depth()) throw StructuralError("shared depth outside 0..L");
  for (const ParamVector* p : {&stage2_params, &s1.params_a, &s1.params_b})
    if (p->size() != spec.total_param_count()) throw StructuralError("parameter vector does not match model spec");
  if (split.head.size() != static_cast<std::size_t>(spec.head_dims[0]) ||
      split.tail.size() != static_cast<std::size_t>(spec.head_dims[1]))
    throw StructuralError("split does not match head dimensions");
  AssembledModel m;
  m.spec = spec;
  m.C = C;
  m.encoder = extract_encoder(stage2_params, C);
  m.split = split;
  m.priors = priors;
  m.tau = tau;
  m.adjust = adjust;
  for (Task t : {Task::A, Task::B}) {
    const ParamVector& src = s1.params(t);
    auto& dec = m.decoder[index(t)];
    for (int b = C; b < spec.depth(); ++b) dec.insert(dec.end(), src.block(b).begin(), src.block(b).end());
    const auto head = src.block(spec.head_block(t));
    dec.insert(dec.end(), head.begin(), head.end());
  }
  return m;
}

/// Fine-tunes each decoder on its task's BCE with the encoder frozen.
inline AssembledModel refine_decoders(AssembledModel model, const PreparedData& data, const OptimizerSettings& opt) {
  if (opt.epochs < 0) throw ConfigError("refinement epochs must be >= 0");
  if (opt.epochs == 0) return model;
  const LogitOffsets offsets = model.training_offsets();
  for (Task t : {Task::A, Task::B}) {
    const int C = model.C, L = model.spec.depth(), head = model.spec.head_block(t);
    const BlockMask mask = [=](int b) { return (b >= C && b < L) || b == head; };
    auto trained = train(model.branch(t), model.spec, data.task_batch(t), single_task(t), opt, mask, offsets);
    auto& dec = model.decoder[index(t)];
    dec.clear();
    for (int b = C; b < L; ++b) dec.insert(dec.end(), trained.params.block(b).begin(), trained.params.block(b).end());
    const auto h = trained.params.block(head);
    dec.insert(dec.end(), h.begin(), h.end());
  }
  return model;
}

/// argmax over the concatenated per-task logits, mapped back to class
/// indices; ties go to the smallest class index.
inline std::vector<int> predict(const AssembledModel& model, const Matrix& features) {
  const Matrix s = model.class_scores(features);
  std::vector<int> out(static_cast<std::size_t>(s.rows()));
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    int best = 0;
    for (Eigen::Index k = 1; k < s.cols(); ++k)
      if (s(i, k) > s(i, best)) best = static_cast<int>(k);
    out[static_cast<std::size_t>(i)] = best;
  }
  return out;
}

inline int predict(const AssembledModel& model, std::span<const double> y) {
  Matrix x(1, static_cast<Eigen::Index>(y.size()));
  for (std::size_t j = 0; j < y.size(); ++j) x(0, static_cast<Eigen::Index>(j)) = y[j];
  return predict(model, x).front();
}

struct Metrics {
  double overall_accuracy = 0.0;
  double head_accuracy = 0.0;
  double tail_accuracy = 0.0;
  double bce_a = 0.0;  // task-wise BCE of the likelihood model
  double bce_b = 0.0;
  std::size_t samples = 0;
};

inline Metrics evaluate(const AssembledModel& model, const LongTailDataset& test) {
  if (test.size() == 0) throw DomainError("empty evaluation set");
  Metrics m;
  m.samples = test.size();
  const auto pred = predict(model, test.features);
  const auto where = model.split.locate();
  std::size_t hit = 0, head_n = 0, head_hit = 0, tail_n = 0, tail_hit = 0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const bool ok = pred[i] == test.classes[i];
    hit += ok;
    if (where[test.classes[i]].first == Task::A) {
      ++head_n;
      head_hit += ok;
    } else {
      ++tail_n;
      tail_hit += ok;
    }
  }
  m.overall_accuracy = static_cast<double>(hit) / static_cast<double>(test.size());
  m.head_accuracy = head_n ? static_cast<double>(head_hit) / static_cast<double>(head_n) : 0.0;
  m.tail_accuracy = tail_n ? static_cast<double>(tail_hit) / static_cast<double>(tail_n) : 0.0;
  const Batch b = make_batch(test, model.split);
  const LogitOffsets off = model.training_offsets();
  m.bce_a = bce_loss_grad(model.branch(Task::A), model.spec, b, Task::A, off.a).loss;
  m.bce_b = bce_loss_grad(model.branch(Task::B), model.spec, b, Task::B, off.b).loss;
  return m;
}

/// Task-wise KL risk of an assembled model at the given evaluation points.
inline RiskBreakdown taskwise_risk(const Generator& g, const AssembledModel& model, const Matrix& eval_points,
                                   OutcomeSet outcomes = OutcomeSet::single_label) {
  return taskwise_risk(true_posteriors(g, eval_points), model.split, model.likelihood_logits(Task::A, eval_points),
                       model.likelihood_logits(Task::B, eval_points), outcomes);
}

// ---------------------------------------------------------------------------
// Assembled-model container.

inline constexpr std::string_view kModelMagic = "SDMODL01";

inline std::string encode_model(const AssembledModel& m) {
  std::string buf(kModelMagic);
  binio::put_spec(buf, m.spec);
  binio::put_u32(buf, static_cast<std::uint32_t>(m.C));
  binio::put_u32(buf, static_cast<std::uint32_t>(m.adjust));
  binio::put_f64(buf, m.tau);
  for (const auto* cls : {&m.split.head, &m.split.tail}) {
    binio::put_u32(buf, static_cast<std::uint32_t>(cls->size()));
    for (int k : *cls) binio::put_u32(buf, static_cast<std::uint32_t>(k));
  }
  binio::put_doubles(buf, m.priors);
  binio::put_doubles(buf, m.encoder);
  binio::put_doubles(buf, m.decoder[0]);
  binio::put_doubles(buf, m.decoder[1]);
  return buf;
}

inline AssembledModel decode_model(std::string bytes, const std::string& source = "model") {
  binio::Reader r(std::move(bytes), source);
  r.expect_magic(kModelMagic);
  AssembledModel m;
  m.spec = binio::get_spec(r);
  m.C = static_cast<int>(r.u32());
  const auto adj = r.u32();
  if (adj > 2) throw StructuralError(source + ": unknown logit adjustment code");
  m.adjust = static_cast<LogitAdjust>(adj);
  m.tau = r.f64();
  for (auto* cls : {&m.split.head, &m.split.tail}) {
    const auto n = r.u32();
    for (std::uint32_t i = 0; i < n; ++i) cls->push_back(static_cast<int>(r.u32()));
  }
  m.priors = binio::get_doubles(r);
  m.encoder = binio::get_doubles(r);
  m.decoder[0] = binio::get_doubles(r);
  m.decoder[1] = binio::get_doubles(r);
  if (!r.at_end()) throw StructuralError(source + ": trailing bytes");
  if (m.C < 0 || m.C > m.spec.depth() || m.encoder.size() != m.spec.encoder_param_count(m.C) ||
      m.decoder[0].size() != m.spec.decoder_param_count(m.C, Task::A) ||
      m.decoder[1].size() != m.spec.decoder_param_count(m.C, Task::B))
    throw StructuralError(source + ": model blocks do not match the spec");
  check_split(m.split, static_cast<int>(m.priors.size()));
  return m;
}

inline void save_model(const std::filesystem::path& path, const AssembledModel& m) {
  binio::write_file(path, encode_model(m));
}

inline AssembledModel load_model(const std::filesystem::path& path) {
  return decode_model(binio::read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// End-to-end run.

struct PipelineResult {
  Stage1Result stage1;
  GridResult grid;
  int C = 0;
  double w_a = 0.5;
  Stage2Result stage2;
  AssembledModel model;  // after refinement when enabled
};

/// Stage 1, selection, Stage 2, assembly and (optionally) refinement. A
/// fixed (C, w_A) skips the proxy search result for the choice but the
/// grid is still evaluated and recorded.
inline PipelineResult run_pipeline(const RunConfig& cfg, const PreparedData& data,
                                   std::optional<std::pair<int, double>> fixed = std::nullopt) {
  PipelineResult r;
  r.stage1 = stage1(cfg, data);
  r.grid = select_structure(r.stage1, data.spec, data.size(), cfg.c_candidates(), cfg.grid_w);
  r.C = fixed ? fixed->first : r.grid.best_C;
  r.w_a = fixed ? fixed->second : r.grid.best_w;
  r.stage2 = stage2(cfg, data, r.w_a, &r.stage1);
  r.model = assemble(data.spec, r.stage2.params, r.stage1, r.C, data.split, data.priors, cfg.tau, cfg.adjust);
  if (cfg.refine_enabled) r.model = refine_decoders(std::move(r.model), data, cfg.refine);
  return r;
}

}  // namespace sharedepth
