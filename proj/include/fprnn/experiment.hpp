#pragma once

// Experiment orchestration: configuration, training loop, length sweeps,
// sequential inference, checkpoint glue and the property-suite driver.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "fprnn/checkpoint.hpp"
#include "fprnn/model.hpp"
#include "fprnn/properties.hpp"
#include "fprnn/tasks.hpp"
#include "fprnn/train.hpp"

namespace fprnn {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

struct ExperimentConfig {
  TaskConfig task;
  ModelConfig model;
  FixedPointConfig solver;
  FixedPointConfig eval_solver = FixedPointConfig::evaluation();
  TrainConfig train;
  std::size_t batch_size = 32;
  std::size_t eval_batch = 256;
  // Evaluation runs in chunks of this many sequences to bound memory.
  std::size_t eval_chunk = 32;
  std::size_t eval_every = 500;
  // 0 keeps only the rolling latest checkpoint.
  std::size_t checkpoint_every = 0;
  // Empty means the longest training length only.
  std::vector<std::size_t> eval_lengths;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool f64_checkpoint = false;

  /// Model configuration with the vocabulary taken from the task.
  ModelConfig model_config() const {
    ModelConfig m = model;
    m.vocab = task.vocab_size();
    return m;
  }

  std::vector<std::size_t> lengths() const {
    return eval_lengths.empty() ? std::vector<std::size_t>{task.train_hi} : eval_lengths;
  }

  void validate() const {
    model_config().validate();
    solver.validate();
    eval_solver.validate();
    train.validate();
    if (task.train_lo == 0 || task.train_lo > task.train_hi) throw std::invalid_argument("ExperimentConfig: bad training length range");
    if (batch_size == 0 || eval_batch == 0 || eval_chunk == 0) throw std::invalid_argument("ExperimentConfig: batch sizes must be positive");
    if (eval_every == 0) throw std::invalid_argument("ExperimentConfig: eval_every must be positive");
    for (std::size_t L : lengths())
      if (L == 0) throw std::invalid_argument("ExperimentConfig: eval length 0");
  }
};

inline json to_json(const TaskConfig& t) {
  return {{"kind", to_string(t.kind)},           {"group", to_string(t.group)},   {"group_n", t.group_n},
          {"copy_vocab", t.copy_vocab},          {"modulus", t.modulus},          {"train_lo", t.train_lo},
          {"train_hi", t.train_hi}};
}

inline TaskConfig task_from_json(const json& j) {
  TaskConfig t;
  t.kind = parse_task_kind(j.value("kind", std::string(to_string(t.kind))));
  t.group = parse_group_kind(j.value("group", std::string(to_string(t.group))));
  t.group_n = j.value("group_n", t.group_n);
  t.copy_vocab = j.value("copy_vocab", t.copy_vocab);
  t.modulus = j.value("modulus", t.modulus);
  t.train_lo = j.value("train_lo", t.train_lo);
  t.train_hi = j.value("train_hi", t.train_hi);
  return t;
}

inline json to_json(const FpMambaDependence& d) {
  return {{"lambda", d.lambda}, {"q", d.q}, {"b", d.b}, {"c", d.c}};
}

inline FpMambaDependence dependence_from_json(const json& j) {
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "full") return {};
    if (s == "bc") return FpMambaDependence::bc_only();
    if (s == "none") return FpMambaDependence::none();
    throw std::invalid_argument("unknown dependence preset: " + s);
  }
  FpMambaDependence d;
  d.lambda = j.value("lambda", d.lambda);
  d.q = j.value("q", d.q);
  d.b = j.value("b", d.b);
  d.c = j.value("c", d.c);
  return d;
}

inline json to_json(const ModelConfig& m) {
  return {{"kind", to_string(m.kind)},
          {"d_model", m.d_model},
          {"expansion", m.expansion},
          {"d_state", m.d_state},
          {"mixer", to_string(m.mixer)},
          {"rank", m.rank},
          {"contraction_eps", m.contraction_eps},
          {"rescale_alpha", m.rescale_alpha},
          {"power_iters", m.power_iters},
          {"dependence", to_json(m.dep)},
          {"conv_width", m.conv_width},
          {"skip_uses_adjusted", m.skip_uses_adjusted}};
}

inline ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.kind = parse_model_kind(j.value("kind", std::string(to_string(m.kind))));
  m.d_model = j.value("d_model", m.d_model);
  m.expansion = j.value("expansion", m.expansion);
  m.d_state = j.value("d_state", m.d_state);
  m.mixer = parse_mixer_variant(j.value("mixer", std::string(to_string(m.mixer))));
  m.rank = j.value("rank", m.rank);
  m.contraction_eps = j.value("contraction_eps", m.contraction_eps);
  m.rescale_alpha = j.value("rescale_alpha", m.rescale_alpha);
  m.power_iters = j.value("power_iters", m.power_iters);
  if (j.contains("dependence")) m.dep = dependence_from_json(j["dependence"]);
  m.conv_width = j.value("conv_width", m.conv_width);
  m.skip_uses_adjusted = j.value("skip_uses_adjusted", m.skip_uses_adjusted);
  return m;
}

inline json to_json(const FixedPointConfig& c) {
  return {{"tol", c.tol},
          {"ell_max", c.ell_max},
          {"sample_ell_max", c.sample_ell_max},
          {"gamma_shape", c.gamma_shape},
          {"gamma_scale", c.gamma_scale},
          {"batch_quantile", c.batch_quantile},
          {"damping",
           {{"enabled", c.damping.enabled},
            {"delta0", c.damping.delta0},
            {"factor", c.damping.factor},
            {"patience", c.damping.patience}}}};
}

inline FixedPointConfig solver_from_json(const json& j, FixedPointConfig c) {
  c.tol = j.value("tol", c.tol);
  c.ell_max = j.value("ell_max", c.ell_max);
  c.sample_ell_max = j.value("sample_ell_max", c.sample_ell_max);
  c.gamma_shape = j.value("gamma_shape", c.gamma_shape);
  c.gamma_scale = j.value("gamma_scale", c.gamma_scale);
  c.batch_quantile = j.value("batch_quantile", c.batch_quantile);
  if (j.contains("damping")) {
    const json& d = j["damping"];
    c.damping.enabled = d.value("enabled", c.damping.enabled);
    c.damping.delta0 = d.value("delta0", c.damping.delta0);
    c.damping.factor = d.value("factor", c.damping.factor);
    c.damping.patience = d.value("patience", c.damping.patience);
  }
  return c;
}

inline json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"weight_decay", c.weight_decay},
          {"clip_norm", c.clip_norm},
          {"schedule", to_string(c.schedule)},
          {"warmup", c.warmup},
          {"steps", c.total_steps},
          {"final_lr_factor", c.final_lr_factor},
          {"k_backprop", c.k_backprop}};
}

inline TrainConfig train_from_json(const json& j) {
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.schedule = parse_schedule(j.value("schedule", std::string(to_string(c.schedule))));
  c.warmup = j.value("warmup", c.warmup);
  c.total_steps = j.value("steps", c.total_steps);
  c.final_lr_factor = j.value("final_lr_factor", c.final_lr_factor);
  c.k_backprop = j.value("k_backprop", c.k_backprop);
  return c;
}

inline json to_json(const ExperimentConfig& c) {
  return {{"task", to_json(c.task)},
          {"model", to_json(c.model)},
          {"solver", to_json(c.solver)},
          {"eval_solver", to_json(c.eval_solver)},
          {"train", to_json(c.train)},
          {"batch_size", c.batch_size},
          {"eval_batch", c.eval_batch},
          {"eval_chunk", c.eval_chunk},
          {"eval_every", c.eval_every},
          {"checkpoint_every", c.checkpoint_every},
          {"eval_lengths", c.eval_lengths},
          {"out_dir", c.out_dir},
          {"seed", c.seed},
          {"f64_checkpoint", c.f64_checkpoint}};
}

inline ExperimentConfig experiment_from_json(const json& j) {
  ExperimentConfig c;
  if (j.contains("task")) c.task = task_from_json(j["task"]);
  if (j.contains("model")) c.model = model_from_json(j["model"]);
  if (j.contains("solver")) c.solver = solver_from_json(j["solver"], c.solver);
  if (j.contains("eval_solver")) c.eval_solver = solver_from_json(j["eval_solver"], c.eval_solver);
  if (j.contains("train")) c.train = train_from_json(j["train"]);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.eval_batch = j.value("eval_batch", c.eval_batch);
  c.eval_chunk = j.value("eval_chunk", c.eval_chunk);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.eval_lengths = j.value("eval_lengths", c.eval_lengths);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.seed = j.value("seed", c.seed);
  c.f64_checkpoint = j.value("f64_checkpoint", c.f64_checkpoint);
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config " + path);
  return experiment_from_json(json::parse(is));
}

// ---------------------------------------------------------------------------
// Seeds and metrics

/// splitmix64 over (seed, stream, index); distinct streams never share batches.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ stream) ^ index);
}

enum SeedStream : std::uint64_t { kInitStream = 1, kTrainStream = 2, kEllStream = 3, kTestStream = 4 };

struct MetricsRecord {
  std::size_t step = 0;
  std::string split;
  std::size_t sequence_length = 0;
  double accuracy = 0.0;
  double loss = 0.0;
  double median_ell_star = 0.0;
  double p90_ell_star = 0.0;
  double wall_seconds = 0.0;

  /// Equality on everything except wall-clock time.
  bool same_values(const MetricsRecord& o) const {
    return step == o.step && split == o.split && sequence_length == o.sequence_length && accuracy == o.accuracy &&
           loss == o.loss && median_ell_star == o.median_ell_star && p90_ell_star == o.p90_ell_star;
  }
};

inline constexpr const char* kMetricsHeader =
    "step,split,sequence_length,accuracy,loss,median_ell_star,p90_ell_star,wall_seconds";

inline std::string csv_row(const MetricsRecord& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%s,%zu,%.17g,%.17g,%.17g,%.17g,%.6f", r.step, r.split.c_str(), r.sequence_length,
                r.accuracy, r.loss, r.median_ell_star, r.p90_ell_star, r.wall_seconds);
  return buf;
}

/// Nearest-rank quantile of a non-empty sample.
inline double nearest_rank(std::vector<double> v, double q) {
  if (v.empty()) throw std::invalid_argument("nearest_rank: empty sample");
  std::sort(v.begin(), v.end());
  const auto k = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size())));
  return v[std::clamp<std::size_t>(k, 1, v.size()) - 1];
}

// ---------------------------------------------------------------------------
// Checkpoint glue

inline Checkpoint make_checkpoint(Model& m, const ExperimentConfig& cfg) {
  Checkpoint ck;
  ck.put_text("__config__", to_json(cfg).dump());
  m.for_each_param("", [&](const std::string& name, Mat& value) { ck.put(name, value, cfg.f64_checkpoint); });
  return ck;
}

struct LoadedModel {
  ExperimentConfig cfg;
  Model model;
};

inline LoadedModel restore(const Checkpoint& ck) {
  LoadedModel out;
  out.cfg = experiment_from_json(json::parse(ck.at("__config__").text));
  out.model = Model::zeros(out.cfg.model_config());
  std::size_t seen = 0;
  out.model.for_each_param("", [&](const std::string& name, Mat& value) {
    const CheckpointEntry& e = ck.at(name);
    if (e.dtype == DType::utf8 || !e.value.same_shape(value))
      throw CheckpointError("checkpoint: entry '" + name + "' has shape " + shape_str(e.value) + ", model expects " +
                            shape_str(value));
    value = e.value;
    ++seen;
  });
  if (seen + 1 != ck.entries.size()) throw CheckpointError("checkpoint: unexpected extra entries");
  return out;
}

inline LoadedModel load_model(const std::string& path) { return restore(load_checkpoint(path)); }

// ---------------------------------------------------------------------------
// Evaluation

/// Fresh seeded test batches at one length. Accuracy is the fraction of
/// supervised positions predicted correctly.
inline MetricsRecord evaluate_length(const Model& m, const ExperimentConfig& cfg, std::size_t length,
                                     std::size_t step = 0) {
  const SequenceBatch all = generate(cfg.task, length, length, cfg.eval_batch, derive_seed(cfg.seed, kTestStream, length));
  MetricsRecord rec;
  rec.step = step;
  rec.split = "test";
  rec.sequence_length = length;
  std::vector<double> ells;
  double loss_sum = 0.0;
  std::size_t correct = 0, supervised = 0;
  for (std::size_t b0 = 0; b0 < all.batch; b0 += cfg.eval_chunk) {
    const std::size_t nb = std::min(cfg.eval_chunk, all.batch - b0);
    const std::size_t lo = b0 * all.seq_len, hi = (b0 + nb) * all.seq_len;
    const std::span<const int> ids(all.tokens.data() + lo, hi - lo), tg(all.targets.data() + lo, hi - lo),
        mk(all.mask.data() + lo, hi - lo);
    const ForwardResult r = model_forward(m, ids, tg, mk, nb, all.seq_len, cfg.eval_solver, 0);
    loss_sum += r.loss * static_cast<double>(r.supervised);
    correct += r.correct;
    supervised += r.supervised;
    for (std::size_t e : r.solve.ell_star) ells.push_back(static_cast<double>(e));
  }
  rec.accuracy = supervised ? static_cast<double>(correct) / static_cast<double>(supervised) : 0.0;
  rec.loss = supervised ? loss_sum / static_cast<double>(supervised) : 0.0;
  rec.median_ell_star = nearest_rank(ells, 0.5);
  rec.p90_ell_star = nearest_rank(ells, 0.9);
  return rec;
}

inline std::vector<MetricsRecord> eval_length_generalization(const Model& m, const ExperimentConfig& cfg,
                                                             const std::vector<std::size_t>& lengths, std::size_t step = 0) {
  std::vector<MetricsRecord> out;
  for (std::size_t L : lengths) out.push_back(evaluate_length(m, cfg, L, step));
  return out;
}

inline std::vector<MetricsRecord> eval_length_generalization(const std::string& checkpoint,
                                                             const std::vector<std::size_t>& lengths) {
  if (!std::filesystem::exists(checkpoint)) throw CheckpointError("checkpoint not found: " + checkpoint);
  const LoadedModel lm = load_model(checkpoint);
  return eval_length_generalization(lm.model, lm.cfg, lengths.empty() ? lm.cfg.lengths() : lengths);
}

// ---------------------------------------------------------------------------
// Training

struct TrainOutcome {
  Model model;
  std::vector<MetricsRecord> metrics;
  std::size_t steps_done = 0;
  bool aborted = false;
  std::string abort_reason;
};

using RecordSink = std::function<void(const MetricsRecord&)>;

inline TrainOutcome run_train(const ExperimentConfig& cfg, const RecordSink& sink = {}) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto wall = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  const ModelConfig mc = cfg.model_config();

  TrainOutcome out;
  std::mt19937_64 init_rng(derive_seed(cfg.seed, kInitStream));
  out.model = Model::init(mc, init_rng);
  std::mt19937_64 ell_rng(derive_seed(cfg.seed, kEllStream));
  AdamState adam;

  const bool write = !cfg.out_dir.empty();
  const std::filesystem::path dir(cfg.out_dir);
  std::ofstream csv;
  if (write) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "config.json") << to_json(cfg).dump(2) << "\n";
    csv.open(dir / "metrics.csv", std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + (dir / "metrics.csv").string());
    csv << kMetricsHeader << "\n";
  }
  auto emit = [&](MetricsRecord r) {
    r.wall_seconds = wall();
    out.metrics.push_back(r);
    if (write) csv << csv_row(r) << "\n" << std::flush;
    if (sink) sink(r);
  };
  auto save = [&](std::size_t step) {
    if (!write) return;
    const Checkpoint ck = make_checkpoint(out.model, cfg);
    save_checkpoint((dir / "checkpoint.fprnn").string(), ck);
    if (cfg.checkpoint_every && step % cfg.checkpoint_every == 0)
      save_checkpoint((dir / ("checkpoint_" + std::to_string(step) + ".fprnn")).string(), ck);
  };

  for (const auto& r : eval_length_generalization(out.model, cfg, cfg.lengths(), 0)) emit(r);
  save(0);

  const std::size_t steps = cfg.train.total_steps;
  for (std::size_t step = 0; step < steps; ++step) {
    const SequenceBatch b =
        generate(cfg.task, cfg.task.train_lo, cfg.task.train_hi, cfg.batch_size, derive_seed(cfg.seed, kTrainStream, step));
    Model grads = Model::zeros(mc);
    ForwardResult r;
    try {
      r = model_forward(out.model, b.tokens, b.targets, b.mask, b.batch, b.seq_len, cfg.solver, cfg.train.k_backprop,
                        &grads, &ell_rng);
    } catch (const NumericError& e) {
      out.aborted = true;
      out.abort_reason = "step " + std::to_string(step) + ": " + e.what();
      break;
    }
    const std::vector<Mat*> gs = grads.params();
    if (!std::isfinite(r.loss) || !std::isfinite(global_norm(gs))) {
      out.aborted = true;
      out.abort_reason = "step " + std::to_string(step) + ": non-finite loss or gradient";
      break;
    }
    const ClipResult clip = clip_and_schedule(gs, step, cfg.train);
    const Model before = out.model;
    const auto adam_before = adam;
    adamw_step(out.model.params(), gs, adam, cfg.train, clip.lr);
    const auto ps = out.model.params();
    if (!std::all_of(ps.begin(), ps.end(), [](const Mat* p) { return all_finite(*p); })) {
      out.model = before;
      adam = adam_before;
      out.aborted = true;
      out.abort_reason = "step " + std::to_string(step) + ": non-finite parameters after update";
      break;
    }
    out.steps_done = step + 1;

    const bool last = out.steps_done == steps;
    if (out.steps_done % cfg.eval_every == 0 || last) {
      MetricsRecord tr;
      tr.step = out.steps_done;
      tr.split = "train";
      tr.sequence_length = cfg.task.train_hi;
      tr.accuracy = r.accuracy();
      tr.loss = r.loss;
      std::vector<double> ells(r.solve.ell_star.begin(), r.solve.ell_star.end());
      tr.median_ell_star = nearest_rank(ells, 0.5);
      tr.p90_ell_star = nearest_rank(ells, 0.9);
      emit(tr);
      for (const auto& e : eval_length_generalization(out.model, cfg, cfg.lengths(), out.steps_done)) emit(e);
    }
    if (last || (cfg.checkpoint_every && out.steps_done % cfg.checkpoint_every == 0)) save(out.steps_done);
  }
  // A failing step never leaves its update in place.
  if (out.aborted) save(out.steps_done);
  return out;
}

// ---------------------------------------------------------------------------
// Sequential inference

struct SequentialResult {
  Mat parallel;    // T x d_inner layer outputs from the parallel solve
  Mat sequential;  // same, solved token by token
  std::vector<double> token_diff;
  std::vector<std::size_t> ell_per_token;
  std::vector<int> parallel_predictions, sequential_predictions;
  double max_diff = 0.0;
};

/// Solves one sequence token by token: the fixed point of token t is
/// iterated with the converged outputs of tokens < t frozen, stopping on
/// the residual of row t alone. Causality lets every iteration run on the
/// prefix only.
inline SequentialResult sequential_inference(const Model& m, std::span<const int> ids, FixedPointConfig solver) {
  const std::size_t T = ids.size();
  if (T == 0) throw DimensionError("sequential_inference: empty sequence");
  solver = effective_solver(m, solver);
  solver.validate();

  ad::Tape t0(false);
  const ModelVars v0 = bind(t0, m, nullptr);
  const Mat e = ad::embedding(ids, v0.embed).value();
  const Mat x = ad::linear(t0.constant(e), v0.in_proj).value();
  const std::size_t d = x.cols;
  auto step = [&](const Mat& xs, const Mat& ys) {
    ad::Tape t(false);
    const ModelVars v = bind(t, m, nullptr);
    return layer_step(m, v, t.constant(xs), t.constant(ys), xs.rows).value();
  };
  auto logits_of = [&](const Mat& y) {
    ad::Tape t(false);
    const ModelVars v = bind(t, m, nullptr);
    return readout(v, t.constant(e), t.constant(y)).value();
  };
  auto argmax_rows = [](const Mat& z) {
    std::vector<int> out;
    for (std::size_t r = 0; r < z.rows; ++r) {
      const auto row = z.row(r);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
    return out;
  };

  SequentialResult res;
  res.parallel = solve([&](const Mat& y) { return step(x, y); }, 1, T, d, solver).h_star;
  res.sequential = Mat(T, d);
  for (std::size_t t = 0; t < T; ++t) {
    Mat xs(t + 1, d), ys(t + 1, d);
    std::copy(x.data.begin(), x.data.begin() + static_cast<std::ptrdiff_t>((t + 1) * d), xs.data.begin());
    std::copy(res.sequential.data.begin(), res.sequential.data.begin() + static_cast<std::ptrdiff_t>(t * d),
              ys.data.begin());
    const StepFn row_step = [&](const Mat& row) {
      std::copy(row.data.begin(), row.data.end(), ys.row(t).begin());
      const Mat f = step(xs, ys);
      Mat out(1, d);
      std::copy(f.row(t).begin(), f.row(t).end(), out.data.begin());
      return out;
    };
    const FixedPointResult r = solve(row_step, 1, 1, d, solver);
    res.ell_per_token.push_back(r.ell_star[0]);
    std::copy(r.h_star.data.begin(), r.h_star.data.end(), res.sequential.row(t).begin());
  }
  for (std::size_t t = 0; t < T; ++t) {
    double num = 0.0, den = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double a = res.sequential(t, j), b = res.parallel(t, j);
      num += (a - b) * (a - b);
      den += b * b;
    }
    res.token_diff.push_back(std::sqrt(num) / std::max(std::sqrt(den), 1e-12));
    res.max_diff = std::max(res.max_diff, res.token_diff.back());
  }
  res.parallel_predictions = argmax_rows(logits_of(res.parallel));
  res.sequential_predictions = argmax_rows(logits_of(res.sequential));
  return res;
}

/// Worst per-token normalized difference between sequential and parallel
/// solves over `count` test sequences at each length.
inline SuiteReport seq_vs_parallel_suite(const Model& m, const ExperimentConfig& cfg, const std::vector<std::size_t>& lengths,
                                         std::size_t count, bool require_threshold) {
  SuiteReport rep{"sequential_vs_parallel", true, 0.0, 0.1, 0, ""};
  std::string per_length;
  for (std::size_t L : lengths) {
    const SequenceBatch b = generate(cfg.task, L, L, count, derive_seed(cfg.seed, kTestStream, 1000 + L));
    double worst = 0.0, whole = 0.0;
    std::size_t over = 0;
    for (std::size_t s = 0; s < b.batch; ++s) {
      const std::span<const int> ids(b.tokens.data() + s * b.seq_len, b.seq_len);
      try {
        const SequentialResult r = sequential_inference(m, ids, cfg.eval_solver);
        worst = std::max(worst, r.max_diff);
        whole = std::max(whole, frobenius_norm(sub(r.sequential, r.parallel)) / std::max(frobenius_norm(r.parallel), 1e-300));
        for (double d : r.token_diff) over += d >= rep.threshold;
      } catch (const NumericError& e) {
        worst = INFINITY;
        rep.detail = e.what();
      }
      ++rep.cases;
    }
    rep.metric = std::max(rep.metric, worst);
    char buf[160];
    std::snprintf(buf, sizeof buf, "%sT=%zu token max %.3g, tokens >= %.2g: %zu/%zu, sequence-level max %.3g", per_length.empty() ? "" : "; ",
                  L, worst, rep.threshold, over, b.batch * L, whole);
    per_length += buf;
  }
  rep.passed = std::isfinite(rep.metric) && (!require_threshold || rep.metric < rep.threshold);
  if (rep.detail.empty()) rep.detail = per_length;
  if (!require_threshold) rep.detail = "untrained model, only finiteness required: " + rep.detail;
  return rep;
}

// ---------------------------------------------------------------------------
// Gradient checks on the full model

/// Masked cross-entropy of a k-truncated replay with the solver records held
/// fixed, so central differences see exactly the replayed computation.
inline double replay_loss(const Model& m, const SequenceBatch& b, const FixedPointResult& r, std::size_t k, Model* grads) {
  ad::Tape t(grads != nullptr);
  const ModelVars v = bind(t, m, grads);
  ad::Var e = ad::embedding(b.tokens, v.embed);
  ad::Var x = ad::linear(e, v.in_proj);
  StepRecorder rec = [&](ad::Tape&, ad::Var y) { return layer_step(m, v, x, y, b.seq_len); };
  ad::Var loss = ad::cross_entropy_masked(readout(v, e, replay_fixed_point(t, rec, r, k)), b.targets, b.mask);
  if (grads) t.backward(loss);
  return loss.value()(0, 0);
}

/// k-truncated composites on small FP-Mamba models: each replay against
/// central differences of the same replay, and the full unroll against
/// central differences of the whole fixed-iteration solve. Power iteration
/// runs to convergence, where the eigenvalue derivative is exact.
inline SuiteReport truncated_gradient_suite(std::uint64_t seed = 9) {
  SuiteReport rep{"truncated_gradients", true, 0.0, 1e-5, 0, ""};
  std::mt19937_64 rng(seed);
  TaskConfig task;
  task.train_lo = task.train_hi = 5;
  FixedPointConfig fixed;
  fixed.tol = 1e-300;
  fixed.ell_max = 4;
  fixed.damping.enabled = false;
  fixed.keep_last = 4;
  for (MixerVariant mv : {MixerVariant::householder, MixerVariant::kronecker}) {
    ModelConfig mc;
    mc.vocab = task.vocab_size();
    mc.d_model = 2;
    mc.expansion = 2;
    mc.d_state = 3;
    mc.mixer = mv;
    mc.power_iters = 1000;
    Model m = Model::init(mc, rng);
    const SequenceBatch b = generate(task, 5, 5, 2, seed);
    const FixedPointResult r =
        solve([&](const Mat& y) {
                ad::Tape t(false);
                const ModelVars v = bind(t, m, nullptr);
                const Mat x = ad::linear(ad::embedding(b.tokens, v.embed), v.in_proj).value();
                return layer_step(m, v, t.constant(x), t.constant(y), b.seq_len).value();
              },
              b.batch, b.seq_len, mc.d_inner(), fixed);
    for (std::size_t k : {0, 1, 3}) {
      Model g = Model::zeros(mc);
      const double e = check::check_param_gradients(m, g, [&](Model& p, Model* gr) { return replay_loss(p, b, r, k, gr); });
      rep.metric = std::max(rep.metric, e);
      ++rep.cases;
    }
    Model g = Model::zeros(mc);
    const double e = check::check_param_gradients(m, g, [&](Model& p, Model* gr) {
      return model_forward(p, b.tokens, b.targets, b.mask, b.batch, b.seq_len, fixed, 3, gr).loss;
    });
    rep.metric = std::max(rep.metric, e);
    ++rep.cases;
  }
  rep.passed = rep.metric < rep.threshold;
  return rep;
}

// ---------------------------------------------------------------------------
// Property-suite driver

struct PropertyConfig {
  double contraction_eps = 0.01;
  std::uint64_t seed = 0;
  std::size_t oracle_instances = 100;
  std::size_t lipschitz_pairs = 1000;
  std::size_t descent_instances = 100;
  std::size_t seq_sequences = 4;
};

/// Runs every invariant suite. With a trained model the sequential-vs-
/// parallel check must meet its 0.1 threshold; otherwise a fresh small
/// model is used and only a finite difference is required.
inline std::vector<SuiteReport> run_property_suite(const PropertyConfig& pc, const LoadedModel* trained = nullptr) {
  std::vector<SuiteReport> out;
  out.push_back(oracle_equivalence_suite(pc.oracle_instances, derive_seed(pc.seed, 11), pc.contraction_eps));
  out.push_back(lipschitz_suite(pc.lipschitz_pairs, derive_seed(pc.seed, 12), pc.contraction_eps));
  out.push_back(primitive_gradient_suite(42 + pc.seed));
  out.push_back(truncated_gradient_suite(derive_seed(pc.seed, 13)));
  out.push_back(implicit_gradient_suite(12, derive_seed(pc.seed, 16)));
  out.push_back(scan_suite(24, derive_seed(pc.seed, 14)));
  out.push_back(descent_suite(pc.descent_instances, derive_seed(pc.seed, 15)));
  if (trained) {
    const auto& c = trained->cfg;
    out.push_back(seq_vs_parallel_suite(trained->model, c, {c.task.train_hi, 2 * c.task.train_hi}, pc.seq_sequences, true));
  } else {
    ExperimentConfig c;
    c.seed = pc.seed;
    std::mt19937_64 rng(derive_seed(pc.seed, kInitStream));
    const Model m = Model::init(c.model_config(), rng);
    out.push_back(seq_vs_parallel_suite(m, c, {4}, pc.seq_sequences, false));
  }
  return out;
}

inline json report_json(const std::vector<SuiteReport>& reports) {
  json suites = json::array();
  bool all = true;
  for (const auto& r : reports) {
    all = all && r.passed;
    suites.push_back({{"name", r.name},
                      {"passed", r.passed},
                      {"metric", std::isfinite(r.metric) ? json(r.metric) : json("inf")},
                      {"threshold", r.threshold},
                      {"cases", r.cases},
                      {"detail", r.detail}});
  }
  return {{"passed", all}, {"suites", suites}};
}

}  // namespace fprnn
