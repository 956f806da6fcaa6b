// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any
// fails. Pass criterion numbers as arguments to run a subset.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "fprnn/experiment.hpp"

using namespace fprnn;

namespace {

struct Line {
  bool passed = false;
  std::string summary;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string suite_summary(const SuiteReport& r) {
  return fmt("%s metric=%.3e threshold=%.1e cases=%zu%s%s", r.name.c_str(), r.metric, r.threshold, r.cases,
             r.detail.empty() ? "" : " ", r.detail.c_str());
}

// ---------------------------------------------------------------------------
// Trained models

ExperimentConfig s3_config(ModelKind kind, std::uint64_t seed) {
  ExperimentConfig c;
  c.task.kind = TaskKind::word_problem;
  c.task.group = GroupKind::symmetric;
  c.task.group_n = 3;
  c.task.train_lo = c.task.train_hi = 8;
  c.model.kind = kind;
  c.model.d_model = 8;  // d_inner = 16
  c.model.d_state = 16;
  c.model.mixer = MixerVariant::kronecker;
  c.solver.ell_max = 16;
  c.train.lr = 3e-3;
  c.train.schedule = Schedule::cosine_warmup;
  c.train.warmup = 100;
  c.train.final_lr_factor = 0.1;
  c.train.total_steps = kind == ModelKind::diagonal_baseline ? 3000 : 4000;
  c.batch_size = 32;
  c.eval_batch = 256;
  c.eval_every = c.train.total_steps;
  c.eval_lengths = {8, 16};
  c.seed = seed;
  return c;
}

ExperimentConfig copy_config(FpMambaDependence dep, std::uint64_t seed) {
  ExperimentConfig c;
  c.task.kind = TaskKind::copy;
  c.task.copy_vocab = 8;
  c.task.train_lo = 5;
  c.task.train_hi = 20;
  c.model.kind = ModelKind::fp_mamba;
  c.model.d_model = 18;  // d_inner = 36
  c.model.d_state = 32;
  c.model.mixer = MixerVariant::householder;
  c.model.rank = 2;
  c.model.dep = dep;
  c.solver.ell_max = 16;
  c.train.lr = 3e-3;
  c.train.schedule = Schedule::cosine_warmup;
  c.train.warmup = 100;
  c.train.final_lr_factor = 0.1;
  c.train.total_steps = 2500;
  c.batch_size = 16;
  c.eval_batch = 128;
  c.eval_every = c.train.total_steps;
  c.eval_lengths = {20};
  c.seed = seed;
  return c;
}

const std::vector<std::size_t> kCopyGeneralization{25, 30, 35, 40};

struct Trained {
  ExperimentConfig cfg;
  Model model;
  double seconds = 0.0;
};

Trained train(const ExperimentConfig& c) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainOutcome out = run_train(c);
  if (out.aborted) throw NumericError("training aborted: " + out.abort_reason);
  return {c, std::move(out.model), seconds_since(t0)};
}

struct Cache {
  std::optional<Trained> s3;  // first passing FP-Mamba seed, else seed 0
  std::map<int, Trained> copy;  // keyed by dependence level 2/1/0
};

// ---------------------------------------------------------------------------
// Criteria

Line oracle() {
  const SuiteReport r = oracle_equivalence_suite(100, 15);
  return {r.passed, suite_summary(r)};
}

Line lipschitz() {
  const SuiteReport r = lipschitz_suite(1000, 6);
  return {r.passed, suite_summary(r)};
}

Line gradients() {
  const SuiteReport a = primitive_gradient_suite(42), b = truncated_gradient_suite(9), c = implicit_gradient_suite(12, 31);
  return {a.passed && b.passed && c.passed, suite_summary(a) + "; " + suite_summary(b) + "; " + suite_summary(c)};
}

Line descent() {
  const SuiteReport r = descent_suite(100, 21);
  return {r.passed, suite_summary(r)};
}

Line scan() {
  const SuiteReport r = scan_suite(24, 5);
  return {r.passed, suite_summary(r)};
}

Line state_tracking(Cache& cache) {
  std::size_t passing = 0;
  std::string s;
  for (std::uint64_t seed : {0, 1, 2}) {
    Trained fp = train(s3_config(ModelKind::fp_mamba, seed));
    const auto e = eval_length_generalization(fp.model, fp.cfg, {8, 16});
    const Trained base = train(s3_config(ModelKind::diagonal_baseline, seed));
    const double b16 = evaluate_length(base.model, base.cfg, 16).accuracy;
    const bool ok = e[0].accuracy > 0.9 && e[1].accuracy > 0.8 && b16 < 0.7;
    passing += ok;
    s += fmt("seed %llu: fp_mamba acc8=%.3f acc16=%.3f (%.0fs) baseline acc16=%.3f (%.0fs) %s; ",
             static_cast<unsigned long long>(seed), e[0].accuracy, e[1].accuracy, fp.seconds, b16, base.seconds,
             ok ? "ok" : "miss");
    if (!cache.s3 || (ok && passing == 1)) cache.s3 = std::move(fp);
  }
  s += fmt("%zu/3 seeds pass", passing);
  return {passing >= 2, s};
}

const Trained& s3_model(Cache& cache) {
  if (!cache.s3) {
    Trained fp = train(s3_config(ModelKind::fp_mamba, 0));
    cache.s3 = std::move(fp);
  }
  return *cache.s3;
}

Line seq_vs_parallel(Cache& cache) {
  const Trained& t = s3_model(cache);
  const auto t0 = std::chrono::steady_clock::now();
  const SuiteReport r = seq_vs_parallel_suite(t.model, t.cfg, {8, 16, 32}, 8, true);
  return {r.passed, suite_summary(r) + fmt(" (suite %.1fs)", seconds_since(t0))};
}

const Trained& copy_model(Cache& cache, int level) {
  auto it = cache.copy.find(level);
  if (it == cache.copy.end()) {
    const FpMambaDependence dep =
        level == 2 ? FpMambaDependence{} : level == 1 ? FpMambaDependence::bc_only() : FpMambaDependence::none();
    it = cache.copy.emplace(level, train(copy_config(dep, 0))).first;
  }
  return it->second;
}

double generalization_accuracy(const Trained& t) {
  double sum = 0.0;
  for (const auto& r : eval_length_generalization(t.model, t.cfg, kCopyGeneralization)) sum += r.accuracy;
  return sum / static_cast<double>(kCopyGeneralization.size());
}

Line copy_ordering(Cache& cache) {
  double acc[3];
  double secs = 0.0;
  for (int level : {2, 1, 0}) {
    const Trained& t = copy_model(cache, level);
    acc[level] = generalization_accuracy(t);
    secs += t.seconds;
  }
  return {acc[2] > acc[1] && acc[1] > acc[0],
          fmt("accuracy on lengths 25-40: full=%.3f bc=%.3f none=%.3f (train %.0fs)", acc[2], acc[1], acc[0], secs)};
}

Line adaptivity(Cache& cache) {
  const Trained& s3 = s3_model(cache);
  const auto e = eval_length_generalization(s3.model, s3.cfg, {8, 32});
  const Trained& cp = copy_model(cache, 2);
  double copy_med = 0.0;
  for (const auto& r : eval_length_generalization(cp.model, cp.cfg, {5, 20})) copy_med = std::max(copy_med, r.median_ell_star);
  const double max_train = static_cast<double>(2 * cp.cfg.task.train_hi + 1);
  const bool ok = e[1].median_ell_star > e[0].median_ell_star && copy_med < static_cast<double>(cp.cfg.task.train_hi);
  return {ok, fmt("s3 median ell* len8=%.0f len32=%.0f; copy median ell* <= %.0f (content length bound %zu, sequence "
                  "length bound %.0f)",
                  e[0].median_ell_star, e[1].median_ell_star, copy_med, cp.cfg.task.train_hi, max_train)};
}

std::size_t training_step_peak(std::size_t ell_max) {
  ExperimentConfig c = s3_config(ModelKind::fp_mamba, 0);
  c.solver.ell_max = ell_max;
  c.solver.tol = 1e-300;  // run every iteration
  c.solver.batch_quantile = 1.0;
  const ModelConfig mc = c.model_config();
  std::mt19937_64 rng(3);
  const Model m = Model::init(mc, rng);
  const SequenceBatch b = generate(c.task, 8, 8, c.batch_size, 77);
  Model g = Model::zeros(mc);
  MemoryMeter::reset_peak();
  const std::size_t base = MemoryMeter::live_bytes();
  const ForwardResult r = model_forward(m, b.tokens, b.targets, b.mask, b.batch, b.seq_len, c.solver, 0, &g);
  if (r.solve.iterations != ell_max) throw std::logic_error("memory probe did not run ell_max iterations");
  return MemoryMeter::peak_bytes() - base;
}

Line memory() {
  const std::size_t p2 = training_step_peak(2), p64 = training_step_peak(64);
  const double ratio = static_cast<double>(p64) / static_cast<double>(p2);
  return {ratio <= 1.25, fmt("peak bytes ell_max=2: %zu, ell_max=64: %zu, ratio %.3f (bound 1.25)", p2, p64, ratio)};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  Cache cache;
  const std::vector<std::pair<const char*, std::function<Line()>>> criteria{
      {"oracle equivalence", oracle},
      {"contraction", lipschitz},
      {"gradient checks", gradients},
      {"fixed-point gradient descent direction", descent},
      {"scan equivalence", scan},
      {"sequential vs parallel fixed point", [&] { return seq_vs_parallel(cache); }},
      {"S3 state tracking", [&] { return state_tracking(cache); }},
      {"copy dependence ordering", [&] { return copy_ordering(cache); }},
      {"adaptive iteration count", [&] { return adaptivity(cache); }},
      {"training memory independent of ell_max", memory},
  };
  // The state-tracking run trains the model the sequential check reuses.
  const std::vector<int> order{1, 2, 3, 4, 5, 7, 6, 8, 9, 10};
  std::map<int, Line> lines;
  int failed = 0;
  for (int n : order) {
    if (!only.empty() && !only.count(n)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Line l;
    try {
      l = criteria[n - 1].second();
    } catch (const std::exception& e) {
      l = {false, std::string("error: ") + e.what()};
    }
    failed += !l.passed;
    std::printf("criterion %d %s: %s (%.1fs) %s\n", n, l.passed ? "PASS" : "FAIL", criteria[n - 1].first,
                seconds_since(t0), l.summary.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
