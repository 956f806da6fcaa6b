#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "fprnn/experiment.hpp"

using namespace fprnn;
namespace fs = std::filesystem;

namespace {

ExperimentConfig small_config(const std::string& out = "") {
  ExperimentConfig c;
  c.model.d_model = 2;
  c.model.d_state = 4;
  c.train.total_steps = 12;
  c.train.lr = 3e-3;
  c.batch_size = 8;
  c.eval_batch = 16;
  c.eval_every = 5;
  c.eval_lengths = {8, 12};
  c.seed = 17;
  c.out_dir = out;
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("fprnn_harness_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  for (std::string f; std::getline(ss, f, sep);) out.push_back(f);
  return out;
}

Mat logits_of(const Model& m, const SequenceBatch& b, const FixedPointConfig& solver) {
  return model_forward(m, b.tokens, b.targets, b.mask, b.batch, b.seq_len, solver, 0).logits;
}

}  // namespace

TEST(Config, JsonRoundTrip) {
  ExperimentConfig c = small_config("somewhere");
  c.task.kind = TaskKind::copy;
  c.model.mixer = MixerVariant::householder;
  c.model.dep = FpMambaDependence::bc_only();
  c.solver.sample_ell_max = true;
  c.train.schedule = Schedule::cosine_warmup;
  const json j = to_json(c);
  EXPECT_EQ(to_json(experiment_from_json(j)), j);
  EXPECT_EQ(experiment_from_json(json::parse(R"({"model": {"dependence": "none"}})")).model.dep.q, false);
}

TEST(Config, InvalidCombinationsAreRejected) {
  ExperimentConfig c = small_config();
  c.model.d_model = 3;  // d_inner 6 is not a square
  EXPECT_THROW(c.validate(), DimensionError);
  c = small_config();
  c.task.train_lo = 9;
  c.task.train_hi = 8;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(experiment_from_json(json::parse(R"({"task": {"kind": "sort"}})")), std::invalid_argument);
}

TEST(Seeds, StreamsAreDistinct) {
  EXPECT_NE(derive_seed(1, kTrainStream, 8), derive_seed(1, kTestStream, 8));
  EXPECT_NE(derive_seed(1, kTrainStream, 0), derive_seed(2, kTrainStream, 0));
  EXPECT_EQ(derive_seed(5, 3, 4), derive_seed(5, 3, 4));
}

TEST(Metrics, NearestRank) {
  EXPECT_EQ(nearest_rank({3, 1, 2}, 0.5), 2.0);
  EXPECT_EQ(nearest_rank({1, 2, 3, 4}, 0.5), 2.0);
  EXPECT_EQ(nearest_rank({1, 2, 3, 4, 5, 6, 7, 8, 9, 10}, 0.9), 9.0);
  EXPECT_THROW(nearest_rank({}, 0.5), std::invalid_argument);
}

TEST(Checkpoint, F64RoundTripIsBitwise) {
  ExperimentConfig c = small_config();
  c.f64_checkpoint = true;
  std::mt19937_64 rng(3);
  Model m = Model::init(c.model_config(), rng);
  std::stringstream ss;
  write_checkpoint(ss, make_checkpoint(m, c));
  EXPECT_EQ(ss.str().substr(0, 6), "FPRNN1");
  EXPECT_EQ(static_cast<int>(ss.str()[6]), 1);
  const LoadedModel back = restore(read_checkpoint(ss));
  EXPECT_EQ(to_json(back.cfg), to_json(c));
  const SequenceBatch b = generate(c.task, 8, 8, 4, 5);
  const Mat a = logits_of(m, b, c.eval_solver), z = logits_of(back.model, b, c.eval_solver);
  EXPECT_EQ(a.data, z.data);
}

TEST(Checkpoint, F32StoresRoundedValues) {
  ExperimentConfig c = small_config();
  std::mt19937_64 rng(4);
  Model m = Model::init(c.model_config(), rng);
  std::stringstream ss;
  write_checkpoint(ss, make_checkpoint(m, c));
  LoadedModel back = restore(read_checkpoint(ss));
  std::vector<Mat*> orig = m.params(), got = back.model.params();
  ASSERT_EQ(orig.size(), got.size());
  for (std::size_t i = 0; i < orig.size(); ++i)
    for (std::size_t j = 0; j < orig[i]->size(); ++j)
      EXPECT_EQ(got[i]->data[j], static_cast<double>(static_cast<float>(orig[i]->data[j])));
  // A second save of the rounded model is a fixed point.
  std::stringstream again;
  write_checkpoint(again, make_checkpoint(back.model, back.cfg));
  std::stringstream first;
  write_checkpoint(first, make_checkpoint(m, c));
  EXPECT_EQ(again.str(), first.str());
}

TEST(Checkpoint, CorruptInputIsRejected) {
  ExperimentConfig c = small_config();
  std::mt19937_64 rng(5);
  Model m = Model::init(c.model_config(), rng);
  std::stringstream ss;
  write_checkpoint(ss, make_checkpoint(m, c));
  const std::string bytes = ss.str();

  std::stringstream magic("FPRNN2" + bytes.substr(6));
  EXPECT_THROW(read_checkpoint(magic), CheckpointError);
  std::stringstream cut(bytes.substr(0, bytes.size() / 2));
  EXPECT_THROW(read_checkpoint(cut), CheckpointError);

  Checkpoint ck = make_checkpoint(m, c);
  ck.entries.erase("head");
  EXPECT_THROW(restore(ck), CheckpointError);
  ck = make_checkpoint(m, c);
  ck.put("head", Mat(2, 2), true);
  EXPECT_THROW(restore(ck), CheckpointError);
  ck = make_checkpoint(m, c);
  ck.put("stray", Mat(1, 1), true);
  EXPECT_THROW(restore(ck), CheckpointError);
  EXPECT_THROW(load_checkpoint("/nonexistent/fprnn.ckpt"), CheckpointError);
  EXPECT_THROW(eval_length_generalization("/nonexistent/fprnn.ckpt", {8}), CheckpointError);
}

TEST(Train, ZeroStepsEmitsInitialCheckpointAndEvalRows) {
  const fs::path dir = scratch("zero");
  ExperimentConfig c = small_config(dir.string());
  c.train.total_steps = 0;
  const TrainOutcome out = run_train(c);
  EXPECT_EQ(out.steps_done, 0u);
  ASSERT_EQ(out.metrics.size(), 2u);
  for (const auto& r : out.metrics) {
    EXPECT_EQ(r.step, 0u);
    EXPECT_EQ(r.split, "test");
  }
  ASSERT_TRUE(fs::exists(dir / "checkpoint.fprnn"));
  ASSERT_TRUE(fs::exists(dir / "config.json"));
  const LoadedModel lm = load_model((dir / "checkpoint.fprnn").string());
  EXPECT_EQ(lm.cfg.seed, c.seed);
}

TEST(Train, SameSeedGivesIdenticalMetricsAndCheckpoints) {
  // Same out_dir both times: it is part of the stored config.
  const fs::path dir = scratch("det");
  const TrainOutcome ra = run_train(small_config(dir.string()));
  const std::string first = slurp(dir / "checkpoint.fprnn");
  const TrainOutcome rb = run_train(small_config(dir.string()));
  ASSERT_EQ(ra.metrics.size(), rb.metrics.size());
  for (std::size_t i = 0; i < ra.metrics.size(); ++i) EXPECT_TRUE(ra.metrics[i].same_values(rb.metrics[i])) << i;
  EXPECT_EQ(first, slurp(dir / "checkpoint.fprnn"));

  ExperimentConfig other = small_config();
  other.seed = 18;
  const TrainOutcome rc = run_train(other);
  EXPECT_FALSE(ra.metrics.back().same_values(rc.metrics.back()));
}

TEST(Train, MetricsCsvIsWellFormed) {
  const fs::path dir = scratch("csv");
  const TrainOutcome out = run_train(small_config(dir.string()));
  std::ifstream is(dir / "metrics.csv");
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, kMetricsHeader);
  std::size_t rows = 0, prev_step = 0;
  while (std::getline(is, line)) {
    const auto f = split(line, ',');
    ASSERT_EQ(f.size(), 8u) << line;
    const std::size_t step = std::stoul(f[0]);
    EXPECT_GE(step, prev_step);
    prev_step = step;
    EXPECT_TRUE(f[1] == "train" || f[1] == "test") << f[1];
    const double acc = std::stod(f[3]);
    EXPECT_GE(acc, 0.0);
    EXPECT_LE(acc, 1.0);
    EXPECT_GE(std::stod(f[5]), 1.0);
    EXPECT_GE(std::stod(f[6]), std::stod(f[5]));
    ++rows;
  }
  EXPECT_EQ(rows, out.metrics.size());
  // Evaluations at 0, 5, 10 and the final step 12; train rows at the last three.
  EXPECT_EQ(rows, 4u * 2u + 3u);
}

TEST(Train, EvaluationUsesTestStreamNotTrainingBatches) {
  const ExperimentConfig c = small_config();
  const SequenceBatch test = generate(c.task, 8, 8, c.eval_batch, derive_seed(c.seed, kTestStream, 8));
  for (std::size_t step = 0; step < c.train.total_steps; ++step) {
    const SequenceBatch tr = generate(c.task, 8, 8, c.batch_size, derive_seed(c.seed, kTrainStream, step));
    EXPECT_FALSE(std::equal(tr.tokens.begin(), tr.tokens.end(), test.tokens.begin()));
  }
}

TEST(Train, DivergenceAbortsWithLastGoodCheckpoint) {
  const fs::path dir = scratch("diverge");
  ExperimentConfig c = small_config(dir.string());
  c.train.lr = 1e200;
  c.train.clip_norm = 0.0;
  c.train.total_steps = 50;
  c.f64_checkpoint = true;  // the last good values can exceed the f32 range
  TrainOutcome out = run_train(c);
  ASSERT_TRUE(out.aborted);
  for (Mat* p : out.model.params()) EXPECT_TRUE(all_finite(*p));
  EXPECT_LT(out.steps_done, 50u);
  EXPECT_FALSE(out.abort_reason.empty());
  LoadedModel lm = load_model((dir / "checkpoint.fprnn").string());
  for (Mat* p : lm.model.params()) EXPECT_TRUE(all_finite(*p));
}

TEST(Eval, UntrainedCyclicGroupIsAtChance) {
  ExperimentConfig c = small_config();
  c.task.group = GroupKind::cyclic;
  c.task.group_n = 2;
  c.eval_batch = 256;
  std::mt19937_64 rng(derive_seed(c.seed, kInitStream));
  const Model m = Model::init(c.model_config(), rng);
  const MetricsRecord r = evaluate_length(m, c, 16);
  EXPECT_NEAR(r.accuracy, 0.5, 0.1);
  EXPECT_GE(r.p90_ell_star, r.median_ell_star);
}

TEST(Eval, TrainingLengthMatchesTrainingEval) {
  const TrainOutcome out = run_train(small_config());
  const MetricsRecord again = evaluate_length(out.model, small_config(), 8, 12);
  const auto it = std::find_if(out.metrics.rbegin(), out.metrics.rend(),
                               [](const MetricsRecord& r) { return r.split == "test" && r.sequence_length == 8; });
  ASSERT_NE(it, out.metrics.rend());
  EXPECT_TRUE(it->same_values(again));
}

TEST(SequentialInference, SingleTokenIsIdenticalToParallel) {
  const ExperimentConfig c = small_config();
  std::mt19937_64 rng(8);
  const Model m = Model::init(c.model_config(), rng);
  const std::vector<int> ids{3};
  const SequentialResult r = sequential_inference(m, ids, c.eval_solver);
  EXPECT_EQ(r.sequential.data, r.parallel.data);
  EXPECT_EQ(r.token_diff[0], 0.0);
  EXPECT_EQ(r.sequential_predictions, r.parallel_predictions);
}

TEST(SequentialInference, UntrainedDifferenceIsFinite) {
  const ExperimentConfig c = small_config();
  std::mt19937_64 rng(9);
  const Model m = Model::init(c.model_config(), rng);
  const SequentialResult r = sequential_inference(m, std::vector<int>{1, 4, 2, 5}, c.eval_solver);
  ASSERT_EQ(r.token_diff.size(), 4u);
  for (double d : r.token_diff) EXPECT_TRUE(std::isfinite(d));
  EXPECT_THROW(sequential_inference(m, std::vector<int>{}, c.eval_solver), DimensionError);
}

TEST(SequentialInference, MatchesParallelAtTightTolerance) {
  ExperimentConfig c = small_config();
  c.eval_solver.tol = 1e-10;
  c.eval_solver.ell_max = 2000;
  std::mt19937_64 rng(10);
  const Model m = Model::init(c.model_config(), rng);
  const SequentialResult r = sequential_inference(m, std::vector<int>{0, 5, 2, 2, 1, 3}, c.eval_solver);
  EXPECT_LT(r.max_diff, 1e-7);
}

TEST(PropertySuite, FreshDefaultsPass) {
  PropertyConfig pc;
  pc.oracle_instances = 10;
  pc.lipschitz_pairs = 50;
  pc.descent_instances = 20;
  pc.seq_sequences = 2;
  const auto reports = run_property_suite(pc);
  ASSERT_EQ(reports.size(), 8u);
  for (const auto& r : reports) EXPECT_TRUE(r.passed) << r.name << " metric " << r.metric << " " << r.detail;
  const json j = report_json(reports);
  EXPECT_TRUE(j["passed"].get<bool>());
  EXPECT_EQ(j["suites"].size(), 8u);
}

TEST(PropertySuite, MisScaledMixerFailsLipschitz) {
  EXPECT_FALSE(lipschitz_suite(50, 6, -0.5).passed);
  EXPECT_TRUE(lipschitz_suite(50, 6, 0.01).passed);
}
