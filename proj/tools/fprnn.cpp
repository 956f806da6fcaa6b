#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fprnn/experiment.hpp"

using namespace fprnn;

namespace {

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string task, model, mixer, out;
  std::optional<std::size_t> rank, ell_max, k_backprop, steps;
  std::optional<double> tol;
  bool f64 = false;
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--config", o.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
  app->add_option("--seed", o.seed, "Random seed");
  app->add_option("--task", o.task, "word_problem | copy | mod_arith");
  app->add_option("--model", o.model, "fp_mamba | fp_rnn_vector | diagonal_baseline");
  app->add_option("--mixer", o.mixer, "Channel mixer")->check(CLI::IsMember({"dplr", "householder", "kronecker"}));
  app->add_option("--rank", o.rank, "Mixer rank");
  app->add_option("--ell-max", o.ell_max, "Iteration cap");
  app->add_option("--tol", o.tol, "Fixed-point tolerance");
  app->add_option("--k-backprop", o.k_backprop, "Iterations replayed in the backward pass beyond the last");
  app->add_option("--out", o.out, "Output directory");
  app->add_flag("--f64-checkpoint", o.f64, "Store checkpoint tensors as float64");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_experiment_config(o.config);
  if (o.seed) c.seed = *o.seed;
  if (!o.task.empty()) c.task.kind = parse_task_kind(o.task);
  if (!o.model.empty()) c.model.kind = parse_model_kind(o.model);
  if (!o.mixer.empty()) c.model.mixer = parse_mixer_variant(o.mixer);
  if (o.rank) c.model.rank = *o.rank;
  if (o.ell_max) c.solver.ell_max = *o.ell_max;
  if (o.tol) c.solver.tol = *o.tol;
  if (o.k_backprop) c.train.k_backprop = *o.k_backprop;
  if (o.steps) c.train.total_steps = *o.steps;
  if (!o.out.empty()) c.out_dir = o.out;
  if (o.f64) c.f64_checkpoint = true;
  return c;
}

void print_records(const std::vector<MetricsRecord>& rs) {
  std::cout << kMetricsHeader << "\n";
  for (const auto& r : rs) std::cout << csv_row(r) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Fixed-point RNN experiments"};
  app.require_subcommand(1);

  Overrides train_o;
  auto* train = app.add_subcommand("train", "Train a model and write metrics.csv plus checkpoints");
  add_common(train, train_o);
  train->add_option("--steps", train_o.steps, "Training steps");

  std::string eval_ckpt;
  std::vector<std::size_t> eval_lengths;
  auto* eval = app.add_subcommand("eval", "Length-generalization sweep of a checkpoint");
  eval->add_option("checkpoint", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--lengths", eval_lengths, "Evaluation lengths")->delimiter(',');

  Overrides verify_o;
  std::string verify_ckpt;
  double verify_eps = 0.01;
  auto* verify = app.add_subcommand("verify", "Run the invariant suites and print a JSON report");
  verify->add_option("--seed", verify_o.seed, "Random seed");
  verify->add_option("--out", verify_o.out, "Directory for verify.json");
  verify->add_option("--checkpoint", verify_ckpt, "Trained model for the sequential-vs-parallel check");
  verify->add_option("--contraction-eps", verify_eps, "Mixer contraction margin used by the suites");

  std::string seq_ckpt;
  std::vector<int> seq_tokens;
  auto* seq = app.add_subcommand("seq-infer", "Token-by-token fixed points compared with the parallel solve");
  seq->add_option("checkpoint", seq_ckpt, "Checkpoint file")->required();
  seq->add_option("--tokens", seq_tokens, "Token ids")->delimiter(',')->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      const ExperimentConfig cfg = resolve(train_o);
      const TrainOutcome out = run_train(cfg, [](const MetricsRecord& r) { std::cout << csv_row(r) << std::endl; });
      if (out.aborted) {
        std::cerr << "training aborted: " << out.abort_reason << "\n";
        return 1;
      }
      return 0;
    }
    if (*eval) {
      print_records(eval_length_generalization(eval_ckpt, eval_lengths));
      return 0;
    }
    if (*verify) {
      PropertyConfig pc;
      pc.contraction_eps = verify_eps;
      pc.seed = verify_o.seed.value_or(0);
      std::optional<LoadedModel> trained;
      if (!verify_ckpt.empty()) trained = load_model(verify_ckpt);
      const auto reports = run_property_suite(pc, trained ? &*trained : nullptr);
      const json rep = report_json(reports);
      std::cout << rep.dump(2) << "\n";
      if (!verify_o.out.empty()) {
        std::filesystem::create_directories(verify_o.out);
        std::ofstream(std::filesystem::path(verify_o.out) / "verify.json") << rep.dump(2) << "\n";
      }
      return rep["passed"].get<bool>() ? 0 : 1;
    }
    if (*seq) {
      const LoadedModel lm = load_model(seq_ckpt);
      const SequentialResult r = sequential_inference(lm.model, seq_tokens, lm.cfg.eval_solver);
      std::cout << "token,parallel_prediction,sequential_prediction,ell_star,normalized_difference\n";
      for (std::size_t t = 0; t < seq_tokens.size(); ++t) {
        std::printf("%zu,%d,%d,%zu,%.6e\n", t, r.parallel_predictions[t], r.sequential_predictions[t], r.ell_per_token[t],
                    r.token_diff[t]);
      }
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
