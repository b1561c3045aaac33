#include "poer/cli.hpp"

#include "poer/io.hpp"
#include "poer/objective.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <functional>
#include <map>
#include <numeric>
#include <ostream>
#include <string>

namespace poer {

namespace {

struct CommonFlags {
  std::string config;
  std::string data;
  std::string metadata;
  std::string checkpoint;
  std::string out;
  std::string split = "test";
  std::uint64_t seed = 0;
  double alpha = 0.0;
  int target_domain = 0;
  std::size_t epochs = 0;
  std::size_t prototypes = 0;
  std::size_t block = 0;
  std::size_t budget = 10000;
  std::size_t coordinates = 300;
  double epsilon = 1e-5;
  std::size_t batch_size = 32;
  int samples_per_cell = 6;
};

ExperimentConfig load_config(const std::string& path) {
  if (path.empty()) return {};
  return experiment_from_json(read_json_file(path));
}

bool given(const CLI::App* app, const char* name) { return app->count(name) > 0; }

std::string pick(const CLI::App* app, const char* flag, const std::string& flag_value,
                 const std::string& file_value) {
  return given(app, flag) ? flag_value : file_value;
}

DataSplit select_split(const Dataset& data, const Checkpoint& ck, const std::string& name) {
  if (name == "all") return as_split(data);
  DomainSplits s = leave_one_domain_out(data, ck.config.target_domain, ck.config.val_fraction, ck.config.seed);
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw ConfigError("--split must be one of train, val, test, all (got \"" + name + "\")");
}

void check_block(const Checkpoint& ck, std::size_t block) {
  const std::size_t n = ck.state.shape.extractor.num_blocks();
  if (block >= n) {
    throw ConfigError("--block " + std::to_string(block) + " out of range (model has " + std::to_string(n) +
                      " blocks)");
  }
}

int cmd_gen(const CLI::App* app, const CommonFlags& f, std::ostream& out) {
  ExperimentConfig cfg = load_config(f.config);
  if (given(app, "--seed")) cfg.dataset.seed = f.seed;
  if (given(app, "--samples")) cfg.dataset.samples_per_cell = f.samples_per_cell;
  const std::string data_path = pick(app, "--out", f.out, cfg.paths.data);
  const std::string meta_path = pick(app, "--metadata", f.metadata, cfg.paths.metadata);
  cfg.dataset.validate();
  const Dataset data = generate(cfg.dataset);
  write_dataset(data, data_path, meta_path);
  out << data.size() << " records written to " << data_path << "\n";
  return kExitOk;
}

int cmd_train(const CLI::App* app, const CommonFlags& f, std::ostream& out) {
  ExperimentConfig cfg = load_config(f.config);
  TrainConfig& tc = cfg.train;
  if (given(app, "--seed")) tc.seed = f.seed;
  if (given(app, "--alpha")) tc.alpha_early = tc.alpha_late = f.alpha;
  if (given(app, "--target-domain")) tc.target_domain = f.target_domain;
  if (given(app, "--epochs")) tc.epochs = f.epochs;
  if (given(app, "--prototypes")) tc.prototypes_per_class = f.prototypes;
  const std::string data_path = pick(app, "--data", f.data, cfg.paths.data);
  const std::string meta_path = pick(app, "--metadata", f.metadata, cfg.paths.metadata);
  const std::string ck_path = pick(app, "--checkpoint", f.checkpoint, cfg.paths.checkpoint);
  const std::string metrics_path = pick(app, "--out", f.out, cfg.paths.metrics);
  tc.validate();

  const Dataset data = read_dataset(data_path, meta_path);
  const DomainSplits splits = leave_one_domain_out(data, tc.target_domain, tc.val_fraction, tc.seed);
  const TrainResult result = train(tc, splits);
  save_checkpoint(result.checkpoint, ck_path);
  write_json_file(metrics_path, metrics_to_json(result.metrics, tc));
  out << "target domain " << tc.target_domain << ": accuracy " << result.metrics.target.accuracy
      << " (selected epoch " << result.metrics.selected_epoch << ", validation "
      << result.metrics.best_val_accuracy << ")\n";
  return kExitOk;
}

struct Loaded {
  Checkpoint ck;
  Dataset data;
};

Loaded load_inputs(const CLI::App* app, const CommonFlags& f) {
  ExperimentConfig cfg = load_config(f.config);
  Loaded l;
  l.ck = load_checkpoint(pick(app, "--checkpoint", f.checkpoint, cfg.paths.checkpoint));
  l.data = read_dataset(pick(app, "--data", f.data, cfg.paths.data),
                        pick(app, "--metadata", f.metadata, cfg.paths.metadata));
  return l;
}

int cmd_eval(const CLI::App* app, const CommonFlags& f, std::ostream& out) {
  const Loaded in = load_inputs(app, f);
  const DataSplit split = select_split(in.data, in.ck, f.split);
  const EvalResult r = evaluate(in.ck, split);
  Json report = to_json(r);
  report["split"] = f.split;
  write_json_file(f.out, report);
  out << f.split << " accuracy " << r.accuracy << " over " << r.count << " samples\n";
  return kExitOk;
}

int cmd_audit(const CLI::App* app, const CommonFlags& f, std::ostream& out) {
  const Loaded in = load_inputs(app, f);
  check_block(in.ck, f.block);
  const DataSplit split = select_split(in.data, in.ck, f.split);
  const double rate = rank_violation_audit(in.ck, split, f.block, f.budget, f.seed);
  const std::uint64_t total = count_quadruples(split.y, split.d);
  Json report{{"split", f.split},
              {"block", f.block},
              {"budget", f.budget},
              {"seed", f.seed},
              {"quadruples", total},
              {"exhaustive", f.budget >= total},
              {"violation_rate", rate}};
  write_json_file(f.out, report);
  out << "block " << f.block << " violation rate " << rate << "\n";
  return kExitOk;
}

int cmd_embed(const CLI::App* app, const CommonFlags& f, std::ostream& out) {
  const Loaded in = load_inputs(app, f);
  const std::size_t block = given(app, "--block") ? f.block : in.ck.state.shape.extractor.num_blocks() - 1;
  check_block(in.ck, block);
  const DataSplit split = select_split(in.data, in.ck, f.split);
  const auto rows = export_embeddings(in.ck, split, block);
  write_embeddings_csv(rows, f.out);
  out << rows.size() << " rows written to " << f.out << "\n";
  return kExitOk;
}

int cmd_gradcheck(const CLI::App* app, const CommonFlags& f, std::ostream& out) {
  ExperimentConfig cfg = load_config(f.config);
  if (given(app, "--seed")) cfg.train.seed = f.seed;
  if (given(app, "--alpha")) cfg.train.alpha_early = cfg.train.alpha_late = f.alpha;
  if (given(app, "--prototypes")) cfg.train.prototypes_per_class = f.prototypes;

  Dataset data;
  if (given(app, "--data")) {
    data = read_dataset(f.data, pick(app, "--metadata", f.metadata, cfg.paths.metadata));
  } else {
    DatasetSpec spec = cfg.dataset;
    spec.samples_per_cell = f.samples_per_cell;
    spec.seed = cfg.train.seed;
    data = generate(spec);
  }

  ExtractorState state;
  TrainConfig tc = cfg.train;
  if (given(app, "--checkpoint")) {
    Checkpoint ck = load_checkpoint(f.checkpoint);
    state = std::move(ck.state);
    tc = ck.config;
  } else {
    tc.validate();
    state = initial_state(tc, leave_one_domain_out(data, tc.target_domain, tc.val_fraction, tc.seed));
  }
  const DomainSplits splits = leave_one_domain_out(data, tc.target_domain, tc.val_fraction, tc.seed);
  BatchSampler sampler(splits.train, f.batch_size, tc.seed);
  const auto batch_idx = sampler.next_epoch().front();
  Matrix x(static_cast<Eigen::Index>(batch_idx.size()), splits.train.x.cols());
  std::vector<int> y;
  std::vector<int> d;
  for (std::size_t i = 0; i < batch_idx.size(); ++i) {
    x.row(static_cast<Eigen::Index>(i)) = splits.train.x.row(static_cast<Eigen::Index>(batch_idx[i]));
    y.push_back(splits.train.y[batch_idx[i]]);
    d.push_back(splits.train.d[batch_idx[i]]);
  }

  ObjectiveSettings settings;
  settings.loss = tc.loss;
  settings.terms = tc.terms;
  settings.alpha = tc.alpha_late;
  const Extractor extractor(state.shape);
  GradCheckOptions options;
  options.seed = tc.seed;
  options.epsilon = f.epsilon;
  const std::size_t n = state.params.size();
  if (f.coordinates > 0 && f.coordinates < n) {
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), std::size_t{0});
    CounterRng rng = stream(tc.seed, Stream::kGradCheck, 1);
    rng.shuffle(all);
    all.resize(f.coordinates);
    std::sort(all.begin(), all.end());
    options.coordinates = std::move(all);
  }
  const GradCheckReport r =
      grad_check(objective_target(extractor, std::move(x), std::move(y), std::move(d), settings), state.params, options);
  Json report{{"passed", r.passed},
              {"max_rel_error", r.max_rel_error},
              {"tolerance", options.tolerance},
              {"worst_index", r.worst_index},
              {"worst_path", r.worst_path},
              {"worst_analytic", r.worst_analytic},
              {"worst_numeric", r.worst_numeric},
              {"checked", r.checked},
              {"straddled", r.straddled},
              {"retries", r.retries},
              {"flagged", r.flagged},
              {"loss", r.loss}};
  write_json_file(f.out, report);
  out << "max relative error " << r.max_rel_error << " over " << r.checked << " coordinates ("
      << (r.passed ? "pass" : "FAIL at " + r.worst_path) << ")\n";
  return r.passed ? kExitOk : kExitDivergence;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Potential energy ranking for domain generalization on synthetic multi-domain data"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();
  CommonFlags f;

  auto add_config = [&](CLI::App* c) {
    c->add_option("--config", f.config, "Experiment config JSON (dataset, train, paths)");
  };
  auto add_inputs = [&](CLI::App* c) {
    c->add_option("--data", f.data, "Dataset records (JSONL)");
    c->add_option("--metadata", f.metadata, "Dataset metadata JSON");
  };
  auto add_eval_inputs = [&](CLI::App* c, const std::string& default_out) {
    add_config(c);
    add_inputs(c);
    c->add_option("--checkpoint", f.checkpoint, "Checkpoint file");
    c->add_option("--split", f.split, "Split to use: train, val, test or all");
    c->add_option("--out", f.out, "Report path")->default_str(default_out);
  };

  CLI::App* gen = app.add_subcommand("gen", "Generate a synthetic dataset");
  add_config(gen);
  gen->add_option("--out", f.out, "Dataset records path (JSONL)")->default_str("data.jsonl");
  gen->add_option("--metadata", f.metadata, "Metadata path")->default_str("metadata.json");
  gen->add_option("--seed", f.seed, "Generator seed")->default_str("0");
  gen->add_option("--samples", f.samples_per_cell, "Samples per (category, domain) cell")->default_str("200");

  CLI::App* tr = app.add_subcommand("train", "Train on the source domains and evaluate the held-out one");
  add_config(tr);
  add_inputs(tr);
  tr->add_option("--checkpoint", f.checkpoint, "Checkpoint output path")->default_str("checkpoint.bin");
  tr->add_option("--out", f.out, "Metrics output path")->default_str("metrics.json");
  tr->add_option("--seed", f.seed, "Training seed")->default_str("0");
  tr->add_option("--alpha", f.alpha, "Regularizer weight for every epoch (overrides both alphas)")
      ->default_str("0.1 then 0.2");
  tr->add_option("--target-domain", f.target_domain, "Held-out domain")->default_str("3");
  tr->add_option("--epochs", f.epochs, "Training epochs")->default_str("40");
  tr->add_option("--prototypes", f.prototypes, "Prototypes per class")->default_str("3");

  CLI::App* ev = app.add_subcommand("eval", "Per-domain accuracy of a checkpoint");
  CLI::App* au = app.add_subcommand("audit", "Rank-violation rate of one block's energies");
  CLI::App* em = app.add_subcommand("embed", "Export a 2-D principal projection of one block");
  CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference check of the full objective gradient");
  add_eval_inputs(ev, "eval.json");
  add_eval_inputs(au, "audit.json");
  add_eval_inputs(em, "embeddings.csv");
  au->add_option("--block", f.block, "Block index");
  au->add_option("--budget", f.budget, "Quadruples sampled (all enumerated when this covers them)");
  au->add_option("--seed", f.seed, "Sampling seed");
  em->add_option("--block", f.block, "Block index")->default_str("last block");

  add_config(gc);
  add_inputs(gc);
  gc->add_option("--checkpoint", f.checkpoint, "Checkpoint to check (fresh random state when omitted)");
  gc->add_option("--out", f.out, "Report path")->default_str("gradcheck.json");
  gc->add_option("--seed", f.seed, "Seed for the fresh state, data and batch")->default_str("0");
  gc->add_option("--alpha", f.alpha, "Regularizer weight")->default_str("0.2");
  gc->add_option("--prototypes", f.prototypes, "Prototypes per class")->default_str("3");
  gc->add_option("--coordinates", f.coordinates, "Coordinates checked (0 = all)");
  gc->add_option("--batch-size", f.batch_size, "Batch size");
  gc->add_option("--epsilon", f.epsilon, "Central-difference step, in [1e-8, 1e-4]");
  gc->add_option("--samples", f.samples_per_cell, "Samples per cell when generating data");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitConfig;
  }

  const std::map<std::string, std::string> default_out{
      {"gen", ""}, {"train", ""}, {"eval", "eval.json"}, {"audit", "audit.json"}, {"embed", "embeddings.csv"},
      {"gradcheck", "gradcheck.json"}};
  try {
    CLI::App* cmd = app.get_subcommands().front();
    const std::string name = cmd->get_name();
    if (!given(cmd, "--out") && !default_out.at(name).empty()) f.out = default_out.at(name);
    if (name == "gen") return cmd_gen(cmd, f, out);
    if (name == "train") return cmd_train(cmd, f, out);
    if (name == "eval") return cmd_eval(cmd, f, out);
    if (name == "audit") return cmd_audit(cmd, f, out);
    if (name == "embed") return cmd_embed(cmd, f, out);
    return cmd_gradcheck(cmd, f, out);
  } catch (const VersionMismatchError& e) {
    err << "error: " << e.what() << "\n";
    return kExitVersion;
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const DivergenceError& e) {
    err << "error: divergence: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DegenerateBatchError& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace poer
