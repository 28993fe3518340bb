#include "mwp/cli.hpp"

#include "mwp/bundle.hpp"
#include "mwp/error.hpp"
#include "mwp/harness.hpp"
#include "mwp/infer.hpp"
#include "mwp/train.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace mwp::cli {

namespace {

struct Globals {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

struct DecodeFlags {
  std::optional<int> beam;
  std::optional<int> max_len;
  bool uniform_weights = false;
  bool per_sequence = false;

  void add(CLI::App* app) {
    app->add_option("--beam", beam, "Beam width");
    app->add_option("--max-len", max_len, "Maximum decoded tokens");
    app->add_flag("--uniform-weights", uniform_weights, "Mix retrievals with equal weights");
    app->add_flag("--per-sequence", per_sequence, "Decode each retrieval separately and keep the best sequence");
  }

  InferConfig apply(InferConfig c) const {
    if (beam) c.beam = *beam;
    if (max_len) c.max_len = *max_len;
    if (uniform_weights) c.uniform_weights = true;
    if (per_sequence) c.per_sequence = true;
    return c;
  }
};

TrainConfig train_config(const Globals& g) {
  TrainConfig c = g.config.empty() ? TrainConfig{} : load_train_config(g.config);
  if (g.seed) c.seed = *g.seed;
  c.validate();
  return c;
}

std::filesystem::path out_dir(const Globals& g) {
  std::filesystem::path p(g.out);
  std::filesystem::create_directories(p);
  return p;
}

std::vector<int> parse_ks(const std::string& text) {
  std::vector<int> ks;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      const int k = std::stoi(part, &used);
      if (used != part.size() || k < 0) throw std::invalid_argument(part);
      ks.push_back(k);
    } catch (const std::exception&) {
      throw UsageError("bad K value '" + part + "' in --ks");
    }
  }
  if (ks.empty()) throw UsageError("--ks needs at least one value");
  return ks;
}

Problem question_only(const std::string& id, const std::string& text) {
  Problem p;
  p.id = id;
  p.question = tokenize_text(text);
  if (p.question.empty()) throw DataError("empty question");
  return p;
}

}  // namespace

int run(int argc, const char* const* argv, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Memory-augmented math word problem solver"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Training config JSON");
  app.add_option("--seed", g.seed, "Random seed (overrides the config)");
  app.add_option("--out", g.out, "Output directory");

  // generate-data
  auto* gen = app.add_subcommand("generate-data", "Write a synthetic corpus with a paraphrase-held-out test split");
  std::size_t gen_n = 2000;
  std::size_t gen_test = 200;
  int gen_ops = 5;
  gen->add_option("--n", gen_n, "Number of problems");
  gen->add_option("--test-size", gen_test, "Held-out test problems");
  gen->add_option("--max-ops", gen_ops, "Largest operator count")->check(CLI::Range(1, 5));

  // build-memory
  auto* bm = app.add_subcommand("build-memory", "Fit the embedder and index a training set");
  std::string bm_train;
  bm->add_option("--train", bm_train, "Training JSONL")->required();

  // train
  auto* tr = app.add_subcommand("train", "Train a model; the output directory becomes the model directory");
  std::string tr_train, tr_valid;
  std::optional<int> tr_epochs;
  tr->add_option("--train", tr_train, "Training JSONL")->required();
  tr->add_option("--valid", tr_valid, "Validation JSONL");
  tr->add_option("--epochs", tr_epochs, "Override the epoch count");

  // solve
  auto* so = app.add_subcommand("solve", "Solve one question (or one per stdin line)");
  std::string so_model, so_question;
  int so_k = 1;
  bool so_stdin = false;
  DecodeFlags so_flags;
  so->add_option("--model", so_model, "Model directory")->required();
  so->add_option("--k", so_k, "Retrieved problems")->check(CLI::NonNegativeNumber);
  auto* q_opt = so->add_option("--question", so_question, "Question text");
  auto* s_opt = so->add_flag("--stdin", so_stdin, "Read questions from standard input, one per line");
  q_opt->excludes(s_opt);
  so_flags.add(so);

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a model on a test set");
  std::string ev_model, ev_test;
  int ev_k = 1;
  DecodeFlags ev_flags;
  ev->add_option("--model", ev_model, "Model directory")->required();
  ev->add_option("--test", ev_test, "Test JSONL")->required();
  ev->add_option("--k", ev_k, "Retrieved problems")->check(CLI::NonNegativeNumber);
  ev_flags.add(ev);

  // sweep-k
  auto* sw = app.add_subcommand("sweep-k", "Evaluate over several K values");
  std::string sw_model, sw_test, sw_ks = "0,1,2,3,4";
  DecodeFlags sw_flags;
  sw->add_option("--model", sw_model, "Model directory")->required();
  sw->add_option("--test", sw_test, "Test JSONL")->required();
  sw->add_option("--ks", sw_ks, "Comma-separated K values");
  sw_flags.add(sw);

  // ablate
  auto* ab = app.add_subcommand("ablate", "Train and evaluate the ablation arms");
  std::string ab_train, ab_test;
  std::vector<std::string> ab_only;
  std::optional<int> ab_epochs;
  ab->add_option("--train", ab_train, "Training JSONL")->required();
  ab->add_option("--test", ab_test, "Test JSONL")->required();
  ab->add_option("--arm", ab_only, "Run only these arms (full, 'w/o EN', 'w/o Copy', 'w/o Memory', 'w/o All')");
  ab->add_option("--epochs", ab_epochs, "Override the epoch count");

  // buckets
  auto* bu = app.add_subcommand("buckets", "Split a test set into difficulty quartiles");
  std::string bu_test;
  bu->add_option("--test", bu_test, "Test JSONL")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kUsage;
  }

  try {
    const LoadOptions test_load{Split::test, 1e-4};
    if (*gen) {
      const auto all = generate_synthetic(gen_n, g.seed.value_or(1), gen_ops);
      const auto split = paraphrase_split(all, gen_test);
      const auto dir = out_dir(g);
      save_jsonl(all, dir / "all.jsonl");
      save_jsonl(split.train, dir / "train.jsonl");
      save_jsonl(split.test, dir / "test.jsonl");
      out << nlohmann::json{{"all", all.size()}, {"train", split.train.size()}, {"test", split.test.size()}}.dump()
          << "\n";
    } else if (*bm) {
      const TrainConfig cfg = train_config(g);
      const auto ds = load_jsonl(bm_train, {Split::train, 1e-4});
      const auto dir = out_dir(g);
      const auto vocab = build_vocab(ds, cfg.min_freq);
      const auto emb = memory::fit_embedder(ds, cfg.embed_dim, cfg.seed, cfg.embed_window);
      const auto index = memory::build_index(emb, std::make_shared<const Dataset>(ds.problems(), Split::train));
      vocab.save(dir / "vocab.json");
      emb.save(dir / "embedder.bin");
      index.save(dir / "memory.bin");
      save_jsonl(ds, dir / "memory.jsonl");
      out << nlohmann::json{{"problems", index.size()}, {"dim", index.dim()}, {"tokens", emb.vocabulary_size()}}.dump()
          << "\n";
    } else if (*tr) {
      TrainConfig cfg = train_config(g);
      if (tr_epochs) cfg.epochs = *tr_epochs;
      const auto ds = load_jsonl(tr_train, {Split::train, 1e-4});
      std::optional<Dataset> valid;
      if (!tr_valid.empty()) valid = load_jsonl(tr_valid, {Split::valid, 1e-4});
      Bundle bundle = Bundle::prepare(ds, cfg);
      train::TrainOptions opt;
      opt.out_dir = out_dir(g);
      opt.metrics = &out;
      opt.valid = valid ? &*valid : nullptr;
      const auto result = train::train(bundle, ds, opt);
      err << "best epoch " << result.best_epoch << "; model written to " << opt.out_dir.string() << "\n";
    } else if (*so) {
      const Bundle bundle = Bundle::load(so_model);
      const infer::Solver solver(bundle, so_flags.apply(bundle.config().infer));
      if (so_stdin) {
        std::string line;
        int n = 0;
        while (std::getline(in, line)) {
          if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
          const auto r = solver.solve(question_only("q" + std::to_string(++n), line), so_k);
          out << infer::to_json(r).dump() << "\n";
        }
      } else {
        if (so_question.empty()) throw UsageError("solve needs --question or --stdin");
        out << infer::to_json(solver.solve(question_only("q1", so_question), so_k)).dump() << "\n";
      }
    } else if (*ev) {
      const Bundle bundle = Bundle::load(ev_model);
      const auto test = load_jsonl(ev_test, test_load);
      const auto report = harness::evaluate(bundle, test, ev_k, ev_flags.apply(bundle.config().infer));
      const auto dir = out_dir(g);
      std::ofstream(dir / ("eval_k" + std::to_string(ev_k) + ".json")) << harness::to_json(report).dump(2) << "\n";
      out << nlohmann::json{{"K", report.k}, {"accuracy", report.accuracy}, {"correct", report.correct},
                            {"total", report.total}}
                 .dump()
          << "\n";
    } else if (*sw) {
      const Bundle bundle = Bundle::load(sw_model);
      const auto test = load_jsonl(sw_test, test_load);
      const auto reports = harness::k_sweep(bundle, test, parse_ks(sw_ks), sw_flags.apply(bundle.config().infer), &err);
      const auto csv = harness::sweep_csv(reports);
      const auto dir = out_dir(g);
      std::ofstream(dir / "sweep_k.csv") << csv;
      for (const auto& r : reports) {
        std::ofstream(dir / ("eval_k" + std::to_string(r.k) + ".json")) << harness::to_json(r).dump(2) << "\n";
      }
      out << csv;
    } else if (*ab) {
      TrainConfig cfg = train_config(g);
      if (ab_epochs) cfg.epochs = *ab_epochs;
      const auto train_ds = load_jsonl(ab_train, {Split::train, 1e-4});
      const auto test = load_jsonl(ab_test, test_load);
      harness::AblateOptions opt;
      opt.out_dir = out_dir(g);
      opt.log = &err;
      opt.only = ab_only;
      const auto csv = harness::ablation_csv(harness::ablate(train_ds, test, cfg, opt));
      std::ofstream(opt.out_dir / "ablation.csv") << csv;
      out << csv;
    } else if (*bu) {
      const auto test = load_jsonl(bu_test, test_load);
      nlohmann::json j = nlohmann::json::array();
      for (const auto& b : harness::difficulty_buckets(test)) {
        std::vector<std::string> ids;
        for (auto i : b.members) ids.push_back(test[i].id);
        j.push_back({{"label", b.label}, {"size", ids.size()}, {"ids", ids}});
      }
      std::ofstream(out_dir(g) / "buckets.json") << j.dump(2) << "\n";
      out << j.dump() << "\n";
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return kNumerical;
  } catch (const Error& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return kData;
  }
  return kOk;
}

}  // namespace mwp::cli
