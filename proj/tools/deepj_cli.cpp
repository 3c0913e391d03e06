// SPDX-License-Identifier: Apache-2.0
// deepj: generate synthetic corpora, train and cross-validate, and export
// explanations and population statistics.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "deepj/deepj.hpp"

namespace fs = std::filesystem;
using namespace deepj;

namespace {

enum Exit { kOk = 0, kConfig = 2, kMissing = 3, kRuntime = 4 };

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void write_file(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << bytes;
  if (!out) throw Error("write failed for " + path.string());
}

// Every option of `sub` with its effective value, defaults included.
nlohmann::json resolved_options(const CLI::App& sub) {
  nlohmann::json j = nlohmann::json::object();
  for (const CLI::Option* opt : sub.get_options()) {
    if (opt->get_lnames().empty() || opt->get_lnames().front() == "help") continue;
    const std::string name = opt->get_lnames().front();
    if (opt->count() > 0) {
      const auto& r = opt->results();
      j[name] = r.size() == 1 ? nlohmann::json(r.front()) : nlohmann::json(r);
    } else {
      j[name] = opt->get_default_str();
    }
  }
  return j;
}

class ManifestWriter {
 public:
  ManifestWriter(std::string command, const CLI::App& sub) : t0_(Clock::now()) {
    m_.command = std::move(command);
    m_.config = resolved_options(sub);
  }
  void seed(const std::string& name, std::uint64_t value) { m_.seeds[name] = value; }
  void input(const fs::path& p) { m_.inputs[p.string()] = sha256_file(p.string()); }
  void output(const fs::path& p, const std::string& bytes) {
    write_file(p, bytes);
    m_.outputs[p.string()] = sha256_hex(bytes);
  }
  void phase(const std::string& name, double seconds) { m_.seconds[name] = seconds; }
  void finish(const fs::path& dir) {
    m_.seconds["total"] = since(t0_);
    write_file(dir / (m_.command + ".manifest.json"), to_json(m_).dump(2) + "\n");
  }

 private:
  RunManifest m_;
  Clock::time_point t0_;
};

Corpus read_corpus(const std::string& corpus_path, const std::string& vocab_path) {
  Corpus c;
  c.vocab = vocab_from_json(read_file(vocab_path));
  c.records = corpus_from_jsonl(read_file(corpus_path));
  return c;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  GenConfig cfg;
  std::string out_dir;
};

void add_gen(CLI::App& app, GenArgs& a) {
  auto* sub = app.add_subcommand("gen", "Generate a synthetic corpus with planted code modules");
  sub->add_option("--out-dir", a.out_dir, "Directory for corpus.jsonl and vocab.json")->required();
  sub->add_option("--seed", a.cfg.seed, "Root seed")->capture_default_str();
  sub->add_option("--patients", a.cfg.patients)->capture_default_str();
  sub->add_option("--modules", a.cfg.modules, "Planted modules; module 0 drives the label")->capture_default_str();
  sub->add_option("--codes-per-module", a.cfg.codes_per_module)->capture_default_str();
  sub->add_option("--vocab-size", a.cfg.vocab_size, "Real codes, PAD excluded")->capture_default_str();
  sub->add_option("--p-max", a.cfg.p_max, "Maximum encounters per patient")->capture_default_str();
  sub->add_option("--c-max", a.cfg.c_max, "Maximum codes per encounter")->capture_default_str();
  sub->add_option("--positive-rate", a.cfg.positive_rate)->capture_default_str();
  sub->add_option("--noise", a.cfg.noise_rate, "Label flip probability")->capture_default_str();
}

int run_gen(const CLI::App& sub, const GenArgs& a) {
  validate(a.cfg);
  ManifestWriter m("gen", sub);
  m.seed("root", a.cfg.seed);
  const auto t0 = Clock::now();
  const Corpus corpus = generate_synthetic_corpus(a.cfg);
  m.phase("generate", since(t0));
  const fs::path dir(a.out_dir);
  m.output(dir / "corpus.jsonl", corpus_to_jsonl(corpus.records));
  m.output(dir / "vocab.json", vocab_to_json(corpus.vocab));
  m.finish(dir);
  std::size_t positives = 0;
  for (const auto& r : corpus.records) positives += r.label == 1;
  std::cerr << "gen: " << corpus.records.size() << " patients, " << positives << " positive, vocabulary "
            << corpus.vocab.size() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string corpus, vocab, out_dir, mode = "full", precision = "float";
  std::size_t folds = 10;
  bool no_checkpoint = false;
  TrainConfig train;
  ModelConfig model;
};

void add_train(CLI::App& app, TrainArgs& a) {
  auto* sub = app.add_subcommand("train", "Cross-validate and fit a final checkpoint");
  sub->add_option("--corpus", a.corpus, "corpus.jsonl")->required();
  sub->add_option("--vocab", a.vocab, "vocab.json")->required();
  sub->add_option("--out-dir", a.out_dir)->required();
  sub->add_option("--mode", a.mode, "full, no-gsl or no-cmd")->capture_default_str();
  sub->add_option("--folds", a.folds, "Cross-validation folds; 1 skips evaluation")->capture_default_str();
  sub->add_flag("--no-checkpoint", a.no_checkpoint, "Skip the final fit on the whole corpus");
  sub->add_option("--precision", a.precision, "float or double")
      ->check(CLI::IsMember({"float", "double"}))
      ->capture_default_str();
  sub->add_option("--epochs", a.train.epochs)->capture_default_str();
  sub->add_option("--batch-size", a.train.batch_size)->capture_default_str();
  sub->add_option("--lr", a.train.lr)->capture_default_str();
  sub->add_option("--patience", a.train.patience)->capture_default_str();
  sub->add_option("--seed", a.train.seed)->capture_default_str();
  sub->add_option("--val-fraction", a.train.val_fraction)->capture_default_str();
  sub->add_option("--positive-weight", a.train.positive_weight, "NLL weight on positive patients")
      ->capture_default_str();
  sub->add_option("--lambda-kld", a.train.weights.kld)->capture_default_str();
  sub->add_option("--lambda-lp", a.train.weights.lp)->capture_default_str();
  sub->add_option("--lambda-ent", a.train.weights.ent)->capture_default_str();
  sub->add_option("--d-model", a.model.gsl.d_model)->capture_default_str();
  sub->add_option("--blocks", a.model.gsl.blocks, "Attention blocks")->capture_default_str();
  sub->add_option("--p-max", a.model.gsl.p_max)->capture_default_str();
  sub->add_option("--c-max", a.model.gsl.c_max)->capture_default_str();
  sub->add_option("--ffn-hidden", a.model.gsl.ffn_hidden, "0 means 4 x d-model")->capture_default_str();
  sub->add_option("--clusters", a.model.cmd.cluster_sizes, "Cluster count per pooling level")
      ->delimiter(',')
      ->capture_default_str();
  sub->add_option("--classifier-hidden", a.model.classifier_hidden, "0 means d-model")->capture_default_str();
}

template <typename T>
int run_train_typed(const CLI::App& sub, TrainArgs a) {
  a.train.mode = parse_mode(a.mode);
  validate(a.train);
  validate(a.model);
  if (a.folds < 1) throw ConfigError("train: folds must be at least 1");
  if (a.folds == 1 && a.no_checkpoint) throw ConfigError("train: --folds 1 with --no-checkpoint does nothing");
  ManifestWriter m("train", sub);
  m.seed("root", a.train.seed);
  m.input(a.corpus);
  m.input(a.vocab);
  const Corpus corpus = read_corpus(a.corpus, a.vocab);
  if (corpus.records.empty()) throw InputError("train: empty corpus");
  const fs::path dir(a.out_dir);

  if (a.folds >= 2) {
    const auto t0 = Clock::now();
    const auto report = cross_validate<T>(corpus, a.folds, a.model, a.train, [&](const FoldResult& f) {
      std::cerr << "fold " << f.fold << ": auroc " << f.metrics.auroc << " auprc " << f.metrics.auprc << " ("
                << f.seconds << " s)\n";
    });
    m.phase("cross_validate", since(t0));
    m.output(dir / "metrics.csv", report_to_csv(report));
    m.output(dir / "metrics.json", report_to_json(report).dump(2) + "\n");
    std::cerr << "mean auroc " << report.auroc.mean << " [" << report.auroc.low << ", " << report.auroc.high
              << "], auprc " << report.auprc.mean << " [" << report.auprc.low << ", " << report.auprc.high << "]\n";
  }
  if (!a.no_checkpoint) {
    const auto t0 = Clock::now();
    const auto trained = fit<T>(corpus.records, corpus.vocab, a.model, a.train);
    m.phase("final_fit", since(t0));
    const std::string co_csv = co_to_csv(trained.co);
    m.output(dir / "co.csv", co_csv);
    nlohmann::json history = nlohmann::json::array();
    for (const auto& h : trained.history)
      history.push_back({{"epoch", h.epoch}, {"train_loss", h.train_loss}, {"val_auprc", h.val_auprc}});
    const nlohmann::json meta = {{"mode", to_string(a.train.mode)},
                                 {"seed", a.train.seed},
                                 {"co_sha256", sha256_hex(co_csv)},
                                 {"best_epoch", trained.best_epoch},
                                 {"history", history}};
    m.output(dir / "model.ckpt.json", save_checkpoint(trained.model, meta));
  }
  m.finish(dir);
  return kOk;
}

int run_train(const CLI::App& sub, const TrainArgs& a) {
  return a.precision == "double" ? run_train_typed<double>(sub, a) : run_train_typed<float>(sub, a);
}

// ---------------------------------------------------------------------------

struct ModelInputs {
  std::string checkpoint, co, corpus, vocab, mode = "full";
};

void add_model_inputs(CLI::App* sub, ModelInputs& in) {
  sub->add_option("--checkpoint", in.checkpoint, "model.ckpt.json")->required();
  sub->add_option("--co", in.co, "co.csv written next to the checkpoint")->required();
  sub->add_option("--corpus", in.corpus)->required();
  sub->add_option("--vocab", in.vocab)->required();
  sub->add_option("--mode", in.mode, "full or no-gsl")->capture_default_str();
}

struct Loaded {
  Corpus corpus;
  CoOccurrenceMatrix co;
  Model<double> model;
  Mode mode = Mode::full;
};

Loaded load_inputs(const ModelInputs& in, ManifestWriter& m) {
  Loaded out;
  out.mode = parse_mode(in.mode);
  if (out.mode == Mode::no_cmd) throw UsageError("explanations need clinical modules; use full or no-gsl");
  for (const auto* p : {&in.checkpoint, &in.co, &in.corpus, &in.vocab}) m.input(*p);
  out.corpus = read_corpus(in.corpus, in.vocab);
  const std::string co_text = read_file(in.co);
  auto ckpt = load_checkpoint<double>(read_file(in.checkpoint), out.corpus.vocab.hash());
  const auto co_hash = ckpt.metadata.value("co_sha256", std::string());
  if (!co_hash.empty() && co_hash != sha256_hex(co_text))
    throw InputError("co matrix does not belong to this checkpoint");
  out.co = co_from_csv(co_text, out.corpus.vocab);
  out.model = std::move(ckpt.model);
  return out;
}

struct ExplainArgs {
  ModelInputs in;
  std::string patient, format = "dot", out;
  double threshold = kDefaultEdgeThreshold;
};

void add_explain(CLI::App& app, ExplainArgs& a) {
  auto* sub = app.add_subcommand("explain", "Export one patient's trajectory graph");
  add_model_inputs(sub, a.in);
  sub->add_option("--patient", a.patient, "Patient id")->required();
  sub->add_option("--threshold", a.threshold, "Minimum edge weight")->capture_default_str();
  sub->add_option("--format", a.format, "dot or json")->capture_default_str();
  sub->add_option("--out", a.out, "Output file")->required();
}

int run_explain(const CLI::App& sub, const ExplainArgs& a) {
  if (a.format != "dot" && a.format != "json") throw UsageError("unknown export format \"" + a.format + "\"");
  ManifestWriter m("explain", sub);
  const Loaded in = load_inputs(a.in, m);
  const PatientRecord* record = nullptr;
  for (const auto& r : in.corpus.records)
    if (r.id == a.patient) record = &r;
  if (!record) throw MissingInputError("patient \"" + a.patient + "\" not in corpus");
  const auto prepared = prepare_patient<double>(*record, in.model.config, in.corpus.vocab, in.co);
  const auto result = forward(prepared, in.model, in.mode);
  const auto expl = extract_patient_graph(result.prediction, prepared.enc, in.corpus.vocab, a.threshold);
  const fs::path out(a.out);
  m.output(out, export_graph(expl, a.format));
  m.finish(out.has_parent_path() ? out.parent_path() : fs::path("."));
  std::cerr << "explain: " << expl.nodes.size() << " nodes, " << expl.edges.size() << " edges, p = "
            << expl.probability << "\n";
  return kOk;
}

struct StatsArgs {
  ModelInputs in;
  std::string out_dir, target;
  double threshold = kDefaultEdgeThreshold;
  std::size_t k = 5;
};

void add_stats(CLI::App& app, StatsArgs& a) {
  auto* sub = app.add_subcommand("stats", "Population edge statistics and co-cluster rankings");
  add_model_inputs(sub, a.in);
  sub->add_option("--out-dir", a.out_dir)->required();
  sub->add_option("--threshold", a.threshold, "Minimum edge weight")->capture_default_str();
  sub->add_option("--target-code", a.target, "Code whose module partners are ranked");
  sub->add_option("--k", a.k, "Entries in the co-cluster ranking")->capture_default_str();
}

int run_stats(const CLI::App& sub, const StatsArgs& a) {
  ManifestWriter m("stats", sub);
  const Loaded in = load_inputs(a.in, m);
  if (!a.target.empty() && (!in.corpus.vocab.contains(a.target) || a.target == kPadCode))
    throw ConfigError("unknown target code \"" + a.target + "\"");
  const fs::path dir(a.out_dir);
  auto t0 = Clock::now();
  const auto stats = edge_statistics(in.corpus.records, in.model, in.corpus.vocab, in.co, a.threshold, in.mode);
  m.phase("edge_statistics", since(t0));
  m.output(dir / "edge_stats.csv", edge_statistics_csv(stats));
  if (!a.target.empty()) {
    t0 = Clock::now();
    const auto cc = co_cluster_statistics(in.corpus.records, in.model, in.corpus.vocab, in.co, a.target, a.k, in.mode);
    m.phase("co_cluster", since(t0));
    m.output(dir / "co_cluster.csv", co_cluster_csv(cc));
  }
  m.finish(dir);
  for (Relation rel : {Relation::intra, Relation::inter}) {
    std::cerr << to_string(rel) << "-encounter, most prevalent:\n";
    for (const auto& r : stats.top(rel, 8))
      std::cerr << "  " << r.src << " -> " << r.dst << "  " << r.prevalence << "  (" << r.mean_w << " +/- " << r.std_w
                << ")\n";
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DeepJ: graph structure learning and clinical module discovery over encounter sequences"};
  app.set_config("--config", "", "TOML or INI file; [gen], [train], [explain], [stats] sections; flags override");
  app.require_subcommand(1);
  GenArgs gen;
  TrainArgs train;
  ExplainArgs explain;
  StatsArgs stats;
  add_gen(app, gen);
  add_train(app, train);
  add_explain(app, explain);
  add_stats(app, stats);

  try {
    app.parse(argc, argv);
  } catch (const CLI::FileError& e) {
    std::cerr << e.what() << "\n";
    return kMissing;
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    const CLI::App* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    if (name == "gen") return run_gen(*sub, gen);
    if (name == "train") return run_train(*sub, train);
    if (name == "explain") return run_explain(*sub, explain);
    return run_stats(*sub, stats);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kConfig;
  } catch (const MissingInputError& e) {
    std::cerr << "missing input: " << e.what() << "\n";
    return kMissing;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
}
