#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "traject/config.hpp"

namespace fs = std::filesystem;
using namespace traject;

namespace {

std::uint64_t fnv1a_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// The manifest is itself a loadable config file: everything that is not a
// setting is written as a comment, so `--config <manifest>` replays the run.
class RunManifest {
 public:
  RunManifest(std::string command, fs::path path) : command_(std::move(command)), path_(path) {}

  void input(const fs::path& p) { inputs_.push_back("# input: " + p.string() + " fnv1a64=" + hex64(fnv1a_file(p))); }
  void seed(const std::string& name, std::uint64_t v) { seeds_.push_back(name + "=" + std::to_string(v)); }
  void timing(const std::string& name, double seconds) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.3fs", seconds);
    timings_.push_back("# timing: " + name + " " + buf);
  }
  void artifact(const fs::path& p) { artifacts_.push_back(p); }

  void write(const FlatConfig& config) const {
    std::ofstream out(path_);
    if (!out) throw Error("cannot write " + path_.string());
    out << "# traject_mlm run manifest\n# command: " << command_ << '\n';
    std::string seeds;
    for (const auto& s : seeds_) seeds += " " + s;
    out << "# seeds:" << seeds << '\n';
    for (const auto& line : inputs_) out << line << '\n';
    for (const auto& p : artifacts_) {
      out << "# artifact: " << p.string() << " fnv1a64=" << hex64(fnv1a_file(p)) << '\n';
    }
    for (const auto& line : timings_) out << line << '\n';
    config.write(out);
  }

 private:
  std::string command_;
  fs::path path_;
  std::vector<std::string> inputs_, seeds_, timings_;
  std::vector<fs::path> artifacts_;
};

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::size_t thread_count() {
  const char* env = std::getenv("TRAJECT_MLM_THREADS");
  if (env == nullptr || *env == '\0') {
    return std::max(1u, std::thread::hardware_concurrency());
  }
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (*end != '\0' || v < 1) throw ConfigError("TRAJECT_MLM_THREADS", "expected a positive integer");
  return static_cast<std::size_t>(v);
}

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir = ".";
  bool verbose = false;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "key=value config file")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "seed (synth: generator seed; otherwise training seed)");
  sub->add_option("--out-dir", c.out_dir, "directory for all outputs");
  sub->add_flag("-v,--verbose", c.verbose, "log progress to stderr");
  sub->add_option("overrides", c.overrides, "config overrides as key=value");
}

// Config file, then key=value overrides, then flags.
FlatConfig merged_config(const Common& c, const std::string& seed_key) {
  FlatConfig flat = c.config.empty() ? FlatConfig{} : FlatConfig::load(c.config);
  for (const auto& kv : c.overrides) {
    auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(kv, "override must be key=value");
    flat.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (c.seed) flat.set(seed_key, std::to_string(*c.seed));
  return flat;
}

std::string command_line(int argc, char** argv) {
  std::string s;
  for (int i = 1; i < argc; ++i) s += (i > 1 ? " " : "") + std::string(argv[i]);
  return s;
}

void write_losses(const fs::path& path, const std::vector<LossPoint>& curve) {
  std::ofstream out(path);
  out << "phase,epoch,mean_loss\n";
  for (const auto& p : curve) out << p.phase << ',' << p.epoch << ',' << format_double(p.mean_loss) << '\n';
}

void write_vocab(const fs::path& path, const Vocabulary& vocab) {
  std::ofstream out(path);
  vocab.save(out);
}

Vocabulary read_vocab(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  return Vocabulary::load(in);
}

std::vector<EncodedSequence> encode_all(const std::vector<PatientTrajectory>& cohort,
                                        const Vocabulary& vocab, std::size_t max_len) {
  std::vector<EncodedSequence> out;
  out.reserve(cohort.size());
  for (const auto& t : cohort) out.push_back(encode_trajectory(t, vocab, max_len));
  return out;
}

int run_synth(const Common& c, const std::string& out_file, const std::string& cmd) {
  Stopwatch clock;
  Settings s = read_settings(merged_config(c, "synth.seed"));
  fs::create_directories(c.out_dir);
  fs::path cohort_path = out_file.empty() ? fs::path(c.out_dir) / "cohort.jsonl" : fs::path(out_file);
  if (cohort_path.has_parent_path()) fs::create_directories(cohort_path.parent_path());
  fs::path cohort_manifest = cohort_path.parent_path() / "cohort_manifest.txt";

  auto cohort = generate_cohort(s.synth, s.synth_seed);
  {
    std::ofstream out(cohort_path, std::ios::binary);
    write_jsonl(out, cohort);
  }
  {
    std::ofstream out(cohort_manifest);
    write_cohort_manifest(out, s.synth, s.synth_seed, cohort);
  }
  RunManifest m(cmd, fs::path(c.out_dir) / "synth.manifest.txt");
  m.seed("synth.seed", s.synth_seed);
  m.artifact(cohort_path);
  m.artifact(cohort_manifest);
  m.timing("total", clock.seconds());
  m.write(to_flat(s));
  std::cout << cohort_path.string() << ": " << cohort.size() << " patients, prevalence "
            << format_double(prevalence(cohort)) << '\n';
  return 0;
}

int run_pretrain(const Common& c, const std::string& data, const std::string& cmd) {
  Stopwatch clock;
  Settings s = read_settings(merged_config(c, "train.seed"));
  auto cohort = read_jsonl_file(data);
  fs::create_directories(c.out_dir);
  const fs::path dir(c.out_dir);
  RunManifest m(cmd, dir / "pretrain.manifest.txt");
  m.input(data);
  m.seed("train.seed", s.train.seed);

  Vocabulary vocab = build_vocabulary(cohort, s.min_count);
  write_vocab(dir / "vocab.txt", vocab);
  m.artifact(dir / "vocab.txt");
  auto encoded = encode_all(cohort, vocab, s.model.max_len);

  Stopwatch phase_clock;
  auto result = pretrain(encoded, vocab.size(), s.model, s.train, s.masking,
                         [&](const std::string& phase, const ModelParams& params) {
                           fs::path ckpt = dir / (phase + ".ckpt");
                           save_model(ckpt.string(), params);
                           m.artifact(ckpt);
                           m.artifact(ckpt.string() + ".bin");
                           m.artifact(ckpt.string() + ".cfg");
                           m.timing(phase, phase_clock.seconds());
                         });
  write_losses(dir / "losses.csv", result.curve);
  m.artifact(dir / "losses.csv");
  m.timing("total", clock.seconds());
  m.write(to_flat(s));
  std::cout << "pretrained on " << cohort.size() << " patients; phase-2 skipped "
            << result.phase2_skipped << '\n';
  return 0;
}

int run_finetune(const Common& c, const std::string& data, const std::string& checkpoint,
                 const std::string& vocab_path, const std::string& cmd) {
  Stopwatch clock;
  Settings s = read_settings(merged_config(c, "train.seed"));
  auto cohort = read_jsonl_file(data);
  fs::create_directories(c.out_dir);
  const fs::path dir(c.out_dir);
  RunManifest m(cmd, dir / "finetune.manifest.txt");
  m.input(data);
  m.seed("train.seed", s.train.seed);

  std::optional<ModelParams> start;
  Vocabulary vocab;
  if (checkpoint.empty()) {
    vocab = build_vocabulary(cohort, s.min_count);
    write_vocab(dir / "vocab.txt", vocab);
    m.artifact(dir / "vocab.txt");
    ModelConfig mc = s.model;
    mc.vocab_size = vocab.size();
    start.emplace(mc, derive_seed(s.train.seed, {0xC0FFEE}));
  } else {
    fs::path vp = vocab_path.empty() ? fs::path(checkpoint).parent_path() / "vocab.txt" : fs::path(vocab_path);
    m.input(checkpoint);
    m.input(vp);
    vocab = read_vocab(vp);
    start.emplace(load_model(checkpoint));
    if (start->config().vocab_size != vocab.size()) {
      throw Error("vocabulary does not match checkpoint");
    }
  }
  std::vector<int> labels;
  for (const auto& t : cohort) {
    if (!t.label) throw Error("patient " + t.patient_id + " has no label");
    labels.push_back(*t.label);
  }
  auto encoded = encode_all(cohort, vocab, start->config().max_len);
  auto result = fine_tune(*start, encoded, labels, s.train);
  save_model((dir / "finetuned.ckpt").string(), result.params);
  for (const char* suffix : {"", ".bin", ".cfg"}) m.artifact((dir / "finetuned.ckpt").string() + suffix);
  write_losses(dir / "finetune_losses.csv", result.curve);
  m.artifact(dir / "finetune_losses.csv");
  m.timing("total", clock.seconds());
  m.write(to_flat(s));
  std::cout << "fine-tuned on " << cohort.size() << " patients\n";
  return 0;
}

// Cohorts from --data, or synthesized from the configured generator seeds.
std::vector<std::vector<PatientTrajectory>> load_cohorts(const Settings& s, const std::string& data,
                                                         const std::vector<std::uint64_t>& seeds,
                                                         std::vector<std::string>& names,
                                                         RunManifest& m) {
  std::vector<std::vector<PatientTrajectory>> cohorts;
  if (!data.empty()) {
    m.input(data);
    cohorts.push_back(read_jsonl_file(data));
    names.push_back(fs::path(data).stem().string());
    return cohorts;
  }
  for (auto seed : seeds) {
    cohorts.push_back(generate_cohort(s.synth, seed));
    names.push_back("seed" + std::to_string(seed));
  }
  return cohorts;
}

int run_evaluate(const Common& c, const std::string& data, const std::string& pipeline,
                 const std::string& cmd) {
  Stopwatch clock;
  Settings s = read_settings(merged_config(c, "train.seed"));
  Pipeline p;
  try {
    p = parse_pipeline(pipeline);
  } catch (const Error& e) {
    throw ConfigError("--pipeline", e.what());
  }
  const std::size_t threads = thread_count();
  fs::create_directories(c.out_dir);
  const fs::path dir(c.out_dir);
  RunManifest m(cmd, dir / "evaluate.manifest.txt");
  m.seed("train.seed", s.train.seed);
  m.seed("eval.seed", s.cv_seed);
  std::vector<std::string> names;
  auto cohorts = load_cohorts(s, data, {s.synth_seed}, names, m);
  if (data.empty()) m.seed("synth.seed", s.synth_seed);

  auto reports = evaluate_cohorts(cohorts, {p}, s.experiment(threads));
  {
    std::ofstream out(dir / "report.csv");
    write_report_csv(out, names, reports);
  }
  m.artifact(dir / "report.csv");
  m.timing("total", clock.seconds());
  m.write(to_flat(s));
  const auto& r = reports[0][0];
  std::printf("%s: mean AUC %.3f (%.3f) over %zu folds\n", r.method.c_str(), r.mean_auc, r.std_auc,
              r.fold_auc.size());
  return 0;
}

int run_compare(const Common& c, const std::string& data, bool oracle, const std::string& cmd) {
  Stopwatch clock;
  Settings s = read_settings(merged_config(c, "train.seed"));
  const std::size_t threads = thread_count();
  fs::create_directories(c.out_dir);
  const fs::path dir(c.out_dir);
  RunManifest m(cmd, dir / "compare.manifest.txt");
  m.seed("train.seed", s.train.seed);
  m.seed("eval.seed", s.cv_seed);
  std::vector<std::string> names;
  auto cohorts = load_cohorts(s, data, s.synth_seeds, names, m);
  if (data.empty()) {
    for (auto seed : s.synth_seeds) m.seed("synth.seeds", seed);
  }

  auto reports = evaluate_cohorts(cohorts, all_pipelines(), s.experiment(threads));
  m.timing("evaluate", clock.seconds());
  auto pooled = pool_reports(reports);
  {
    std::ofstream out(dir / "report.csv");
    write_report_csv(out, names, reports);
  }
  {
    std::ofstream out(dir / "compare.csv");
    write_compare_csv(out, pooled);
  }
  m.artifact(dir / "report.csv");
  m.artifact(dir / "compare.csv");
  if (oracle && data.empty()) {
    std::ofstream out(dir / "oracle.csv");
    out << "cohort,bayes_auc\n";
    for (std::size_t i = 0; i < s.synth_seeds.size(); ++i) {
      out << names[i] << ',' << format_double(bayes_auc_oracle(s.synth, s.synth_seeds[i])) << '\n';
    }
    out.close();
    m.artifact(dir / "oracle.csv");
  }
  m.timing("total", clock.seconds());
  m.write(to_flat(s));
  for (const auto& r : pooled) {
    std::printf("%-16s %.3f (%.3f)\n", r.method.c_str(), r.mean_auc, r.std_auc);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-step masked pretraining for multi-source patient trajectories"};
  app.require_subcommand(1);

  Common common;
  std::string data, out_file, checkpoint, vocab, pipeline = "design_masking";
  bool oracle = false;

  auto* synth = app.add_subcommand("synth", "generate a synthetic cohort");
  add_common(synth, common);
  synth->add_option("--out", out_file, "cohort JSONL path (default <out-dir>/cohort.jsonl)");

  auto* pre = app.add_subcommand("pretrain", "two-phase MLM pretraining");
  add_common(pre, common);
  pre->add_option("--data", data, "cohort JSONL")->required()->check(CLI::ExistingFile);

  auto* fine = app.add_subcommand("finetune", "fine-tune a classifier on labeled patients");
  add_common(fine, common);
  fine->add_option("--data", data, "labeled cohort JSONL")->required()->check(CLI::ExistingFile);
  fine->add_option("--checkpoint", checkpoint, "pretrained checkpoint (default: random init)")
      ->check(CLI::ExistingFile);
  fine->add_option("--vocab", vocab, "vocabulary of the checkpoint (default: next to it)");

  auto* eval = app.add_subcommand("evaluate", "cross-validate one pipeline");
  add_common(eval, common);
  eval->add_option("--data", data, "labeled cohort JSONL (default: synthesize synth.seed)")
      ->check(CLI::ExistingFile);
  eval->add_option("--pipeline", pipeline, "no_pretrain|simple_mlm|design_masking|logreg_baseline");

  auto* cmp = app.add_subcommand("compare", "cross-validate all pipelines");
  add_common(cmp, common);
  cmp->add_option("--data", data, "labeled cohort JSONL (default: synthesize synth.seeds)")
      ->check(CLI::ExistingFile);
  cmp->add_flag("--oracle", oracle, "also write the Bayes-optimal AUC of each synthetic cohort");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  set_logging(common.verbose);
  const std::string cmd = command_line(argc, argv);
  try {
    if (*synth) return run_synth(common, out_file, cmd);
    if (*pre) return run_pretrain(common, data, cmd);
    if (*fine) return run_finetune(common, data, checkpoint, vocab, cmd);
    if (*eval) return run_evaluate(common, data, pipeline, cmd);
    return run_compare(common, data, oracle, cmd);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
