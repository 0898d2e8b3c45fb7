#include "traject/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

namespace traject {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end) {
    throw ConfigError(key, "invalid value \"" + text + "\"");
  }
  return value;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

FlatConfig FlatConfig::parse(std::istream& in) {
  FlatConfig cfg;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    auto eq = t.find('=');
    if (eq == std::string::npos) throw ParseError(line_no, "expected key=value");
    std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw ParseError(line_no, "empty key");
    cfg.set(key, trim(t.substr(eq + 1)));
  }
  return cfg;
}

FlatConfig FlatConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open " + path);
  return parse(in);
}

std::string FlatConfig::get_string(const std::string& key, const std::string& fallback) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? fallback : it->second;
}

double FlatConfig::get_double(const std::string& key, double fallback) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? fallback : parse_number<double>(key, it->second);
}

std::size_t FlatConfig::get_size(const std::string& key, std::size_t fallback) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? fallback : parse_number<std::size_t>(key, it->second);
}

std::uint64_t FlatConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? fallback : parse_number<std::uint64_t>(key, it->second);
}

int FlatConfig::get_int(const std::string& key, int fallback) const {
  auto it = entries_.find(key);
  return it == entries_.end() ? fallback : parse_number<int>(key, it->second);
}

bool FlatConfig::get_bool(const std::string& key, bool fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw ConfigError(key, "invalid boolean \"" + it->second + "\"");
}

std::vector<std::uint64_t> FlatConfig::get_u64_list(
    const std::string& key, const std::vector<std::uint64_t>& fallback) const {
  auto it = entries_.find(key);
  if (it == entries_.end()) return fallback;
  std::vector<std::uint64_t> out;
  std::stringstream in(it->second);
  std::string part;
  while (std::getline(in, part, ',')) out.push_back(parse_number<std::uint64_t>(key, trim(part)));
  if (out.empty()) throw ConfigError(key, "empty list");
  return out;
}

void FlatConfig::write(std::ostream& out) const {
  for (const auto& [k, v] : entries_) out << k << '=' << v << '\n';
}

// ---------------------------------------------------------------------------

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "synth.n_patients", "synth.min_visits", "synth.max_visits", "synth.n_diag",
      "synth.n_med", "synth.mean_events", "synth.max_events", "synth.n_latents",
      "synth.carrier_prob", "synth.pair_prob", "synth.diag_prob", "synth.beta0", "synth.beta",
      "synth.zipf_s", "synth.questionnaire", "synth.n_questions", "synth.answer_buckets",
      "synth.seed", "synth.seeds",
      "model.d_model", "model.n_heads", "model.n_layers", "model.d_ff", "model.max_len",
      "model.max_visits", "model.dropout",
      "train.seed", "train.batch_size", "train.lr", "train.beta1", "train.beta2",
      "train.adam_eps", "train.phase1_epochs", "train.phase2_epochs", "train.finetune_epochs",
      "train.finetune_lr", "train.mixed_ratio",
      "mask.p_select", "mask.p_mask", "mask.p_random", "mask.p_keep", "mask.source",
      "mask.window.policy", "mask.window.min_visits", "mask.window.max_visits", "mask.schedule",
      "eval.folds", "eval.seed", "eval.min_count", "eval.logreg.iterations", "eval.logreg.lr",
      "eval.logreg.l2"};
  return keys;
}

GeneratorConfig read_generator_config(const FlatConfig& f) {
  GeneratorConfig g;
  g.n_patients = f.get_size("synth.n_patients", g.n_patients);
  g.min_visits = f.get_int("synth.min_visits", g.min_visits);
  g.max_visits = f.get_int("synth.max_visits", g.max_visits);
  g.n_diag = f.get_size("synth.n_diag", g.n_diag);
  g.n_med = f.get_size("synth.n_med", g.n_med);
  g.mean_events = f.get_double("synth.mean_events", g.mean_events);
  g.max_events = f.get_int("synth.max_events", g.max_events);
  g.n_latents = f.get_size("synth.n_latents", g.n_latents);
  g.carrier_prob = f.get_double("synth.carrier_prob", g.carrier_prob);
  g.pair_prob = f.get_double("synth.pair_prob", g.pair_prob);
  g.diag_prob = f.get_double("synth.diag_prob", g.diag_prob);
  g.beta0 = f.get_double("synth.beta0", g.beta0);
  g.beta = f.get_double("synth.beta", g.beta);
  g.zipf_s = f.get_double("synth.zipf_s", g.zipf_s);
  g.questionnaire = f.get_bool("synth.questionnaire", g.questionnaire);
  g.n_questions = f.get_size("synth.n_questions", g.n_questions);
  g.answer_buckets = f.get_size("synth.answer_buckets", g.answer_buckets);
  g.validate();
  return g;
}

std::optional<SourceId> read_mask_source(const FlatConfig& f) {
  std::string s = f.get_string("mask.source", "random");
  if (s == "random") return std::nullopt;
  try {
    return parse_source_name(s);
  } catch (const Error&) {
    throw ConfigError("mask.source", "expected random, DIAG, MED or QUEST");
  }
}

}  // namespace

void store_generator_config(const GeneratorConfig& g, FlatConfig& f) {
  f.set("synth.n_patients", std::to_string(g.n_patients));
  f.set("synth.min_visits", std::to_string(g.min_visits));
  f.set("synth.max_visits", std::to_string(g.max_visits));
  f.set("synth.n_diag", std::to_string(g.n_diag));
  f.set("synth.n_med", std::to_string(g.n_med));
  f.set("synth.mean_events", format_double(g.mean_events));
  f.set("synth.max_events", std::to_string(g.max_events));
  f.set("synth.n_latents", std::to_string(g.n_latents));
  f.set("synth.carrier_prob", format_double(g.carrier_prob));
  f.set("synth.pair_prob", format_double(g.pair_prob));
  f.set("synth.diag_prob", format_double(g.diag_prob));
  f.set("synth.beta0", format_double(g.beta0));
  f.set("synth.beta", format_double(g.beta));
  f.set("synth.zipf_s", format_double(g.zipf_s));
  f.set("synth.questionnaire", g.questionnaire ? "true" : "false");
  f.set("synth.n_questions", std::to_string(g.n_questions));
  f.set("synth.answer_buckets", std::to_string(g.answer_buckets));
}

ModelConfig read_model_config(const FlatConfig& f) {
  ModelConfig m;
  m.d_model = f.get_size("model.d_model", m.d_model);
  m.n_heads = f.get_size("model.n_heads", m.n_heads);
  m.n_layers = f.get_size("model.n_layers", m.n_layers);
  m.d_ff = f.get_size("model.d_ff", m.d_ff);
  m.max_len = f.get_size("model.max_len", m.max_len);
  m.max_visits = f.get_size("model.max_visits", m.max_visits);
  m.dropout_rate = f.get_double("model.dropout", m.dropout_rate);
  m.vocab_size = f.get_size("model.vocab_size", m.vocab_size);
  m.n_sources = f.get_size("model.n_sources", m.n_sources);
  return m;
}

void store_model_config(const ModelConfig& m, FlatConfig& f) {
  f.set("model.d_model", std::to_string(m.d_model));
  f.set("model.n_heads", std::to_string(m.n_heads));
  f.set("model.n_layers", std::to_string(m.n_layers));
  f.set("model.d_ff", std::to_string(m.d_ff));
  f.set("model.max_len", std::to_string(m.max_len));
  f.set("model.max_visits", std::to_string(m.max_visits));
  f.set("model.dropout", format_double(m.dropout_rate));
  f.set("model.vocab_size", std::to_string(m.vocab_size));
  f.set("model.n_sources", std::to_string(m.n_sources));
}

Settings read_settings(const FlatConfig& f) {
  for (const auto& [key, value] : f.entries()) {
    if (!known_keys().count(key)) throw ConfigError(key, "unknown config key");
    if (value.empty()) throw ConfigError(key, "missing value");
  }
  Settings s;
  s.synth = read_generator_config(f);
  s.synth_seed = f.get_u64("synth.seed", s.synth_seed);
  s.synth_seeds = f.get_u64_list("synth.seeds", s.synth_seeds);

  s.model = read_model_config(f);

  auto& t = s.train;
  t.seed = f.get_u64("train.seed", t.seed);
  t.batch_size = f.get_size("train.batch_size", t.batch_size);
  t.lr = f.get_double("train.lr", t.lr);
  t.beta1 = f.get_double("train.beta1", t.beta1);
  t.beta2 = f.get_double("train.beta2", t.beta2);
  t.adam_eps = f.get_double("train.adam_eps", t.adam_eps);
  t.phase1_epochs = f.get_size("train.phase1_epochs", t.phase1_epochs);
  t.phase2_epochs = f.get_size("train.phase2_epochs", t.phase2_epochs);
  t.finetune_epochs = f.get_size("train.finetune_epochs", t.finetune_epochs);
  t.finetune_lr = f.get_double("train.finetune_lr", t.finetune_lr);
  t.mixed_ratio = f.get_double("train.mixed_ratio", t.mixed_ratio);
  const std::string schedule = f.get_string("mask.schedule", "two_phase");
  if (schedule == "two_phase") {
    t.schedule = Schedule::TwoPhase;
  } else if (schedule == "mixed") {
    t.schedule = Schedule::Mixed;
  } else {
    throw ConfigError("mask.schedule", "expected two_phase or mixed");
  }
  t.validate();

  auto& r = s.masking.random;
  r.p_select = f.get_double("mask.p_select", r.p_select);
  r.p_mask = f.get_double("mask.p_mask", r.p_mask);
  r.p_random = f.get_double("mask.p_random", r.p_random);
  r.p_keep = f.get_double("mask.p_keep", r.p_keep);
  r.validate();
  auto& src = s.masking.source;
  src.target_source = read_mask_source(f);
  const std::string policy = f.get_string("mask.window.policy", "span");
  if (policy == "span") {
    src.window.kind = WindowPolicy::Kind::RandomVisitSpan;
  } else if (policy == "full") {
    src.window.kind = WindowPolicy::Kind::FullHistory;
  } else {
    throw ConfigError("mask.window.policy", "expected span or full");
  }
  src.window.min_visits = f.get_int("mask.window.min_visits", src.window.min_visits);
  src.window.max_visits = f.get_int("mask.window.max_visits", src.window.max_visits);
  src.validate();

  s.folds = f.get_size("eval.folds", s.folds);
  if (s.folds < 2) throw ConfigError("eval.folds", "must be >= 2");
  s.cv_seed = f.get_u64("eval.seed", s.cv_seed);
  s.min_count = f.get_size("eval.min_count", s.min_count);
  s.logreg.iterations = f.get_size("eval.logreg.iterations", s.logreg.iterations);
  s.logreg.lr = f.get_double("eval.logreg.lr", s.logreg.lr);
  s.logreg.l2 = f.get_double("eval.logreg.l2", s.logreg.l2);
  if (!(s.logreg.lr > 0.0)) throw ConfigError("eval.logreg.lr", "must be positive");
  if (s.logreg.l2 < 0.0) throw ConfigError("eval.logreg.l2", "must be non-negative");

  // vocab_size is only known once data is loaded; check the rest now.
  ModelConfig probe = s.model;
  probe.vocab_size = special::kCount + 1;
  probe.validate();
  return s;
}

FlatConfig to_flat(const Settings& s) {
  FlatConfig f;
  store_generator_config(s.synth, f);
  f.set("synth.seed", std::to_string(s.synth_seed));
  std::string seeds;
  for (std::size_t i = 0; i < s.synth_seeds.size(); ++i) {
    seeds += (i ? "," : "") + std::to_string(s.synth_seeds[i]);
  }
  f.set("synth.seeds", seeds);
  store_model_config(s.model, f);
  // vocab_size and n_sources belong to a trained model, not to the settings
  FlatConfig out;
  for (const auto& [k, v] : f.entries()) {
    if (k != "model.vocab_size" && k != "model.n_sources") out.set(k, v);
  }
  const auto& t = s.train;
  out.set("train.seed", std::to_string(t.seed));
  out.set("train.batch_size", std::to_string(t.batch_size));
  out.set("train.lr", format_double(t.lr));
  out.set("train.beta1", format_double(t.beta1));
  out.set("train.beta2", format_double(t.beta2));
  out.set("train.adam_eps", format_double(t.adam_eps));
  out.set("train.phase1_epochs", std::to_string(t.phase1_epochs));
  out.set("train.phase2_epochs", std::to_string(t.phase2_epochs));
  out.set("train.finetune_epochs", std::to_string(t.finetune_epochs));
  out.set("train.finetune_lr", format_double(t.finetune_lr));
  out.set("train.mixed_ratio", format_double(t.mixed_ratio));
  out.set("mask.schedule", t.schedule == Schedule::TwoPhase ? "two_phase" : "mixed");
  out.set("mask.p_select", format_double(s.masking.random.p_select));
  out.set("mask.p_mask", format_double(s.masking.random.p_mask));
  out.set("mask.p_random", format_double(s.masking.random.p_random));
  out.set("mask.p_keep", format_double(s.masking.random.p_keep));
  out.set("mask.source", s.masking.source.target_source
                             ? std::string(source_name(*s.masking.source.target_source))
                             : "random");
  out.set("mask.window.policy",
          s.masking.source.window.kind == WindowPolicy::Kind::FullHistory ? "full" : "span");
  out.set("mask.window.min_visits", std::to_string(s.masking.source.window.min_visits));
  out.set("mask.window.max_visits", std::to_string(s.masking.source.window.max_visits));
  out.set("eval.folds", std::to_string(s.folds));
  out.set("eval.seed", std::to_string(s.cv_seed));
  out.set("eval.min_count", std::to_string(s.min_count));
  out.set("eval.logreg.iterations", std::to_string(s.logreg.iterations));
  out.set("eval.logreg.lr", format_double(s.logreg.lr));
  out.set("eval.logreg.l2", format_double(s.logreg.l2));
  return out;
}

ExperimentConfig Settings::experiment(std::size_t threads) const {
  ExperimentConfig e;
  e.model = model;
  e.train = train;
  e.masking = masking;
  e.logreg = logreg;
  e.folds = folds;
  e.cv_seed = cv_seed;
  e.min_count = min_count;
  e.threads = threads;
  return e;
}

}  // namespace traject
