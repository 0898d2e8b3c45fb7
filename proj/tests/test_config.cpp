#include <doctest.h>

#include <sstream>

#include "traject/config.hpp"

using namespace traject;

TEST_CASE("flat config parsing") {
  std::stringstream in("# comment\n\n  model.d_model = 32 \ntrain.lr=0.01\n");
  auto f = FlatConfig::parse(in);
  CHECK(f.get_size("model.d_model", 0) == 32);
  CHECK(f.get_double("train.lr", 0.0) == 0.01);
  CHECK(f.get_int("missing", 7) == 7);

  std::stringstream bad("model.d_model=32\nnot a pair\n");
  try {
    FlatConfig::parse(bad);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
}

TEST_CASE("typed getters report the key") {
  FlatConfig f;
  f.set("a", "1.5x");
  f.set("b", "maybe");
  f.set("c", "1,2,,3");
  f.set("d", "-3");
  try {
    f.get_double("a", 0.0);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(e.key() == "a");
  }
  CHECK_THROWS_AS(f.get_bool("b", false), ConfigError);
  CHECK_THROWS_AS(f.get_u64_list("c", {}), ConfigError);
  CHECK_THROWS_AS(f.get_size("d", 0), ConfigError);
  f.set("c", "4, 5,6");
  CHECK(f.get_u64_list("c", {}) == std::vector<std::uint64_t>{4, 5, 6});
}

TEST_CASE("settings defaults and overrides") {
  Settings s = read_settings(FlatConfig{});
  CHECK(s.model.d_model == 64);
  CHECK(s.train.finetune_lr == 2e-4);
  CHECK(s.synth.n_patients == 2000);
  CHECK(s.synth_seeds == std::vector<std::uint64_t>{1, 2, 3, 4, 5});
  CHECK(s.masking.source.window.kind == WindowPolicy::Kind::RandomVisitSpan);
  CHECK_FALSE(s.masking.source.target_source.has_value());

  FlatConfig f;
  f.set("mask.source", "DIAG");
  f.set("mask.window.policy", "full");
  f.set("mask.schedule", "mixed");
  f.set("eval.folds", "3");
  s = read_settings(f);
  CHECK(s.masking.source.target_source == SourceId::Diagnosis);
  CHECK(s.masking.source.window.kind == WindowPolicy::Kind::FullHistory);
  CHECK(s.train.schedule == Schedule::Mixed);
  CHECK(s.folds == 3);
}

TEST_CASE("invalid settings name their key") {
  auto key_of = [](const std::string& k, const std::string& v) {
    FlatConfig f;
    f.set(k, v);
    try {
      read_settings(f);
    } catch (const ConfigError& e) {
      return e.key();
    }
    return std::string("<none>");
  };
  CHECK(key_of("model.d_modle", "8") == "model.d_modle");
  CHECK(key_of("model.n_heads", "5") == "model.n_heads");
  CHECK(key_of("mask.p_select", "0") == "mask.p_select");
  CHECK(key_of("mask.source", "LAB") == "mask.source");
  CHECK(key_of("mask.schedule", "both") == "mask.schedule");
  CHECK(key_of("train.lr", "") == "train.lr");
  CHECK(key_of("synth.carrier_prob", "2") == "synth.carrier_prob");
  CHECK(key_of("eval.folds", "1") == "eval.folds");
  CHECK(key_of("model.vocab_size", "10") == "model.vocab_size");
}

TEST_CASE("settings survive a round trip through the flat form") {
  FlatConfig f;
  f.set("model.d_model", "32");
  f.set("train.lr", "0.003");
  f.set("mask.source", "MED");
  f.set("synth.seeds", "9,10");
  f.set("synth.questionnaire", "true");
  Settings a = read_settings(f);
  FlatConfig flat = to_flat(a);
  Settings b = read_settings(flat);
  std::stringstream x, y;
  flat.write(x);
  to_flat(b).write(y);
  CHECK(x.str() == y.str());
  CHECK(b.model == a.model);
  CHECK(b.synth_seeds == a.synth_seeds);
}

TEST_CASE("format_double is shortest round trip") {
  CHECK(format_double(0.1) == "0.1");
  CHECK(std::stod(format_double(2e-4)) == 2e-4);
  CHECK(std::stod(format_double(1.0 / 3.0)) == 1.0 / 3.0);
}
