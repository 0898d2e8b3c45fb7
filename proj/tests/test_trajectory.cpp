#include <doctest.h>

#include <sstream>

#include "support.hpp"
#include "traject/trajectory.hpp"

using namespace traject;

namespace {

Event diag(const std::string& c, int visit) { return {"ICD10:" + c, SourceId::Diagnosis, visit, {}}; }
Event med(const std::string& c, int visit) { return {"ATC:" + c, SourceId::Medication, visit, {}}; }

PatientTrajectory patient(std::vector<Event> events) {
  PatientTrajectory t;
  t.patient_id = "p";
  t.events = std::move(events);
  return t;
}

}  // namespace

TEST_CASE("source tags are dense and round-trip") {
  for (int tag = 0; tag < kSourceCount; ++tag) {
    SourceId s = source_from_tag(tag);
    CHECK(source_tag(s) == tag);
    CHECK(parse_source_name(source_name(s)) == s);
  }
  CHECK_THROWS_AS(source_from_tag(kSourceCount), Error);
  CHECK_THROWS_AS(parse_source_name("LAB"), Error);
}

TEST_CASE("validate rejects malformed trajectories") {
  CHECK_NOTHROW(patient({diag("I50", 0), med("C03", 0)}).validate());
  CHECK_THROWS_AS(patient({{"ATC:C03", SourceId::Diagnosis, 0, {}}}).validate(), Error);
  CHECK_THROWS_AS(patient({diag("I50", 1), diag("I10", 0)}).validate(), Error);
  CHECK_THROWS_AS(patient({diag("I50", -1)}).validate(), Error);
  auto labeled = patient({diag("I50", 0)});
  labeled.label = 2;
  CHECK_THROWS_AS(labeled.validate(), Error);
}

TEST_CASE("build_vocabulary") {
  SUBCASE("specials then sorted codes") {
    auto v = build_vocabulary({patient({diag("I50", 0), med("C03", 0)})});
    CHECK(v.size() == 7);
    CHECK(v.id("ATC:C03") == 5);
    CHECK(v.id("ICD10:I50") == 6);
    CHECK(v.code(special::kMask) == "[MASK]");
    for (int id : v.real_ids()) CHECK(v.id(v.code(id)) == id);
  }
  SUBCASE("min_count drops rare codes to UNK") {
    auto v = build_vocabulary({patient({med("X", 0), diag("A", 0), diag("A", 1)})}, 2);
    CHECK_FALSE(v.contains("ATC:X"));
    CHECK(v.id("ATC:X") == special::kUnk);
    CHECK(v.size() == 6);
  }
  SUBCASE("order of the corpus does not matter") {
    auto a = patient({diag("B", 0), med("Z", 0)});
    auto b = patient({med("Q", 0), diag("A", 1)});
    CHECK(build_vocabulary({a, b}) == build_vocabulary({b, a}));
  }
  CHECK_THROWS_WITH(build_vocabulary({}), "empty corpus");
}

TEST_CASE("vocabulary file round trip") {
  auto v = build_vocabulary({patient({diag("I50", 0), med("C03", 0), med("C07", 2)})});
  std::stringstream ss;
  v.save(ss);
  CHECK(ss.str().substr(0, 8) == "0\t[PAD]\n");
  CHECK(Vocabulary::load(ss) == v);
  std::stringstream broken("0\t[PAD]\n1\t[UNK]\n2\t[CLS]\n3\t[SEP]\n4\t[MASK]\n6\tATC:X\n");
  CHECK_THROWS_AS(Vocabulary::load(broken), Error);
}

TEST_CASE("encode_trajectory layout") {
  auto t = patient({diag("D1", 0), med("M1", 0)});
  auto v = build_vocabulary({t});
  auto e = encode_trajectory(t, v, 8);
  const int d1 = v.id("ICD10:D1"), m1 = v.id("ATC:M1");
  CHECK(e.token_ids == std::vector<int>{2, d1, m1, 3, 0, 0, 0, 0});
  CHECK(e.attention_mask == std::vector<int>{1, 1, 1, 1, 0, 0, 0, 0});
  CHECK(e.source_ids == std::vector<int>{kNoSource, 0, 1, kNoSource, kNoSource, kNoSource,
                                         kNoSource, kNoSource});
  CHECK(e.position_ids == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
  CHECK(e.visit_ids == std::vector<int>{0, 0, 0, 0, 0, 0, 0, 0});
  CHECK(e.length() == 4);

  auto decoded = decode_sequence(e, v);
  REQUIRE(decoded.size() == 2);
  CHECK(decoded[0] == DecodedEvent{"ICD10:D1", SourceId::Diagnosis, 0});
  CHECK(decoded[1] == DecodedEvent{"ATC:M1", SourceId::Medication, 0});

  CHECK_THROWS_AS(encode_trajectory(t, v, 2), Error);
  CHECK_THROWS_WITH(encode_trajectory(patient({}), v, 8), "empty trajectory");
}

TEST_CASE("recency truncation keeps the newest visits") {
  auto t = patient({diag("A", 0), diag("B", 0), med("C", 0), diag("D", 1), diag("E", 1),
                    med("F", 1), diag("G", 2), diag("H", 2), med("I", 2)});
  auto v = build_vocabulary({t});
  auto e = encode_trajectory(t, v, 6);
  CHECK(e.token_ids ==
        std::vector<int>{2, v.id("ICD10:G"), v.id("ICD10:H"), v.id("ATC:I"), 3, 0});
  CHECK(e.visit_count() == 1);
  CHECK(e.visit_ids[1] == 0);

  // Visits with gaps in their indices are renumbered from zero.
  auto gappy = patient({diag("A", 3), med("C", 7)});
  auto g = encode_trajectory(gappy, v, 8);
  CHECK(g.visit_ids == std::vector<int>{0, 0, 0, 1, 1, 0, 0, 0});
}

TEST_CASE("unknown codes encode as UNK and keep their source") {
  auto v = build_vocabulary({patient({diag("A", 0)})});
  auto e = encode_trajectory(patient({med("new", 0)}), v, 5);
  CHECK(e.token_ids[1] == special::kUnk);
  auto d = decode_sequence(e, v);
  REQUIRE(d.size() == 1);
  CHECK(d[0].code == "[UNK]");
  CHECK(d[0].source == SourceId::Medication);
}

TEST_CASE("decode rejects ids outside the vocabulary") {
  auto v = build_vocabulary({patient({diag("A", 0)})});
  auto e = encode_trajectory(patient({diag("A", 0)}), v, 4);
  e.token_ids[1] = static_cast<int>(v.size());
  CHECK_THROWS_WITH(decode_sequence(e, v), "id out of range");
}

TEST_CASE("property: encode/decode round trip and truncation monotonicity") {
  Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    auto t = testing::random_trajectory(rng, "p" + std::to_string(trial), 6, 5);
    auto v = build_vocabulary({t});
    auto full = encode_trajectory(t, v, 128);
    auto decoded = decode_sequence(full, v);
    REQUIRE(decoded.size() == t.events.size());
    int visit = -1, prev_index = -1;
    for (std::size_t i = 0; i < decoded.size(); ++i) {
      if (t.events[i].visit_index != prev_index) {
        ++visit;
        prev_index = t.events[i].visit_index;
      }
      CHECK(decoded[i] == DecodedEvent{t.events[i].code, t.events[i].source, visit});
    }
    CHECK(encode_trajectory(t, v, 128) == full);

    // Every visit retained at a shorter length is retained at a longer one.
    int retained = 0;
    for (std::size_t len = 3; len <= 40; ++len) {
      auto e = encode_trajectory(t, v, len);
      CHECK(e.visit_count() >= retained);
      retained = e.visit_count();
      CHECK(e.token_ids[0] == special::kCls);
      for (std::size_t i = 1; i < e.max_len(); ++i) {
        CHECK(e.attention_mask[i] <= e.attention_mask[i - 1]);
      }
    }
  }
}

TEST_CASE("JSONL round trip and line-numbered errors") {
  Rng rng(3);
  std::vector<PatientTrajectory> cohort;
  for (int i = 0; i < 20; ++i) {
    cohort.push_back(testing::random_trajectory(rng, "p" + std::to_string(i), 4, 6));
    if (i % 2 == 0) cohort.back().label = i % 4 == 0 ? 1 : 0;
  }
  std::stringstream ss;
  write_jsonl(ss, cohort);
  CHECK(read_jsonl(ss) == cohort);

  auto line = parse_json_line(
      R"({"patient_id": "p1", "label": 0, "events": [{"code": "ICD10:I50", "source": "DIAG", "visit": 0, "age": 61}]})");
  CHECK(line.events[0].age_at_event == 61);
  CHECK(line.label == 0);

  std::stringstream bad(to_json_line(cohort[0]) + "\n" + to_json_line(cohort[1]) + "\n{oops\n");
  try {
    read_jsonl(bad);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 3);
  }
  std::stringstream wrong_source(R"({"patient_id":"x","events":[{"code":"ICD10:A","source":"LAB","visit":0}]})");
  CHECK_THROWS_AS(read_jsonl(wrong_source), ParseError);
}
