#include "traject/trajectory.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace traject {

namespace {

constexpr std::string_view kSpecialNames[special::kCount] = {
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"};

}  // namespace

std::string_view source_name(SourceId s) {
  switch (s) {
    case SourceId::Diagnosis: return "DIAG";
    case SourceId::Medication: return "MED";
    case SourceId::Questionnaire: return "QUEST";
  }
  throw Error("unknown source");
}

SourceId parse_source_name(std::string_view name) {
  if (name == "DIAG") return SourceId::Diagnosis;
  if (name == "MED") return SourceId::Medication;
  if (name == "QUEST") return SourceId::Questionnaire;
  throw Error("unknown source \"" + std::string(name) + "\"");
}

std::string_view source_prefix(SourceId s) {
  switch (s) {
    case SourceId::Diagnosis: return "ICD10:";
    case SourceId::Medication: return "ATC:";
    case SourceId::Questionnaire: return "Q:";
  }
  throw Error("unknown source");
}

SourceId source_from_tag(int tag) {
  if (tag < 0 || tag >= kSourceCount) {
    throw Error("source tag " + std::to_string(tag) + " out of range");
  }
  return static_cast<SourceId>(tag);
}

std::string_view special_token_name(int id) {
  if (id < 0 || id >= special::kCount) throw Error("not a special token id");
  return kSpecialNames[id];
}

void PatientTrajectory::validate() const {
  int last_visit = 0;
  for (const auto& e : events) {
    if (e.code.empty()) throw Error("empty code in patient " + patient_id);
    if (!e.code.starts_with(source_prefix(e.source))) {
      throw Error("code \"" + e.code + "\" does not match source " +
                  std::string(source_name(e.source)));
    }
    if (e.visit_index < 0) throw Error("negative visit index");
    if (e.visit_index < last_visit) throw Error("events out of visit order");
    if (e.age_at_event && *e.age_at_event < 0) throw Error("negative age");
    last_visit = e.visit_index;
  }
  if (label && *label != 0 && *label != 1) throw Error("label must be 0 or 1");
}

int PatientTrajectory::visit_count() const {
  int count = 0;
  for (std::size_t i = 0; i < events.size(); ++i) {
    if (i == 0 || events[i].visit_index != events[i - 1].visit_index) ++count;
  }
  return count;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
  for (int i = 0; i < special::kCount; ++i) {
    id_to_code_.emplace_back(kSpecialNames[i]);
    code_to_id_.emplace(kSpecialNames[i], i);
  }
}

Vocabulary::Vocabulary(const std::vector<std::string>& codes) : Vocabulary() {
  for (const auto& c : codes) {
    if (c.empty()) throw Error("empty code in vocabulary");
    int next = static_cast<int>(id_to_code_.size());
    if (!code_to_id_.emplace(c, next).second) {
      throw Error("duplicate vocabulary entry \"" + c + "\"");
    }
    id_to_code_.push_back(c);
  }
}

int Vocabulary::id(std::string_view code) const {
  auto it = code_to_id_.find(code);
  if (it == code_to_id_.end() || it->second < special::kCount) return special::kUnk;
  return it->second;
}

bool Vocabulary::contains(std::string_view code) const {
  auto it = code_to_id_.find(code);
  return it != code_to_id_.end() && it->second >= special::kCount;
}

const std::string& Vocabulary::code(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= id_to_code_.size()) {
    throw Error("id out of range");
  }
  return id_to_code_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::real_ids() const {
  std::vector<int> ids;
  for (int i = special::kCount; i < static_cast<int>(size()); ++i) ids.push_back(i);
  return ids;
}

void Vocabulary::save(std::ostream& out) const {
  for (std::size_t i = 0; i < id_to_code_.size(); ++i) {
    out << i << '\t' << id_to_code_[i] << '\n';
  }
}

Vocabulary Vocabulary::load(std::istream& in) {
  std::vector<std::string> codes;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(line_no, "expected <id>\\t<code>");
    std::size_t id = 0;
    try {
      id = std::stoul(line.substr(0, tab));
    } catch (const std::exception&) {
      throw ParseError(line_no, "bad id");
    }
    std::string code = line.substr(tab + 1);
    if (id != line_no - 1) throw ParseError(line_no, "ids must be dense and ordered");
    if (id < special::kCount) {
      if (code != kSpecialNames[id]) throw ParseError(line_no, "unexpected special token");
      continue;
    }
    codes.push_back(std::move(code));
  }
  if (line_no < special::kCount) throw Error("vocabulary file missing special tokens");
  return Vocabulary(codes);
}

Vocabulary build_vocabulary(const std::vector<PatientTrajectory>& corpus,
                            std::size_t min_count) {
  if (corpus.empty()) throw Error("empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& t : corpus) {
    for (const auto& e : t.events) ++counts[e.code];
  }
  std::vector<std::string> codes;
  for (const auto& [code, n] : counts) {
    if (n >= min_count) codes.push_back(code);  // std::map iterates sorted
  }
  return Vocabulary(codes);
}

// ---------------------------------------------------------------------------
// Encoding

std::size_t EncodedSequence::length() const {
  return static_cast<std::size_t>(
      std::count(attention_mask.begin(), attention_mask.end(), 1));
}

int EncodedSequence::visit_count() const {
  int n = 0;
  for (std::size_t i = 0; i < token_ids.size(); ++i) {
    if (attention_mask[i] && token_ids[i] == special::kSep) ++n;
  }
  return n;
}

EncodedSequence encode_trajectory(const PatientTrajectory& traj,
                                  const Vocabulary& vocab, std::size_t max_len) {
  if (max_len < 3) throw Error("max_len must be at least 3");
  if (traj.events.empty()) throw Error("empty trajectory");
  traj.validate();

  // [first, last) event ranges per visit
  std::vector<std::pair<std::size_t, std::size_t>> visits;
  for (std::size_t i = 0; i < traj.events.size(); ++i) {
    if (i == 0 || traj.events[i].visit_index != traj.events[i - 1].visit_index) {
      visits.emplace_back(i, i);
    }
    visits.back().second = i + 1;
  }

  // Keep the most recent visits that fit after CLS.
  std::size_t used = 1;
  std::size_t first_kept = visits.size();
  while (first_kept > 0) {
    auto [b, e] = visits[first_kept - 1];
    if (used + (e - b) + 1 > max_len) break;
    used += (e - b) + 1;
    --first_kept;
  }
  if (first_kept == visits.size()) {
    // Even the latest visit is too long; keep its leading events.
    auto& last = visits.back();
    last.second = last.first + (max_len - 2);
    first_kept = visits.size() - 1;
  }

  EncodedSequence seq;
  seq.token_ids.assign(max_len, special::kPad);
  seq.source_ids.assign(max_len, kNoSource);
  seq.visit_ids.assign(max_len, 0);
  seq.attention_mask.assign(max_len, 0);
  seq.position_ids.resize(max_len);
  for (std::size_t i = 0; i < max_len; ++i) seq.position_ids[i] = static_cast<int>(i);

  std::size_t pos = 0;
  seq.token_ids[pos] = special::kCls;
  seq.attention_mask[pos] = 1;
  ++pos;
  int visit = 0;
  for (std::size_t v = first_kept; v < visits.size(); ++v, ++visit) {
    for (std::size_t i = visits[v].first; i < visits[v].second; ++i) {
      const auto& ev = traj.events[i];
      seq.token_ids[pos] = vocab.id(ev.code);
      seq.source_ids[pos] = source_tag(ev.source);
      seq.visit_ids[pos] = visit;
      seq.attention_mask[pos] = 1;
      ++pos;
    }
    seq.token_ids[pos] = special::kSep;
    seq.visit_ids[pos] = visit;
    seq.attention_mask[pos] = 1;
    ++pos;
  }
  return seq;
}

std::vector<DecodedEvent> decode_sequence(const EncodedSequence& seq,
                                          const Vocabulary& vocab) {
  std::vector<DecodedEvent> out;
  for (std::size_t i = 0; i < seq.token_ids.size(); ++i) {
    int id = seq.token_ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
      throw Error("id out of range");
    }
    if (!seq.attention_mask[i]) continue;
    if (id == special::kPad || id == special::kCls || id == special::kSep) continue;
    out.push_back({vocab.code(id), source_from_tag(seq.source_ids[i]), seq.visit_ids[i]});
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

std::string to_json_line(const PatientTrajectory& traj) {
  nlohmann::ordered_json j;
  j["patient_id"] = traj.patient_id;
  if (traj.label) j["label"] = *traj.label;
  auto events = nlohmann::ordered_json::array();
  for (const auto& e : traj.events) {
    nlohmann::ordered_json ej;
    ej["code"] = e.code;
    ej["source"] = std::string(source_name(e.source));
    ej["visit"] = e.visit_index;
    if (e.age_at_event) ej["age"] = *e.age_at_event;
    events.push_back(std::move(ej));
  }
  j["events"] = std::move(events);
  return j.dump();
}

PatientTrajectory parse_json_line(std::string_view line) {
  auto j = nlohmann::json::parse(line);  // throws nlohmann::json::exception
  PatientTrajectory t;
  if (!j.is_object()) throw Error("record is not an object");
  t.patient_id = j.at("patient_id").get<std::string>();
  if (j.contains("label") && !j["label"].is_null()) t.label = j["label"].get<int>();
  for (const auto& ej : j.at("events")) {
    Event e;
    e.code = ej.at("code").get<std::string>();
    e.source = parse_source_name(ej.at("source").get<std::string>());
    e.visit_index = ej.at("visit").get<int>();
    if (ej.contains("age") && !ej["age"].is_null()) e.age_at_event = ej["age"].get<int>();
    t.events.push_back(std::move(e));
  }
  std::stable_sort(t.events.begin(), t.events.end(),
                   [](const Event& a, const Event& b) { return a.visit_index < b.visit_index; });
  t.validate();
  return t;
}

std::vector<PatientTrajectory> read_jsonl(std::istream& in) {
  std::vector<PatientTrajectory> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(parse_json_line(line));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, e.what());
    } catch (const Error& e) {
      throw ParseError(line_no, e.what());
    }
  }
  return out;
}

std::vector<PatientTrajectory> read_jsonl_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path);
  return read_jsonl(in);
}

void write_jsonl(std::ostream& out, const std::vector<PatientTrajectory>& cohort) {
  for (const auto& t : cohort) out << to_json_line(t) << '\n';
}

}  // namespace traject
