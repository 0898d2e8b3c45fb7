#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "traject/common.hpp"

namespace traject {

enum class SourceId : int { Diagnosis = 0, Medication = 1, Questionnaire = 2 };

inline constexpr int kSourceCount = 3;
// Source tag carried by CLS/SEP/PAD positions.
inline constexpr int kNoSource = kSourceCount;

std::string_view source_name(SourceId s);          // "DIAG" | "MED" | "QUEST"
SourceId parse_source_name(std::string_view name);  // throws Error
std::string_view source_prefix(SourceId s);        // "ICD10:" | "ATC:" | "Q:"
SourceId source_from_tag(int tag);                  // throws Error
inline int source_tag(SourceId s) { return static_cast<int>(s); }

struct Event {
  std::string code;
  SourceId source = SourceId::Diagnosis;
  int visit_index = 0;
  std::optional<int> age_at_event;

  bool operator==(const Event&) const = default;
};

struct PatientTrajectory {
  std::string patient_id;
  std::vector<Event> events;
  std::optional<int> label;

  // Checks code prefixes, non-negative visits, visit order and label range.
  void validate() const;
  int visit_count() const;  // number of distinct visit indices
  bool operator==(const PatientTrajectory&) const = default;
};

namespace special {
inline constexpr int kPad = 0;
inline constexpr int kUnk = 1;
inline constexpr int kCls = 2;
inline constexpr int kSep = 3;
inline constexpr int kMask = 4;
inline constexpr int kCount = 5;
}  // namespace special

std::string_view special_token_name(int id);

class Vocabulary {
 public:
  Vocabulary();  // specials only

  // codes must be distinct real codes; ids are assigned in the given order
  explicit Vocabulary(const std::vector<std::string>& codes);

  std::size_t size() const { return id_to_code_.size(); }
  int id(std::string_view code) const;  // UNK for unknown codes
  bool contains(std::string_view code) const;
  const std::string& code(int id) const;  // throws "id out of range"
  std::vector<int> real_ids() const;

  void save(std::ostream& out) const;
  static Vocabulary load(std::istream& in);

  bool operator==(const Vocabulary& other) const {
    return id_to_code_ == other.id_to_code_;
  }

 private:
  std::map<std::string, int, std::less<>> code_to_id_;
  std::vector<std::string> id_to_code_;
};

Vocabulary build_vocabulary(const std::vector<PatientTrajectory>& corpus,
                            std::size_t min_count = 1);

struct EncodedSequence {
  std::vector<int> token_ids;
  std::vector<int> source_ids;
  std::vector<int> position_ids;
  std::vector<int> visit_ids;
  std::vector<int> attention_mask;

  std::size_t max_len() const { return token_ids.size(); }
  std::size_t length() const;  // number of real (unpadded) positions
  int visit_count() const;     // number of retained visits
  bool operator==(const EncodedSequence&) const = default;
};

inline bool is_special(int token_id) { return token_id < special::kCount; }

EncodedSequence encode_trajectory(const PatientTrajectory& traj,
                                  const Vocabulary& vocab, std::size_t max_len);

struct DecodedEvent {
  std::string code;
  SourceId source;
  int visit_index;
  bool operator==(const DecodedEvent&) const = default;
};

std::vector<DecodedEvent> decode_sequence(const EncodedSequence& seq,
                                          const Vocabulary& vocab);

// JSON-Lines dataset I/O. read_jsonl reports the 1-based line number of the
// first malformed record through ParseError.
std::vector<PatientTrajectory> read_jsonl(std::istream& in);
std::vector<PatientTrajectory> read_jsonl_file(const std::string& path);
void write_jsonl(std::ostream& out, const std::vector<PatientTrajectory>& cohort);
std::string to_json_line(const PatientTrajectory& traj);
PatientTrajectory parse_json_line(std::string_view line);

}  // namespace traject
