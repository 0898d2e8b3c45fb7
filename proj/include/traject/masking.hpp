#pragma once

#include <map>
#include <optional>
#include <vector>

#include "traject/common.hpp"
#include "traject/trajectory.hpp"

namespace traject {

struct RandomMaskConfig {
  double p_select = 0.15;
  double p_mask = 0.8;
  double p_random = 0.1;
  double p_keep = 0.1;

  void validate() const;
};

struct WindowPolicy {
  enum class Kind { FullHistory, RandomVisitSpan };
  Kind kind = Kind::RandomVisitSpan;
  int min_visits = 1;
  int max_visits = 3;

  static WindowPolicy full_history() { return {Kind::FullHistory, 1, 1}; }
  static WindowPolicy span(int lo, int hi) { return {Kind::RandomVisitSpan, lo, hi}; }
};

struct SourceMaskConfig {
  std::optional<SourceId> target_source;  // nullopt: random per example
  WindowPolicy window;

  void validate() const;
};

enum class MaskMode { RandomToken, SourceSpan };

struct MaskedExample {
  EncodedSequence input;
  std::map<int, int> targets;  // position -> original token id
  MaskMode mode = MaskMode::RandomToken;
};

// Positions holding a real (non-special) token inside the attention mask.
std::vector<int> eligible_positions(const EncodedSequence& seq);

MaskedExample random_token_mask(const EncodedSequence& seq, const RandomMaskConfig& cfg,
                                std::size_t vocab_size, Rng& rng);

// Masks every token of one source inside a visit window. Falls back to
// random_token_mask with default settings when no (source, window) draw
// covers a token; the returned mode reports which path was taken.
MaskedExample source_span_mask(const EncodedSequence& seq, const SourceMaskConfig& cfg,
                               std::size_t vocab_size, Rng& rng);

// Model-ready dense batch. Grids are row-major [batch_size, seq_len];
// targets hold -1 where no prediction is required.
struct Batch {
  std::size_t batch_size = 0;
  std::size_t seq_len = 0;
  std::vector<int> token_ids;
  std::vector<int> source_ids;
  std::vector<int> position_ids;
  std::vector<int> visit_ids;
  std::vector<int> attention_mask;
  std::vector<int> targets;
  std::vector<MaskMode> modes;

  std::size_t target_count() const;
  // Drops columns beyond the longest real sequence in the batch.
  Batch trimmed() const;
};

inline constexpr int kNoTarget = -1;

Batch make_batch(const std::vector<MaskedExample>& examples);
std::vector<Batch> make_batches(const std::vector<MaskedExample>& examples,
                                std::size_t batch_size);
// Unmasked sequences (fine-tuning / inference): targets all -1.
Batch make_batch(const std::vector<EncodedSequence>& sequences);
std::vector<MaskedExample> unbatch(const Batch& batch);

}  // namespace traject
