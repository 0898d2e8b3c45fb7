#include "traject/masking.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace traject {

void RandomMaskConfig::validate() const {
  if (!(p_select > 0.0 && p_select <= 1.0)) throw ConfigError("mask.p_select", "must be in (0, 1]");
  if (p_mask < 0.0) throw ConfigError("mask.p_mask", "must be non-negative");
  if (p_random < 0.0) throw ConfigError("mask.p_random", "must be non-negative");
  if (p_keep < 0.0) throw ConfigError("mask.p_keep", "must be non-negative");
  if (std::abs(p_mask + p_random + p_keep - 1.0) > 1e-9) {
    throw ConfigError("mask.p_mask", "p_mask + p_random + p_keep must equal 1");
  }
}

void SourceMaskConfig::validate() const {
  if (window.kind == WindowPolicy::Kind::RandomVisitSpan) {
    if (window.min_visits < 1) throw ConfigError("mask.window.min_visits", "must be >= 1");
    if (window.max_visits < window.min_visits) {
      throw ConfigError("mask.window.max_visits", "must be >= min_visits");
    }
  }
}

std::vector<int> eligible_positions(const EncodedSequence& seq) {
  std::vector<int> out;
  for (std::size_t i = 0; i < seq.token_ids.size(); ++i) {
    if (seq.attention_mask[i] && !is_special(seq.token_ids[i])) out.push_back(static_cast<int>(i));
  }
  return out;
}

MaskedExample random_token_mask(const EncodedSequence& seq, const RandomMaskConfig& cfg,
                                std::size_t vocab_size, Rng& rng) {
  cfg.validate();
  auto eligible = eligible_positions(seq);
  if (eligible.empty()) throw Error("nothing to mask");

  std::vector<int> selected;
  for (int pos : eligible) {
    if (uniform01(rng) < cfg.p_select) selected.push_back(pos);
  }
  if (selected.empty()) selected.push_back(eligible[uniform_index(rng, 0, eligible.size() - 1)]);

  MaskedExample ex{seq, {}, MaskMode::RandomToken};
  const bool have_real = vocab_size > static_cast<std::size_t>(special::kCount);
  for (int pos : selected) {
    auto p = static_cast<std::size_t>(pos);
    ex.targets[pos] = seq.token_ids[p];
    double u = uniform01(rng);
    if (u < cfg.p_mask) {
      ex.input.token_ids[p] = special::kMask;
    } else if (u < cfg.p_mask + cfg.p_random && have_real) {
      ex.input.token_ids[p] =
          static_cast<int>(uniform_index(rng, special::kCount, vocab_size - 1));
    }
  }
  return ex;
}

namespace {

std::pair<int, int> draw_window(const WindowPolicy& policy, int n_visits, Rng& rng) {
  if (policy.kind == WindowPolicy::Kind::FullHistory) return {0, n_visits - 1};
  int hi = std::min(policy.max_visits, n_visits);
  int lo = std::min(policy.min_visits, hi);
  int width = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(lo),
                                             static_cast<std::size_t>(hi)));
  int start = static_cast<int>(uniform_index(rng, 0, static_cast<std::size_t>(n_visits - width)));
  return {start, start + width - 1};
}

}  // namespace

MaskedExample source_span_mask(const EncodedSequence& seq, const SourceMaskConfig& cfg,
                               std::size_t vocab_size, Rng& rng) {
  cfg.validate();
  auto eligible = eligible_positions(seq);
  std::set<int> present;
  int n_visits = 0;
  for (int pos : eligible) {
    present.insert(seq.source_ids[static_cast<std::size_t>(pos)]);
    n_visits = std::max(n_visits, seq.visit_ids[static_cast<std::size_t>(pos)] + 1);
  }
  if (present.size() < 2) throw Error("insufficient sources");
  const std::vector<int> sources(present.begin(), present.end());

  auto covered = [&](int source, std::pair<int, int> window) {
    std::vector<int> hits;
    for (int pos : eligible) {
      auto p = static_cast<std::size_t>(pos);
      if (seq.source_ids[p] == source && seq.visit_ids[p] >= window.first &&
          seq.visit_ids[p] <= window.second) {
        hits.push_back(pos);
      }
    }
    return hits;
  };

  constexpr int kWindowRetries = 16;
  int source = cfg.target_source ? source_tag(*cfg.target_source)
                                 : sources[uniform_index(rng, 0, sources.size() - 1)];
  for (int source_attempt = 0; source_attempt < 2; ++source_attempt) {
    if (source_attempt > 0) source = sources[uniform_index(rng, 0, sources.size() - 1)];
    for (int attempt = 0; attempt < kWindowRetries; ++attempt) {
      auto hits = covered(source, draw_window(cfg.window, n_visits, rng));
      if (hits.empty()) continue;
      MaskedExample ex{seq, {}, MaskMode::SourceSpan};
      for (int pos : hits) {
        auto p = static_cast<std::size_t>(pos);
        ex.targets[pos] = seq.token_ids[p];
        ex.input.token_ids[p] = special::kMask;
      }
      return ex;
    }
  }
  return random_token_mask(seq, RandomMaskConfig{}, vocab_size, rng);
}

// ---------------------------------------------------------------------------
// Batching

std::size_t Batch::target_count() const {
  return static_cast<std::size_t>(
      std::count_if(targets.begin(), targets.end(), [](int t) { return t != kNoTarget; }));
}

Batch Batch::trimmed() const {
  std::size_t longest = 0;
  for (std::size_t b = 0; b < batch_size; ++b) {
    for (std::size_t i = seq_len; i > 0; --i) {
      if (attention_mask[b * seq_len + i - 1]) {
        longest = std::max(longest, i);
        break;
      }
    }
  }
  if (longest == seq_len) return *this;
  Batch out;
  out.batch_size = batch_size;
  out.seq_len = longest;
  out.modes = modes;
  auto copy = [&](const std::vector<int>& src, std::vector<int>& dst) {
    dst.reserve(batch_size * longest);
    for (std::size_t b = 0; b < batch_size; ++b) {
      auto first = src.begin() + static_cast<std::ptrdiff_t>(b * seq_len);
      dst.insert(dst.end(), first, first + static_cast<std::ptrdiff_t>(longest));
    }
  };
  copy(token_ids, out.token_ids);
  copy(source_ids, out.source_ids);
  copy(position_ids, out.position_ids);
  copy(visit_ids, out.visit_ids);
  copy(attention_mask, out.attention_mask);
  copy(targets, out.targets);
  return out;
}

namespace {

void append_sequence(Batch& batch, const EncodedSequence& seq) {
  if (batch.batch_size == 0) {
    batch.seq_len = seq.max_len();
  } else if (seq.max_len() != batch.seq_len) {
    throw Error("mixed max_len in batch: " + std::to_string(batch.seq_len) + " vs " +
                std::to_string(seq.max_len()));
  }
  auto append = [](std::vector<int>& dst, const std::vector<int>& src) {
    dst.insert(dst.end(), src.begin(), src.end());
  };
  append(batch.token_ids, seq.token_ids);
  append(batch.source_ids, seq.source_ids);
  append(batch.position_ids, seq.position_ids);
  append(batch.visit_ids, seq.visit_ids);
  append(batch.attention_mask, seq.attention_mask);
  ++batch.batch_size;
}

}  // namespace

Batch make_batch(const std::vector<MaskedExample>& examples) {
  Batch batch;
  for (const auto& ex : examples) {
    append_sequence(batch, ex.input);
    std::vector<int> row(ex.input.max_len(), kNoTarget);
    for (auto [pos, id] : ex.targets) row[static_cast<std::size_t>(pos)] = id;
    batch.targets.insert(batch.targets.end(), row.begin(), row.end());
    batch.modes.push_back(ex.mode);
  }
  return batch;
}

std::vector<Batch> make_batches(const std::vector<MaskedExample>& examples,
                                std::size_t batch_size) {
  if (batch_size == 0) throw Error("batch_size must be positive");
  std::vector<Batch> out;
  for (std::size_t i = 0; i < examples.size(); i += batch_size) {
    auto last = std::min(examples.size(), i + batch_size);
    out.push_back(make_batch(std::vector<MaskedExample>(
        examples.begin() + static_cast<std::ptrdiff_t>(i),
        examples.begin() + static_cast<std::ptrdiff_t>(last))));
  }
  return out;
}

Batch make_batch(const std::vector<EncodedSequence>& sequences) {
  Batch batch;
  for (const auto& seq : sequences) {
    append_sequence(batch, seq);
    batch.targets.insert(batch.targets.end(), seq.max_len(), kNoTarget);
    batch.modes.push_back(MaskMode::RandomToken);
  }
  return batch;
}

std::vector<MaskedExample> unbatch(const Batch& batch) {
  std::vector<MaskedExample> out;
  const std::size_t L = batch.seq_len;
  for (std::size_t b = 0; b < batch.batch_size; ++b) {
    auto slice = [&](const std::vector<int>& v) {
      return std::vector<int>(v.begin() + static_cast<std::ptrdiff_t>(b * L),
                              v.begin() + static_cast<std::ptrdiff_t>((b + 1) * L));
    };
    MaskedExample ex;
    ex.input = {slice(batch.token_ids), slice(batch.source_ids), slice(batch.position_ids),
                slice(batch.visit_ids), slice(batch.attention_mask)};
    for (std::size_t i = 0; i < L; ++i) {
      int t = batch.targets[b * L + i];
      if (t != kNoTarget) ex.targets[static_cast<int>(i)] = t;
    }
    ex.mode = batch.modes[b];
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace traject
