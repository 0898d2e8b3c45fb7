#include "traject/synthcohort.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <set>

#include "traject/config.hpp"
#include "traject/evaluation.hpp"

namespace traject {

void GeneratorConfig::validate() const {
  auto probability = [](double p, const char* key) {
    if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(key, "must be a probability in [0, 1]");
  };
  probability(carrier_prob, "synth.carrier_prob");
  probability(pair_prob, "synth.pair_prob");
  probability(diag_prob, "synth.diag_prob");
  if (min_visits < 2) throw ConfigError("synth.min_visits", "must be >= 2 (one input visit plus the outcome visit)");
  if (max_visits < min_visits) throw ConfigError("synth.max_visits", "must be >= synth.min_visits");
  if (n_latents > 16) throw ConfigError("synth.n_latents", "at most 16 latents are supported");
  if (n_diag < n_latents + 2) {
    throw ConfigError("synth.n_diag", "reserved diagnosis codes exceed the diagnosis vocabulary");
  }
  if (n_med < 2 * n_latents + 1) {
    throw ConfigError("synth.n_med", "reserved medication codes exceed the medication vocabulary");
  }
  if (!(mean_events >= 0.0)) throw ConfigError("synth.mean_events", "must be non-negative");
  if (max_events < 0) throw ConfigError("synth.max_events", "must be non-negative");
  if (!(zipf_s > 0.0)) throw ConfigError("synth.zipf_s", "must be positive");
  if (questionnaire && (n_questions == 0 || answer_buckets == 0)) {
    throw ConfigError("synth.n_questions", "questionnaire needs questions and answer buckets");
  }
}

namespace {

std::string padded(const char* prefix, std::size_t index, std::size_t count) {
  int width = std::max(2, static_cast<int>(std::to_string(count - 1).size()));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%0*zu", width, index);
  return std::string(prefix) + buf;
}

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Reserved diagnosis ids: [0, n_latents) latent, n_latents outcome.
// Reserved medication ids: [0, 2*n_latents) latent pairs.
struct CodeSpace {
  std::size_t diag_background_first;
  std::size_t med_background_first;
  std::discrete_distribution<std::size_t> diag_zipf;
  std::discrete_distribution<std::size_t> med_zipf;
};

std::discrete_distribution<std::size_t> zipf(std::size_t n, double s) {
  std::vector<double> w(n);
  for (std::size_t r = 0; r < n; ++r) w[r] = std::pow(static_cast<double>(r + 1), -s);
  return {w.begin(), w.end()};
}

CodeSpace code_space(const GeneratorConfig& cfg) {
  const std::size_t d0 = cfg.n_latents + 1;
  const std::size_t m0 = 2 * cfg.n_latents;
  return {d0, m0, zipf(cfg.n_diag - d0, cfg.zipf_s), zipf(cfg.n_med - m0, cfg.zipf_s)};
}

int truncated_poisson(Rng& rng, double mean, int max) {
  if (mean == 0.0) return 0;
  std::poisson_distribution<int> dist(mean);
  for (;;) {
    int k = dist(rng);
    if (k <= max) return k;
  }
}

// Distinct background ids, ascending.
std::vector<std::size_t> draw_background(Rng& rng, std::discrete_distribution<std::size_t>& law,
                                         std::size_t first, std::size_t available, int count) {
  std::set<std::size_t> chosen;
  const auto want = std::min<std::size_t>(static_cast<std::size_t>(count), available);
  while (chosen.size() < want) chosen.insert(first + law(rng));
  return {chosen.begin(), chosen.end()};
}

SimulatedPatient simulate_one(const GeneratorConfig& cfg, CodeSpace& space, std::uint64_t seed,
                              std::size_t index) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(derive_seed(seed, {index, attempt}));
    SimulatedPatient sp;
    sp.trajectory.patient_id = "p" + std::to_string(index);
    const int total_visits = static_cast<int>(uniform_index(
        rng, static_cast<std::size_t>(cfg.min_visits), static_cast<std::size_t>(cfg.max_visits)));
    sp.input_visits = total_visits - 1;
    sp.carriers.resize(cfg.n_latents);
    int carried = 0;
    for (std::size_t z = 0; z < cfg.n_latents; ++z) {
      sp.carriers[z] = uniform01(rng) < cfg.carrier_prob;
      carried += sp.carriers[z] ? 1 : 0;
    }
    const int base_age = static_cast<int>(uniform_index(rng, 45, 70));

    auto& events = sp.trajectory.events;
    for (int v = 0; v < sp.input_visits; ++v) {
      std::vector<std::size_t> diag, med;
      for (std::size_t z = 0; z < cfg.n_latents; ++z) {
        if (!sp.carriers[z]) continue;
        if (uniform01(rng) < cfg.diag_prob) diag.push_back(z);
        if (uniform01(rng) < cfg.pair_prob) {
          med.push_back(2 * z);
          med.push_back(2 * z + 1);
        }
      }
      auto bg_diag = draw_background(rng, space.diag_zipf, space.diag_background_first,
                                     cfg.n_diag - space.diag_background_first,
                                     truncated_poisson(rng, cfg.mean_events, cfg.max_events));
      auto bg_med = draw_background(rng, space.med_zipf, space.med_background_first,
                                    cfg.n_med - space.med_background_first,
                                    truncated_poisson(rng, cfg.mean_events, cfg.max_events));
      diag.insert(diag.end(), bg_diag.begin(), bg_diag.end());
      med.insert(med.end(), bg_med.begin(), bg_med.end());
      std::sort(diag.begin(), diag.end());
      std::sort(med.begin(), med.end());
      const int age = base_age + v;
      for (auto id : diag) events.push_back({diag_code(cfg, id), SourceId::Diagnosis, v, age});
      for (auto id : med) events.push_back({med_code(cfg, id), SourceId::Medication, v, age});
      if (cfg.questionnaire && v == 0) {
        for (std::size_t q = 0; q < cfg.n_questions; ++q) {
          auto bucket = uniform_index(rng, 0, cfg.answer_buckets - 1);
          events.push_back({"Q:q" + std::to_string(q) + "=" + std::to_string(bucket),
                            SourceId::Questionnaire, v, age});
        }
      }
    }
    const double p = logistic(cfg.beta0 + cfg.beta * carried);
    sp.trajectory.label = uniform01(rng) < p ? 1 : 0;
    // A history without any event cannot be encoded; redraw the patient.
    if (!events.empty()) return sp;
    if (attempt > 1000) throw Error("generator config cannot produce a non-empty history");
  }
}

}  // namespace

std::string diag_code(const GeneratorConfig& cfg, std::size_t index) {
  return padded("ICD10:D", index, cfg.n_diag);
}

std::string med_code(const GeneratorConfig& cfg, std::size_t index) {
  return padded("ATC:M", index, cfg.n_med);
}

ReservedCodes reserved_codes(const GeneratorConfig& cfg) {
  ReservedCodes r;
  for (std::size_t z = 0; z < cfg.n_latents; ++z) {
    r.latent_diag.push_back(diag_code(cfg, z));
    r.latent_meds.emplace_back(med_code(cfg, 2 * z), med_code(cfg, 2 * z + 1));
  }
  r.outcome = diag_code(cfg, cfg.n_latents);
  return r;
}

std::vector<SimulatedPatient> simulate_patients(const GeneratorConfig& cfg, std::uint64_t seed,
                                                std::size_t first, std::size_t count) {
  cfg.validate();
  auto space = code_space(cfg);
  std::vector<SimulatedPatient> out;
  out.reserve(count);
  for (std::size_t i = first; i < first + count; ++i) out.push_back(simulate_one(cfg, space, seed, i));
  return out;
}

std::vector<PatientTrajectory> generate_cohort(const GeneratorConfig& cfg, std::uint64_t seed) {
  auto patients = simulate_patients(cfg, seed, 0, cfg.n_patients);
  std::vector<PatientTrajectory> out;
  out.reserve(patients.size());
  for (auto& p : patients) out.push_back(std::move(p.trajectory));
  return out;
}

double posterior_outcome_probability(const GeneratorConfig& cfg, const PatientTrajectory& traj,
                                     int input_visits) {
  const auto reserved = reserved_codes(cfg);
  std::set<std::string> seen;
  for (const auto& e : traj.events) seen.insert(e.code);
  const double silent = std::pow((1.0 - cfg.pair_prob) * (1.0 - cfg.diag_prob), input_visits);
  std::vector<double> carrier_posterior(cfg.n_latents);
  for (std::size_t z = 0; z < cfg.n_latents; ++z) {
    bool observed = seen.count(reserved.latent_diag[z]) || seen.count(reserved.latent_meds[z].first) ||
                    seen.count(reserved.latent_meds[z].second);
    if (observed) {
      carrier_posterior[z] = 1.0;
    } else {
      const double a = cfg.carrier_prob * silent;
      carrier_posterior[z] = a / (a + 1.0 - cfg.carrier_prob);
    }
  }
  // Latents are independent a posteriori; enumerate carrier patterns.
  double expected = 0.0;
  const std::size_t patterns = std::size_t{1} << cfg.n_latents;
  for (std::size_t mask = 0; mask < patterns; ++mask) {
    double w = 1.0;
    int carried = 0;
    for (std::size_t z = 0; z < cfg.n_latents; ++z) {
      bool c = (mask >> z) & 1U;
      w *= c ? carrier_posterior[z] : 1.0 - carrier_posterior[z];
      carried += c ? 1 : 0;
    }
    if (w > 0.0) expected += w * logistic(cfg.beta0 + cfg.beta * carried);
  }
  return expected;
}

double bayes_auc_oracle(const GeneratorConfig& cfg, std::uint64_t seed, std::size_t n_mc) {
  if (n_mc < 1000) throw Error("insufficient samples");
  auto patients = simulate_patients(cfg, seed, 0, n_mc);
  std::vector<double> scores;
  std::vector<int> labels;
  scores.reserve(n_mc);
  labels.reserve(n_mc);
  for (const auto& p : patients) {
    scores.push_back(posterior_outcome_probability(cfg, p.trajectory, p.input_visits));
    labels.push_back(*p.trajectory.label);
  }
  return roc_auc(scores, labels);
}

double prevalence(const std::vector<PatientTrajectory>& cohort) {
  if (cohort.empty()) return 0.0;
  std::size_t positives = 0;
  for (const auto& t : cohort) positives += t.label.value_or(0) == 1 ? 1 : 0;
  return static_cast<double>(positives) / static_cast<double>(cohort.size());
}

void write_cohort_manifest(std::ostream& out, const GeneratorConfig& cfg, std::uint64_t seed,
                           const std::vector<PatientTrajectory>& cohort) {
  FlatConfig flat;
  store_generator_config(cfg, flat);
  flat.write(out);
  out << "seed=" << seed << '\n';
  out << "patients=" << cohort.size() << '\n';
  out << "prevalence=" << prevalence(cohort) << '\n';
  const auto reserved = reserved_codes(cfg);
  for (std::size_t z = 0; z < cfg.n_latents; ++z) {
    out << "reserved.latent" << z << "=" << reserved.latent_diag[z] << ','
        << reserved.latent_meds[z].first << ',' << reserved.latent_meds[z].second << '\n';
  }
  out << "reserved.outcome=" << reserved.outcome << '\n';
}

}  // namespace traject
