#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "traject/trajectory.hpp"

namespace traject {

// Generative model for desk-scale cohorts with planted cross-source structure.
//
// Each patient has uniform [min_visits, max_visits] visits; the last one is the
// outcome visit and is not part of the emitted trajectory. Every latent risk
// factor z is carried independently with carrier_prob. In each input visit a
// carrier emits the medication pair (m1_z, m2_z) with pair_prob and the
// diagnosis d_z with diag_prob. Background codes per source follow a
// Poisson(mean_events) count truncated to [0, max_events], drawn without
// repetition from a Zipf(zipf_s) law over the non-reserved codes. The outcome
// code appears in the outcome visit with probability
// sigmoid(beta0 + beta * number_of_carried_latents); the label records it.
struct GeneratorConfig {
  std::size_t n_patients = 2000;
  int min_visits = 3;
  int max_visits = 8;
  std::size_t n_diag = 60;
  std::size_t n_med = 40;
  double mean_events = 2.0;
  int max_events = 5;
  std::size_t n_latents = 4;
  double carrier_prob = 0.3;
  double pair_prob = 0.8;
  double diag_prob = 0.5;
  double beta0 = -2.0;
  double beta = 1.5;
  double zipf_s = 1.1;
  bool questionnaire = false;  // static answers at the first visit
  std::size_t n_questions = 8;
  std::size_t answer_buckets = 3;

  void validate() const;
};

struct ReservedCodes {
  std::vector<std::string> latent_diag;                         // d_z
  std::vector<std::pair<std::string, std::string>> latent_meds;  // (m1_z, m2_z)
  std::string outcome;
};

ReservedCodes reserved_codes(const GeneratorConfig& cfg);
std::string diag_code(const GeneratorConfig& cfg, std::size_t index);
std::string med_code(const GeneratorConfig& cfg, std::size_t index);

struct SimulatedPatient {
  PatientTrajectory trajectory;  // input visits only, labeled
  std::vector<bool> carriers;
  int input_visits = 0;  // includes visits that happened to emit nothing
};

// Patients [first, first + count) of the cohort identified by seed. Patient i
// only depends on (cfg, seed, i).
std::vector<SimulatedPatient> simulate_patients(const GeneratorConfig& cfg, std::uint64_t seed,
                                                std::size_t first, std::size_t count);

std::vector<PatientTrajectory> generate_cohort(const GeneratorConfig& cfg, std::uint64_t seed);

// P(label = 1 | observed history, number of input visits) under the generator.
double posterior_outcome_probability(const GeneratorConfig& cfg, const PatientTrajectory& traj,
                                     int input_visits);

// Monte-Carlo AUC of the true posterior on n_mc fresh simulated patients.
double bayes_auc_oracle(const GeneratorConfig& cfg, std::uint64_t seed,
                        std::size_t n_mc = 100000);

double prevalence(const std::vector<PatientTrajectory>& cohort);

void write_cohort_manifest(std::ostream& out, const GeneratorConfig& cfg, std::uint64_t seed,
                           const std::vector<PatientTrajectory>& cohort);

}  // namespace traject
