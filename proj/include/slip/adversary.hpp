#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "slip/decomposer.hpp"
#include "slip/model.hpp"
#include "slip/protocol.hpp"
#include "slip/rng.hpp"
#include "slip/stats.hpp"

namespace slip {

// ---------------------------------------------------------------------------
// Adversarial Davids
// ---------------------------------------------------------------------------

struct HonestPlay {};
/// Adds delta to the honest reply of one layer.
struct AdditiveNoise {
  std::uint32_t layer = 1;
  FieldVector delta;
};
/// Replaces one layer's reply with a uniform vector.
struct RandomReply {
  std::uint32_t layer = 1;
};
/// Adds a nonzero offset to a single coordinate of one layer's reply.
struct CoordinateFlip {
  std::uint32_t layer = 1;
  std::size_t index = 0;
  Residue offset = 1;
};

using CheatStrategy =
    std::variant<HonestPlay, AdditiveNoise, RandomReply, CoordinateFlip>;

std::string strategy_name(const CheatStrategy& s);
/// "honest", "noise:LAYER", "random:LAYER", "flip:LAYER[:INDEX[:OFFSET]]".
/// Noise draws a uniform delta from the adversary stream.
CheatStrategy parse_strategy(const std::string& text);

/// Several single-layer strategies played in one session; each layer may be
/// tampered by at most one of them.
using CheatPlan = std::vector<CheatStrategy>;

/// Reply hook playing `plan`. RandomReply and noise without an explicit delta
/// draw from `rng`, which the hook owns.
DavidState::ReplyHook make_hook(CheatPlan plan, Rng rng);

// ---------------------------------------------------------------------------
// Integrity experiments
// ---------------------------------------------------------------------------

/// Everything needed to run sessions and judge them against the oracle.
struct Testbed {
  MlpModel model;
  Decomposition decomposition;
  DavidParts parts;
  QuantizedModel oracle;

  Testbed(MlpModel m, std::span<const std::size_t> ranks,
          const FixedPointCodec& codec);
};

/// Random input for trial `index`: uniform residues under a wrapping codec,
/// otherwise encoded uniform values in [-scale, scale].
FieldVector trial_input(const Testbed& bed, std::uint64_t seed,
                        std::uint64_t index, double scale = 1.0);

enum class CheatOutcome { kAcceptedCorrect, kAcceptedWrong, kAborted };

const char* outcome_name(CheatOutcome o);

/// One malicious-mode session against a cheating David. A session whose
/// tampered values were accepted and then broke the value bound counts as
/// AcceptedWrong.
CheatOutcome run_with_cheat(const Testbed& bed, std::span<const Residue> input,
                            MaskSet& masks, const CheatPlan& plan, Rng rng);

struct DetectionConfig {
  std::size_t trials = 1000;
  std::size_t check_count = 1;
  std::uint64_t seed = 0;
  std::size_t threads = 0;  // 0: hardware concurrency
  double input_scale = 1.0;
};

struct DetectionReport {
  std::string strategy;
  Residue modulus = 0;
  std::size_t check_count = 0;
  std::size_t layers = 0;
  std::uint64_t trials = 0;
  std::uint64_t aborted = 0;
  std::uint64_t accepted_wrong = 0;
  std::uint64_t accepted_correct = 0;

  double abort_rate() const;
  double accept_wrong_rate() const;
  /// Pr[wrong output | no abort]
  double wrong_given_accept() const;
  stats::Interval abort_ci() const;
  stats::Interval accept_wrong_ci() const;
  stats::Interval wrong_given_accept_ci() const;
  /// 1/p^k, the per-layer acceptance probability of a tampered reply.
  double per_layer_rate() const;
  /// L/p^k
  double union_bound() const;

  nlohmann::json to_json() const;
};

/// Monte-Carlo detection estimate; fresh masks and inputs per trial from the
/// (seed, trial) substreams, so the result is independent of thread count.
DetectionReport estimate_detection(const Testbed& bed, const CheatPlan& plan,
                                   const DetectionConfig& cfg);

// ---------------------------------------------------------------------------
// Views
// ---------------------------------------------------------------------------

/// The vectors David receives in one session: the clear input at layer 1,
/// then one vector per later layer.
std::vector<FieldVector> david_inputs(const Transcript& david);

/// Ideal-world view built from the input, the output and David's parts only.
struct SimulatedView {
  const DavidParts* parts = nullptr;
  std::vector<FieldVector> inputs;  // inputs[0] is the clear layer-1 input
  FieldVector output;
};

SimulatedView simulate_view(std::span<const Residue> input,
                            std::span<const Residue> output,
                            const DavidParts& parts, Rng& rng);

/// Per-coordinate residue histograms of the masked messages (layers >= 2).
class ViewHistogram {
 public:
  ViewHistogram(Residue modulus, std::span<const std::size_t> dims);

  void add(std::span<const FieldVector> inputs);
  void merge(const ViewHistogram& other);
  std::uint64_t samples() const noexcept { return samples_; }
  Residue modulus() const noexcept { return modulus_; }
  std::size_t coordinates() const noexcept { return counts_.size(); }
  std::span<const std::uint64_t> coordinate(std::size_t c) const {
    return counts_.at(c);
  }

 private:
  Residue modulus_;
  std::vector<std::size_t> widths_;  // d_2 .. d_L
  std::vector<std::vector<std::uint64_t>> counts_;
  std::uint64_t samples_ = 0;
};

struct UniformityReport {
  std::vector<double> coordinate_p_values;
  double pooled_statistic = 0;
  double pooled_dof = 0;
  double pooled_p_value = 1;
  double min_p_value = 1;
  bool rejects(double alpha) const noexcept { return pooled_p_value < alpha; }
  nlohmann::json to_json() const;
};

/// Pooled Pearson test: the per-coordinate statistics and degrees of freedom
/// are summed.
UniformityReport uniformity(const ViewHistogram& h);

struct DistinguishReport {
  UniformityReport real;
  UniformityReport simulated;
  double tv_real_vs_sim = 0;  // mean over coordinates
  double tv_max_real_vs_sim = 0;
  double tv_null = 0;         // simulated vs an independent simulated sample
  double tv_band = 0;         // sqrt(p / 2N)
  std::uint64_t samples = 0;

  bool real_within_band() const noexcept { return tv_real_vs_sim <= tv_band; }
  bool null_within_band() const noexcept { return tv_null <= tv_band; }
  nlohmann::json to_json() const;
};

/// Requires equal sample counts and p <= 257.
DistinguishReport distinguish_views(const ViewHistogram& real,
                                    const ViewHistogram& simulated,
                                    const ViewHistogram& simulated_null);

inline constexpr Residue kMaxHistogramModulus = 257;

struct ViewExperiment {
  std::size_t sessions = 100000;
  std::uint64_t seed = 0;
  std::size_t threads = 0;
};

/// Runs `sessions` sessions of `mode` plus two simulated worlds and compares
/// the masked messages.
DistinguishReport view_experiment(const Testbed& bed, Mode mode,
                                  const ViewExperiment& cfg);

// ---------------------------------------------------------------------------
// Weight recovery from David's observations
// ---------------------------------------------------------------------------

/// What David saw around one layer: the vector he was sent for it and the
/// vector Charlie sent next (next layer input, or the final output).
struct Observation {
  FieldVector input;
  FieldVector output;
};

std::vector<Observation> layer_observations(std::span<const Transcript> david,
                                            std::uint32_t layer);

/// Solves output = W input over the field by Gaussian elimination. Throws
/// SingularSystemError when the inputs do not span.
FieldMatrix solve_layer(const PrimeField& field,
                        std::span<const Observation> observations);

struct RecoveryReport {
  std::uint32_t layer = 0;
  FieldMatrix weights;       // recovered W_i
  FieldMatrix charlie_part;  // W_i - W_i^D
  std::size_t held_out = 0;
  std::size_t held_out_mismatches = 0;
  bool exact_match = false;  // weights == truth
  nlohmann::json to_json() const;
};

RecoveryReport linear_recovery_attack(const PrimeField& field,
                                      std::span<const Transcript> training,
                                      std::span<const Transcript> held_out,
                                      std::uint32_t layer,
                                      const FieldMatrix& david_part,
                                      const FieldMatrix& truth);

struct RecoveryExperiment {
  std::uint32_t layer = 1;
  std::size_t queries = 0;  // 0: d_i
  std::size_t held_out = 16;
  std::uint64_t seed = 0;
  double input_scale = 4.0;
};

/// Collects David's transcripts from `mode` sessions and attacks one layer.
RecoveryReport recovery_experiment(const Testbed& bed, Mode mode,
                                   const RecoveryExperiment& cfg);

}  // namespace slip
