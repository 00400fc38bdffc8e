#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <span>
#include <utility>
#include <variant>
#include <vector>

#include "slip/decomposer.hpp"
#include "slip/field.hpp"

namespace slip {

enum class Mode : std::uint8_t { kInsecure = 0, kHonest = 1, kMalicious = 2 };

const char* mode_name(Mode m);
Mode parse_mode(const std::string& name);

/// Offline material for one layer i (1-based), as used at online step i.
struct LayerMasks {
  FieldVector pad;     // r_{i-1}, length d_i; empty when layer 1 or insecure
  FieldVector cancel;  // c_i = W_i^D r_{i-1}, length d_{i+1}
  FieldMatrix check;   // Z_{i-1}, check_count x d_{i+1}; malicious only
  FieldMatrix verify;  // V_{i-1} = Z_{i-1} W_i^D, check_count x d_i
};

/// One-time pads and Freivalds matrices bound to a single inference.
/// Move-only; consume() succeeds exactly once.
class MaskSet {
 public:
  MaskSet(std::uint64_t inference_id, Mode mode, std::size_t check_count,
          std::vector<LayerMasks> layers);
  MaskSet(const MaskSet&) = delete;
  MaskSet& operator=(const MaskSet&) = delete;
  MaskSet(MaskSet&&) noexcept = default;
  MaskSet& operator=(MaskSet&&) noexcept = default;

  std::uint64_t inference_id() const noexcept { return inference_id_; }
  Mode mode() const noexcept { return mode_; }
  std::size_t check_count() const noexcept { return check_count_; }
  std::size_t layer_count() const noexcept { return layers_.size(); }
  /// i is 1-based.
  const LayerMasks& layer(std::size_t i) const { return layers_.at(i - 1); }

  bool consumed() const noexcept { return consumed_; }
  /// Throws MaskReuseError if this set was already used.
  void consume();

 private:
  std::uint64_t inference_id_;
  Mode mode_;
  std::size_t check_count_;
  std::vector<LayerMasks> layers_;
  bool consumed_ = false;
};

/// Offline phase for one inference, drawing from the (seed, index) substreams.
MaskSet precompute_one(const Decomposition& d, Mode mode,
                       std::size_t check_count, std::uint64_t seed,
                       std::uint64_t index);
std::vector<MaskSet> precompute(const Decomposition& d, Mode mode,
                                std::size_t check_count,
                                std::size_t n_inferences, std::uint64_t seed);

struct LayerInput {
  std::uint32_t layer = 0;
  FieldVector values;
  bool operator==(const LayerInput&) const = default;
};
struct LayerReply {
  std::uint32_t layer = 0;
  FieldVector values;
  bool operator==(const LayerReply&) const = default;
};
struct FinalOutput {
  std::uint32_t layer = 0;
  FieldVector values;  // a_L in the field; decode with the session codec
  bool operator==(const FinalOutput&) const = default;
};
struct Abort {
  std::uint32_t layer = 0;
  bool operator==(const Abort&) const = default;
};

using Message = std::variant<LayerInput, LayerReply, FinalOutput, Abort>;

const char* message_name(const Message& m);

enum class Direction : std::uint8_t { kCharlieToDavid, kDavidToCharlie };

struct Outcome {
  bool aborted = false;
  FieldVector output;  // empty when aborted
  bool operator==(const Outcome&) const = default;
};

struct Transcript {
  std::vector<std::pair<Direction, Message>> entries;
  std::optional<Outcome> outcome;
  bool operator==(const Transcript&) const = default;
};

/// Z y == V a, row by row.
bool freivalds_check(const PrimeField& field, const FieldMatrix& check,
                     const FieldMatrix& verify, std::span<const Residue> input,
                     std::span<const Residue> reply);

class CharlieState {
 public:
  enum class Phase { kStart, kAwaitReply, kDone };

  /// Validates the masks against the decomposition and consumes them, so a
  /// reused MaskSet fails here before any message exists.
  CharlieState(const Decomposition& d, Mode mode, MaskSet& masks,
               FieldVector input);

  Phase phase() const noexcept { return phase_; }
  Mode mode() const noexcept { return mode_; }
  std::uint32_t layer() const noexcept { return layer_; }
  const Transcript& transcript() const noexcept { return transcript_; }
  /// a_1 .. a_i computed so far.
  const std::vector<FieldVector>& activations() const noexcept {
    return activations_;
  }

 private:
  friend std::optional<Message> charlie_step(CharlieState&,
                                             const std::optional<Message>&);
  Message emit_layer_input();
  Message finish_layer(const LayerReply& reply);

  const Decomposition* d_;
  Mode mode_;
  MaskSet* masks_;
  Phase phase_ = Phase::kStart;
  std::uint32_t layer_ = 0;
  FieldVector current_;   // a_{i-1}
  FieldVector sent_;      // the vector David received for this layer
  FieldVector local_;     // a_i^C
  std::vector<FieldVector> activations_;
  Transcript transcript_;
};

/// Start with no incoming message; afterwards feed each LayerReply. Returns
/// the next outgoing message, or nothing once the session has ended.
std::optional<Message> charlie_step(CharlieState& state,
                                    const std::optional<Message>& incoming);

class DavidState {
 public:
  /// May replace the honest reply; used by adversarial Davids. Receives the
  /// state (including the transcript so far), the layer, and the honest reply.
  using ReplyHook = std::function<FieldVector(const DavidState&, std::uint32_t,
                                              FieldVector)>;

  explicit DavidState(const DavidParts& parts, ReplyHook hook = {});

  const DavidParts& parts() const noexcept { return *parts_; }
  const Transcript& transcript() const noexcept { return transcript_; }
  bool done() const noexcept { return transcript_.outcome.has_value(); }
  std::uint32_t next_layer() const noexcept { return next_layer_; }

 private:
  friend std::optional<Message> david_step(DavidState&, const Message&);

  const DavidParts* parts_;
  ReplyHook hook_;
  std::uint32_t next_layer_ = 1;
  Transcript transcript_;
};

/// Replies to LayerInput with W_i^D times the received vector; records
/// FinalOutput or Abort and returns nothing for them.
std::optional<Message> david_step(DavidState& state, const Message& incoming);

/// Charlie's view of the channel to David.
class Transport {
 public:
  virtual ~Transport() = default;
  /// Both throw SessionError on delivery failure.
  virtual void send(const Message& m) = 0;
  virtual Message receive() = 0;
  /// David's transcript, when the transport can observe it.
  virtual std::optional<Transcript> peer_transcript() const {
    return std::nullopt;
  }
};

struct SessionResult {
  Outcome outcome;
  Transcript charlie;
  std::optional<Transcript> david;
  std::vector<FieldVector> activations;  // Charlie's a_1 .. a_L
};

SessionResult run_protocol(const Decomposition& d, Mode mode,
                           std::span<const Residue> input, MaskSet& masks,
                           Transport& transport);
/// Encodes x with the decomposition's codec first.
SessionResult run_protocol(const Decomposition& d, Mode mode,
                           std::span<const double> x, MaskSet& masks,
                           Transport& transport);

}  // namespace slip
