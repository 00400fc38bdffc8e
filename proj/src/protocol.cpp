#include "slip/protocol.hpp"

#include <string>

#include "slip/errors.hpp"
#include "slip/rng.hpp"

namespace slip {

const char* mode_name(Mode m) {
  switch (m) {
    case Mode::kInsecure:
      return "insecure";
    case Mode::kHonest:
      return "honest";
    case Mode::kMalicious:
      return "malicious";
  }
  return "?";
}

Mode parse_mode(const std::string& name) {
  if (name == "insecure") return Mode::kInsecure;
  if (name == "honest") return Mode::kHonest;
  if (name == "malicious") return Mode::kMalicious;
  throw Error("unknown mode '" + name + "'");
}

const char* message_name(const Message& m) {
  static constexpr const char* kNames[] = {"LayerInput", "LayerReply",
                                           "FinalOutput", "Abort"};
  return kNames[m.index()];
}

MaskSet::MaskSet(std::uint64_t inference_id, Mode mode,
                 std::size_t check_count, std::vector<LayerMasks> layers)
    : inference_id_(inference_id),
      mode_(mode),
      check_count_(check_count),
      layers_(std::move(layers)) {}

void MaskSet::consume() {
  if (consumed_) {
    throw MaskReuseError("mask set for inference " +
                         std::to_string(inference_id_) + " was already used");
  }
  consumed_ = true;
}

MaskSet precompute_one(const Decomposition& d, Mode mode,
                       std::size_t check_count, std::uint64_t seed,
                       std::uint64_t index) {
  if (mode == Mode::kMalicious && check_count == 0) {
    throw Error("malicious mode needs check_count >= 1");
  }
  if (mode != Mode::kMalicious) check_count = 0;
  const PrimeField& field = d.codec.field();
  Rng pads = substream(seed, "masks", index);
  Rng checks = substream(seed, "freivalds", index);
  std::vector<LayerMasks> layers(d.layer_count());
  for (std::size_t i = 1; i <= d.layer_count(); ++i) {
    const FieldMatrix& wd = d.layers[i - 1].david_field;
    LayerMasks& lm = layers[i - 1];
    // Layer 1 input is public, so it needs no pad.
    if (mode != Mode::kInsecure && i >= 2) {
      lm.pad = uniform_vector(field, wd.cols(), pads);
      lm.cancel = matvec(field, wd, lm.pad);
    }
    if (mode == Mode::kMalicious) {
      lm.check = uniform_matrix(field, check_count, wd.rows(), checks);
      lm.verify = matmul(field, lm.check, wd);
    }
  }
  return MaskSet(index, mode, check_count, std::move(layers));
}

std::vector<MaskSet> precompute(const Decomposition& d, Mode mode,
                                std::size_t check_count,
                                std::size_t n_inferences, std::uint64_t seed) {
  if (n_inferences == 0) throw Error("n_inferences must be at least 1");
  std::vector<MaskSet> out;
  out.reserve(n_inferences);
  for (std::size_t n = 0; n < n_inferences; ++n)
    out.push_back(precompute_one(d, mode, check_count, seed, n));
  return out;
}

bool freivalds_check(const PrimeField& field, const FieldMatrix& check,
                     const FieldMatrix& verify, std::span<const Residue> input,
                     std::span<const Residue> reply) {
  if (check.rows() != verify.rows() || check.cols() != reply.size() ||
      verify.cols() != input.size()) {
    throw DimensionError("freivalds_check: shape mismatch");
  }
  for (std::size_t r = 0; r < check.rows(); ++r) {
    if (field.dot(check.row(r), reply) != field.dot(verify.row(r), input))
      return false;
  }
  return true;
}

namespace {

void require_length(std::span<const Residue> v, std::size_t n,
                    const char* what, std::uint32_t layer) {
  if (v.size() != n) {
    throw DimensionError(std::string(what) + " for layer " +
                         std::to_string(layer) + " has length " +
                         std::to_string(v.size()) + ", expected " +
                         std::to_string(n));
  }
}

void validate_masks(const Decomposition& d, Mode mode, const MaskSet& masks) {
  if (masks.mode() != mode) {
    throw Error(std::string("mask set was precomputed for ") +
                mode_name(masks.mode()) + " mode, session is " +
                mode_name(mode));
  }
  if (masks.layer_count() != d.layer_count()) {
    throw DimensionError("mask set layer count does not match decomposition");
  }
  for (std::size_t i = 1; i <= d.layer_count(); ++i) {
    const auto& wd = d.layers[i - 1].david_field;
    const auto& lm = masks.layer(i);
    const bool padded = mode != Mode::kInsecure && i >= 2;
    if (lm.pad.size() != (padded ? wd.cols() : 0) ||
        lm.cancel.size() != (padded ? wd.rows() : 0)) {
      throw DimensionError("mask shapes do not match layer " +
                           std::to_string(i));
    }
    if (mode == Mode::kMalicious &&
        (lm.check.rows() == 0 || lm.check.cols() != wd.rows() ||
         lm.verify.rows() != lm.check.rows() || lm.verify.cols() != wd.cols())) {
      throw DimensionError("check matrix shapes do not match layer " +
                           std::to_string(i));
    }
  }
}

}  // namespace

CharlieState::CharlieState(const Decomposition& d, Mode mode, MaskSet& masks,
                           FieldVector input)
    : d_(&d), mode_(mode), masks_(&masks), current_(std::move(input)) {
  if (d.layer_count() == 0) throw DimensionError("empty decomposition");
  require_length(current_, d.layers.front().david_field.cols(), "input", 1);
  require_residues(d.codec.field(), current_, "input");
  validate_masks(d, mode, masks);
  masks.consume();
}

Message CharlieState::emit_layer_input() {
  const PrimeField& field = d_->codec.field();
  const auto& split = d_->layers[layer_ - 1];
  local_ = matvec(field, split.charlie_field, current_);
  const auto& lm = masks_->layer(layer_);
  sent_ = lm.pad.empty() ? current_ : add(field, current_, lm.pad);
  phase_ = Phase::kAwaitReply;
  return LayerInput{layer_, sent_};
}

Message CharlieState::finish_layer(const LayerReply& reply) {
  const PrimeField& field = d_->codec.field();
  const auto& lm = masks_->layer(layer_);
  if (mode_ == Mode::kMalicious &&
      !freivalds_check(field, lm.check, lm.verify, sent_, reply.values)) {
    phase_ = Phase::kDone;
    transcript_.outcome = Outcome{true, {}};
    return Abort{layer_};
  }
  const FieldVector david_part =
      lm.cancel.empty() ? reply.values : sub(field, reply.values, lm.cancel);
  FieldVector next = add(field, local_, david_part);
  const Activation act = d_->activations[layer_ - 1];
  for (Residue& v : next) v = finish_layer_value(d_->codec, act, v);
  activations_.push_back(next);
  current_ = std::move(next);
  if (layer_ < d_->layer_count()) {
    ++layer_;
    return emit_layer_input();
  }
  phase_ = Phase::kDone;
  transcript_.outcome = Outcome{false, current_};
  return FinalOutput{layer_, current_};
}

std::optional<Message> charlie_step(CharlieState& state,
                                    const std::optional<Message>& incoming) {
  using Phase = CharlieState::Phase;
  Message out;
  switch (state.phase_) {
    case Phase::kStart:
      if (incoming) throw PhaseError("Charlie speaks first");
      state.layer_ = 1;
      out = state.emit_layer_input();
      break;
    case Phase::kAwaitReply: {
      if (!incoming) throw PhaseError("Charlie is waiting for a reply");
      const auto* reply = std::get_if<LayerReply>(&*incoming);
      if (!reply) {
        throw PhaseError(std::string("Charlie expected LayerReply, got ") +
                         message_name(*incoming));
      }
      if (reply->layer != state.layer_) {
        throw PhaseError("reply for layer " + std::to_string(reply->layer) +
                         " while Charlie is at layer " +
                         std::to_string(state.layer_));
      }
      const auto& wd = state.d_->layers[state.layer_ - 1].david_field;
      require_length(reply->values, wd.rows(), "reply", reply->layer);
      require_residues(state.d_->codec.field(), reply->values, "reply");
      state.transcript_.entries.emplace_back(Direction::kDavidToCharlie,
                                             *incoming);
      out = state.finish_layer(*reply);
      break;
    }
    case Phase::kDone:
      if (incoming) throw PhaseError("session already finished");
      return std::nullopt;
  }
  state.transcript_.entries.emplace_back(Direction::kCharlieToDavid, out);
  return out;
}

DavidState::DavidState(const DavidParts& parts, ReplyHook hook)
    : parts_(&parts), hook_(std::move(hook)) {}

std::optional<Message> david_step(DavidState& state, const Message& incoming) {
  if (state.done()) throw PhaseError("David's session already finished");
  const DavidParts& parts = *state.parts_;
  const std::uint32_t layers = static_cast<std::uint32_t>(parts.weights.size());
  if (const auto* in = std::get_if<LayerInput>(&incoming)) {
    if (in->layer != state.next_layer_ || in->layer > layers) {
      throw PhaseError("unexpected LayerInput for layer " +
                       std::to_string(in->layer) + ", David expects " +
                       std::to_string(state.next_layer_));
    }
    const FieldMatrix& wd = parts.weights[in->layer - 1];
    require_length(in->values, wd.cols(), "input", in->layer);
    require_residues(parts.field, in->values, "input");
    state.transcript_.entries.emplace_back(Direction::kCharlieToDavid, incoming);
    FieldVector y = matvec(parts.field, wd, in->values);
    if (state.hook_) {
      y = state.hook_(state, in->layer, std::move(y));
      require_length(y, wd.rows(), "tampered reply", in->layer);
    }
    Message reply = LayerReply{in->layer, std::move(y)};
    state.transcript_.entries.emplace_back(Direction::kDavidToCharlie, reply);
    ++state.next_layer_;
    return reply;
  }
  if (const auto* fin = std::get_if<FinalOutput>(&incoming)) {
    if (fin->layer != layers || state.next_layer_ != layers + 1) {
      throw PhaseError("FinalOutput before the last layer finished");
    }
    require_length(fin->values, parts.dims.back(), "output", fin->layer);
    require_residues(parts.field, fin->values, "output");
    state.transcript_.entries.emplace_back(Direction::kCharlieToDavid, incoming);
    state.transcript_.outcome = Outcome{false, fin->values};
    return std::nullopt;
  }
  if (std::holds_alternative<Abort>(incoming)) {
    state.transcript_.entries.emplace_back(Direction::kCharlieToDavid, incoming);
    state.transcript_.outcome = Outcome{true, {}};
    return std::nullopt;
  }
  throw PhaseError(std::string("David cannot accept ") +
                   message_name(incoming));
}

SessionResult run_protocol(const Decomposition& d, Mode mode,
                           std::span<const Residue> input, MaskSet& masks,
                           Transport& transport) {
  CharlieState charlie(d, mode, masks, FieldVector(input.begin(), input.end()));
  std::optional<Message> out = charlie_step(charlie, std::nullopt);
  while (out) {
    transport.send(*out);
    if (charlie.phase() == CharlieState::Phase::kDone) break;
    out = charlie_step(charlie, transport.receive());
  }
  return {*charlie.transcript().outcome, charlie.transcript(),
          transport.peer_transcript(), charlie.activations()};
}

SessionResult run_protocol(const Decomposition& d, Mode mode,
                           std::span<const double> x, MaskSet& masks,
                           Transport& transport) {
  const FieldVector a0 = d.codec.encode(x);
  return run_protocol(d, mode, a0, masks, transport);
}

}  // namespace slip
