#include <gtest/gtest.h>

#include <random>

#include "slip/errors.hpp"
#include "slip/protocol.hpp"
#include "slip/rng.hpp"
#include "slip/transport.hpp"

using namespace slip;

namespace {

struct Fixture {
  MlpModel model;
  Decomposition d;
  DavidParts parts;
  QuantizedModel oracle;

  Fixture(std::uint64_t seed, std::vector<std::size_t> dims,
          std::vector<Activation> acts, std::size_t rank,
          FixedPointCodec codec = FixedPointCodec{})
      : model(gen_random_model(seed, dims, acts)),
        d(decompose(model, std::vector<std::size_t>{rank}, codec)),
        parts(DavidParts::from(d)),
        oracle(model, codec) {}
};

std::vector<double> random_input(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> x(n);
  for (double& v : x) v = u(rng);
  return x;
}

/// Counts what Charlie sends, for checking that nothing left.
class CountingTransport : public Transport {
 public:
  explicit CountingTransport(const DavidParts& parts) : inner_(parts) {}
  void send(const Message& m) override {
    ++sent;
    inner_.send(m);
  }
  Message receive() override { return inner_.receive(); }
  int sent = 0;

 private:
  InProcTransport inner_;
};

}  // namespace

TEST(Protocol, AllModesMatchOracle) {
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t layers = 1 + rng() % 4;
    std::vector<std::size_t> dims;
    std::vector<Activation> acts;
    for (std::size_t i = 0; i <= layers; ++i) dims.push_back(1 + rng() % 24);
    for (std::size_t i = 0; i < layers; ++i)
      acts.push_back(rng() % 2 ? Activation::kReLU : Activation::kIdentity);
    const std::size_t min_dim = *std::min_element(dims.begin(), dims.end());
    Fixture fx(seed, dims, acts, rng() % (min_dim + 1));
    const auto x = random_input(dims.front(), seed);
    const QuantizedTrace truth = infer_quantized(fx.oracle, x);
    for (Mode mode : {Mode::kInsecure, Mode::kHonest, Mode::kMalicious}) {
      MaskSet masks = precompute_one(fx.d, mode, 2, seed, 0);
      InProcTransport channel(fx.parts);
      const SessionResult r = run_protocol(fx.d, mode, x, masks, channel);
      ASSERT_FALSE(r.outcome.aborted) << mode_name(mode);
      EXPECT_EQ(r.outcome.output, truth.field_output()) << mode_name(mode);
      EXPECT_EQ(r.activations, truth.activations);
      ASSERT_TRUE(r.david.has_value());
      EXPECT_EQ(r.david->outcome, r.outcome);
    }
  }
}

TEST(Protocol, FirstLayerInClearLaterLayersMasked) {
  Fixture fx(3, {6, 8, 8, 4}, {Activation::kReLU, Activation::kReLU, Activation::kIdentity}, 2);
  const auto x = random_input(6, 1);
  const FieldVector a0 = fx.d.codec.encode(x);
  const QuantizedTrace truth = infer_quantized(fx.oracle, x);
  for (Mode mode : {Mode::kInsecure, Mode::kHonest}) {
    MaskSet masks = precompute_one(fx.d, mode, 0, 5, 0);
    InProcTransport channel(fx.parts);
    const SessionResult r = run_protocol(fx.d, mode, x, masks, channel);
    std::vector<FieldVector> seen;
    for (const auto& [dir, msg] : r.david->entries)
      if (auto* in = std::get_if<LayerInput>(&msg)) seen.push_back(in->values);
    ASSERT_EQ(seen.size(), 3u);
    EXPECT_EQ(seen[0], a0);
    if (mode == Mode::kInsecure) {
      EXPECT_EQ(seen[1], truth.activations[0]);
      EXPECT_EQ(seen[2], truth.activations[1]);
    } else {
      EXPECT_NE(seen[1], truth.activations[0]);
      EXPECT_EQ(seen[1], add(fx.d.codec.field(), truth.activations[0], masks.layer(2).pad));
    }
  }
}

TEST(Protocol, MaskSetIsSingleUse) {
  Fixture fx(1, {4, 4, 2}, {Activation::kReLU, Activation::kIdentity}, 1);
  const auto x = random_input(4, 2);
  MaskSet masks = precompute_one(fx.d, Mode::kHonest, 0, 0, 0);
  {
    InProcTransport channel(fx.parts);
    run_protocol(fx.d, Mode::kHonest, x, masks, channel);
  }
  EXPECT_TRUE(masks.consumed());
  CountingTransport counting(fx.parts);
  EXPECT_THROW(run_protocol(fx.d, Mode::kHonest, x, masks, counting), MaskReuseError);
  EXPECT_EQ(counting.sent, 0);

  MaskSet moved = std::move(masks);
  EXPECT_THROW(CharlieState(fx.d, Mode::kHonest, moved, fx.d.codec.encode(x)),
               MaskReuseError);
}

TEST(Protocol, MaskShapeAndModeChecked) {
  Fixture fx(1, {4, 4, 2}, {Activation::kReLU, Activation::kIdentity}, 1);
  const FieldVector a0(4, 0);
  MaskSet honest = precompute_one(fx.d, Mode::kHonest, 0, 0, 0);
  EXPECT_THROW(CharlieState(fx.d, Mode::kMalicious, honest, a0), Error);
  EXPECT_FALSE(honest.consumed());
  EXPECT_THROW(precompute_one(fx.d, Mode::kMalicious, 0, 0, 0), Error);
  MaskSet ok = precompute_one(fx.d, Mode::kHonest, 0, 0, 1);
  EXPECT_THROW(CharlieState(fx.d, Mode::kHonest, ok, FieldVector(3, 0)), DimensionError);
  EXPECT_THROW(precompute(fx.d, Mode::kHonest, 0, 0, 0), Error);
}

TEST(Protocol, PrecomputeIsDeterministicAndFresh) {
  Fixture fx(2, {5, 6, 3}, {Activation::kReLU, Activation::kIdentity}, 1);
  const auto a = precompute(fx.d, Mode::kMalicious, 2, 3, 42);
  const auto b = precompute(fx.d, Mode::kMalicious, 2, 3, 42);
  ASSERT_EQ(a.size(), 3u);
  for (std::size_t n = 0; n < 3; ++n) {
    EXPECT_EQ(a[n].inference_id(), n);
    EXPECT_EQ(a[n].layer(2).pad, b[n].layer(2).pad);
    EXPECT_EQ(a[n].layer(1).check, b[n].layer(1).check);
    EXPECT_TRUE(a[n].layer(1).pad.empty());
    EXPECT_EQ(a[n].layer(2).cancel,
              matvec(fx.d.codec.field(), fx.d.layers[1].david_field, a[n].layer(2).pad));
    EXPECT_EQ(a[n].layer(1).verify,
              matmul(fx.d.codec.field(), a[n].layer(1).check, fx.d.layers[0].david_field));
  }
  EXPECT_NE(a[0].layer(2).pad, a[1].layer(2).pad);
}

TEST(Protocol, FreivaldsCatchesTamperedReply) {
  const PrimeField f;
  Rng rng = substream(1, "t");
  const FieldMatrix w = uniform_matrix(f, 6, 5, rng);
  const FieldMatrix z = uniform_matrix(f, 2, 6, rng);
  const FieldMatrix v = matmul(f, z, w);
  const FieldVector a = uniform_vector(f, 5, rng);
  FieldVector y = matvec(f, w, a);
  EXPECT_TRUE(freivalds_check(f, z, v, a, y));
  y[3] = f.add(y[3], 1);
  EXPECT_FALSE(freivalds_check(f, z, v, a, y));
  EXPECT_THROW(freivalds_check(f, z, v, a, FieldVector(5)), DimensionError);
}

TEST(Protocol, TamperedReplyAbortsBeforeUnmasking) {
  Fixture fx(4, {5, 6, 3}, {Activation::kReLU, Activation::kIdentity}, 1);
  const auto x = random_input(5, 3);
  MaskSet masks = precompute_one(fx.d, Mode::kMalicious, 1, 0, 0);
  InProcTransport channel(fx.parts, [](const DavidState& s, std::uint32_t layer,
                                       FieldVector y) {
    if (layer == 2) y[0] = s.parts().field.add(y[0], 5);
    return y;
  });
  const SessionResult r = run_protocol(fx.d, Mode::kMalicious, x, masks, channel);
  EXPECT_TRUE(r.outcome.aborted);
  EXPECT_TRUE(r.outcome.output.empty());
  EXPECT_EQ(r.activations.size(), 1u);
  EXPECT_EQ(std::get<Abort>(r.charlie.entries.back().second).layer, 2u);
  EXPECT_TRUE(r.david->outcome->aborted);
}

TEST(Protocol, StateMachinesRejectOutOfOrderMessages) {
  Fixture fx(5, {3, 3, 3}, {Activation::kReLU, Activation::kReLU}, 0);
  MaskSet masks = precompute_one(fx.d, Mode::kHonest, 0, 0, 0);
  CharlieState c(fx.d, Mode::kHonest, masks, FieldVector(3, 1));
  EXPECT_THROW(charlie_step(c, Message{LayerReply{1, FieldVector(3)}}), PhaseError);
  const auto first = charlie_step(c, std::nullopt);
  ASSERT_TRUE(first);
  EXPECT_THROW(charlie_step(c, std::nullopt), PhaseError);
  EXPECT_THROW(charlie_step(c, Message{LayerReply{2, FieldVector(3)}}), PhaseError);
  EXPECT_THROW(charlie_step(c, Message{LayerReply{1, FieldVector(2)}}), DimensionError);
  EXPECT_THROW(charlie_step(c, Message{LayerReply{1, FieldVector(3, 1ull << 62)}}),
               FormatError);

  DavidState d(fx.parts);
  EXPECT_THROW(david_step(d, Message{LayerInput{2, FieldVector(3)}}), PhaseError);
  EXPECT_THROW(david_step(d, Message{FinalOutput{2, FieldVector(3)}}), PhaseError);
  EXPECT_THROW(david_step(d, Message{LayerReply{1, FieldVector(3)}}), PhaseError);
  EXPECT_TRUE(david_step(d, *first).has_value());
  EXPECT_THROW(david_step(d, *first), PhaseError);
}
