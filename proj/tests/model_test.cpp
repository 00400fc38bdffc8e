#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "slip/errors.hpp"
#include "slip/model.hpp"

using namespace slip;

TEST(Model, GeneratedModelsAreDeterministic) {
  const std::size_t dims[] = {4, 8, 2};
  EXPECT_EQ(gen_random_model(7, dims, Activation::kReLU),
            gen_random_model(7, dims, Activation::kReLU));
  EXPECT_NE(gen_random_model(7, dims, Activation::kReLU),
            gen_random_model(8, dims, Activation::kReLU));
}

TEST(Model, RejectsBrokenChains) {
  std::vector<Layer> layers{{RealMatrix(3, 4), Activation::kReLU},
                            {RealMatrix(2, 5), Activation::kIdentity}};
  EXPECT_THROW(MlpModel{layers}, DimensionError);
  EXPECT_THROW(MlpModel(std::vector<Layer>{}), DimensionError);
  RealMatrix big(1, 1, {1000.0});
  EXPECT_THROW(MlpModel({{big, Activation::kReLU}}), OverflowError);
}

TEST(Model, FloatInferenceByHand) {
  const MlpModel m({{RealMatrix(2, 2, {1, -2, 3, 4}), Activation::kReLU},
                    {RealMatrix(1, 2, {0.5, -1}), Activation::kIdentity}});
  const std::vector<double> x{1, 1};
  // relu([-1, 7]) = [0, 7]; [0.5 * 0 - 7] = -7
  EXPECT_EQ(infer_float(m, x), (std::vector<double>{-7}));
  EXPECT_THROW(infer_float(m, std::vector<double>{1}), DimensionError);
}

TEST(Model, QuantizedTracksFloatWithinBound) {
  const FixedPointCodec codec;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const std::size_t dims[] = {16, 32, 32, 8};
    const Activation acts[] = {Activation::kReLU, Activation::kIdentity,
                               Activation::kReLU};
    const MlpModel m = gen_random_model(seed, dims, acts);
    const QuantizedModel q(m, codec);
    std::vector<double> x(16);
    for (std::size_t i = 0; i < 16; ++i) x[i] = std::sin(double(seed * 16 + i));
    const auto fy = infer_float(m, x);
    const auto qy = infer_quantized(q, x).output;
    const double tol = 3 * 32 * std::ldexp(1.0, -14);
    for (std::size_t i = 0; i < fy.size(); ++i) ASSERT_NEAR(fy[i], qy[i], tol);
  }
}

TEST(Model, ReluActsOnCenteredLift) {
  const PrimeField f(101);
  EXPECT_EQ(apply(Activation::kReLU, f, 100), 0u);
  EXPECT_EQ(apply(Activation::kReLU, f, 50), 50u);
  EXPECT_EQ(apply(Activation::kIdentity, f, 100), 100u);
}

TEST(Model, JsonRoundTripIsExact) {
  const std::size_t dims[] = {5, 3, 4};
  const MlpModel m = gen_random_model(3, dims, Activation::kIdentity);
  EXPECT_EQ(model_from_json(model_to_json(m)), m);
  const auto path = std::filesystem::temp_directory_path() / "slip_model_rt.json";
  save_model(m, path);
  EXPECT_EQ(load_model(path), m);
  std::filesystem::remove(path);
}

TEST(Model, MalformedFilesAreReported) {
  EXPECT_THROW(model_from_json("{"), FormatError);
  EXPECT_THROW(model_from_json(R"({"version":1,"dims":[2,1],"activations":["relu"],"weights":[["1","x"]]})"),
               FormatError);
  EXPECT_THROW(model_from_json(R"({"version":1,"dims":[2,1],"activations":["tanh"],"weights":[["1","1"]]})"),
               FormatError);
  EXPECT_THROW(model_from_json(R"({"version":1,"dims":[2,1],"activations":["relu"],"weights":[["1"]]})"),
               DimensionError);
  EXPECT_THROW(load_model("/nonexistent/model.json"), IoError);
}

TEST(Model, FormatDoubleRoundTrips) {
  for (double x : {0.1, -1e-300, 1.0 / 3, 123456.789, -0.0}) {
    EXPECT_EQ(parse_double(format_double(x)), x);
  }
}
