#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "slip/field.hpp"

namespace slip {

/// Dense row-major real matrix.
class RealMatrix {
 public:
  RealMatrix() = default;
  RealMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
  RealMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }

  const std::vector<double>& data() const noexcept { return data_; }
  std::vector<double>& data() noexcept { return data_; }

  RealMatrix transpose() const;
  double frobenius_norm() const;

  bool operator==(const RealMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

RealMatrix operator*(const RealMatrix& a, const RealMatrix& b);
RealMatrix operator-(const RealMatrix& a, const RealMatrix& b);
std::vector<double> operator*(const RealMatrix& m, std::span<const double> x);

enum class Activation { kReLU, kIdentity };

const char* activation_name(Activation a);
Activation parse_activation(const std::string& tag);

double apply(Activation a, double x);
/// ReLU acts on the centered lift, so negative field values map to zero.
Residue apply(Activation a, const PrimeField& field, Residue e);

struct Layer {
  RealMatrix weights;  // d_{i+1} x d_i
  Activation activation = Activation::kReLU;

  bool operator==(const Layer&) const = default;
};

/// Float MLP without biases: a_i = sigma(W_i a_{i-1}).
class MlpModel {
 public:
  MlpModel() = default;
  /// Checks that dimensions chain and every |weight| <= weight_bound.
  explicit MlpModel(std::vector<Layer> layers,
                    double weight_bound = FixedPointCodec::kDefaultValueBound);

  std::size_t layer_count() const noexcept { return layers_.size(); }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  const Layer& layer(std::size_t i) const { return layers_.at(i); }
  /// d_1 .. d_{L+1}
  std::vector<std::size_t> dims() const;
  std::size_t input_width() const { return layers_.front().weights.cols(); }
  std::size_t max_width() const;

  bool operator==(const MlpModel&) const = default;

 private:
  std::vector<Layer> layers_;
};

std::vector<double> infer_float(const MlpModel& model,
                                std::span<const double> x);

/// Field-encoded twin of an MlpModel; its inference is the ground truth the
/// protocol is compared against.
class QuantizedModel {
 public:
  QuantizedModel(const MlpModel& model, FixedPointCodec codec);

  const FixedPointCodec& codec() const noexcept { return codec_; }
  std::size_t layer_count() const noexcept { return weights_.size(); }
  const FieldMatrix& weights(std::size_t i) const { return weights_.at(i); }
  Activation activation(std::size_t i) const { return activations_.at(i); }
  const std::vector<Activation>& activations() const noexcept {
    return activations_;
  }
  std::vector<std::size_t> dims() const;

 private:
  FixedPointCodec codec_;
  std::vector<FieldMatrix> weights_;
  std::vector<Activation> activations_;
};

struct QuantizedTrace {
  std::vector<FieldVector> activations;  // a_1 .. a_L
  std::vector<double> output;            // decode(a_L)

  const FieldVector& field_output() const { return activations.back(); }
};

/// One layer of the field oracle: sigma(rescale(W a)) with bound checks.
Residue finish_layer_value(const FixedPointCodec& codec, Activation act,
                           Residue pre_activation);

QuantizedTrace infer_quantized(const QuantizedModel& q,
                               std::span<const double> x);
/// Same, starting from an already encoded input a_0.
QuantizedTrace infer_quantized_field(const QuantizedModel& q,
                                     std::span<const Residue> a0);

MlpModel gen_random_model(std::uint64_t seed, std::span<const std::size_t> dims,
                          Activation activation);
MlpModel gen_random_model(std::uint64_t seed, std::span<const std::size_t> dims,
                          std::span<const Activation> activations);

void save_model(const MlpModel& model, const std::filesystem::path& path);
MlpModel load_model(const std::filesystem::path& path,
                    double weight_bound = FixedPointCodec::kDefaultValueBound);
std::string model_to_json(const MlpModel& model);
MlpModel model_from_json(const std::string& text,
                         double weight_bound = FixedPointCodec::kDefaultValueBound);

/// Shortest decimal string that parses back to the same double.
std::string format_double(double x);
double parse_double(const std::string& s);

}  // namespace slip
