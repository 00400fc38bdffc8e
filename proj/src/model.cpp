#include "slip/model.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "slip/errors.hpp"
#include "slip/rng.hpp"

namespace slip {

using nlohmann::json;

RealMatrix::RealMatrix(std::size_t rows, std::size_t cols,
                       std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("matrix data has " + std::to_string(data_.size()) +
                         " entries, expected " + std::to_string(rows * cols));
  }
}

RealMatrix RealMatrix::transpose() const {
  RealMatrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

double RealMatrix::frobenius_norm() const {
  double s = 0;
  for (double v : data_) s += v * v;
  return std::sqrt(s);
}

RealMatrix operator*(const RealMatrix& a, const RealMatrix& b) {
  if (a.cols() != b.rows()) throw DimensionError("matrix product shapes");
  RealMatrix out(a.rows(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double v = a(r, k);
      for (std::size_t c = 0; c < b.cols(); ++c) out(r, c) += v * b(k, c);
    }
  return out;
}

RealMatrix operator-(const RealMatrix& a, const RealMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("matrix difference shapes");
  RealMatrix out = a;
  for (std::size_t i = 0; i < out.data().size(); ++i)
    out.data()[i] -= b.data()[i];
  return out;
}

std::vector<double> operator*(const RealMatrix& m, std::span<const double> x) {
  if (m.cols() != x.size()) {
    throw DimensionError("matrix has " + std::to_string(m.cols()) +
                         " columns, input has " + std::to_string(x.size()));
  }
  std::vector<double> y(m.rows(), 0.0);
  for (std::size_t r = 0; r < m.rows(); ++r) {
    double s = 0;
    for (std::size_t c = 0; c < m.cols(); ++c) s += m(r, c) * x[c];
    y[r] = s;
  }
  return y;
}

const char* activation_name(Activation a) {
  return a == Activation::kReLU ? "relu" : "identity";
}

Activation parse_activation(const std::string& tag) {
  if (tag == "relu") return Activation::kReLU;
  if (tag == "identity") return Activation::kIdentity;
  throw FormatError("unknown activation '" + tag + "'");
}

double apply(Activation a, double x) {
  return a == Activation::kReLU ? (x > 0 ? x : 0.0) : x;
}

Residue apply(Activation a, const PrimeField& field, Residue e) {
  if (a == Activation::kReLU && field.lift(e) < 0) return 0;
  return e;
}

MlpModel::MlpModel(std::vector<Layer> layers, double weight_bound)
    : layers_(std::move(layers)) {
  if (layers_.empty()) throw DimensionError("model has no layers");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& w = layers_[i].weights;
    if (w.rows() == 0 || w.cols() == 0) {
      throw DimensionError("layer " + std::to_string(i + 1) + " is empty");
    }
    if (i > 0 && w.cols() != layers_[i - 1].weights.rows()) {
      throw DimensionError("dimension chain broken at layer " +
                           std::to_string(i + 1) + ": expects input " +
                           std::to_string(w.cols()) + ", previous output is " +
                           std::to_string(layers_[i - 1].weights.rows()));
    }
    for (double v : w.data()) {
      if (!std::isfinite(v) || std::fabs(v) > weight_bound) {
        throw OverflowError("layer " + std::to_string(i + 1) + " weight " +
                            std::to_string(v) + " exceeds bound " +
                            std::to_string(weight_bound));
      }
    }
  }
}

std::vector<std::size_t> MlpModel::dims() const {
  std::vector<std::size_t> d{layers_.front().weights.cols()};
  for (const auto& l : layers_) d.push_back(l.weights.rows());
  return d;
}

std::size_t MlpModel::max_width() const {
  std::size_t m = 0;
  for (std::size_t d : dims()) m = std::max(m, d);
  return m;
}

std::vector<double> infer_float(const MlpModel& model,
                                std::span<const double> x) {
  std::vector<double> a(x.begin(), x.end());
  for (const auto& layer : model.layers()) {
    a = layer.weights * a;
    for (double& v : a) v = apply(layer.activation, v);
  }
  return a;
}

QuantizedModel::QuantizedModel(const MlpModel& model, FixedPointCodec codec)
    : codec_(std::move(codec)) {
  for (const auto& layer : model.layers()) {
    const auto& w = layer.weights;
    if (w.cols() > codec_.max_width()) {
      throw OverflowError("layer input width " + std::to_string(w.cols()) +
                          " exceeds codec max width " +
                          std::to_string(codec_.max_width()));
    }
    FieldMatrix q(w.rows(), w.cols());
    for (std::size_t i = 0; i < w.data().size(); ++i)
      q.data()[i] = codec_.encode(w.data()[i]);
    weights_.push_back(std::move(q));
    activations_.push_back(layer.activation);
  }
}

std::vector<std::size_t> QuantizedModel::dims() const {
  std::vector<std::size_t> d{weights_.front().cols()};
  for (const auto& w : weights_) d.push_back(w.rows());
  return d;
}

Residue finish_layer_value(const FixedPointCodec& codec, Activation act,
                           Residue pre_activation) {
  const Residue v =
      apply(act, codec.field(), codec.rescale_after_product(pre_activation));
  codec.check_in_bound(v);
  return v;
}

QuantizedTrace infer_quantized_field(const QuantizedModel& q,
                                     std::span<const Residue> a0) {
  QuantizedTrace trace;
  FieldVector a(a0.begin(), a0.end());
  for (std::size_t i = 0; i < q.layer_count(); ++i) {
    FieldVector y = matvec(q.codec().field(), q.weights(i), a);
    for (Residue& v : y) v = finish_layer_value(q.codec(), q.activation(i), v);
    trace.activations.push_back(y);
    a = std::move(y);
  }
  trace.output = q.codec().decode(a);
  return trace;
}

QuantizedTrace infer_quantized(const QuantizedModel& q,
                               std::span<const double> x) {
  const FieldVector a0 = q.codec().encode(x);
  return infer_quantized_field(q, a0);
}

MlpModel gen_random_model(std::uint64_t seed, std::span<const std::size_t> dims,
                          std::span<const Activation> activations) {
  if (dims.size() < 2) throw DimensionError("need at least two dimensions");
  if (activations.size() != dims.size() - 1) {
    throw DimensionError("need one activation per layer");
  }
  Rng rng = substream(seed, "model");
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  std::vector<Layer> layers;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    RealMatrix w(dims[i + 1], dims[i]);
    for (double& v : w.data()) v = dist(rng);
    layers.push_back({std::move(w), activations[i]});
  }
  return MlpModel(std::move(layers));
}

MlpModel gen_random_model(std::uint64_t seed, std::span<const std::size_t> dims,
                          Activation activation) {
  const std::vector<Activation> acts(dims.size() < 2 ? 0 : dims.size() - 1,
                                     activation);
  return gen_random_model(seed, dims, acts);
}

std::string format_double(double x) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s) {
  double v = 0;
  const char* end = s.data() + s.size();
  auto res = std::from_chars(s.data(), end, v);
  if (res.ec != std::errc() || res.ptr != end) {
    throw FormatError("not a decimal number: '" + s + "'");
  }
  return v;
}

std::string model_to_json(const MlpModel& model) {
  json j;
  j["version"] = 1;
  j["dims"] = model.dims();
  json acts = json::array();
  json weights = json::array();
  for (const auto& layer : model.layers()) {
    acts.push_back(activation_name(layer.activation));
    json w = json::array();
    for (double v : layer.weights.data()) w.push_back(format_double(v));
    weights.push_back(std::move(w));
  }
  j["activations"] = std::move(acts);
  j["weights"] = std::move(weights);
  return j.dump() + "\n";
}

MlpModel model_from_json(const std::string& text, double weight_bound) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("model file is not valid JSON: ") + e.what());
  }
  try {
    if (j.at("version").get<int>() != 1) {
      throw FormatError("unsupported model format version");
    }
    const auto dims = j.at("dims").get<std::vector<std::size_t>>();
    const auto acts = j.at("activations").get<std::vector<std::string>>();
    const auto& weights = j.at("weights");
    if (dims.size() < 2) throw DimensionError("model needs at least two dims");
    if (acts.size() != dims.size() - 1 || weights.size() != dims.size() - 1) {
      throw DimensionError(
          "dimension chain mismatch: activations/weights do not match dims");
    }
    std::vector<Layer> layers;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      const auto& w = weights.at(i);
      if (w.size() != dims[i] * dims[i + 1]) {
        throw DimensionError("dimension chain mismatch at layer " +
                             std::to_string(i + 1) + ": " +
                             std::to_string(w.size()) + " weights for " +
                             std::to_string(dims[i + 1]) + "x" +
                             std::to_string(dims[i]));
      }
      std::vector<double> data;
      data.reserve(w.size());
      for (const auto& v : w) data.push_back(parse_double(v.get<std::string>()));
      layers.push_back(
          {RealMatrix(dims[i + 1], dims[i], std::move(data)),
           parse_activation(acts[i])});
    }
    return MlpModel(std::move(layers), weight_bound);
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed model file: ") + e.what());
  }
}

void save_model(const MlpModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << model_to_json(model);
  if (!out) throw IoError("write failed for " + path.string());
}

MlpModel load_model(const std::filesystem::path& path, double weight_bound) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read model file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return model_from_json(ss.str(), weight_bound);
}

}  // namespace slip
