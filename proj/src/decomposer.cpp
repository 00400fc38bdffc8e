#include "slip/decomposer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "slip/errors.hpp"
#include "slip/rng.hpp"

namespace slip {

using nlohmann::json;

RealMatrix SvdFactors::truncated(std::size_t k) const {
  k = std::min(k, values.size());
  RealMatrix out(u.rows(), v.rows());
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t r = 0; r < u.rows(); ++r) {
      const double ur = u(r, j) * values[j];
      for (std::size_t c = 0; c < v.rows(); ++c) out(r, c) += ur * v(c, j);
    }
  return out;
}

RealMatrix SvdFactors::reconstruct() const { return truncated(values.size()); }

namespace {

using Column = std::vector<double>;

double dot(const Column& a, const Column& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void rotate(Column& a, Column& b, double c, double s) {
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double x = a[k];
    const double y = b[k];
    a[k] = c * x - s * y;
    b[k] = s * x + c * y;
  }
}

// Unit vector orthogonal to every vector in `basis`.
Column complete_basis(const std::vector<Column>& basis, std::size_t dim) {
  for (std::size_t e = 0; e < dim; ++e) {
    Column v(dim, 0.0);
    v[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& q : basis) {
        const double proj = dot(v, q);
        for (std::size_t k = 0; k < dim; ++k) v[k] -= proj * q[k];
      }
    const double n = std::sqrt(dot(v, v));
    if (n > 0.5) {
      for (double& x : v) x /= n;
      return v;
    }
  }
  throw ConvergenceError("could not complete orthonormal basis");
}

// SVD for m >= n. Returns U (m x n), values, V (n x n).
SvdFactors jacobi_tall(const RealMatrix& a_in, double tol) {
  const std::size_t m = a_in.rows();
  const std::size_t n = a_in.cols();
  std::vector<Column> a(n, Column(m));
  std::vector<Column> v(n, Column(n, 0.0));
  double total = 0;
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t r = 0; r < m; ++r) {
      a[c][r] = a_in(r, c);
      total += a_in(r, c) * a_in(r, c);
    }
    v[c][c] = 1.0;
  }
  // Columns this small carry only rounding noise; they are completed below.
  const double negligible =
      std::pow(std::numeric_limits<double>::epsilon() * std::sqrt(total), 2);

  bool converged = false;
  for (int sweep = 0; sweep < kMaxJacobiSweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t i = 0; i + 1 < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double alpha = dot(a[i], a[i]);
        const double beta = dot(a[j], a[j]);
        if (alpha <= negligible || beta <= negligible) continue;
        const double gamma = dot(a[i], a[j]);
        if (std::fabs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        rotate(a[i], a[j], c, s);
        rotate(v[i], v[j], c, s);
      }
    }
  }
  if (!converged) {
    throw ConvergenceError("Jacobi SVD did not converge within " +
                           std::to_string(kMaxJacobiSweeps) + " sweeps");
  }

  std::vector<double> norms(n);
  for (std::size_t j = 0; j < n; ++j) norms[j] = std::sqrt(dot(a[j], a[j]));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return norms[x] > norms[y]; });

  SvdFactors f{RealMatrix(m, n), std::vector<double>(n), RealMatrix(n, n)};
  std::vector<Column> u_cols;
  std::vector<std::size_t> null_slots;
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t src = order[j];
    f.values[j] = norms[src];
    for (std::size_t r = 0; r < n; ++r) f.v(r, j) = v[src][r];
    if (norms[src] * norms[src] <= negligible || norms[src] == 0.0) {
      null_slots.push_back(j);
      continue;
    }
    Column col = a[src];
    for (double& x : col) x /= norms[src];
    u_cols.push_back(col);
    for (std::size_t r = 0; r < m; ++r) f.u(r, j) = col[r];
  }
  for (std::size_t j : null_slots) {
    Column col = complete_basis(u_cols, m);
    for (std::size_t r = 0; r < m; ++r) f.u(r, j) = col[r];
    u_cols.push_back(std::move(col));
  }
  return f;
}

}  // namespace

SvdFactors jacobi_svd(const RealMatrix& w, double tol) {
  if (!(tol > 0)) throw Error("SVD tolerance must be positive");
  if (w.rows() == 0 || w.cols() == 0) throw DimensionError("empty matrix");
  for (double x : w.data()) {
    if (!std::isfinite(x)) throw Error("SVD input has non-finite entries");
  }
  if (w.rows() >= w.cols()) return jacobi_tall(w, tol);
  SvdFactors t = jacobi_tall(w.transpose(), tol);
  return {std::move(t.v), std::move(t.values), std::move(t.u)};
}

std::vector<std::size_t> Decomposition::dims() const {
  std::vector<std::size_t> d{layers.front().david_field.cols()};
  for (const auto& l : layers) d.push_back(l.david_field.rows());
  return d;
}

std::vector<std::size_t> Decomposition::ranks() const {
  std::vector<std::size_t> r;
  for (const auto& l : layers) r.push_back(l.svd_rank);
  return r;
}

std::vector<std::size_t> broadcast_ranks(std::span<const std::size_t> ranks,
                                         std::size_t layer_count) {
  if (ranks.size() == 1) return std::vector<std::size_t>(layer_count, ranks[0]);
  if (ranks.size() != layer_count) {
    throw DimensionError("expected 1 or " + std::to_string(layer_count) +
                         " ranks, got " + std::to_string(ranks.size()));
  }
  return {ranks.begin(), ranks.end()};
}

Decomposition decompose(const MlpModel& model,
                        std::span<const std::size_t> ranks_in,
                        const FixedPointCodec& codec) {
  const auto ranks = broadcast_ranks(ranks_in, model.layer_count());
  Decomposition d{codec, {}, {}};
  const auto& field = codec.field();
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    const auto& layer = model.layer(i);
    const RealMatrix& w = layer.weights;
    const std::size_t k = ranks[i];
    const std::size_t max_rank = std::min(w.rows(), w.cols());
    if (k > max_rank) {
      throw DimensionError("layer " + std::to_string(i + 1) + ": rank " +
                           std::to_string(k) + " out of range [0, " +
                           std::to_string(max_rank) + "]");
    }
    if (w.cols() > codec.max_width()) {
      throw OverflowError("layer input width exceeds codec max width");
    }
    const SvdFactors svd = jacobi_svd(w);
    LayerSplit split;
    split.svd_rank = k;
    split.singular_values = svd.values;
    split.left = RealMatrix(w.rows(), k);
    split.right = RealMatrix(k, w.cols());
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t r = 0; r < w.rows(); ++r) split.left(r, j) = svd.u(r, j);
      for (std::size_t c = 0; c < w.cols(); ++c)
        split.right(j, c) = svd.values[j] * svd.v(c, j);
    }
    const RealMatrix wc = split.left * split.right;
    split.charlie_field = FieldMatrix(w.rows(), w.cols());
    split.david_field = FieldMatrix(w.rows(), w.cols());
    for (std::size_t e = 0; e < w.data().size(); ++e) {
      const Residue full = codec.encode(w.data()[e]);
      const Residue mine = codec.quantize(wc.data()[e]);
      split.charlie_field.data()[e] = mine;
      split.david_field.data()[e] = field.sub(full, mine);
    }
    d.activations.push_back(layer.activation);
    d.layers.push_back(std::move(split));
  }
  return d;
}

DiagnosticsReport diagnostics(const Decomposition& d, const MlpModel& model,
                              std::uint64_t eval_seed,
                              std::size_t eval_samples) {
  if (d.layer_count() != model.layer_count() || d.dims() != model.dims()) {
    throw DimensionError("decomposition does not match model");
  }
  DiagnosticsReport report;
  std::vector<Layer> david_layers;
  for (std::size_t i = 0; i < d.layer_count(); ++i) {
    const auto& split = d.layers[i];
    const auto& w = model.layer(i).weights;
    LayerDiagnostics ld;
    ld.svd_rank = split.svd_rank;
    double top = 0;
    double all = 0;
    for (std::size_t j = 0; j < split.singular_values.size(); ++j) {
      const double s2 = split.singular_values[j] * split.singular_values[j];
      all += s2;
      if (j < split.svd_rank) top += s2;
    }
    ld.energy_fraction = all > 0 ? top / all : 0.0;
    const RealMatrix wd = w - split.left * split.right;
    const double wn = w.frobenius_norm();
    ld.frobenius_ratio = wn > 0 ? wd.frobenius_norm() / wn : 0.0;
    report.layers.push_back(ld);
    david_layers.push_back({wd, model.layer(i).activation});
  }
  const MlpModel david_only(std::move(david_layers),
                            std::numeric_limits<double>::infinity());
  Rng rng = substream(eval_seed, "diagnostics-eval");
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  double sq = 0;
  std::size_t count = 0;
  for (std::size_t s = 0; s < eval_samples; ++s) {
    std::vector<double> x(model.input_width());
    for (double& v : x) v = dist(rng);
    const auto full = infer_float(model, x);
    const auto partial = infer_float(david_only, x);
    for (std::size_t j = 0; j < full.size(); ++j) {
      sq += (full[j] - partial[j]) * (full[j] - partial[j]);
      ++count;
    }
  }
  report.david_only_risk = count ? sq / static_cast<double>(count) : 0.0;
  report.eval_samples = eval_samples;
  return report;
}

double charlie_cost_ratio(std::span<const std::size_t> ranks,
                          std::span<const std::size_t> dims,
                          std::size_t check_count) {
  if (dims.size() < 2) throw DimensionError("need at least two dims");
  const auto k = broadcast_ranks(ranks, dims.size() - 1);
  double num = 0;
  double den = 0;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const double in = static_cast<double>(dims[i]);
    const double out = static_cast<double>(dims[i + 1]);
    num += static_cast<double>(k[i]) * (in + out);
    num += in + 2.0 * out;
    num += static_cast<double>(check_count) * (in + out);
    den += in * out;
  }
  return num / den;
}

double charlie_cost_ratio(const Decomposition& d, std::size_t check_count) {
  return charlie_cost_ratio(d.ranks(), d.dims(), check_count);
}

namespace {

json residues_to_json(const FieldMatrix& m) {
  json a = json::array();
  for (Residue e : m.data()) a.push_back(std::to_string(e));
  return a;
}

json reals_to_json(const std::vector<double>& v) {
  json a = json::array();
  for (double x : v) a.push_back(format_double(x));
  return a;
}

Residue parse_residue(const json& j) {
  const std::string s = j.get<std::string>();
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw FormatError("not a decimal residue: '" + s + "'");
  }
  try {
    return std::stoull(s);
  } catch (const std::exception&) {
    throw FormatError("residue out of range: '" + s + "'");
  }
}

FieldMatrix residues_from_json(const json& j, const PrimeField& field,
                               std::size_t rows, std::size_t cols) {
  if (j.size() != rows * cols) {
    throw DimensionError("field matrix has " + std::to_string(j.size()) +
                         " entries, expected " + std::to_string(rows * cols));
  }
  std::vector<Residue> data;
  data.reserve(j.size());
  for (const auto& e : j) data.push_back(parse_residue(e));
  require_residues(field, data, "field matrix");
  return {rows, cols, std::move(data)};
}

std::vector<double> reals_from_json(const json& j) {
  std::vector<double> v;
  for (const auto& e : j) v.push_back(parse_double(e.get<std::string>()));
  return v;
}

json parse_or_throw(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("decomposition file is not valid JSON: ") +
                      e.what());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string decomposition_to_json(const Decomposition& d, SplitRole role) {
  const auto& codec = d.codec;
  json j;
  j["version"] = 1;
  j["role"] = role == SplitRole::kCharlie ? "charlie" : "david";
  j["modulus"] = std::to_string(codec.field().modulus());
  j["fraction_bits"] = codec.frac_bits();
  j["dims"] = d.dims();
  json layers = json::array();
  for (const auto& l : d.layers) {
    json lj;
    lj["svd_rank"] = l.svd_rank;
    lj["david_field"] = residues_to_json(l.david_field);
    if (role == SplitRole::kCharlie) {
      lj["charlie_field"] = residues_to_json(l.charlie_field);
      lj["left"] = reals_to_json(l.left.data());
      lj["right"] = reals_to_json(l.right.data());
      lj["singular_values"] = reals_to_json(l.singular_values);
    }
    layers.push_back(std::move(lj));
  }
  j["layers"] = std::move(layers);
  if (role == SplitRole::kCharlie) {
    j["value_bound"] = format_double(codec.value_bound());
    j["max_width"] = codec.max_width();
    j["policy"] = codec.policy() == BudgetPolicy::kEnforce ? "enforce" : "wrap";
    json acts = json::array();
    for (auto a : d.activations) acts.push_back(activation_name(a));
    j["activations"] = std::move(acts);
  }
  return j.dump() + "\n";
}

void save_decomposition(const Decomposition& d, SplitRole role,
                        const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << decomposition_to_json(d, role);
  if (!out) throw IoError("write failed for " + path.string());
}

DavidParts DavidParts::from(const Decomposition& d) {
  DavidParts parts{d.codec.field(), d.codec.frac_bits(), d.dims(), {}};
  for (const auto& l : d.layers) parts.weights.push_back(l.david_field);
  return parts;
}

namespace {

struct Header {
  PrimeField field;
  int frac_bits;
  std::vector<std::size_t> dims;
};

Header parse_header(const json& j, const char* role) {
  if (j.at("version").get<int>() != 1) {
    throw FormatError("unsupported decomposition format version");
  }
  if (j.at("role").get<std::string>() != role) {
    throw FormatError(std::string("expected a ") + role + " decomposition file");
  }
  Header h{PrimeField(parse_residue(j.at("modulus"))),
           j.at("fraction_bits").get<int>(),
           j.at("dims").get<std::vector<std::size_t>>()};
  if (h.dims.size() < 2 || j.at("layers").size() != h.dims.size() - 1) {
    throw DimensionError("decomposition layers do not match dims");
  }
  return h;
}

}  // namespace

Decomposition charlie_decomposition_from_json(const std::string& text) {
  const json j = parse_or_throw(text);
  try {
    const Header h = parse_header(j, "charlie");
    const auto policy = j.at("policy").get<std::string>() == "wrap"
                            ? BudgetPolicy::kWrap
                            : BudgetPolicy::kEnforce;
    FixedPointCodec codec(h.field, h.frac_bits,
                          parse_double(j.at("value_bound").get<std::string>()),
                          j.at("max_width").get<std::size_t>(), policy);
    Decomposition d{codec, {}, {}};
    const auto acts = j.at("activations").get<std::vector<std::string>>();
    if (acts.size() + 1 != h.dims.size()) {
      throw DimensionError("one activation per layer required");
    }
    for (std::size_t i = 0; i + 1 < h.dims.size(); ++i) {
      const auto& lj = j.at("layers").at(i);
      const std::size_t rows = h.dims[i + 1];
      const std::size_t cols = h.dims[i];
      LayerSplit s;
      s.svd_rank = lj.at("svd_rank").get<std::size_t>();
      s.david_field = residues_from_json(lj.at("david_field"), h.field, rows, cols);
      s.charlie_field =
          residues_from_json(lj.at("charlie_field"), h.field, rows, cols);
      s.left = RealMatrix(rows, s.svd_rank, reals_from_json(lj.at("left")));
      s.right = RealMatrix(s.svd_rank, cols, reals_from_json(lj.at("right")));
      s.singular_values = reals_from_json(lj.at("singular_values"));
      d.activations.push_back(parse_activation(acts[i]));
      d.layers.push_back(std::move(s));
    }
    return d;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed decomposition file: ") + e.what());
  }
}

DavidParts david_parts_from_json(const std::string& text) {
  const json j = parse_or_throw(text);
  try {
    const Header h = parse_header(j, "david");
    DavidParts parts{h.field, h.frac_bits, h.dims, {}};
    for (std::size_t i = 0; i + 1 < h.dims.size(); ++i) {
      parts.weights.push_back(residues_from_json(
          j.at("layers").at(i).at("david_field"), h.field, h.dims[i + 1],
          h.dims[i]));
    }
    return parts;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed decomposition file: ") + e.what());
  }
}

Decomposition load_charlie_decomposition(const std::filesystem::path& path) {
  return charlie_decomposition_from_json(read_file(path));
}

DavidParts load_david_parts(const std::filesystem::path& path) {
  return david_parts_from_json(read_file(path));
}

}  // namespace slip
