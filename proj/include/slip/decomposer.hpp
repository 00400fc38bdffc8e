#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "slip/field.hpp"
#include "slip/model.hpp"

namespace slip {

/// Thin SVD W = U diag(s) V^T with r = min(rows, cols).
struct SvdFactors {
  RealMatrix u;                // rows x r, orthonormal columns
  std::vector<double> values;  // non-increasing
  RealMatrix v;                // cols x r, orthonormal columns

  RealMatrix reconstruct() const;
  /// Sum of the first k components.
  RealMatrix truncated(std::size_t k) const;
};

inline constexpr double kDefaultSvdTolerance = 1e-10;
inline constexpr int kMaxJacobiSweeps = 100;

/// One-sided (Hestenes) Jacobi SVD. Sweeps until every column pair satisfies
/// |g_ij| <= tol * sqrt(g_ii g_jj); throws ConvergenceError after
/// kMaxJacobiSweeps.
SvdFactors jacobi_svd(const RealMatrix& w, double tol = kDefaultSvdTolerance);

struct LayerSplit {
  std::size_t svd_rank = 0;
  RealMatrix left;   // U_k, d_{i+1} x k
  RealMatrix right;  // Sigma_k V_k^T, k x d_i
  std::vector<double> singular_values;
  FieldMatrix charlie_field;  // quantize(left * right)
  FieldMatrix david_field;    // encode(W) - charlie_field
};

/// Additive per-layer split W_i = W_i^C + W_i^D, exact over Z_p.
struct Decomposition {
  FixedPointCodec codec;
  std::vector<Activation> activations;
  std::vector<LayerSplit> layers;

  std::size_t layer_count() const noexcept { return layers.size(); }
  std::vector<std::size_t> dims() const;
  std::vector<std::size_t> ranks() const;
};

Decomposition decompose(const MlpModel& model,
                        std::span<const std::size_t> ranks,
                        const FixedPointCodec& codec);

/// Expand a single rank to every layer, or validate a per-layer list.
std::vector<std::size_t> broadcast_ranks(std::span<const std::size_t> ranks,
                                         std::size_t layer_count);

struct LayerDiagnostics {
  std::size_t svd_rank = 0;
  double energy_fraction = 0;  // sum_{j<=k} s_j^2 / sum_j s_j^2
  double frobenius_ratio = 0;  // |W^D|_F / |W|_F, float parts
};

struct DiagnosticsReport {
  std::vector<LayerDiagnostics> layers;
  /// Mean squared output deviation of the David-only model (W^C zeroed)
  /// from the full model over a seeded evaluation set.
  double david_only_risk = 0;
  std::size_t eval_samples = 0;
};

DiagnosticsReport diagnostics(const Decomposition& d, const MlpModel& model,
                              std::uint64_t eval_seed = 0,
                              std::size_t eval_samples = 256);

/// Multiply-accumulate count of Charlie's online work divided by the cost of
/// running the whole model locally:
///
///   sum_i [ k_i (d_i + d_{i+1})          low-rank product
///         + (d_i + 2 d_{i+1})            mask, unmask, combine
///         + c (d_i + d_{i+1}) ]          c Freivalds rows
///   / sum_i d_i d_{i+1}
///
/// where c = check_count (0 when no integrity check runs).
double charlie_cost_ratio(std::span<const std::size_t> ranks,
                          std::span<const std::size_t> dims,
                          std::size_t check_count);
double charlie_cost_ratio(const Decomposition& d, std::size_t check_count);

enum class SplitRole { kCharlie, kDavid };

/// Sidecar JSON. Charlie's file carries both field matrices and the float
/// factors; David's carries only his residual part.
std::string decomposition_to_json(const Decomposition& d, SplitRole role);
void save_decomposition(const Decomposition& d, SplitRole role,
                        const std::filesystem::path& path);

/// The parts David holds: W_i^D plus session parameters.
struct DavidParts {
  PrimeField field;
  int frac_bits = FixedPointCodec::kDefaultFracBits;
  std::vector<std::size_t> dims;
  std::vector<FieldMatrix> weights;

  static DavidParts from(const Decomposition& d);
};

Decomposition load_charlie_decomposition(const std::filesystem::path& path);
DavidParts load_david_parts(const std::filesystem::path& path);
Decomposition charlie_decomposition_from_json(const std::string& text);
DavidParts david_parts_from_json(const std::string& text);

}  // namespace slip
