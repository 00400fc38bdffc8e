#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace slip {

using Residue = std::uint64_t;
using FieldVector = std::vector<Residue>;

/// Z_p for an odd prime p < 2^63. Elements are plain residues in [0, p).
class PrimeField {
 public:
  static constexpr Residue kMersenne61 = (Residue{1} << 61) - 1;

  explicit PrimeField(Residue modulus = kMersenne61);

  Residue modulus() const noexcept { return p_; }
  bool contains(Residue e) const noexcept { return e < p_; }

  Residue add(Residue a, Residue b) const noexcept {
    Residue s = a + b;
    return s >= p_ ? s - p_ : s;
  }
  Residue sub(Residue a, Residue b) const noexcept {
    return a >= b ? a - b : a + (p_ - b);
  }
  Residue neg(Residue a) const noexcept { return a == 0 ? 0 : p_ - a; }
  Residue mul(Residue a, Residue b) const noexcept {
    return reduce(static_cast<unsigned __int128>(a) * b);
  }
  Residue pow(Residue base, std::uint64_t exp) const noexcept;
  /// Multiplicative inverse; a must be nonzero.
  Residue inv(Residue a) const;

  Residue reduce(unsigned __int128 x) const noexcept;

  /// Centered representative in [-(p-1)/2, (p-1)/2].
  std::int64_t lift(Residue e) const noexcept {
    return e > half_ ? -static_cast<std::int64_t>(p_ - e)
                     : static_cast<std::int64_t>(e);
  }
  Residue embed(std::int64_t v) const noexcept;

  /// Exact inner product mod p with lazy 128-bit accumulation.
  Residue dot(std::span<const Residue> a, std::span<const Residue> b) const;

  bool operator==(const PrimeField& other) const noexcept {
    return p_ == other.p_;
  }

 private:
  Residue p_;
  Residue half_;
  bool mersenne61_;
  std::size_t lazy_terms_;
};

/// Deterministic Miller-Rabin, exact for all 64-bit inputs.
bool is_prime(std::uint64_t n) noexcept;

/// Dense row-major matrix of residues.
class FieldMatrix {
 public:
  FieldMatrix() = default;
  FieldMatrix(std::size_t rows, std::size_t cols);
  FieldMatrix(std::size_t rows, std::size_t cols, std::vector<Residue> data);

  static FieldMatrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  Residue& operator()(std::size_t r, std::size_t c) {
    return data_[r * cols_ + c];
  }
  Residue operator()(std::size_t r, std::size_t c) const {
    return data_[r * cols_ + c];
  }
  std::span<const Residue> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<Residue> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }

  const std::vector<Residue>& data() const noexcept { return data_; }
  std::vector<Residue>& data() noexcept { return data_; }

  bool operator==(const FieldMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Residue> data_;
};

FieldVector matvec(const PrimeField& field, const FieldMatrix& m,
                   std::span<const Residue> x);
FieldMatrix matmul(const PrimeField& field, const FieldMatrix& a,
                   const FieldMatrix& b);
FieldVector add(const PrimeField& field, std::span<const Residue> a,
                std::span<const Residue> b);
FieldVector sub(const PrimeField& field, std::span<const Residue> a,
                std::span<const Residue> b);
FieldMatrix add(const PrimeField& field, const FieldMatrix& a,
                const FieldMatrix& b);
FieldMatrix sub(const PrimeField& field, const FieldMatrix& a,
                const FieldMatrix& b);

/// Throws FormatError naming `what` if any entry is >= p.
void require_residues(const PrimeField& field, std::span<const Residue> v,
                      const char* what);

enum class BudgetPolicy {
  kEnforce,  // reject values that could wrap around p
  kWrap,     // field-exact semantics only; for small-prime experiments
};

/// Fixed-point encoding of reals into Z_p at scale 2^f.
///
/// Construction checks the no-wrap budget d_max * (B * 2^f)^2 < (p - 1) / 2,
/// so a dot product of width <= d_max between two in-bound vectors never
/// wraps. Under kEnforce the runtime checks keep every activation in bound.
class FixedPointCodec {
 public:
  static constexpr int kDefaultFracBits = 16;
  static constexpr double kDefaultValueBound = 512.0;
  static constexpr std::size_t kDefaultMaxWidth = 1023;

  explicit FixedPointCodec(PrimeField field = PrimeField{},
                           int frac_bits = kDefaultFracBits,
                           double value_bound = kDefaultValueBound,
                           std::size_t max_width = kDefaultMaxWidth,
                           BudgetPolicy policy = BudgetPolicy::kEnforce);

  /// Codec for field-exact experiments at small primes: f = 0, B = 1, and
  /// kWrap so activations may leave the bound.
  static FixedPointCodec wrapping(Residue modulus, std::size_t max_width);

  const PrimeField& field() const noexcept { return field_; }
  int frac_bits() const noexcept { return frac_bits_; }
  double scale() const noexcept { return scale_; }
  double value_bound() const noexcept { return value_bound_; }
  std::size_t max_width() const noexcept { return max_width_; }
  BudgetPolicy policy() const noexcept { return policy_; }

  /// Round half away from zero; rejects |x| > B.
  Residue encode(double x) const;
  /// Like encode but only requires the scaled value to be representable.
  Residue quantize(double x) const;
  double decode(Residue e) const noexcept;

  FieldVector encode(std::span<const double> xs) const;
  std::vector<double> decode(std::span<const Residue> es) const;

  /// Maps a product at scale 2^(2f) back to scale 2^f.
  Residue rescale_after_product(Residue e) const;

  /// Throws OverflowError under kEnforce when decode(e) is outside [-B, B].
  void check_in_bound(Residue e) const;

 private:
  PrimeField field_;
  int frac_bits_;
  double scale_;
  double value_bound_;
  std::size_t max_width_;
  BudgetPolicy policy_;
  unsigned __int128 product_budget_;
};

}  // namespace slip
