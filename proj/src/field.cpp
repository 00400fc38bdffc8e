#include "slip/field.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "slip/errors.hpp"

namespace slip {

namespace {

using u128 = unsigned __int128;

std::uint64_t mulmod64(std::uint64_t a, std::uint64_t b, std::uint64_t m) {
  return static_cast<std::uint64_t>(static_cast<u128>(a) * b % m);
}

std::uint64_t powmod64(std::uint64_t b, std::uint64_t e, std::uint64_t m) {
  std::uint64_t r = 1 % m;
  b %= m;
  while (e) {
    if (e & 1) r = mulmod64(r, b, m);
    b = mulmod64(b, b, m);
    e >>= 1;
  }
  return r;
}

}  // namespace

bool is_prime(std::uint64_t n) noexcept {
  if (n < 2) return false;
  static constexpr std::uint64_t kSmall[] = {2,  3,  5,  7,  11, 13,
                                             17, 19, 23, 29, 31, 37};
  for (std::uint64_t q : kSmall) {
    if (n % q == 0) return n == q;
  }
  std::uint64_t d = n - 1;
  int s = 0;
  while ((d & 1) == 0) {
    d >>= 1;
    ++s;
  }
  // These twelve bases are a proven witness set for n < 3.3e24.
  for (std::uint64_t a : kSmall) {
    std::uint64_t x = powmod64(a, d, n);
    if (x == 1 || x == n - 1) continue;
    bool composite = true;
    for (int r = 1; r < s; ++r) {
      x = mulmod64(x, x, n);
      if (x == n - 1) {
        composite = false;
        break;
      }
    }
    if (composite) return false;
  }
  return true;
}

PrimeField::PrimeField(Residue modulus) : p_(modulus) {
  if (modulus < 3 || modulus >= (Residue{1} << 63) || !is_prime(modulus)) {
    throw Error("field modulus must be an odd prime below 2^63, got " +
                std::to_string(modulus));
  }
  half_ = (p_ - 1) / 2;
  mersenne61_ = p_ == kMersenne61;
  const u128 sq = static_cast<u128>(p_ - 1) * (p_ - 1);
  const u128 cap = ~u128{0} / sq;
  lazy_terms_ = cap > 1'000'000 ? 1'000'000 : static_cast<std::size_t>(cap);
}

Residue PrimeField::reduce(unsigned __int128 x) const noexcept {
  if (mersenne61_) {
    x = (x & kMersenne61) + (x >> 61);
    x = (x & kMersenne61) + (x >> 61);
    auto r = static_cast<Residue>(x);
    return r >= kMersenne61 ? r - kMersenne61 : r;
  }
  return static_cast<Residue>(x % p_);
}

Residue PrimeField::pow(Residue base, std::uint64_t exp) const noexcept {
  Residue r = 1;
  while (exp) {
    if (exp & 1) r = mul(r, base);
    base = mul(base, base);
    exp >>= 1;
  }
  return r;
}

Residue PrimeField::inv(Residue a) const {
  if (a % p_ == 0) throw Error("inverse of zero");
  return pow(a, p_ - 2);
}

Residue PrimeField::embed(std::int64_t v) const noexcept {
  const auto p = static_cast<std::int64_t>(p_);
  std::int64_t r = v % p;
  if (r < 0) r += p;
  return static_cast<Residue>(r);
}

Residue PrimeField::dot(std::span<const Residue> a,
                        std::span<const Residue> b) const {
  if (a.size() != b.size()) {
    throw DimensionError("dot: length " + std::to_string(a.size()) + " vs " +
                         std::to_string(b.size()));
  }
  u128 acc = 0;
  std::size_t pending = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (pending == lazy_terms_) {
      acc = reduce(acc);
      pending = 1;
    }
    acc += static_cast<u128>(a[i]) * b[i];
    ++pending;
  }
  return reduce(acc);
}

FieldMatrix::FieldMatrix(std::size_t rows, std::size_t cols)
    : FieldMatrix(rows, cols, std::vector<Residue>(rows * cols, 0)) {}

FieldMatrix::FieldMatrix(std::size_t rows, std::size_t cols,
                         std::vector<Residue> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("matrix data has " + std::to_string(data_.size()) +
                         " entries, expected " + std::to_string(rows * cols));
  }
}

FieldMatrix FieldMatrix::identity(std::size_t n) {
  FieldMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1;
  return m;
}

FieldVector matvec(const PrimeField& field, const FieldMatrix& m,
                   std::span<const Residue> x) {
  if (m.cols() != x.size()) {
    throw DimensionError("matvec: matrix has " + std::to_string(m.cols()) +
                         " columns, vector has " + std::to_string(x.size()));
  }
  FieldVector y(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) y[r] = field.dot(m.row(r), x);
  return y;
}

FieldMatrix matmul(const PrimeField& field, const FieldMatrix& a,
                   const FieldMatrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions " +
                         std::to_string(a.cols()) + " vs " +
                         std::to_string(b.rows()));
  }
  FieldMatrix bt(b.cols(), b.rows());
  for (std::size_t r = 0; r < b.rows(); ++r)
    for (std::size_t c = 0; c < b.cols(); ++c) bt(c, r) = b(r, c);
  FieldMatrix out(a.rows(), b.cols());
  for (std::size_t r = 0; r < a.rows(); ++r)
    for (std::size_t c = 0; c < b.cols(); ++c)
      out(r, c) = field.dot(a.row(r), bt.row(c));
  return out;
}

namespace {

template <typename Op>
FieldVector zip(std::span<const Residue> a, std::span<const Residue> b,
                Op op) {
  if (a.size() != b.size()) {
    throw DimensionError("vector lengths " + std::to_string(a.size()) +
                         " vs " + std::to_string(b.size()));
  }
  FieldVector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = op(a[i], b[i]);
  return out;
}

void require_same_shape(const FieldMatrix& a, const FieldMatrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError("matrix shapes differ");
  }
}

}  // namespace

FieldVector add(const PrimeField& field, std::span<const Residue> a,
                std::span<const Residue> b) {
  return zip(a, b, [&](Residue x, Residue y) { return field.add(x, y); });
}

FieldVector sub(const PrimeField& field, std::span<const Residue> a,
                std::span<const Residue> b) {
  return zip(a, b, [&](Residue x, Residue y) { return field.sub(x, y); });
}

FieldMatrix add(const PrimeField& field, const FieldMatrix& a,
                const FieldMatrix& b) {
  require_same_shape(a, b);
  return {a.rows(), a.cols(), add(field, a.data(), b.data())};
}

FieldMatrix sub(const PrimeField& field, const FieldMatrix& a,
                const FieldMatrix& b) {
  require_same_shape(a, b);
  return {a.rows(), a.cols(), sub(field, a.data(), b.data())};
}

void require_residues(const PrimeField& field, std::span<const Residue> v,
                      const char* what) {
  for (Residue e : v) {
    if (!field.contains(e)) {
      throw FormatError(std::string(what) + ": residue " + std::to_string(e) +
                        " is not below modulus " +
                        std::to_string(field.modulus()));
    }
  }
}

FixedPointCodec::FixedPointCodec(PrimeField field, int frac_bits,
                                 double value_bound, std::size_t max_width,
                                 BudgetPolicy policy)
    : field_(field),
      frac_bits_(frac_bits),
      value_bound_(value_bound),
      max_width_(max_width),
      policy_(policy) {
  if (frac_bits < 0 || frac_bits > 30) {
    throw Error("fraction bits must lie in [0, 30], got " +
                std::to_string(frac_bits));
  }
  if (!(value_bound > 0) || !std::isfinite(value_bound)) {
    throw Error("value bound must be positive");
  }
  if (max_width == 0) throw Error("max width must be positive");
  scale_ = std::ldexp(1.0, frac_bits);
  const long double scaled = static_cast<long double>(value_bound) * scale_;
  const long double need =
      static_cast<long double>(max_width) * scaled * scaled;
  const long double half = static_cast<long double>((field.modulus() - 1) / 2);
  if (policy == BudgetPolicy::kEnforce && !(need < half)) {
    throw OverflowError(
        "codec budget violated: d_max * (B * 2^f)^2 = " +
        std::to_string(static_cast<double>(need)) + " is not below (p-1)/2 = " +
        std::to_string(static_cast<double>(half)));
  }
  product_budget_ = static_cast<u128>(need);
}

FixedPointCodec FixedPointCodec::wrapping(Residue modulus,
                                          std::size_t max_width) {
  return FixedPointCodec(PrimeField(modulus), 0, 1.0, max_width,
                         BudgetPolicy::kWrap);
}

Residue FixedPointCodec::encode(double x) const {
  if (!(std::fabs(x) <= value_bound_)) {
    throw OverflowError("value " + std::to_string(x) + " exceeds bound " +
                        std::to_string(value_bound_));
  }
  return quantize(x);
}

Residue FixedPointCodec::quantize(double x) const {
  const double scaled = std::round(x * scale_);
  const double half = static_cast<double>((field_.modulus() - 1) / 2);
  if (!std::isfinite(scaled) || std::fabs(scaled) > half) {
    throw OverflowError("value " + std::to_string(x) +
                        " is not representable in the field");
  }
  return field_.embed(static_cast<std::int64_t>(scaled));
}

double FixedPointCodec::decode(Residue e) const noexcept {
  return static_cast<double>(field_.lift(e)) / scale_;
}

FieldVector FixedPointCodec::encode(std::span<const double> xs) const {
  FieldVector out;
  out.reserve(xs.size());
  for (double x : xs) out.push_back(encode(x));
  return out;
}

std::vector<double> FixedPointCodec::decode(
    std::span<const Residue> es) const {
  std::vector<double> out;
  out.reserve(es.size());
  for (Residue e : es) out.push_back(decode(e));
  return out;
}

Residue FixedPointCodec::rescale_after_product(Residue e) const {
  const std::int64_t v = field_.lift(e);
  const std::uint64_t mag =
      v < 0 ? static_cast<std::uint64_t>(-v) : static_cast<std::uint64_t>(v);
  if (policy_ == BudgetPolicy::kEnforce && mag > product_budget_) {
    throw OverflowError("product " + std::to_string(v) +
                        " exceeds the no-wrap budget");
  }
  if (frac_bits_ == 0) return e;
  const std::uint64_t q =
      (mag + (std::uint64_t{1} << (frac_bits_ - 1))) >> frac_bits_;
  const auto s = static_cast<std::int64_t>(q);
  return field_.embed(v < 0 ? -s : s);
}

void FixedPointCodec::check_in_bound(Residue e) const {
  if (policy_ != BudgetPolicy::kEnforce) return;
  const double x = decode(e);
  if (std::fabs(x) > value_bound_) {
    throw OverflowError("activation " + std::to_string(x) +
                        " left the value bound " +
                        std::to_string(value_bound_));
  }
}

}  // namespace slip
