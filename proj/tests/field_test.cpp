#include <gtest/gtest.h>

#include <boost/multiprecision/cpp_int.hpp>
#include <cmath>
#include <random>

#include "slip/errors.hpp"
#include "slip/field.hpp"
#include "slip/rng.hpp"

using boost::multiprecision::cpp_int;
using namespace slip;

namespace {

Residue oracle_mod(const cpp_int& x, Residue p) {
  cpp_int r = x % p;
  if (r < 0) r += p;
  return static_cast<Residue>(r);
}

const Residue kPrimes[] = {101, 257, 65537, 4294967291ULL, 1000000007ULL,
                           PrimeField::kMersenne61, 9223372036854775783ULL};

}  // namespace

TEST(PrimeField, SmallPrimeExamples) {
  const PrimeField f(101);
  EXPECT_EQ(f.add(70, 40), 9u);
  EXPECT_EQ(f.sub(3, 5), 99u);
  EXPECT_EQ(f.mul(100, 100), 1u);
  EXPECT_EQ(f.inv(3), 34u);
  EXPECT_EQ(f.neg(0), 0u);
}

TEST(PrimeField, MersenneSquareOfMinusOne) {
  const PrimeField f;
  const Residue m1 = f.modulus() - 1;
  EXPECT_EQ(f.mul(m1, m1), 1u);
}

TEST(PrimeField, RejectsCompositeAndOutOfRange) {
  EXPECT_THROW(PrimeField(100), Error);
  EXPECT_THROW(PrimeField(2), Error);
  EXPECT_THROW(PrimeField(1), Error);
  EXPECT_THROW(PrimeField((Residue{1} << 63) + 29), Error);
}

TEST(PrimeField, IsPrimeAgreesWithTrialDivision) {
  auto slow = [](std::uint64_t n) {
    if (n < 2) return false;
    for (std::uint64_t d = 2; d * d <= n; ++d)
      if (n % d == 0) return false;
    return true;
  };
  for (std::uint64_t n = 0; n < 5000; ++n) EXPECT_EQ(is_prime(n), slow(n)) << n;
  EXPECT_TRUE(is_prime(PrimeField::kMersenne61));
  EXPECT_FALSE(is_prime(3215031751ULL));  // strong pseudoprime to bases 2,3,5,7
  EXPECT_FALSE(is_prime(PrimeField::kMersenne61 * 3));
}

TEST(PrimeField, OpsMatchBigIntegerOracle) {
  std::mt19937_64 rng(11);
  for (Residue p : kPrimes) {
    const PrimeField f(p);
    std::uniform_int_distribution<Residue> u(0, p - 1);
    for (int i = 0; i < 20000; ++i) {
      const Residue a = u(rng), b = u(rng);
      ASSERT_EQ(f.add(a, b), oracle_mod(cpp_int(a) + b, p));
      ASSERT_EQ(f.sub(a, b), oracle_mod(cpp_int(a) - b, p));
      ASSERT_EQ(f.mul(a, b), oracle_mod(cpp_int(a) * b, p));
      if (a != 0) ASSERT_EQ(f.mul(a, f.inv(a)), 1u);
    }
    const Residue base = u(rng);
    ASSERT_EQ(f.pow(base, 12345), static_cast<Residue>(powm(cpp_int(base), cpp_int(12345), cpp_int(p))));
  }
}

TEST(PrimeField, DotMatchesOracleIncludingLongVectors) {
  std::mt19937_64 rng(5);
  for (Residue p : kPrimes) {
    const PrimeField f(p);
    for (std::size_t n : {0u, 1u, 7u, 300u, 5000u}) {
      FieldVector a(n), b(n);
      std::uniform_int_distribution<Residue> u(0, p - 1);
      cpp_int acc = 0;
      for (std::size_t i = 0; i < n; ++i) {
        a[i] = u(rng);
        b[i] = u(rng);
        acc += cpp_int(a[i]) * b[i];
      }
      ASSERT_EQ(f.dot(a, b), oracle_mod(acc, p)) << "p=" << p << " n=" << n;
    }
  }
}

TEST(PrimeField, LiftAndEmbedAreInverse) {
  const PrimeField f(101);
  EXPECT_EQ(f.lift(50), 50);
  EXPECT_EQ(f.lift(51), -50);
  EXPECT_EQ(f.lift(100), -1);
  for (std::int64_t v = -50; v <= 50; ++v) EXPECT_EQ(f.lift(f.embed(v)), v);
  EXPECT_EQ(f.embed(-1000), oracle_mod(cpp_int(-1000), 101));
}

TEST(FieldMatrix, MatvecExample) {
  const PrimeField f(101);
  const FieldMatrix m(2, 2, {2, 3, 4, 5});
  const FieldVector x{10, 20};
  EXPECT_EQ(matvec(f, m, x), (FieldVector{80, 39}));  // 140 mod 101 = 39
}

TEST(FieldMatrix, MatmulMatchesOracle) {
  const PrimeField f;
  Rng rng = substream(3, "test");
  const FieldMatrix a = uniform_matrix(f, 5, 7, rng);
  const FieldMatrix b = uniform_matrix(f, 7, 3, rng);
  const FieldMatrix c = matmul(f, a, b);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      cpp_int acc = 0;
      for (std::size_t k = 0; k < 7; ++k) acc += cpp_int(a(i, k)) * b(k, j);
      ASSERT_EQ(c(i, j), oracle_mod(acc, f.modulus()));
    }
}

TEST(FieldMatrix, ShapeErrors) {
  const PrimeField f(101);
  EXPECT_THROW(FieldMatrix(2, 2, {1, 2, 3}), DimensionError);
  const FieldMatrix m(2, 3);
  EXPECT_THROW(matvec(f, m, FieldVector{1, 2}), DimensionError);
  EXPECT_THROW(add(f, FieldVector{1}, FieldVector{1, 2}), DimensionError);
  EXPECT_THROW(require_residues(f, FieldVector{1, 101}, "v"), FormatError);
}

TEST(Codec, EncodeExamples) {
  const FixedPointCodec c;
  const Residue p = c.field().modulus();
  EXPECT_EQ(c.encode(0.0), 0u);
  EXPECT_EQ(c.encode(1.0), 65536u);
  EXPECT_EQ(c.encode(-0.5), p - 32768);
  EXPECT_EQ(c.encode(0.5 / 65536), 1u);    // half rounds away from zero
  EXPECT_EQ(c.encode(-0.5 / 65536), p - 1);
  EXPECT_DOUBLE_EQ(c.decode(c.encode(-3.25)), -3.25);
  EXPECT_THROW(c.encode(513.0), OverflowError);
  EXPECT_THROW(c.encode(std::nan("")), OverflowError);
}

TEST(Codec, RoundTripErrorWithinHalfUlp) {
  const FixedPointCodec c;
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> u(-512, 512);
  for (int i = 0; i < 10000; ++i) {
    const double x = u(rng);
    ASSERT_LE(std::abs(c.decode(c.encode(x)) - x), 0.5 / c.scale() + 1e-12);
  }
}

TEST(Codec, BudgetCheckedAtConstruction) {
  EXPECT_NO_THROW(FixedPointCodec(PrimeField{}, 16, 512.0, 1023));
  EXPECT_THROW(FixedPointCodec(PrimeField{}, 16, 4096.0, 1023), OverflowError);
  EXPECT_THROW(FixedPointCodec(PrimeField(101), 16, 512.0, 4), OverflowError);
  EXPECT_NO_THROW(FixedPointCodec::wrapping(101, 64));
}

TEST(Codec, RescaleMatchesRoundedDivision) {
  const FixedPointCodec c;
  const PrimeField& f = c.field();
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-20, 20);
  for (int i = 0; i < 10000; ++i) {
    const double a = u(rng), b = u(rng);
    const Residue prod = f.mul(c.encode(a), c.encode(b));
    const std::int64_t exact = f.lift(prod);
    const double expect = std::round(static_cast<double>(exact) / c.scale());
    ASSERT_EQ(f.lift(c.rescale_after_product(prod)), static_cast<std::int64_t>(expect));
  }
}

TEST(Codec, RescaleRejectsOverBudgetUnderEnforce) {
  const FixedPointCodec c;
  const Residue huge = (c.field().modulus() - 1) / 2;
  EXPECT_THROW(c.rescale_after_product(huge), OverflowError);
  const FixedPointCodec w = FixedPointCodec::wrapping(101, 8);
  EXPECT_EQ(w.rescale_after_product(77), 77u);
  EXPECT_NO_THROW(w.check_in_bound(50));
}

TEST(Rng, SubstreamsAreReproducibleAndDistinct) {
  Rng a = substream(1, "masks", 0), b = substream(1, "masks", 0);
  Rng c = substream(1, "masks", 1), d = substream(1, "freivalds", 0);
  const auto va = a(), vb = b(), vc = c(), vd = d();
  EXPECT_EQ(va, vb);
  EXPECT_NE(va, vc);
  EXPECT_NE(va, vd);
}

TEST(Rng, UniformResiduesStayInField) {
  const PrimeField f(101);
  Rng rng = substream(4, "x");
  for (Residue e : uniform_vector(f, 10000, rng)) ASSERT_LT(e, 101u);
}
