#include "slip/rng.hpp"

namespace slip {

namespace {

// FNV-1a, 64-bit.
std::uint64_t hash_name(std::string_view name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

Rng substream(std::uint64_t seed, std::string_view name, std::uint64_t index) {
  const std::uint64_t h = hash_name(name);
  std::seed_seq seq{static_cast<std::uint32_t>(seed),
                    static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(h),
                    static_cast<std::uint32_t>(h >> 32),
                    static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

Residue uniform_residue(const PrimeField& field, Rng& rng) {
  std::uniform_int_distribution<Residue> dist(0, field.modulus() - 1);
  return dist(rng);
}

FieldVector uniform_vector(const PrimeField& field, std::size_t n, Rng& rng) {
  std::uniform_int_distribution<Residue> dist(0, field.modulus() - 1);
  FieldVector v(n);
  for (auto& e : v) e = dist(rng);
  return v;
}

FieldMatrix uniform_matrix(const PrimeField& field, std::size_t rows,
                           std::size_t cols, Rng& rng) {
  FieldMatrix m(rows, cols);
  std::uniform_int_distribution<Residue> dist(0, field.modulus() - 1);
  for (auto& e : m.data()) e = dist(rng);
  return m;
}

}  // namespace slip
