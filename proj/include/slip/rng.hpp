#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "slip/field.hpp"

namespace slip {

using Rng = std::mt19937_64;

/// Independent generator for (seed, stream name, index). Every random draw
/// in the library comes from one of these so experiments replay exactly.
Rng substream(std::uint64_t seed, std::string_view name,
              std::uint64_t index = 0);

Residue uniform_residue(const PrimeField& field, Rng& rng);
FieldVector uniform_vector(const PrimeField& field, std::size_t n, Rng& rng);
FieldMatrix uniform_matrix(const PrimeField& field, std::size_t rows,
                           std::size_t cols, Rng& rng);

}  // namespace slip
