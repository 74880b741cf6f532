#pragma once

#include <cstdint>
#include <initializer_list>

namespace dropletscope {

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

/// Independent stream seed for a (base, tag...) tuple.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) noexcept {
    std::uint64_t h = splitmix64(base);
    for (std::uint64_t t : tags) h = splitmix64(h ^ splitmix64(t));
    return h;
}

/// Uniform [0, 1) value hashed from a seed and integer lattice coordinates.
constexpr double hash_unit(std::uint64_t seed, std::int64_t a, std::int64_t b, std::int64_t c) noexcept {
    const std::uint64_t h = derive_seed(seed, {static_cast<std::uint64_t>(a), static_cast<std::uint64_t>(b),
                                               static_cast<std::uint64_t>(c)});
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

}  // namespace dropletscope
