#pragma once

#include <cstdint>
#include <random>

namespace qcount {

// splitmix64 finalizer; used to derive independent per-unit seeds.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Counter-based stream seed: hash(master, counter, tag). Distinct tags keep
// e.g. the emission and detection streams of the same pulse uncorrelated.
constexpr std::uint64_t stream_seed(std::uint64_t master, std::uint64_t counter,
                                    std::uint64_t tag = 0) noexcept {
    return mix64(mix64(mix64(master) ^ counter) ^ (tag * 0xd1b54a32d192ed03ULL));
}

using Rng = std::mt19937_64;

inline Rng make_rng(std::uint64_t master, std::uint64_t counter, std::uint64_t tag = 0) {
    return Rng(stream_seed(master, counter, tag));
}

// Uniform in [0, 1) from the top 53 bits.
inline double uniform01(Rng& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

// Uniform in (0, 1]; safe to take the log of.
inline double uniform_open0(Rng& rng) {
    return (static_cast<double>(rng() >> 11) + 1.0) * 0x1.0p-53;
}

namespace stream_tag {
inline constexpr std::uint64_t geometry = 1;
inline constexpr std::uint64_t gamma0 = 2;
inline constexpr std::uint64_t dipoles = 3;
inline constexpr std::uint64_t emission = 10;
inline constexpr std::uint64_t detection = 20;
inline constexpr std::uint64_t dark_counts = 21;
} // namespace stream_tag

} // namespace qcount
