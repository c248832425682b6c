#pragma once

#include <cstdint>
#include <random>

namespace mmx {

using Rng = std::mt19937_64;

/// Named sub-streams of the single run seed. Each consumer draws from its own
/// stream so adding draws in one place never shifts another.
enum class Stream : std::uint64_t {
    data = 1,
    shape = 2,
    frozen = 3,
    image = 4,
    pairing = 5,
    lambda = 6,
    masks = 7,
    fps = 8,
    init = 9,
    probe = 10,
    shuffle = 11,
    gradcheck = 12,
};

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, Stream stream, std::uint64_t a = 0,
                                 std::uint64_t b = 0, std::uint64_t c = 0) noexcept {
    std::uint64_t s = splitmix64(seed);
    s = splitmix64(s ^ static_cast<std::uint64_t>(stream));
    s = splitmix64(s ^ a);
    s = splitmix64(s ^ (b + 0x632BE59BD9B4E019ULL));
    s = splitmix64(s ^ (c + 0x85157AF5ULL));
    return s;
}

inline Rng make_rng(std::uint64_t seed, Stream stream, std::uint64_t a = 0, std::uint64_t b = 0,
                    std::uint64_t c = 0) {
    return Rng(derive_seed(seed, stream, a, b, c));
}

} // namespace mmx
