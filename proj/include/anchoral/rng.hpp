#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string_view>

namespace anchoral {

// 64-bit FNV-1a. Used for named-substream derivation and for file/config
// digests in run manifests.
inline std::uint64_t fnv1a64(const void* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s) { return fnv1a64(s.data(), s.size()); }

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Derives an independent generator from (seed, name, index). All randomness in
// a run fans out from one master seed through these named substreams, so a
// change in how many draws one component makes cannot shift any other
// component's stream.
inline std::mt19937_64 substream(std::uint64_t seed, std::string_view name,
                                 std::uint64_t index = 0) {
    const std::uint64_t h = fnv1a64(name);
    return std::mt19937_64(
        splitmix64(seed ^ splitmix64(h + 0x9e3779b97f4a7c15ULL * (index + 1))));
}

}  // namespace anchoral
