#pragma once
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace icsteer {

// FNV-1a, 64-bit. Used for artifact fingerprints in run manifests.
constexpr uint64_t FNV_OFFSET = 1469598103934665603ull;
constexpr uint64_t FNV_PRIME = 1099511628211ull;

inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = FNV_OFFSET) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= FNV_PRIME;
    }
    return h;
}

inline uint64_t fnv1a64(std::string_view s, uint64_t h = FNV_OFFSET) {
    return fnv1a64(s.data(), s.size(), h);
}

// Hash of a whole file's bytes; throws ArtifactError if unreadable.
uint64_t fnv1a64_file(const std::string& path);

// Fixed-width lowercase hex, convenient for manifests.
std::string hex64(uint64_t h);

// Derive a stage seed from a master seed and a stage tag, so one --seed
// override re-keys every stage deterministically.
inline uint64_t mix_seed(uint64_t master, std::string_view tag) {
    uint64_t h = fnv1a64(tag);
    h ^= master + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    return h;
}

} // namespace icsteer
