#include "icsteer/hash.hpp"

#include <cstdio>
#include <fstream>
#include <vector>

#include "icsteer/errors.hpp"

namespace icsteer {

uint64_t fnv1a64_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ArtifactError("cannot open for hashing: " + path);
    uint64_t h = FNV_OFFSET;
    std::vector<char> buf(1 << 16);
    while (f) {
        f.read(buf.data(), std::streamsize(buf.size()));
        h = fnv1a64(buf.data(), size_t(f.gcount()), h);
    }
    return h;
}

std::string hex64(uint64_t h) {
    char out[17];
    std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
    return out;
}

} // namespace icsteer
