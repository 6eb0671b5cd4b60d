#include "icsteer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "icsteer/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "tensor container assumes a little-endian host");

namespace icsteer {

namespace {
constexpr char MAGIC[8] = {'I', 'C', 'S', 'T', 'N', 'C', '0', '1'};

void put_u32(std::ofstream& f, uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }

uint32_t get_u32(std::ifstream& f, const std::string& path) {
    uint32_t v = 0;
    if (!f.read(reinterpret_cast<char*>(&v), 4))
        throw ArtifactError("truncated tensor file: " + path);
    return v;
}
} // namespace

const Matrix& TensorFile::get(const std::string& name) const {
    for (const auto& [n, m] : tensors)
        if (n == name) return m;
    throw ArtifactError("tensor not found: " + name);
}

bool TensorFile::has(const std::string& name) const {
    for (const auto& [n, m] : tensors)
        if (n == name) return true;
    return false;
}

void TensorFile::save(const std::string& path) const {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw ArtifactError("cannot open for writing: " + path);
    f.write(MAGIC, 8);
    const std::string m = meta.dump(); // compact, keys sorted by nlohmann
    put_u32(f, uint32_t(m.size()));
    f.write(m.data(), std::streamsize(m.size()));
    put_u32(f, uint32_t(tensors.size()));
    std::vector<float> buf;
    for (const auto& [name, mat] : tensors) {
        put_u32(f, uint32_t(name.size()));
        f.write(name.data(), std::streamsize(name.size()));
        put_u32(f, uint32_t(mat.rows));
        put_u32(f, uint32_t(mat.cols));
        buf.resize(mat.data.size());
        for (size_t i = 0; i < buf.size(); ++i) buf[i] = float(mat.data[i]);
        f.write(reinterpret_cast<const char*>(buf.data()),
                std::streamsize(buf.size() * sizeof(float)));
    }
    if (!f) throw ArtifactError("write failed: " + path);
}

TensorFile TensorFile::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ArtifactError("cannot open: " + path);
    char magic[8];
    if (!f.read(magic, 8) || std::memcmp(magic, MAGIC, 8) != 0)
        throw ArtifactError("bad magic (not a tensor container): " + path);
    TensorFile out;
    uint32_t mlen = get_u32(f, path);
    std::string m(mlen, '\0');
    if (!f.read(m.data(), mlen)) throw ArtifactError("truncated metadata: " + path);
    try {
        out.meta = nlohmann::json::parse(m);
    } catch (const nlohmann::json::exception& e) {
        throw ArtifactError("corrupt metadata in " + path + ": " + e.what());
    }
    uint32_t n = get_u32(f, path);
    out.tensors.reserve(n);
    std::vector<float> buf;
    for (uint32_t i = 0; i < n; ++i) {
        uint32_t nl = get_u32(f, path);
        std::string name(nl, '\0');
        if (!f.read(name.data(), nl)) throw ArtifactError("truncated tensor name: " + path);
        uint32_t rows = get_u32(f, path), cols = get_u32(f, path);
        Matrix mat{int(rows), int(cols)};
        buf.resize(mat.data.size());
        if (!f.read(reinterpret_cast<char*>(buf.data()),
                    std::streamsize(buf.size() * sizeof(float))))
            throw ArtifactError("truncated tensor data: " + path);
        for (size_t j = 0; j < buf.size(); ++j) mat.data[j] = double(buf[j]);
        out.tensors.emplace_back(std::move(name), std::move(mat));
    }
    return out;
}

void round_to_f32(Matrix& m) {
    for (double& v : m.data) v = double(float(v));
}

} // namespace icsteer
