#pragma once
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "icsteer/matrix.hpp"

namespace icsteer {

// Binary tensor container backing model checkpoints.
//
// Layout (little-endian):
//   8-byte magic "ICSTNC01"
//   u32 meta_len, meta_len bytes of JSON metadata
//   u32 n_tensors, then per tensor:
//     u32 name_len, name bytes
//     u32 rows, u32 cols
//     f32 data[rows*cols]
//
// Values are stored as 32-bit floats. save() therefore rounds; callers that
// need bit-exact save -> load -> forward round their in-memory parameters
// through f32 first (see round_to_f32 below and its use in training code).
struct TensorFile {
    nlohmann::json meta;
    std::vector<std::pair<std::string, Matrix>> tensors; // insertion order preserved

    const Matrix& get(const std::string& name) const;
    bool has(const std::string& name) const;

    void save(const std::string& path) const;
    static TensorFile load(const std::string& path);
};

// Round every entry to the nearest float (the value that storage will hold).
void round_to_f32(Matrix& m);

} // namespace icsteer
