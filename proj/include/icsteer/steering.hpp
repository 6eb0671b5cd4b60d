#pragma once
#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icsteer/matrix.hpp"

namespace icsteer {

// Steering adapters: small trainable modules attached to the residual
// branches of a frozen transformer. Branch 0 is the attention output
// projection, branch 1 the MLP output projection; in both cases the adapter
// reads the branch output right before it is added back into the residual
// stream and contributes a norm-clipped correction there.
enum class AdapterMode { Dynamic, Static };

const char* adapter_mode_name(AdapterMode m);
AdapterMode adapter_mode_from_name(const std::string& s);

struct AdapterSet {
    AdapterMode mode = AdapterMode::Dynamic;
    int d_model = 0;
    int n_layers = 0;
    int rank = 0;        // dynamic bottleneck width
    double rho = 2.0;    // norm clip ratio (> 1)
    double decay_rate = 0.9; // decode-time scale decay, in (0, 1]

    // Dynamic: delta(h) = gelu(h * w_down) * w_up, w_up zero-initialized so
    // the initial adapter is an exact identity on the backbone.
    // Static: delta(h) = v, independent of h (v zero-initialized).
    struct Site {
        Matrix w_down; // d_model x rank
        Matrix w_up;   // rank x d_model
        Matrix v;      // 1 x d_model
    };
    std::vector<std::array<Site, 2>> sites; // [layer][branch]

    static AdapterSet init(AdapterMode mode, int n_layers, int d_model, int rank, double rho,
                           double decay_rate, uint64_t seed);

    void validate() const;
    size_t n_params() const;

    // Canonical parameter traversal (layer-major, branch inner); the same
    // order everywhere: tape leaves, optimizer state, checkpoints.
    void for_each_param(const std::function<void(const std::string&, Matrix&)>& fn);
    void for_each_param(const std::function<void(const std::string&, const Matrix&)>& fn) const;

    // delta for every row of a branch output H (T x d_model).
    void delta(int layer, int branch, const Matrix& H, Matrix& out) const;
    // Single-row variant used by the incremental decode path. scratch must
    // hold at least `rank` doubles.
    void delta_row(int layer, int branch, const double* h, double* out,
                   std::vector<double>& scratch) const;
};

// scale factor applied to adapter residuals at generated-token index `step`
// during free-running decoding (teacher-forced training always uses 1).
double decay_schedule(double rate, int step);

struct InjectRowInfo {
    double c = 1.0;  // applied shrink factor
    double nh = 0.0; // ||h||
    double nu = 0.0; // ||h + s*delta||
    bool clipped = false;
};

// out = (h + s*delta) * min(1, rho*||h|| / ||h + s*delta||), one row.
// Guarantees ||out|| <= rho*||h||. h may alias out.
InjectRowInfo inject_row(const double* h, const double* delta, int n, double s, double rho,
                         double* out);

// Row-wise injection over a T x d matrix; scales empty means all ones.
void inject(const Matrix& H, const Matrix& delta, double rho, const std::vector<double>& scales,
            Matrix& out);

// Adapter checkpoint I/O (32-bit storage). extra_meta is merged into the
// file's metadata object. load() restores mode, shape and hyperparameters
// from the file and returns the stored metadata through meta_out if given.
void save_adapters(const AdapterSet& a, const std::string& path, const nlohmann::json& extra_meta);
AdapterSet load_adapters(const std::string& path, nlohmann::json* meta_out = nullptr);

} // namespace icsteer
