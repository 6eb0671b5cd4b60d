#include "icsteer/steering.hpp"

#include <cassert>
#include <cmath>
#include <cstring>

#include "icsteer/checkpoint.hpp"
#include "icsteer/errors.hpp"
#include "icsteer/kernels.hpp"
#include "icsteer/rng.hpp"

namespace icsteer {

const char* adapter_mode_name(AdapterMode m) {
    return m == AdapterMode::Dynamic ? "dynamic" : "static";
}

AdapterMode adapter_mode_from_name(const std::string& s) {
    if (s == "dynamic") return AdapterMode::Dynamic;
    if (s == "static") return AdapterMode::Static;
    throw ConfigError("unknown adapter mode '" + s + "' (expected dynamic|static)");
}

AdapterSet AdapterSet::init(AdapterMode mode, int n_layers, int d_model, int rank, double rho,
                            double decay_rate, uint64_t seed) {
    AdapterSet a;
    a.mode = mode;
    a.d_model = d_model;
    a.n_layers = n_layers;
    a.rank = rank;
    a.rho = rho;
    a.decay_rate = decay_rate;
    a.validate();
    Rng rng(seed);
    a.sites.resize(size_t(n_layers));
    for (int l = 0; l < n_layers; ++l) {
        for (int b = 0; b < 2; ++b) {
            Site& s = a.sites[size_t(l)][size_t(b)];
            if (mode == AdapterMode::Dynamic) {
                s.w_down = Matrix(d_model, rank);
                for (double& x : s.w_down.data) x = 0.02 * rng.normal();
                s.w_up = Matrix(rank, d_model); // zeros: identity at start
            } else {
                s.v = Matrix(1, d_model); // zeros: identity at start
            }
        }
    }
    return a;
}

void AdapterSet::validate() const {
    if (d_model <= 0 || n_layers <= 0) throw ConfigError("adapters: bad shape");
    if (mode == AdapterMode::Dynamic && rank <= 0)
        throw ConfigError("adapters: dynamic mode requires rank > 0");
    if (!(rho > 1.0)) throw ConfigError("adapters: rho must be > 1");
    if (!(decay_rate > 0.0 && decay_rate <= 1.0))
        throw ConfigError("adapters: decay_rate must be in (0, 1]");
}

size_t AdapterSet::n_params() const {
    size_t n = 0;
    const_cast<AdapterSet*>(this)->for_each_param(
        [&](const std::string&, Matrix& m) { n += m.size(); });
    return n;
}

void AdapterSet::for_each_param(const std::function<void(const std::string&, Matrix&)>& fn) {
    for (int l = 0; l < n_layers; ++l) {
        for (int b = 0; b < 2; ++b) {
            Site& s = sites[size_t(l)][size_t(b)];
            std::string base =
                "site." + std::to_string(l) + "." + (b == 0 ? "attn" : "mlp") + ".";
            if (mode == AdapterMode::Dynamic) {
                fn(base + "w_down", s.w_down);
                fn(base + "w_up", s.w_up);
            } else {
                fn(base + "v", s.v);
            }
        }
    }
}

void AdapterSet::for_each_param(
    const std::function<void(const std::string&, const Matrix&)>& fn) const {
    const_cast<AdapterSet*>(this)->for_each_param(
        [&](const std::string& n, Matrix& m) { fn(n, m); });
}

void AdapterSet::delta(int layer, int branch, const Matrix& H, Matrix& out) const {
    const Site& s = sites[size_t(layer)][size_t(branch)];
    if (mode == AdapterMode::Static) {
        out = Matrix(H.rows, d_model);
        for (int i = 0; i < H.rows; ++i)
            std::memcpy(out.row(i), s.v.row(0), sizeof(double) * size_t(d_model));
        return;
    }
    Matrix pre, act;
    num::matmul(H, s.w_down, pre);
    num::gelu(pre, act);
    num::matmul(act, s.w_up, out);
}

void AdapterSet::delta_row(int layer, int branch, const double* h, double* out,
                           std::vector<double>& scratch) const {
    const Site& s = sites[size_t(layer)][size_t(branch)];
    if (mode == AdapterMode::Static) {
        std::memcpy(out, s.v.row(0), sizeof(double) * size_t(d_model));
        return;
    }
    scratch.assign(size_t(rank), 0.0);
    // Same accumulation order as the matmul kernel: contraction index outer.
    for (int p = 0; p < d_model; ++p) {
        const double a = h[p];
        const double* w = s.w_down.row(p);
        for (int k = 0; k < rank; ++k) scratch[size_t(k)] += a * w[k];
    }
    for (int k = 0; k < rank; ++k) scratch[size_t(k)] = num::gelu_scalar(scratch[size_t(k)]);
    std::memset(out, 0, sizeof(double) * size_t(d_model));
    for (int k = 0; k < rank; ++k) {
        const double a = scratch[size_t(k)];
        const double* w = s.w_up.row(k);
        for (int j = 0; j < d_model; ++j) out[j] += a * w[j];
    }
}

double decay_schedule(double rate, int step) {
    if (!(rate > 0.0 && rate <= 1.0)) throw ConfigError("decay_schedule: rate must be in (0, 1]");
    if (step < 0) throw ConfigError("decay_schedule: step must be >= 0");
    return std::pow(rate, double(step));
}

InjectRowInfo inject_row(const double* h, const double* delta, int n, double s, double rho,
                         double* out) {
    InjectRowInfo info;
    double nh2 = 0.0, nu2 = 0.0;
    for (int j = 0; j < n; ++j) {
        double u = h[j] + s * delta[j];
        nh2 += h[j] * h[j];
        nu2 += u * u;
        out[j] = u;
    }
    info.nh = std::sqrt(nh2);
    info.nu = std::sqrt(nu2);
    if (info.nu > 0.0 && rho * info.nh < info.nu) {
        info.c = rho * info.nh / info.nu;
        info.clipped = true;
        // Per-element (rho*||h||*u)/||u|| keeps one rounding step instead of
        // two, so pure-decimal cases come out on the exact decimal doubles.
        const double cnum = rho * info.nh;
        for (int j = 0; j < n; ++j) out[j] = cnum * out[j] / info.nu;
    }
    return info;
}

void inject(const Matrix& H, const Matrix& delta, double rho, const std::vector<double>& scales,
            Matrix& out) {
    assert(H.same_shape(delta));
    assert(scales.empty() || int(scales.size()) == H.rows);
    if (!(rho > 1.0)) throw NumericError("inject: rho must be > 1");
    if (!out.same_shape(H)) out = Matrix(H.rows, H.cols);
    for (int i = 0; i < H.rows; ++i) {
        double s = scales.empty() ? 1.0 : scales[size_t(i)];
        inject_row(H.row(i), delta.row(i), H.cols, s, rho, out.row(i));
    }
}

void save_adapters(const AdapterSet& a, const std::string& path,
                   const nlohmann::json& extra_meta) {
    TensorFile f;
    f.meta = extra_meta.is_object() ? extra_meta : nlohmann::json::object();
    f.meta["kind"] = "adapters";
    f.meta["mode"] = adapter_mode_name(a.mode);
    f.meta["d_model"] = a.d_model;
    f.meta["n_layers"] = a.n_layers;
    f.meta["rank"] = a.rank;
    f.meta["rho"] = a.rho;
    f.meta["decay_rate"] = a.decay_rate;
    a.for_each_param(
        [&](const std::string& n, const Matrix& m) { f.tensors.emplace_back(n, m); });
    f.save(path);
}

AdapterSet load_adapters(const std::string& path, nlohmann::json* meta_out) {
    TensorFile f = TensorFile::load(path);
    if (!f.meta.contains("kind") || f.meta["kind"] != "adapters")
        throw ArtifactError("not an adapter checkpoint: " + path);
    AdapterSet a;
    a.mode = adapter_mode_from_name(f.meta.at("mode").get<std::string>());
    a.d_model = f.meta.at("d_model").get<int>();
    a.n_layers = f.meta.at("n_layers").get<int>();
    a.rank = f.meta.at("rank").get<int>();
    a.rho = f.meta.at("rho").get<double>();
    a.decay_rate = f.meta.at("decay_rate").get<double>();
    a.validate();
    a.sites.resize(size_t(a.n_layers));
    size_t idx = 0;
    a.for_each_param([&](const std::string& n, Matrix& m) {
        if (idx >= f.tensors.size() || f.tensors[idx].first != n)
            throw ArtifactError("adapter checkpoint tensor mismatch at '" + n + "': " + path);
        m = f.tensors[idx].second;
        ++idx;
    });
    if (idx != f.tensors.size())
        throw ArtifactError("adapter checkpoint has extra tensors: " + path);
    for (const auto& layer : a.sites) {
        for (const auto& s : layer) {
            bool ok = a.mode == AdapterMode::Dynamic
                          ? (s.w_down.rows == a.d_model && s.w_down.cols == a.rank &&
                             s.w_up.rows == a.rank && s.w_up.cols == a.d_model)
                          : (s.v.rows == 1 && s.v.cols == a.d_model);
            if (!ok) throw ArtifactError("adapter tensor shape mismatch: " + path);
        }
    }
    if (meta_out) *meta_out = f.meta;
    return a;
}

} // namespace icsteer
