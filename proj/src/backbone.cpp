#include "icsteer/backbone.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>

#include "icsteer/checkpoint.hpp"
#include "icsteer/errors.hpp"
#include "icsteer/kernels.hpp"
#include "icsteer/rng.hpp"

namespace icsteer {

// ---- config ----

void BackboneConfig::validate() const {
    if (vocab_size <= 0) throw ConfigError("backbone: vocab_size must be > 0");
    if (d_model <= 0) throw ConfigError("backbone: d_model must be > 0");
    if (n_layers <= 0) throw ConfigError("backbone: n_layers must be > 0");
    if (n_heads <= 0) throw ConfigError("backbone: n_heads must be > 0");
    if (d_model % n_heads != 0) throw ConfigError("backbone: d_model must be divisible by n_heads");
    if (d_ff <= 0) throw ConfigError("backbone: d_ff must be > 0");
    if (max_context <= 0) throw ConfigError("backbone: max_context must be > 0");
}

nlohmann::json BackboneConfig::to_json() const {
    return {{"vocab_size", vocab_size}, {"d_model", d_model},         {"n_layers", n_layers},
            {"n_heads", n_heads},       {"d_ff", d_ff},               {"max_context", max_context},
            {"init_seed", init_seed}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("backbone config: expected a JSON object");
    static const std::vector<std::string> known = {"vocab_size", "d_model",     "n_layers",
                                                   "n_heads",    "d_ff",        "max_context",
                                                   "init_seed"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw ConfigError("backbone config: unknown field '" + it.key() + "'");
    BackboneConfig c;
    auto integer = [&](const char* key, int& out) {
        if (!j.contains(key)) return;
        if (!j.at(key).is_number_integer())
            throw ConfigError(std::string("backbone config: field '") + key +
                              "' must be an integer");
        out = j.at(key).get<int>();
    };
    integer("vocab_size", c.vocab_size);
    integer("d_model", c.d_model);
    integer("n_layers", c.n_layers);
    integer("n_heads", c.n_heads);
    integer("d_ff", c.d_ff);
    integer("max_context", c.max_context);
    if (j.contains("init_seed")) {
        if (!j.at("init_seed").is_number_unsigned())
            throw ConfigError("backbone config: field 'init_seed' must be an unsigned integer");
        c.init_seed = j.at("init_seed").get<uint64_t>();
    }
    // vocab_size 0 is a valid sentinel in run configs (resolved against the
    // task vocabulary before use); validate the rest with a placeholder.
    BackboneConfig check = c;
    if (check.vocab_size == 0) check.vocab_size = 1;
    check.validate();
    return c;
}

// ---- params ----

void Backbone::alloc() {
    const int d = cfg.d_model, ff = cfg.d_ff, V = cfg.vocab_size;
    params.tok_emb = Matrix(V, d);
    params.pos_emb = Matrix(cfg.max_context, d);
    params.layers.assign(size_t(cfg.n_layers), {});
    for (auto& L : params.layers) {
        L.ln1_g = Matrix(1, d);
        L.ln1_b = Matrix(1, d);
        L.w_qkv = Matrix(d, 3 * d);
        L.b_qkv = Matrix(1, 3 * d);
        L.w_o = Matrix(d, d);
        L.b_o = Matrix(1, d);
        L.ln2_g = Matrix(1, d);
        L.ln2_b = Matrix(1, d);
        L.w_fc = Matrix(d, ff);
        L.b_fc = Matrix(1, ff);
        L.w_proj = Matrix(ff, d);
        L.b_proj = Matrix(1, d);
    }
    params.lnf_g = Matrix(1, d);
    params.lnf_b = Matrix(1, d);
    params.w_head = Matrix(d, V);
}

void Backbone::for_each_param(const std::function<void(const std::string&, Matrix&)>& fn) {
    fn("tok_emb", params.tok_emb);
    fn("pos_emb", params.pos_emb);
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerParams& L = params.layers[size_t(l)];
        std::string p = "layer." + std::to_string(l) + ".";
        fn(p + "ln1.g", L.ln1_g);
        fn(p + "ln1.b", L.ln1_b);
        fn(p + "attn.w_qkv", L.w_qkv);
        fn(p + "attn.b_qkv", L.b_qkv);
        fn(p + "attn.w_o", L.w_o);
        fn(p + "attn.b_o", L.b_o);
        fn(p + "ln2.g", L.ln2_g);
        fn(p + "ln2.b", L.ln2_b);
        fn(p + "mlp.w_fc", L.w_fc);
        fn(p + "mlp.b_fc", L.b_fc);
        fn(p + "mlp.w_proj", L.w_proj);
        fn(p + "mlp.b_proj", L.b_proj);
    }
    fn("lnf.g", params.lnf_g);
    fn("lnf.b", params.lnf_b);
    fn("head.w", params.w_head);
}

void Backbone::for_each_param(
    const std::function<void(const std::string&, const Matrix&)>& fn) const {
    const_cast<Backbone*>(this)->for_each_param(
        [&](const std::string& n, Matrix& m) { fn(n, m); });
}

size_t Backbone::n_params() const {
    size_t n = 0;
    for_each_param([&](const std::string&, const Matrix& m) { n += m.size(); });
    return n;
}

Backbone Backbone::init(const BackboneConfig& cfg) {
    cfg.validate();
    Backbone b;
    b.cfg = cfg;
    b.alloc();
    Rng rng(cfg.init_seed);
    const double std0 = 0.02;
    const double proj_scale = 1.0 / std::sqrt(2.0 * cfg.n_layers);
    auto fill = [&](Matrix& m, double s) {
        for (double& x : m.data) x = s * rng.normal();
    };
    // Draw order is the canonical parameter order; LN gains/biases and linear
    // biases consume no draws.
    fill(b.params.tok_emb, std0);
    fill(b.params.pos_emb, std0);
    for (auto& L : b.params.layers) {
        for (double& x : L.ln1_g.data) x = 1.0;
        fill(L.w_qkv, std0);
        fill(L.w_o, std0 * proj_scale);
        for (double& x : L.ln2_g.data) x = 1.0;
        fill(L.w_fc, std0);
        fill(L.w_proj, std0 * proj_scale);
    }
    for (double& x : b.params.lnf_g.data) x = 1.0;
    fill(b.params.w_head, std0);
    return b;
}

// ---- fast forward ----

namespace {
constexpr double LN_EPS = 1e-5;

// layernorm_row equivalent shared with the kernels (duplicated here because
// the kernel-internal helper is file-local; keep in exact sync).
inline void ln_row(const double* x, const double* g, const double* b, int n, double* y) {
    double m = 0.0;
    for (int j = 0; j < n; ++j) m += x[j];
    m /= n;
    double v = 0.0;
    for (int j = 0; j < n; ++j) {
        double d = x[j] - m;
        v += d * d;
    }
    v /= n;
    double rstd = 1.0 / std::sqrt(v + LN_EPS);
    for (int j = 0; j < n; ++j) y[j] = g[j] * ((x[j] - m) * rstd) + b[j];
}

// row-vector times matrix, accumulation over the contraction index ascending
// (matches the matmul kernel's per-element order).
inline void vecmat(const double* x, const Matrix& W, double* y) {
    std::memset(y, 0, sizeof(double) * size_t(W.cols));
    for (int p = 0; p < W.rows; ++p) {
        const double a = x[p];
        const double* w = W.row(p);
        for (int j = 0; j < W.cols; ++j) y[j] += a * w[j];
    }
}
} // namespace

Matrix Backbone::forward(const std::vector<int>& tokens, const AdapterSet* adapters,
                         const std::vector<double>* inject_scales, BranchTaps* taps) const {
    const int T = int(tokens.size());
    const int d = cfg.d_model, H = cfg.n_heads, dh = d / H;
    if (T == 0) throw NumericError("forward: empty token sequence");
    if (T > cfg.max_context) throw NumericError("forward: sequence exceeds max_context");
    for (int t : tokens)
        if (t < 0 || t >= cfg.vocab_size) throw NumericError("forward: token id out of range");
    if (adapters && (adapters->d_model != d || adapters->n_layers != cfg.n_layers))
        throw ConfigError("forward: adapter shape does not match backbone");
    std::vector<double> ones;
    const std::vector<double>* scales = inject_scales;
    if (adapters && !scales) {
        ones.assign(size_t(T), 1.0);
        scales = &ones;
    }
    if (taps) taps->taps.assign(size_t(cfg.n_layers), {});

    Matrix x(T, d);
    for (int t = 0; t < T; ++t) {
        const double* te = params.tok_emb.row(tokens[size_t(t)]);
        const double* pe = params.pos_emb.row(t);
        double* r = x.row(t);
        for (int j = 0; j < d; ++j) r[j] = te[j] + pe[j];
    }

    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));
    Matrix xn, qkv, q, k, v, s, ch, ctx(T, d), branch, delta, inj;
    std::vector<double> mean, rstd;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerParams& L = params.layers[size_t(l)];
        // attention branch
        num::layernorm(x, L.ln1_g, L.ln1_b, LN_EPS, xn, mean, rstd);
        num::matmul(xn, L.w_qkv, qkv);
        for (int i = 0; i < T; ++i) {
            double* r = qkv.row(i);
            const double* b = L.b_qkv.row(0);
            for (int j = 0; j < 3 * d; ++j) r[j] += b[j];
        }
        for (int h = 0; h < H; ++h) {
            auto slice = [&](int off, Matrix& out) {
                out = Matrix(T, dh);
                for (int i = 0; i < T; ++i)
                    std::memcpy(out.row(i), qkv.row(i) + off, sizeof(double) * size_t(dh));
            };
            slice(h * dh, q);
            slice(d + h * dh, k);
            slice(2 * d + h * dh, v);
            num::matmul_bt(q, k, s);
            for (double& e : s.data) e *= inv_sqrt_dh;
            num::causal_softmax(s);
            num::matmul(s, v, ch);
            for (int i = 0; i < T; ++i)
                std::memcpy(ctx.row(i) + h * dh, ch.row(i), sizeof(double) * size_t(dh));
        }
        num::matmul(ctx, L.w_o, branch);
        for (int i = 0; i < T; ++i) {
            double* r = branch.row(i);
            const double* b = L.b_o.row(0);
            for (int j = 0; j < d; ++j) r[j] += b[j];
        }
        if (taps) taps->taps[size_t(l)][0] = branch;
        if (adapters) {
            adapters->delta(l, 0, branch, delta);
            inject(branch, delta, adapters->rho, *scales, inj);
            for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += inj.data[i];
        } else {
            for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += branch.data[i];
        }
        // mlp branch
        num::layernorm(x, L.ln2_g, L.ln2_b, LN_EPS, xn, mean, rstd);
        num::matmul(xn, L.w_fc, qkv); // reuse buffer (T x ff)
        for (int i = 0; i < T; ++i) {
            double* r = qkv.row(i);
            const double* b = L.b_fc.row(0);
            for (int j = 0; j < cfg.d_ff; ++j) r[j] += b[j];
        }
        num::gelu(qkv, ch); // reuse (T x ff)
        num::matmul(ch, L.w_proj, branch);
        for (int i = 0; i < T; ++i) {
            double* r = branch.row(i);
            const double* b = L.b_proj.row(0);
            for (int j = 0; j < d; ++j) r[j] += b[j];
        }
        if (taps) taps->taps[size_t(l)][1] = branch;
        if (adapters) {
            adapters->delta(l, 1, branch, delta);
            inject(branch, delta, adapters->rho, *scales, inj);
            for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += inj.data[i];
        } else {
            for (size_t i = 0; i < x.data.size(); ++i) x.data[i] += branch.data[i];
        }
    }
    num::layernorm(x, params.lnf_g, params.lnf_b, LN_EPS, xn, mean, rstd);
    Matrix logits;
    num::matmul(xn, params.w_head, logits);
    return logits;
}

// ---- tape forward ----

ForwardNodes Backbone::build_forward(Tape& tape, const std::vector<int>& tokens,
                                     bool train_backbone, const AdapterSet* adapters,
                                     bool train_adapters,
                                     const std::vector<double>* inject_scales) const {
    const int T = int(tokens.size());
    const int d = cfg.d_model, H = cfg.n_heads, dh = d / H;
    if (T == 0) throw NumericError("build_forward: empty token sequence");
    if (T > cfg.max_context) throw NumericError("build_forward: sequence exceeds max_context");
    ForwardNodes out;

    auto bind = [&](const Matrix& m) {
        NodeId id = train_backbone ? tape.leaf(m) : tape.constant(m);
        out.backbone_params.push_back(id);
        return id;
    };
    NodeId tok_emb = bind(params.tok_emb);
    NodeId pos_emb = bind(params.pos_emb);
    struct LNodes {
        NodeId ln1_g, ln1_b, w_qkv, b_qkv, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
    };
    std::vector<LNodes> lp;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerParams& L = params.layers[size_t(l)];
        lp.push_back({bind(L.ln1_g), bind(L.ln1_b), bind(L.w_qkv), bind(L.b_qkv), bind(L.w_o),
                      bind(L.b_o), bind(L.ln2_g), bind(L.ln2_b), bind(L.w_fc), bind(L.b_fc),
                      bind(L.w_proj), bind(L.b_proj)});
    }
    NodeId lnf_g = bind(params.lnf_g), lnf_b = bind(params.lnf_b), w_head = bind(params.w_head);

    struct ANodes {
        NodeId w_down = -1, w_up = -1, v = -1;
    };
    std::vector<std::array<ANodes, 2>> an;
    if (adapters) {
        if (adapters->d_model != d || adapters->n_layers != cfg.n_layers)
            throw ConfigError("build_forward: adapter shape does not match backbone");
        an.resize(size_t(cfg.n_layers));
        for (int l = 0; l < cfg.n_layers; ++l) {
            for (int b = 0; b < 2; ++b) {
                const AdapterSet::Site& s = adapters->sites[size_t(l)][size_t(b)];
                ANodes nodes;
                auto abind = [&](const Matrix& m) {
                    NodeId id = train_adapters ? tape.leaf(m) : tape.constant(m);
                    out.adapter_params.push_back(id);
                    return id;
                };
                if (adapters->mode == AdapterMode::Dynamic) {
                    nodes.w_down = abind(s.w_down);
                    nodes.w_up = abind(s.w_up);
                } else {
                    nodes.v = abind(s.v);
                }
                an[size_t(l)][size_t(b)] = nodes;
            }
        }
    }

    std::vector<double> scales;
    if (adapters)
        scales = inject_scales ? *inject_scales : std::vector<double>(size_t(T), 1.0);

    std::vector<int> pos(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) pos[size_t(t)] = t;
    NodeId x = tape.add(tape.embed(tok_emb, tokens), tape.embed(pos_emb, pos));

    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));
    auto adapter_inject = [&](int l, int b, NodeId branch) {
        if (!adapters) return branch;
        const ANodes& nodes = an[size_t(l)][size_t(b)];
        NodeId delta;
        if (adapters->mode == AdapterMode::Dynamic) {
            NodeId pre = tape.matmul(branch, nodes.w_down);
            delta = tape.matmul(tape.gelu(pre), nodes.w_up);
        } else {
            delta = tape.broadcast_row(nodes.v, T);
        }
        return tape.inject_clip(branch, delta, adapters->rho, scales);
    };

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LNodes& L = lp[size_t(l)];
        NodeId xn = tape.layernorm(x, L.ln1_g, L.ln1_b, LN_EPS);
        NodeId qkv = tape.add_rowvec(tape.matmul(xn, L.w_qkv), L.b_qkv);
        std::vector<NodeId> heads;
        for (int h = 0; h < H; ++h) {
            NodeId q = tape.slice_cols(qkv, h * dh, (h + 1) * dh);
            NodeId k = tape.slice_cols(qkv, d + h * dh, d + (h + 1) * dh);
            NodeId v = tape.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh);
            NodeId s = tape.scale(tape.matmul_bt(q, k), inv_sqrt_dh);
            NodeId p = tape.causal_softmax(s);
            heads.push_back(tape.matmul(p, v));
        }
        NodeId ctx = tape.concat_cols(heads);
        NodeId branch = tape.add_rowvec(tape.matmul(ctx, L.w_o), L.b_o);
        x = tape.add(x, adapter_inject(l, 0, branch));

        NodeId xn2 = tape.layernorm(x, L.ln2_g, L.ln2_b, LN_EPS);
        NodeId h1 = tape.gelu(tape.add_rowvec(tape.matmul(xn2, L.w_fc), L.b_fc));
        NodeId mlp = tape.add_rowvec(tape.matmul(h1, L.w_proj), L.b_proj);
        x = tape.add(x, adapter_inject(l, 1, mlp));
    }
    NodeId xf = tape.layernorm(x, lnf_g, lnf_b, LN_EPS);
    out.logits = tape.matmul(xf, w_head);
    return out;
}

// ---- incremental decoding ----

namespace {
struct KvCache {
    std::vector<Matrix> K, V; // per layer, rows = positions
};
} // namespace

// One position through all layers; writes this position's K/V and returns the
// logit row. Every accumulation mirrors the batched kernels' element order,
// which makes incremental decoding bit-identical to a full re-forward.
static void step_position(const Backbone& bb, const AdapterSet* adapters, double scale,
                          KvCache& kv, int pos, int token, std::vector<double>& logits_out) {
    const BackboneConfig& cfg = bb.cfg;
    const int d = cfg.d_model, H = cfg.n_heads, dh = d / H, ff = cfg.d_ff;
    const double inv_sqrt_dh = 1.0 / std::sqrt(double(dh));

    std::vector<double> x(static_cast<size_t>(d)), xn(static_cast<size_t>(d)), qkv(size_t(3 * d)), ctx(static_cast<size_t>(d)),
        branch(static_cast<size_t>(d)), delta(static_cast<size_t>(d)), inj(static_cast<size_t>(d)), h1(static_cast<size_t>(ff)), scratch;
    std::vector<double> att(size_t(pos) + 1);

    const double* te = bb.params.tok_emb.row(token);
    const double* pe = bb.params.pos_emb.row(pos);
    for (int j = 0; j < d; ++j) x[size_t(j)] = te[j] + pe[j];

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerParams& L = bb.params.layers[size_t(l)];
        ln_row(x.data(), L.ln1_g.row(0), L.ln1_b.row(0), d, xn.data());
        vecmat(xn.data(), L.w_qkv, qkv.data());
        for (int j = 0; j < 3 * d; ++j) qkv[size_t(j)] += L.b_qkv(0, j);
        std::memcpy(kv.K[size_t(l)].row(pos), qkv.data() + d, sizeof(double) * size_t(d));
        std::memcpy(kv.V[size_t(l)].row(pos), qkv.data() + 2 * d, sizeof(double) * size_t(d));
        std::fill(ctx.begin(), ctx.end(), 0.0);
        for (int h = 0; h < H; ++h) {
            const double* q = qkv.data() + h * dh;
            for (int j = 0; j <= pos; ++j) {
                const double* kr = kv.K[size_t(l)].row(j) + h * dh;
                double s = 0.0;
                for (int p = 0; p < dh; ++p) s += q[p] * kr[p];
                att[size_t(j)] = s * inv_sqrt_dh;
            }
            double mx = att[0];
            for (int j = 1; j <= pos; ++j) mx = std::max(mx, att[size_t(j)]);
            double z = 0.0;
            for (int j = 0; j <= pos; ++j) {
                att[size_t(j)] = std::exp(att[size_t(j)] - mx);
                z += att[size_t(j)];
            }
            double invz = 1.0 / z;
            for (int j = 0; j <= pos; ++j) att[size_t(j)] *= invz;
            double* c = ctx.data() + h * dh;
            for (int j = 0; j <= pos; ++j) {
                const double a = att[size_t(j)];
                const double* vr = kv.V[size_t(l)].row(j) + h * dh;
                for (int p = 0; p < dh; ++p) c[p] += a * vr[p];
            }
        }
        vecmat(ctx.data(), L.w_o, branch.data());
        for (int j = 0; j < d; ++j) branch[size_t(j)] += L.b_o(0, j);
        if (adapters) {
            adapters->delta_row(l, 0, branch.data(), delta.data(), scratch);
            inject_row(branch.data(), delta.data(), d, scale, adapters->rho, inj.data());
            for (int j = 0; j < d; ++j) x[size_t(j)] += inj[size_t(j)];
        } else {
            for (int j = 0; j < d; ++j) x[size_t(j)] += branch[size_t(j)];
        }
        ln_row(x.data(), L.ln2_g.row(0), L.ln2_b.row(0), d, xn.data());
        vecmat(xn.data(), L.w_fc, h1.data());
        for (int j = 0; j < ff; ++j) h1[size_t(j)] = num::gelu_scalar(h1[size_t(j)] + L.b_fc(0, j));
        vecmat(h1.data(), L.w_proj, branch.data());
        for (int j = 0; j < d; ++j) branch[size_t(j)] += L.b_proj(0, j);
        if (adapters) {
            adapters->delta_row(l, 1, branch.data(), delta.data(), scratch);
            inject_row(branch.data(), delta.data(), d, scale, adapters->rho, inj.data());
            for (int j = 0; j < d; ++j) x[size_t(j)] += inj[size_t(j)];
        } else {
            for (int j = 0; j < d; ++j) x[size_t(j)] += branch[size_t(j)];
        }
    }
    ln_row(x.data(), bb.params.lnf_g.row(0), bb.params.lnf_b.row(0), d, xn.data());
    logits_out.assign(size_t(cfg.vocab_size), 0.0);
    vecmat(xn.data(), bb.params.w_head, logits_out.data());
}

GenResult Backbone::generate(const std::vector<int>& prompt, const AdapterSet* adapters,
                             const DecodeConfig& dec) const {
    if (prompt.empty()) throw NumericError("generate: empty prompt");
    if (dec.max_new_tokens < 0) throw ConfigError("generate: max_new_tokens must be >= 0");
    if (adapters && (adapters->d_model != cfg.d_model || adapters->n_layers != cfg.n_layers))
        throw ConfigError("generate: adapter shape does not match backbone");
    GenResult res;
    if (dec.max_new_tokens == 0) return res;

    const int P = int(prompt.size());
    if (P > cfg.max_context) throw NumericError("generate: prompt exceeds max_context");
    const int cap = std::min(cfg.max_context, P + dec.max_new_tokens);
    KvCache kv;
    kv.K.assign(size_t(cfg.n_layers), Matrix(cap, cfg.d_model));
    kv.V.assign(size_t(cfg.n_layers), Matrix(cap, cfg.d_model));

    std::vector<double> logits;
    for (int t = 0; t < P; ++t)
        step_position(*this, adapters, 1.0, kv, t, prompt[size_t(t)], logits);

    int pos = P; // next position to process; holds the most recent emission
    while (true) {
        // logits correspond to the last processed position.
        std::vector<double> probs = num::softmax(logits, 1.0);
        res.eos_prob.push_back(probs[size_t(dec.eos_id)]);
        int best = 0;
        for (int j = 1; j < cfg.vocab_size; ++j)
            if (logits[size_t(j)] > logits[size_t(best)]) best = j;
        res.tokens.push_back(best);
        if (best == dec.eos_id) {
            res.stopped_eos = true;
            break;
        }
        if (int(res.tokens.size()) >= dec.max_new_tokens) break; // token budget
        if (pos >= cap) break;                                   // context window full
        // Generated token j sits at position P+j and its adapter residuals
        // are scaled by decay_rate^j; prompt positions always use scale 1.
        double scale = decay_schedule(dec.decay_rate, int(res.tokens.size()) - 1);
        step_position(*this, adapters, scale, kv, pos, best, logits);
        ++pos;
    }
    return res;
}

std::vector<double> Backbone::eos_prob_per_position(const std::vector<int>& tokens, int eos_id,
                                                    const AdapterSet* adapters) const {
    Matrix logits = forward(tokens, adapters);
    std::vector<double> out(size_t(logits.rows));
    for (int t = 0; t < logits.rows; ++t) {
        std::vector<double> p =
            num::softmax(std::span<const double>(logits.row(t), size_t(logits.cols)), 1.0);
        out[size_t(t)] = p[size_t(eos_id)];
    }
    return out;
}

std::pair<int, double> Backbone::greedy_step(const std::vector<int>& tokens, int eos_id,
                                             const AdapterSet* adapters, bool exclude_eos) const {
    Matrix logits = forward(tokens, adapters);
    const double* z = logits.row(logits.rows - 1);
    std::vector<double> p = num::softmax(std::span<const double>(z, size_t(logits.cols)), 1.0);
    int best = -1;
    for (int j = 0; j < logits.cols; ++j) {
        if (exclude_eos && j == eos_id) continue;
        if (best < 0 || z[j] > z[best]) best = j;
    }
    return {best, p[size_t(eos_id)]};
}

// ---- checkpoint ----

void Backbone::save(const std::string& path, const nlohmann::json& extra_meta) const {
    TensorFile f;
    f.meta = extra_meta.is_object() ? extra_meta : nlohmann::json::object();
    f.meta["kind"] = "backbone";
    f.meta["config"] = cfg.to_json();
    for_each_param([&](const std::string& n, const Matrix& m) { f.tensors.emplace_back(n, m); });
    f.save(path);
}

Backbone Backbone::load(const std::string& path, const BackboneConfig* expected,
                        nlohmann::json* meta_out) {
    TensorFile f = TensorFile::load(path);
    if (!f.meta.contains("kind") || f.meta["kind"] != "backbone")
        throw ArtifactError("not a backbone checkpoint: " + path);
    BackboneConfig cfg = BackboneConfig::from_json(f.meta.at("config"));
    if (expected && !(cfg == *expected))
        throw ArtifactError("backbone checkpoint config mismatch: " + path);
    Backbone b;
    b.cfg = cfg;
    b.alloc();
    size_t idx = 0;
    b.for_each_param([&](const std::string& n, Matrix& m) {
        if (idx >= f.tensors.size() || f.tensors[idx].first != n)
            throw ArtifactError("backbone checkpoint tensor mismatch at '" + n + "': " + path);
        const Matrix& src = f.tensors[idx].second;
        if (!src.same_shape(m))
            throw ArtifactError("backbone tensor shape mismatch at '" + n + "': " + path);
        m = src;
        ++idx;
    });
    if (idx != f.tensors.size())
        throw ArtifactError("backbone checkpoint has extra tensors: " + path);
    if (meta_out) *meta_out = f.meta;
    return b;
}

} // namespace icsteer
