#include "icsteer/tape.hpp"

#include <cassert>
#include <cmath>
#include <cstring>

#include "icsteer/errors.hpp"
#include "icsteer/kernels.hpp"
#include "icsteer/steering.hpp"

namespace icsteer {

namespace {
constexpr double KL_FLOOR = 1e-12;
}

NodeId Tape::push(Node n) {
    nodes_.push_back(std::move(n));
    grads_.emplace_back();
    return NodeId(nodes_.size() - 1);
}

const Matrix& Tape::value(NodeId id) const { return v(id); }

const Matrix* Tape::grad(NodeId id) const {
    const Matrix& g = grads_[size_t(id)];
    return g.empty() ? nullptr : &g;
}

bool Tape::requires_grad(NodeId id) const { return nodes_[size_t(id)].rg; }

Matrix& Tape::ensure_grad(NodeId id) {
    Matrix& g = grads_[size_t(id)];
    if (g.empty()) {
        const Matrix& val = v(id);
        g = Matrix(val.rows, val.cols);
    }
    return g;
}

NodeId Tape::constant(const Matrix& m) {
    Node n;
    n.op = Op::Constant;
    n.ext = &m;
    n.rg = false;
    return push(std::move(n));
}

NodeId Tape::leaf(const Matrix& m) {
    Node n;
    n.op = Op::Leaf;
    n.ext = &m;
    n.rg = true;
    return push(std::move(n));
}

NodeId Tape::embed(NodeId table, std::vector<int> ids) {
    const Matrix& T = v(table);
    Node n;
    n.op = Op::Embed;
    n.in = {table};
    n.rg = nodes_[size_t(table)].rg;
    n.val = Matrix(int(ids.size()), T.cols);
    for (size_t t = 0; t < ids.size(); ++t) {
        assert(ids[t] >= 0 && ids[t] < T.rows);
        std::memcpy(n.val.row(int(t)), T.row(ids[t]), sizeof(double) * size_t(T.cols));
    }
    n.ivec = std::move(ids);
    return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
    const Matrix& A = v(a);
    const Matrix& B = v(b);
    assert(A.same_shape(B));
    Node n;
    n.op = Op::Add;
    n.in = {a, b};
    n.rg = nodes_[size_t(a)].rg || nodes_[size_t(b)].rg;
    n.val = A;
    for (size_t i = 0; i < n.val.data.size(); ++i) n.val.data[i] += B.data[i];
    return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double s) {
    Node n;
    n.op = Op::Scale;
    n.in = {a};
    n.rg = nodes_[size_t(a)].rg;
    n.c0 = s;
    n.val = v(a);
    for (double& x : n.val.data) x *= s;
    return push(std::move(n));
}

NodeId Tape::add_rowvec(NodeId a, NodeId vv) {
    const Matrix& A = v(a);
    const Matrix& V = v(vv);
    assert(V.rows == 1 && V.cols == A.cols);
    Node n;
    n.op = Op::AddRowVec;
    n.in = {a, vv};
    n.rg = nodes_[size_t(a)].rg || nodes_[size_t(vv)].rg;
    n.val = A;
    for (int i = 0; i < A.rows; ++i) {
        double* r = n.val.row(i);
        const double* b = V.row(0);
        for (int j = 0; j < A.cols; ++j) r[j] += b[j];
    }
    return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b) {
    Node n;
    n.op = Op::MatMul;
    n.in = {a, b};
    n.rg = nodes_[size_t(a)].rg || nodes_[size_t(b)].rg;
    num::matmul(v(a), v(b), n.val);
    return push(std::move(n));
}

NodeId Tape::matmul_bt(NodeId a, NodeId b) {
    Node n;
    n.op = Op::MatMulBT;
    n.in = {a, b};
    n.rg = nodes_[size_t(a)].rg || nodes_[size_t(b)].rg;
    num::matmul_bt(v(a), v(b), n.val);
    return push(std::move(n));
}

NodeId Tape::slice_cols(NodeId a, int c0, int c1) {
    const Matrix& A = v(a);
    assert(0 <= c0 && c0 < c1 && c1 <= A.cols);
    Node n;
    n.op = Op::SliceCols;
    n.in = {a};
    n.rg = nodes_[size_t(a)].rg;
    n.ivec = {c0, c1};
    n.val = Matrix(A.rows, c1 - c0);
    for (int i = 0; i < A.rows; ++i)
        std::memcpy(n.val.row(i), A.row(i) + c0, sizeof(double) * size_t(c1 - c0));
    return push(std::move(n));
}

NodeId Tape::slice_rows(NodeId a, int r0, int r1) {
    const Matrix& A = v(a);
    assert(0 <= r0 && r0 < r1 && r1 <= A.rows);
    Node n;
    n.op = Op::SliceRows;
    n.in = {a};
    n.rg = nodes_[size_t(a)].rg;
    n.ivec = {r0, r1};
    n.val = Matrix(r1 - r0, A.cols);
    std::memcpy(n.val.row(0), A.row(r0), sizeof(double) * size_t(r1 - r0) * size_t(A.cols));
    return push(std::move(n));
}

NodeId Tape::concat_cols(const std::vector<NodeId>& parts) {
    assert(!parts.empty());
    int rows = v(parts[0]).rows;
    int cols = 0;
    bool rg = false;
    for (NodeId p : parts) {
        assert(v(p).rows == rows);
        cols += v(p).cols;
        rg = rg || nodes_[size_t(p)].rg;
    }
    Node n;
    n.op = Op::ConcatCols;
    n.in = parts;
    n.rg = rg;
    n.val = Matrix(rows, cols);
    int off = 0;
    for (NodeId p : parts) {
        const Matrix& P = v(p);
        for (int i = 0; i < rows; ++i)
            std::memcpy(n.val.row(i) + off, P.row(i), sizeof(double) * size_t(P.cols));
        off += P.cols;
    }
    return push(std::move(n));
}

NodeId Tape::layernorm(NodeId x, NodeId gamma, NodeId beta, double eps) {
    Node n;
    n.op = Op::LayerNorm;
    n.in = {x, gamma, beta};
    n.rg = nodes_[size_t(x)].rg || nodes_[size_t(gamma)].rg || nodes_[size_t(beta)].rg;
    n.c0 = eps;
    std::vector<double> mean, rstd;
    num::layernorm(v(x), v(gamma), v(beta), eps, n.val, mean, rstd);
    n.dvec.resize(mean.size() * 2);
    for (size_t i = 0; i < mean.size(); ++i) {
        n.dvec[2 * i] = mean[i];
        n.dvec[2 * i + 1] = rstd[i];
    }
    return push(std::move(n));
}

NodeId Tape::gelu(NodeId x) {
    Node n;
    n.op = Op::Gelu;
    n.in = {x};
    n.rg = nodes_[size_t(x)].rg;
    num::gelu(v(x), n.val);
    return push(std::move(n));
}

NodeId Tape::causal_softmax(NodeId scores) {
    Node n;
    n.op = Op::CausalSoftmax;
    n.in = {scores};
    n.rg = nodes_[size_t(scores)].rg;
    n.val = v(scores);
    num::causal_softmax(n.val);
    return push(std::move(n));
}

NodeId Tape::broadcast_row(NodeId vv, int n_rows) {
    const Matrix& V = v(vv);
    assert(V.rows == 1);
    Node n;
    n.op = Op::BroadcastRow;
    n.in = {vv};
    n.rg = nodes_[size_t(vv)].rg;
    n.val = Matrix(n_rows, V.cols);
    for (int i = 0; i < n_rows; ++i)
        std::memcpy(n.val.row(i), V.row(0), sizeof(double) * size_t(V.cols));
    return push(std::move(n));
}

NodeId Tape::inject_clip(NodeId h, NodeId delta, double rho, std::vector<double> scales) {
    const Matrix& H = v(h);
    const Matrix& D = v(delta);
    assert(H.same_shape(D));
    assert(int(scales.size()) == H.rows);
    if (!(rho > 1.0)) throw NumericError("inject_clip: rho must be > 1");
    Node n;
    n.op = Op::InjectClip;
    n.in = {h, delta};
    n.rg = nodes_[size_t(h)].rg || nodes_[size_t(delta)].rg;
    n.c0 = rho;
    n.val = Matrix(H.rows, H.cols);
    n.dvec.resize(size_t(H.rows) * 5); // per row: c, nh, nu, s, clipped
    for (int i = 0; i < H.rows; ++i) {
        const double s = scales[size_t(i)];
        InjectRowInfo info = inject_row(H.row(i), D.row(i), H.cols, s, rho, n.val.row(i));
        double* sv = &n.dvec[size_t(i) * 5];
        sv[0] = info.c;
        sv[1] = info.nh;
        sv[2] = info.nu;
        sv[3] = s;
        sv[4] = info.clipped ? 1.0 : 0.0;
    }
    return push(std::move(n));
}

NodeId Tape::ce_loss(NodeId logits, std::vector<int> targets, std::vector<double> weights) {
    const Matrix& Z = v(logits);
    assert(int(targets.size()) == Z.rows && weights.size() == targets.size());
    double wsum = 0.0;
    for (double w : weights) wsum += w;
    if (wsum == 0.0) throw NumericError("ce_loss: weights sum to zero");
    Node n;
    n.op = Op::CeLoss;
    n.in = {logits};
    n.rg = nodes_[size_t(logits)].rg;
    n.aux = Matrix(Z.rows, Z.cols); // per-row softmax saved for backward
    double acc = 0.0;
    for (int t = 0; t < Z.rows; ++t) {
        const double* z = Z.row(t);
        int y = targets[size_t(t)];
        if (y < 0 || y >= Z.cols) throw NumericError("ce_loss: target out of range");
        double lse = num::logsumexp(std::span<const double>(z, size_t(Z.cols)));
        double* p = n.aux.row(t);
        for (int j = 0; j < Z.cols; ++j) p[j] = std::exp(z[j] - lse);
        acc += weights[size_t(t)] * (lse - z[y]);
    }
    n.val = Matrix(1, 1);
    n.val(0, 0) = acc / wsum;
    n.c0 = wsum;
    n.ivec = std::move(targets);
    n.dvec = std::move(weights);
    return push(std::move(n));
}

NodeId Tape::topk_kl(NodeId logits, std::vector<int> ids, const Matrix& teacher_p, double tau) {
    const Matrix& Z = v(logits);
    const int T = teacher_p.rows, K = teacher_p.cols;
    assert(int(ids.size()) == T * K);
    if (!(tau > 0.0)) throw NumericError("topk_kl: temperature must be > 0");
    Node n;
    n.op = Op::TopKKl;
    n.in = {logits};
    n.rg = nodes_[size_t(logits)].rg;
    n.c0 = tau;
    n.aux = Matrix(T, K);  // student restricted probabilities
    n.aux2 = teacher_p;    // floored+renormalized below
    double acc = 0.0;
    std::vector<double> zr(static_cast<size_t>(K));
    for (int t = 0; t < T; ++t) {
        const double* z = Z.row(t);
        const int* id = ids.data() + size_t(t) * K;
        for (int k = 0; k < K; ++k) {
            assert(id[k] >= 0 && id[k] < Z.cols);
            zr[size_t(k)] = z[id[k]] / tau;
        }
        std::vector<double> ps = num::softmax(zr, 1.0);
        double zs = 0.0, zt = 0.0;
        double* pt = n.aux2.row(t);
        for (int k = 0; k < K; ++k) {
            ps[size_t(k)] = std::max(ps[size_t(k)], KL_FLOOR);
            pt[k] = std::max(pt[k], KL_FLOOR);
            zs += ps[size_t(k)];
            zt += pt[k];
        }
        double* psr = n.aux.row(t);
        double row = 0.0;
        for (int k = 0; k < K; ++k) {
            psr[k] = ps[size_t(k)] / zs;
            pt[k] /= zt;
            row += pt[k] * (std::log(pt[k]) - std::log(psr[k]));
        }
        acc += row;
    }
    n.val = Matrix(1, 1);
    n.val(0, 0) = acc / T;
    n.ivec = std::move(ids);
    return push(std::move(n));
}

NodeId Tape::axpby(NodeId x, NodeId y, double a, double b) {
    const Matrix& X = v(x);
    const Matrix& Y = v(y);
    assert(X.rows == 1 && X.cols == 1 && Y.rows == 1 && Y.cols == 1);
    Node n;
    n.op = Op::Axpby;
    n.in = {x, y};
    n.rg = nodes_[size_t(x)].rg || nodes_[size_t(y)].rg;
    n.c0 = a;
    n.c1 = b;
    n.val = Matrix(1, 1);
    n.val(0, 0) = a * X(0, 0) + b * Y(0, 0);
    return push(std::move(n));
}

void Tape::backward(NodeId loss, double seed) {
    const Matrix& L = v(loss);
    if (L.rows != 1 || L.cols != 1) throw NumericError("backward: loss node must be 1x1");
    if (!nodes_[size_t(loss)].rg) return; // nothing trainable feeds the loss

    // Propagate through fresh per-call buffers: reusing the accumulated
    // buffers would feed gradients from earlier backward calls back into the
    // graph and double-count shared intermediates.
    std::vector<Matrix> persistent = std::move(grads_);
    grads_.assign(nodes_.size(), Matrix());
    ensure_grad(loss)(0, 0) = seed;
    for (NodeId id = loss; id >= 0; --id) {
        if (grads_[size_t(id)].empty()) continue;
        if (!nodes_[size_t(id)].rg) continue;
        backward_node(id);
    }

    // Fold this call's contributions into the persistent accumulators.
    persistent.resize(nodes_.size());
    for (size_t i = 0; i < nodes_.size(); ++i) {
        if (grads_[i].empty()) continue;
        if (persistent[i].empty()) {
            persistent[i] = std::move(grads_[i]);
        } else {
            for (size_t j = 0; j < persistent[i].data.size(); ++j)
                persistent[i].data[j] += grads_[i].data[j];
        }
    }
    grads_ = std::move(persistent);
}

void Tape::backward_node(NodeId id) {
    Node& n = nodes_[size_t(id)];
    const Matrix& g = grads_[size_t(id)];
    auto rg = [&](NodeId in) { return nodes_[size_t(in)].rg; };

    switch (n.op) {
        case Op::Constant:
        case Op::Leaf:
            break;
        case Op::Embed: {
            if (!rg(n.in[0])) break;
            Matrix& dT = ensure_grad(n.in[0]);
            for (int t = 0; t < g.rows; ++t) {
                double* dst = dT.row(n.ivec[size_t(t)]);
                const double* src = g.row(t);
                for (int j = 0; j < g.cols; ++j) dst[j] += src[j];
            }
            break;
        }
        case Op::Add: {
            for (int s = 0; s < 2; ++s) {
                if (!rg(n.in[size_t(s)])) continue;
                Matrix& d = ensure_grad(n.in[size_t(s)]);
                for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += g.data[i];
            }
            break;
        }
        case Op::Scale: {
            if (!rg(n.in[0])) break;
            Matrix& d = ensure_grad(n.in[0]);
            for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += n.c0 * g.data[i];
            break;
        }
        case Op::AddRowVec: {
            if (rg(n.in[0])) {
                Matrix& d = ensure_grad(n.in[0]);
                for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += g.data[i];
            }
            if (rg(n.in[1])) {
                Matrix& d = ensure_grad(n.in[1]);
                for (int i = 0; i < g.rows; ++i) {
                    const double* r = g.row(i);
                    for (int j = 0; j < g.cols; ++j) d(0, j) += r[j];
                }
            }
            break;
        }
        case Op::MatMul: {
            const Matrix& A = v(n.in[0]);
            const Matrix& B = v(n.in[1]);
            if (rg(n.in[0])) {
                Matrix tmp;
                num::matmul_bt(g, B, tmp); // dA = g * B^T
                Matrix& d = ensure_grad(n.in[0]);
                for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += tmp.data[i];
            }
            if (rg(n.in[1])) {
                Matrix tmp;
                num::matmul_tn(A, g, tmp); // dB = A^T * g
                Matrix& d = ensure_grad(n.in[1]);
                for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += tmp.data[i];
            }
            break;
        }
        case Op::MatMulBT: {
            const Matrix& A = v(n.in[0]);
            const Matrix& B = v(n.in[1]);
            if (rg(n.in[0])) {
                Matrix tmp;
                num::matmul(g, B, tmp); // dA = g * B
                Matrix& d = ensure_grad(n.in[0]);
                for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += tmp.data[i];
            }
            if (rg(n.in[1])) {
                Matrix tmp;
                num::matmul_tn(g, A, tmp); // dB = g^T * A
                Matrix& d = ensure_grad(n.in[1]);
                for (size_t i = 0; i < d.data.size(); ++i) d.data[i] += tmp.data[i];
            }
            break;
        }
        case Op::SliceCols: {
            if (!rg(n.in[0])) break;
            Matrix& d = ensure_grad(n.in[0]);
            int c0 = n.ivec[0];
            for (int i = 0; i < g.rows; ++i) {
                double* dst = d.row(i) + c0;
                const double* src = g.row(i);
                for (int j = 0; j < g.cols; ++j) dst[j] += src[j];
            }
            break;
        }
        case Op::SliceRows: {
            if (!rg(n.in[0])) break;
            Matrix& d = ensure_grad(n.in[0]);
            int r0 = n.ivec[0];
            for (int i = 0; i < g.rows; ++i) {
                double* dst = d.row(r0 + i);
                const double* src = g.row(i);
                for (int j = 0; j < g.cols; ++j) dst[j] += src[j];
            }
            break;
        }
        case Op::ConcatCols: {
            int off = 0;
            for (NodeId p : n.in) {
                const Matrix& P = v(p);
                if (rg(p)) {
                    Matrix& d = ensure_grad(p);
                    for (int i = 0; i < g.rows; ++i) {
                        double* dst = d.row(i);
                        const double* src = g.row(i) + off;
                        for (int j = 0; j < P.cols; ++j) dst[j] += src[j];
                    }
                }
                off += P.cols;
            }
            break;
        }
        case Op::LayerNorm: {
            const Matrix& X = v(n.in[0]);
            const Matrix& G = v(n.in[1]);
            std::vector<double> mean(size_t(X.rows)), rstd(size_t(X.rows));
            for (int i = 0; i < X.rows; ++i) {
                mean[size_t(i)] = n.dvec[size_t(i) * 2];
                rstd[size_t(i)] = n.dvec[size_t(i) * 2 + 1];
            }
            Matrix* dgamma = rg(n.in[1]) ? &ensure_grad(n.in[1]) : nullptr;
            Matrix* dbeta = rg(n.in[2]) ? &ensure_grad(n.in[2]) : nullptr;
            if (rg(n.in[0])) {
                num::layernorm_backward(X, G, mean, rstd, g, ensure_grad(n.in[0]), dgamma, dbeta);
            } else if (dgamma || dbeta) {
                Matrix scratch(X.rows, X.cols);
                num::layernorm_backward(X, G, mean, rstd, g, scratch, dgamma, dbeta);
            }
            break;
        }
        case Op::Gelu: {
            if (!rg(n.in[0])) break;
            num::gelu_backward(v(n.in[0]), g, ensure_grad(n.in[0]));
            break;
        }
        case Op::CausalSoftmax: {
            if (!rg(n.in[0])) break;
            num::causal_softmax_backward(n.val, g, ensure_grad(n.in[0]));
            break;
        }
        case Op::BroadcastRow: {
            if (!rg(n.in[0])) break;
            Matrix& d = ensure_grad(n.in[0]);
            for (int i = 0; i < g.rows; ++i) {
                const double* src = g.row(i);
                for (int j = 0; j < g.cols; ++j) d(0, j) += src[j];
            }
            break;
        }
        case Op::InjectClip: {
            const Matrix& H = v(n.in[0]);
            const Matrix& D = v(n.in[1]);
            const double rho = n.c0;
            bool want_h = rg(n.in[0]), want_d = rg(n.in[1]);
            Matrix* dH = want_h ? &ensure_grad(n.in[0]) : nullptr;
            Matrix* dD = want_d ? &ensure_grad(n.in[1]) : nullptr;
            std::vector<double> u(size_t(H.cols));
            for (int i = 0; i < H.rows; ++i) {
                const double* sv = &n.dvec[size_t(i) * 5];
                const double c = sv[0], nh = sv[1], nu = sv[2], s = sv[3];
                const bool clipped = sv[4] != 0.0;
                const double* gr = g.row(i);
                const double* hr = H.row(i);
                const double* dr = D.row(i);
                if (!clipped) {
                    if (dH) {
                        double* dh = dH->row(i);
                        for (int j = 0; j < H.cols; ++j) dh[j] += gr[j];
                    }
                    if (dD) {
                        double* dd = dD->row(i);
                        for (int j = 0; j < H.cols; ++j) dd[j] += s * gr[j];
                    }
                    continue;
                }
                // out = rho*nh/nu * u. Recompute u = h + s*delta.
                double ug = 0.0;
                for (int j = 0; j < H.cols; ++j) {
                    u[size_t(j)] = hr[j] + s * dr[j];
                    ug += u[size_t(j)] * gr[j];
                }
                const double t1 = ug / (nu * nu);
                // du = c*(g - u * (u.g)/nu^2); extra dh term from d(nh)/dh.
                const double hcoef = (nh > 0.0) ? rho * ug / (nu * nh) : 0.0;
                for (int j = 0; j < H.cols; ++j) {
                    double du = c * (gr[j] - u[size_t(j)] * t1);
                    if (dH) dH->row(i)[j] += du + hcoef * hr[j];
                    if (dD) dD->row(i)[j] += s * du;
                }
            }
            break;
        }
        case Op::CeLoss: {
            if (!rg(n.in[0])) break;
            Matrix& d = ensure_grad(n.in[0]);
            const double gscale = g(0, 0) / n.c0; // seed / sum(w)
            for (int t = 0; t < n.aux.rows; ++t) {
                const double w = n.dvec[size_t(t)];
                if (w == 0.0) continue;
                const double* p = n.aux.row(t);
                double* dz = d.row(t);
                const double f = gscale * w;
                for (int j = 0; j < n.aux.cols; ++j) dz[j] += f * p[j];
                dz[n.ivec[size_t(t)]] -= f;
            }
            break;
        }
        case Op::TopKKl: {
            if (!rg(n.in[0])) break;
            Matrix& d = ensure_grad(n.in[0]);
            const int T = n.aux.rows, K = n.aux.cols;
            const double f = g(0, 0) / (n.c0 * T); // seed / (tau * T)
            for (int t = 0; t < T; ++t) {
                const double* ps = n.aux.row(t);
                const double* pt = n.aux2.row(t);
                const int* id = n.ivec.data() + size_t(t) * K;
                double* dz = d.row(t);
                for (int k = 0; k < K; ++k) dz[id[k]] += f * (ps[k] - pt[k]);
            }
            break;
        }
        case Op::Axpby: {
            if (rg(n.in[0])) ensure_grad(n.in[0])(0, 0) += n.c0 * g(0, 0);
            if (rg(n.in[1])) ensure_grad(n.in[1])(0, 0) += n.c1 * g(0, 0);
            break;
        }
    }
}

} // namespace icsteer
