#pragma once
#include <cmath>
#include <cstdint>
#include <vector>

#include "icsteer/errors.hpp"
#include "icsteer/matrix.hpp"

namespace icsteer {

// Adam with bias correction and decoupled weight decay fixed at 0. One state
// slot per parameter tensor; updates run serially in canonical parameter
// order, so results are independent of how gradients were produced.
struct AdamState {
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::vector<Matrix> m, v;
    long long t = 0;

    void init_like(const std::vector<Matrix*>& params) {
        m.clear();
        v.clear();
        for (const Matrix* p : params) {
            Matrix zm{p->rows, p->cols};
            Matrix zv{p->rows, p->cols};
            m.push_back(std::move(zm));
            v.push_back(std::move(zv));
        }
        t = 0;
    }

    void step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads, double lr) {
        if (params.size() != grads.size() || params.size() != m.size())
            throw NumericError("adam: parameter/gradient/state size mismatch");
        ++t;
        const double bc1 = 1.0 - std::pow(beta1, double(t));
        const double bc2 = 1.0 - std::pow(beta2, double(t));
        for (size_t i = 0; i < params.size(); ++i) {
            Matrix& p = *params[i];
            const Matrix& g = grads[i];
            for (size_t j = 0; j < p.data.size(); ++j) {
                double gj = g.data[j];
                m[i].data[j] = beta1 * m[i].data[j] + (1.0 - beta1) * gj;
                v[i].data[j] = beta2 * v[i].data[j] + (1.0 - beta2) * gj * gj;
                double mhat = m[i].data[j] / bc1;
                double vhat = v[i].data[j] / bc2;
                p.data[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }
};

// Scales grads in place so their global L2 norm is at most max_norm
// (max_norm <= 0 disables). Returns the pre-clip norm.
inline double clip_global_norm(std::vector<Matrix>& grads, double max_norm) {
    double sq = 0.0;
    for (const Matrix& g : grads)
        for (double x : g.data) sq += x * x;
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        double s = max_norm / norm;
        for (Matrix& g : grads)
            for (double& x : g.data) x *= s;
    }
    return norm;
}

} // namespace icsteer
