#include "icsteer/kernels.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstring>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "icsteer/errors.hpp"

namespace icsteer::num {

void set_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
    // Kernels are also called from parallel regions (for example per-case
    // loops in training); nested parallelism stays off so they degrade to
    // serial there and results are independent of the thread count.
    omp_set_max_active_levels(1);
#else
    (void)n;
#endif
}

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

// ---- matmul family ----
// Loop order is i-k-j with the k-accumulation into the output row done in
// ascending k order. Parallelism is over i (rows of C) only, so each output
// element sees one fixed accumulation order regardless of thread count.

void matmul(const Matrix& A, const Matrix& B, Matrix& C) {
    assert(A.cols == B.rows);
    if (C.rows != A.rows || C.cols != B.cols) C = Matrix(A.rows, B.cols);
    const int m = A.rows, k = A.cols, n = B.cols;
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        double* ci = C.row(i);
        std::memset(ci, 0, sizeof(double) * size_t(n));
        const double* ai = A.row(i);
        for (int p = 0; p < k; ++p) {
            const double a = ai[p];
            const double* bp = B.row(p);
            for (int j = 0; j < n; ++j) ci[j] += a * bp[j];
        }
    }
}

void matmul_bt(const Matrix& A, const Matrix& B, Matrix& C) {
    assert(A.cols == B.cols);
    if (C.rows != A.rows || C.cols != B.rows) C = Matrix(A.rows, B.rows);
    const int m = A.rows, k = A.cols, n = B.rows;
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        const double* ai = A.row(i);
        double* ci = C.row(i);
        for (int j = 0; j < n; ++j) {
            const double* bj = B.row(j);
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] = s;
        }
    }
}

void matmul_tn(const Matrix& A, const Matrix& B, Matrix& C) {
    assert(A.rows == B.rows);
    if (C.rows != A.cols || C.cols != B.cols) C = Matrix(A.cols, B.cols);
    const int m = A.rows, k = A.cols, n = B.cols;
#pragma omp parallel for schedule(static)
    for (int r = 0; r < k; ++r) {
        double* cr = C.row(r);
        std::memset(cr, 0, sizeof(double) * size_t(n));
        for (int i = 0; i < m; ++i) {
            const double a = A(i, r);
            const double* bi = B.row(i);
            for (int j = 0; j < n; ++j) cr[j] += a * bi[j];
        }
    }
}

// ---- layernorm ----

static inline void layernorm_row(const double* x, const double* g, const double* b, int n,
                                 double eps, double* y, double& mean_out, double& rstd_out) {
    double m = 0.0;
    for (int j = 0; j < n; ++j) m += x[j];
    m /= n;
    double v = 0.0;
    for (int j = 0; j < n; ++j) {
        double d = x[j] - m;
        v += d * d;
    }
    v /= n;
    double rstd = 1.0 / std::sqrt(v + eps);
    for (int j = 0; j < n; ++j) y[j] = g[j] * ((x[j] - m) * rstd) + b[j];
    mean_out = m;
    rstd_out = rstd;
}

void layernorm(const Matrix& X, const Matrix& gamma, const Matrix& beta, double eps, Matrix& Y,
               std::vector<double>& mean, std::vector<double>& rstd) {
    assert(gamma.cols == X.cols && beta.cols == X.cols);
    if (!Y.same_shape(X)) Y = Matrix(X.rows, X.cols);
    mean.resize(size_t(X.rows));
    rstd.resize(size_t(X.rows));
#pragma omp parallel for schedule(static)
    for (int i = 0; i < X.rows; ++i)
        layernorm_row(X.row(i), gamma.row(0), beta.row(0), X.cols, eps, Y.row(i),
                      mean[size_t(i)], rstd[size_t(i)]);
}

void layernorm_backward(const Matrix& X, const Matrix& gamma, const std::vector<double>& mean,
                        const std::vector<double>& rstd, const Matrix& dY, Matrix& dX,
                        Matrix* dgamma, Matrix* dbeta) {
    const int n = X.cols;
    if (!dX.same_shape(X)) dX = Matrix(X.rows, X.cols);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < X.rows; ++i) {
        const double* x = X.row(i);
        const double* dy = dY.row(i);
        const double* g = gamma.row(0);
        double* dx = dX.row(i);
        const double mu = mean[size_t(i)], rs = rstd[size_t(i)];
        double s1 = 0.0, s2 = 0.0; // mean(dy*g), mean(dy*g*xhat)
        for (int j = 0; j < n; ++j) {
            double xh = (x[j] - mu) * rs;
            double t = dy[j] * g[j];
            s1 += t;
            s2 += t * xh;
        }
        s1 /= n;
        s2 /= n;
        for (int j = 0; j < n; ++j) {
            double xh = (x[j] - mu) * rs;
            dx[j] += rs * (dy[j] * g[j] - s1 - xh * s2);
        }
    }
    // Parameter grads are reduced serially in row order (deterministic).
    if (dgamma || dbeta) {
        for (int i = 0; i < X.rows; ++i) {
            const double* x = X.row(i);
            const double* dy = dY.row(i);
            const double mu = mean[size_t(i)], rs = rstd[size_t(i)];
            for (int j = 0; j < n; ++j) {
                if (dgamma) (*dgamma)(0, j) += dy[j] * (x[j] - mu) * rs;
                if (dbeta) (*dbeta)(0, j) += dy[j];
            }
        }
    }
}

// ---- gelu ----

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.70710678118654752440)); }

double gelu_grad_scalar(double x) {
    double cdf = 0.5 * (1.0 + std::erf(x * 0.70710678118654752440));
    double pdf = std::exp(-0.5 * x * x) * 0.39894228040143267794; // 1/sqrt(2*pi)
    return cdf + x * pdf;
}

void gelu(const Matrix& X, Matrix& Y) {
    if (!Y.same_shape(X)) Y = Matrix(X.rows, X.cols);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < X.rows; ++i) {
        const double* x = X.row(i);
        double* y = Y.row(i);
        for (int j = 0; j < X.cols; ++j) y[j] = gelu_scalar(x[j]);
    }
}

void gelu_backward(const Matrix& X, const Matrix& dY, Matrix& dX) {
    if (!dX.same_shape(X)) dX = Matrix(X.rows, X.cols);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < X.rows; ++i) {
        const double* x = X.row(i);
        const double* dy = dY.row(i);
        double* dx = dX.row(i);
        for (int j = 0; j < X.cols; ++j) dx[j] += dy[j] * gelu_grad_scalar(x[j]);
    }
}

// ---- causal softmax ----

void causal_softmax(Matrix& S) {
    assert(S.rows == S.cols || S.rows <= S.cols);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < S.rows; ++i) {
        double* s = S.row(i);
        const int lim = i + 1; // causal prefix
        double mx = s[0];
        for (int j = 1; j < lim; ++j) mx = std::max(mx, s[j]);
        double z = 0.0;
        for (int j = 0; j < lim; ++j) {
            s[j] = std::exp(s[j] - mx);
            z += s[j];
        }
        double inv = 1.0 / z;
        for (int j = 0; j < lim; ++j) s[j] *= inv;
        for (int j = lim; j < S.cols; ++j) s[j] = 0.0;
    }
}

void causal_softmax_backward(const Matrix& P, const Matrix& dP, Matrix& dS) {
    if (!dS.same_shape(P)) dS = Matrix(P.rows, P.cols);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < P.rows; ++i) {
        const double* p = P.row(i);
        const double* dp = dP.row(i);
        double* ds = dS.row(i);
        const int lim = i + 1;
        double dot = 0.0;
        for (int j = 0; j < lim; ++j) dot += p[j] * dp[j];
        for (int j = 0; j < lim; ++j) ds[j] += p[j] * (dp[j] - dot);
    }
}

// ---- serial reference implementations ----

namespace serial {

void matmul(const Matrix& A, const Matrix& B, Matrix& C) {
    assert(A.cols == B.rows);
    if (C.rows != A.rows || C.cols != B.cols) C = Matrix(A.rows, B.cols);
    const int m = A.rows, k = A.cols, n = B.cols;
    for (int i = 0; i < m; ++i) {
        double* ci = C.row(i);
        std::memset(ci, 0, sizeof(double) * size_t(n));
        const double* ai = A.row(i);
        for (int p = 0; p < k; ++p) {
            const double a = ai[p];
            const double* bp = B.row(p);
            for (int j = 0; j < n; ++j) ci[j] += a * bp[j];
        }
    }
}

void matmul_bt(const Matrix& A, const Matrix& B, Matrix& C) {
    assert(A.cols == B.cols);
    if (C.rows != A.rows || C.cols != B.rows) C = Matrix(A.rows, B.rows);
    const int m = A.rows, k = A.cols, n = B.rows;
    for (int i = 0; i < m; ++i) {
        const double* ai = A.row(i);
        double* ci = C.row(i);
        for (int j = 0; j < n; ++j) {
            const double* bj = B.row(j);
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
            ci[j] = s;
        }
    }
}

void matmul_tn(const Matrix& A, const Matrix& B, Matrix& C) {
    assert(A.rows == B.rows);
    if (C.rows != A.cols || C.cols != B.cols) C = Matrix(A.cols, B.cols);
    const int m = A.rows, k = A.cols, n = B.cols;
    for (int r = 0; r < k; ++r) {
        double* cr = C.row(r);
        std::memset(cr, 0, sizeof(double) * size_t(n));
        for (int i = 0; i < m; ++i) {
            const double a = A(i, r);
            const double* bi = B.row(i);
            for (int j = 0; j < n; ++j) cr[j] += a * bi[j];
        }
    }
}

void layernorm(const Matrix& X, const Matrix& gamma, const Matrix& beta, double eps, Matrix& Y,
               std::vector<double>& mean, std::vector<double>& rstd) {
    if (!Y.same_shape(X)) Y = Matrix(X.rows, X.cols);
    mean.resize(size_t(X.rows));
    rstd.resize(size_t(X.rows));
    for (int i = 0; i < X.rows; ++i)
        layernorm_row(X.row(i), gamma.row(0), beta.row(0), X.cols, eps, Y.row(i),
                      mean[size_t(i)], rstd[size_t(i)]);
}

void gelu(const Matrix& X, Matrix& Y) {
    if (!Y.same_shape(X)) Y = Matrix(X.rows, X.cols);
    for (int i = 0; i < X.rows; ++i) {
        const double* x = X.row(i);
        double* y = Y.row(i);
        for (int j = 0; j < X.cols; ++j) y[j] = gelu_scalar(x[j]);
    }
}

void causal_softmax(Matrix& S) {
    for (int i = 0; i < S.rows; ++i) {
        double* s = S.row(i);
        const int lim = i + 1;
        double mx = s[0];
        for (int j = 1; j < lim; ++j) mx = std::max(mx, s[j]);
        double z = 0.0;
        for (int j = 0; j < lim; ++j) {
            s[j] = std::exp(s[j] - mx);
            z += s[j];
        }
        double inv = 1.0 / z;
        for (int j = 0; j < lim; ++j) s[j] *= inv;
        for (int j = lim; j < S.cols; ++j) s[j] = 0.0;
    }
}

} // namespace serial

// ---- scalar / row helpers ----

double logsumexp(std::span<const double> x) {
    double mx = x[0];
    for (double v : x) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : x) z += std::exp(v - mx);
    return mx + std::log(z);
}

std::vector<double> softmax(std::span<const double> logits, double temperature) {
    if (!(temperature > 0.0) || !std::isfinite(temperature))
        throw NumericError("softmax: temperature must be finite and > 0");
    if (logits.empty()) throw NumericError("softmax: empty logit vector");
    for (double v : logits)
        if (!std::isfinite(v)) throw NumericError("softmax: non-finite logit");
    std::vector<double> out(logits.size());
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double z = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp((logits[i] - mx) / temperature);
        z += out[i];
    }
    double inv = 1.0 / z;
    for (double& v : out) v *= inv;
    return out;
}

double cross_entropy(std::span<const double> logits, int target) {
    if (target < 0 || size_t(target) >= logits.size())
        throw NumericError("cross_entropy: target index out of range");
    for (double v : logits)
        if (!std::isfinite(v)) throw NumericError("cross_entropy: non-finite logit");
    return logsumexp(logits) - logits[size_t(target)];
}

} // namespace icsteer::num
