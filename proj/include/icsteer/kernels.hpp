#pragma once
#include <span>
#include <vector>

#include "icsteer/matrix.hpp"

namespace icsteer::num {

// Threading control. set_threads(0) keeps the current setting.
void set_threads(int n);
int max_threads();

// ---- dense kernels (OpenMP over output rows) ----
// Each output element is accumulated in a fixed serial order, so results are
// bit-identical for any thread count and identical to the serial:: variants.

// C = A * B          (A: m x k, B: k x n, C: m x n; C overwritten)
void matmul(const Matrix& A, const Matrix& B, Matrix& C);
// C = A * B^T        (A: m x k, B: n x k, C: m x n)
void matmul_bt(const Matrix& A, const Matrix& B, Matrix& C);
// C = A^T * B        (A: m x k, B: m x n, C: k x n)
void matmul_tn(const Matrix& A, const Matrix& B, Matrix& C);

// Y = X with each row normalized: y = g * (x - mean) / sqrt(var + eps) + b.
// mean/rstd (1 per row) are saved for the backward pass.
void layernorm(const Matrix& X, const Matrix& gamma, const Matrix& beta, double eps,
               Matrix& Y, std::vector<double>& mean, std::vector<double>& rstd);

// Backward of layernorm. dgamma/dbeta accumulated only when non-null.
void layernorm_backward(const Matrix& X, const Matrix& gamma, const std::vector<double>& mean,
                        const std::vector<double>& rstd, const Matrix& dY, Matrix& dX,
                        Matrix* dgamma, Matrix* dbeta);

// Exact (erf-based) GELU, elementwise.
void gelu(const Matrix& X, Matrix& Y);
// dX += dY * gelu'(X)
void gelu_backward(const Matrix& X, const Matrix& dY, Matrix& dX);

// In-place causal row softmax over scores S (T x T): row i uses columns 0..i,
// the rest are set to 0. Scores are pre-scaled by the caller.
void causal_softmax(Matrix& S);
// dS from saved probabilities P and upstream dP (causal layout preserved).
void causal_softmax_backward(const Matrix& P, const Matrix& dP, Matrix& dS);

// ---- serial reference implementations ----
// Kept deliberately: tests assert bit-identical results against the parallel
// kernels above, and the benchmark target compares their throughput.
namespace serial {
void matmul(const Matrix& A, const Matrix& B, Matrix& C);
void matmul_bt(const Matrix& A, const Matrix& B, Matrix& C);
void matmul_tn(const Matrix& A, const Matrix& B, Matrix& C);
void layernorm(const Matrix& X, const Matrix& gamma, const Matrix& beta, double eps,
               Matrix& Y, std::vector<double>& mean, std::vector<double>& rstd);
void gelu(const Matrix& X, Matrix& Y);
void causal_softmax(Matrix& S);
} // namespace serial

// ---- scalar / row helpers ----

double gelu_scalar(double x);
double gelu_grad_scalar(double x);

// log(sum(exp(x))) with max subtraction.
double logsumexp(std::span<const double> x);

// Softmax of a vector at a temperature. Rejects non-finite inputs and
// temperature <= 0 with NumericError. Returns a probability vector.
std::vector<double> softmax(std::span<const double> logits, double temperature);

// -log softmax(logits)[target] at temperature 1 (the temperature knob in this
// project applies to the distribution-matching loss only, never to CE).
// Rejects out-of-range targets with NumericError.
double cross_entropy(std::span<const double> logits, int target);

// ---- gradient checking ----

struct GradCheckResult {
    double max_rel_err = 0.0; // max_i |analytic_i - fd_i| / max(1, |fd_i|)
    int worst_coord = -1;
    double analytic_at_worst = 0.0;
    double fd_at_worst = 0.0;
};

// Central-difference check of an analytic gradient of f at params.
// f receives a full parameter vector and returns a scalar.
template <typename F>
GradCheckResult grad_check(F&& f, std::span<const double> params,
                           std::span<const double> analytic_grad, double eps) {
    GradCheckResult res;
    std::vector<double> x(params.begin(), params.end());
    for (size_t i = 0; i < x.size(); ++i) {
        double keep = x[i];
        x[i] = keep + eps;
        double fp = f(std::span<const double>(x));
        x[i] = keep - eps;
        double fm = f(std::span<const double>(x));
        x[i] = keep;
        double fd = (fp - fm) / (2.0 * eps);
        double denom = std::abs(fd) > 1.0 ? std::abs(fd) : 1.0;
        double rel = std::abs(analytic_grad[i] - fd) / denom;
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_coord = int(i);
            res.analytic_at_worst = analytic_grad[i];
            res.fd_at_worst = fd;
        }
    }
    return res;
}

} // namespace icsteer::num
