#pragma once
#include <cmath>
#include <cstddef>
#include <vector>

namespace icsteer {

// Dense row-major matrix of doubles. All numeric state in the project lives
// in this type; kernels in kernels.hpp operate on it.
struct Matrix {
    int rows = 0, cols = 0;
    std::vector<double> data; // rows*cols, row-major

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), data(size_t(r) * size_t(c), 0.0) {}

    double& operator()(int i, int j) { return data[size_t(i) * cols + j]; }
    double operator()(int i, int j) const { return data[size_t(i) * cols + j]; }

    double* row(int i) { return data.data() + size_t(i) * cols; }
    const double* row(int i) const { return data.data() + size_t(i) * cols; }

    size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }

    void zero() { std::fill(data.begin(), data.end(), 0.0); }

    bool all_finite() const {
        for (double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    bool operator==(const Matrix& o) const {
        return rows == o.rows && cols == o.cols && data == o.data;
    }
};

} // namespace icsteer
