#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace spectree {

// Dense row-major matrix of doubles. All arithmetic in this project runs in
// 64-bit floats so the independent decoding routes agree within 1e-9.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c)
        : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), 0.0) {}

    double* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
    const double* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }
    double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
    std::size_t size() const { return data.size(); }
};

// out = x * W for a length-rows vector x; accumulation order is fixed
// (ascending input index) so every caller sees identical rounding.
void matvec(std::span<const double> x, const Matrix& w, std::span<double> out);

}  // namespace spectree
