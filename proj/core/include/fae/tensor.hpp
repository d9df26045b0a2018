#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

#include "fae/common.hpp"

namespace fae {

using real = double;
using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Dense row-major tensor of doubles. All compute runs in double; f32 appears
// only in file formats.
struct Tensor {
    Shape shape;
    std::vector<real> v;

    Tensor() = default;
    explicit Tensor(Shape s) : shape(std::move(s)), v(shape_numel(shape), 0.0) {}
    Tensor(Shape s, real fill) : shape(std::move(s)), v(shape_numel(shape), fill) {}
    Tensor(Shape s, std::vector<real> data);

    static Tensor scalar(real x) { return Tensor({1}, std::vector<real>{x}); }

    std::size_t numel() const { return v.size(); }
    int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
    int ndim() const { return static_cast<int>(shape.size()); }

    // 2-D accessors (rows = shape[0], cols = shape[1]).
    int rows() const { return shape.empty() ? 0 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    real& at(int r, int c) { return v[static_cast<std::size_t>(r) * cols() + c]; }
    real at(int r, int c) const { return v[static_cast<std::size_t>(r) * cols() + c]; }

    real* data() { return v.data(); }
    const real* data() const { return v.data(); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
    void fill(real x) { std::fill(v.begin(), v.end(), x); }

    Tensor reshaped(Shape s) const;
};

// C[M,N] += A[M,K] * B[K,N]
void matmul_acc(const Tensor& a, const Tensor& b, Tensor& c);
// C[M,N] += A[M,K] * B[N,K]^T
void matmul_bt_acc(const Tensor& a, const Tensor& b, Tensor& c);
// C[K,N] += A[M,K]^T * B[M,N]
void matmul_at_acc(const Tensor& a, const Tensor& b, Tensor& c);

real dot(const Tensor& a, const Tensor& b);
real l2_norm(const Tensor& a);

void require_same_shape(const Tensor& a, const Tensor& b, const char* op);

} // namespace fae
