#include "fae/tensor.hpp"

#include <algorithm>
#include <cstring>
#include <sstream>

namespace fae {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << ")";
    return os.str();
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) {
        if (d < 0) throw shape_error("negative extent in shape " + shape_str(s));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

Tensor::Tensor(Shape s, std::vector<real> data) : shape(std::move(s)), v(std::move(data)) {
    if (v.size() != shape_numel(shape))
        throw shape_error("value count " + std::to_string(v.size()) +
                          " does not match shape " + shape_str(shape));
}

bool Tensor::all_finite() const {
    for (real x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

Tensor Tensor::reshaped(Shape s) const {
    if (shape_numel(s) != numel())
        throw shape_error("reshape " + shape_str(shape) + " -> " + shape_str(s));
    Tensor out;
    out.shape = std::move(s);
    out.v = v;
    return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape) +
                          " vs " + shape_str(b.shape));
}

static void require_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2)
        throw shape_error(std::string(op) + ": expected 2-D tensor, got " + shape_str(t.shape));
}

void matmul_acc(const Tensor& a, const Tensor& b, Tensor& c) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const int m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k || c.rows() != m || c.cols() != n)
        throw shape_error("matmul: " + shape_str(a.shape) + " x " + shape_str(b.shape) +
                          " -> " + shape_str(c.shape));
    const real* pa = a.data();
    const real* pb = b.data();
    real* pc = c.data();
    for (int i = 0; i < m; ++i) {
        const real* arow = pa + static_cast<std::size_t>(i) * k;
        real* crow = pc + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const real av = arow[kk];
            if (av == 0.0) continue;
            const real* brow = pb + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

void matmul_bt_acc(const Tensor& a, const Tensor& b, Tensor& c) {
    require_2d(a, "matmul_bt");
    require_2d(b, "matmul_bt");
    const int m = a.rows(), k = a.cols(), n = b.rows();
    if (b.cols() != k || c.rows() != m || c.cols() != n)
        throw shape_error("matmul_bt: " + shape_str(a.shape) + " x " + shape_str(b.shape) +
                          "^T -> " + shape_str(c.shape));
    for (int i = 0; i < m; ++i) {
        const real* arow = a.data() + static_cast<std::size_t>(i) * k;
        real* crow = c.data() + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const real* brow = b.data() + static_cast<std::size_t>(j) * k;
            real acc = 0.0;
            for (int kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
            crow[j] += acc;
        }
    }
}

void matmul_at_acc(const Tensor& a, const Tensor& b, Tensor& c) {
    require_2d(a, "matmul_at");
    require_2d(b, "matmul_at");
    const int m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != m || c.rows() != k || c.cols() != n)
        throw shape_error("matmul_at: " + shape_str(a.shape) + "^T x " + shape_str(b.shape) +
                          " -> " + shape_str(c.shape));
    for (int i = 0; i < m; ++i) {
        const real* arow = a.data() + static_cast<std::size_t>(i) * k;
        const real* brow = b.data() + static_cast<std::size_t>(i) * n;
        for (int kk = 0; kk < k; ++kk) {
            const real av = arow[kk];
            if (av == 0.0) continue;
            real* crow = c.data() + static_cast<std::size_t>(kk) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

real dot(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "dot");
    real s = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) s += a.v[i] * b.v[i];
    return s;
}

real l2_norm(const Tensor& a) {
    real s = 0.0;
    for (real x : a.v) s += x * x;
    return std::sqrt(s);
}

} // namespace fae
