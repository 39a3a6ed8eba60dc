#pragma once

// Dense row-major float64 tensors and the raw kernels used by both the eager
// and the recorded (autodiff) code paths. Every kernel here is deterministic:
// reductions run in a fixed index order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace gmem {

using Shape = std::vector<std::size_t>;

struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct InputError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ConfigError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};
struct NumericalError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
        for (auto d : shape_) {
            if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape_));
        }
        data_.assign(shape_numel(shape_), fill);
    }

    Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
        if (shape_numel(shape_) != data_.size()) {
            throw DimensionError("shape " + shape_str(shape_) + " does not match " +
                                 std::to_string(data_.size()) + " values");
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t m = rows.size();
        const std::size_t n = m ? rows.begin()->size() : 0;
        std::vector<double> data;
        data.reserve(m * n);
        for (const auto& r : rows) {
            if (r.size() != n) throw DimensionError("ragged matrix literal");
            data.insert(data.end(), r.begin(), r.end());
        }
        return Tensor({m, n}, std::move(data));
    }

    static Tensor vector(std::initializer_list<double> v) {
        return Tensor({v.size()}, std::vector<double>(v));
    }

    static Tensor identity(std::size_t n) {
        Tensor t({n, n});
        for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
        return t;
    }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t rows() const {
        require_matrix("rows");
        return shape_[0];
    }
    std::size_t cols() const {
        require_matrix("cols");
        return shape_[1];
    }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& operator()(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::vector<double>& values() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double item() const {
        if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape_));
        return data_[0];
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    Tensor reshaped(Shape s) const { return Tensor(std::move(s), data_); }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

private:
    void require_matrix(const char* what) const {
        if (shape_.size() != 2) throw DimensionError(std::string(what) + ": expected a matrix, got " + shape_str(shape_));
    }

    Shape shape_;
    std::vector<double> data_;
};

namespace kernel {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
}

inline void require_matrix(const Tensor& a, const char* op) {
    if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

// a[m×k] · b[k×n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.cols() != b.rows()) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out({m, n});
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = po + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = pa[i * k + p];
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

// a[m×k] · b[n×k]ᵀ
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    if (a.cols() != b.cols()) {
        throw DimensionError("matmul_nt: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()) + "^T");
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a.data() + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b.data() + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            out(i, j) = acc;
        }
    }
    return out;
}

// a[k×m]ᵀ · b[k×n]
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_tn");
    require_matrix(b, "matmul_tn");
    if (a.rows() != b.rows()) {
        throw DimensionError("matmul_tn: inner dimensions differ, " + shape_str(a.shape()) + "^T x " + shape_str(b.shape()));
    }
    const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
    Tensor out({m, n});
    double* po = out.data();
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a.data() + p * m;
        const double* brow = b.data() + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const double av = arow[i];
            double* orow = po + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    }
    return out;
}

inline Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    Tensor out({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
    return out;
}

template <class F>
Tensor map(const Tensor& a, F f) {
    Tensor out = a;
    for (auto& v : out.values()) v = f(v);
    return out;
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
    require_same_shape(a, b, op);
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) { return zip(a, b, "add", [](double x, double y) { return x + y; }); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return zip(a, b, "sub", [](double x, double y) { return x - y; }); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return zip(a, b, "mul", [](double x, double y) { return x * y; }); }
inline Tensor scale(const Tensor& a, double c) { return map(a, [c](double x) { return x * c; }); }

inline void add_into(Tensor& acc, const Tensor& g) {
    require_same_shape(acc, g, "accumulate");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

// x[m×n] + b[n] broadcast over rows
inline Tensor add_row(const Tensor& x, const Tensor& b) {
    require_matrix(x, "add_row");
    if (b.size() != x.cols()) {
        throw DimensionError("add_row: bias " + shape_str(b.shape()) + " does not match " + shape_str(x.shape()));
    }
    Tensor out = x;
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) += b[j];
    return out;
}

inline Tensor sum_rows(const Tensor& x) {
    require_matrix(x, "sum_rows");
    Tensor out({x.cols()});
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out[j] += x(i, j);
    return out;
}

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) { return map(x, [](double v) { return sigmoid(v); }); }
inline Tensor tanh(const Tensor& x) { return map(x, [](double v) { return std::tanh(v); }); }

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

inline double gelu_grad(double x) {
    const double u = kGeluC * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

inline Tensor gelu(const Tensor& x) { return map(x, [](double v) { return gelu(v); }); }

// Row-wise softmax over the first `limit(i)` columns; remaining columns are 0.
template <class Limit>
Tensor softmax_rows_prefix(const Tensor& x, Limit limit) {
    require_matrix(x, "softmax_rows");
    Tensor out({x.rows(), x.cols()});
    for (std::size_t i = 0; i < x.rows(); ++i) {
        const std::size_t n = limit(i);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double e = std::exp(x(i, j) - mx);
            out(i, j) = e;
            sum += e;
        }
        for (std::size_t j = 0; j < n; ++j) out(i, j) /= sum;
    }
    return out;
}

inline Tensor softmax_rows(const Tensor& x) {
    require_matrix(x, "softmax_rows");
    const std::size_t n = x.cols();
    return softmax_rows_prefix(x, [n](std::size_t) { return n; });
}

// Lower-triangular (causal) softmax: row i normalises over columns 0..i.
inline Tensor causal_softmax_rows(const Tensor& x) {
    require_matrix(x, "causal_softmax_rows");
    if (x.rows() != x.cols()) throw DimensionError("causal_softmax_rows: expected square, got " + shape_str(x.shape()));
    return softmax_rows_prefix(x, [](std::size_t i) { return i + 1; });
}

// dL/dx for y = softmax(x) row-wise: y ⊙ (g − <g, y>)
inline Tensor softmax_rows_backward(const Tensor& y, const Tensor& g) {
    Tensor dx({y.rows(), y.cols()});
    for (std::size_t i = 0; i < y.rows(); ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < y.cols(); ++j) dot += g(i, j) * y(i, j);
        for (std::size_t j = 0; j < y.cols(); ++j) dx(i, j) = y(i, j) * (g(i, j) - dot);
    }
    return dx;
}

constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
    Tensor xhat;               // normalised input
    std::vector<double> rstd;  // 1/sqrt(var+eps) per row
};

inline Tensor layernorm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias, LayerNormCache* cache = nullptr) {
    require_matrix(x, "layernorm_rows");
    const std::size_t m = x.rows(), n = x.cols();
    if (gain.size() != n || bias.size() != n) {
        throw DimensionError("layernorm_rows: affine params do not match " + shape_str(x.shape()));
    }
    Tensor out({m, n});
    Tensor xhat({m, n});
    std::vector<double> rstd(m);
    for (std::size_t i = 0; i < m; ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += x(i, j);
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            const double d = x(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<double>(n);
        rstd[i] = 1.0 / std::sqrt(var + kLayerNormEps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat(i, j) = (x(i, j) - mean) * rstd[i];
            out(i, j) = xhat(i, j) * gain[j] + bias[j];
        }
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->rstd = std::move(rstd);
    }
    return out;
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
    require_matrix(a, "concat_last_dim");
    require_matrix(b, "concat_last_dim");
    if (a.rows() != b.rows()) {
        throw DimensionError("concat_last_dim: row counts differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), na = a.cols(), nb = b.cols();
    Tensor out({m, na + nb});
    for (std::size_t i = 0; i < m; ++i) {
        std::copy_n(a.data() + i * na, na, out.data() + i * (na + nb));
        std::copy_n(b.data() + i * nb, nb, out.data() + i * (na + nb) + na);
    }
    return out;
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
    require_matrix(a, "slice_cols");
    if (begin >= end || end > a.cols()) throw DimensionError("slice_cols: bad range for " + shape_str(a.shape()));
    Tensor out({a.rows(), end - begin});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = a(i, j);
    return out;
}

}  // namespace kernel
}  // namespace gmem
