#include "padapt/tensor.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace padapt {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

static void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

void check_finite(const Tensor& t, const char* op) {
#ifndef NDEBUG
    for (float v : t.vec()) {
        if (!std::isfinite(v)) {
            throw std::runtime_error(std::string("non-finite value produced by ") + op);
        }
    }
#else
    (void)t;
    (void)op;
#endif
}

Tensor Tensor::make(Shape shape, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data.assign(static_cast<size_t>(shape_numel(impl->shape)), 0.0f);
    impl->requires_grad = requires_grad;
    impl->needs_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return make(std::move(shape), requires_grad); }

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
    Tensor t = make(std::move(shape), requires_grad);
    std::fill(t.vec().begin(), t.vec().end(), value);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<float> data, bool requires_grad) {
    require(shape_numel(shape) == static_cast<int64_t>(data.size()),
            "tensor data length " + std::to_string(data.size()) + " does not match shape " +
                shape_str(shape));
    Tensor t = make(std::move(shape), requires_grad);
    t.vec() = std::move(data);
    return t;
}

float Tensor::item() const {
    require(numel() == 1, "item() on non-scalar tensor " + shape_str(shape()));
    return p_->data[0];
}

void Tensor::set_requires_grad(bool v) {
    p_->requires_grad = v;
    p_->needs_grad = v;
}

void Tensor::ensure_grad() {
    if (p_->grad.empty()) p_->grad.assign(p_->data.size(), 0.0f);
}

void Tensor::zero_grad() {
    if (!p_->grad.empty()) std::fill(p_->grad.begin(), p_->grad.end(), 0.0f);
}

Tensor Tape::make_output(Shape shape, std::initializer_list<Tensor> inputs) {
    Tensor out = Tensor::make(std::move(shape), false);
    bool needs = false;
    for (const Tensor& t : inputs) needs = needs || t.needs_grad();
    out.impl()->needs_grad = needs;
    return out;
}

static bool out_has_grad(const Tensor& out) { return out.has_grad(); }

// ---------------------------------------------------------------------------
// matmul

Tensor Tape::matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == 2 && b.rank() == 2,
            "matmul expects rank-2 tensors, got " + shape_str(a.shape()) + " and " +
                shape_str(b.shape()));
    require(a.dim(1) == b.dim(0),
            "matmul inner dimensions disagree: " + shape_str(a.shape()) + " vs " +
                shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out = make_output({m, n}, {a, b});

    ECMap A(a.data(), m, k), B(b.data(), k, n);
    EMap O(out.data(), m, n);
    O.noalias() = A * B;
    check_finite(out, "matmul");

    if (out.needs_grad()) {
        record([a, b, out, m, k, n]() {
            if (!out_has_grad(out)) return;
            ECMap A(a.data(), m, k), B(b.data(), k, n), dO(out.grad(), m, n);
            if (wants_grad(a)) {
                Tensor ta = a;
                ta.ensure_grad();
                EMap dA(ta.grad(), m, k);
                dA.noalias() += dO * B.transpose();
            }
            if (wants_grad(b)) {
                Tensor tb = b;
                tb.ensure_grad();
                EMap dB(tb.grad(), k, n);
                dB.noalias() += A.transpose() * dO;
            }
        });
    }
    return out;
}

Tensor Tape::transpose(const Tensor& a) {
    require(a.rank() == 2, "transpose expects rank-2 tensor, got " + shape_str(a.shape()));
    const int64_t m = a.dim(0), n = a.dim(1);
    Tensor out = make_output({n, m}, {a});
    ECMap A(a.data(), m, n);
    EMap O(out.data(), n, m);
    O.noalias() = A.transpose();
    if (out.needs_grad()) {
        record([a, out, m, n]() {
            if (!out_has_grad(out) || !wants_grad(a)) return;
            Tensor ta = a;
            ta.ensure_grad();
            ECMap dO(out.grad(), n, m);
            EMap dA(ta.grad(), m, n);
            dA.noalias() += dO.transpose();
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(),
            "add shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = make_output(a.shape(), {a, b});
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (out.needs_grad()) {
        record([a, b, out, n]() {
            if (!out_has_grad(out)) return;
            for (const Tensor* t : {&a, &b}) {
                if (!wants_grad(*t)) continue;
                Tensor tt = *t;
                tt.ensure_grad();
                for (int64_t i = 0; i < n; ++i) tt.grad()[i] += out.grad()[i];
            }
        });
    }
    return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(),
            "mul shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor out = make_output(a.shape(), {a, b});
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (out.needs_grad()) {
        record([a, b, out, n]() {
            if (!out_has_grad(out)) return;
            if (wants_grad(a)) {
                Tensor ta = a;
                ta.ensure_grad();
                for (int64_t i = 0; i < n; ++i) ta.grad()[i] += out.grad()[i] * b.data()[i];
            }
            if (wants_grad(b)) {
                Tensor tb = b;
                tb.ensure_grad();
                for (int64_t i = 0; i < n; ++i) tb.grad()[i] += out.grad()[i] * a.data()[i];
            }
        });
    }
    return out;
}

Tensor Tape::scale_by_scalar(const Tensor& a, float c) {
    Tensor out = make_output(a.shape(), {a});
    const int64_t n = a.numel();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    if (out.needs_grad()) {
        record([a, out, c, n]() {
            if (!out_has_grad(out) || !wants_grad(a)) return;
            Tensor ta = a;
            ta.ensure_grad();
            for (int64_t i = 0; i < n; ++i) ta.grad()[i] += out.grad()[i] * c;
        });
    }
    return out;
}

Tensor Tape::scale_by(const Tensor& a, const Tensor& s) {
    require(s.numel() == 1, "scale_by expects a 1-element scalar tensor, got " + shape_str(s.shape()));
    Tensor out = make_output(a.shape(), {a, s});
    const int64_t n = a.numel();
    const float c = s.data()[0];
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
    if (out.needs_grad()) {
        record([a, s, out, n]() {
            if (!out_has_grad(out)) return;
            const float c = s.data()[0];
            if (wants_grad(a)) {
                Tensor ta = a;
                ta.ensure_grad();
                for (int64_t i = 0; i < n; ++i) ta.grad()[i] += out.grad()[i] * c;
            }
            if (wants_grad(s)) {
                Tensor ts = s;
                ts.ensure_grad();
                double acc = 0.0;
                for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(out.grad()[i]) * a.data()[i];
                ts.grad()[0] += static_cast<float>(acc);
            }
        });
    }
    return out;
}

static void require_rowvec(const Tensor& x, const Tensor& v, const char* op) {
    require(x.rank() >= 1 && v.rank() == 1 && x.dim(x.rank() - 1) == v.dim(0),
            std::string(op) + " shape mismatch: " + shape_str(x.shape()) + " vs " +
                shape_str(v.shape()));
}

Tensor Tape::add_rowvec(const Tensor& x, const Tensor& b) {
    require_rowvec(x, b, "add_rowvec");
    const int64_t d = b.dim(0), rows = x.numel() / d;
    Tensor out = make_output(x.shape(), {x, b});
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) out.data()[r * d + j] = x.data()[r * d + j] + b.data()[j];
    if (out.needs_grad()) {
        record([x, b, out, rows, d]() {
            if (!out_has_grad(out)) return;
            if (wants_grad(x)) {
                Tensor tx = x;
                tx.ensure_grad();
                const int64_t n = rows * d;
                for (int64_t i = 0; i < n; ++i) tx.grad()[i] += out.grad()[i];
            }
            if (wants_grad(b)) {
                Tensor tb = b;
                tb.ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < d; ++j) tb.grad()[j] += out.grad()[r * d + j];
            }
        });
    }
    return out;
}

Tensor Tape::mul_rowvec(const Tensor& x, const Tensor& s) {
    require_rowvec(x, s, "mul_rowvec");
    const int64_t d = s.dim(0), rows = x.numel() / d;
    Tensor out = make_output(x.shape(), {x, s});
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) out.data()[r * d + j] = x.data()[r * d + j] * s.data()[j];
    if (out.needs_grad()) {
        record([x, s, out, rows, d]() {
            if (!out_has_grad(out)) return;
            if (wants_grad(x)) {
                Tensor tx = x;
                tx.ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < d; ++j)
                        tx.grad()[r * d + j] += out.grad()[r * d + j] * s.data()[j];
            }
            if (wants_grad(s)) {
                Tensor ts = s;
                ts.ensure_grad();
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t j = 0; j < d; ++j)
                        ts.grad()[j] += out.grad()[r * d + j] * x.data()[r * d + j];
            }
        });
    }
    return out;
}

Tensor Tape::silu(const Tensor& x) {
    Tensor out = make_output(x.shape(), {x});
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) {
        const float v = x.data()[i];
        out.data()[i] = v / (1.0f + std::exp(-v));
    }
    if (out.needs_grad()) {
        record([x, out, n]() {
            if (!out_has_grad(out) || !wants_grad(x)) return;
            Tensor tx = x;
            tx.ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                const float v = x.data()[i];
                const float sig = 1.0f / (1.0f + std::exp(-v));
                tx.grad()[i] += out.grad()[i] * (sig * (1.0f + v * (1.0f - sig)));
            }
        });
    }
    return out;
}

Tensor Tape::sum(const Tensor& x) {
    Tensor out = make_output({1}, {x});
    double acc = 0.0;
    for (float v : x.vec()) acc += v;
    out.data()[0] = static_cast<float>(acc);
    if (out.needs_grad()) {
        record([x, out]() {
            if (!out_has_grad(out) || !wants_grad(x)) return;
            Tensor tx = x;
            tx.ensure_grad();
            const float g = out.grad()[0];
            for (int64_t i = 0; i < x.numel(); ++i) tx.grad()[i] += g;
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// normalizations

Tensor Tape::softmax_rows(const Tensor& x) {
    require(x.rank() >= 1, "softmax_rows expects rank >= 1");
    const int64_t n = x.dim(x.rank() - 1);
    require(n >= 1, "softmax_rows needs a non-empty trailing dimension");
    const int64_t rows = x.numel() / n;
    Tensor out = make_output(x.shape(), {x});
    for (int64_t r = 0; r < rows; ++r) {
        const float* xi = x.data() + r * n;
        float* yi = out.data() + r * n;
        float mx = xi[0];
        for (int64_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
        double denom = 0.0;
        for (int64_t j = 0; j < n; ++j) {
            yi[j] = std::exp(xi[j] - mx);
            denom += yi[j];
        }
        const float inv = static_cast<float>(1.0 / denom);
        for (int64_t j = 0; j < n; ++j) yi[j] *= inv;
    }
    check_finite(out, "softmax_rows");
    if (out.needs_grad()) {
        record([x, out, rows, n]() {
            if (!out_has_grad(out) || !wants_grad(x)) return;
            Tensor tx = x;
            tx.ensure_grad();
            for (int64_t r = 0; r < rows; ++r) {
                const float* y = out.data() + r * n;
                const float* dy = out.grad() + r * n;
                float* dx = tx.grad() + r * n;
                double dot = 0.0;
                for (int64_t j = 0; j < n; ++j) dot += static_cast<double>(dy[j]) * y[j];
                for (int64_t j = 0; j < n; ++j)
                    dx[j] += y[j] * (dy[j] - static_cast<float>(dot));
            }
        });
    }
    return out;
}

Tensor Tape::rms_norm(const Tensor& x, const Tensor& weight, float eps) {
    require(weight.rank() == 1, "rms_norm weight must be rank 1");
    const int64_t d = weight.dim(0);
    require(x.rank() >= 1 && x.dim(x.rank() - 1) == d,
            "rms_norm trailing dim " + shape_str(x.shape()) + " does not match weight " +
                shape_str(weight.shape()));
    require(eps > 0.0f, "rms_norm eps must be positive");
    const int64_t rows = x.numel() / d;
    Tensor out = make_output(x.shape(), {x, weight});
    std::vector<float> inv_rms(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const float* xi = x.data() + r * d;
        double ms = 0.0;
        for (int64_t j = 0; j < d; ++j) ms += static_cast<double>(xi[j]) * xi[j];
        ms = ms / static_cast<double>(d) + eps;
        const float inv = static_cast<float>(1.0 / std::sqrt(ms));
        inv_rms[static_cast<size_t>(r)] = inv;
        float* yi = out.data() + r * d;
        for (int64_t j = 0; j < d; ++j) yi[j] = xi[j] * inv * weight.data()[j];
    }
    if (out.needs_grad()) {
        record([x, weight, out, rows, d, inv_rms = std::move(inv_rms)]() {
            if (!out_has_grad(out)) return;
            for (int64_t r = 0; r < rows; ++r) {
                const float* xi = x.data() + r * d;
                const float* dy = out.grad() + r * d;
                const float inv = inv_rms[static_cast<size_t>(r)];
                if (wants_grad(weight)) {
                    Tensor tw = weight;
                    tw.ensure_grad();
                    for (int64_t j = 0; j < d; ++j) tw.grad()[j] += dy[j] * xi[j] * inv;
                }
                if (wants_grad(x)) {
                    Tensor tx = x;
                    tx.ensure_grad();
                    float* dx = tx.grad() + r * d;
                    // y_j = w_j * x_j * inv, inv = (mean(x^2)+eps)^{-1/2}
                    double dot = 0.0;
                    for (int64_t j = 0; j < d; ++j)
                        dot += static_cast<double>(dy[j]) * weight.data()[j] * xi[j];
                    const float coef =
                        static_cast<float>(dot) * inv * inv * inv / static_cast<float>(d);
                    for (int64_t j = 0; j < d; ++j)
                        dx[j] += dy[j] * weight.data()[j] * inv - coef * xi[j];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// structure ops

Tensor Tape::reshape(const Tensor& x, Shape shape) {
    require(shape_numel(shape) == x.numel(),
            "reshape from " + shape_str(x.shape()) + " to " + shape_str(shape) +
                " changes element count");
    Tensor out = make_output(std::move(shape), {x});
    out.vec() = x.vec();
    if (out.needs_grad()) {
        record([x, out]() {
            if (!out_has_grad(out) || !wants_grad(x)) return;
            Tensor tx = x;
            tx.ensure_grad();
            for (int64_t i = 0; i < x.numel(); ++i) tx.grad()[i] += out.grad()[i];
        });
    }
    return out;
}

Tensor Tape::concat_along_axis(int axis, const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_along_axis needs at least one part");
    require(axis == 0 || axis == 1, "concat_along_axis supports axis 0 or 1");
    for (const Tensor& p : parts)
        require(p.rank() == 2, "concat_along_axis expects rank-2 parts, got " + shape_str(p.shape()));
    const int other = 1 - axis;
    const int64_t fixed = parts[0].dim(other);
    int64_t total = 0;
    for (const Tensor& p : parts) {
        require(p.dim(other) == fixed,
                "concat_along_axis mismatch on axis " + std::to_string(other) + ": " +
                    shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
        total += p.dim(axis);
    }
    Shape oshape = axis == 0 ? Shape{total, fixed} : Shape{fixed, total};
    Tensor out = Tensor::make(oshape, false);
    bool needs = false;
    for (const Tensor& p : parts) needs = needs || p.needs_grad();
    out.impl()->needs_grad = needs;

    const int64_t ocols = out.dim(1);
    int64_t off = 0;
    for (const Tensor& p : parts) {
        const int64_t pr = p.dim(0), pc = p.dim(1);
        for (int64_t r = 0; r < pr; ++r)
            for (int64_t c = 0; c < pc; ++c) {
                const int64_t orow = axis == 0 ? off + r : r;
                const int64_t ocol = axis == 0 ? c : off + c;
                out.data()[orow * ocols + ocol] = p.data()[r * pc + c];
            }
        off += p.dim(axis);
    }
    if (out.needs_grad()) {
        record([parts, out, axis, ocols]() {
            if (!out_has_grad(out)) return;
            int64_t off = 0;
            for (const Tensor& p : parts) {
                const int64_t pr = p.dim(0), pc = p.dim(1);
                if (wants_grad(p)) {
                    Tensor tp = p;
                    tp.ensure_grad();
                    for (int64_t r = 0; r < pr; ++r)
                        for (int64_t c = 0; c < pc; ++c) {
                            const int64_t orow = axis == 0 ? off + r : r;
                            const int64_t ocol = axis == 0 ? c : off + c;
                            tp.grad()[r * pc + c] += out.grad()[orow * ocols + ocol];
                        }
                }
                off += p.dim(axis);
            }
        });
    }
    return out;
}

Tensor Tape::slice_rows(const Tensor& x, int64_t start, int64_t len) {
    require(x.rank() == 1 || x.rank() == 2, "slice_rows expects rank 1 or 2");
    const int64_t rows = x.dim(0);
    const int64_t cols = x.rank() == 2 ? x.dim(1) : 1;
    require(start >= 0 && len >= 1 && start + len <= rows,
            "slice_rows range [" + std::to_string(start) + "," + std::to_string(start + len) +
                ") out of bounds for " + shape_str(x.shape()));
    Shape oshape = x.rank() == 2 ? Shape{len, cols} : Shape{len};
    Tensor out = make_output(oshape, {x});
    std::memcpy(out.data(), x.data() + start * cols, static_cast<size_t>(len * cols) * sizeof(float));
    if (out.needs_grad()) {
        record([x, out, start, len, cols]() {
            if (!out_has_grad(out) || !wants_grad(x)) return;
            Tensor tx = x;
            tx.ensure_grad();
            for (int64_t i = 0; i < len * cols; ++i) tx.grad()[start * cols + i] += out.grad()[i];
        });
    }
    return out;
}

Tensor Tape::slice_cols(const Tensor& x, int64_t start, int64_t len) {
    require(x.rank() == 2, "slice_cols expects rank 2");
    const int64_t rows = x.dim(0), cols = x.dim(1);
    require(start >= 0 && len >= 1 && start + len <= cols,
            "slice_cols range [" + std::to_string(start) + "," + std::to_string(start + len) +
                ") out of bounds for " + shape_str(x.shape()));
    Tensor out = make_output({rows, len}, {x});
    for (int64_t r = 0; r < rows; ++r)
        std::memcpy(out.data() + r * len, x.data() + r * cols + start,
                    static_cast<size_t>(len) * sizeof(float));
    if (out.needs_grad()) {
        record([x, out, start, len, rows, cols]() {
            if (!out_has_grad(out) || !wants_grad(x)) return;
            Tensor tx = x;
            tx.ensure_grad();
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t c = 0; c < len; ++c)
                    tx.grad()[r * cols + start + c] += out.grad()[r * len + c];
        });
    }
    return out;
}

Tensor Tape::embedding_lookup(const Tensor& table, std::span<const int> ids) {
    require(table.rank() == 2, "embedding_lookup table must be rank 2");
    const int64_t vocab = table.dim(0), d = table.dim(1);
    for (int id : ids)
        require(id >= 0 && id < vocab,
                "embedding_lookup id " + std::to_string(id) + " out of range [0," +
                    std::to_string(vocab) + ")");
    const int64_t n = static_cast<int64_t>(ids.size());
    Tensor out = make_output({n, d}, {table});
    std::vector<int> idv(ids.begin(), ids.end());
    for (int64_t i = 0; i < n; ++i)
        std::memcpy(out.data() + i * d, table.data() + static_cast<int64_t>(idv[i]) * d,
                    static_cast<size_t>(d) * sizeof(float));
    if (out.needs_grad()) {
        record([table, out, idv = std::move(idv), n, d]() {
            if (!out_has_grad(out) || !wants_grad(table)) return;
            Tensor tt = table;
            tt.ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                for (int64_t j = 0; j < d; ++j)
                    tt.grad()[static_cast<int64_t>(idv[i]) * d + j] += out.grad()[i * d + j];
        });
    }
    return out;
}

Tensor Tape::rope(const Tensor& x, int64_t head_dim, float base, int64_t pos_offset) {
    require(x.rank() == 2, "rope expects rank-2 input");
    const int64_t seq = x.dim(0), d = x.dim(1);
    require(head_dim >= 2 && head_dim % 2 == 0 && d % head_dim == 0,
            "rope head_dim " + std::to_string(head_dim) + " incompatible with " +
                shape_str(x.shape()));
    Tensor out = make_output({seq, d}, {x});
    const int64_t half = head_dim / 2;
    // cos/sin cached for the backward pass; rotation is orthogonal so the
    // backward rule is the inverse rotation.
    std::vector<float> cs(static_cast<size_t>(seq * half * 2));
    for (int64_t t = 0; t < seq; ++t) {
        const double pos = static_cast<double>(t + pos_offset);
        for (int64_t i = 0; i < half; ++i) {
            const double theta =
                pos * std::pow(static_cast<double>(base),
                               -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
            cs[static_cast<size_t>((t * half + i) * 2)] = static_cast<float>(std::cos(theta));
            cs[static_cast<size_t>((t * half + i) * 2 + 1)] = static_cast<float>(std::sin(theta));
        }
    }
    const int64_t n_heads = d / head_dim;
    for (int64_t t = 0; t < seq; ++t)
        for (int64_t h = 0; h < n_heads; ++h)
            for (int64_t i = 0; i < half; ++i) {
                const float c = cs[static_cast<size_t>((t * half + i) * 2)];
                const float s = cs[static_cast<size_t>((t * half + i) * 2 + 1)];
                const int64_t off = t * d + h * head_dim + 2 * i;
                const float x0 = x.data()[off], x1 = x.data()[off + 1];
                out.data()[off] = x0 * c - x1 * s;
                out.data()[off + 1] = x0 * s + x1 * c;
            }
    if (out.needs_grad()) {
        record([x, out, cs = std::move(cs), seq, d, n_heads, head_dim, half]() {
            if (!out_has_grad(out) || !wants_grad(x)) return;
            Tensor tx = x;
            tx.ensure_grad();
            for (int64_t t = 0; t < seq; ++t)
                for (int64_t h = 0; h < n_heads; ++h)
                    for (int64_t i = 0; i < half; ++i) {
                        const float c = cs[static_cast<size_t>((t * half + i) * 2)];
                        const float s = cs[static_cast<size_t>((t * half + i) * 2 + 1)];
                        const int64_t off = t * d + h * head_dim + 2 * i;
                        const float d0 = out.grad()[off], d1 = out.grad()[off + 1];
                        tx.grad()[off] += d0 * c + d1 * s;
                        tx.grad()[off + 1] += -d0 * s + d1 * c;
                    }
        });
    }
    return out;
}

Tensor Tape::cross_entropy_masked(const Tensor& logits, std::span<const int> targets,
                                  std::span<const uint8_t> mask) {
    require(logits.rank() == 2, "cross_entropy_masked logits must be rank 2");
    const int64_t n = logits.dim(0), v = logits.dim(1);
    require(static_cast<int64_t>(targets.size()) == n && static_cast<int64_t>(mask.size()) == n,
            "cross_entropy_masked targets/mask length must match logits rows");
    int64_t count = 0;
    for (uint8_t m : mask) count += m ? 1 : 0;
    if (count == 0) throw std::invalid_argument("cross_entropy_masked: empty loss (all-zero mask)");
    for (int64_t i = 0; i < n; ++i)
        if (mask[static_cast<size_t>(i)])
            require(targets[static_cast<size_t>(i)] >= 0 && targets[static_cast<size_t>(i)] < v,
                    "cross_entropy_masked target out of range");

    Tensor out = make_output({1}, {logits});
    // probs for masked rows only, cached for backward
    std::vector<float> probs(static_cast<size_t>(n * v), 0.0f);
    double loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        const float* li = logits.data() + i * v;
        float mx = li[0];
        for (int64_t j = 1; j < v; ++j) mx = std::max(mx, li[j]);
        double denom = 0.0;
        for (int64_t j = 0; j < v; ++j) denom += std::exp(static_cast<double>(li[j]) - mx);
        const double logz = std::log(denom) + mx;
        loss -= static_cast<double>(li[targets[static_cast<size_t>(i)]]) - logz;
        for (int64_t j = 0; j < v; ++j)
            probs[static_cast<size_t>(i * v + j)] =
                static_cast<float>(std::exp(static_cast<double>(li[j]) - logz));
    }
    out.data()[0] = static_cast<float>(loss / static_cast<double>(count));

    if (out.needs_grad()) {
        std::vector<int> tg(targets.begin(), targets.end());
        std::vector<uint8_t> mk(mask.begin(), mask.end());
        record([logits, out, probs = std::move(probs), tg = std::move(tg), mk = std::move(mk), n, v,
                count]() {
            if (!out_has_grad(out) || !wants_grad(logits)) return;
            Tensor tl = logits;
            tl.ensure_grad();
            const float g = out.grad()[0] / static_cast<float>(count);
            for (int64_t i = 0; i < n; ++i) {
                if (!mk[static_cast<size_t>(i)]) continue;
                float* dl = tl.grad() + i * v;
                const float* p = probs.data() + i * v;
                for (int64_t j = 0; j < v; ++j) dl[j] += g * p[j];
                dl[tg[static_cast<size_t>(i)]] -= g;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward expects a scalar loss, got " +
                                    shape_str(loss.shape()));
    Tensor l = loss;
    l.ensure_grad();
    l.grad()[0] = 1.0f;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
}

void Tape::clear() { nodes_.clear(); }

}  // namespace padapt
