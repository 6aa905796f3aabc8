#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace padapt {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorImpl {
    Shape shape;
    std::vector<float> data;
    std::vector<float> grad;     // allocated lazily, same length as data
    bool requires_grad = false;  // learnable leaf
    bool needs_grad = false;     // requires_grad, or computed from something that does
    std::string name;
};

// Value handle over shared storage. Copying a Tensor aliases the storage.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<float> data, bool requires_grad = false);

    bool defined() const { return p_ != nullptr; }
    const Shape& shape() const { return p_->shape; }
    int64_t numel() const { return static_cast<int64_t>(p_->data.size()); }
    int64_t dim(int i) const { return p_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(p_->shape.size()); }

    float* data() { return p_->data.data(); }
    const float* data() const { return p_->data.data(); }
    std::vector<float>& vec() { return p_->data; }
    const std::vector<float>& vec() const { return p_->data; }

    float item() const;

    bool requires_grad() const { return p_->requires_grad; }
    void set_requires_grad(bool v);
    bool needs_grad() const { return p_->needs_grad; }

    bool has_grad() const { return !p_->grad.empty(); }
    void ensure_grad();
    void zero_grad();
    float* grad() { return p_->grad.data(); }
    const float* grad() const { return p_->grad.data(); }
    const std::vector<float>& grad_vec() const { return p_->grad; }

    const std::string& name() const { return p_->name; }
    void set_name(std::string n) { p_->name = std::move(n); }

    TensorImpl* impl() const { return p_.get(); }

private:
    std::shared_ptr<TensorImpl> p_;
    explicit Tensor(std::shared_ptr<TensorImpl> p) : p_(std::move(p)) {}
    friend class Tape;
    static Tensor make(Shape shape, bool requires_grad);
};

// Records forward ops and replays their backward rules in reverse order.
// One tape per logical thread of execution.
class Tape {
public:
    Tensor matmul(const Tensor& a, const Tensor& b);
    Tensor transpose(const Tensor& a);

    Tensor add(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor scale_by_scalar(const Tensor& a, float c);
    Tensor scale_by(const Tensor& a, const Tensor& s);  // s: 1-element learnable scalar
    Tensor add_rowvec(const Tensor& x, const Tensor& b);
    Tensor mul_rowvec(const Tensor& x, const Tensor& s);
    Tensor silu(const Tensor& x);
    Tensor sum(const Tensor& x);

    Tensor softmax_rows(const Tensor& x);
    Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps);

    Tensor reshape(const Tensor& x, Shape shape);
    Tensor concat_along_axis(int axis, const std::vector<Tensor>& parts);
    Tensor slice_rows(const Tensor& x, int64_t start, int64_t len);
    Tensor slice_cols(const Tensor& x, int64_t start, int64_t len);

    Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
    Tensor rope(const Tensor& x, int64_t head_dim, float base, int64_t pos_offset);
    Tensor cross_entropy_masked(const Tensor& logits, std::span<const int> targets,
                                std::span<const uint8_t> mask);

    void backward(const Tensor& loss);
    void clear();
    size_t num_ops() const { return nodes_.size(); }

private:
    struct Node {
        std::function<void()> backward;
    };
    std::vector<Node> nodes_;

    Tensor make_output(Shape shape, std::initializer_list<Tensor> inputs);
    void record(std::function<void()> fn) { nodes_.push_back({std::move(fn)}); }
};

// Accumulates into dst.grad only when dst participates in the graph.
inline bool wants_grad(const Tensor& t) { return t.needs_grad(); }

void check_finite(const Tensor& t, const char* op);

}  // namespace padapt
