#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace povt {

class Rng;

using Shape = std::vector<int>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad; // empty until first written
    bool requires_grad = false;

    double* grad_data(); // allocates zero-filled on first use
};

} // namespace detail

// Dense double-precision tensor with shared storage. Copying a Tensor copies
// a handle; ops always allocate fresh output storage. When a Tape is active
// and an input requires grad, the op records a backward rule on it.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, bool requires_grad = false);
    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double v);
    static Tensor scalar(double v);
    static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(node_->values.size()); }
    int rows() const; // 2-D only
    int cols() const;

    double* data() { return node_->values.data(); }
    const double* data() const { return node_->values.data(); }
    std::vector<double>& values() { return node_->values; }
    const std::vector<double>& values() const { return node_->values; }
    double item() const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }
    bool has_grad() const { return !node_->grad.empty(); }
    double* grad_data() { return node_->grad_data(); }
    const std::vector<double>& grad() const { return node_->grad; }
    void zero_grad();

    detail::TensorNode* node() const { return node_.get(); }
    bool same_storage(const Tensor& other) const { return node_ == other.node_; }

private:
    std::shared_ptr<detail::TensorNode> node_;
};

// Recorded reverse-mode program: a Wengert list. Ops append entries in
// execution order, so replaying the list backwards visits every node after
// all of its consumers. One tape is active per thread at a time; nesting is
// allowed (inner tape shadows the outer one until destroyed).
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    void record(std::function<void()> backward_rule);
    size_t size() const { return entries_.size(); }

    // Seeds d(loss)/d(loss) = 1 and runs every recorded rule in reverse
    // topological order, accumulating into .grad of all participating
    // tensors. loss must be scalar and produced under this tape.
    void backward(const Tensor& loss);

private:
    std::vector<std::function<void()>> entries_;
    Tape* prev_ = nullptr;
};

// True when a tape is active and any argument requires grad: the condition
// under which ops record.
bool grad_enabled(const Tensor& a);
bool grad_enabled(const Tensor& a, const Tensor& b);

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);

// ---- shape / selection ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a); // 2-D
Tensor slice_rows(const Tensor& a, int r0, int r1);
Tensor slice_cols(const Tensor& a, int c0, int c1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// Rows of `a` selected by index; doubles as embedding lookup. Backward
// scatter-adds, so repeated indices accumulate.
Tensor gather_rows(const Tensor& a, const std::vector<int>& idx);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& x, const Tensor& bias); // [m,n] + [n], row broadcast

// ---- reductions ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// ---- normalization / activation over rows ----
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Row-wise softmax over allowed entries. `allow`, when non-null, is a
// row-major {0,1} matrix of x's shape; disallowed entries produce exact
// zeros in both the output and the gradient. A row with no allowed entry is
// a contract violation.
Tensor softmax_rows(const Tensor& x, const std::vector<uint8_t>* allow = nullptr);

// Mean negative log-softmax of the target logit over rows where ignore == 0.
// `ignore` may be empty (nothing ignored). Throws if every row is ignored.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                             const std::vector<uint8_t>& ignore);

// ---- convolution (NCHW, cross-correlation) ----
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
// w layout [C_in, C_out, kh, kw]; output H = (H-1)*stride - 2*pad + kh.
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);

// ---- training-time stochastic / gradient control ----
// Inverted-scaling Bernoulli mask; identity when p == 0. Callers skip the op
// entirely in eval mode.
Tensor dropout(const Tensor& x, double p, Rng& rng);
Tensor detach(const Tensor& a);

} // namespace povt
