#include "povt/tensor.hpp"

#include "povt/rng.hpp"

#include <cblas.h>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

extern "C" void openblas_set_num_threads(int);

namespace povt {

namespace {

// One dgemm stream per process: deterministic accumulation order regardless
// of machine load. Replica parallelism happens above this layer.
struct BlasInit {
    BlasInit() { openblas_set_num_threads(1); }
};
const BlasInit blas_init;

thread_local Tape* g_active_tape = nullptr;

void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// C[m,p] (+)= A(m,n) * B(n,p), with optional transposes on logical A/B.
void dgemm(bool ta, bool tb, int m, int n, int p, const double* a, const double* b, double* c,
           double beta) {
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans, m, p,
                n, 1.0, a, ta ? m : n, b, tb ? n : p, beta, c, p);
}

} // namespace

int64_t numel(const Shape& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

namespace detail {

double* TensorNode::grad_data() {
    if (grad.empty()) grad.assign(values.size(), 0.0);
    return grad.data();
}

} // namespace detail

Tensor::Tensor(Shape shape, bool requires_grad) : node_(std::make_shared<detail::TensorNode>()) {
    for (int d : shape) check(d > 0, "Tensor: dims must be positive, got " + shape_str(shape));
    node_->shape = std::move(shape);
    node_->values.assign(static_cast<size_t>(numel(node_->shape)), 0.0);
    node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<detail::TensorNode>()) {
    check(numel(shape) == static_cast<int64_t>(values.size()),
          "Tensor: shape " + shape_str(shape) + " does not match value count");
    node_->shape = std::move(shape);
    node_->values = std::move(values);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape) { return Tensor(std::move(shape)); }

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

Tensor Tensor::full(Shape shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.values()) x = v;
    return t;
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
    Tensor t(std::move(shape), requires_grad);
    for (auto& x : t.values()) x = rng.normal(0.0, stddev);
    return t;
}

int Tensor::rows() const {
    check(ndim() == 2, "rows(): tensor is not 2-D");
    return dim(0);
}

int Tensor::cols() const {
    check(ndim() == 2, "cols(): tensor is not 2-D");
    return dim(1);
}

double Tensor::item() const {
    check(size() == 1, "item(): tensor is not scalar");
    return node_->values[0];
}

void Tensor::zero_grad() { node_->grad.clear(); }

// ---------------------------------------------------------------------------
// Tape

Tape::Tape() {
    prev_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::function<void()> backward_rule) {
    entries_.push_back(std::move(backward_rule));
}

void Tape::backward(const Tensor& loss) {
    check(loss.defined() && loss.size() == 1, "backward: loss must be scalar");
    loss.node()->grad_data()[0] += 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

bool grad_enabled(const Tensor& a) { return g_active_tape != nullptr && a.requires_grad(); }

bool grad_enabled(const Tensor& a, const Tensor& b) {
    return g_active_tape != nullptr && (a.requires_grad() || b.requires_grad());
}

namespace {

// Output tensors of recorded ops require grad so downstream ops keep
// recording; leaves keep whatever the caller set.
Tensor make_output(Shape shape, bool recorded) {
    Tensor t(std::move(shape));
    t.set_requires_grad(recorded);
    return t;
}

bool out_grad_ready(const Tensor& out) { return out.has_grad(); }

} // namespace

// ---------------------------------------------------------------------------
// Elementwise

static Tensor binary_elementwise(const Tensor& a, const Tensor& b, char op) {
    check(a.shape() == b.shape(), std::string("elementwise ") + op + ": shape mismatch " +
                                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const bool rec = grad_enabled(a, b);
    Tensor out = make_output(a.shape(), rec);
    const int64_t n = a.size();
    const double* pa = a.data();
    const double* pb = b.data();
    double* po = out.data();
    switch (op) {
        case '+': for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i]; break;
        case '-': for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i]; break;
        case '*': for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i]; break;
        default: throw std::logic_error("bad op");
    }
    if (rec) {
        Tape::active()->record([a, b, out, op, n]() {
            if (!out_grad_ready(out)) return;
            const double* g = out.node()->grad.data();
            if (a.requires_grad()) {
                double* ga = a.node()->grad_data();
                for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * (op == '*' ? b.data()[i] : 1.0);
            }
            if (b.requires_grad()) {
                double* gb = b.node()->grad_data();
                if (op == '+') for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
                else if (op == '-') for (int64_t i = 0; i < n; ++i) gb[i] -= g[i];
                else for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * a.data()[i];
            }
        });
    }
    return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, '+'); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, '-'); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, '*'); }

Tensor scale(const Tensor& a, double s) {
    const bool rec = grad_enabled(a);
    Tensor out = make_output(a.shape(), rec);
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * s;
    if (rec) {
        Tape::active()->record([a, out, s, n]() {
            if (!out_grad_ready(out)) return;
            const double* g = out.node()->grad.data();
            double* ga = a.node()->grad_data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * s;
        });
    }
    return out;
}

Tensor add_scalar(const Tensor& a, double s) {
    const bool rec = grad_enabled(a);
    Tensor out = make_output(a.shape(), rec);
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + s;
    if (rec) {
        Tape::active()->record([a, out, n]() {
            if (!out_grad_ready(out)) return;
            const double* g = out.node()->grad.data();
            double* ga = a.node()->grad_data();
            for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
        });
    }
    return out;
}

Tensor relu(const Tensor& a) {
    const bool rec = grad_enabled(a);
    Tensor out = make_output(a.shape(), rec);
    const int64_t n = a.size();
    for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    if (rec) {
        Tape::active()->record([a, out, n]() {
            if (!out_grad_ready(out)) return;
            const double* g = out.node()->grad.data();
            double* ga = a.node()->grad_data();
            for (int64_t i = 0; i < n; ++i)
                if (a.data()[i] > 0.0) ga[i] += g[i];
        });
    }
    return out;
}

Tensor gelu(const Tensor& a) {
    const bool rec = grad_enabled(a);
    Tensor out = make_output(a.shape(), rec);
    const int64_t n = a.size();
    constexpr double inv_sqrt2 = 0.7071067811865476;
    for (int64_t i = 0; i < n; ++i) {
        const double x = a.data()[i];
        out.data()[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    if (rec) {
        Tape::active()->record([a, out, n]() {
            if (!out_grad_ready(out)) return;
            constexpr double inv_sqrt_2pi = 0.3989422804014327;
            const double* g = out.node()->grad.data();
            double* ga = a.node()->grad_data();
            for (int64_t i = 0; i < n; ++i) {
                const double x = a.data()[i];
                const double phi = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
                const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                ga[i] += g[i] * (phi + x * pdf);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shape / selection

Tensor reshape(const Tensor& a, Shape shape) {
    check(numel(shape) == a.size(),
          "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
    const bool rec = grad_enabled(a);
    Tensor out(shape, a.values());
    out.set_requires_grad(rec);
    if (rec) {
        Tape::active()->record([a, out]() {
            if (!out_grad_ready(out)) return;
            const double* g = out.node()->grad.data();
            double* ga = a.node()->grad_data();
            for (int64_t i = 0; i < a.size(); ++i) ga[i] += g[i];
        });
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    check(a.ndim() == 2, "transpose: expects 2-D");
    const int m = a.dim(0), n = a.dim(1);
    const bool rec = grad_enabled(a);
    Tensor out = make_output({n, m}, rec);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data()[j * m + i] = a.data()[i * n + j];
    if (rec) {
        Tape::active()->record([a, out, m, n]() {
            if (!out_grad_ready(out)) return;
            const double* g = out.node()->grad.data();
            double* ga = a.node()->grad_data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j) ga[i * n + j] += g[j * m + i];
        });
    }
    return out;
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
    check(a.ndim() == 2, "slice_rows: expects 2-D");
    check(0 <= r0 && r0 < r1 && r1 <= a.dim(0), "slice_rows: bad range");
    const int n = a.dim(1);
    const bool rec = grad_enabled(a);
    Tensor out = make_output({r1 - r0, n}, rec);
    std::memcpy(out.data(), a.data() + static_cast<int64_t>(r0) * n,
                sizeof(double) * static_cast<size_t>(r1 - r0) * n);
    if (rec) {
        Tape::active()->record([a, out, r0, n]() {
            if (!out_grad_ready(out)) return;
            const double* g = out.node()->grad.data();
            double* ga = a.node()->grad_data();
            const int64_t cnt = out.size();
            for (int64_t i = 0; i < cnt; ++i) ga[static_cast<int64_t>(r0) * n + i] += g[i];
        });
    }
    return out;
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
    check(a.ndim() == 2, "slice_cols: expects 2-D");
    check(0 <= c0 && c0 < c1 && c1 <= a.dim(1), "slice_cols: bad range");
    const int m = a.dim(0), n = a.dim(1), w = c1 - c0;
    const bool rec = grad_enabled(a);
    Tensor out = make_output({m, w}, rec);
    for (int i = 0; i < m; ++i)
        std::memcpy(out.data() + static_cast<int64_t>(i) * w, a.data() + static_cast<int64_t>(i) * n + c0,
                    sizeof(double) * static_cast<size_t>(w));
    if (rec) {
        Tape::active()->record([a, out, m, n, c0, w]() {
            if (!out_grad_ready(out)) return;
            const double* g = out.node()->grad.data();
            double* ga = a.node()->grad_data();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < w; ++j) ga[static_cast<int64_t>(i) * n + c0 + j] += g[static_cast<int64_t>(i) * w + j];
        });
    }
    return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "concat_rows: empty list");
    const int n = parts[0].cols();
    int m = 0;
    bool rec = false;
    for (const auto& p : parts) {
        check(p.ndim() == 2 && p.dim(1) == n, "concat_rows: column mismatch");
        m += p.dim(0);
        rec = rec || grad_enabled(p);
    }
    Tensor out = make_output({m, n}, rec);
    int64_t off = 0;
    for (const auto& p : parts) {
        std::memcpy(out.data() + off, p.data(), sizeof(double) * static_cast<size_t>(p.size()));
        off += p.size();
    }
    if (rec) {
        Tape::active()->record([parts, out]() {
            if (!out_grad_ready(out)) return;
            const double* g = out.node()->grad.data();
            int64_t off = 0;
            for (const auto& p : parts) {
                if (p.requires_grad()) {
                    double* gp = p.node()->grad_data();
                    for (int64_t i = 0; i < p.size(); ++i) gp[i] += g[off + i];
                }
                off += p.size();
            }
        });
    }
    return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    check(!parts.empty(), "concat_cols: empty list");
    const int m = parts[0].rows();
    int n = 0;
    bool rec = false;
    for (const auto& p : parts) {
        check(p.ndim() == 2 && p.dim(0) == m, "concat_cols: row mismatch");
        n += p.dim(1);
        rec = rec || grad_enabled(p);
    }
    Tensor out = make_output({m, n}, rec);
    int c0 = 0;
    for (const auto& p : parts) {
        const int w = p.dim(1);
        for (int i = 0; i < m; ++i)
            std::memcpy(out.data() + static_cast<int64_t>(i) * n + c0, p.data() + static_cast<int64_t>(i) * w,
                        sizeof(double) * static_cast<size_t>(w));
        c0 += w;
    }
    if (rec) {
        Tape::active()->record([parts, out, m, n]() {
            if (!out_grad_ready(out)) return;
            const double* g = out.node()->grad.data();
            int c0 = 0;
            for (const auto& p : parts) {
                const int w = p.dim(1);
                if (p.requires_grad()) {
                    double* gp = p.node()->grad_data();
                    for (int i = 0; i < m; ++i)
                        for (int j = 0; j < w; ++j) gp[static_cast<int64_t>(i) * w + j] += g[static_cast<int64_t>(i) * n + c0 + j];
                }
                c0 += w;
            }
        });
    }
    return out;
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
    check(a.ndim() == 2, "gather_rows: expects 2-D");
    const int m = a.dim(0), n = a.dim(1);
    for (int i : idx) check(0 <= i && i < m, "gather_rows: index out of range");
    const bool rec = grad_enabled(a);
    Tensor out = make_output({static_cast<int>(idx.size()), n}, rec);
    for (size_t r = 0; r < idx.size(); ++r)
        std::memcpy(out.data() + r * n, a.data() + static_cast<int64_t>(idx[r]) * n,
                    sizeof(double) * static_cast<size_t>(n));
    if (rec) {
        Tape::active()->record([a, out, idx, n]() {
            if (!out_grad_ready(out)) return;
            const double* g = out.node()->grad.data();
            double* ga = a.node()->grad_data();
            for (size_t r = 0; r < idx.size(); ++r)
                for (int j = 0; j < n; ++j) ga[static_cast<int64_t>(idx[r]) * n + j] += g[r * n + j];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 2 && b.ndim() == 2, "matmul: expects 2-D operands");
    check(a.dim(1) == b.dim(0), "matmul: inner dims disagree, " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    const int m = a.dim(0), n = a.dim(1), p = b.dim(1);
    const bool rec = grad_enabled(a, b);
    Tensor out = make_output({m, p}, rec);
    dgemm(false, false, m, n, p, a.data(), b.data(), out.data(), 0.0);
    if (rec) {
        Tape::active()->record([a, b, out, m, n, p]() {
            if (!out_grad_ready(out)) return;
            const double* g = out.node()->grad.data();
            if (a.requires_grad()) // dA += G * B^T
                dgemm(false, true, m, p, n, g, b.data(), a.node()->grad_data(), 1.0);
            if (b.requires_grad()) // dB += A^T * G
                dgemm(true, false, n, m, p, a.data(), g, b.node()->grad_data(), 1.0);
        });
    }
    return out;
}

Tensor add_row(const Tensor& x, const Tensor& bias) {
    check(x.ndim() == 2 && bias.ndim() == 1 && bias.dim(0) == x.dim(1),
          "add_row: bias must match column count");
    const int m = x.dim(0), n = x.dim(1);
    const bool rec = grad_enabled(x, bias);
    Tensor out = make_output({m, n}, rec);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out.data()[static_cast<int64_t>(i) * n + j] = x.data()[static_cast<int64_t>(i) * n + j] + bias.data()[j];
    if (rec) {
        Tape::active()->record([x, bias, out, m, n]() {
            if (!out_grad_ready(out)) return;
            const double* g = out.node()->grad.data();
            if (x.requires_grad()) {
                double* gx = x.node()->grad_data();
                for (int64_t i = 0; i < static_cast<int64_t>(m) * n; ++i) gx[i] += g[i];
            }
            if (bias.requires_grad()) {
                double* gb = bias.node()->grad_data();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) gb[j] += g[static_cast<int64_t>(i) * n + j];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum_all(const Tensor& a) {
    const bool rec = grad_enabled(a);
    double s = 0.0;
    for (int64_t i = 0; i < a.size(); ++i) s += a.data()[i];
    Tensor out({1}, std::vector<double>{s});
    out.set_requires_grad(rec);
    if (rec) {
        Tape::active()->record([a, out]() {
            if (!out_grad_ready(out)) return;
            const double g = out.node()->grad[0];
            double* ga = a.node()->grad_data();
            for (int64_t i = 0; i < a.size(); ++i) ga[i] += g;
        });
    }
    return out;
}

Tensor mean_all(const Tensor& a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.size())); }

// ---------------------------------------------------------------------------
// Layer norm (normalizes the last dimension, treating the rest as rows)

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    check(x.ndim() >= 1, "layer_norm: needs at least 1-D");
    const int d = x.dim(x.ndim() - 1);
    check(gain.ndim() == 1 && gain.dim(0) == d && bias.ndim() == 1 && bias.dim(0) == d,
          "layer_norm: gain/bias must have the feature width");
    const int64_t rows = x.size() / d;
    const bool rec = grad_enabled(x) || grad_enabled(gain) || grad_enabled(bias);
    Tensor out = make_output(x.shape(), rec);
    std::vector<double> inv_sigma(static_cast<size_t>(rows));
    std::vector<double> xhat(static_cast<size_t>(x.size()));
    for (int64_t r = 0; r < rows; ++r) {
        const double* px = x.data() + r * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += px[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (px[j] - mu) * (px[j] - mu);
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[static_cast<size_t>(r)] = is;
        for (int j = 0; j < d; ++j) {
            const double xh = (px[j] - mu) * is;
            xhat[static_cast<size_t>(r * d + j)] = xh;
            out.data()[r * d + j] = gain.data()[j] * xh + bias.data()[j];
        }
    }
    if (rec) {
        auto inv_sigma_p = std::make_shared<std::vector<double>>(std::move(inv_sigma));
        auto xhat_p = std::make_shared<std::vector<double>>(std::move(xhat));
        Tape::active()->record([x, gain, bias, out, rows, d, inv_sigma_p, xhat_p]() {
            if (!out_grad_ready(out)) return;
            const double* g = out.node()->grad.data();
            const auto& is = *inv_sigma_p;
            const auto& xh = *xhat_p;
            for (int64_t r = 0; r < rows; ++r) {
                const double* gr = g + r * d;
                const double* xhr = xh.data() + r * d;
                if (gain.requires_grad()) {
                    double* gg = gain.node()->grad_data();
                    for (int j = 0; j < d; ++j) gg[j] += gr[j] * xhr[j];
                }
                if (bias.requires_grad()) {
                    double* gb = bias.node()->grad_data();
                    for (int j = 0; j < d; ++j) gb[j] += gr[j];
                }
                if (x.requires_grad()) {
                    double* gx = x.node()->grad_data() + r * d;
                    double m1 = 0.0, m2 = 0.0; // mean(dy*g), mean(dy*g*xhat)
                    for (int j = 0; j < d; ++j) {
                        const double dyg = gr[j] * gain.data()[j];
                        m1 += dyg;
                        m2 += dyg * xhr[j];
                    }
                    m1 /= d;
                    m2 /= d;
                    for (int j = 0; j < d; ++j) {
                        const double dyg = gr[j] * gain.data()[j];
                        gx[j] += (dyg - m1 - xhr[j] * m2) * is[static_cast<size_t>(r)];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Softmax

Tensor softmax_rows(const Tensor& x, const std::vector<uint8_t>* allow) {
    check(x.ndim() == 2, "softmax_rows: expects 2-D");
    const int m = x.dim(0), n = x.dim(1);
    if (allow)
        check(static_cast<int64_t>(allow->size()) == x.size(), "softmax_rows: mask shape mismatch");
    const bool rec = grad_enabled(x);
    Tensor out = make_output({m, n}, rec);
    for (int i = 0; i < m; ++i) {
        const double* px = x.data() + static_cast<int64_t>(i) * n;
        const uint8_t* pm = allow ? allow->data() + static_cast<int64_t>(i) * n : nullptr;
        double mx = -1e308;
        int cnt = 0;
        for (int j = 0; j < n; ++j) {
            if (pm && !pm[j]) continue;
            mx = std::max(mx, px[j]);
            ++cnt;
        }
        check(cnt > 0, "softmax_rows: row " + std::to_string(i) + " has no allowed entry");
        double s = 0.0;
        double* po = out.data() + static_cast<int64_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            po[j] = (pm && !pm[j]) ? 0.0 : std::exp(px[j] - mx);
            s += po[j];
        }
        for (int j = 0; j < n; ++j) po[j] /= s;
    }
    if (rec) {
        Tape::active()->record([x, out, m, n]() {
            if (!out_grad_ready(out)) return;
            const double* g = out.node()->grad.data();
            double* gx = x.node()->grad_data();
            for (int i = 0; i < m; ++i) {
                const double* y = out.data() + static_cast<int64_t>(i) * n;
                const double* gy = g + static_cast<int64_t>(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += gy[j] * y[j];
                for (int j = 0; j < n; ++j) gx[static_cast<int64_t>(i) * n + j] += y[j] * (gy[j] - dot);
            }
        });
    }
    return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                             const std::vector<uint8_t>& ignore) {
    check(logits.ndim() == 2, "softmax_cross_entropy: logits must be 2-D");
    const int m = logits.dim(0), v = logits.dim(1);
    check(static_cast<int>(targets.size()) == m, "softmax_cross_entropy: target count mismatch");
    check(ignore.empty() || static_cast<int>(ignore.size()) == m,
          "softmax_cross_entropy: ignore mask size mismatch");
    int used = 0;
    for (int i = 0; i < m; ++i) {
        if (!ignore.empty() && ignore[static_cast<size_t>(i)]) continue;
        check(0 <= targets[static_cast<size_t>(i)] && targets[static_cast<size_t>(i)] < v,
              "softmax_cross_entropy: target out of vocabulary");
        ++used;
    }
    if (used == 0)
        throw std::runtime_error("softmax_cross_entropy: every position ignored (degenerate loss)");
    const bool rec = grad_enabled(logits);
    double total = 0.0;
    for (int i = 0; i < m; ++i) {
        if (!ignore.empty() && ignore[static_cast<size_t>(i)]) continue;
        const double* p = logits.data() + static_cast<int64_t>(i) * v;
        double mx = p[0];
        for (int j = 1; j < v; ++j) mx = std::max(mx, p[j]);
        double s = 0.0;
        for (int j = 0; j < v; ++j) s += std::exp(p[j] - mx);
        total += mx + std::log(s) - p[targets[static_cast<size_t>(i)]];
    }
    Tensor out({1}, std::vector<double>{total / used});
    out.set_requires_grad(rec);
    if (rec) {
        Tape::active()->record([logits, out, targets, ignore, m, v, used]() {
            if (!out_grad_ready(out)) return;
            const double g = out.node()->grad[0] / used;
            double* gl = logits.node()->grad_data();
            for (int i = 0; i < m; ++i) {
                if (!ignore.empty() && ignore[static_cast<size_t>(i)]) continue;
                const double* p = logits.data() + static_cast<int64_t>(i) * v;
                double mx = p[0];
                for (int j = 1; j < v; ++j) mx = std::max(mx, p[j]);
                double s = 0.0;
                for (int j = 0; j < v; ++j) s += std::exp(p[j] - mx);
                for (int j = 0; j < v; ++j) {
                    const double soft = std::exp(p[j] - mx) / s;
                    gl[static_cast<int64_t>(i) * v + j] +=
                        g * (soft - (j == targets[static_cast<size_t>(i)] ? 1.0 : 0.0));
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution (im2col + dgemm)

namespace {

struct ConvGeom {
    int B, C, H, W, O, kh, kw, stride, pad, Ho, Wo;
};

ConvGeom conv_geom(const Tensor& x, const Tensor& w, int stride, int pad, bool transposed) {
    check(x.ndim() == 4 && w.ndim() == 4, "conv: x and w must be 4-D");
    check(stride >= 1 && pad >= 0 && w.dim(2) >= 1 && w.dim(3) >= 1, "conv: bad geometry");
    ConvGeom g{};
    g.B = x.dim(0);
    g.C = x.dim(1);
    g.H = x.dim(2);
    g.W = x.dim(3);
    g.kh = w.dim(2);
    g.kw = w.dim(3);
    g.stride = stride;
    g.pad = pad;
    if (!transposed) {
        check(w.dim(1) == g.C, "conv2d: weight in-channels mismatch");
        g.O = w.dim(0);
        const int ho_num = g.H + 2 * pad - g.kh;
        const int wo_num = g.W + 2 * pad - g.kw;
        check(ho_num >= 0 && wo_num >= 0, "conv2d: kernel larger than padded input");
        check(ho_num % stride == 0 && wo_num % stride == 0,
              "conv2d: non-integral output size (H,W,k,stride,pad incompatible)");
        g.Ho = ho_num / stride + 1;
        g.Wo = wo_num / stride + 1;
    } else {
        check(w.dim(0) == g.C, "conv_transpose2d: weight in-channels mismatch");
        g.O = w.dim(1);
        g.Ho = (g.H - 1) * stride - 2 * pad + g.kh;
        g.Wo = (g.W - 1) * stride - 2 * pad + g.kw;
        check(g.Ho >= 1 && g.Wo >= 1, "conv_transpose2d: empty output");
    }
    return g;
}

// Patches of img [C,H,W] as columns [C*kh*kw, Ho*Wo] for the given geometry.
void im2col(const double* img, const ConvGeom& g, int H, int W, int Ho, int Wo, double* cols) {
    const int L = Ho * Wo;
    for (int c = 0; c < g.C; ++c) {
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                double* row = cols + (static_cast<int64_t>(c) * g.kh * g.kw + ki * g.kw + kj) * L;
                for (int oi = 0; oi < Ho; ++oi) {
                    const int ii = oi * g.stride - g.pad + ki;
                    for (int oj = 0; oj < Wo; ++oj) {
                        const int ij = oj * g.stride - g.pad + kj;
                        row[oi * Wo + oj] = (ii >= 0 && ii < H && ij >= 0 && ij < W)
                                                ? img[(static_cast<int64_t>(c) * H + ii) * W + ij]
                                                : 0.0;
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-adds columns back into the image.
void col2im(const double* cols, const ConvGeom& g, int H, int W, int Ho, int Wo, int channels,
            double* img) {
    const int L = Ho * Wo;
    for (int c = 0; c < channels; ++c) {
        for (int ki = 0; ki < g.kh; ++ki) {
            for (int kj = 0; kj < g.kw; ++kj) {
                const double* row = cols + (static_cast<int64_t>(c) * g.kh * g.kw + ki * g.kw + kj) * L;
                for (int oi = 0; oi < Ho; ++oi) {
                    const int ii = oi * g.stride - g.pad + ki;
                    if (ii < 0 || ii >= H) continue;
                    for (int oj = 0; oj < Wo; ++oj) {
                        const int ij = oj * g.stride - g.pad + kj;
                        if (ij < 0 || ij >= W) continue;
                        img[(static_cast<int64_t>(c) * H + ii) * W + ij] += row[oi * Wo + oj];
                    }
                }
            }
        }
    }
}

} // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    const ConvGeom g = conv_geom(x, w, stride, pad, false);
    if (bias.defined())
        check(bias.ndim() == 1 && bias.dim(0) == g.O, "conv2d: bias must have O entries");
    const bool rec =
        grad_enabled(x, w) || (bias.defined() && grad_enabled(bias));
    Tensor out = make_output({g.B, g.O, g.Ho, g.Wo}, rec);
    const int L = g.Ho * g.Wo;
    const int ck = g.C * g.kh * g.kw;
    std::vector<double> cols(static_cast<size_t>(ck) * L);
    for (int b = 0; b < g.B; ++b) {
        im2col(x.data() + static_cast<int64_t>(b) * g.C * g.H * g.W, g, g.H, g.W, g.Ho, g.Wo,
               cols.data());
        double* y = out.data() + static_cast<int64_t>(b) * g.O * L;
        dgemm(false, false, g.O, ck, L, w.data(), cols.data(), y, 0.0);
        if (bias.defined())
            for (int o = 0; o < g.O; ++o)
                for (int l = 0; l < L; ++l) y[static_cast<int64_t>(o) * L + l] += bias.data()[o];
    }
    if (rec) {
        Tape::active()->record([x, w, bias, out, g]() {
            if (!out_grad_ready(out)) return;
            const int L = g.Ho * g.Wo;
            const int ck = g.C * g.kh * g.kw;
            std::vector<double> cols(static_cast<size_t>(ck) * L);
            std::vector<double> dcols(static_cast<size_t>(ck) * L);
            for (int b = 0; b < g.B; ++b) {
                const double* gy = out.node()->grad.data() + static_cast<int64_t>(b) * g.O * L;
                if (w.requires_grad() || x.requires_grad())
                    im2col(x.data() + static_cast<int64_t>(b) * g.C * g.H * g.W, g, g.H, g.W, g.Ho,
                           g.Wo, cols.data());
                if (w.requires_grad()) // dW += Gy * cols^T
                    dgemm(false, true, g.O, L, ck, gy, cols.data(), w.node()->grad_data(), 1.0);
                if (x.requires_grad()) { // dcols = W^T * Gy, then scatter
                    dgemm(true, false, ck, g.O, L, w.data(), gy, dcols.data(), 0.0);
                    col2im(dcols.data(), g, g.H, g.W, g.Ho, g.Wo, g.C,
                           x.node()->grad_data() + static_cast<int64_t>(b) * g.C * g.H * g.W);
                }
                if (bias.defined() && bias.requires_grad()) {
                    double* gb = bias.node()->grad_data();
                    for (int o = 0; o < g.O; ++o)
                        for (int l = 0; l < L; ++l) gb[o] += gy[static_cast<int64_t>(o) * L + l];
                }
            }
        });
    }
    return out;
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    const ConvGeom g = conv_geom(x, w, stride, pad, true);
    if (bias.defined())
        check(bias.ndim() == 1 && bias.dim(0) == g.O, "conv_transpose2d: bias must have O entries");
    const bool rec = grad_enabled(x, w) || (bias.defined() && grad_enabled(bias));
    Tensor out = make_output({g.B, g.O, g.Ho, g.Wo}, rec);
    // The forward pass is the adjoint of a conv2d mapping [O,Ho,Wo] ->
    // [C,H,W] with the same kernel/stride/pad, so the col2im geometry below
    // is that conv's im2col geometry.
    ConvGeom fwd = g;
    fwd.C = g.O; // channel count seen by im2col/col2im
    const int L = g.H * g.W;
    const int ok = g.O * g.kh * g.kw;
    std::vector<double> cols(static_cast<size_t>(ok) * L);
    for (int b = 0; b < g.B; ++b) {
        // cols = W^T[ok,C] * x[C,L]
        dgemm(true, false, ok, g.C, L, w.data(), x.data() + static_cast<int64_t>(b) * g.C * L,
              cols.data(), 0.0);
        double* y = out.data() + static_cast<int64_t>(b) * g.O * g.Ho * g.Wo;
        std::memset(y, 0, sizeof(double) * static_cast<size_t>(g.O) * g.Ho * g.Wo);
        col2im(cols.data(), fwd, g.Ho, g.Wo, g.H, g.W, g.O, y);
        if (bias.defined())
            for (int o = 0; o < g.O; ++o)
                for (int l = 0; l < g.Ho * g.Wo; ++l)
                    y[static_cast<int64_t>(o) * g.Ho * g.Wo + l] += bias.data()[o];
    }
    if (rec) {
        Tape::active()->record([x, w, bias, out, g, fwd]() {
            if (!out_grad_ready(out)) return;
            const int L = g.H * g.W;
            const int ok = g.O * g.kh * g.kw;
            std::vector<double> gcols(static_cast<size_t>(ok) * L);
            for (int b = 0; b < g.B; ++b) {
                const double* gy =
                    out.node()->grad.data() + static_cast<int64_t>(b) * g.O * g.Ho * g.Wo;
                im2col(gy, fwd, g.Ho, g.Wo, g.H, g.W, gcols.data());
                if (x.requires_grad()) // dx += W[C,ok] * gcols[ok,L]
                    dgemm(false, false, g.C, ok, L, w.data(), gcols.data(),
                          x.node()->grad_data() + static_cast<int64_t>(b) * g.C * L, 1.0);
                if (w.requires_grad()) // dW += x[C,L] * gcols^T[L,ok]
                    dgemm(false, true, g.C, L, ok, x.data() + static_cast<int64_t>(b) * g.C * L,
                          gcols.data(), w.node()->grad_data(), 1.0);
                if (bias.defined() && bias.requires_grad()) {
                    double* gb = bias.node()->grad_data();
                    for (int o = 0; o < g.O; ++o)
                        for (int l = 0; l < g.Ho * g.Wo; ++l)
                            gb[o] += gy[static_cast<int64_t>(o) * g.Ho * g.Wo + l];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dropout / detach

Tensor dropout(const Tensor& x, double p, Rng& rng) {
    check(0.0 <= p && p < 1.0, "dropout: p must be in [0,1)");
    if (p == 0.0) return x;
    const bool rec = grad_enabled(x);
    Tensor out = make_output(x.shape(), rec);
    auto mask = std::make_shared<std::vector<double>>(static_cast<size_t>(x.size()));
    const double keep_scale = 1.0 / (1.0 - p);
    for (int64_t i = 0; i < x.size(); ++i) {
        (*mask)[static_cast<size_t>(i)] = rng.uniform() < p ? 0.0 : keep_scale;
        out.data()[i] = x.data()[i] * (*mask)[static_cast<size_t>(i)];
    }
    if (rec) {
        Tape::active()->record([x, out, mask]() {
            if (!out_grad_ready(out)) return;
            const double* g = out.node()->grad.data();
            double* gx = x.node()->grad_data();
            for (int64_t i = 0; i < x.size(); ++i) gx[i] += g[i] * (*mask)[static_cast<size_t>(i)];
        });
    }
    return out;
}

Tensor detach(const Tensor& a) {
    Tensor out(a.shape(), a.values());
    return out;
}

} // namespace povt
