#include "unfoldir/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace unfoldir::nn {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

namespace {

thread_local bool g_grad_enabled = true;

constexpr int64_t kGrain = 16384;

inline void check(bool cond, const char* msg) {
    if (!cond) throw ValueError(msg);
}

std::shared_ptr<Node> make_node(Shape shape) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val.resize(static_cast<size_t>(shape_numel(n->shape)), 0.0);
    return n;
}

// Builds the result node; parents/backward are kept only when a gradient
// can actually flow.
Tensor op_result(Shape shape, std::vector<double> val,
                 std::vector<std::shared_ptr<Node>> parents,
                 std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val = std::move(val);
    bool rg = false;
    if (g_grad_enabled)
        for (const auto& p : parents)
            if (p && p->requires_grad) rg = true;
    if (rg) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(backward);
    }
    return Tensor(n);
}

inline bool wants(const std::shared_ptr<Node>& p) { return p && p->requires_grad; }

}  // namespace

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

void Node::ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
}

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
    auto n = make_node(s);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::full(const Shape& s, double v, bool requires_grad) {
    auto n = make_node(s);
    std::fill(n->val.begin(), n->val.end(), v);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::from_data(const Shape& s, std::vector<double> data, bool requires_grad) {
    check(static_cast<int64_t>(data.size()) == shape_numel(s), "from_data: size mismatch");
    auto n = std::make_shared<Node>();
    n->shape = s;
    n->val = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

double Tensor::item() const {
    check(numel() == 1, "item() requires a 1-element tensor");
    return node_->val[0];
}

void Tensor::backward() {
    check(defined() && numel() == 1, "backward() requires a scalar");
    if (!node_->requires_grad) return;

    // iterative post-order DFS
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, i] = stack.back();
        if (i < n->parents.size()) {
            Node* p = n->parents[i].get();
            ++i;
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    node_->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "add: shape mismatch");
    int64_t n = a.numel();
    std::vector<double> out(n);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    parallel_chunks(n, kGrain, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) out[i] = pa[i] + pb[i];
    });
    auto an = a.node(), bn = b.node();
    return op_result(a.shape(), std::move(out), {an, bn}, [an, bn](Node& self) {
        const double* g = self.grad.data();
        int64_t n = static_cast<int64_t>(self.val.size());
        if (wants(an)) {
            an->ensure_grad();
            double* da = an->grad.data();
            parallel_chunks(n, kGrain, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) da[i] += g[i];
            });
        }
        if (wants(bn)) {
            bn->ensure_grad();
            double* db = bn->grad.data();
            parallel_chunks(n, kGrain, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) db[i] += g[i];
            });
        }
    });
}

Tensor add(const Tensor& a, double s) {
    int64_t n = a.numel();
    std::vector<double> out(n);
    const double* pa = a.data().data();
    for (int64_t i = 0; i < n; ++i) out[i] = pa[i] + s;
    auto an = a.node();
    return op_result(a.shape(), std::move(out), {an}, [an](Node& self) {
        if (!wants(an)) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "sub: shape mismatch");
    int64_t n = a.numel();
    std::vector<double> out(n);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    parallel_chunks(n, kGrain, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) out[i] = pa[i] - pb[i];
    });
    auto an = a.node(), bn = b.node();
    return op_result(a.shape(), std::move(out), {an, bn}, [an, bn](Node& self) {
        const double* g = self.grad.data();
        int64_t n = static_cast<int64_t>(self.val.size());
        if (wants(an)) {
            an->ensure_grad();
            double* da = an->grad.data();
            parallel_chunks(n, kGrain, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) da[i] += g[i];
            });
        }
        if (wants(bn)) {
            bn->ensure_grad();
            double* db = bn->grad.data();
            parallel_chunks(n, kGrain, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) db[i] -= g[i];
            });
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "mul: shape mismatch");
    int64_t n = a.numel();
    std::vector<double> out(n);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    parallel_chunks(n, kGrain, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) out[i] = pa[i] * pb[i];
    });
    auto an = a.node(), bn = b.node();
    return op_result(a.shape(), std::move(out), {an, bn}, [an, bn](Node& self) {
        const double* g = self.grad.data();
        int64_t n = static_cast<int64_t>(self.val.size());
        if (wants(an)) {
            an->ensure_grad();
            double* da = an->grad.data();
            const double* pb = bn->val.data();
            parallel_chunks(n, kGrain, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) da[i] += g[i] * pb[i];
            });
        }
        if (wants(bn)) {
            bn->ensure_grad();
            double* db = bn->grad.data();
            const double* pa = an->val.data();
            parallel_chunks(n, kGrain, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) db[i] += g[i] * pa[i];
            });
        }
    });
}

Tensor mul(const Tensor& a, double s) {
    int64_t n = a.numel();
    std::vector<double> out(n);
    const double* pa = a.data().data();
    for (int64_t i = 0; i < n; ++i) out[i] = pa[i] * s;
    auto an = a.node();
    return op_result(a.shape(), std::move(out), {an}, [an, s](Node& self) {
        if (!wants(an)) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += s * self.grad[i];
    });
}

Tensor neg(const Tensor& a) { return mul(a, -1.0); }

Tensor gelu(const Tensor& a) {
    int64_t n = a.numel();
    std::vector<double> out(n);
    const double* pa = a.data().data();
    const double inv_sqrt2 = 0.70710678118654752440;
    parallel_chunks(n, kGrain, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i)
            out[i] = 0.5 * pa[i] * (1.0 + std::erf(pa[i] * inv_sqrt2));
    });
    auto an = a.node();
    return op_result(a.shape(), std::move(out), {an}, [an](Node& self) {
        if (!wants(an)) return;
        an->ensure_grad();
        const double* g = self.grad.data();
        const double* x = an->val.data();
        double* da = an->grad.data();
        const double inv_sqrt2 = 0.70710678118654752440;
        const double inv_sqrt2pi = 0.39894228040143267794;
        int64_t n = static_cast<int64_t>(self.val.size());
        parallel_chunks(n, kGrain, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) {
                double cdf = 0.5 * (1.0 + std::erf(x[i] * inv_sqrt2));
                double pdf = inv_sqrt2pi * std::exp(-0.5 * x[i] * x[i]);
                da[i] += g[i] * (cdf + x[i] * pdf);
            }
        });
    });
}

Tensor soft_threshold_op(const Tensor& a, double t) {
    check(t >= 0.0, "soft_threshold: threshold must be >= 0");
    int64_t n = a.numel();
    std::vector<double> out(n);
    const double* pa = a.data().data();
    for (int64_t i = 0; i < n; ++i) {
        double v = pa[i];
        out[i] = v > t ? v - t : (v < -t ? v + t : 0.0);
    }
    auto an = a.node();
    return op_result(a.shape(), std::move(out), {an}, [an, t](Node& self) {
        if (!wants(an)) return;
        an->ensure_grad();
        const double* x = an->val.data();
        for (size_t i = 0; i < self.grad.size(); ++i)
            if (std::fabs(x[i]) > t) an->grad[i] += self.grad[i];
    });
}

Tensor softplus_op(const Tensor& a) {
    int64_t n = a.numel();
    std::vector<double> out(n);
    const double* pa = a.data().data();
    for (int64_t i = 0; i < n; ++i)
        out[i] = pa[i] > 30.0 ? pa[i] : std::log1p(std::exp(pa[i]));
    auto an = a.node();
    return op_result(a.shape(), std::move(out), {an}, [an](Node& self) {
        if (!wants(an)) return;
        an->ensure_grad();
        const double* x = an->val.data();
        for (size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i] / (1.0 + std::exp(-x[i]));
    });
}

Tensor exp_op(const Tensor& a) {
    int64_t n = a.numel();
    std::vector<double> out(n);
    const double* pa = a.data().data();
    for (int64_t i = 0; i < n; ++i) out[i] = std::exp(pa[i]);
    auto an = a.node();
    return op_result(a.shape(), std::move(out), {an}, [an](Node& self) {
        if (!wants(an)) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            an->grad[i] += self.grad[i] * self.val[i];
    });
}

Tensor mul_scalar_tensor(const Tensor& x, const Tensor& s) {
    check(s.numel() == 1, "mul_scalar_tensor: scale must have 1 element");
    double sv = s.data()[0];
    int64_t n = x.numel();
    std::vector<double> out(n);
    const double* px = x.data().data();
    parallel_chunks(n, kGrain, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) out[i] = px[i] * sv;
    });
    auto xn = x.node(), sn = s.node();
    return op_result(x.shape(), std::move(out), {xn, sn}, [xn, sn](Node& self) {
        const double* g = self.grad.data();
        int64_t n = static_cast<int64_t>(self.val.size());
        if (wants(xn)) {
            xn->ensure_grad();
            double sv = sn->val[0];
            double* dx = xn->grad.data();
            parallel_chunks(n, kGrain, [&](int64_t lo, int64_t hi) {
                for (int64_t i = lo; i < hi; ++i) dx[i] += g[i] * sv;
            });
        }
        if (wants(sn)) {
            sn->ensure_grad();
            const double* px = xn->val.data();
            double acc = 0.0;
            for (int64_t i = 0; i < n; ++i) acc += g[i] * px[i];
            sn->grad[0] += acc;
        }
    });
}

// ---------------------------------------------------------------------- shape

Tensor reshape(const Tensor& a, const Shape& s) {
    check(shape_numel(s) == a.numel(), "reshape: numel mismatch");
    std::vector<double> out = a.data();
    auto an = a.node();
    return op_result(s, std::move(out), {an}, [an](Node& self) {
        if (!wants(an)) return;
        an->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
}

namespace {

void permute4_map(const Shape& in_shape, const std::array<int, 4>& axes,
                  const std::function<void(int64_t src, int64_t dst)>& assign) {
    int64_t d[4] = {in_shape[0], in_shape[1], in_shape[2], in_shape[3]};
    int64_t stride[4] = {d[1] * d[2] * d[3], d[2] * d[3], d[3], 1};
    int64_t od[4] = {d[axes[0]], d[axes[1]], d[axes[2]], d[axes[3]]};
    int64_t idx = 0;
    for (int64_t i0 = 0; i0 < od[0]; ++i0)
        for (int64_t i1 = 0; i1 < od[1]; ++i1)
            for (int64_t i2 = 0; i2 < od[2]; ++i2)
                for (int64_t i3 = 0; i3 < od[3]; ++i3) {
                    int64_t src = i0 * stride[axes[0]] + i1 * stride[axes[1]] +
                                  i2 * stride[axes[2]] + i3 * stride[axes[3]];
                    assign(src, idx++);
                }
}

}  // namespace

Tensor permute4(const Tensor& a, const std::array<int, 4>& axes) {
    check(a.ndim() == 4, "permute4: needs 4-d tensor");
    Shape out_shape = {a.shape()[axes[0]], a.shape()[axes[1]], a.shape()[axes[2]],
                       a.shape()[axes[3]]};
    std::vector<double> out(a.numel());
    const double* pa = a.data().data();
    permute4_map(a.shape(), axes, [&](int64_t src, int64_t dst) { out[dst] = pa[src]; });
    auto an = a.node();
    Shape in_shape = a.shape();
    return op_result(out_shape, std::move(out), {an}, [an, in_shape, axes](Node& self) {
        if (!wants(an)) return;
        an->ensure_grad();
        const double* g = self.grad.data();
        permute4_map(in_shape, axes,
                     [&](int64_t src, int64_t dst) { an->grad[src] += g[dst]; });
    });
}

Tensor slice_channels(const Tensor& x, int64_t c0, int64_t c1) {
    check(x.ndim() == 4, "slice_channels: needs NCHW");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(0 <= c0 && c0 < c1 && c1 <= C, "slice_channels: bad range");
    int64_t Cs = c1 - c0, HW = H * W;
    std::vector<double> out(N * Cs * HW);
    const double* px = x.data().data();
    for (int64_t n = 0; n < N; ++n)
        std::memcpy(out.data() + n * Cs * HW, px + (n * C + c0) * HW,
                    static_cast<size_t>(Cs * HW) * sizeof(double));
    auto xn = x.node();
    return op_result({N, Cs, H, W}, std::move(out), {xn}, [xn, c0, Cs, HW, C, N](Node& self) {
        if (!wants(xn)) return;
        xn->ensure_grad();
        const double* g = self.grad.data();
        for (int64_t n = 0; n < N; ++n) {
            double* dst = xn->grad.data() + (n * C + c0) * HW;
            const double* src = g + n * Cs * HW;
            for (int64_t i = 0; i < Cs * HW; ++i) dst[i] += src[i];
        }
    });
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 4 && b.ndim() == 4, "concat_channels: needs NCHW");
    check(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
          "concat_channels: shape mismatch");
    int64_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), H = a.dim(2), W = a.dim(3);
    int64_t HW = H * W, C = Ca + Cb;
    std::vector<double> out(N * C * HW);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int64_t n = 0; n < N; ++n) {
        std::memcpy(out.data() + n * C * HW, pa + n * Ca * HW,
                    static_cast<size_t>(Ca * HW) * sizeof(double));
        std::memcpy(out.data() + (n * C + Ca) * HW, pb + n * Cb * HW,
                    static_cast<size_t>(Cb * HW) * sizeof(double));
    }
    auto an = a.node(), bn = b.node();
    return op_result({N, C, H, W}, std::move(out), {an, bn},
                     [an, bn, N, Ca, Cb, HW, C](Node& self) {
        const double* g = self.grad.data();
        if (wants(an)) {
            an->ensure_grad();
            for (int64_t n = 0; n < N; ++n) {
                double* dst = an->grad.data() + n * Ca * HW;
                const double* src = g + n * C * HW;
                for (int64_t i = 0; i < Ca * HW; ++i) dst[i] += src[i];
            }
        }
        if (wants(bn)) {
            bn->ensure_grad();
            for (int64_t n = 0; n < N; ++n) {
                double* dst = bn->grad.data() + n * Cb * HW;
                const double* src = g + (n * C + Ca) * HW;
                for (int64_t i = 0; i < Cb * HW; ++i) dst[i] += src[i];
            }
        }
    });
}

Tensor repeat_rows(const Tensor& x, int64_t n) {
    check(x.ndim() == 2 && x.dim(0) == 1, "repeat_rows: needs (1,D)");
    int64_t D = x.dim(1);
    std::vector<double> out(n * D);
    for (int64_t r = 0; r < n; ++r)
        std::memcpy(out.data() + r * D, x.data().data(), static_cast<size_t>(D) * sizeof(double));
    auto xn = x.node();
    return op_result({n, D}, std::move(out), {xn}, [xn, n, D](Node& self) {
        if (!wants(xn)) return;
        xn->ensure_grad();
        const double* g = self.grad.data();
        for (int64_t r = 0; r < n; ++r)
            for (int64_t d = 0; d < D; ++d) xn->grad[d] += g[r * D + d];
    });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& rows) {
    check(x.ndim() == 2, "gather_rows: needs (M,D)");
    int64_t M = x.dim(0), D = x.dim(1);
    int64_t B = static_cast<int64_t>(rows.size());
    for (int r : rows)
        check(r >= 0 && r < M, "gather_rows: row index out of range");
    std::vector<double> out(B * D);
    const double* px = x.data().data();
    for (int64_t i = 0; i < B; ++i)
        std::memcpy(out.data() + i * D, px + static_cast<int64_t>(rows[i]) * D,
                    static_cast<size_t>(D) * sizeof(double));
    auto xn = x.node();
    std::vector<int> rr = rows;
    return op_result({B, D}, std::move(out), {xn}, [xn, rr, D](Node& self) {
        if (!wants(xn)) return;
        xn->ensure_grad();
        const double* g = self.grad.data();
        for (size_t i = 0; i < rr.size(); ++i) {
            double* dst = xn->grad.data() + static_cast<int64_t>(rr[i]) * D;
            const double* src = g + static_cast<int64_t>(i) * D;
            for (int64_t d = 0; d < D; ++d) dst[d] += src[d];
        }
    });
}

// ----------------------------------------------------------------- reductions

Tensor sum_all(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    auto an = a.node();
    return op_result({1}, {acc}, {an}, [an](Node& self) {
        if (!wants(an)) return;
        an->ensure_grad();
        double g = self.grad[0];
        for (double& d : an->grad) d += g;
    });
}

Tensor mean_all(const Tensor& a) {
    int64_t n = a.numel();
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    acc /= static_cast<double>(n);
    auto an = a.node();
    return op_result({1}, {acc}, {an}, [an, n](Node& self) {
        if (!wants(an)) return;
        an->ensure_grad();
        double g = self.grad[0] / static_cast<double>(n);
        for (double& d : an->grad) d += g;
    });
}

Tensor sum_lastdim(const Tensor& a) {
    check(a.ndim() >= 1, "sum_lastdim: empty shape");
    int64_t L = a.shape().back();
    int64_t rows = a.numel() / L;
    Shape out_shape(a.shape().begin(), a.shape().end() - 1);
    if (out_shape.empty()) out_shape = {1};
    std::vector<double> out(rows, 0.0);
    const double* pa = a.data().data();
    for (int64_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (int64_t i = 0; i < L; ++i) acc += pa[r * L + i];
        out[r] = acc;
    }
    auto an = a.node();
    return op_result(out_shape, std::move(out), {an}, [an, rows, L](Node& self) {
        if (!wants(an)) return;
        an->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            double g = self.grad[r];
            for (int64_t i = 0; i < L; ++i) an->grad[r * L + i] += g;
        }
    });
}

Tensor l1_loss(const Tensor& a, const Tensor& b) {
    check(a.shape() == b.shape(), "l1_loss: shape mismatch");
    int64_t n = a.numel();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) acc += std::fabs(pa[i] - pb[i]);
    acc /= static_cast<double>(n);
    auto an = a.node(), bn = b.node();
    return op_result({1}, {acc}, {an, bn}, [an, bn, n](Node& self) {
        double g = self.grad[0] / static_cast<double>(n);
        const double* pa = an->val.data();
        const double* pb = bn->val.data();
        if (wants(an)) {
            an->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                double d = pa[i] - pb[i];
                an->grad[i] += g * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
            }
        }
        if (wants(bn)) {
            bn->ensure_grad();
            for (int64_t i = 0; i < n; ++i) {
                double d = pa[i] - pb[i];
                bn->grad[i] -= g * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
            }
        }
    });
}

Tensor softmax_lastdim(const Tensor& a) {
    int64_t L = a.shape().back();
    int64_t rows = a.numel() / L;
    std::vector<double> out(a.numel());
    const double* pa = a.data().data();
    parallel_chunks(rows, 64, [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
            const double* x = pa + r * L;
            double* y = out.data() + r * L;
            double m = x[0];
            for (int64_t i = 1; i < L; ++i) m = std::max(m, x[i]);
            double s = 0.0;
            for (int64_t i = 0; i < L; ++i) {
                y[i] = std::exp(x[i] - m);
                s += y[i];
            }
            for (int64_t i = 0; i < L; ++i) y[i] /= s;
        }
    });
    auto an = a.node();
    return op_result(a.shape(), std::move(out), {an}, [an, rows, L](Node& self) {
        if (!wants(an)) return;
        an->ensure_grad();
        const double* g = self.grad.data();
        const double* y = self.val.data();
        double* da = an->grad.data();
        parallel_chunks(rows, 64, [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
                double dot = 0.0;
                for (int64_t i = 0; i < L; ++i) dot += g[r * L + i] * y[r * L + i];
                for (int64_t i = 0; i < L; ++i)
                    da[r * L + i] += y[r * L + i] * (g[r * L + i] - dot);
            }
        });
    });
}

Tensor l2_normalize_lastdim(const Tensor& a, double eps) {
    int64_t L = a.shape().back();
    int64_t rows = a.numel() / L;
    std::vector<double> out(a.numel());
    const double* pa = a.data().data();
    parallel_chunks(rows, 64, [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
            const double* x = pa + r * L;
            double s = 0.0;
            for (int64_t i = 0; i < L; ++i) s += x[i] * x[i];
            double inv = 1.0 / std::sqrt(s + eps);
            for (int64_t i = 0; i < L; ++i) out[r * L + i] = x[i] * inv;
        }
    });
    auto an = a.node();
    return op_result(a.shape(), std::move(out), {an}, [an, rows, L, eps](Node& self) {
        if (!wants(an)) return;
        an->ensure_grad();
        const double* g = self.grad.data();
        const double* x = an->val.data();
        double* da = an->grad.data();
        parallel_chunks(rows, 64, [&](int64_t lo, int64_t hi) {
            for (int64_t r = lo; r < hi; ++r) {
                double s = 0.0, dot = 0.0;
                for (int64_t i = 0; i < L; ++i) s += x[r * L + i] * x[r * L + i];
                double n2 = s + eps;
                double inv = 1.0 / std::sqrt(n2);
                for (int64_t i = 0; i < L; ++i) dot += g[r * L + i] * x[r * L + i];
                double scale = dot / (n2 * std::sqrt(n2));
                for (int64_t i = 0; i < L; ++i)
                    da[r * L + i] += g[r * L + i] * inv - x[r * L + i] * scale;
            }
        });
    });
}

namespace {

// stats layout helper for layer_norm_channels: element (pos, c) where pos
// enumerates (n, h, w); x index = (n*C + c)*HW + hw
struct ChanLN {
    int64_t N, C, HW;
    int64_t idx(int64_t pos, int64_t c) const {
        int64_t n = pos / HW, hw = pos % HW;
        return (n * C + c) * HW + hw;
    }
};

}  // namespace

Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    check(x.ndim() == 4, "layer_norm_channels: needs NCHW");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(gamma.numel() == C && beta.numel() == C, "layer_norm_channels: affine size");
    ChanLN m{N, C, H * W};
    int64_t P = N * m.HW;
    std::vector<double> out(x.numel());
    const double* px = x.data().data();
    const double* pg = gamma.data().data();
    const double* pb = beta.data().data();
    parallel_chunks(P, 256, [&](int64_t lo, int64_t hi) {
        for (int64_t p = lo; p < hi; ++p) {
            double mu = 0.0;
            for (int64_t c = 0; c < C; ++c) mu += px[m.idx(p, c)];
            mu /= C;
            double var = 0.0;
            for (int64_t c = 0; c < C; ++c) {
                double d = px[m.idx(p, c)] - mu;
                var += d * d;
            }
            var /= C;
            double inv = 1.0 / std::sqrt(var + eps);
            for (int64_t c = 0; c < C; ++c) {
                double xhat = (px[m.idx(p, c)] - mu) * inv;
                out[m.idx(p, c)] = pg[c] * xhat + pb[c];
            }
        }
    });
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return op_result(x.shape(), std::move(out), {xn, gn, bn}, [xn, gn, bn, m, P, eps](Node& self) {
        const double* g = self.grad.data();
        const double* px = xn->val.data();
        const double* pg = gn->val.data();
        int64_t C = m.C;
        if (wants(xn)) {
            xn->ensure_grad();
            double* dx = xn->grad.data();
            parallel_chunks(P, 256, [&](int64_t lo, int64_t hi) {
                for (int64_t p = lo; p < hi; ++p) {
                    double mu = 0.0;
                    for (int64_t c = 0; c < C; ++c) mu += px[m.idx(p, c)];
                    mu /= C;
                    double var = 0.0;
                    for (int64_t c = 0; c < C; ++c) {
                        double d = px[m.idx(p, c)] - mu;
                        var += d * d;
                    }
                    var /= C;
                    double inv = 1.0 / std::sqrt(var + eps);
                    double m1 = 0.0, m2 = 0.0;
                    for (int64_t c = 0; c < C; ++c) {
                        double xhat = (px[m.idx(p, c)] - mu) * inv;
                        double dxh = g[m.idx(p, c)] * pg[c];
                        m1 += dxh;
                        m2 += dxh * xhat;
                    }
                    m1 /= C;
                    m2 /= C;
                    for (int64_t c = 0; c < C; ++c) {
                        double xhat = (px[m.idx(p, c)] - mu) * inv;
                        double dxh = g[m.idx(p, c)] * pg[c];
                        dx[m.idx(p, c)] += (dxh - m1 - xhat * m2) * inv;
                    }
                }
            });
        }
        if (wants(gn) || wants(bn)) {
            if (wants(gn)) gn->ensure_grad();
            if (wants(bn)) bn->ensure_grad();
            std::vector<double> mus(P), invs(P);
            parallel_chunks(P, 256, [&](int64_t lo, int64_t hi) {
                for (int64_t p = lo; p < hi; ++p) {
                    double mu = 0.0;
                    for (int64_t c = 0; c < C; ++c) mu += px[m.idx(p, c)];
                    mu /= C;
                    double var = 0.0;
                    for (int64_t c = 0; c < C; ++c) {
                        double dd = px[m.idx(p, c)] - mu;
                        var += dd * dd;
                    }
                    mus[p] = mu;
                    invs[p] = 1.0 / std::sqrt(var / C + eps);
                }
            });
            parallel_chunks(C, 1, [&](int64_t clo, int64_t chi) {
                for (int64_t c = clo; c < chi; ++c) {
                    double dg = 0.0, db = 0.0;
                    for (int64_t p = 0; p < P; ++p) {
                        double xhat = (px[m.idx(p, c)] - mus[p]) * invs[p];
                        dg += g[m.idx(p, c)] * xhat;
                        db += g[m.idx(p, c)];
                    }
                    if (wants(gn)) gn->grad[c] += dg;
                    if (wants(bn)) bn->grad[c] += db;
                }
            });
        }
    });
}

Tensor layer_norm_lastdim(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    int64_t D = x.shape().back();
    int64_t R = x.numel() / D;
    check(gamma.numel() == D && beta.numel() == D, "layer_norm_lastdim: affine size");
    std::vector<double> out(x.numel());
    const double* px = x.data().data();
    const double* pg = gamma.data().data();
    const double* pb = beta.data().data();
    for (int64_t r = 0; r < R; ++r) {
        const double* xr = px + r * D;
        double mu = 0.0;
        for (int64_t i = 0; i < D; ++i) mu += xr[i];
        mu /= D;
        double var = 0.0;
        for (int64_t i = 0; i < D; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= D;
        double inv = 1.0 / std::sqrt(var + eps);
        for (int64_t i = 0; i < D; ++i) out[r * D + i] = pg[i] * (xr[i] - mu) * inv + pb[i];
    }
    auto xn = x.node(), gn = gamma.node(), bn = beta.node();
    return op_result(x.shape(), std::move(out), {xn, gn, bn}, [xn, gn, bn, R, D, eps](Node& self) {
        const double* g = self.grad.data();
        const double* px = xn->val.data();
        const double* pg = gn->val.data();
        std::vector<double> dgamma(D, 0.0), dbeta(D, 0.0);
        if (wants(xn)) xn->ensure_grad();
        for (int64_t r = 0; r < R; ++r) {
            const double* xr = px + r * D;
            double mu = 0.0;
            for (int64_t i = 0; i < D; ++i) mu += xr[i];
            mu /= D;
            double var = 0.0;
            for (int64_t i = 0; i < D; ++i) var += (xr[i] - mu) * (xr[i] - mu);
            var /= D;
            double inv = 1.0 / std::sqrt(var + eps);
            double m1 = 0.0, m2 = 0.0;
            for (int64_t i = 0; i < D; ++i) {
                double xhat = (xr[i] - mu) * inv;
                double dxh = g[r * D + i] * pg[i];
                m1 += dxh;
                m2 += dxh * xhat;
                dgamma[i] += g[r * D + i] * xhat;
                dbeta[i] += g[r * D + i];
            }
            m1 /= D;
            m2 /= D;
            if (wants(xn))
                for (int64_t i = 0; i < D; ++i) {
                    double xhat = (xr[i] - mu) * inv;
                    double dxh = g[r * D + i] * pg[i];
                    xn->grad[r * D + i] += (dxh - m1 - xhat * m2) * inv;
                }
        }
        if (wants(gn)) {
            gn->ensure_grad();
            for (int64_t i = 0; i < D; ++i) gn->grad[i] += dgamma[i];
        }
        if (wants(bn)) {
            bn->ensure_grad();
            for (int64_t i = 0; i < D; ++i) bn->grad[i] += dbeta[i];
        }
    });
}

Tensor global_avg_pool(const Tensor& x) {
    check(x.ndim() == 4, "global_avg_pool: needs NCHW");
    int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<double> out(N * C);
    const double* px = x.data().data();
    for (int64_t i = 0; i < N * C; ++i) {
        double acc = 0.0;
        for (int64_t j = 0; j < HW; ++j) acc += px[i * HW + j];
        out[i] = acc / HW;
    }
    auto xn = x.node();
    return op_result({N, C}, std::move(out), {xn}, [xn, N, C, HW](Node& self) {
        if (!wants(xn)) return;
        xn->ensure_grad();
        for (int64_t i = 0; i < N * C; ++i) {
            double g = self.grad[i] / HW;
            for (int64_t j = 0; j < HW; ++j) xn->grad[i * HW + j] += g;
        }
    });
}

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets) {
    check(logits.ndim() == 2, "cross_entropy_rows: needs (N,M)");
    int64_t N = logits.dim(0), M = logits.dim(1);
    check(static_cast<int64_t>(targets.size()) == N, "cross_entropy_rows: target count");
    for (int t : targets) check(t >= 0 && t < M, "cross_entropy_rows: target out of range");
    const double* pl = logits.data().data();
    double loss = 0.0;
    for (int64_t r = 0; r < N; ++r) {
        const double* x = pl + r * M;
        double m = x[0];
        for (int64_t i = 1; i < M; ++i) m = std::max(m, x[i]);
        double s = 0.0;
        for (int64_t i = 0; i < M; ++i) s += std::exp(x[i] - m);
        loss += m + std::log(s) - x[targets[r]];
    }
    loss /= static_cast<double>(N);
    auto ln = logits.node();
    std::vector<int> tg = targets;
    return op_result({1}, {loss}, {ln}, [ln, N, M, tg](Node& self) {
        if (!wants(ln)) return;
        ln->ensure_grad();
        double g = self.grad[0] / static_cast<double>(N);
        const double* x0 = ln->val.data();
        for (int64_t r = 0; r < N; ++r) {
            const double* x = x0 + r * M;
            double m = x[0];
            for (int64_t i = 1; i < M; ++i) m = std::max(m, x[i]);
            double s = 0.0;
            for (int64_t i = 0; i < M; ++i) s += std::exp(x[i] - m);
            for (int64_t i = 0; i < M; ++i) {
                double p = std::exp(x[i] - m) / s;
                ln->grad[r * M + i] += g * (p - (i == tg[r] ? 1.0 : 0.0));
            }
        }
    });
}

Tensor cosine_rows(const Tensor& a, const Tensor& b, double eps) {
    check(a.shape() == b.shape() && a.ndim() == 2, "cosine_rows: needs matching (N,D)");
    int64_t N = a.dim(0), D = a.dim(1);
    std::vector<double> out(N);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (int64_t r = 0; r < N; ++r) {
        double sa = 0, sb = 0, dot = 0;
        for (int64_t i = 0; i < D; ++i) {
            sa += pa[r * D + i] * pa[r * D + i];
            sb += pb[r * D + i] * pb[r * D + i];
            dot += pa[r * D + i] * pb[r * D + i];
        }
        out[r] = dot / (std::sqrt(sa + eps) * std::sqrt(sb + eps));
    }
    auto an = a.node(), bn = b.node();
    return op_result({N}, std::move(out), {an, bn}, [an, bn, N, D, eps](Node& self) {
        const double* pa = an->val.data();
        const double* pb = bn->val.data();
        for (int64_t r = 0; r < N; ++r) {
            double sa = 0, sb = 0, dot = 0;
            for (int64_t i = 0; i < D; ++i) {
                sa += pa[r * D + i] * pa[r * D + i];
                sb += pb[r * D + i] * pb[r * D + i];
                dot += pa[r * D + i] * pb[r * D + i];
            }
            double na = std::sqrt(sa + eps), nb = std::sqrt(sb + eps);
            double g = self.grad[r];
            if (wants(an)) {
                an->ensure_grad();
                for (int64_t i = 0; i < D; ++i)
                    an->grad[r * D + i] +=
                        g * (pb[r * D + i] / (na * nb) - pa[r * D + i] * dot / (na * na * na * nb));
            }
            if (wants(bn)) {
                bn->ensure_grad();
                for (int64_t i = 0; i < D; ++i)
                    bn->grad[r * D + i] +=
                        g * (pa[r * D + i] / (na * nb) - pb[r * D + i] * dot / (nb * nb * nb * na));
            }
        }
    });
}

// -------------------------------------------------------------- linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0), "matmul: shape mismatch");
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n);
    CMapM ma(a.data().data(), m, k), mb(b.data().data(), k, n);
    MapM mo(out.data(), m, n);
    mo.noalias() = ma * mb;
    auto an = a.node(), bn = b.node();
    return op_result({m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](Node& self) {
        CMapM g(self.grad.data(), m, n);
        if (wants(an)) {
            an->ensure_grad();
            MapM da(an->grad.data(), m, k);
            CMapM mb(bn->val.data(), k, n);
            da.noalias() += g * mb.transpose();
        }
        if (wants(bn)) {
            bn->ensure_grad();
            MapM db(bn->grad.data(), k, n);
            CMapM ma(an->val.data(), m, k);
            db.noalias() += ma.transpose() * g;
        }
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(1), "matmul_nt: shape mismatch");
    int64_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    std::vector<double> out(m * n);
    CMapM ma(a.data().data(), m, k), mb(b.data().data(), n, k);
    MapM mo(out.data(), m, n);
    mo.noalias() = ma * mb.transpose();
    auto an = a.node(), bn = b.node();
    return op_result({m, n}, std::move(out), {an, bn}, [an, bn, m, k, n](Node& self) {
        CMapM g(self.grad.data(), m, n);
        if (wants(an)) {
            an->ensure_grad();
            MapM da(an->grad.data(), m, k);
            CMapM mb(bn->val.data(), n, k);
            da.noalias() += g * mb;
        }
        if (wants(bn)) {
            bn->ensure_grad();
            MapM db(bn->grad.data(), n, k);
            CMapM ma(an->val.data(), m, k);
            db.noalias() += g.transpose() * ma;
        }
    });
}

Tensor linear_op(const Tensor& x, const Tensor& w, const Tensor& b) {
    check(x.ndim() == 2 && w.ndim() == 2 && x.dim(1) == w.dim(1), "linear: shape mismatch");
    int64_t N = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
    std::vector<double> out(N * out_dim);
    CMapM mx(x.data().data(), N, in), mw(w.data().data(), out_dim, in);
    MapM mo(out.data(), N, out_dim);
    mo.noalias() = mx * mw.transpose();
    if (b.defined()) {
        check(b.numel() == out_dim, "linear: bias size");
        const double* pb = b.data().data();
        for (int64_t r = 0; r < N; ++r)
            for (int64_t c = 0; c < out_dim; ++c) out[r * out_dim + c] += pb[c];
    }
    auto xn = x.node(), wn = w.node();
    auto bn = b.defined() ? b.node() : nullptr;
    return op_result({N, out_dim}, std::move(out), {xn, wn, bn},
                     [xn, wn, bn, N, in, out_dim](Node& self) {
        CMapM g(self.grad.data(), N, out_dim);
        if (wants(xn)) {
            xn->ensure_grad();
            MapM dx(xn->grad.data(), N, in);
            CMapM mw(wn->val.data(), out_dim, in);
            dx.noalias() += g * mw;
        }
        if (wants(wn)) {
            wn->ensure_grad();
            MapM dw(wn->grad.data(), out_dim, in);
            CMapM mx(xn->val.data(), N, in);
            dw.noalias() += g.transpose() * mx;
        }
        if (bn && wants(bn)) {
            bn->ensure_grad();
            for (int64_t c = 0; c < out_dim; ++c) {
                double acc = 0.0;
                for (int64_t r = 0; r < N; ++r) acc += self.grad[r * out_dim + c];
                bn->grad[c] += acc;
            }
        }
    });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
          "bmm: shape mismatch");
    int64_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<double> out(B * m * n);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    parallel_chunks(B, 1, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            CMapM ma(pa + i * m * k, m, k), mb(pb + i * k * n, k, n);
            MapM mo(out.data() + i * m * n, m, n);
            mo.noalias() = ma * mb;
        }
    });
    auto an = a.node(), bn = b.node();
    return op_result({B, m, n}, std::move(out), {an, bn}, [an, bn, B, m, k, n](Node& self) {
        if (wants(an)) an->ensure_grad();
        if (wants(bn)) bn->ensure_grad();
        parallel_chunks(B, 1, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) {
                CMapM g(self.grad.data() + i * m * n, m, n);
                if (wants(an)) {
                    MapM da(an->grad.data() + i * m * k, m, k);
                    CMapM mb(bn->val.data() + i * k * n, k, n);
                    da.noalias() += g * mb.transpose();
                }
                if (wants(bn)) {
                    MapM db(bn->grad.data() + i * k * n, k, n);
                    CMapM ma(an->val.data() + i * m * k, m, k);
                    db.noalias() += ma.transpose() * g;
                }
            }
        });
    });
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
    check(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2),
          "bmm_nt: shape mismatch");
    int64_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    std::vector<double> out(B * m * n);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    parallel_chunks(B, 1, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            CMapM ma(pa + i * m * k, m, k), mb(pb + i * n * k, n, k);
            MapM mo(out.data() + i * m * n, m, n);
            mo.noalias() = ma * mb.transpose();
        }
    });
    auto an = a.node(), bn = b.node();
    return op_result({B, m, n}, std::move(out), {an, bn}, [an, bn, B, m, k, n](Node& self) {
        if (wants(an)) an->ensure_grad();
        if (wants(bn)) bn->ensure_grad();
        parallel_chunks(B, 1, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) {
                CMapM g(self.grad.data() + i * m * n, m, n);
                if (wants(an)) {
                    MapM da(an->grad.data() + i * m * k, m, k);
                    CMapM mb(bn->val.data() + i * n * k, n, k);
                    da.noalias() += g * mb;
                }
                if (wants(bn)) {
                    MapM db(bn->grad.data() + i * n * k, n, k);
                    CMapM ma(an->val.data() + i * m * k, m, k);
                    db.noalias() += g.transpose() * ma;
                }
            }
        });
    });
}

Tensor scale_by_head(const Tensor& x, const Tensor& t, int64_t heads) {
    check(x.ndim() == 3, "scale_by_head: needs (B,m,n)");
    check(t.numel() == heads, "scale_by_head: temperature count");
    int64_t B = x.dim(0), sz = x.dim(1) * x.dim(2);
    check(B % heads == 0, "scale_by_head: B not divisible by heads");
    std::vector<double> out(x.numel());
    const double* px = x.data().data();
    const double* pt = t.data().data();
    for (int64_t b = 0; b < B; ++b) {
        double s = pt[b % heads];
        for (int64_t i = 0; i < sz; ++i) out[b * sz + i] = px[b * sz + i] * s;
    }
    auto xn = x.node(), tn = t.node();
    return op_result(x.shape(), std::move(out), {xn, tn}, [xn, tn, B, sz, heads](Node& self) {
        const double* g = self.grad.data();
        if (wants(xn)) {
            xn->ensure_grad();
            const double* pt = tn->val.data();
            for (int64_t b = 0; b < B; ++b) {
                double s = pt[b % heads];
                for (int64_t i = 0; i < sz; ++i) xn->grad[b * sz + i] += g[b * sz + i] * s;
            }
        }
        if (wants(tn)) {
            tn->ensure_grad();
            const double* px = xn->val.data();
            for (int64_t b = 0; b < B; ++b) {
                double acc = 0.0;
                for (int64_t i = 0; i < sz; ++i) acc += g[b * sz + i] * px[b * sz + i];
                tn->grad[b % heads] += acc;
            }
        }
    });
}

// -------------------------------------------------------------------- spatial

namespace {

struct ConvDims {
    int64_t N, Ci, H, W, Co, kh, kw;
    int stride, pad;
    int64_t Ho, Wo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, int stride, int pad, int groups) {
    check(x.ndim() == 4 && w.ndim() == 4, "conv2d: needs 4-d tensors");
    ConvDims d;
    d.N = x.dim(0);
    d.Ci = x.dim(1);
    d.H = x.dim(2);
    d.W = x.dim(3);
    d.Co = w.dim(0);
    d.kh = w.dim(2);
    d.kw = w.dim(3);
    d.stride = stride;
    d.pad = pad;
    check(stride >= 1, "conv2d: stride >= 1");
    check(pad >= 0, "conv2d: pad >= 0");
    check(groups >= 1 && d.Ci % groups == 0 && d.Co % groups == 0, "conv2d: bad groups");
    check(w.dim(1) == d.Ci / groups, "conv2d: weight in-channels mismatch");
    d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
    d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
    check(d.Ho >= 1 && d.Wo >= 1, "conv2d: output would be empty");
    return d;
}

// cols: (Ci*kh*kw) x (Ho*Wo), row-major
void im2col(const double* x, const ConvDims& d, double* cols) {
    int64_t HoWo = d.Ho * d.Wo;
    for (int64_t ci = 0; ci < d.Ci; ++ci)
        for (int64_t ky = 0; ky < d.kh; ++ky)
            for (int64_t kx = 0; kx < d.kw; ++kx) {
                double* row = cols + ((ci * d.kh + ky) * d.kw + kx) * HoWo;
                for (int64_t oy = 0; oy < d.Ho; ++oy) {
                    int64_t iy = oy * d.stride + ky - d.pad;
                    for (int64_t ox = 0; ox < d.Wo; ++ox) {
                        int64_t ix = ox * d.stride + kx - d.pad;
                        row[oy * d.Wo + ox] =
                            (iy >= 0 && iy < d.H && ix >= 0 && ix < d.W)
                                ? x[(ci * d.H + iy) * d.W + ix]
                                : 0.0;
                    }
                }
            }
}

void col2im_add(const double* cols, const ConvDims& d, double* dx) {
    int64_t HoWo = d.Ho * d.Wo;
    for (int64_t ci = 0; ci < d.Ci; ++ci)
        for (int64_t ky = 0; ky < d.kh; ++ky)
            for (int64_t kx = 0; kx < d.kw; ++kx) {
                const double* row = cols + ((ci * d.kh + ky) * d.kw + kx) * HoWo;
                for (int64_t oy = 0; oy < d.Ho; ++oy) {
                    int64_t iy = oy * d.stride + ky - d.pad;
                    if (iy < 0 || iy >= d.H) continue;
                    for (int64_t ox = 0; ox < d.Wo; ++ox) {
                        int64_t ix = ox * d.stride + kx - d.pad;
                        if (ix < 0 || ix >= d.W) continue;
                        dx[(ci * d.H + iy) * d.W + ix] += row[oy * d.Wo + ox];
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad,
              int groups) {
    ConvDims d = conv_dims(x, w, stride, pad, groups);
    bool depthwise = (groups > 1);
    if (depthwise)
        check(groups == d.Ci && d.Co == d.Ci, "conv2d: only groups=1 or depthwise supported");
    bool point = (d.kh == 1 && d.kw == 1 && stride == 1 && pad == 0 && !depthwise);
    if (bias.defined()) check(bias.numel() == d.Co, "conv2d: bias size");

    int64_t HoWo = d.Ho * d.Wo;
    std::vector<double> out(d.N * d.Co * HoWo, 0.0);
    const double* px = x.data().data();
    const double* pw = w.data().data();

    if (point) {
        parallel_chunks(d.N, 1, [&](int64_t lo, int64_t hi) {
            for (int64_t n = lo; n < hi; ++n) {
                CMapM mx(px + n * d.Ci * HoWo, d.Ci, HoWo);
                CMapM mw(pw, d.Co, d.Ci);
                MapM mo(out.data() + n * d.Co * HoWo, d.Co, HoWo);
                mo.noalias() = mw * mx;
            }
        });
    } else if (depthwise) {
        parallel_chunks(d.N * d.Ci, 4, [&](int64_t lo, int64_t hi) {
            for (int64_t nc = lo; nc < hi; ++nc) {
                int64_t n = nc / d.Ci, c = nc % d.Ci;
                const double* xs = px + (n * d.Ci + c) * d.H * d.W;
                const double* ws = pw + c * d.kh * d.kw;
                double* os = out.data() + (n * d.Co + c) * HoWo;
                for (int64_t oy = 0; oy < d.Ho; ++oy)
                    for (int64_t ox = 0; ox < d.Wo; ++ox) {
                        double acc = 0.0;
                        for (int64_t ky = 0; ky < d.kh; ++ky) {
                            int64_t iy = oy * d.stride + ky - d.pad;
                            if (iy < 0 || iy >= d.H) continue;
                            for (int64_t kx = 0; kx < d.kw; ++kx) {
                                int64_t ix = ox * d.stride + kx - d.pad;
                                if (ix < 0 || ix >= d.W) continue;
                                acc += ws[ky * d.kw + kx] * xs[iy * d.W + ix];
                            }
                        }
                        os[oy * d.Wo + ox] = acc;
                    }
            }
        });
    } else {
        int64_t K = d.Ci * d.kh * d.kw;
        parallel_chunks(d.N, 1, [&](int64_t lo, int64_t hi) {
            std::vector<double> cols(K * HoWo);
            for (int64_t n = lo; n < hi; ++n) {
                im2col(px + n * d.Ci * d.H * d.W, d, cols.data());
                CMapM mw(pw, d.Co, K), mc(cols.data(), K, HoWo);
                MapM mo(out.data() + n * d.Co * HoWo, d.Co, HoWo);
                mo.noalias() = mw * mc;
            }
        });
    }
    if (bias.defined()) {
        const double* pb = bias.data().data();
        for (int64_t n = 0; n < d.N; ++n)
            for (int64_t c = 0; c < d.Co; ++c) {
                double b = pb[c];
                double* os = out.data() + (n * d.Co + c) * HoWo;
                for (int64_t i = 0; i < HoWo; ++i) os[i] += b;
            }
    }

    auto xn = x.node(), wn = w.node();
    auto bn = bias.defined() ? bias.node() : nullptr;
    return op_result({d.N, d.Co, d.Ho, d.Wo}, std::move(out), {xn, wn, bn},
                     [xn, wn, bn, d, depthwise, point](Node& self) {
        int64_t HoWo = d.Ho * d.Wo;
        const double* g = self.grad.data();
        const double* px = xn->val.data();
        const double* pw = wn->val.data();

        if (bn && wants(bn)) {
            bn->ensure_grad();
            parallel_chunks(d.Co, 1, [&](int64_t lo, int64_t hi) {
                for (int64_t c = lo; c < hi; ++c) {
                    double acc = 0.0;
                    for (int64_t n = 0; n < d.N; ++n) {
                        const double* gs = g + (n * d.Co + c) * HoWo;
                        for (int64_t i = 0; i < HoWo; ++i) acc += gs[i];
                    }
                    bn->grad[c] += acc;
                }
            });
        }

        if (point) {
            if (wants(xn)) {
                xn->ensure_grad();
                parallel_chunks(d.N, 1, [&](int64_t lo, int64_t hi) {
                    for (int64_t n = lo; n < hi; ++n) {
                        CMapM mg(g + n * d.Co * HoWo, d.Co, HoWo);
                        CMapM mw(pw, d.Co, d.Ci);
                        MapM dx(xn->grad.data() + n * d.Ci * HoWo, d.Ci, HoWo);
                        dx.noalias() += mw.transpose() * mg;
                    }
                });
            }
            if (wants(wn)) {
                wn->ensure_grad();
                MapM dw(wn->grad.data(), d.Co, d.Ci);
                for (int64_t n = 0; n < d.N; ++n) {
                    CMapM mg(g + n * d.Co * HoWo, d.Co, HoWo);
                    CMapM mx(px + n * d.Ci * HoWo, d.Ci, HoWo);
                    dw.noalias() += mg * mx.transpose();
                }
            }
            return;
        }
        if (depthwise) {
            if (wants(xn)) {
                xn->ensure_grad();
                parallel_chunks(d.N * d.Ci, 4, [&](int64_t lo, int64_t hi) {
                    for (int64_t nc = lo; nc < hi; ++nc) {
                        int64_t n = nc / d.Ci, c = nc % d.Ci;
                        const double* gs = g + (n * d.Co + c) * HoWo;
                        const double* ws = pw + c * d.kh * d.kw;
                        double* dxs = xn->grad.data() + (n * d.Ci + c) * d.H * d.W;
                        for (int64_t oy = 0; oy < d.Ho; ++oy)
                            for (int64_t ox = 0; ox < d.Wo; ++ox) {
                                double gv = gs[oy * d.Wo + ox];
                                if (gv == 0.0) continue;
                                for (int64_t ky = 0; ky < d.kh; ++ky) {
                                    int64_t iy = oy * d.stride + ky - d.pad;
                                    if (iy < 0 || iy >= d.H) continue;
                                    for (int64_t kx = 0; kx < d.kw; ++kx) {
                                        int64_t ix = ox * d.stride + kx - d.pad;
                                        if (ix < 0 || ix >= d.W) continue;
                                        dxs[iy * d.W + ix] += ws[ky * d.kw + kx] * gv;
                                    }
                                }
                            }
                    }
                });
            }
            if (wants(wn)) {
                wn->ensure_grad();
                parallel_chunks(d.Ci, 1, [&](int64_t lo, int64_t hi) {
                    for (int64_t c = lo; c < hi; ++c) {
                        double* dws = wn->grad.data() + c * d.kh * d.kw;
                        for (int64_t n = 0; n < d.N; ++n) {
                            const double* gs = g + (n * d.Co + c) * HoWo;
                            const double* xs = px + (n * d.Ci + c) * d.H * d.W;
                            for (int64_t oy = 0; oy < d.Ho; ++oy)
                                for (int64_t ox = 0; ox < d.Wo; ++ox) {
                                    double gv = gs[oy * d.Wo + ox];
                                    if (gv == 0.0) continue;
                                    for (int64_t ky = 0; ky < d.kh; ++ky) {
                                        int64_t iy = oy * d.stride + ky - d.pad;
                                        if (iy < 0 || iy >= d.H) continue;
                                        for (int64_t kx = 0; kx < d.kw; ++kx) {
                                            int64_t ix = ox * d.stride + kx - d.pad;
                                            if (ix < 0 || ix >= d.W) continue;
                                            dws[ky * d.kw + kx] += xs[iy * d.W + ix] * gv;
                                        }
                                    }
                                }
                        }
                    }
                });
            }
            return;
        }
        // general groups=1
        int64_t K = d.Ci * d.kh * d.kw;
        if (wants(xn)) {
            xn->ensure_grad();
            parallel_chunks(d.N, 1, [&](int64_t lo, int64_t hi) {
                std::vector<double> dcols(K * HoWo);
                for (int64_t n = lo; n < hi; ++n) {
                    CMapM mg(g + n * d.Co * HoWo, d.Co, HoWo);
                    CMapM mw(pw, d.Co, K);
                    MapM mdc(dcols.data(), K, HoWo);
                    mdc.noalias() = mw.transpose() * mg;
                    col2im_add(dcols.data(), d, xn->grad.data() + n * d.Ci * d.H * d.W);
                }
            });
        }
        if (wants(wn)) {
            wn->ensure_grad();
            std::vector<double> cols(K * HoWo);
            MapM dw(wn->grad.data(), d.Co, K);
            for (int64_t n = 0; n < d.N; ++n) {
                im2col(px + n * d.Ci * d.H * d.W, d, cols.data());
                CMapM mg(g + n * d.Co * HoWo, d.Co, HoWo);
                CMapM mc(cols.data(), K, HoWo);
                dw.noalias() += mg * mc.transpose();
            }
        }
    });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, int stride) {
    check(x.ndim() == 4 && w.ndim() == 4, "conv_transpose2d: needs 4-d tensors");
    check(stride >= 1, "conv_transpose2d: stride >= 1");
    int64_t N = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(w.dim(0) == Ci, "conv_transpose2d: weight in-channels mismatch");
    int64_t Co = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    int64_t Ho = (H - 1) * stride + kh, Wo = (W - 1) * stride + kw;
    std::vector<double> out(N * Co * Ho * Wo, 0.0);
    const double* px = x.data().data();
    const double* pw = w.data().data();
    parallel_chunks(N * Co, 1, [&](int64_t lo, int64_t hi) {
        for (int64_t nc = lo; nc < hi; ++nc) {
            int64_t n = nc / Co, co = nc % Co;
            double* os = out.data() + (n * Co + co) * Ho * Wo;
            for (int64_t oy = 0; oy < Ho; ++oy)
                for (int64_t ox = 0; ox < Wo; ++ox) {
                    double acc = 0.0;
                    for (int64_t ky = 0; ky < kh; ++ky) {
                        int64_t t = oy - ky;
                        if (t < 0 || t % stride) continue;
                        int64_t iy = t / stride;
                        if (iy >= H) continue;
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            int64_t u = ox - kx;
                            if (u < 0 || u % stride) continue;
                            int64_t ix = u / stride;
                            if (ix >= W) continue;
                            for (int64_t ci = 0; ci < Ci; ++ci)
                                acc += px[((n * Ci + ci) * H + iy) * W + ix] *
                                       pw[((ci * Co + co) * kh + ky) * kw + kx];
                        }
                    }
                    os[oy * Wo + ox] = acc;
                }
        }
    });
    auto xn = x.node(), wn = w.node();
    return op_result({N, Co, Ho, Wo}, std::move(out), {xn, wn},
                     [xn, wn, N, Ci, Co, H, W, Ho, Wo, kh, kw, stride](Node& self) {
        const double* g = self.grad.data();
        const double* px = xn->val.data();
        const double* pw = wn->val.data();
        if (wants(xn)) {
            xn->ensure_grad();
            parallel_chunks(N * Ci, 1, [&](int64_t lo, int64_t hi) {
                for (int64_t nc = lo; nc < hi; ++nc) {
                    int64_t n = nc / Ci, ci = nc % Ci;
                    double* dxs = xn->grad.data() + (n * Ci + ci) * H * W;
                    for (int64_t iy = 0; iy < H; ++iy)
                        for (int64_t ix = 0; ix < W; ++ix) {
                            double acc = 0.0;
                            for (int64_t co = 0; co < Co; ++co)
                                for (int64_t ky = 0; ky < kh; ++ky)
                                    for (int64_t kx = 0; kx < kw; ++kx)
                                        acc += g[((n * Co + co) * Ho + iy * stride + ky) * Wo +
                                                 ix * stride + kx] *
                                               pw[((ci * Co + co) * kh + ky) * kw + kx];
                            dxs[iy * W + ix] += acc;
                        }
                }
            });
        }
        if (wants(wn)) {
            wn->ensure_grad();
            parallel_chunks(Ci * Co, 1, [&](int64_t lo, int64_t hi) {
                for (int64_t cc = lo; cc < hi; ++cc) {
                    int64_t ci = cc / Co, co = cc % Co;
                    for (int64_t ky = 0; ky < kh; ++ky)
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            double acc = 0.0;
                            for (int64_t n = 0; n < N; ++n)
                                for (int64_t iy = 0; iy < H; ++iy)
                                    for (int64_t ix = 0; ix < W; ++ix)
                                        acc += px[((n * Ci + ci) * H + iy) * W + ix] *
                                               g[((n * Co + co) * Ho + iy * stride + ky) * Wo +
                                                 ix * stride + kx];
                            wn->grad[((ci * Co + co) * kh + ky) * kw + kx] += acc;
                        }
                }
            });
        }
    });
}

Tensor nearest_upsample2(const Tensor& x) {
    check(x.ndim() == 4, "nearest_upsample2: needs NCHW");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    std::vector<double> out(N * C * 4 * H * W);
    const double* px = x.data().data();
    parallel_chunks(N * C, 4, [&](int64_t lo, int64_t hi) {
        for (int64_t nc = lo; nc < hi; ++nc) {
            const double* xs = px + nc * H * W;
            double* os = out.data() + nc * 4 * H * W;
            for (int64_t y = 0; y < 2 * H; ++y)
                for (int64_t x2 = 0; x2 < 2 * W; ++x2)
                    os[y * 2 * W + x2] = xs[(y / 2) * W + (x2 / 2)];
        }
    });
    auto xn = x.node();
    return op_result({N, C, 2 * H, 2 * W}, std::move(out), {xn}, [xn, N, C, H, W](Node& self) {
        if (!wants(xn)) return;
        xn->ensure_grad();
        const double* g = self.grad.data();
        parallel_chunks(N * C, 4, [&](int64_t lo, int64_t hi) {
            for (int64_t nc = lo; nc < hi; ++nc) {
                const double* gs = g + nc * 4 * H * W;
                double* dxs = xn->grad.data() + nc * H * W;
                for (int64_t y = 0; y < H; ++y)
                    for (int64_t x2 = 0; x2 < W; ++x2)
                        dxs[y * W + x2] += gs[(2 * y) * 2 * W + 2 * x2] +
                                           gs[(2 * y) * 2 * W + 2 * x2 + 1] +
                                           gs[(2 * y + 1) * 2 * W + 2 * x2] +
                                           gs[(2 * y + 1) * 2 * W + 2 * x2 + 1];
            }
        });
    });
}

Tensor avg_pool2(const Tensor& x) {
    check(x.ndim() == 4, "avg_pool2: needs NCHW");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(H % 2 == 0 && W % 2 == 0, "avg_pool2: odd spatial size");
    int64_t Ho = H / 2, Wo = W / 2;
    std::vector<double> out(N * C * Ho * Wo);
    const double* px = x.data().data();
    parallel_chunks(N * C, 4, [&](int64_t lo, int64_t hi) {
        for (int64_t nc = lo; nc < hi; ++nc) {
            const double* xs = px + nc * H * W;
            double* os = out.data() + nc * Ho * Wo;
            for (int64_t y = 0; y < Ho; ++y)
                for (int64_t x2 = 0; x2 < Wo; ++x2)
                    os[y * Wo + x2] = 0.25 * (xs[2 * y * W + 2 * x2] + xs[2 * y * W + 2 * x2 + 1] +
                                              xs[(2 * y + 1) * W + 2 * x2] +
                                              xs[(2 * y + 1) * W + 2 * x2 + 1]);
        }
    });
    auto xn = x.node();
    return op_result({N, C, Ho, Wo}, std::move(out), {xn}, [xn, N, C, H, W, Ho, Wo](Node& self) {
        if (!wants(xn)) return;
        xn->ensure_grad();
        const double* g = self.grad.data();
        parallel_chunks(N * C, 4, [&](int64_t lo, int64_t hi) {
            for (int64_t nc = lo; nc < hi; ++nc) {
                const double* gs = g + nc * Ho * Wo;
                double* dxs = xn->grad.data() + nc * H * W;
                for (int64_t y = 0; y < H; ++y)
                    for (int64_t x2 = 0; x2 < W; ++x2)
                        dxs[y * W + x2] += 0.25 * gs[(y / 2) * Wo + (x2 / 2)];
            }
        });
    });
}

Tensor pixel_unshuffle2(const Tensor& x) {
    check(x.ndim() == 4, "pixel_unshuffle2: needs NCHW");
    int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    check(H % 2 == 0 && W % 2 == 0, "pixel_unshuffle2: odd spatial size");
    int64_t Ho = H / 2, Wo = W / 2;
    std::vector<double> out(x.numel());
    const double* px = x.data().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t dy = 0; dy < 2; ++dy)
                for (int64_t dx = 0; dx < 2; ++dx)
                    for (int64_t y = 0; y < Ho; ++y)
                        for (int64_t x2 = 0; x2 < Wo; ++x2)
                            out[(((n * 4 * C) + (c * 4 + dy * 2 + dx)) * Ho + y) * Wo + x2] =
                                px[((n * C + c) * H + 2 * y + dy) * W + 2 * x2 + dx];
    auto xn = x.node();
    return op_result({N, 4 * C, Ho, Wo}, std::move(out), {xn}, [xn, N, C, H, W, Ho, Wo](Node& self) {
        if (!wants(xn)) return;
        xn->ensure_grad();
        const double* g = self.grad.data();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t dy = 0; dy < 2; ++dy)
                    for (int64_t dx = 0; dx < 2; ++dx)
                        for (int64_t y = 0; y < Ho; ++y)
                            for (int64_t x2 = 0; x2 < Wo; ++x2)
                                xn->grad[((n * C + c) * H + 2 * y + dy) * W + 2 * x2 + dx] +=
                                    g[(((n * 4 * C) + (c * 4 + dy * 2 + dx)) * Ho + y) * Wo + x2];
    });
}

Tensor pixel_shuffle2(const Tensor& x) {
    check(x.ndim() == 4, "pixel_shuffle2: needs NCHW");
    int64_t N = x.dim(0), C4 = x.dim(1), Ho = x.dim(2), Wo = x.dim(3);
    check(C4 % 4 == 0, "pixel_shuffle2: channels not divisible by 4");
    int64_t C = C4 / 4, H = Ho * 2, W = Wo * 2;
    std::vector<double> out(x.numel());
    const double* px = x.data().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c)
            for (int64_t dy = 0; dy < 2; ++dy)
                for (int64_t dx = 0; dx < 2; ++dx)
                    for (int64_t y = 0; y < Ho; ++y)
                        for (int64_t x2 = 0; x2 < Wo; ++x2)
                            out[((n * C + c) * H + 2 * y + dy) * W + 2 * x2 + dx] =
                                px[(((n * C4) + (c * 4 + dy * 2 + dx)) * Ho + y) * Wo + x2];
    auto xn = x.node();
    return op_result({N, C, H, W}, std::move(out), {xn}, [xn, N, C, C4, Ho, Wo, H, W](Node& self) {
        if (!wants(xn)) return;
        xn->ensure_grad();
        const double* g = self.grad.data();
        for (int64_t n = 0; n < N; ++n)
            for (int64_t c = 0; c < C; ++c)
                for (int64_t dy = 0; dy < 2; ++dy)
                    for (int64_t dx = 0; dx < 2; ++dx)
                        for (int64_t y = 0; y < Ho; ++y)
                            for (int64_t x2 = 0; x2 < Wo; ++x2)
                                xn->grad[(((n * C4) + (c * 4 + dy * 2 + dx)) * Ho + y) * Wo + x2] +=
                                    g[((n * C + c) * H + 2 * y + dy) * W + 2 * x2 + dx];
    });
}

Tensor bias_add_channels(const Tensor& x, const Tensor& b) {
    check(x.ndim() == 4, "bias_add_channels: needs NCHW");
    int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    check(b.numel() == C, "bias_add_channels: bias size");
    std::vector<double> out(x.numel());
    const double* px = x.data().data();
    const double* pb = b.data().data();
    for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
            const double* xs = px + (n * C + c) * HW;
            double* os = out.data() + (n * C + c) * HW;
            double bv = pb[c];
            for (int64_t i = 0; i < HW; ++i) os[i] = xs[i] + bv;
        }
    auto xn = x.node(), bn = b.node();
    return op_result(x.shape(), std::move(out), {xn, bn}, [xn, bn, N, C, HW](Node& self) {
        const double* g = self.grad.data();
        if (wants(xn)) {
            xn->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += g[i];
        }
        if (wants(bn)) {
            bn->ensure_grad();
            for (int64_t c = 0; c < C; ++c) {
                double acc = 0.0;
                for (int64_t n = 0; n < N; ++n) {
                    const double* gs = g + (n * C + c) * HW;
                    for (int64_t i = 0; i < HW; ++i) acc += gs[i];
                }
                bn->grad[c] += acc;
            }
        }
    });
}

Tensor broadcast_vector_to_map(const Tensor& v, int64_t h, int64_t w) {
    check(v.ndim() == 2, "broadcast_vector_to_map: needs (N,C)");
    int64_t N = v.dim(0), C = v.dim(1), HW = h * w;
    std::vector<double> out(N * C * HW);
    const double* pv = v.data().data();
    for (int64_t i = 0; i < N * C; ++i) {
        double val = pv[i];
        double* os = out.data() + i * HW;
        for (int64_t j = 0; j < HW; ++j) os[j] = val;
    }
    auto vn = v.node();
    return op_result({N, C, h, w}, std::move(out), {vn}, [vn, N, C, HW](Node& self) {
        if (!wants(vn)) return;
        vn->ensure_grad();
        const double* g = self.grad.data();
        for (int64_t i = 0; i < N * C; ++i) {
            double acc = 0.0;
            for (int64_t j = 0; j < HW; ++j) acc += g[i * HW + j];
            vn->grad[i] += acc;
        }
    });
}

// ----------------------------------------------------------------- parameters

Parameter ParamRegistry::add(const std::string& name, const Shape& shape,
                             std::vector<double> init) {
    if (index_.count(name)) throw ValueError("duplicate parameter name: " + name);
    check(static_cast<int64_t>(init.size()) == shape_numel(shape), "parameter init size mismatch");
    Parameter p;
    p.node = std::make_shared<Node>();
    p.node->shape = shape;
    p.node->val = std::move(init);
    p.node->requires_grad = true;
    p.node->name = name;
    index_[name] = params_.size();
    params_.push_back(p);
    return p;
}

Parameter& ParamRegistry::at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("no such parameter: " + name);
    return params_[it->second];
}

const Parameter& ParamRegistry::at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValueError("no such parameter: " + name);
    return params_[it->second];
}

bool ParamRegistry::has(const std::string& name) const { return index_.count(name) > 0; }

void ParamRegistry::zero_grads() {
    for (auto& p : params_)
        if (!p.node->grad.empty()) std::fill(p.node->grad.begin(), p.node->grad.end(), 0.0);
}

int64_t ParamRegistry::total_values() const {
    int64_t n = 0;
    for (const auto& p : params_) n += shape_numel(p.node->shape);
    return n;
}

namespace {

constexpr char kMagic[8] = {'U', 'F', 'C', 'K', 'P', 'T', '1', '\0'};

void write_u32(std::ostream& os, uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}
uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}
void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::string read_str(std::istream& is) {
    uint32_t n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

}  // namespace

void ParamRegistry::save(const std::string& path,
                         const std::map<std::string, std::string>& header) const {
    std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot write checkpoint: " + tmp);
        os.write(kMagic, 8);
        write_u32(os, static_cast<uint32_t>(header.size()));
        for (const auto& [k, v] : header) {
            write_str(os, k);
            write_str(os, v);
        }
        write_u32(os, static_cast<uint32_t>(params_.size()));
        for (const auto& p : params_) {
            write_str(os, p.node->name);
            write_u32(os, static_cast<uint32_t>(p.node->shape.size()));
            for (int64_t d : p.node->shape)
                os.write(reinterpret_cast<const char*>(&d), sizeof(d));
            os.write(reinterpret_cast<const char*>(p.node->val.data()),
                     static_cast<std::streamsize>(p.node->val.size() * sizeof(double)));
        }
        if (!os) throw IoError("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw IoError("cannot move checkpoint into place: " + path);
}

std::map<std::string, std::string> ParamRegistry::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) throw IoError("bad checkpoint magic: " + path);
    std::map<std::string, std::string> header;
    uint32_t nh = read_u32(is);
    for (uint32_t i = 0; i < nh; ++i) {
        std::string k = read_str(is);
        header[k] = read_str(is);
    }
    uint32_t np = read_u32(is);
    if (np != params_.size())
        throw IoError("checkpoint parameter count mismatch (" + std::to_string(np) + " vs " +
                      std::to_string(params_.size()) + ")");
    for (uint32_t i = 0; i < np; ++i) {
        std::string name = read_str(is);
        uint32_t nd = read_u32(is);
        Shape shape(nd);
        for (uint32_t j = 0; j < nd; ++j)
            is.read(reinterpret_cast<char*>(&shape[j]), sizeof(int64_t));
        Parameter& p = at(name);
        if (p.node->shape != shape)
            throw IoError("checkpoint shape mismatch for " + name + ": file " + shape_str(shape) +
                          " vs model " + shape_str(p.node->shape));
        is.read(reinterpret_cast<char*>(p.node->val.data()),
                static_cast<std::streamsize>(p.node->val.size() * sizeof(double)));
    }
    if (!is) throw IoError("truncated checkpoint: " + path);
    return header;
}

std::map<std::string, std::string> read_checkpoint_header(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    if (std::memcmp(magic, kMagic, 8) != 0) throw IoError("bad checkpoint magic: " + path);
    std::map<std::string, std::string> header;
    uint32_t nh = read_u32(is);
    for (uint32_t i = 0; i < nh; ++i) {
        std::string k = read_str(is);
        header[k] = read_str(is);
    }
    return header;
}

// ----------------------------------------------------------------- grad check

GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Parameter>& params,
                           double eps, int coords_per_param, uint64_t seed,
                           const std::function<bool(const Parameter&, int64_t)>& skip) {
    for (const auto& p : params) {
        p.node->ensure_grad();
        std::fill(p.node->grad.begin(), p.node->grad.end(), 0.0);
    }
    Tensor loss = f();
    if (loss.numel() != 1) throw ValueError("grad_check: f must be scalar");
    loss.backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) analytic.push_back(p.node->grad);

    GradCheckReport report;
    Rng rng(mix_seed(seed, 0x67726164ULL));
    for (size_t pi = 0; pi < params.size(); ++pi) {
        const Parameter& p = params[pi];
        int64_t n = shape_numel(p.node->shape);
        std::vector<int64_t> coords(n);
        for (int64_t i = 0; i < n; ++i) coords[i] = i;
        if (n > coords_per_param) {
            for (int64_t i = 0; i < coords_per_param; ++i) {
                int64_t j = i + rng.next_below(n - i);
                std::swap(coords[i], coords[j]);
            }
            coords.resize(coords_per_param);
        }
        for (int64_t c : coords) {
            if (skip && skip(p, c)) {
                ++report.coords_skipped;
                continue;
            }
            double orig = p.node->val[c];
            double f1, f0;
            {
                NoGradGuard ng;
                p.node->val[c] = orig + eps;
                f1 = f().item();
                p.node->val[c] = orig - eps;
                f0 = f().item();
                p.node->val[c] = orig;
            }
            double gn = (f1 - f0) / (2.0 * eps);
            double ga = analytic[pi][c];
            double rel = std::fabs(ga - gn) / std::max(1.0, std::fabs(gn));
            ++report.coords_checked;
            if (rel > report.max_rel_err) {
                report.max_rel_err = rel;
                report.worst = {p.node->name, c, ga, gn, rel};
            }
        }
    }
    return report;
}

}  // namespace unfoldir::nn
