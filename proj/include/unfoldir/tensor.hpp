#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "unfoldir/common.hpp"

// Reverse-mode automatic differentiation on dense double tensors.
// Define-by-run: every op appends a node holding the value and a closure
// that routes the node's gradient into its parents. All reductions inside
// ops run in a fixed order (or in fixed-size disjoint chunks), so results
// are bit-reproducible for any worker count.
namespace unfoldir::nn {

using unfoldir::Rng;

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
    Shape shape;
    std::vector<double> val;
    std::vector<double> grad;
    bool requires_grad = false;
    std::string name;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad();
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor zeros(const Shape& s, bool requires_grad = false);
    static Tensor full(const Shape& s, double v, bool requires_grad = false);
    static Tensor from_data(const Shape& s, std::vector<double> data, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t numel() const { return shape_numel(node_->shape); }
    int64_t dim(size_t i) const { return node_->shape[i]; }
    size_t ndim() const { return node_->shape.size(); }
    std::vector<double>& data() { return node_->val; }
    const std::vector<double>& data() const { return node_->val; }
    std::vector<double>& grad() { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    double item() const;

    // Runs reverse-mode accumulation from this scalar.
    void backward();

    std::shared_ptr<Node> node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

// RAII guard disabling graph construction (inference mode).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};
bool grad_enabled();

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double s);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, double s);
Tensor neg(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor soft_threshold_op(const Tensor& a, double t);
Tensor softplus_op(const Tensor& a);
Tensor exp_op(const Tensor& a);
// y = x * s where s is a 1-element tensor (broadcast scalar with gradient)
Tensor mul_scalar_tensor(const Tensor& x, const Tensor& s);

// ---- shape ----
Tensor reshape(const Tensor& a, const Shape& s);
Tensor permute4(const Tensor& a, const std::array<int, 4>& axes);
Tensor slice_channels(const Tensor& x, int64_t c0, int64_t c1);  // NCHW
Tensor concat_channels(const Tensor& a, const Tensor& b);        // NCHW
Tensor repeat_rows(const Tensor& x, int64_t n);                  // (1,D) -> (N,D)
Tensor gather_rows(const Tensor& x, const std::vector<int>& rows);  // (M,D) -> (B,D)

// ---- reductions / normalization ----
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_lastdim(const Tensor& a);                   // (...,L) -> (...)
Tensor l1_loss(const Tensor& a, const Tensor& b);      // mean |a-b|
Tensor softmax_lastdim(const Tensor& a);
Tensor l2_normalize_lastdim(const Tensor& a, double eps = 1e-12);
Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           double eps = 1e-5);  // NCHW, stats over C
Tensor layer_norm_lastdim(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                          double eps = 1e-5);
Tensor global_avg_pool(const Tensor& x);  // NCHW -> (N,C)
// mean over rows of (logsumexp(logits_row) - logits_row[target]); classification NLL
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets);
// row-wise cosine similarity: (N,D),(N,D) -> (N)
Tensor cosine_rows(const Tensor& a, const Tensor& b, double eps = 1e-12);

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);     // (m,k)@(k,n)
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // (m,k)@(n,k)^T -> (m,n)
Tensor linear_op(const Tensor& x, const Tensor& w, const Tensor& b);  // (N,in)@(out,in)^T+b
Tensor bmm(const Tensor& a, const Tensor& b);        // (B,m,k)@(B,k,n)
Tensor bmm_nt(const Tensor& a, const Tensor& b);     // (B,m,k)@(B,n,k)^T
// x (N*heads, m, n) scaled by t[head]; head = block index % heads
Tensor scale_by_head(const Tensor& x, const Tensor& t, int64_t heads);

// ---- spatial ----
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad,
              int groups);
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, int stride);
Tensor nearest_upsample2(const Tensor& x);
Tensor avg_pool2(const Tensor& x);
Tensor pixel_unshuffle2(const Tensor& x);
Tensor pixel_shuffle2(const Tensor& x);
Tensor bias_add_channels(const Tensor& x, const Tensor& b);
Tensor broadcast_vector_to_map(const Tensor& v, int64_t h, int64_t w);  // (N,C)->(N,C,H,W)

// ---- parameters ----
struct Parameter {
    std::shared_ptr<Node> node;
    bool trainable = true;

    bool defined() const { return node != nullptr; }
    const std::string& name() const { return node->name; }
    Tensor tensor() const { return Tensor(node); }
    std::vector<double>& values() { return node->val; }
    const std::vector<double>& values() const { return node->val; }
    int64_t numel() const { return shape_numel(node->shape); }
};

class ParamRegistry {
public:
    Parameter add(const std::string& name, const Shape& shape, std::vector<double> init);
    Parameter& at(const std::string& name);
    const Parameter& at(const std::string& name) const;
    bool has(const std::string& name) const;
    std::vector<Parameter>& all() { return params_; }
    const std::vector<Parameter>& all() const { return params_; }
    void zero_grads();
    int64_t total_values() const;

    void save(const std::string& path, const std::map<std::string, std::string>& header) const;
    // Loads values into existing parameters; names and shapes must match
    // exactly. Returns the stored header.
    std::map<std::string, std::string> load(const std::string& path);

private:
    std::vector<Parameter> params_;
    std::map<std::string, size_t> index_;
};

// Reads just the header block of a checkpoint.
std::map<std::string, std::string> read_checkpoint_header(const std::string& path);

// ---- finite-difference oracle ----
struct GradCheckEntry {
    std::string param;
    int64_t coord = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};
struct GradCheckReport {
    double max_rel_err = 0.0;
    GradCheckEntry worst;
    int64_t coords_checked = 0;
    int64_t coords_skipped = 0;
};

// Central differences on a seeded subsample of coordinates (up to
// coords_per_param per parameter). `skip` may exclude coordinates (e.g.
// those sitting on an L1 kink). rel err = |ga-gn| / max(1,|gn|).
GradCheckReport grad_check(const std::function<Tensor()>& f, const std::vector<Parameter>& params,
                           double eps = 1e-5, int coords_per_param = 64, uint64_t seed = 17,
                           const std::function<bool(const Parameter&, int64_t)>& skip = nullptr);

}  // namespace unfoldir::nn
