// Dense double-precision tensors with reverse-mode autodiff.
//
// Tensors are cheap handles onto shared nodes. Every primitive records the
// graph needed for backward() unless gradients are globally disabled
// (NoGradGuard) or no input requires a gradient. All reductions use a fixed
// summation order so repeated runs are bit-identical.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace diver {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorError : std::runtime_error {
    explicit TensorError(const std::string& what) : std::runtime_error(what) {}
};

struct BackwardCtx;

struct Node {
    Shape shape;
    std::vector<double> value;
    bool requires_grad = false;
    // Parents kept alive for backward; empty for leaves and no-grad results.
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(const std::vector<double>& grad_out, BackwardCtx&)> backward;
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double v, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor from_vector(std::vector<double> data, const Shape& shape,
                              bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int extent(int axis) const { return node_->shape[axis]; }
    int64_t size() const { return static_cast<int64_t>(node_->value.size()); }
    const std::vector<double>& data() const { return node_->value; }
    std::vector<double>& mutable_data() { return node_->value; }
    double item() const;
    bool requires_grad() const { return node_->requires_grad; }
    Node* node() const { return node_.get(); }
    std::shared_ptr<Node> node_ptr() const { return node_; }

    // Detached copy of the values (no graph).
    Tensor detach() const;

private:
    std::shared_ptr<Node> node_;
};

// Thread-local gradient mode. Primitives executed while a NoGradGuard is
// alive produce plain value tensors with no recorded graph.
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool saved_;
};

struct BackwardCtx {
    // Gradient buffers keyed by node; allocated lazily, zero-initialized.
    std::unordered_map<Node*, std::vector<double>> grads;

    // Returns the accumulation buffer for `n`, or nullptr if `n` does not
    // require a gradient.
    std::vector<double>* buf(Node* n);

    const std::vector<double>* find(const Node* n) const;
};

// Reverse-mode sweep from a scalar loss. Visits each reachable node exactly
// once, in reverse execution order. Throws on non-scalar loss.
BackwardCtx backward(const Tensor& loss);

// Gradient of `param` from a finished backward pass (zeros if unreached).
std::vector<double> grad_of(const BackwardCtx& ctx, const Tensor& param);

// ---- primitives -----------------------------------------------------------
// Elementwise ops accept equal shapes, a scalar on either side, or a
// trailing-axis vector broadcast against a matrix.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

Tensor matmul(const Tensor& a, const Tensor& b);   // 2-D only
Tensor matmul_scaled(const Tensor& a, const Tensor& b, double s);  // s*(a@b)
// scores + mask*(u1 - u2) + u2 fused; mask constant, u1/u2 single-element.
Tensor mask_bias(const Tensor& scores, const Tensor& mask, const Tensor& u1,
                 const Tensor& u2);
Tensor transpose2d(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& shape);

Tensor gather_rows(const Tensor& a, std::vector<int> rows);
Tensor scatter_rows(const Tensor& a, std::vector<int> rows, int total_rows);
Tensor slice_cols(const Tensor& a, int start, int len);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);

Tensor softmax_lastaxis(const Tensor& a);
Tensor log_softmax_lastaxis(const Tensor& a);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 double eps = 1e-5);
Tensor gelu(const Tensor& x);

// x: Cin×L, w: Cout×Cin×K, b: Cout. Output Cout×Lout with
// Lout = (L + 2*pad - K)/stride + 1.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad);

// Magnitude of the length-L DFT along the last axis (radix-2 FFT when L is a
// power of two, table-driven direct DFT otherwise). Subgradient 0 at exact
// spectral zeros.
Tensor dft_magnitude(const Tensor& x);

// Rotary transform: row t of x (T×d, d even) has each pair (2k, 2k+1)
// rotated by angle pos[t] * base^(-2k/d).
Tensor rope_rotate(const Tensor& x, const std::vector<double>& pos, double base);

Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor mean_rows(const Tensor& a);  // 2-D R×C -> C

class Rng;
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

}  // namespace diver
