#include "diver/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "diver/random.hpp"

namespace diver {

int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

void check_finite(const std::vector<double>& v, const char* op) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw TensorError(std::string("non-finite value produced by ") + op);
        }
    }
}

std::shared_ptr<Node> leaf(Shape shape, std::vector<double> value,
                           bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

// Wraps an op result; records parents/backward only when a gradient can flow.
Tensor make_result(const char* op, Shape shape, std::vector<double> value,
                   std::vector<std::shared_ptr<Node>> parents,
                   std::function<void(const std::vector<double>&, BackwardCtx&)> bw) {
    check_finite(value, op);
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    bool need = false;
    if (g_grad_enabled) {
        for (const auto& p : parents)
            if (p->requires_grad) { need = true; break; }
    }
    if (need) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward = std::move(bw);
    }
    return Tensor(n);
}

int last_axis(const Shape& s) { return s.empty() ? 1 : s.back(); }

}  // namespace

bool grad_enabled() { return g_grad_enabled; }
NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return Tensor(leaf(shape, std::vector<double>(shape_numel(shape), 0.0),
                       requires_grad));
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
    return Tensor(leaf(shape, std::vector<double>(shape_numel(shape), v),
                       requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return Tensor(leaf({1}, {v}, requires_grad));
}

Tensor Tensor::from_vector(std::vector<double> data, const Shape& shape,
                           bool requires_grad) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape)) {
        throw TensorError("from_vector: data length " +
                          std::to_string(data.size()) + " does not match shape " +
                          shape_str(shape));
    }
    return Tensor(leaf(shape, std::move(data), requires_grad));
}

double Tensor::item() const {
    if (node_->value.size() != 1) {
        throw TensorError("item() on tensor of size " +
                          std::to_string(node_->value.size()));
    }
    return node_->value[0];
}

Tensor Tensor::detach() const {
    return Tensor(leaf(node_->shape, node_->value, false));
}

std::vector<double>* BackwardCtx::buf(Node* n) {
    if (!n->requires_grad) return nullptr;
    auto it = grads.find(n);
    if (it == grads.end()) {
        it = grads.emplace(n, std::vector<double>(n->value.size(), 0.0)).first;
    }
    return &it->second;
}

const std::vector<double>* BackwardCtx::find(const Node* n) const {
    auto it = grads.find(const_cast<Node*>(n));
    return it == grads.end() ? nullptr : &it->second;
}

BackwardCtx backward(const Tensor& loss) {
    if (loss.size() != 1) {
        throw TensorError("backward: loss must be a scalar, got shape " +
                          shape_str(loss.shape()));
    }
    // Iterative post-order DFS; topo holds each grad-requiring node once.
    std::vector<Node*> topo;
    std::unordered_map<Node*, int> state;  // 0 unseen, 1 open, 2 done
    std::vector<Node*> stack{loss.node()};
    if (!loss.node()->requires_grad) return BackwardCtx{};
    while (!stack.empty()) {
        Node* n = stack.back();
        int& st = state[n];
        if (st == 0) {
            st = 1;
            for (const auto& p : n->parents) {
                if (p->requires_grad && state[p.get()] == 0) stack.push_back(p.get());
            }
        } else {
            stack.pop_back();
            if (st == 1) {
                st = 2;
                topo.push_back(n);
            }
        }
    }
    BackwardCtx ctx;
    ctx.buf(loss.node())->at(0) = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (!n->backward) continue;
        auto git = ctx.grads.find(n);
        if (git == ctx.grads.end()) continue;
        n->backward(git->second, ctx);
    }
    return ctx;
}

std::vector<double> grad_of(const BackwardCtx& ctx, const Tensor& param) {
    const std::vector<double>* g = ctx.find(param.node());
    if (g) return *g;
    return std::vector<double>(param.size(), 0.0);
}

// ---- elementwise ----------------------------------------------------------

namespace {

enum class Bcast { Same, AScalar, BScalar, BRow };

Bcast bcast_kind(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Bcast::Same;
    if (b.size() == 1) return Bcast::BScalar;
    if (a.size() == 1) return Bcast::AScalar;
    if (b.rank() == 1 && last_axis(a.shape()) == b.extent(0)) return Bcast::BRow;
    throw TensorError(std::string(op) + ": incompatible shapes " +
                      shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Reduce a full-size gradient onto a broadcast operand's buffer.
void reduce_into(const std::vector<double>& g, Bcast kind, bool for_b,
                 int cols, std::vector<double>& out) {
    if (kind == Bcast::Same || (kind == Bcast::AScalar && for_b) ||
        (kind == Bcast::BScalar && !for_b) || (kind == Bcast::BRow && !for_b)) {
        for (size_t i = 0; i < g.size(); ++i) out[i] += g[i];
    } else if (kind == Bcast::BRow) {
        for (size_t i = 0; i < g.size(); ++i) out[i % cols] += g[i];
    } else {  // scalar side
        double s = 0.0;
        for (double x : g) s += x;
        out[0] += s;
    }
}

template <typename F>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f,
                 std::function<void(const std::vector<double>&, BackwardCtx&)> bw) {
    Bcast k = bcast_kind(a, b, name);
    const auto& av = a.data();
    const auto& bv = b.data();
    Shape out_shape = (k == Bcast::AScalar) ? b.shape() : a.shape();
    int64_t n = (k == Bcast::AScalar) ? b.size() : a.size();
    int cols = last_axis(out_shape);
    std::vector<double> out(n);
    switch (k) {
        case Bcast::Same:
            for (int64_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i]);
            break;
        case Bcast::AScalar:
            for (int64_t i = 0; i < n; ++i) out[i] = f(av[0], bv[i]);
            break;
        case Bcast::BScalar:
            for (int64_t i = 0; i < n; ++i) out[i] = f(av[i], bv[0]);
            break;
        case Bcast::BRow:
            for (int64_t i = 0; i < n; ++i) out[i] = f(av[i], bv[i % cols]);
            break;
    }
    return make_result(name, out_shape, std::move(out),
                       {a.node_ptr(), b.node_ptr()}, std::move(bw));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    Bcast k = bcast_kind(a, b, "add");
    Node* an = a.node();
    Node* bn = b.node();
    int cols = last_axis(k == Bcast::AScalar ? b.shape() : a.shape());
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [an, bn, k, cols](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* ga = ctx.buf(an)) reduce_into(g, k, false, cols, *ga);
            if (auto* gb = ctx.buf(bn)) reduce_into(g, k, true, cols, *gb);
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    Bcast k = bcast_kind(a, b, "sub");
    Node* an = a.node();
    Node* bn = b.node();
    int cols = last_axis(k == Bcast::AScalar ? b.shape() : a.shape());
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [an, bn, k, cols](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* ga = ctx.buf(an)) reduce_into(g, k, false, cols, *ga);
            if (auto* gb = ctx.buf(bn)) {
                std::vector<double> ng(g.size());
                for (size_t i = 0; i < g.size(); ++i) ng[i] = -g[i];
                reduce_into(ng, k, true, cols, *gb);
            }
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    Bcast k = bcast_kind(a, b, "mul");
    Node* an = a.node();
    Node* bn = b.node();
    int cols = last_axis(k == Bcast::AScalar ? b.shape() : a.shape());
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [an, bn, k, cols](const std::vector<double>& g, BackwardCtx& ctx) {
            const auto& av = an->value;
            const auto& bv = bn->value;
            if (auto* ga = ctx.buf(an)) {
                std::vector<double> t(g.size());
                switch (k) {
                    case Bcast::Same:
                        for (size_t i = 0; i < g.size(); ++i) t[i] = g[i] * bv[i];
                        break;
                    case Bcast::AScalar:
                    case Bcast::BScalar:
                        for (size_t i = 0; i < g.size(); ++i)
                            t[i] = g[i] * (k == Bcast::AScalar ? bv[i] : bv[0]);
                        break;
                    case Bcast::BRow:
                        for (size_t i = 0; i < g.size(); ++i)
                            t[i] = g[i] * bv[i % cols];
                        break;
                }
                reduce_into(t, k, false, cols, *ga);
            }
            if (auto* gb = ctx.buf(bn)) {
                std::vector<double> t(g.size());
                switch (k) {
                    case Bcast::Same:
                        for (size_t i = 0; i < g.size(); ++i) t[i] = g[i] * av[i];
                        break;
                    case Bcast::AScalar:
                        for (size_t i = 0; i < g.size(); ++i) t[i] = g[i] * av[0];
                        break;
                    case Bcast::BScalar:
                    case Bcast::BRow:
                        for (size_t i = 0; i < g.size(); ++i) t[i] = g[i] * av[i];
                        break;
                }
                reduce_into(t, k, true, cols, *gb);
            }
        });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double s) {
    Node* an = a.node();
    std::vector<double> out(a.data());
    for (double& x : out) x *= s;
    return make_result("scale", a.shape(), std::move(out), {a.node_ptr()},
                       [an, s](const std::vector<double>& g, BackwardCtx& ctx) {
                           if (auto* ga = ctx.buf(an))
                               for (size_t i = 0; i < g.size(); ++i)
                                   (*ga)[i] += g[i] * s;
                       });
}

Tensor add_scalar(const Tensor& a, double s) {
    Node* an = a.node();
    std::vector<double> out(a.data());
    for (double& x : out) x += s;
    return make_result("add_scalar", a.shape(), std::move(out), {a.node_ptr()},
                       [an](const std::vector<double>& g, BackwardCtx& ctx) {
                           if (auto* ga = ctx.buf(an))
                               for (size_t i = 0; i < g.size(); ++i)
                                   (*ga)[i] += g[i];
                       });
}

// ---- linear algebra -------------------------------------------------------

namespace {

// c (m×n) += s · a (m×k) × b (k×n); ikj order so the j loop vectorizes, with
// the k loop unrolled 4x to amortize the c-row traffic.
void mm_accum(const double* a, const double* b, double* c, int m, int k, int n,
              double s = 1.0) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<int64_t>(i) * k;
        double* crow = c + static_cast<int64_t>(i) * n;
        int p = 0;
        for (; p + 4 <= k; p += 4) {
            double a0 = s * arow[p], a1 = s * arow[p + 1], a2 = s * arow[p + 2],
                   a3 = s * arow[p + 3];
            const double* b0 = b + static_cast<int64_t>(p) * n;
            const double* b1 = b0 + n;
            const double* b2 = b1 + n;
            const double* b3 = b2 + n;
            for (int j = 0; j < n; ++j)
                crow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        for (; p < k; ++p) {
            double aik = s * arow[p];
            const double* brow = b + static_cast<int64_t>(p) * n;
            for (int j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

std::vector<double> transposed(const double* a, int rows, int cols) {
    std::vector<double> t(static_cast<int64_t>(rows) * cols);
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j)
            t[static_cast<int64_t>(j) * rows + i] = a[static_cast<int64_t>(i) * cols + j];
    return t;
}

// c (m×n) += s · a^T where a is (k×m), times b (k×n). Materializing a^T is
// O(km) against the O(mkn) product and keeps the unrolled kernel hot.
void mm_accum_at(const double* a, const double* b, double* c, int m, int k,
                 int n, double s = 1.0) {
    std::vector<double> at = transposed(a, k, m);
    mm_accum(at.data(), b, c, m, k, n, s);
}

// c (m×n) += s · a (m×k) × b^T where b is (n×k).
void mm_accum_bt(const double* a, const double* b, double* c, int m, int k,
                 int n, double s = 1.0) {
    std::vector<double> bt = transposed(b, n, k);
    mm_accum(a, bt.data(), c, m, k, n, s);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw TensorError("matmul: expected 2-D operands, got " +
                          shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    int m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
    if (k != k2) {
        throw TensorError("matmul: inner extents disagree: " +
                          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<double> out(static_cast<int64_t>(m) * n, 0.0);
    mm_accum(a.data().data(), b.data().data(), out.data(), m, k, n);
    Node* an = a.node();
    Node* bn = b.node();
    return make_result(
        "matmul", {m, n}, std::move(out), {a.node_ptr(), b.node_ptr()},
        [an, bn, m, k, n](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* ga = ctx.buf(an))
                mm_accum_bt(g.data(), bn->value.data(), ga->data(), m, n, k);
            if (auto* gb = ctx.buf(bn))
                mm_accum_at(an->value.data(), g.data(), gb->data(), k, m, n);
        });
}

Tensor matmul_scaled(const Tensor& a, const Tensor& b, double s) {
    if (a.rank() != 2 || b.rank() != 2) {
        throw TensorError("matmul_scaled: expected 2-D operands, got " +
                          shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    int m = a.extent(0), k = a.extent(1), k2 = b.extent(0), n = b.extent(1);
    if (k != k2) {
        throw TensorError("matmul_scaled: inner extents disagree: " +
                          shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<double> out(static_cast<int64_t>(m) * n, 0.0);
    mm_accum(a.data().data(), b.data().data(), out.data(), m, k, n, s);
    Node* an = a.node();
    Node* bn = b.node();
    return make_result(
        "matmul_scaled", {m, n}, std::move(out), {a.node_ptr(), b.node_ptr()},
        [an, bn, m, k, n, s](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* ga = ctx.buf(an))
                mm_accum_bt(g.data(), bn->value.data(), ga->data(), m, n, k, s);
            if (auto* gb = ctx.buf(bn))
                mm_accum_at(an->value.data(), g.data(), gb->data(), k, m, n, s);
        });
}

// scores + mask*(u1 - u2) + u2 in one pass; u1/u2 are single-element tensors
// and mask is a constant 0/1 matrix matching scores.
Tensor mask_bias(const Tensor& scores, const Tensor& mask, const Tensor& u1,
                 const Tensor& u2) {
    if (scores.shape() != mask.shape())
        throw TensorError("mask_bias: mask shape " + shape_str(mask.shape()) +
                          " does not match scores " + shape_str(scores.shape()));
    if (u1.size() != 1 || u2.size() != 1)
        throw TensorError("mask_bias: bias terms must be single-element");
    if (mask.node()->requires_grad)
        throw TensorError("mask_bias: mask must be a constant");
    double a = u1.data()[0], b = u2.data()[0], d = a - b;
    const auto& sv = scores.data();
    const auto& mv = mask.data();
    std::vector<double> out(sv.size());
    for (size_t i = 0; i < out.size(); ++i) out[i] = sv[i] + mv[i] * d + b;
    Node* sn = scores.node();
    Node* mn = mask.node();
    Node* un1 = u1.node();
    Node* un2 = u2.node();
    return make_result(
        "mask_bias", scores.shape(), std::move(out),
        {scores.node_ptr(), mask.node_ptr(), u1.node_ptr(), u2.node_ptr()},
        [sn, mn, un1, un2](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* gs = ctx.buf(sn))
                for (size_t i = 0; i < g.size(); ++i) (*gs)[i] += g[i];
            double gm = 0.0, gt = 0.0;  // sum(g*mask), sum(g)
            const auto& mv = mn->value;
            for (size_t i = 0; i < g.size(); ++i) {
                gm += g[i] * mv[i];
                gt += g[i];
            }
            if (auto* g1 = ctx.buf(un1)) (*g1)[0] += gm;
            if (auto* g2 = ctx.buf(un2)) (*g2)[0] += gt - gm;
        });
}

Tensor transpose2d(const Tensor& a) {
    if (a.rank() != 2) throw TensorError("transpose2d: expected 2-D tensor");
    int r = a.extent(0), c = a.extent(1);
    std::vector<double> out(a.size());
    const auto& av = a.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[static_cast<int64_t>(j) * r + i] = av[static_cast<int64_t>(i) * c + j];
    Node* an = a.node();
    return make_result("transpose2d", {c, r}, std::move(out), {a.node_ptr()},
                       [an, r, c](const std::vector<double>& g, BackwardCtx& ctx) {
                           if (auto* ga = ctx.buf(an)) {
                               for (int i = 0; i < r; ++i)
                                   for (int j = 0; j < c; ++j)
                                       (*ga)[static_cast<int64_t>(i) * c + j] +=
                                           g[static_cast<int64_t>(j) * r + i];
                           }
                       });
}

Tensor reshape(const Tensor& a, const Shape& shape) {
    if (shape_numel(shape) != a.size()) {
        throw TensorError("reshape: size mismatch " + shape_str(a.shape()) +
                          " -> " + shape_str(shape));
    }
    Node* an = a.node();
    return make_result("reshape", shape, a.data(), {a.node_ptr()},
                       [an](const std::vector<double>& g, BackwardCtx& ctx) {
                           if (auto* ga = ctx.buf(an))
                               for (size_t i = 0; i < g.size(); ++i)
                                   (*ga)[i] += g[i];
                       });
}

Tensor gather_rows(const Tensor& a, std::vector<int> rows) {
    if (a.rank() != 2) throw TensorError("gather_rows: expected 2-D tensor");
    int r = a.extent(0), c = a.extent(1);
    for (int i : rows)
        if (i < 0 || i >= r) throw TensorError("gather_rows: row out of range");
    std::vector<double> out(static_cast<int64_t>(rows.size()) * c);
    const auto& av = a.data();
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy_n(av.data() + static_cast<int64_t>(rows[i]) * c, c,
                    out.data() + static_cast<int64_t>(i) * c);
    Node* an = a.node();
    auto idx = std::make_shared<std::vector<int>>(std::move(rows));
    return make_result(
        "gather_rows", {static_cast<int>(idx->size()), c}, std::move(out),
        {a.node_ptr()},
        [an, idx, c](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* ga = ctx.buf(an)) {
                for (size_t i = 0; i < idx->size(); ++i) {
                    double* dst = ga->data() + static_cast<int64_t>((*idx)[i]) * c;
                    const double* src = g.data() + static_cast<int64_t>(i) * c;
                    for (int j = 0; j < c; ++j) dst[j] += src[j];
                }
            }
        });
}

Tensor scatter_rows(const Tensor& a, std::vector<int> rows, int total_rows) {
    if (a.rank() != 2) throw TensorError("scatter_rows: expected 2-D tensor");
    int r = a.extent(0), c = a.extent(1);
    if (static_cast<int>(rows.size()) != r)
        throw TensorError("scatter_rows: index count does not match rows");
    for (int i : rows)
        if (i < 0 || i >= total_rows)
            throw TensorError("scatter_rows: row out of range");
    std::vector<double> out(static_cast<int64_t>(total_rows) * c, 0.0);
    const auto& av = a.data();
    for (int i = 0; i < r; ++i) {
        double* dst = out.data() + static_cast<int64_t>(rows[i]) * c;
        const double* src = av.data() + static_cast<int64_t>(i) * c;
        for (int j = 0; j < c; ++j) dst[j] += src[j];
    }
    Node* an = a.node();
    auto idx = std::make_shared<std::vector<int>>(std::move(rows));
    return make_result(
        "scatter_rows", {total_rows, c}, std::move(out), {a.node_ptr()},
        [an, idx, c](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* ga = ctx.buf(an)) {
                for (size_t i = 0; i < idx->size(); ++i) {
                    const double* src = g.data() + static_cast<int64_t>((*idx)[i]) * c;
                    double* dst = ga->data() + static_cast<int64_t>(i) * c;
                    for (int j = 0; j < c; ++j) dst[j] += src[j];
                }
            }
        });
}

Tensor slice_cols(const Tensor& a, int start, int len) {
    if (a.rank() != 2) throw TensorError("slice_cols: expected 2-D tensor");
    int r = a.extent(0), c = a.extent(1);
    if (start < 0 || len < 1 || start + len > c)
        throw TensorError("slice_cols: range out of bounds");
    std::vector<double> out(static_cast<int64_t>(r) * len);
    const auto& av = a.data();
    for (int i = 0; i < r; ++i)
        std::copy_n(av.data() + static_cast<int64_t>(i) * c + start, len,
                    out.data() + static_cast<int64_t>(i) * len);
    Node* an = a.node();
    return make_result(
        "slice_cols", {r, len}, std::move(out), {a.node_ptr()},
        [an, r, c, start, len](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* ga = ctx.buf(an)) {
                for (int i = 0; i < r; ++i) {
                    double* dst = ga->data() + static_cast<int64_t>(i) * c + start;
                    const double* src = g.data() + static_cast<int64_t>(i) * len;
                    for (int j = 0; j < len; ++j) dst[j] += src[j];
                }
            }
        });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw TensorError("concat_cols: no inputs");
    int r = parts[0].extent(0);
    int total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.extent(0) != r)
            throw TensorError("concat_cols: row counts disagree");
        total += p.extent(1);
    }
    std::vector<double> out(static_cast<int64_t>(r) * total);
    std::vector<std::shared_ptr<Node>> parents;
    std::vector<int> widths;
    int off = 0;
    for (const auto& p : parts) {
        int w = p.extent(1);
        const auto& pv = p.data();
        for (int i = 0; i < r; ++i)
            std::copy_n(pv.data() + static_cast<int64_t>(i) * w, w,
                        out.data() + static_cast<int64_t>(i) * total + off);
        off += w;
        parents.push_back(p.node_ptr());
        widths.push_back(w);
    }
    auto ws = std::make_shared<std::vector<int>>(std::move(widths));
    auto ps = std::make_shared<std::vector<Node*>>();
    for (auto& p : parents) ps->push_back(p.get());
    return make_result(
        "concat_cols", {r, total}, std::move(out), std::move(parents),
        [ws, ps, r, total](const std::vector<double>& g, BackwardCtx& ctx) {
            int off = 0;
            for (size_t k = 0; k < ps->size(); ++k) {
                int w = (*ws)[k];
                if (auto* gp = ctx.buf((*ps)[k])) {
                    for (int i = 0; i < r; ++i) {
                        const double* src = g.data() + static_cast<int64_t>(i) * total + off;
                        double* dst = gp->data() + static_cast<int64_t>(i) * w;
                        for (int j = 0; j < w; ++j) dst[j] += src[j];
                    }
                }
                off += w;
            }
        });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw TensorError("concat_rows: no inputs");
    int c = parts[0].extent(1);
    int total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.extent(1) != c)
            throw TensorError("concat_rows: column counts disagree");
        total += p.extent(0);
    }
    std::vector<double> out;
    out.reserve(static_cast<int64_t>(total) * c);
    std::vector<std::shared_ptr<Node>> parents;
    std::vector<int64_t> sizes;
    for (const auto& p : parts) {
        out.insert(out.end(), p.data().begin(), p.data().end());
        parents.push_back(p.node_ptr());
        sizes.push_back(p.size());
    }
    auto sz = std::make_shared<std::vector<int64_t>>(std::move(sizes));
    auto ps = std::make_shared<std::vector<Node*>>();
    for (auto& p : parents) ps->push_back(p.get());
    return make_result(
        "concat_rows", {total, c}, std::move(out), std::move(parents),
        [sz, ps](const std::vector<double>& g, BackwardCtx& ctx) {
            int64_t off = 0;
            for (size_t k = 0; k < ps->size(); ++k) {
                if (auto* gp = ctx.buf((*ps)[k])) {
                    for (int64_t i = 0; i < (*sz)[k]; ++i)
                        (*gp)[i] += g[off + i];
                }
                off += (*sz)[k];
            }
        });
}

// ---- nonlinearities -------------------------------------------------------

Tensor softmax_lastaxis(const Tensor& a) {
    int c = last_axis(a.shape());
    if (c < 1) throw TensorError("softmax_lastaxis: empty last axis");
    int64_t rows = a.size() / c;
    std::vector<double> out(a.size());
    const auto& av = a.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * c;
        double* y = out.data() + r * c;
        double mx = x[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        double s = 0.0;
        for (int j = 0; j < c; ++j) {
            y[j] = std::exp(x[j] - mx);
            s += y[j];
        }
        double inv = 1.0 / s;
        for (int j = 0; j < c; ++j) y[j] *= inv;
    }
    Node* an = a.node();
    auto saved = std::make_shared<std::vector<double>>(out);
    return make_result(
        "softmax_lastaxis", a.shape(), std::move(out), {a.node_ptr()},
        [an, saved, c, rows](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* ga = ctx.buf(an)) {
                for (int64_t r = 0; r < rows; ++r) {
                    const double* y = saved->data() + r * c;
                    const double* gr = g.data() + r * c;
                    double dot = 0.0;
                    for (int j = 0; j < c; ++j) dot += gr[j] * y[j];
                    double* dst = ga->data() + r * c;
                    for (int j = 0; j < c; ++j) dst[j] += y[j] * (gr[j] - dot);
                }
            }
        });
}

Tensor log_softmax_lastaxis(const Tensor& a) {
    int c = last_axis(a.shape());
    if (c < 1) throw TensorError("log_softmax_lastaxis: empty last axis");
    int64_t rows = a.size() / c;
    std::vector<double> out(a.size());
    const auto& av = a.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = av.data() + r * c;
        double* y = out.data() + r * c;
        double mx = x[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += std::exp(x[j] - mx);
        double lse = mx + std::log(s);
        for (int j = 0; j < c; ++j) y[j] = x[j] - lse;
    }
    Node* an = a.node();
    auto saved = std::make_shared<std::vector<double>>(out);
    return make_result(
        "log_softmax_lastaxis", a.shape(), std::move(out), {a.node_ptr()},
        [an, saved, c, rows](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* ga = ctx.buf(an)) {
                for (int64_t r = 0; r < rows; ++r) {
                    const double* y = saved->data() + r * c;
                    const double* gr = g.data() + r * c;
                    double gs = 0.0;
                    for (int j = 0; j < c; ++j) gs += gr[j];
                    double* dst = ga->data() + r * c;
                    for (int j = 0; j < c; ++j)
                        dst[j] += gr[j] - std::exp(y[j]) * gs;
                }
            }
        });
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                 double eps) {
    int c = last_axis(x.shape());
    if (gain.size() != c || bias.size() != c)
        throw TensorError("layernorm: gain/bias must match last axis " +
                          std::to_string(c));
    int64_t rows = x.size() / c;
    std::vector<double> out(x.size());
    auto xhat = std::make_shared<std::vector<double>>(x.size());
    auto inv_sigma = std::make_shared<std::vector<double>>(rows);
    const auto& xv = x.data();
    const auto& gv = gain.data();
    const auto& bv = bias.data();
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * c;
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += xr[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            double d = xr[j] - mean;
            var += d * d;
        }
        var /= c;
        double isg = 1.0 / std::sqrt(var + eps);
        (*inv_sigma)[r] = isg;
        double* hr = xhat->data() + r * c;
        double* yr = out.data() + r * c;
        for (int j = 0; j < c; ++j) {
            hr[j] = (xr[j] - mean) * isg;
            yr[j] = hr[j] * gv[j] + bv[j];
        }
    }
    Node* xn = x.node();
    Node* gn = gain.node();
    Node* bn = bias.node();
    return make_result(
        "layernorm", x.shape(), std::move(out),
        {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
        [xn, gn, bn, xhat, inv_sigma, c, rows](const std::vector<double>& g,
                                               BackwardCtx& ctx) {
            auto* gx = ctx.buf(xn);
            auto* gg = ctx.buf(gn);
            auto* gb = ctx.buf(bn);
            const auto& gv = gn->value;
            for (int64_t r = 0; r < rows; ++r) {
                const double* hr = xhat->data() + r * c;
                const double* gr = g.data() + r * c;
                if (gg || gb) {
                    for (int j = 0; j < c; ++j) {
                        if (gg) (*gg)[j] += gr[j] * hr[j];
                        if (gb) (*gb)[j] += gr[j];
                    }
                }
                if (gx) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int j = 0; j < c; ++j) {
                        double w = gr[j] * gv[j];
                        m1 += w;
                        m2 += w * hr[j];
                    }
                    m1 /= c;
                    m2 /= c;
                    double isg = (*inv_sigma)[r];
                    double* dst = gx->data() + r * c;
                    for (int j = 0; j < c; ++j)
                        dst[j] += (gr[j] * gv[j] - m1 - hr[j] * m2) * isg;
                }
            }
        });
}

Tensor gelu(const Tensor& x) {
    constexpr double inv_sqrt2 = 0.7071067811865475244;
    constexpr double inv_sqrt2pi = 0.3989422804014326779;
    std::vector<double> out(x.size());
    const auto& xv = x.data();
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * inv_sqrt2));
    }
    Node* xn = x.node();
    return make_result(
        "gelu", x.shape(), std::move(out), {x.node_ptr()},
        [xn](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* gx = ctx.buf(xn)) {
                const auto& xv = xn->value;
                for (size_t i = 0; i < g.size(); ++i) {
                    double x = xv[i];
                    double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
                    double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
                    (*gx)[i] += g[i] * (cdf + x * pdf);
                }
            }
        });
}

// ---- conv1d ---------------------------------------------------------------

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad) {
    if (x.rank() != 2 || w.rank() != 3 || b.rank() != 1)
        throw TensorError("conv1d: expected x Cin×L, w Cout×Cin×K, b Cout");
    int cin = x.extent(0), L = x.extent(1);
    int cout = w.extent(0), wcin = w.extent(1), K = w.extent(2);
    if (wcin != cin) throw TensorError("conv1d: channel mismatch");
    if (b.extent(0) != cout) throw TensorError("conv1d: bias length mismatch");
    if (stride < 1) throw TensorError("conv1d: stride must be >= 1");
    int lout = (L + 2 * pad - K) / stride + 1;
    if (L + 2 * pad < K || lout < 1)
        throw TensorError("conv1d: kernel does not fit padded input");
    std::vector<double> out(static_cast<int64_t>(cout) * lout);
    const auto& xv = x.data();
    const auto& wv = w.data();
    const auto& bv = b.data();
    for (int oc = 0; oc < cout; ++oc) {
        double* yr = out.data() + static_cast<int64_t>(oc) * lout;
        for (int t = 0; t < lout; ++t) yr[t] = bv[oc];
        for (int ic = 0; ic < cin; ++ic) {
            const double* xr = xv.data() + static_cast<int64_t>(ic) * L;
            const double* wr = wv.data() + (static_cast<int64_t>(oc) * cin + ic) * K;
            for (int k = 0; k < K; ++k) {
                double wk = wr[k];
                for (int t = 0; t < lout; ++t) {
                    int src = t * stride + k - pad;
                    if (src >= 0 && src < L) yr[t] += wk * xr[src];
                }
            }
        }
    }
    Node* xn = x.node();
    Node* wn = w.node();
    Node* bn = b.node();
    return make_result(
        "conv1d", {cout, lout}, std::move(out),
        {x.node_ptr(), w.node_ptr(), b.node_ptr()},
        [xn, wn, bn, cin, L, cout, K, lout, stride,
         pad](const std::vector<double>& g, BackwardCtx& ctx) {
            auto* gx = ctx.buf(xn);
            auto* gw = ctx.buf(wn);
            auto* gb = ctx.buf(bn);
            const auto& xv = xn->value;
            const auto& wv = wn->value;
            for (int oc = 0; oc < cout; ++oc) {
                const double* gr = g.data() + static_cast<int64_t>(oc) * lout;
                if (gb)
                    for (int t = 0; t < lout; ++t) (*gb)[oc] += gr[t];
                for (int ic = 0; ic < cin; ++ic) {
                    const double* xr = xv.data() + static_cast<int64_t>(ic) * L;
                    const double* wr =
                        wv.data() + (static_cast<int64_t>(oc) * cin + ic) * K;
                    double* gxr = gx ? gx->data() + static_cast<int64_t>(ic) * L : nullptr;
                    double* gwr = gw ? gw->data() + (static_cast<int64_t>(oc) * cin + ic) * K
                                     : nullptr;
                    for (int k = 0; k < K; ++k) {
                        double wk = wr[k];
                        double acc = 0.0;
                        for (int t = 0; t < lout; ++t) {
                            int src = t * stride + k - pad;
                            if (src >= 0 && src < L) {
                                if (gxr) gxr[src] += wk * gr[t];
                                acc += xr[src] * gr[t];
                            }
                        }
                        if (gwr) gwr[k] += acc;
                    }
                }
            }
        });
}

// ---- DFT magnitude --------------------------------------------------------

namespace {

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
    int n = static_cast<int>(re.size());
    for (int i = 1, j = 0; i < n; ++i) {
        int bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }
    for (int len = 2; len <= n; len <<= 1) {
        double ang = -2.0 * M_PI / len;
        double wr = std::cos(ang), wi = std::sin(ang);
        for (int i = 0; i < n; i += len) {
            double cr = 1.0, ci = 0.0;
            for (int j = 0; j < len / 2; ++j) {
                int a = i + j, b = i + j + len / 2;
                double ur = re[a], ui = im[a];
                double vr = re[b] * cr - im[b] * ci;
                double vi = re[b] * ci + im[b] * cr;
                re[a] = ur + vr;
                im[a] = ui + vi;
                re[b] = ur - vr;
                im[b] = ui - vi;
                double ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
    }
}

}  // namespace

Tensor dft_magnitude(const Tensor& x) {
    int L = last_axis(x.shape());
    if (L < 1) throw TensorError("dft_magnitude: empty last axis");
    int64_t rows = x.size() / L;
    std::vector<double> out(x.size());
    auto spec_re = std::make_shared<std::vector<double>>(x.size());
    auto spec_im = std::make_shared<std::vector<double>>(x.size());
    const auto& xv = x.data();
    if (is_pow2(L)) {
        std::vector<double> re(L), im(L);
        for (int64_t r = 0; r < rows; ++r) {
            std::copy_n(xv.data() + r * L, L, re.data());
            std::fill(im.begin(), im.end(), 0.0);
            fft_radix2(re, im);
            for (int k = 0; k < L; ++k) {
                (*spec_re)[r * L + k] = re[k];
                (*spec_im)[r * L + k] = im[k];
                out[r * L + k] = std::hypot(re[k], im[k]);
            }
        }
    } else {
        // Twiddle table indexed by (k*n) mod L keeps this a single pass of
        // table lookups instead of L^2 trig calls.
        std::vector<double> ct(L), st(L);
        for (int m = 0; m < L; ++m) {
            double a = 2.0 * M_PI * m / L;
            ct[m] = std::cos(a);
            st[m] = std::sin(a);
        }
        for (int64_t r = 0; r < rows; ++r) {
            const double* xr = xv.data() + r * L;
            for (int k = 0; k < L; ++k) {
                double sre = 0.0, sim = 0.0;
                int idx = 0;
                for (int n = 0; n < L; ++n) {
                    sre += xr[n] * ct[idx];
                    sim -= xr[n] * st[idx];
                    idx += k;
                    if (idx >= L) idx -= L;
                }
                (*spec_re)[r * L + k] = sre;
                (*spec_im)[r * L + k] = sim;
                out[r * L + k] = std::hypot(sre, sim);
            }
        }
    }
    Node* xn = x.node();
    auto mag = std::make_shared<std::vector<double>>(out);
    return make_result(
        "dft_magnitude", x.shape(), std::move(out), {x.node_ptr()},
        [xn, spec_re, spec_im, mag, L, rows](const std::vector<double>& g,
                                             BackwardCtx& ctx) {
            auto* gx = ctx.buf(xn);
            if (!gx) return;
            std::vector<double> ct(L), st(L);
            for (int m = 0; m < L; ++m) {
                double a = 2.0 * M_PI * m / L;
                ct[m] = std::cos(a);
                st[m] = std::sin(a);
            }
            for (int64_t r = 0; r < rows; ++r) {
                const double* gr = g.data() + r * L;
                double* dst = gx->data() + r * L;
                for (int k = 0; k < L; ++k) {
                    double m = (*mag)[r * L + k];
                    if (m == 0.0) continue;  // subgradient 0 at exact zeros
                    double coef = gr[k] / m;
                    double re = (*spec_re)[r * L + k];
                    double im = (*spec_im)[r * L + k];
                    int idx = 0;
                    for (int n = 0; n < L; ++n) {
                        dst[n] += coef * (re * ct[idx] - im * st[idx]);
                        idx += k;
                        if (idx >= L) idx -= L;
                    }
                }
            }
        });
}

// ---- rotary ---------------------------------------------------------------

Tensor rope_rotate(const Tensor& x, const std::vector<double>& pos, double base) {
    if (x.rank() != 2) throw TensorError("rope_rotate: expected T×d tensor");
    int T = x.extent(0), d = x.extent(1);
    if (d % 2 != 0) throw TensorError("rope_rotate: dimension must be even");
    if (static_cast<int>(pos.size()) != T)
        throw TensorError("rope_rotate: position count mismatch");
    int hp = d / 2;
    std::vector<double> freq(hp);
    for (int k = 0; k < hp; ++k) freq[k] = std::pow(base, -2.0 * k / d);
    auto cs = std::make_shared<std::vector<double>>(static_cast<int64_t>(T) * d);
    std::vector<double> out(x.size());
    const auto& xv = x.data();
    for (int t = 0; t < T; ++t) {
        const double* xr = xv.data() + static_cast<int64_t>(t) * d;
        double* yr = out.data() + static_cast<int64_t>(t) * d;
        double* csr = cs->data() + static_cast<int64_t>(t) * d;
        for (int k = 0; k < hp; ++k) {
            double a = pos[t] * freq[k];
            double c = std::cos(a), s = std::sin(a);
            csr[2 * k] = c;
            csr[2 * k + 1] = s;
            yr[2 * k] = c * xr[2 * k] - s * xr[2 * k + 1];
            yr[2 * k + 1] = s * xr[2 * k] + c * xr[2 * k + 1];
        }
    }
    Node* xn = x.node();
    return make_result(
        "rope_rotate", x.shape(), std::move(out), {x.node_ptr()},
        [xn, cs, T, d, hp](const std::vector<double>& g, BackwardCtx& ctx) {
            if (auto* gx = ctx.buf(xn)) {
                for (int t = 0; t < T; ++t) {
                    const double* gr = g.data() + static_cast<int64_t>(t) * d;
                    const double* csr = cs->data() + static_cast<int64_t>(t) * d;
                    double* dst = gx->data() + static_cast<int64_t>(t) * d;
                    for (int k = 0; k < hp; ++k) {
                        double c = csr[2 * k], s = csr[2 * k + 1];
                        dst[2 * k] += c * gr[2 * k] + s * gr[2 * k + 1];
                        dst[2 * k + 1] += -s * gr[2 * k] + c * gr[2 * k + 1];
                    }
                }
            }
        });
}

// ---- reductions -----------------------------------------------------------

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    Node* an = a.node();
    return make_result("sum_all", {1}, {s}, {a.node_ptr()},
                       [an](const std::vector<double>& g, BackwardCtx& ctx) {
                           if (auto* ga = ctx.buf(an))
                               for (double& x : *ga) x += g[0];
                       });
}

Tensor mean_all(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    double inv = 1.0 / static_cast<double>(a.size());
    Node* an = a.node();
    return make_result("mean_all", {1}, {s * inv}, {a.node_ptr()},
                       [an, inv](const std::vector<double>& g, BackwardCtx& ctx) {
                           if (auto* ga = ctx.buf(an))
                               for (double& x : *ga) x += g[0] * inv;
                       });
}

Tensor mean_rows(const Tensor& a) {
    if (a.rank() != 2) throw TensorError("mean_rows: expected 2-D tensor");
    int r = a.extent(0), c = a.extent(1);
    std::vector<double> out(c, 0.0);
    const auto& av = a.data();
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out[j] += av[static_cast<int64_t>(i) * c + j];
    double inv = 1.0 / r;
    for (double& x : out) x *= inv;
    Node* an = a.node();
    return make_result("mean_rows", {c}, std::move(out), {a.node_ptr()},
                       [an, r, c, inv](const std::vector<double>& g, BackwardCtx& ctx) {
                           if (auto* ga = ctx.buf(an)) {
                               for (int i = 0; i < r; ++i)
                                   for (int j = 0; j < c; ++j)
                                       (*ga)[static_cast<int64_t>(i) * c + j] += g[j] * inv;
                           }
                       });
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
    if (!training || p <= 0.0) return x;
    if (p >= 1.0) throw TensorError("dropout: p must be < 1");
    double keep = 1.0 - p;
    auto mask = std::make_shared<std::vector<double>>(x.size());
    std::vector<double> out(x.size());
    const auto& xv = x.data();
    for (size_t i = 0; i < out.size(); ++i) {
        double m = (rng.uniform(0.0, 1.0) < keep) ? 1.0 / keep : 0.0;
        (*mask)[i] = m;
        out[i] = xv[i] * m;
    }
    Node* xn = x.node();
    return make_result("dropout", x.shape(), std::move(out), {x.node_ptr()},
                       [xn, mask](const std::vector<double>& g, BackwardCtx& ctx) {
                           if (auto* gx = ctx.buf(xn))
                               for (size_t i = 0; i < g.size(); ++i)
                                   (*gx)[i] += g[i] * (*mask)[i];
                       });
}

}  // namespace diver
