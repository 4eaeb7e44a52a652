#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "catmae/error.hpp"
#include "catmae/rng.hpp"

namespace catmae {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// Ops build a backward graph only while grad mode is on (default). Evaluation
// paths wrap themselves in NoGradGuard to skip graph construction entirely.
struct GradMode {
    static bool& enabled() {
        thread_local bool on = true;
        return on;
    }
};

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
    ~NoGradGuard() { GradMode::enabled() = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Dense row-major tensor with reverse-mode autodiff. A Tensor is a shared
// handle to a graph node; copying a Tensor aliases the node. Gradients
// accumulate into `grad` across backward() calls until zero_grad().
template <typename T>
class Tensor {
  public:
    struct Node {
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad;  // allocated lazily, same length as value
        bool requires_grad = false;
        std::string op;  // producing op, empty for leaves
        std::vector<std::shared_ptr<Node>> parents;
        std::function<void(Node&)> backward_fn;

        std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
        void ensure_grad() {
            if (grad.size() != value.size()) grad.assign(value.size(), T(0));
        }
    };
    using NodePtr = std::shared_ptr<Node>;

    Tensor() = default;
    explicit Tensor(NodePtr n) : node_(std::move(n)) {}

    static Tensor from_data(Shape shape, std::vector<T> data) {
        auto n = std::make_shared<Node>();
        const std::int64_t want = shape_numel(shape);
        if (static_cast<std::int64_t>(data.size()) != want)
            throw ShapeError("from_data: " + std::to_string(data.size()) +
                             " values for shape " + shape_str(shape));
        n->shape = std::move(shape);
        n->value = std::move(data);
        return Tensor(std::move(n));
    }

    static Tensor zeros(Shape shape) {
        auto count = static_cast<std::size_t>(shape_numel(shape));
        return from_data(std::move(shape), std::vector<T>(count, T(0)));
    }

    static Tensor full(Shape shape, T v) {
        auto count = static_cast<std::size_t>(shape_numel(shape));
        return from_data(std::move(shape), std::vector<T>(count, v));
    }

    static Tensor scalar(T v) { return from_data({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const NodePtr& node() const { return node_; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return node_->numel(); }
    std::int64_t dim(std::size_t i) const { return node_->shape[i]; }
    std::size_t rank() const { return node_->shape.size(); }

    T* data() { return node_->value.data(); }
    const T* data() const { return node_->value.data(); }
    std::vector<T>& values() { return node_->value; }
    const std::vector<T>& values() const { return node_->value; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool b) { node_->requires_grad = b; }

    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<T>& grad() const { return node_->grad; }
    std::vector<T>& grad_mut() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1)
            throw ShapeError("item: tensor has shape " + shape_str(shape()));
        return node_->value[0];
    }

    // Leaf copy of the current values, detached from the graph.
    Tensor detached_copy() const { return from_data(shape(), values()); }

    // Reverse-mode sweep from a scalar root. Gradients accumulate (+=) into
    // every reachable node with requires_grad; reduction order is fixed by
    // graph construction order, so results are deterministic.
    void backward() {
        if (numel() != 1)
            throw ShapeError("backward: root must be scalar, got " + shape_str(shape()));
        std::vector<Node*> order = topo_order(node_.get());
        node_->ensure_grad();
        node_->grad[0] = T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            Node* n = *it;
            if (n->backward_fn) {
                n->ensure_grad();
                n->backward_fn(*n);
            }
        }
    }

  private:
    static std::vector<Node*> topo_order(Node* root) {
        std::vector<Node*> order;
        std::unordered_set<Node*> seen;
        // iterative post-order DFS over parents
        std::vector<std::pair<Node*, std::size_t>> stack;
        if (root->requires_grad) stack.emplace_back(root, 0);
        seen.insert(root);
        while (!stack.empty()) {
            auto& [n, idx] = stack.back();
            if (idx < n->parents.size()) {
                Node* p = n->parents[idx++].get();
                if (p->requires_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(n);
                stack.pop_back();
            }
        }
        return order;
    }

    NodePtr node_;
};

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> ts) {
    if (!GradMode::enabled()) return false;
    for (auto* t : ts)
        if ((*t).requires_grad()) return true;
    return false;
}

}  // namespace detail

// Generic node builder: the extension point for custom ops (tests use it to
// inject deliberately wrong backward rules into grad_check).
template <typename T>
Tensor<T> make_op(std::string op, Shape out_shape, std::vector<T> out_value,
                  std::vector<Tensor<T>> inputs,
                  std::function<void(typename Tensor<T>::Node&)> backward) {
    auto out = Tensor<T>::from_data(std::move(out_shape), std::move(out_value));
    bool need = false;
    if (GradMode::enabled())
        for (const auto& in : inputs)
            if (in.requires_grad()) need = true;
    if (need) {
        auto n = out.node();
        n->requires_grad = true;
        n->op = std::move(op);
        for (auto& in : inputs) n->parents.push_back(in.node());
        n->backward_fn = std::move(backward);
    }
    return out;
}

// ---------------------------------------------------------------------------
// elementwise ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<T> out(a.values());
    const T* bp = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bp[i];
    auto an = a.node().get();
    auto bn = b.node().get();
    return make_op<T>("add", a.shape(), std::move(out), {a, b},
                      [an, bn](typename Tensor<T>::Node& o) {
                          if (an->requires_grad) {
                              an->ensure_grad();
                              for (std::size_t i = 0; i < o.grad.size(); ++i)
                                  an->grad[i] += o.grad[i];
                          }
                          if (bn->requires_grad) {
                              bn->ensure_grad();
                              for (std::size_t i = 0; i < o.grad.size(); ++i)
                                  bn->grad[i] += o.grad[i];
                          }
                      });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("sub: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<T> out(a.values());
    const T* bp = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bp[i];
    auto an = a.node().get();
    auto bn = b.node().get();
    return make_op<T>("sub", a.shape(), std::move(out), {a, b},
                      [an, bn](typename Tensor<T>::Node& o) {
                          if (an->requires_grad) {
                              an->ensure_grad();
                              for (std::size_t i = 0; i < o.grad.size(); ++i)
                                  an->grad[i] += o.grad[i];
                          }
                          if (bn->requires_grad) {
                              bn->ensure_grad();
                              for (std::size_t i = 0; i < o.grad.size(); ++i)
                                  bn->grad[i] -= o.grad[i];
                          }
                      });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape())
        throw ShapeError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<T> out(a.values());
    const T* bp = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bp[i];
    auto an = a.node().get();
    auto bn = b.node().get();
    return make_op<T>("mul", a.shape(), std::move(out), {a, b},
                      [an, bn](typename Tensor<T>::Node& o) {
                          if (an->requires_grad) {
                              an->ensure_grad();
                              for (std::size_t i = 0; i < o.grad.size(); ++i)
                                  an->grad[i] += o.grad[i] * bn->value[i];
                          }
                          if (bn->requires_grad) {
                              bn->ensure_grad();
                              for (std::size_t i = 0; i < o.grad.size(); ++i)
                                  bn->grad[i] += o.grad[i] * an->value[i];
                          }
                      });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double c) {
    std::vector<T> out(a.values());
    const T cc = static_cast<T>(c);
    for (auto& v : out) v *= cc;
    auto an = a.node().get();
    return make_op<T>("scale", a.shape(), std::move(out), {a},
                      [an, cc](typename Tensor<T>::Node& o) {
                          if (!an->requires_grad) return;
                          an->ensure_grad();
                          for (std::size_t i = 0; i < o.grad.size(); ++i)
                              an->grad[i] += o.grad[i] * cc;
                      });
}

// Broadcast-add a length-d vector over the last axis.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    const std::int64_t d = x.shape().back();
    const bool v_ok = v.numel() == d &&
                      (v.rank() == 1 || (v.rank() == 2 && v.dim(0) == 1));
    if (!v_ok)
        throw ShapeError("add_rowvec: vector " + shape_str(v.shape()) +
                         " does not match last axis of " + shape_str(x.shape()));
    std::vector<T> out(x.values());
    const T* vp = v.data();
    const std::int64_t rows = x.numel() / d;
    for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < d; ++j) out[static_cast<std::size_t>(r * d + j)] += vp[j];
    auto xn = x.node().get();
    auto vn = v.node().get();
    return make_op<T>("add_rowvec", x.shape(), std::move(out), {x, v},
                      [xn, vn, rows, d](typename Tensor<T>::Node& o) {
                          if (xn->requires_grad) {
                              xn->ensure_grad();
                              for (std::size_t i = 0; i < o.grad.size(); ++i)
                                  xn->grad[i] += o.grad[i];
                          }
                          if (vn->requires_grad) {
                              vn->ensure_grad();
                              for (std::int64_t r = 0; r < rows; ++r)
                                  for (std::int64_t j = 0; j < d; ++j)
                                      vn->grad[static_cast<std::size_t>(j)] +=
                                          o.grad[static_cast<std::size_t>(r * d + j)];
                          }
                      });
}

// Exact-erf GELU: x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr double inv_sqrt2 = std::numbers::sqrt2 / 2.0;
    constexpr double inv_sqrt2pi = 0.3989422804014326779399461;
    std::vector<T> out(x.values().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = static_cast<double>(x.data()[i]);
        out[i] = static_cast<T>(v * 0.5 * (1.0 + std::erf(v * inv_sqrt2)));
    }
    auto xn = x.node().get();
    return make_op<T>("gelu", x.shape(), std::move(out), {x},
                      [xn](typename Tensor<T>::Node& o) {
                          if (!xn->requires_grad) return;
                          xn->ensure_grad();
                          for (std::size_t i = 0; i < o.grad.size(); ++i) {
                              const double v = static_cast<double>(xn->value[i]);
                              const double phi = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
                              const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
                              xn->grad[i] += o.grad[i] * static_cast<T>(phi + v * pdf);
                          }
                      });
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    T s = T(0);
    for (auto v : x.values()) s += v;
    auto xn = x.node().get();
    return make_op<T>("sum_all", {1}, {s}, {x}, [xn](typename Tensor<T>::Node& o) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (auto& g : xn->grad) g += o.grad[0];
    });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    T s = T(0);
    for (auto v : x.values()) s += v;
    const T inv_n = T(1) / static_cast<T>(x.numel());
    auto xn = x.node().get();
    return make_op<T>("mean_all", {1}, {s * inv_n}, {x},
                      [xn, inv_n](typename Tensor<T>::Node& o) {
                          if (!xn->requires_grad) return;
                          xn->ensure_grad();
                          const T g = o.grad[0] * inv_n;
                          for (auto& gv : xn->grad) gv += g;
                      });
}

// ---------------------------------------------------------------------------
// matmul

// Batched matrix product [..,m,k] @ [..,k,n] -> [..,m,n]. Leading (batch)
// dims must match exactly, or be absent on one side (that side is shared
// across the other's batches). Row-major ikj kernel, deterministic.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() < 2 || b.rank() < 2)
        throw ShapeError("matmul: operands must have rank >= 2, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    const std::int64_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
    const std::int64_t k2 = sb[sb.size() - 2], n = sb[sb.size() - 1];
    Shape batch_a(sa.begin(), sa.end() - 2), batch_b(sb.begin(), sb.end() - 2);
    if (k != k2 || (!batch_a.empty() && !batch_b.empty() && batch_a != batch_b))
        throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " @ " +
                         shape_str(sb));
    const Shape& batch = batch_a.empty() ? batch_b : batch_a;
    const std::int64_t nb = shape_numel(batch);
    const std::int64_t sa_batch = batch_a.empty() ? 0 : m * k;
    const std::int64_t sb_batch = batch_b.empty() ? 0 : k * n;

    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::vector<T> out(static_cast<std::size_t>(nb * m * n), T(0));
    const T* ap = a.data();
    const T* bp = b.data();
    for (std::int64_t bi = 0; bi < nb; ++bi) {
        const T* A = ap + bi * sa_batch;
        const T* B = bp + bi * sb_batch;
        T* C = out.data() + bi * m * n;
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t l = 0; l < k; ++l) {
                const T av = A[i * k + l];
                const T* Brow = B + l * n;
                T* Crow = C + i * n;
                for (std::int64_t j = 0; j < n; ++j) Crow[j] += av * Brow[j];
            }
    }
    auto an = a.node().get();
    auto bn = b.node().get();
    return make_op<T>(
        "matmul", std::move(out_shape), std::move(out), {a, b},
        [an, bn, nb, m, n, k, sa_batch, sb_batch](typename Tensor<T>::Node& o) {
            const T* go = o.grad.data();
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::int64_t bi = 0; bi < nb; ++bi) {
                    const T* G = go + bi * m * n;
                    const T* B = bn->value.data() + bi * sb_batch;
                    T* dA = an->grad.data() + bi * sa_batch;
                    // dA[i,l] += sum_j G[i,j] * B[l,j]
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t l = 0; l < k; ++l) {
                            T s = T(0);
                            const T* Grow = G + i * n;
                            const T* Brow = B + l * n;
                            for (std::int64_t j = 0; j < n; ++j) s += Grow[j] * Brow[j];
                            dA[i * k + l] += s;
                        }
                }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::int64_t bi = 0; bi < nb; ++bi) {
                    const T* G = go + bi * m * n;
                    const T* A = an->value.data() + bi * sa_batch;
                    T* dB = bn->grad.data() + bi * sb_batch;
                    // dB[l,j] += sum_i A[i,l] * G[i,j]
                    for (std::int64_t i = 0; i < m; ++i)
                        for (std::int64_t l = 0; l < k; ++l) {
                            const T av = A[i * k + l];
                            const T* Grow = G + i * n;
                            T* dBrow = dB + l * n;
                            for (std::int64_t j = 0; j < n; ++j) dBrow[j] += av * Grow[j];
                        }
                }
            }
        });
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
    if (x.rank() < 2)
        throw ShapeError("transpose_last2: rank >= 2 required, got " +
                         shape_str(x.shape()));
    const auto& s = x.shape();
    const std::int64_t m = s[s.size() - 2], n = s[s.size() - 1];
    const std::int64_t nb = x.numel() / (m * n);
    Shape out_shape = s;
    std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
    std::vector<T> out(x.values().size());
    const T* xp = x.data();
    for (std::int64_t bi = 0; bi < nb; ++bi)
        for (std::int64_t i = 0; i < m; ++i)
            for (std::int64_t j = 0; j < n; ++j)
                out[static_cast<std::size_t>(bi * m * n + j * m + i)] =
                    xp[bi * m * n + i * n + j];
    auto xn = x.node().get();
    return make_op<T>("transpose_last2", std::move(out_shape), std::move(out), {x},
                      [xn, nb, m, n](typename Tensor<T>::Node& o) {
                          if (!xn->requires_grad) return;
                          xn->ensure_grad();
                          for (std::int64_t bi = 0; bi < nb; ++bi)
                              for (std::int64_t i = 0; i < m; ++i)
                                  for (std::int64_t j = 0; j < n; ++j)
                                      xn->grad[static_cast<std::size_t>(bi * m * n + i * n + j)] +=
                                          o.grad[static_cast<std::size_t>(bi * m * n + j * m + i)];
                      });
}

// ---------------------------------------------------------------------------
// softmax / layer norm

// Numerically stable softmax along `axis` (negative counts from the back).
// Inputs must be finite.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
    const int r = static_cast<int>(x.rank());
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
        throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
    for (auto v : x.values())
        if (!std::isfinite(static_cast<double>(v)))
            throw NumericError("softmax: non-finite input");
    const auto& s = x.shape();
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
    for (int i = axis + 1; i < r; ++i) inner *= s[static_cast<std::size_t>(i)];
    const std::int64_t len = s[static_cast<std::size_t>(axis)];

    std::vector<T> out(x.values().size());
    const T* xp = x.data();
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            T mx = xp[base];
            for (std::int64_t i = 1; i < len; ++i)
                mx = std::max(mx, xp[base + i * inner]);
            T sum = T(0);
            for (std::int64_t i = 0; i < len; ++i) {
                const T e = std::exp(xp[base + i * inner] - mx);
                out[static_cast<std::size_t>(base + i * inner)] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (std::int64_t i = 0; i < len; ++i)
                out[static_cast<std::size_t>(base + i * inner)] *= inv;
        }
    auto xn = x.node().get();
    return make_op<T>("softmax", x.shape(), std::move(out), {x},
                      [xn, outer, inner, len](typename Tensor<T>::Node& o) {
                          if (!xn->requires_grad) return;
                          xn->ensure_grad();
                          // dx = y * (dy - sum(dy * y))
                          for (std::int64_t ot = 0; ot < outer; ++ot)
                              for (std::int64_t in = 0; in < inner; ++in) {
                                  const std::int64_t base = ot * len * inner + in;
                                  T dot = T(0);
                                  for (std::int64_t i = 0; i < len; ++i) {
                                      const auto idx = static_cast<std::size_t>(base + i * inner);
                                      dot += o.grad[idx] * o.value[idx];
                                  }
                                  for (std::int64_t i = 0; i < len; ++i) {
                                      const auto idx = static_cast<std::size_t>(base + i * inner);
                                      xn->grad[idx] += o.value[idx] * (o.grad[idx] - dot);
                                  }
                              }
                      });
}

// Layer norm over the last axis with affine gain/bias. Population variance.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     double eps) {
    const std::int64_t d = x.shape().back();
    if (gain.numel() != d || bias.numel() != d)
        throw ShapeError("layer_norm: gain/bias must have " + std::to_string(d) +
                         " entries, got " + shape_str(gain.shape()) + " and " +
                         shape_str(bias.shape()));
    const std::int64_t rows = x.numel() / d;
    std::vector<T> out(x.values().size());
    std::vector<T> xhat(x.values().size());
    std::vector<T> inv_std(static_cast<std::size_t>(rows));
    const T* xp = x.data();
    const T* gp = gain.data();
    const T* bp = bias.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* row = xp + r * d;
        T mean = T(0);
        for (std::int64_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<T>(d);
        T var = T(0);
        for (std::int64_t j = 0; j < d; ++j) {
            const T c = row[j] - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        const T inv = T(1) / std::sqrt(var + static_cast<T>(eps));
        inv_std[static_cast<std::size_t>(r)] = inv;
        for (std::int64_t j = 0; j < d; ++j) {
            const auto idx = static_cast<std::size_t>(r * d + j);
            xhat[idx] = (row[j] - mean) * inv;
            out[idx] = gp[j] * xhat[idx] + bp[j];
        }
    }
    auto xn = x.node().get();
    auto gn = gain.node().get();
    auto bn = bias.node().get();
    return make_op<T>(
        "layer_norm", x.shape(), std::move(out), {x, gain, bias},
        [xn, gn, bn, rows, d, xhat = std::move(xhat),
         inv_std = std::move(inv_std)](typename Tensor<T>::Node& o) {
            if (gn->requires_grad) gn->ensure_grad();
            if (bn->requires_grad) bn->ensure_grad();
            if (xn->requires_grad) xn->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                const T* grow = o.grad.data() + r * d;
                const T* xh = xhat.data() + r * d;
                if (gn->requires_grad)
                    for (std::int64_t j = 0; j < d; ++j)
                        gn->grad[static_cast<std::size_t>(j)] += grow[j] * xh[j];
                if (bn->requires_grad)
                    for (std::int64_t j = 0; j < d; ++j)
                        bn->grad[static_cast<std::size_t>(j)] += grow[j];
                if (xn->requires_grad) {
                    // dxhat = dy * gain; dx = inv*(dxhat - mean(dxhat) - xhat*mean(dxhat*xhat))
                    T m1 = T(0), m2 = T(0);
                    for (std::int64_t j = 0; j < d; ++j) {
                        const T dxh = grow[j] * gn->value[static_cast<std::size_t>(j)];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= static_cast<T>(d);
                    m2 /= static_cast<T>(d);
                    const T inv = inv_std[static_cast<std::size_t>(r)];
                    for (std::int64_t j = 0; j < d; ++j) {
                        const T dxh = grow[j] * gn->value[static_cast<std::size_t>(j)];
                        xn->grad[static_cast<std::size_t>(r * d + j)] +=
                            inv * (dxh - m1 - xh[j] * m2);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// structural ops

// [n, H*dh] -> [H, n, dh]
template <typename T>
Tensor<T> split_heads(const Tensor<T>& x, std::int64_t heads) {
    if (x.rank() != 2 || x.dim(1) % heads != 0)
        throw ShapeError("split_heads: cannot split " + shape_str(x.shape()) + " into " +
                         std::to_string(heads) + " heads");
    const std::int64_t n = x.dim(0), d = x.dim(1), dh = d / heads;
    std::vector<T> out(x.values().size());
    const T* xp = x.data();
    for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < dh; ++j)
                out[static_cast<std::size_t>((h * n + i) * dh + j)] = xp[i * d + h * dh + j];
    auto xn = x.node().get();
    return make_op<T>("split_heads", {heads, n, dh}, std::move(out), {x},
                      [xn, heads, n, d, dh](typename Tensor<T>::Node& o) {
                          if (!xn->requires_grad) return;
                          xn->ensure_grad();
                          for (std::int64_t h = 0; h < heads; ++h)
                              for (std::int64_t i = 0; i < n; ++i)
                                  for (std::int64_t j = 0; j < dh; ++j)
                                      xn->grad[static_cast<std::size_t>(i * d + h * dh + j)] +=
                                          o.grad[static_cast<std::size_t>((h * n + i) * dh + j)];
                      });
}

// [H, n, dh] -> [n, H*dh]
template <typename T>
Tensor<T> merge_heads(const Tensor<T>& x) {
    if (x.rank() != 3)
        throw ShapeError("merge_heads: expected rank 3, got " + shape_str(x.shape()));
    const std::int64_t heads = x.dim(0), n = x.dim(1), dh = x.dim(2), d = heads * dh;
    std::vector<T> out(x.values().size());
    const T* xp = x.data();
    for (std::int64_t h = 0; h < heads; ++h)
        for (std::int64_t i = 0; i < n; ++i)
            for (std::int64_t j = 0; j < dh; ++j)
                out[static_cast<std::size_t>(i * d + h * dh + j)] = xp[(h * n + i) * dh + j];
    auto xn = x.node().get();
    return make_op<T>("merge_heads", {n, d}, std::move(out), {x},
                      [xn, heads, n, d, dh](typename Tensor<T>::Node& o) {
                          if (!xn->requires_grad) return;
                          xn->ensure_grad();
                          for (std::int64_t h = 0; h < heads; ++h)
                              for (std::int64_t i = 0; i < n; ++i)
                                  for (std::int64_t j = 0; j < dh; ++j)
                                      xn->grad[static_cast<std::size_t>((h * n + i) * dh + j)] +=
                                          o.grad[static_cast<std::size_t>(i * d + h * dh + j)];
                      });
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& x, std::int64_t c0, std::int64_t c1) {
    if (x.rank() != 2 || c0 < 0 || c1 > x.dim(1) || c0 >= c1)
        throw ShapeError("slice_cols: [" + std::to_string(c0) + "," + std::to_string(c1) +
                         ") invalid for " + shape_str(x.shape()));
    const std::int64_t n = x.dim(0), d = x.dim(1), w = c1 - c0;
    std::vector<T> out(static_cast<std::size_t>(n * w));
    const T* xp = x.data();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < w; ++j)
            out[static_cast<std::size_t>(i * w + j)] = xp[i * d + c0 + j];
    auto xn = x.node().get();
    return make_op<T>("slice_cols", {n, w}, std::move(out), {x},
                      [xn, n, d, w, c0](typename Tensor<T>::Node& o) {
                          if (!xn->requires_grad) return;
                          xn->ensure_grad();
                          for (std::int64_t i = 0; i < n; ++i)
                              for (std::int64_t j = 0; j < w; ++j)
                                  xn->grad[static_cast<std::size_t>(i * d + c0 + j)] +=
                                      o.grad[static_cast<std::size_t>(i * w + j)];
                      });
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::int64_t r0, std::int64_t r1) {
    if (x.rank() != 2 || r0 < 0 || r1 > x.dim(0) || r0 >= r1)
        throw ShapeError("slice_rows: [" + std::to_string(r0) + "," + std::to_string(r1) +
                         ") invalid for " + shape_str(x.shape()));
    const std::int64_t d = x.dim(1), n = r1 - r0;
    std::vector<T> out(x.values().begin() + r0 * d, x.values().begin() + r1 * d);
    auto xn = x.node().get();
    return make_op<T>("slice_rows", {n, d}, std::move(out), {x},
                      [xn, n, d, r0](typename Tensor<T>::Node& o) {
                          if (!xn->requires_grad) return;
                          xn->ensure_grad();
                          for (std::int64_t i = 0; i < n; ++i)
                              for (std::int64_t j = 0; j < d; ++j)
                                  xn->grad[static_cast<std::size_t>((r0 + i) * d + j)] +=
                                      o.grad[static_cast<std::size_t>(i * d + j)];
                      });
}

// Select rows of a [n, d] matrix in the given index order.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::int64_t>& idx) {
    if (x.rank() != 2)
        throw ShapeError("gather_rows: expected rank 2, got " + shape_str(x.shape()));
    const std::int64_t n = x.dim(0), d = x.dim(1);
    for (auto i : idx)
        if (i < 0 || i >= n)
            throw ShapeError("gather_rows: index " + std::to_string(i) +
                             " out of range for " + shape_str(x.shape()));
    const std::int64_t k = static_cast<std::int64_t>(idx.size());
    std::vector<T> out(static_cast<std::size_t>(k * d));
    const T* xp = x.data();
    for (std::int64_t i = 0; i < k; ++i)
        std::copy(xp + idx[static_cast<std::size_t>(i)] * d,
                  xp + (idx[static_cast<std::size_t>(i)] + 1) * d, out.begin() + i * d);
    auto xn = x.node().get();
    return make_op<T>("gather_rows", {k, d}, std::move(out), {x},
                      [xn, idx, d, k](typename Tensor<T>::Node& o) {
                          if (!xn->requires_grad) return;
                          xn->ensure_grad();
                          for (std::int64_t i = 0; i < k; ++i)
                              for (std::int64_t j = 0; j < d; ++j)
                                  xn->grad[static_cast<std::size_t>(
                                      idx[static_cast<std::size_t>(i)] * d + j)] +=
                                      o.grad[static_cast<std::size_t>(i * d + j)];
                      });
}

// Build an [n_rows, d] matrix whose rows at `idx` come from `rows` (in order)
// and whose remaining rows all equal `fill`.
template <typename T>
Tensor<T> scatter_rows_with_fill(const Tensor<T>& rows, const Tensor<T>& fill,
                                 const std::vector<std::int64_t>& idx,
                                 std::int64_t n_rows) {
    if (rows.rank() != 2)
        throw ShapeError("scatter_rows_with_fill: rows must be rank 2, got " +
                         shape_str(rows.shape()));
    const std::int64_t k = rows.dim(0), d = rows.dim(1);
    if (static_cast<std::int64_t>(idx.size()) != k)
        throw ShapeError("scatter_rows_with_fill: " + std::to_string(idx.size()) +
                         " indices for " + std::to_string(k) + " rows");
    const bool fill_ok = fill.numel() == d &&
                         (fill.rank() == 1 || (fill.rank() == 2 && fill.dim(0) == 1));
    if (!fill_ok)
        throw ShapeError("scatter_rows_with_fill: fill " + shape_str(fill.shape()) +
                         " does not match row width " + std::to_string(d));
    std::vector<char> taken(static_cast<std::size_t>(n_rows), 0);
    for (auto i : idx) {
        if (i < 0 || i >= n_rows)
            throw ShapeError("scatter_rows_with_fill: index " + std::to_string(i) +
                             " out of range 0.." + std::to_string(n_rows - 1));
        taken[static_cast<std::size_t>(i)] = 1;
    }
    std::vector<T> out(static_cast<std::size_t>(n_rows * d));
    const T* fp = fill.data();
    for (std::int64_t r = 0; r < n_rows; ++r)
        if (!taken[static_cast<std::size_t>(r)])
            std::copy(fp, fp + d, out.begin() + r * d);
    const T* rp = rows.data();
    for (std::int64_t i = 0; i < k; ++i)
        std::copy(rp + i * d, rp + (i + 1) * d,
                  out.begin() + idx[static_cast<std::size_t>(i)] * d);
    auto rn = rows.node().get();
    auto fn = fill.node().get();
    return make_op<T>(
        "scatter_rows_with_fill", {n_rows, d}, std::move(out), {rows, fill},
        [rn, fn, idx, taken = std::move(taken), n_rows, d, k](typename Tensor<T>::Node& o) {
            if (rn->requires_grad) {
                rn->ensure_grad();
                for (std::int64_t i = 0; i < k; ++i)
                    for (std::int64_t j = 0; j < d; ++j)
                        rn->grad[static_cast<std::size_t>(i * d + j)] +=
                            o.grad[static_cast<std::size_t>(
                                idx[static_cast<std::size_t>(i)] * d + j)];
            }
            if (fn->requires_grad) {
                fn->ensure_grad();
                for (std::int64_t r = 0; r < n_rows; ++r)
                    if (!taken[static_cast<std::size_t>(r)])
                        for (std::int64_t j = 0; j < d; ++j)
                            fn->grad[static_cast<std::size_t>(j)] +=
                                o.grad[static_cast<std::size_t>(r * d + j)];
            }
        });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::int64_t d = parts[0].dim(1);
    std::int64_t total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.dim(1) != d)
            throw ShapeError("concat_rows: mismatched part " + shape_str(p.shape()));
        total += p.dim(0);
    }
    std::vector<T> out;
    out.reserve(static_cast<std::size_t>(total * d));
    for (const auto& p : parts) out.insert(out.end(), p.values().begin(), p.values().end());

    std::vector<typename Tensor<T>::Node*> pnodes;
    std::vector<std::int64_t> offsets;
    std::int64_t off = 0;
    for (const auto& p : parts) {
        pnodes.push_back(p.node().get());
        offsets.push_back(off);
        off += p.dim(0);
    }
    return make_op<T>("concat_rows", {total, d}, std::move(out), parts,
                      [pnodes, offsets, d](typename Tensor<T>::Node& o) {
                          for (std::size_t pi = 0; pi < pnodes.size(); ++pi) {
                              auto* pn = pnodes[pi];
                              if (!pn->requires_grad) continue;
                              pn->ensure_grad();
                              const std::int64_t rows = pn->shape[0];
                              const std::int64_t base = offsets[pi] * d;
                              for (std::int64_t i = 0; i < rows * d; ++i)
                                  pn->grad[static_cast<std::size_t>(i)] +=
                                      o.grad[static_cast<std::size_t>(base + i)];
                          }
                      });
}

// ---------------------------------------------------------------------------
// composites and helpers

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return add_rowvec(matmul(x, w), b);
}

// Mean squared error over all elements; the per-frame reconstruction loss.
template <typename T>
Tensor<T> mse(const Tensor<T>& pred, const Tensor<T>& target) {
    auto d = sub(pred, target);
    return mean_all(mul(d, d));
}

template <typename T>
Tensor<T> randn(Shape shape, Rng& rng, double stddev = 1.0) {
    auto count = static_cast<std::size_t>(shape_numel(shape));
    std::vector<T> v(count);
    for (auto& x : v) x = static_cast<T>(rng.normal(0.0, stddev));
    return Tensor<T>::from_data(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> trunc_normal(Shape shape, Rng& rng, double stddev) {
    auto count = static_cast<std::size_t>(shape_numel(shape));
    std::vector<T> v(count);
    for (auto& x : v) x = static_cast<T>(rng.truncated_normal(stddev));
    return Tensor<T>::from_data(std::move(shape), std::move(v));
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
    for (auto v : t.values())
        if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
}

}  // namespace catmae
