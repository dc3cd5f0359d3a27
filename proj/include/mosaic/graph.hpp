#pragma once
// Reverse-mode autodiff over dense double tensors.
//
// A Graph is a tape: every primitive op appends one node holding the op
// kind, input node ids, the computed output, and whatever the backward
// pass needs. Nodes are created in topological order by construction;
// backward() walks the tape once in reverse and accumulates gradients
// into every consumer's inputs.
//
// Conventions:
//  - masked softmax gives masked positions exactly zero weight and
//    renormalizes over the unmasked ones; an all-masked row is all zeros.
//  - |x| has d|x|/dx = sign(x) with sign(0) = 0.
//  - L2 normalization divides by (norm + 1e-12).
//  - broadcasting: scalar against anything, or one operand's shape equal
//    to a suffix of the other's (leading batch dims).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "mosaic/tensor.hpp"

namespace mosaic {

struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

using ByteMask = std::shared_ptr<const std::vector<std::uint8_t>>;
using IntVec = std::shared_ptr<const std::vector<int>>;

inline ByteMask make_mask(std::vector<std::uint8_t> m) {
    return std::make_shared<const std::vector<std::uint8_t>>(std::move(m));
}
inline IntVec make_ints(std::vector<int> v) {
    return std::make_shared<const std::vector<int>>(std::move(v));
}

namespace detail {

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    double e = std::exp(x);
    return e / (1.0 + e);
}

// c[m,n] = a[m,k] * b[k,n]
inline void mm_nn(const double* a, const double* b, double* c, int m, int k, int n) {
    std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            double av = ai[l];
            if (av == 0.0) continue;
            const double* bl = b + static_cast<std::size_t>(l) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
}

// c[m,n] = a[m,k] * b[n,k]^T
inline void mm_nt(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* ai = a + static_cast<std::size_t>(i) * k;
        double* ci = c + static_cast<std::size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* bj = b + static_cast<std::size_t>(j) * k;
            double s = 0.0;
            for (int l = 0; l < k; ++l) s += ai[l] * bj[l];
            ci[j] = s;
        }
    }
}

// c[m,n] = a[k,m]^T * b[k,n]
inline void mm_tn(const double* a, const double* b, double* c, int m, int k, int n) {
    std::fill(c, c + static_cast<std::size_t>(m) * n, 0.0);
    for (int l = 0; l < k; ++l) {
        const double* al = a + static_cast<std::size_t>(l) * m;
        const double* bl = b + static_cast<std::size_t>(l) * n;
        for (int i = 0; i < m; ++i) {
            double av = al[i];
            if (av == 0.0) continue;
            double* ci = c + static_cast<std::size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
}

enum class Bcast { kSame, kAScalar, kBScalar, kASuffix, kBSuffix };

inline bool is_suffix(const std::vector<int>& small, const std::vector<int>& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

inline Bcast bcast_mode(const Tensor& a, const Tensor& b) {
    if (a.same_shape(b)) return Bcast::kSame;
    if (b.numel() == 1) return Bcast::kBScalar;
    if (a.numel() == 1) return Bcast::kAScalar;
    if (is_suffix(b.shape(), a.shape())) return Bcast::kBSuffix;
    if (is_suffix(a.shape(), b.shape())) return Bcast::kASuffix;
    throw std::invalid_argument("graph: shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()) + " do not broadcast");
}

// Sum `g` down to the shape of `like` (inverse of suffix/scalar broadcast).
// Always returns a fresh buffer so accumulation never aliases `g`.
inline Tensor reduce_to(const Tensor& g, const Tensor& like) {
    if (g.same_shape(like)) return g.clone();
    Tensor out(like.shape());
    std::int64_t nb = like.numel();
    for (std::int64_t i = 0; i < g.numel(); ++i) out.mut()[i % nb] += g.ptr()[i];
    return out;
}

}  // namespace detail

enum class Op {
    kLeaf,
    kAdd, kSub, kMul, kDiv,
    kMatmulNN, kMatmulNT,
    kExp, kNeg, kAbs, kClamp, kSilu,
    kSqNormLast, kNormalizeLast,
    kMaskedSoftmax, kGroupScale, kBroadcastRows,
    kReshape, kSlice, kConcat, kGatherRows, kRope,
    kCrossEntropy, kReduceSum,
    kMulC, kAddC,
};

class Graph {
public:
    Graph() { nodes_.reserve(1024); }

    void reserve(std::size_t n) { nodes_.reserve(n); }
    std::size_t size() const { return nodes_.size(); }

    const Tensor& value(Var v) const { return nodes_[check(v)].out; }

    // Gradient of the last backward() wrt node v; zeros if none reached it.
    Tensor grad(Var v) const {
        const Node& n = nodes_[check(v)];
        if (static_cast<std::size_t>(v.id) < grads_.size() && grads_[v.id].defined())
            return grads_[v.id];
        return Tensor::zeros(n.out.shape());
    }

    Var leaf(Tensor t, bool requires_grad) {
        Node n;
        n.op = Op::kLeaf;
        n.out = std::move(t);
        n.needs_grad = requires_grad;
        return push(std::move(n));
    }
    Var leaf(const Tensor& t) { return leaf(t, t.requires_grad); }
    Var constant(Tensor t) { return leaf(std::move(t), false); }
    Var constant(double v) { return leaf(Tensor::scalar(v), false); }

    Var add(Var a, Var b) { return binary(Op::kAdd, a, b); }
    Var sub(Var a, Var b) { return binary(Op::kSub, a, b); }
    Var mul(Var a, Var b) { return binary(Op::kMul, a, b); }
    Var div(Var a, Var b) { return binary(Op::kDiv, a, b); }

    Var add_c(Var a, double c) { return unary_c(Op::kAddC, a, c, 0.0); }
    Var mul_c(Var a, double c) { return unary_c(Op::kMulC, a, c, 0.0); }

    Var matmul(Var a, Var b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        detail::require(ta.ndim() == 2 && tb.ndim() == 2 && ta.dim(1) == tb.dim(0),
                        "matmul: inner dimensions disagree " + shape_str(ta.shape()) + " x " +
                            shape_str(tb.shape()));
        Tensor out({ta.dim(0), tb.dim(1)});
        detail::mm_nn(ta.ptr(), tb.ptr(), out.mut(), ta.dim(0), ta.dim(1), tb.dim(1));
        return push(make_node(Op::kMatmulNN, a, b, std::move(out)));
    }

    // a * b^T
    Var matmul_nt(Var a, Var b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        detail::require(ta.ndim() == 2 && tb.ndim() == 2 && ta.dim(1) == tb.dim(1),
                        "matmul_nt: inner dimensions disagree " + shape_str(ta.shape()) + " x " +
                            shape_str(tb.shape()) + "^T");
        Tensor out({ta.dim(0), tb.dim(0)});
        detail::mm_nt(ta.ptr(), tb.ptr(), out.mut(), ta.dim(0), ta.dim(1), tb.dim(0));
        return push(make_node(Op::kMatmulNT, a, b, std::move(out)));
    }

    Var exp(Var a) {
        return map(Op::kExp, a, [](double x) { return std::exp(x); });
    }
    Var neg(Var a) {
        return map(Op::kNeg, a, [](double x) { return -x; });
    }
    Var abs(Var a) {
        return map(Op::kAbs, a, [](double x) { return std::abs(x); });
    }
    Var silu(Var a) {
        return map(Op::kSilu, a, [](double x) { return x * detail::sigmoid(x); });
    }
    Var clamp(Var a, double lo, double hi) {
        detail::require(lo <= hi, "clamp: lo > hi");
        Node n = make_node(Op::kClamp, a, Var{}, Tensor(value(a).shape()));
        n.c0 = lo;
        n.c1 = hi;
        const Tensor& ta = value(a);
        for (std::int64_t i = 0; i < ta.numel(); ++i)
            n.out.mut()[i] = std::min(hi, std::max(lo, ta.ptr()[i]));
        return push(std::move(n));
    }

    // [R,C] -> [R,1], sum of squares along the last axis
    Var sq_norm_last(Var a) {
        const Tensor& ta = value(a);
        int r = ta.rows(), c = ta.cols();
        Tensor out({r, 1});
        for (int i = 0; i < r; ++i) {
            double s = 0.0;
            for (int j = 0; j < c; ++j) {
                double x = ta.at(i, j);
                s += x * x;
            }
            out.at(i, 0) = s;
        }
        return push(make_node(Op::kSqNormLast, a, Var{}, std::move(out)));
    }

    // rows scaled to unit L2 norm; denominator is (norm + 1e-12)
    Var normalize_last(Var a) {
        const Tensor& ta = value(a);
        int r = ta.rows(), c = ta.cols();
        Tensor out(ta.shape());
        Tensor norms({r, 1});
        for (int i = 0; i < r; ++i) {
            double s = 0.0;
            for (int j = 0; j < c; ++j) {
                double x = ta.ptr()[static_cast<std::size_t>(i) * c + j];
                s += x * x;
            }
            double n = std::sqrt(s);
            norms.at(i, 0) = n;
            double inv = 1.0 / (n + 1e-12);
            for (int j = 0; j < c; ++j)
                out.mut()[static_cast<std::size_t>(i) * c + j] =
                    ta.ptr()[static_cast<std::size_t>(i) * c + j] * inv;
        }
        Node n = make_node(Op::kNormalizeLast, a, Var{}, std::move(out));
        n.saved = std::move(norms);
        return push(std::move(n));
    }

    // Softmax along the last axis over unmasked entries; masked entries are
    // exactly zero. Rows with no unmasked entry come out all zero.
    Var masked_softmax(Var a, ByteMask mask) {
        const Tensor& ta = value(a);
        int r = ta.rows(), c = ta.cols();
        detail::require(mask && static_cast<std::int64_t>(mask->size()) == ta.numel(),
                        "masked_softmax: mask size mismatch");
        Tensor out(ta.shape());
        const std::uint8_t* mk = mask->data();
        for (int i = 0; i < r; ++i) {
            const double* xi = ta.ptr() + static_cast<std::size_t>(i) * c;
            const std::uint8_t* mi = mk + static_cast<std::size_t>(i) * c;
            double* oi = out.mut() + static_cast<std::size_t>(i) * c;
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < c; ++j)
                if (mi[j]) mx = std::max(mx, xi[j]);
            if (!std::isfinite(mx)) continue;  // all masked -> zeros
            double z = 0.0;
            for (int j = 0; j < c; ++j) {
                if (mi[j]) {
                    oi[j] = std::exp(xi[j] - mx);
                    z += oi[j];
                }
            }
            double inv = 1.0 / z;
            for (int j = 0; j < c; ++j) oi[j] *= inv;
        }
        Node n = make_node(Op::kMaskedSoftmax, a, Var{}, std::move(out));
        n.mask = std::move(mask);
        return push(std::move(n));
    }

    // x: [R, G*S], s: [R, G]; block g of row r is scaled by s[r,g].
    Var group_scale(Var x, Var s) {
        const Tensor& tx = value(x);
        const Tensor& ts = value(s);
        detail::require(tx.ndim() == 2 && ts.ndim() == 2 && tx.rows() == ts.rows() &&
                            tx.cols() % ts.cols() == 0,
                        "group_scale: need x [R,G*S] and s [R,G]");
        int r = tx.rows(), g = ts.cols(), span = tx.cols() / g;
        Tensor out(tx.shape());
        for (int i = 0; i < r; ++i)
            for (int k = 0; k < g; ++k) {
                double sv = ts.at(i, k);
                const double* xp = tx.ptr() + (static_cast<std::size_t>(i) * g + k) * span;
                double* op = out.mut() + (static_cast<std::size_t>(i) * g + k) * span;
                for (int j = 0; j < span; ++j) op[j] = xp[j] * sv;
            }
        Node n = make_node(Op::kGroupScale, x, s, std::move(out));
        n.groups = g;
        return push(std::move(n));
    }

    // v: [C] or [1,C] replicated into [R,C]
    Var broadcast_rows(Var v, int r) {
        const Tensor& tv = value(v);
        detail::require(tv.rows() == 1, "broadcast_rows: input must be a single row");
        int c = tv.cols();
        Tensor out({r, c});
        for (int i = 0; i < r; ++i)
            std::copy(tv.ptr(), tv.ptr() + c, out.mut() + static_cast<std::size_t>(i) * c);
        return push(make_node(Op::kBroadcastRows, v, Var{}, std::move(out)));
    }

    Var reshape(Var a, std::vector<int> shape) {
        Tensor out = value(a).clone().reshaped(std::move(shape));
        return push(make_node(Op::kReshape, a, Var{}, std::move(out)));
    }

    // half-open [start, stop) along axis 0 or 1 of a 1-d/2-d tensor
    Var slice(Var a, int axis, int start, int stop) {
        const Tensor& ta = value(a);
        detail::require(ta.ndim() >= 1 && ta.ndim() <= 2 && (axis == 0 || axis == 1),
                        "slice: only axis 0/1 of 1-d/2-d tensors");
        detail::require(ta.ndim() == 2 || axis == 0, "slice: 1-d tensors slice along axis 0");
        int r = ta.rows(), c = ta.cols();
        int extent = ta.ndim() == 1 ? static_cast<int>(ta.numel()) : (axis == 0 ? r : c);
        detail::require(0 <= start && start < stop && stop <= extent, "slice: bounds out of range");
        Tensor out;
        if (ta.ndim() == 1) {
            out = Tensor({stop - start});
            std::copy(ta.ptr() + start, ta.ptr() + stop, out.mut());
        } else if (axis == 0) {
            out = Tensor({stop - start, c});
            std::copy(ta.ptr() + static_cast<std::size_t>(start) * c,
                      ta.ptr() + static_cast<std::size_t>(stop) * c, out.mut());
        } else {
            out = Tensor({r, stop - start});
            for (int i = 0; i < r; ++i)
                std::copy(ta.ptr() + static_cast<std::size_t>(i) * c + start,
                          ta.ptr() + static_cast<std::size_t>(i) * c + stop,
                          out.mut() + static_cast<std::size_t>(i) * (stop - start));
        }
        Node n = make_node(Op::kSlice, a, Var{}, std::move(out));
        n.axis = axis;
        n.start = start;
        n.stop = stop;
        return push(std::move(n));
    }

    Var concat(const std::vector<Var>& parts, int axis) {
        detail::require(!parts.empty(), "concat: no inputs");
        detail::require(axis == 0 || axis == 1, "concat: only axis 0/1");
        const Tensor& first = value(parts[0]);
        detail::require(first.ndim() == 2, "concat: inputs must be 2-d");
        int rsum = 0, csum = 0;
        for (Var p : parts) {
            const Tensor& t = value(p);
            detail::require(t.ndim() == 2, "concat: inputs must be 2-d");
            if (axis == 0) {
                detail::require(t.cols() == first.cols(), "concat: column mismatch");
                rsum += t.rows();
            } else {
                detail::require(t.rows() == first.rows(), "concat: row mismatch");
                csum += t.cols();
            }
        }
        Tensor out = axis == 0 ? Tensor({rsum, first.cols()}) : Tensor({first.rows(), csum});
        if (axis == 0) {
            double* dst = out.mut();
            for (Var p : parts) {
                const Tensor& t = value(p);
                std::copy(t.ptr(), t.ptr() + t.numel(), dst);
                dst += t.numel();
            }
        } else {
            int off = 0;
            for (Var p : parts) {
                const Tensor& t = value(p);
                for (int i = 0; i < t.rows(); ++i)
                    std::copy(t.ptr() + static_cast<std::size_t>(i) * t.cols(),
                              t.ptr() + static_cast<std::size_t>(i + 1) * t.cols(),
                              out.mut() + static_cast<std::size_t>(i) * csum + off);
                off += t.cols();
            }
        }
        Node n = make_node(Op::kConcat, parts[0], parts.size() > 1 ? parts[1] : Var{},
                           std::move(out));
        n.axis = axis;
        for (std::size_t i = 2; i < parts.size(); ++i) n.more.push_back(parts[i].id);
        for (Var p : parts) n.needs_grad = n.needs_grad || nodes_[check(p)].needs_grad;
        return push(std::move(n));
    }

    // table: [V,d], ids in [0,V) -> [n,d]
    Var gather_rows(Var table, IntVec ids) {
        const Tensor& tt = value(table);
        detail::require(tt.ndim() == 2, "gather_rows: table must be 2-d");
        int v = tt.rows(), d = tt.cols();
        int n = static_cast<int>(ids->size());
        Tensor out({n, d});
        for (int i = 0; i < n; ++i) {
            int id = (*ids)[i];
            detail::require(0 <= id && id < v, "gather_rows: id out of range");
            std::copy(tt.ptr() + static_cast<std::size_t>(id) * d,
                      tt.ptr() + static_cast<std::size_t>(id + 1) * d,
                      out.mut() + static_cast<std::size_t>(i) * d);
        }
        Node nd = make_node(Op::kGatherRows, table, Var{}, std::move(out));
        nd.idx = std::move(ids);
        return push(std::move(nd));
    }

    // Rotary position map on [T,d] (d even): dimension pair i of row t is
    // rotated by angle (t + offset) * base^(-2i/d).
    Var rope(Var a, double base, int offset = 0) {
        const Tensor& ta = value(a);
        detail::require(ta.ndim() == 2 && ta.cols() % 2 == 0, "rope: need [T, even d]");
        int t = ta.rows(), d = ta.cols();
        Tensor out(ta.shape());
        for (int i = 0; i < t; ++i) {
            double pos = i + offset;
            for (int j = 0; j < d / 2; ++j) {
                double theta = pos * std::pow(base, -2.0 * j / d);
                double cs = std::cos(theta), sn = std::sin(theta);
                double x0 = ta.at(i, 2 * j), x1 = ta.at(i, 2 * j + 1);
                out.at(i, 2 * j) = x0 * cs - x1 * sn;
                out.at(i, 2 * j + 1) = x0 * sn + x1 * cs;
            }
        }
        Node n = make_node(Op::kRope, a, Var{}, std::move(out));
        n.c0 = base;
        n.c1 = offset;
        return push(std::move(n));
    }

    // Mean NLL over unmasked positions; zero if every position is masked.
    Var cross_entropy(Var logits, IntVec targets, ByteMask mask) {
        const Tensor& tl = value(logits);
        detail::require(tl.ndim() == 2, "cross_entropy: logits must be [T,V]");
        int t = tl.rows(), v = tl.cols();
        detail::require(static_cast<int>(targets->size()) == t &&
                            static_cast<int>(mask->size()) == t,
                        "cross_entropy: targets/mask length mismatch");
        Tensor probs(tl.shape());
        double loss = 0.0;
        int count = 0;
        for (int i = 0; i < t; ++i) {
            const double* li = tl.ptr() + static_cast<std::size_t>(i) * v;
            double* pi = probs.mut() + static_cast<std::size_t>(i) * v;
            double mx = *std::max_element(li, li + v);
            double z = 0.0;
            for (int j = 0; j < v; ++j) {
                pi[j] = std::exp(li[j] - mx);
                z += pi[j];
            }
            double inv = 1.0 / z;
            for (int j = 0; j < v; ++j) pi[j] *= inv;
            if ((*mask)[i]) {
                int y = (*targets)[i];
                detail::require(0 <= y && y < v, "cross_entropy: target out of range");
                loss += std::log(z) + mx - li[y];
                ++count;
            }
        }
        Node n = make_node(Op::kCrossEntropy, logits, Var{},
                           Tensor::scalar(count > 0 ? loss / count : 0.0));
        n.saved = std::move(probs);
        n.idx = std::move(targets);
        n.mask = std::move(mask);
        n.c0 = count;
        return push(std::move(n));
    }

    Var reduce_sum(Var a) {
        const Tensor& ta = value(a);
        double s = 0.0;
        for (std::int64_t i = 0; i < ta.numel(); ++i) s += ta.ptr()[i];
        return push(make_node(Op::kReduceSum, a, Var{}, Tensor::scalar(s)));
    }

    // Backpropagate from a scalar loss. Each leaf created with
    // requires_grad accumulates d loss / d leaf, summed over consumers.
    void backward(Var loss) {
        const Node& ln = nodes_[check(loss)];
        detail::require(ln.out.numel() == 1, "backward: loss must be scalar");
        grads_.assign(nodes_.size(), Tensor());
        grads_[loss.id] = Tensor::ones(ln.out.shape());
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.needs_grad || !grads_[id].defined()) continue;
            step_backward(n, grads_[id]);
        }
    }

private:
    struct Node {
        Op op = Op::kLeaf;
        int a = -1, b = -1;
        std::vector<int> more;
        Tensor out;
        Tensor saved;
        ByteMask mask;
        IntVec idx;
        int axis = 0, start = 0, stop = 0, groups = 1;
        double c0 = 0.0, c1 = 0.0;
        bool needs_grad = false;
    };

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;

    int check(Var v) const {
        detail::require(v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(),
                        "graph: invalid node handle");
        return v.id;
    }

    Node make_node(Op op, Var a, Var b, Tensor out) {
        Node n;
        n.op = op;
        n.a = a.valid() ? check(a) : -1;
        n.b = b.valid() ? check(b) : -1;
        n.out = std::move(out);
        n.needs_grad = (n.a >= 0 && nodes_[n.a].needs_grad) || (n.b >= 0 && nodes_[n.b].needs_grad);
        return n;
    }

    Var push(Node&& n) {
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }

    Var binary(Op op, Var a, Var b) {
        const Tensor& ta = value(a);
        const Tensor& tb = value(b);
        auto mode = detail::bcast_mode(ta, tb);
        const Tensor& big =
            (mode == detail::Bcast::kAScalar || mode == detail::Bcast::kASuffix) ? tb : ta;
        Tensor out(big.shape());
        std::int64_t na = ta.numel(), nb = tb.numel(), n = out.numel();
        const double* pa = ta.ptr();
        const double* pb = tb.ptr();
        double* po = out.mut();
        for (std::int64_t i = 0; i < n; ++i) {
            double x = pa[na == n ? i : i % na];
            double y = pb[nb == n ? i : i % nb];
            switch (op) {
                case Op::kAdd: po[i] = x + y; break;
                case Op::kSub: po[i] = x - y; break;
                case Op::kMul: po[i] = x * y; break;
                default: po[i] = x / y; break;
            }
        }
        return push(make_node(op, a, b, std::move(out)));
    }

    template <typename F>
    Var map(Op op, Var a, F&& f) {
        const Tensor& ta = value(a);
        Tensor out(ta.shape());
        for (std::int64_t i = 0; i < ta.numel(); ++i) out.mut()[i] = f(ta.ptr()[i]);
        return push(make_node(op, a, Var{}, std::move(out)));
    }

    Var unary_c(Op op, Var a, double c0, double c1) {
        const Tensor& ta = value(a);
        Tensor out(ta.shape());
        for (std::int64_t i = 0; i < ta.numel(); ++i)
            out.mut()[i] = op == Op::kMulC ? ta.ptr()[i] * c0 : ta.ptr()[i] + c0;
        Node n = make_node(op, a, Var{}, std::move(out));
        n.c0 = c0;
        n.c1 = c1;
        return push(std::move(n));
    }

    // Takes ownership of a freshly allocated gradient tensor.
    void accum(int id, Tensor g) {
        if (id < 0 || !nodes_[id].needs_grad) return;
        if (!grads_[id].defined()) {
            grads_[id] = std::move(g);
            return;
        }
        Tensor& acc = grads_[id];
        for (std::int64_t i = 0; i < acc.numel(); ++i) acc.mut()[i] += g.ptr()[i];
    }

    void add_scaled(int id, const Tensor& g, const Tensor& factor, bool negate) {
        // grad += g (*) factor with suffix/scalar broadcast reduction to input shape
        const Tensor& in = nodes_[id].out;
        Tensor full(g.shape());
        std::int64_t nf = factor.numel(), n = g.numel();
        for (std::int64_t i = 0; i < n; ++i) {
            double v = g.ptr()[i] * factor.ptr()[nf == n ? i : i % nf];
            full.mut()[i] = negate ? -v : v;
        }
        accum(id, detail::reduce_to(full, in));
    }

    void step_backward(Node& n, const Tensor& g) {
        switch (n.op) {
            case Op::kLeaf:
                break;
            case Op::kAdd: {
                if (n.a >= 0 && nodes_[n.a].needs_grad)
                    accum(n.a, detail::reduce_to(g, nodes_[n.a].out));
                if (n.b >= 0 && nodes_[n.b].needs_grad)
                    accum(n.b, detail::reduce_to(g, nodes_[n.b].out));
                break;
            }
            case Op::kSub: {
                if (n.a >= 0 && nodes_[n.a].needs_grad)
                    accum(n.a, detail::reduce_to(g, nodes_[n.a].out));
                if (n.b >= 0 && nodes_[n.b].needs_grad) {
                    Tensor gn = g.clone();
                    for (std::int64_t i = 0; i < gn.numel(); ++i) gn.mut()[i] = -gn.ptr()[i];
                    accum(n.b, detail::reduce_to(gn, nodes_[n.b].out));
                }
                break;
            }
            case Op::kMul: {
                if (n.a >= 0 && nodes_[n.a].needs_grad) add_scaled(n.a, g, nodes_[n.b].out, false);
                if (n.b >= 0 && nodes_[n.b].needs_grad) add_scaled(n.b, g, nodes_[n.a].out, false);
                break;
            }
            case Op::kDiv: {
                const Tensor& ta = nodes_[n.a].out;
                const Tensor& tb = nodes_[n.b].out;
                std::int64_t na = ta.numel(), nb = tb.numel(), nn = g.numel();
                if (nodes_[n.a].needs_grad) {
                    Tensor full(g.shape());
                    for (std::int64_t i = 0; i < nn; ++i)
                        full.mut()[i] = g.ptr()[i] / tb.ptr()[nb == nn ? i : i % nb];
                    accum(n.a, detail::reduce_to(full, ta));
                }
                if (nodes_[n.b].needs_grad) {
                    Tensor full(g.shape());
                    for (std::int64_t i = 0; i < nn; ++i) {
                        double bv = tb.ptr()[nb == nn ? i : i % nb];
                        double av = ta.ptr()[na == nn ? i : i % na];
                        full.mut()[i] = -g.ptr()[i] * av / (bv * bv);
                    }
                    accum(n.b, detail::reduce_to(full, tb));
                }
                break;
            }
            case Op::kMatmulNN: {
                const Tensor& ta = nodes_[n.a].out;
                const Tensor& tb = nodes_[n.b].out;
                int m = ta.dim(0), k = ta.dim(1), c = tb.dim(1);
                if (nodes_[n.a].needs_grad) {
                    Tensor ga({m, k});
                    detail::mm_nt(g.ptr(), tb.ptr(), ga.mut(), m, c, k);
                    accum(n.a, std::move(ga));
                }
                if (nodes_[n.b].needs_grad) {
                    Tensor gb({k, c});
                    detail::mm_tn(ta.ptr(), g.ptr(), gb.mut(), k, m, c);
                    accum(n.b, std::move(gb));
                }
                break;
            }
            case Op::kMatmulNT: {
                const Tensor& ta = nodes_[n.a].out;
                const Tensor& tb = nodes_[n.b].out;
                int m = ta.dim(0), k = ta.dim(1), c = tb.dim(0);
                if (nodes_[n.a].needs_grad) {
                    Tensor ga({m, k});
                    detail::mm_nn(g.ptr(), tb.ptr(), ga.mut(), m, c, k);
                    accum(n.a, std::move(ga));
                }
                if (nodes_[n.b].needs_grad) {
                    Tensor gb({c, k});
                    detail::mm_tn(g.ptr(), ta.ptr(), gb.mut(), c, m, k);
                    accum(n.b, std::move(gb));
                }
                break;
            }
            case Op::kExp: {
                Tensor ga(g.shape());
                for (std::int64_t i = 0; i < g.numel(); ++i)
                    ga.mut()[i] = g.ptr()[i] * n.out.ptr()[i];
                accum(n.a, std::move(ga));
                break;
            }
            case Op::kNeg: {
                Tensor ga(g.shape());
                for (std::int64_t i = 0; i < g.numel(); ++i) ga.mut()[i] = -g.ptr()[i];
                accum(n.a, std::move(ga));
                break;
            }
            case Op::kAbs: {
                const Tensor& ta = nodes_[n.a].out;
                Tensor ga(g.shape());
                for (std::int64_t i = 0; i < g.numel(); ++i) {
                    double x = ta.ptr()[i];
                    double s = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
                    ga.mut()[i] = g.ptr()[i] * s;
                }
                accum(n.a, std::move(ga));
                break;
            }
            case Op::kClamp: {
                const Tensor& ta = nodes_[n.a].out;
                Tensor ga(g.shape());
                for (std::int64_t i = 0; i < g.numel(); ++i) {
                    double x = ta.ptr()[i];
                    ga.mut()[i] = (x >= n.c0 && x <= n.c1) ? g.ptr()[i] : 0.0;
                }
                accum(n.a, std::move(ga));
                break;
            }
            case Op::kSilu: {
                const Tensor& ta = nodes_[n.a].out;
                Tensor ga(g.shape());
                for (std::int64_t i = 0; i < g.numel(); ++i) {
                    double x = ta.ptr()[i];
                    double s = detail::sigmoid(x);
                    ga.mut()[i] = g.ptr()[i] * s * (1.0 + x * (1.0 - s));
                }
                accum(n.a, std::move(ga));
                break;
            }
            case Op::kSqNormLast: {
                const Tensor& ta = nodes_[n.a].out;
                int r = ta.rows(), c = ta.cols();
                Tensor ga(ta.shape());
                for (int i = 0; i < r; ++i) {
                    double gi = g.at(i, 0);
                    for (int j = 0; j < c; ++j) ga.at(i, j) = 2.0 * ta.at(i, j) * gi;
                }
                accum(n.a, std::move(ga));
                break;
            }
            case Op::kNormalizeLast: {
                const Tensor& ta = nodes_[n.a].out;
                int r = ta.rows(), c = ta.cols();
                Tensor ga(ta.shape());
                for (int i = 0; i < r; ++i) {
                    double norm = n.saved.at(i, 0);
                    double s = norm + 1e-12;
                    const double* xi = ta.ptr() + static_cast<std::size_t>(i) * c;
                    const double* gi = g.ptr() + static_cast<std::size_t>(i) * c;
                    double* oi = ga.mut() + static_cast<std::size_t>(i) * c;
                    double dot = 0.0;
                    for (int j = 0; j < c; ++j) dot += xi[j] * gi[j];
                    double k = norm > 1e-300 ? dot / (s * s * norm) : 0.0;
                    for (int j = 0; j < c; ++j) oi[j] = gi[j] / s - xi[j] * k;
                }
                accum(n.a, std::move(ga));
                break;
            }
            case Op::kMaskedSoftmax: {
                int r = n.out.rows(), c = n.out.cols();
                Tensor ga(n.out.shape());
                const std::uint8_t* mk = n.mask->data();
                for (int i = 0; i < r; ++i) {
                    const double* yi = n.out.ptr() + static_cast<std::size_t>(i) * c;
                    const double* gi = g.ptr() + static_cast<std::size_t>(i) * c;
                    const std::uint8_t* mi = mk + static_cast<std::size_t>(i) * c;
                    double* oi = ga.mut() + static_cast<std::size_t>(i) * c;
                    double dot = 0.0;
                    for (int j = 0; j < c; ++j)
                        if (mi[j]) dot += gi[j] * yi[j];
                    for (int j = 0; j < c; ++j) oi[j] = mi[j] ? yi[j] * (gi[j] - dot) : 0.0;
                }
                accum(n.a, std::move(ga));
                break;
            }
            case Op::kGroupScale: {
                const Tensor& tx = nodes_[n.a].out;
                const Tensor& ts = nodes_[n.b].out;
                int r = tx.rows(), gg = n.groups, span = tx.cols() / gg;
                if (nodes_[n.a].needs_grad) {
                    Tensor ga(tx.shape());
                    for (int i = 0; i < r; ++i)
                        for (int k = 0; k < gg; ++k) {
                            double sv = ts.at(i, k);
                            std::size_t off = (static_cast<std::size_t>(i) * gg + k) * span;
                            for (int j = 0; j < span; ++j)
                                ga.mut()[off + j] = g.ptr()[off + j] * sv;
                        }
                    accum(n.a, std::move(ga));
                }
                if (nodes_[n.b].needs_grad) {
                    Tensor gs(ts.shape());
                    for (int i = 0; i < r; ++i)
                        for (int k = 0; k < gg; ++k) {
                            std::size_t off = (static_cast<std::size_t>(i) * gg + k) * span;
                            double dot = 0.0;
                            for (int j = 0; j < span; ++j)
                                dot += g.ptr()[off + j] * tx.ptr()[off + j];
                            gs.at(i, k) = dot;
                        }
                    accum(n.b, std::move(gs));
                }
                break;
            }
            case Op::kBroadcastRows: {
                const Tensor& tv = nodes_[n.a].out;
                int r = n.out.rows(), c = n.out.cols();
                Tensor ga(tv.shape());
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j)
                        ga.mut()[j] += g.ptr()[static_cast<std::size_t>(i) * c + j];
                accum(n.a, std::move(ga));
                break;
            }
            case Op::kReshape: {
                accum(n.a, g.clone().reshaped(nodes_[n.a].out.shape()));
                break;
            }
            case Op::kSlice: {
                const Tensor& ta = nodes_[n.a].out;
                Tensor ga(ta.shape());
                int r = ta.rows(), c = ta.cols();
                if (ta.ndim() == 1 || n.axis == 0) {
                    std::copy(g.ptr(), g.ptr() + g.numel(),
                              ga.mut() + static_cast<std::size_t>(n.start) * (ta.ndim() == 1 ? 1 : c));
                } else {
                    int w = n.stop - n.start;
                    for (int i = 0; i < r; ++i)
                        std::copy(g.ptr() + static_cast<std::size_t>(i) * w,
                                  g.ptr() + static_cast<std::size_t>(i + 1) * w,
                                  ga.mut() + static_cast<std::size_t>(i) * c + n.start);
                }
                accum(n.a, std::move(ga));
                break;
            }
            case Op::kConcat: {
                std::vector<int> parts;
                if (n.a >= 0) parts.push_back(n.a);
                if (n.b >= 0) parts.push_back(n.b);
                for (int id : n.more) parts.push_back(id);
                int cs = n.out.cols();
                int roff = 0, coff = 0;
                for (int pid : parts) {
                    const Tensor& tp = nodes_[pid].out;
                    if (nodes_[pid].needs_grad) {
                        Tensor gp(tp.shape());
                        if (n.axis == 0) {
                            std::copy(g.ptr() + static_cast<std::size_t>(roff) * cs,
                                      g.ptr() + static_cast<std::size_t>(roff + tp.rows()) * cs,
                                      gp.mut());
                        } else {
                            for (int i = 0; i < tp.rows(); ++i)
                                std::copy(g.ptr() + static_cast<std::size_t>(i) * cs + coff,
                                          g.ptr() + static_cast<std::size_t>(i) * cs + coff +
                                              tp.cols(),
                                          gp.mut() + static_cast<std::size_t>(i) * tp.cols());
                        }
                        accum(pid, std::move(gp));
                    }
                    roff += tp.rows();
                    coff += tp.cols();
                }
                break;
            }
            case Op::kGatherRows: {
                const Tensor& tt = nodes_[n.a].out;
                Tensor ga(tt.shape());
                int d = tt.cols();
                for (std::size_t i = 0; i < n.idx->size(); ++i) {
                    int id = (*n.idx)[i];
                    const double* gi = g.ptr() + i * d;
                    double* oi = ga.mut() + static_cast<std::size_t>(id) * d;
                    for (int j = 0; j < d; ++j) oi[j] += gi[j];
                }
                accum(n.a, std::move(ga));
                break;
            }
            case Op::kRope: {
                int t = n.out.rows(), d = n.out.cols();
                Tensor ga({t, d});
                for (int i = 0; i < t; ++i) {
                    double pos = i + n.c1;
                    for (int j = 0; j < d / 2; ++j) {
                        double theta = pos * std::pow(n.c0, -2.0 * j / d);
                        double cs = std::cos(theta), sn = std::sin(theta);
                        double g0 = g.at(i, 2 * j), g1 = g.at(i, 2 * j + 1);
                        ga.at(i, 2 * j) = g0 * cs + g1 * sn;
                        ga.at(i, 2 * j + 1) = -g0 * sn + g1 * cs;
                    }
                }
                accum(n.a, std::move(ga));
                break;
            }
            case Op::kCrossEntropy: {
                const Tensor& probs = n.saved;
                int t = probs.rows(), v = probs.cols();
                double count = n.c0 > 0.0 ? n.c0 : 1.0;
                double gs = g.item() / count;
                Tensor ga(probs.shape());
                for (int i = 0; i < t; ++i) {
                    if (!(*n.mask)[i]) continue;
                    int y = (*n.idx)[i];
                    const double* pi = probs.ptr() + static_cast<std::size_t>(i) * v;
                    double* oi = ga.mut() + static_cast<std::size_t>(i) * v;
                    for (int j = 0; j < v; ++j) oi[j] = gs * pi[j];
                    oi[y] -= gs;
                }
                accum(n.a, std::move(ga));
                break;
            }
            case Op::kReduceSum: {
                const Tensor& ta = nodes_[n.a].out;
                accum(n.a, Tensor::full(ta.shape(), g.item()));
                break;
            }
            case Op::kMulC: {
                Tensor ga(g.shape());
                for (std::int64_t i = 0; i < g.numel(); ++i) ga.mut()[i] = g.ptr()[i] * n.c0;
                accum(n.a, std::move(ga));
                break;
            }
            case Op::kAddC: {
                accum(n.a, g.clone());
                break;
            }
        }
    }
};

// Max over coordinates of |analytic - central difference| relative error,
// with the symmetric denominator |a| + |c| + 1e-12.
template <typename F>
double check_gradient(F&& f, const Tensor& point, double eps) {
    Graph g;
    Var x = g.leaf(point.clone(), true);
    Var loss = f(g, x);
    detail::require(g.value(loss).numel() == 1, "check_gradient: f must be scalar-valued");
    g.backward(loss);
    Tensor analytic = g.grad(x);

    double worst = 0.0;
    for (std::int64_t i = 0; i < point.numel(); ++i) {
        auto eval = [&](double delta) {
            Tensor p = point.clone();
            p.mut()[i] += delta;
            Graph h;
            Var xx = h.leaf(std::move(p), false);
            return h.value(f(h, xx)).item();
        };
        double central = (eval(eps) - eval(-eps)) / (2.0 * eps);
        double a = analytic.ptr()[i];
        double err = std::abs(a - central) / (std::abs(a) + std::abs(central) + 1e-12);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace mosaic
