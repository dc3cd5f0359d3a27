#pragma once
// Kernel-regression associative memory.
//
// A store holds (key, value) pairs; retrieval is a softmax-weighted average
// of values, with logits given either by scaled dot products (the runtime
// form, keys unit-norm) or by negated scaled squared distances (the
// reference form; on unit-norm keys the two agree under beta -> 2*beta).
// The bandwidth beta grows with the number of visible pairs:
//
//   beta(n) = beta1 * n^alpha + beta0,
//   beta0 = e^theta0, beta1 = e^theta1, alpha = e^{-|theta_alpha|}
//
// so beta stays positive and alpha stays in (0, 1] for any real thetas.

#include <cmath>
#include <cstdio>
#include <vector>

#include "mosaic/graph.hpp"
#include "mosaic/tensor.hpp"

namespace mosaic {

struct BandwidthParams {
    double theta0 = 0.0;
    double theta1 = 0.0;
    double theta_alpha = 0.0;

    double beta0() const { return std::exp(theta0); }
    double beta1() const { return std::exp(theta1); }
    double alpha() const { return std::exp(-std::abs(theta_alpha)); }
};

inline double bandwidth(int n, const BandwidthParams& p) {
    detail::require(n >= 1, "bandwidth: n must be >= 1");
    return p.beta1() * std::pow(n, p.alpha()) + p.beta0();
}

struct MemoryStore {
    Tensor keys;    // [n, d_head]
    Tensor values;  // [n, d_head]
    std::vector<std::uint8_t> valid;  // visible-to-this-query flags

    int size() const { return keys.defined() ? keys.rows() : 0; }

    int valid_count() const {
        int c = 0;
        for (std::uint8_t v : valid) c += v ? 1 : 0;
        return c;
    }

    bool keys_unit_norm(double tol = 1e-6) const {
        for (int i = 0; i < size(); ++i) {
            if (!valid[i]) continue;
            double s = 0.0;
            for (int j = 0; j < keys.cols(); ++j) s += keys.at(i, j) * keys.at(i, j);
            if (std::abs(std::sqrt(s) - 1.0) > tol) return false;
        }
        return true;
    }
};

namespace detail {

inline void check_unit(const char* who, bool ok) {
    if (ok) return;
#ifndef NDEBUG
    throw std::invalid_argument(std::string(who) + ": expected unit-norm vectors");
#else
    std::fprintf(stderr, "warning: %s called with non-unit vectors\n", who);
#endif
}

inline std::vector<double> masked_softmax_1d(const std::vector<double>& logits,
                                             const std::vector<std::uint8_t>& valid) {
    std::vector<double> w(logits.size(), 0.0);
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < logits.size(); ++i)
        if (valid[i]) mx = std::max(mx, logits[i]);
    if (!std::isfinite(mx)) return w;  // nothing visible
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i)
        if (valid[i]) {
            w[i] = std::exp(logits[i] - mx);
            z += w[i];
        }
    for (double& x : w) x /= z;
    return w;
}

}  // namespace detail

// Softmax weights of the dot-product retrieval; all zeros for an empty store.
inline std::vector<double> attention_weights(const Tensor& query, const MemoryStore& store,
                                             double beta) {
    int n = store.size(), d = store.keys.defined() ? store.keys.cols() : 0;
    std::vector<double> logits(n, 0.0);
    for (int i = 0; i < n; ++i) {
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += query.at(j) * store.keys.at(i, j);
        logits[i] = beta * dot;
    }
    return detail::masked_softmax_1d(logits, store.valid);
}

// Eq-style dot-product retrieval: sum_i softmax_i(beta * q.k_i) * v_i.
inline Tensor retrieve_dot(const Tensor& query, const MemoryStore& store, double beta) {
    int d = query.cols();
    double qn = 0.0;
    for (int j = 0; j < d; ++j) qn += query.at(j) * query.at(j);
    detail::check_unit("retrieve_dot", std::abs(std::sqrt(qn) - 1.0) <= 1e-6 &&
                                           store.keys_unit_norm());
    Tensor out({d});
    std::vector<double> w = attention_weights(query, store, beta);
    for (int i = 0; i < store.size(); ++i) {
        if (w[i] == 0.0) continue;
        for (int j = 0; j < d; ++j) out.mut()[j] += w[i] * store.values.at(i, j);
    }
    return out;
}

// Distance-kernel retrieval: sum_i softmax_i(-beta * ||q - k_i||^2) * v_i.
// Reference form; no unit-norm requirement.
inline Tensor retrieve_distance(const Tensor& query, const MemoryStore& store, double beta) {
    int n = store.size(), d = query.cols();
    std::vector<double> logits(n, 0.0);
    for (int i = 0; i < n; ++i) {
        double dist2 = 0.0;
        for (int j = 0; j < d; ++j) {
            double diff = query.at(j) - store.keys.at(i, j);
            dist2 += diff * diff;
        }
        logits[i] = -beta * dist2;
    }
    std::vector<double> w = detail::masked_softmax_1d(logits, store.valid);
    Tensor out({d});
    for (int i = 0; i < n; ++i) {
        if (w[i] == 0.0) continue;
        for (int j = 0; j < d; ++j) out.mut()[j] += w[i] * store.values.at(i, j);
    }
    return out;
}

// Graph-side bandwidth schedule. theta is a [3] leaf (theta0, theta1,
// theta_alpha); counts[i] is the number of pairs visible to query row i.
// Rows with count 0 are fully masked downstream, so they borrow ln(1).
inline Var bandwidth_rows(Graph& g, Var theta, const std::vector<int>& counts) {
    int t = static_cast<int>(counts.size());
    Tensor lnn({t, 1});
    for (int i = 0; i < t; ++i) lnn.at(i, 0) = std::log(std::max(1, counts[i]));
    Var th0 = g.slice(theta, 0, 0, 1);
    Var th1 = g.slice(theta, 0, 1, 2);
    Var tha = g.slice(theta, 0, 2, 3);
    Var alpha = g.exp(g.neg(g.abs(tha)));                       // [1]
    Var pow_term = g.exp(g.add(g.mul(g.constant(std::move(lnn)), alpha), th1));
    return g.add(pow_term, g.exp(th0));                         // [t,1]
}

struct RetrievalVars {
    Var output;   // [t, d_head]
    Var weights;  // [t, n] softmax weights (zeros where masked)
};

// Batched dot-product retrieval inside the graph: one query per row of q,
// shared key/value rows, per-row beta, and a [t*n] visibility mask.
inline RetrievalVars retrieve_dot_rows(Graph& g, Var q, Var k, Var v, Var betas, ByteMask mask) {
    Var scores = g.matmul_nt(q, k);               // [t, n]
    Var scaled = g.group_scale(scores, betas);    // row i scaled by beta_i
    Var w = g.masked_softmax(scaled, std::move(mask));
    return {g.matmul(w, v), w};
}

}  // namespace mosaic
