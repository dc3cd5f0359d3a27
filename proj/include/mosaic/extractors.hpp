#pragma once
// Key and value feature extractors.
//
// Keys come from a leaky-integrator recurrence over projected inputs:
//
//   v1 (time-invariant):  kbar_T = W_phi x_T + lambda * kbar_{T-1}
//   gated (time-variant): kbar_T = g_T * (W_phi x_T) + lambda_T * kbar_{T-1}
//       g_T      = exp(clamp(W_g x_T, -30, 30))       > 0
//       lambda_T = exp(-|W_lambda x_T|)               in (0, 1]
//
// with kbar_0 = 0, emitted key k_T = L2-normalize(kbar_T). Values blend a
// projection of the current and next input:
//
//   v_T = L2-normalize(gamma * W_psi x_T + (1-gamma) * W_psi x_{T+1})
//
// where the lookahead past the end is zero. The recurrence restarts at
// document boundaries so packed documents stay independent.
//
// Graph-side variants compute the whole sequence in closed form: the
// product of decays telescopes through cumulative sums of log(lambda_t),
// giving key matrices as one [T,T] weighting of the projected inputs.

#include <cmath>
#include <vector>

#include "mosaic/graph.hpp"
#include "mosaic/tensor.hpp"

namespace mosaic {

constexpr double kGateClampLo = -30.0;
constexpr double kGateClampHi = 30.0;

// Scalar forms of the gate and decay (single source of truth for the
// clamp/abs conventions; the graph path applies the same ops).
inline double gate_scalar(double preact) {
    return std::exp(std::min(kGateClampHi, std::max(kGateClampLo, preact)));
}
inline double decay_scalar(double preact) { return std::exp(-std::abs(preact)); }

struct ExtractorWeights {
    Tensor w_phi;     // [d_head, d_model] key projection
    Tensor w_g;       // [1, d_model] gate
    Tensor w_lambda;  // [1, d_model] decay
    Tensor w_psi;     // [d_head, d_model] value projection
    double gamma = 0.5;         // value blend
    double lambda_fixed = 0.5;  // v1 decay, in (0,1)
};

namespace detail {

inline void normalize_rows(Tensor& t) {
    int r = t.rows(), c = t.cols();
    for (int i = 0; i < r; ++i) {
        double s = 0.0;
        for (int j = 0; j < c; ++j) s += t.at(i, j) * t.at(i, j);
        double inv = 1.0 / (std::sqrt(s) + 1e-12);
        for (int j = 0; j < c; ++j) t.at(i, j) *= inv;
    }
}

inline double row_dot(const Tensor& w, const Tensor& x, int t) {
    double s = 0.0;
    for (int j = 0; j < x.cols(); ++j) s += w.at(0, j) * x.at(t, j);
    return s;
}

// y[t,:] = W x[t,:]
inline Tensor project(const Tensor& x, const Tensor& w) {
    Tensor y({x.rows(), w.rows()});
    mm_nt(x.ptr(), w.ptr(), y.mut(), x.rows(), x.cols(), w.rows());
    return y;
}

inline bool restart_at(const std::vector<int>* doc_ids, int t) {
    return doc_ids && t > 0 && (*doc_ids)[t] != (*doc_ids)[t - 1];
}

}  // namespace detail

// x: [L, d_model] -> unit-norm keys [L, d_head]. kbar_io, when given,
// carries the recurrent state in and out (for the shift-consistency
// property and streaming use); doc_ids restart the recurrence per document.
inline Tensor extract_keys_v1(const Tensor& x, const ExtractorWeights& w,
                              Tensor* kbar_io = nullptr,
                              const std::vector<int>* doc_ids = nullptr) {
    // lambda_fixed is kept in (0,1) by config validation; the op itself
    // tolerates the degenerate 0 and 1 endpoints (used as test limits).
    detail::require(x.rows() >= 1, "extract_keys_v1: empty sequence");
    int l = x.rows(), d = w.w_phi.rows();
    Tensor ktil = detail::project(x, w.w_phi);
    Tensor kbar = kbar_io && kbar_io->defined() ? kbar_io->clone() : Tensor::zeros({d});
    Tensor out({l, d});
    for (int t = 0; t < l; ++t) {
        if (detail::restart_at(doc_ids, t))
            for (int j = 0; j < d; ++j) kbar.at(j) = 0.0;
        for (int j = 0; j < d; ++j) kbar.at(j) = ktil.at(t, j) + w.lambda_fixed * kbar.at(j);
        for (int j = 0; j < d; ++j) out.at(t, j) = kbar.at(j);
    }
    detail::normalize_rows(out);
    if (kbar_io) *kbar_io = kbar;
    return out;
}

inline Tensor extract_keys_gated(const Tensor& x, const ExtractorWeights& w,
                                 Tensor* kbar_io = nullptr,
                                 const std::vector<int>* doc_ids = nullptr) {
    detail::require(x.rows() >= 1, "extract_keys_gated: empty sequence");
    int l = x.rows(), d = w.w_phi.rows();
    Tensor ktil = detail::project(x, w.w_phi);
    Tensor kbar = kbar_io && kbar_io->defined() ? kbar_io->clone() : Tensor::zeros({d});
    Tensor out({l, d});
    for (int t = 0; t < l; ++t) {
        if (detail::restart_at(doc_ids, t))
            for (int j = 0; j < d; ++j) kbar.at(j) = 0.0;
        double g = gate_scalar(detail::row_dot(w.w_g, x, t));
        double lam = decay_scalar(detail::row_dot(w.w_lambda, x, t));
        for (int j = 0; j < d; ++j) kbar.at(j) = g * ktil.at(t, j) + lam * kbar.at(j);
        for (int j = 0; j < d; ++j) out.at(t, j) = kbar.at(j);
    }
    detail::normalize_rows(out);
    if (kbar_io) *kbar_io = kbar;
    return out;
}

inline Tensor extract_values(const Tensor& x, const ExtractorWeights& w) {
    detail::require(x.rows() >= 1, "extract_values: empty sequence");
    int l = x.rows(), d = w.w_psi.rows();
    Tensor vtil = detail::project(x, w.w_psi);
    Tensor out({l, d});
    for (int t = 0; t < l; ++t)
        for (int j = 0; j < d; ++j) {
            double next = t + 1 < l ? vtil.at(t + 1, j) : 0.0;
            out.at(t, j) = w.gamma * vtil.at(t, j) + (1.0 - w.gamma) * next;
        }
    detail::normalize_rows(out);
    return out;
}

// ---- graph-side (differentiable) forms ----

namespace detail {

// Lower-triangular same-document weights: allow[t,s] = 1 iff s <= t and the
// positions share a document.
inline Tensor same_doc_lower(const std::vector<int>& doc_ids) {
    int l = static_cast<int>(doc_ids.size());
    Tensor m({l, l});
    for (int t = 0; t < l; ++t)
        for (int s = 0; s <= t; ++s)
            if (doc_ids[s] == doc_ids[t]) m.at(t, s) = 1.0;
    return m;
}

}  // namespace detail

// Gated keys over the whole sequence: unit-norm [T, d_head].
// kbar_T = sum_{s<=T} exp(cl_T - cl_s) g_s ktil_s with cl the running sum of
// log lambda, evaluated only within the same document.
inline Var keys_gated_rows(Graph& g, Var x, Var w_phi, Var w_g, Var w_lambda,
                           const std::vector<int>& doc_ids) {
    const Tensor& tx = g.value(x);
    int l = tx.rows();
    detail::require(static_cast<int>(doc_ids.size()) == l, "keys_gated_rows: doc_ids length");

    Var ktil = g.matmul_nt(x, w_phi);                                   // [T, d_head]
    Var gate = g.exp(g.clamp(g.matmul_nt(x, w_g), kGateClampLo, kGateClampHi));  // [T,1]
    Var loglam = g.neg(g.abs(g.matmul_nt(x, w_lambda)));                // [T,1], <= 0

    // cumulative log-decay: cl_t = sum_{s<=t} log lambda_s
    Tensor lower({l, l});
    for (int t = 0; t < l; ++t)
        for (int s = 0; s <= t; ++s) lower.at(t, s) = 1.0;
    Var cl = g.matmul(g.constant(std::move(lower)), loglam);            // [T,1]

    // exponent E[t,s] = cl_t - cl_s, masked so disallowed cells sit at -1e6
    // before the exp (E is only guaranteed <= 0 inside the allowed region).
    Tensor allow = detail::same_doc_lower(doc_ids);
    Tensor penalty({l, l});
    for (std::int64_t i = 0; i < penalty.numel(); ++i)
        penalty.mut()[i] = allow.ptr()[i] > 0.0 ? 0.0 : -1e6;
    Var col = g.matmul(cl, g.constant(Tensor::ones({1, l})));           // cl_t per row
    Var row = g.matmul(g.constant(Tensor::ones({l, 1})), g.reshape(cl, {1, l}));
    Var e = g.add(g.mul(g.sub(col, row), g.constant(allow)), g.constant(std::move(penalty)));
    Var decay = g.exp(e);                                               // [T,T]

    // scale column s by gate_s, then weight the projected inputs
    Var weights = g.mul(decay, g.reshape(gate, {l}));                   // suffix broadcast
    return g.normalize_last(g.matmul(weights, ktil));
}

// v1 keys: constant decay powers, no gate.
inline Var keys_v1_rows(Graph& g, Var x, Var w_phi, double lambda_fixed,
                        const std::vector<int>& doc_ids) {
    const Tensor& tx = g.value(x);
    int l = tx.rows();
    Tensor weights({l, l});
    for (int t = 0; t < l; ++t)
        for (int s = 0; s <= t; ++s)
            if (doc_ids[s] == doc_ids[t]) weights.at(t, s) = std::pow(lambda_fixed, t - s);
    Var ktil = g.matmul_nt(x, w_phi);
    return g.normalize_last(g.matmul(g.constant(std::move(weights)), ktil));
}

// Values with one-step lookahead; gamma is a learnable [1] leaf.
inline Var values_rows(Graph& g, Var x, Var w_psi, Var gamma) {
    const Tensor& tx = g.value(x);
    int l = tx.rows();
    Var vtil = g.matmul_nt(x, w_psi);  // [T, d_head]
    int d = g.value(vtil).cols();
    Var shifted;
    if (l > 1) {
        Var tail = g.slice(vtil, 0, 1, l);
        shifted = g.concat({tail, g.constant(Tensor::zeros({1, d}))}, 0);
    } else {
        shifted = g.constant(Tensor::zeros({1, d}));
    }
    Var one_minus = g.sub(g.constant(1.0), gamma);
    Var blend = g.add(g.mul(vtil, gamma), g.mul(shifted, one_minus));
    return g.normalize_last(blend);
}

}  // namespace mosaic
