#pragma once
// Decoder assembly.
//
// Main architecture: embed -> n_layers x (memory unit -> SwiGLU feed-forward),
// pre-norm residuals, final norm, untied unembedding, and no positional
// encoding of any kind. A memory unit runs, per head, two kernel associative
// memories with distinct parameters: a short-term store over the trailing
// window and a long-term store over everything up to a delay m. Their
// 2*n_heads outputs are concatenated and projected by W_out (or summed and
// projected, as a config ablation).
//
// A rotary-attention comparator with the same layer/width/FFN layout is
// selected by config.baseline; it exists purely for side-by-side studies.

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "mosaic/assoc_memory.hpp"
#include "mosaic/extractors.hpp"
#include "mosaic/graph.hpp"
#include "mosaic/masks.hpp"
#include "mosaic/rng.hpp"

namespace mosaic {

struct ModelConfig {
    int n_layers = 2;
    int d_model = 32;
    int n_heads = 2;
    int vocab_size = 64;
    int h = 16;       // short-term window length
    int m_lo = 4;     // training delay range, inclusive
    int m_hi = 16;
    int m_eval = 8;
    int max_seq_len = 256;
    int ffn_hidden = 64;
    bool combine_sum = false;   // sum head outputs instead of concatenating
    bool gated_keys = true;     // false -> time-invariant leaky keys
    double lambda_fixed = 0.5;  // decay for the time-invariant extractor
    bool baseline = false;      // rotary-attention comparator

    int d_head() const { return d_model / n_heads; }

    void validate() const {
        detail::require(n_layers >= 0 && d_model >= 1 && n_heads >= 1 && vocab_size >= 2,
                        "config: basic dimensions must be positive");
        detail::require(d_model % n_heads == 0, "config: d_model must divide by n_heads");
        detail::require(1 <= m_lo && m_lo <= m_hi && m_hi <= h,
                        "config: need 1 <= m_lo <= m_hi <= h");
        detail::require(m_eval >= 1 && m_eval < h, "config: need m_eval < h (window overlap)");
        detail::require(max_seq_len >= 2 && ffn_hidden >= 1, "config: sizes must be positive");
        detail::require(lambda_fixed > 0.0 && lambda_fixed < 1.0,
                        "config: lambda_fixed must lie in (0,1)");
    }
};

// One contextual memory of one head.
struct MemWeights {
    Tensor w_phi;     // [d_head, d_model]
    Tensor w_g;       // [1, d_model]
    Tensor w_lambda;  // [1, d_model]
    Tensor w_psi;     // [d_head, d_model]
    Tensor gamma;     // [1]
    Tensor theta;     // [3] bandwidth parameters
};

struct LayerWeights {
    std::vector<MemWeights> smem, lmem;  // per head, distinct parameters
    Tensor w_out;                        // [d_model, 2*H*d_head] (or [d_model, d_head] in sum mode)
    Tensor wq, wk, wv, wo;               // baseline attention, [d_model, d_model]
    Tensor gain1, gain2;                 // pre-norm gains, [d_model]
    Tensor w1, w2, w3;                   // SwiGLU: w1,w3 [ffn, d_model], w2 [d_model, ffn]
};

struct ModelWeights {
    ModelConfig cfg;
    Tensor embed;      // [vocab, d_model]
    Tensor unembed;    // [vocab, d_model]
    Tensor final_gain; // [d_model]
    std::vector<LayerWeights> layers;
    bool stripped = false;  // long-term memories disabled (ablation)

    // Enumerates every parameter in a fixed order. f(name, tensor&, decay):
    // decay marks participation in weight decay (matrices yes; norm gains,
    // per-head scalars gamma/theta no).
    template <typename F>
    void visit(F&& f) {
        f("embed", embed, true);
        f("unembed", unembed, true);
        f("final_gain", final_gain, false);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            LayerWeights& lw = layers[l];
            std::string p = "layers." + std::to_string(l) + ".";
            if (cfg.baseline) {
                f(p + "wq", lw.wq, true);
                f(p + "wk", lw.wk, true);
                f(p + "wv", lw.wv, true);
                f(p + "wo", lw.wo, true);
            } else {
                for (int side = 0; side < 2; ++side) {
                    auto& mems = side == 0 ? lw.smem : lw.lmem;
                    std::string sp = p + (side == 0 ? "short." : "long.");
                    for (std::size_t h = 0; h < mems.size(); ++h) {
                        std::string hp = sp + std::to_string(h) + ".";
                        f(hp + "w_phi", mems[h].w_phi, true);
                        if (cfg.gated_keys) {
                            f(hp + "w_g", mems[h].w_g, true);
                            f(hp + "w_lambda", mems[h].w_lambda, true);
                        }
                        f(hp + "w_psi", mems[h].w_psi, true);
                        f(hp + "gamma", mems[h].gamma, false);
                        f(hp + "theta", mems[h].theta, false);
                    }
                }
                f(p + "w_out", lw.w_out, true);
            }
            f(p + "gain1", lw.gain1, false);
            f(p + "gain2", lw.gain2, false);
            f(p + "w1", lw.w1, true);
            f(p + "w2", lw.w2, true);
            f(p + "w3", lw.w3, true);
        }
    }

    std::int64_t param_count() const {
        std::int64_t n = 0;
        const_cast<ModelWeights*>(this)->visit([&](const std::string& name, Tensor& t, bool) {
            if (stripped && !cfg.baseline) {
                if (name.find(".long.") != std::string::npos) return;
                if (name.size() > 6 && name.compare(name.size() - 6, 6, ".w_out") == 0 &&
                    !cfg.combine_sum) {
                    n += t.numel() / 2;  // long input columns dropped
                    return;
                }
            }
            n += t.numel();
        });
        return n;
    }
};

inline ModelWeights init_weights(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelWeights w;
    w.cfg = cfg;
    Rng rng(seed);
    const double std = 0.02;
    int dm = cfg.d_model, dh = cfg.d_head(), hh = cfg.n_heads;

    w.embed = rng.trunc_normal_tensor({cfg.vocab_size, dm}, std);
    w.unembed = rng.trunc_normal_tensor({cfg.vocab_size, dm}, std);
    w.final_gain = Tensor::ones({dm});

    auto init_mem = [&](MemWeights& m) {
        m.w_phi = rng.trunc_normal_tensor({dh, dm}, std);
        // W_g starts at zero (gate 1, pure cumulative averaging). W_lambda and
        // theta_alpha get tiny noise instead of exact zero: both sit behind
        // |.| whose subgradient at 0 is 0, and an exact-zero start would
        // freeze them permanently.
        m.w_g = Tensor::zeros({1, dm});
        m.w_lambda = rng.trunc_normal_tensor({1, dm}, std);
        m.w_psi = rng.trunc_normal_tensor({dh, dm}, std);
        m.gamma = Tensor({1}, {0.5});
        m.theta = Tensor({3}, {0.0, 0.0, rng.trunc_normal(std)});
    };

    w.layers.resize(cfg.n_layers);
    for (LayerWeights& lw : w.layers) {
        if (cfg.baseline) {
            lw.wq = rng.trunc_normal_tensor({dm, dm}, std);
            lw.wk = rng.trunc_normal_tensor({dm, dm}, std);
            lw.wv = rng.trunc_normal_tensor({dm, dm}, std);
            lw.wo = rng.trunc_normal_tensor({dm, dm}, std);
        } else {
            lw.smem.resize(hh);
            lw.lmem.resize(hh);
            for (int h = 0; h < hh; ++h) {
                init_mem(lw.smem[h]);
                init_mem(lw.lmem[h]);
            }
            int out_cols = cfg.combine_sum ? dh : 2 * hh * dh;
            lw.w_out = rng.trunc_normal_tensor({dm, out_cols}, std);
        }
        lw.gain1 = Tensor::ones({dm});
        lw.gain2 = Tensor::ones({dm});
        lw.w1 = rng.trunc_normal_tensor({cfg.ffn_hidden, dm}, std);
        lw.w2 = rng.trunc_normal_tensor({dm, cfg.ffn_hidden}, std);
        lw.w3 = rng.trunc_normal_tensor({cfg.ffn_hidden, dm}, std);
    }
    return w;
}

// Deduplicating bridge between persistent parameter tensors and graph
// leaves: each parameter becomes one leaf per graph, so gradients from all
// uses (including across batch rows) accumulate on it.
class LeafMap {
public:
    explicit LeafMap(Graph& g) : g_(&g) {}

    Var use(const Tensor& t) {
        auto it = map_.find(t.ptr());
        if (it != map_.end()) return it->second;
        Var v = g_->leaf(t, true);
        map_.emplace(t.ptr(), v);
        return v;
    }

    // Routes a parameter to an existing graph variable instead of a fresh
    // leaf; lets gradient checks differentiate with respect to one parameter.
    void bind(const Tensor& t, Var v) { map_.insert_or_assign(t.ptr(), v); }

    Tensor grad(const Tensor& t) const {
        auto it = map_.find(t.ptr());
        if (it == map_.end()) return Tensor::zeros(t.shape());
        return g_->grad(it->second);
    }

private:
    Graph* g_;
    std::unordered_map<const double*, Var> map_;
};

// RMS-style pre-normalization: x / rms(x) * gain, built from the
// unit-normalize primitive (rms(x) = |x| / sqrt(d)).
inline Var rms_norm(Graph& g, Var x, Var gain, int d) {
    return g.mul(g.mul_c(g.normalize_last(x), std::sqrt(static_cast<double>(d))), gain);
}

// SwiGLU feed-forward with residual: x + W2 (SiLU(W1 xn) . (W3 xn)).
inline Var swiglu_block(Graph& g, Var x, Var xn, Var w1, Var w2, Var w3) {
    Var hidden = g.mul(g.silu(g.matmul_nt(xn, w1)), g.matmul_nt(xn, w3));
    return g.add(x, g.matmul_nt(hidden, w2));
}

struct AttnCapture {
    // row-major [layer][head]; baseline fills `attn`, the memory model
    // fills the short/long pair
    std::vector<Tensor> short_attn, long_attn, attn;
};

namespace detail {

inline Var memory_unit(Graph& g, LeafMap& lm, const ModelWeights& w, int layer, Var x,
                       const MaskSet& ms, const std::vector<int>& doc_ids, AttnCapture* cap) {
    const ModelConfig& c = w.cfg;
    const LayerWeights& lw = w.layers[layer];
    int t = ms.seq_len, dh = c.d_head();
    Var xn = rms_norm(g, x, lm.use(lw.gain1), c.d_model);

    ByteMask smask = make_mask(ms.short_mask);
    ByteMask lmask = make_mask(ms.long_mask);

    std::vector<Var> parts;  // short heads then long heads
    for (int side = 0; side < 2; ++side) {
        const auto& mems = side == 0 ? lw.smem : lw.lmem;
        for (int head = 0; head < c.n_heads; ++head) {
            if (side == 1 && w.stripped) {
                parts.push_back(g.constant(Tensor::zeros({t, dh})));
                if (cap) cap->long_attn.push_back(Tensor::zeros({t, t}));
                continue;
            }
            const MemWeights& mw = mems[head];
            Var keys = c.gated_keys
                           ? keys_gated_rows(g, xn, lm.use(mw.w_phi), lm.use(mw.w_g),
                                             lm.use(mw.w_lambda), doc_ids)
                           : keys_v1_rows(g, xn, lm.use(mw.w_phi), c.lambda_fixed, doc_ids);
            Var values = values_rows(g, xn, lm.use(mw.w_psi), lm.use(mw.gamma));
            const auto& counts = side == 0 ? ms.short_counts : ms.long_counts;
            Var betas = bandwidth_rows(g, lm.use(mw.theta), counts);
            auto rv = retrieve_dot_rows(g, keys, keys, values, betas,
                                        side == 0 ? smask : lmask);
            parts.push_back(rv.output);
            if (cap)
                (side == 0 ? cap->short_attn : cap->long_attn).push_back(g.value(rv.weights));
        }
    }

    Var combined;
    if (c.combine_sum) {
        combined = parts[0];
        for (std::size_t i = 1; i < parts.size(); ++i) combined = g.add(combined, parts[i]);
    } else {
        combined = g.concat(parts, 1);  // [t, 2*H*dh]
    }
    return g.add(x, g.matmul_nt(combined, lm.use(lw.w_out)));
}

inline Var attention_block(Graph& g, LeafMap& lm, const ModelWeights& w, int layer, Var x,
                           const ByteMask& mask, AttnCapture* cap) {
    const ModelConfig& c = w.cfg;
    const LayerWeights& lw = w.layers[layer];
    int dh = c.d_head();
    Var xn = rms_norm(g, x, lm.use(lw.gain1), c.d_model);
    Var q = g.matmul_nt(xn, lm.use(lw.wq));
    Var k = g.matmul_nt(xn, lm.use(lw.wk));
    Var v = g.matmul_nt(xn, lm.use(lw.wv));
    std::vector<Var> heads;
    for (int head = 0; head < c.n_heads; ++head) {
        Var qh = g.rope(g.slice(q, 1, head * dh, (head + 1) * dh), 10000.0);
        Var kh = g.rope(g.slice(k, 1, head * dh, (head + 1) * dh), 10000.0);
        Var vh = g.slice(v, 1, head * dh, (head + 1) * dh);
        Var scores = g.mul_c(g.matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
        Var attn = g.masked_softmax(scores, mask);
        heads.push_back(g.matmul(attn, vh));
        if (cap) cap->attn.push_back(g.value(attn));
    }
    Var cat = heads.size() == 1 ? heads[0] : g.concat(heads, 1);
    return g.add(x, g.matmul_nt(cat, lm.use(lw.wo)));
}

}  // namespace detail

// Full forward to logits [T, vocab]. m is the long-term delay in effect.
inline Var model_logits(Graph& g, LeafMap& lm, const ModelWeights& w,
                        const std::vector<int>& tokens, const std::vector<int>& doc_ids, int m,
                        AttnCapture* cap = nullptr) {
    const ModelConfig& c = w.cfg;
    int t = static_cast<int>(tokens.size());
    detail::require(t >= 1, "model_logits: empty input");
    detail::require(static_cast<int>(doc_ids.size()) == t, "model_logits: doc_ids length");
    for (int id : tokens)
        detail::require(0 <= id && id < c.vocab_size, "model_logits: token id out of range");

    Var x = g.gather_rows(lm.use(w.embed), make_ints(tokens));

    if (c.baseline) {
        ByteMask mask = make_mask(causal_doc_mask(doc_ids));
        for (int l = 0; l < c.n_layers; ++l) {
            x = detail::attention_block(g, lm, w, l, x, mask, cap);
            Var xn = rms_norm(g, x, lm.use(w.layers[l].gain2), c.d_model);
            x = swiglu_block(g, x, xn, lm.use(w.layers[l].w1), lm.use(w.layers[l].w2),
                             lm.use(w.layers[l].w3));
        }
    } else {
        MaskSet ms = build_masks(t, c.h, m, doc_ids);
        for (int l = 0; l < c.n_layers; ++l) {
            x = detail::memory_unit(g, lm, w, l, x, ms, doc_ids, cap);
            Var xn = rms_norm(g, x, lm.use(w.layers[l].gain2), c.d_model);
            x = swiglu_block(g, x, xn, lm.use(w.layers[l].w1), lm.use(w.layers[l].w2),
                             lm.use(w.layers[l].w3));
        }
    }
    Var xf = rms_norm(g, x, lm.use(w.final_gain), c.d_model);
    return g.matmul_nt(xf, lm.use(w.unembed));
}

// Returns a copy with long-term memories disabled: forward treats every
// long-term retrieval as zero, and (in concat mode) the corresponding
// W_out columns are zeroed so the weights are self-describing on disk.
inline ModelWeights strip_long_term(const ModelWeights& w) {
    ModelWeights out = w;
    out.stripped = true;
    if (w.cfg.baseline || w.cfg.combine_sum) return out;
    int dh = w.cfg.d_head(), hh = w.cfg.n_heads;
    for (LayerWeights& lw : out.layers) {
        Tensor z = lw.w_out.clone();
        for (int r = 0; r < z.rows(); ++r)
            for (int col = hh * dh; col < 2 * hh * dh; ++col) z.at(r, col) = 0.0;
        lw.w_out = std::move(z);
    }
    return out;
}

// Analytic flops/token: 2 flops per multiply-accumulate in every matmul the
// token passes through, plus 2 * n_visible * d_head per head per memory per
// position for retrieval, plus the d_model-wide embedding row copy.
// Retrieval visibility is evaluated on a single document of seq_len tokens
// at delay m_eval. Elementwise norm/gate work is excluded (not matmuls).
inline double estimate_flops(const ModelConfig& c, int seq_len, bool stripped = false) {
    double dm = c.d_model, dh = c.d_head(), hh = c.n_heads, v = c.vocab_size;
    double per_token = dm;  // embedding lookup
    double retr_total = 0.0;

    if (c.n_layers > 0) {
        std::vector<int> docs(seq_len, 0);
        if (c.baseline) {
            for (int t = 0; t < seq_len; ++t) retr_total += 2.0 * (t + 1) * dh * hh;
            per_token += c.n_layers * (4.0 * 2.0 * dm * dm);
        } else {
            MaskSet ms = build_masks(seq_len, c.h, c.m_eval, docs);
            double short_vis = 0.0, long_vis = 0.0;
            for (int t = 0; t < seq_len; ++t) {
                short_vis += ms.short_counts[t];
                long_vis += ms.long_counts[t];
            }
            retr_total = 2.0 * dh * hh * (short_vis + (stripped ? 0.0 : long_vis));
            double proj_per_mem = 2.0 * (2.0 * dh * dm) + (c.gated_keys ? 2.0 * 2.0 * dm : 0.0);
            double mems = stripped ? 1.0 : 2.0;
            double out_cols = c.combine_sum ? dh : (stripped ? 1.0 : 2.0) * hh * dh;
            per_token += c.n_layers * (hh * mems * proj_per_mem + 2.0 * dm * out_cols);
        }
        per_token += c.n_layers * (2.0 * 3.0 * c.ffn_hidden * dm);
        per_token += c.n_layers * retr_total / seq_len;
    }
    per_token += 2.0 * v * dm;  // unembed
    return per_token;
}

}  // namespace mosaic
