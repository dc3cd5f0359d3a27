// Model assembly: mask construction, graph forward vs the straight-line
// reference, golden logits, causality, stripping, flops accounting, and a
// full end-to-end gradient check on a sub-1k-parameter model.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "mosaic/model.hpp"
#include "naive_model.hpp"

using namespace mosaic;

namespace {

// Overwrites every parameter with values that exercise gates, decays and
// bandwidths; init_weights starts too close to the identity regime.
void randomize(ModelWeights& w, Rng& rng) {
    w.visit([&](const std::string& name, Tensor& t, bool) {
        if (name.size() >= 6 && name.compare(name.size() - 6, 6, ".gamma") == 0) {
            t = Tensor({1}, {rng.uniform(0.2, 0.8)});
        } else if (name.size() >= 6 && name.compare(name.size() - 6, 6, ".theta") == 0) {
            t = rng.normal_tensor({3}, 0.3);
        } else {
            Tensor fresh(t.shape());
            for (std::int64_t i = 0; i < fresh.numel(); ++i)
                fresh.mut()[i] = rng.normal(0.0, 0.25);
            t = std::move(fresh);
        }
    });
}

Tensor graph_forward(const ModelWeights& w, const std::vector<int>& tokens,
                     const std::vector<int>& docs, int m, AttnCapture* cap = nullptr) {
    Graph g;
    LeafMap lm(g);
    Var logits = model_logits(g, lm, w, tokens, docs, m, cap);
    return g.value(logits).clone();
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    REQUIRE(a.same_shape(b));
    double worst = 0.0;
    for (std::int64_t i = 0; i < a.numel(); ++i)
        worst = std::max(worst, std::abs(a.ptr()[i] - b.ptr()[i]));
    return worst;
}

bool bitwise_equal_rows(const Tensor& a, const Tensor& b, int row_begin, int row_end) {
    for (int r = row_begin; r < row_end; ++r)
        for (int c = 0; c < a.cols(); ++c)
            if (a.at(r, c) != b.at(r, c)) return false;
    return true;
}

ModelConfig tiny_cfg() {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 8;
    c.n_heads = 2;
    c.vocab_size = 12;
    c.h = 4;
    c.m_lo = 1;
    c.m_hi = 4;
    c.m_eval = 2;
    c.max_seq_len = 16;
    c.ffn_hidden = 12;
    return c;
}

}  // namespace

TEST_CASE("window masks match hand-enumerated visibility") {
    SECTION("single document, h=4, m=2, T=10") {
        std::vector<int> docs(10, 0);
        MaskSet ms = build_masks(10, 4, 2, docs);
        // query at the last position: short window covers the previous h-1
        // positions, long covers everything up to the delay m
        for (int i = 0; i < 10; ++i) {
            CHECK(ms.short_mask[9 * 10 + i] == (i >= 6 && i <= 8 ? 1 : 0));
            CHECK(ms.long_mask[9 * 10 + i] == (i <= 7 ? 1 : 0));
        }
        CHECK(ms.short_counts[9] == 3);
        CHECK(ms.long_counts[9] == 8);
        // first position sees nothing anywhere
        for (int i = 0; i < 10; ++i) {
            CHECK(ms.short_mask[i] == 0);
            CHECK(ms.long_mask[i] == 0);
        }
        CHECK(ms.short_counts[0] == 0);
        CHECK(ms.long_counts[0] == 0);
        // brute-force the whole grid from the definition
        for (int t = 0; t < 10; ++t)
            for (int i = 0; i < 10; ++i) {
                bool s = i >= t - 4 + 1 && i <= t - 1;
                bool l = i <= t - 2;
                CHECK(ms.short_mask[t * 10 + i] == (s ? 1 : 0));
                CHECK(ms.long_mask[t * 10 + i] == (l ? 1 : 0));
            }
    }

    SECTION("m=1 with h >= T makes both windows identical") {
        std::vector<int> docs(6, 0);
        MaskSet ms = build_masks(6, 8, 1, docs);
        CHECK(ms.short_mask == ms.long_mask);
        CHECK(ms.short_counts == ms.long_counts);
    }

    SECTION("document boundaries cut visibility") {
        std::vector<int> docs = {0, 0, 0, 1, 1};
        MaskSet ms = build_masks(5, 4, 1, docs);
        // first token of the second document sees nothing
        for (int i = 0; i < 5; ++i) {
            CHECK(ms.short_mask[3 * 5 + i] == 0);
            CHECK(ms.long_mask[3 * 5 + i] == 0);
        }
        // second token of the second document sees only position 3
        for (int i = 0; i < 5; ++i) {
            CHECK(ms.short_mask[4 * 5 + i] == (i == 3 ? 1 : 0));
            CHECK(ms.long_mask[4 * 5 + i] == (i == 3 ? 1 : 0));
        }
    }

    SECTION("single position has empty windows") {
        std::vector<int> docs = {0};
        MaskSet ms = build_masks(1, 4, 2, docs);
        CHECK(ms.short_counts[0] == 0);
        CHECK(ms.long_counts[0] == 0);
    }

    SECTION("delay bounds are enforced") {
        std::vector<int> docs(4, 0);
        CHECK_THROWS(build_masks(4, 4, 0, docs));
        CHECK_THROWS(build_masks(4, 4, 5, docs));
        CHECK_THROWS(build_masks(4, 4, 2, std::vector<int>(3, 0)));
    }

    SECTION("causal same-document mask") {
        std::vector<int> docs = {0, 0, 1, 1};
        auto m = causal_doc_mask(docs);
        std::vector<std::uint8_t> want = {1, 0, 0, 0,   //
                                          1, 1, 0, 0,   //
                                          0, 0, 1, 0,   //
                                          0, 0, 1, 1};
        CHECK(m == want);
    }
}

TEST_CASE("graph forward matches the straight-line reference") {
    Rng rng(7);
    std::vector<int> tokens = {1, 5, 7, 5, 2, 9, 5};
    std::vector<int> docs = {0, 0, 0, 1, 1, 1, 1};

    SECTION("gated keys, concat combine") {
        ModelConfig c = tiny_cfg();
        ModelWeights w = init_weights(c, 1);
        randomize(w, rng);
        CHECK(max_abs_diff(graph_forward(w, tokens, docs, 2),
                           naive::forward(w, tokens, docs, 2)) < 1e-9);
    }

    SECTION("time-invariant keys") {
        ModelConfig c = tiny_cfg();
        c.gated_keys = false;
        c.lambda_fixed = 0.37;
        ModelWeights w = init_weights(c, 2);
        randomize(w, rng);
        CHECK(max_abs_diff(graph_forward(w, tokens, docs, 1),
                           naive::forward(w, tokens, docs, 1)) < 1e-9);
    }

    SECTION("sum combine") {
        ModelConfig c = tiny_cfg();
        c.combine_sum = true;
        ModelWeights w = init_weights(c, 3);
        randomize(w, rng);
        CHECK(max_abs_diff(graph_forward(w, tokens, docs, 3),
                           naive::forward(w, tokens, docs, 3)) < 1e-9);
    }

    SECTION("rotary attention baseline") {
        ModelConfig c = tiny_cfg();
        c.baseline = true;
        ModelWeights w = init_weights(c, 4);
        randomize(w, rng);
        CHECK(max_abs_diff(graph_forward(w, tokens, docs, 2),
                           naive::forward(w, tokens, docs, 2)) < 1e-9);
    }

    SECTION("stripped long-term memory") {
        ModelConfig c = tiny_cfg();
        ModelWeights w = init_weights(c, 5);
        randomize(w, rng);
        ModelWeights ws = strip_long_term(w);
        CHECK(max_abs_diff(graph_forward(ws, tokens, docs, 2),
                           naive::forward(ws, tokens, docs, 2)) < 1e-9);
    }

    SECTION("single token") {
        ModelConfig c = tiny_cfg();
        ModelWeights w = init_weights(c, 6);
        randomize(w, rng);
        std::vector<int> one = {3}, doc = {0};
        CHECK(max_abs_diff(graph_forward(w, one, doc, 1),
                           naive::forward(w, one, doc, 1)) < 1e-9);
    }
}

TEST_CASE("first position retrieves nothing and leaves the residual intact") {
    ModelConfig c = tiny_cfg();
    c.n_layers = 1;
    Rng rng(11);
    ModelWeights w = init_weights(c, 7);
    randomize(w, rng);
    std::vector<int> one = {4}, doc = {0};

    AttnCapture cap;
    Tensor with_mem = graph_forward(w, one, doc, 1, &cap);
    for (const Tensor& a : cap.short_attn)
        CHECK(a.at(0, 0) == 0.0);
    for (const Tensor& a : cap.long_attn)
        CHECK(a.at(0, 0) == 0.0);

    // zeroing the output projection must not change anything: the memory
    // unit already contributes exactly zero at the first position
    ModelWeights wz = w;
    wz.layers[0].w_out = Tensor::zeros(w.layers[0].w_out.shape());
    Tensor without = graph_forward(wz, one, doc, 1);
    CHECK(max_abs_diff(with_mem, without) == 0.0);
}

TEST_CASE("short and long stores coincide when windows fully overlap") {
    // m=1 with h >= T gives identical visibility; sharing parameters between
    // the two stores must then give bitwise-identical attention
    ModelConfig c = tiny_cfg();
    c.n_layers = 1;
    c.h = 16;
    c.m_hi = 2;
    c.m_eval = 1;
    Rng rng(13);
    ModelWeights w = init_weights(c, 8);
    randomize(w, rng);
    for (int h = 0; h < c.n_heads; ++h) w.layers[0].lmem[h] = w.layers[0].smem[h];

    std::vector<int> tokens = {2, 4, 6, 8, 10, 1};
    std::vector<int> docs(6, 0);
    AttnCapture cap;
    graph_forward(w, tokens, docs, 1, &cap);
    REQUIRE(cap.short_attn.size() == cap.long_attn.size());
    for (std::size_t i = 0; i < cap.short_attn.size(); ++i)
        CHECK(max_abs_diff(cap.short_attn[i], cap.long_attn[i]) == 0.0);
}

TEST_CASE("attention capture rows are distributions") {
    ModelConfig c = tiny_cfg();
    Rng rng(17);
    ModelWeights w = init_weights(c, 9);
    randomize(w, rng);
    std::vector<int> tokens = {1, 2, 3, 4, 5, 6, 7, 8};
    std::vector<int> docs = {0, 0, 0, 0, 1, 1, 1, 1};
    AttnCapture cap;
    graph_forward(w, tokens, docs, 2, &cap);
    MaskSet ms = build_masks(8, c.h, 2, docs);

    REQUIRE(cap.short_attn.size() == static_cast<std::size_t>(c.n_layers * c.n_heads));
    for (const Tensor& a : cap.short_attn)
        for (int t = 0; t < 8; ++t) {
            double s = 0.0;
            for (int i = 0; i < 8; ++i) s += a.at(t, i);
            CHECK(s == Catch::Approx(ms.short_counts[t] > 0 ? 1.0 : 0.0).margin(1e-12));
        }
    for (const Tensor& a : cap.long_attn)
        for (int t = 0; t < 8; ++t) {
            double s = 0.0;
            for (int i = 0; i < 8; ++i) s += a.at(t, i);
            CHECK(s == Catch::Approx(ms.long_counts[t] > 0 ? 1.0 : 0.0).margin(1e-12));
        }
}

TEST_CASE("future tokens cannot influence earlier logits") {
    Rng rng(19);
    std::vector<int> tokens = {1, 5, 7, 5, 2, 9, 5, 7, 11, 3};
    std::vector<int> tokens2 = tokens;
    tokens2[6] = 8;
    tokens2[8] = 1;
    tokens2[9] = 10;
    std::vector<int> docs = {0, 0, 0, 0, 0, 1, 1, 1, 1, 1};

    SECTION("memory model") {
        ModelWeights w = init_weights(tiny_cfg(), 10);
        randomize(w, rng);
        Tensor a = graph_forward(w, tokens, docs, 2);
        Tensor b = graph_forward(w, tokens2, docs, 2);
        CHECK(bitwise_equal_rows(a, b, 0, 6));
        CHECK_FALSE(bitwise_equal_rows(a, b, 6, 10));
    }

    SECTION("baseline") {
        ModelConfig c = tiny_cfg();
        c.baseline = true;
        ModelWeights w = init_weights(c, 10);
        randomize(w, rng);
        Tensor a = graph_forward(w, tokens, docs, 2);
        Tensor b = graph_forward(w, tokens2, docs, 2);
        CHECK(bitwise_equal_rows(a, b, 0, 6));
        CHECK_FALSE(bitwise_equal_rows(a, b, 6, 10));
    }
}

TEST_CASE("golden logits stay pinned") {
    std::ifstream in(std::string(TEST_DATA_DIR) + "/golden_logits.json");
    REQUIRE(in.good());
    nlohmann::json j;
    in >> j;

    ModelConfig c;
    c.n_layers = j["config"]["n_layers"];
    c.d_model = j["config"]["d_model"];
    c.n_heads = j["config"]["n_heads"];
    c.vocab_size = j["config"]["vocab_size"];
    c.h = j["config"]["h"];
    c.m_lo = j["config"]["m_lo"];
    c.m_hi = j["config"]["m_hi"];
    c.m_eval = j["config"]["m_eval"];
    c.max_seq_len = j["config"]["max_seq_len"];
    c.ffn_hidden = j["config"]["ffn_hidden"];

    ModelWeights w = init_weights(c, j["seed"].get<std::uint64_t>());
    std::vector<int> tokens = j["tokens"].get<std::vector<int>>();
    std::vector<int> docs = j["doc_ids"].get<std::vector<int>>();
    int m = j["m"];
    auto flat = j["logits"].get<std::vector<double>>();
    Tensor want({static_cast<int>(tokens.size()), c.vocab_size}, std::move(flat));

    CHECK(max_abs_diff(naive::forward(w, tokens, docs, m), want) < 1e-9);
    CHECK(max_abs_diff(graph_forward(w, tokens, docs, m), want) < 1e-6);
}

TEST_CASE("model runs far past the training length") {
    ModelConfig c = tiny_cfg();
    c.max_seq_len = 8;
    Rng rng(23);
    std::vector<int> tokens(32), docs(32, 0);
    for (int i = 0; i < 32; ++i) tokens[i] = i % c.vocab_size;

    for (bool baseline : {false, true}) {
        ModelConfig cc = c;
        cc.baseline = baseline;
        ModelWeights w = init_weights(cc, 31);
        randomize(w, rng);
        Tensor out = graph_forward(w, tokens, docs, 2);
        REQUIRE(out.rows() == 32);
        REQUIRE(out.cols() == c.vocab_size);
        for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(std::isfinite(out.ptr()[i]));
    }
}

TEST_CASE("swiglu block computes the silu-gated projection") {
    SECTION("silu(1) value flows through unit weights") {
        Graph g;
        Var x = g.leaf(Tensor({1, 1}, {0.0}), false);
        Var xn = g.leaf(Tensor({1, 1}, {1.0}), false);
        Var w1 = g.leaf(Tensor({1, 1}, {1.0}), false);
        Var w2 = g.leaf(Tensor({1, 1}, {1.0}), false);
        Var w3 = g.leaf(Tensor({1, 1}, {1.0}), false);
        Var out = swiglu_block(g, x, xn, w1, w2, w3);
        CHECK(g.value(out).item() == Catch::Approx(1.0 / (1.0 + std::exp(-1.0))).epsilon(1e-12));
    }

    SECTION("zero gate weights reduce to the residual") {
        Rng rng(29);
        Graph g;
        Tensor xt({2, 3});
        for (int i = 0; i < 6; ++i) xt.mut()[i] = rng.uniform(-1, 1);
        Var x = g.leaf(xt.clone(), false);
        Var xn = g.leaf(xt.clone(), false);
        Var w1 = g.leaf(Tensor::zeros({5, 3}), false);
        Var w2 = g.leaf(rng.normal_tensor({3, 5}, 1.0), false);
        Var w3 = g.leaf(rng.normal_tensor({5, 3}, 1.0), false);
        Var out = swiglu_block(g, x, xn, w1, w2, w3);
        CHECK(max_abs_diff(g.value(out), xt) == 0.0);
    }
}

TEST_CASE("stripping long-term memory") {
    ModelConfig c = tiny_cfg();
    Rng rng(37);
    ModelWeights w = init_weights(c, 12);
    randomize(w, rng);
    Tensor w_out_before = w.layers[0].w_out.clone();

    ModelWeights ws = strip_long_term(w);
    REQUIRE(ws.stripped);

    SECTION("original weights stay untouched") {
        CHECK(max_abs_diff(w.layers[0].w_out, w_out_before) == 0.0);
        CHECK_FALSE(w.stripped);
    }

    SECTION("parameter count drops by the long-term share") {
        // per layer: 2 heads x (w_phi 32 + w_g 8 + w_lambda 8 + w_psi 32 +
        // gamma 1 + theta 3) = 168 long-term parameters, plus half of the
        // 8x16 output projection
        std::int64_t full = w.param_count();
        std::int64_t stripped = ws.param_count();
        CHECK(stripped == full - c.n_layers * (168 + 64));
        CHECK(stripped < full);
    }

    SECTION("short-term pathway is untouched") {
        std::vector<int> tokens = {1, 5, 7, 5, 2, 9, 5, 7};
        std::vector<int> docs(8, 0);
        AttnCapture ca, cb;
        Tensor full = graph_forward(w, tokens, docs, 2, &ca);
        Tensor cut = graph_forward(ws, tokens, docs, 2, &cb);
        REQUIRE(ca.short_attn.size() == cb.short_attn.size());
        // layer 0 sees the same residual stream, so its short attention is
        // bitwise identical; deeper layers legitimately diverge because the
        // stream upstream of them lost the long-term contribution
        for (int h = 0; h < c.n_heads; ++h)
            CHECK(max_abs_diff(ca.short_attn[h], cb.short_attn[h]) == 0.0);
        // but the logits must feel the loss of the long-term store
        CHECK(max_abs_diff(full, cut) > 1e-12);
        // stripped long-term attention is identically zero
        for (const Tensor& a : cb.long_attn)
            CHECK(max_abs_diff(a, Tensor::zeros({8, 8})) == 0.0);
    }

    SECTION("sum mode keeps the output projection whole") {
        ModelConfig cs = tiny_cfg();
        cs.combine_sum = true;
        ModelWeights w2 = init_weights(cs, 13);
        ModelWeights ws2 = strip_long_term(w2);
        CHECK(max_abs_diff(ws2.layers[0].w_out, w2.layers[0].w_out) == 0.0);
        CHECK(ws2.param_count() < w2.param_count());
    }
}

TEST_CASE("flops estimate matches hand counts") {
    SECTION("zero layers is embed plus unembed") {
        ModelConfig c;
        c.n_layers = 0;
        c.d_model = 4;
        c.vocab_size = 10;
        CHECK(estimate_flops(c, 16) == Catch::Approx(2.0 * 10 * 4 + 4));
    }

    ModelConfig c;
    c.n_layers = 1;
    c.d_model = 4;
    c.n_heads = 1;
    c.vocab_size = 10;
    c.ffn_hidden = 8;
    c.h = 2;
    c.m_lo = 1;
    c.m_hi = 2;
    c.m_eval = 1;

    SECTION("memory model, T=4, single document") {
        // embed 4; extractor projections 2 mems x (2*(2*4*4) + 2*2*4) = 160;
        // w_out 2*4*8 = 64; ffn 2*3*8*4 = 192; retrieval: short counts
        // 0+1+1+1, long counts 0+1+2+3 -> 2*4*9/4 = 18; unembed 80
        CHECK(estimate_flops(c, 4) == Catch::Approx(4 + 160 + 64 + 192 + 18 + 80));
    }

    SECTION("stripped drops long-term work") {
        // one mem -> 80; w_out 2*4*4 = 32; retrieval 2*4*3/4 = 6
        CHECK(estimate_flops(c, 4, true) == Catch::Approx(4 + 80 + 32 + 192 + 6 + 80));
        CHECK(estimate_flops(c, 4, true) < estimate_flops(c, 4, false));
    }

    SECTION("baseline attention") {
        ModelConfig cb = c;
        cb.baseline = true;
        // proj 4 mats * 2*4*4 = 128; attention 2*4*(1+2+3+4)/4 = 20
        CHECK(estimate_flops(cb, 4) == Catch::Approx(4 + 128 + 192 + 20 + 80));
    }

    SECTION("per-token cost grows with sequence length") {
        CHECK(estimate_flops(c, 64) < estimate_flops(c, 256));
    }
}

TEST_CASE("parameter count matches a hand count") {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 4;
    c.n_heads = 2;
    c.vocab_size = 10;
    c.ffn_hidden = 8;
    c.h = 3;
    c.m_lo = 1;
    c.m_hi = 3;
    c.m_eval = 2;
    ModelWeights w = init_weights(c, 1);
    // embed 40 + unembed 40 + final gain 4 = 84; per layer: 4 mems x 28 +
    // w_out 32 + gains 8 + ffn 96 = 248
    CHECK(w.param_count() == 84 + 2 * 248);

    ModelConfig cb = c;
    cb.baseline = true;
    ModelWeights wb = init_weights(cb, 1);
    // 4 attention mats of 16 replace the memory stack
    CHECK(wb.param_count() == 84 + 2 * (64 + 8 + 96));
}

TEST_CASE("init_weights is reproducible and starts in the averaging regime") {
    ModelConfig c = tiny_cfg();
    ModelWeights a = init_weights(c, 42);
    ModelWeights b = init_weights(c, 42);
    ModelWeights d = init_weights(c, 43);

    bool same = true, different = false;
    a.visit([&](const std::string& name, Tensor& t, bool) {
        Tensor* tb = nullptr;
        Tensor* td = nullptr;
        b.visit([&](const std::string& n2, Tensor& t2, bool) {
            if (n2 == name) tb = &t2;
        });
        d.visit([&](const std::string& n2, Tensor& t2, bool) {
            if (n2 == name) td = &t2;
        });
        REQUIRE(tb != nullptr);
        for (std::int64_t i = 0; i < t.numel(); ++i) {
            if (t.ptr()[i] != tb->ptr()[i]) same = false;
            if (t.ptr()[i] != td->ptr()[i]) different = true;
        }
    });
    CHECK(same);
    CHECK(different);

    const MemWeights& mw = a.layers[0].smem[0];
    for (std::int64_t i = 0; i < mw.w_g.numel(); ++i) CHECK(mw.w_g.ptr()[i] == 0.0);
    CHECK(mw.gamma.item() == 0.5);
    CHECK(mw.theta.at(0) == 0.0);
    CHECK(mw.theta.at(1) == 0.0);
    CHECK(mw.theta.at(2) != 0.0);  // exact zero would freeze under |.|
    for (int i = 0; i < c.d_model; ++i) CHECK(a.layers[0].gain1.at(i) == 1.0);
}

TEST_CASE("input validation") {
    ModelConfig c = tiny_cfg();
    ModelWeights w = init_weights(c, 1);
    Graph g;
    LeafMap lm(g);
    std::vector<int> docs = {0, 0};
    CHECK_THROWS(model_logits(g, lm, w, {0, 12}, docs, 1));
    CHECK_THROWS(model_logits(g, lm, w, {0, -1}, docs, 1));
    CHECK_THROWS(model_logits(g, lm, w, {0, 1, 2}, docs, 1));
    CHECK_THROWS(model_logits(g, lm, w, {}, {}, 1));

    ModelConfig bad = c;
    bad.m_eval = bad.h;  // evaluation delay must stay inside the window
    CHECK_THROWS(bad.validate());
    bad = c;
    bad.d_model = 9;
    CHECK_THROWS(bad.validate());
    bad = c;
    bad.m_lo = 0;
    CHECK_THROWS(bad.validate());
}

TEST_CASE("end-to-end gradients match finite differences") {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 4;
    c.n_heads = 2;
    c.vocab_size = 10;
    c.ffn_hidden = 8;
    c.h = 3;
    c.m_lo = 1;
    c.m_hi = 3;
    c.m_eval = 2;
    Rng rng(41);
    ModelWeights w = init_weights(c, 14);
    randomize(w, rng);
    REQUIRE(w.param_count() <= 1000);

    std::vector<int> tokens = {1, 5, 7, 5, 2, 9};
    std::vector<int> docs = {0, 0, 0, 1, 1, 1};
    // next-token prediction; final position of each document carries no target
    std::vector<int> targets = {5, 7, 5, 2, 9, 0};
    std::vector<std::uint8_t> lmask = {1, 1, 0, 1, 1, 0};

    auto loss_with = [&](Graph& g, const Tensor* swap, Var x) {
        LeafMap lm(g);
        if (swap) lm.bind(*swap, x);
        Var logits = model_logits(g, lm, w, tokens, docs, 2);
        return g.cross_entropy(logits, make_ints(targets), make_mask(lmask));
    };

    // analytic gradient reaches the embedding at all
    {
        Graph g;
        LeafMap lm(g);
        Var logits = model_logits(g, lm, w, tokens, docs, 2);
        Var loss = g.cross_entropy(logits, make_ints(targets), make_mask(lmask));
        g.backward(loss);
        Tensor ge = lm.grad(w.embed);
        double norm = 0.0;
        for (std::int64_t i = 0; i < ge.numel(); ++i) norm += ge.ptr()[i] * ge.ptr()[i];
        CHECK(norm > 0.0);
    }

    w.visit([&](const std::string& name, Tensor& param, bool) {
        auto f = [&](Graph& g, Var x) { return loss_with(g, &param, x); };
        double err = check_gradient(f, param, 1e-5);
        INFO("parameter " << name);
        CHECK(err < 1e-4);
    });
}
