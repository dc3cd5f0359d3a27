// Extractor oracles: hand-unrolled recurrences, blend limits, state-carry
// consistency, and agreement between the plain loops and the graph forms.

#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "mosaic/extractors.hpp"
#include "mosaic/rng.hpp"

using namespace mosaic;

namespace {

Tensor rand_tensor(Rng& rng, std::vector<int> shape, double scale = 1.0) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t.mut()[i] = rng.uniform(-scale, scale);
    return t;
}

ExtractorWeights rand_weights(Rng& rng, int d_model, int d_head) {
    ExtractorWeights w;
    w.w_phi = rand_tensor(rng, {d_head, d_model});
    w.w_g = rand_tensor(rng, {1, d_model}, 0.5);
    w.w_lambda = rand_tensor(rng, {1, d_model}, 0.5);
    w.w_psi = rand_tensor(rng, {d_head, d_model});
    w.gamma = rng.uniform(-0.5, 1.5);
    w.lambda_fixed = rng.uniform(0.05, 0.95);
    return w;
}

double row_norm(const Tensor& t, int i) {
    double s = 0.0;
    for (int j = 0; j < t.cols(); ++j) s += t.at(i, j) * t.at(i, j);
    return std::sqrt(s);
}

}  // namespace

TEST_CASE("v1 keys collapse when lambda is zero", "[extractors]") {
    Rng rng(51);
    ExtractorWeights w = rand_weights(rng, 4, 3);
    w.lambda_fixed = 0.0;
    Tensor x = rand_tensor(rng, {5, 4});
    Tensor keys = extract_keys_v1(x, w);
    for (int t = 0; t < 5; ++t) {
        // Norm(W_phi x_t) directly
        double raw[3], norm2 = 0.0;
        for (int j = 0; j < 3; ++j) {
            raw[j] = 0.0;
            for (int c = 0; c < 4; ++c) raw[j] += w.w_phi.at(j, c) * x.at(t, c);
            norm2 += raw[j] * raw[j];
        }
        for (int j = 0; j < 3; ++j)
            CHECK(keys.at(t, j) ==
                  Catch::Approx(raw[j] / (std::sqrt(norm2) + 1e-12)).margin(1e-12));
    }
}

TEST_CASE("v1 keys with lambda one and constant input are all equal", "[extractors]") {
    Rng rng(52);
    ExtractorWeights w = rand_weights(rng, 4, 3);
    w.lambda_fixed = 1.0;
    Tensor x({6, 4});
    for (int t = 0; t < 6; ++t)
        for (int c = 0; c < 4; ++c) x.at(t, c) = 0.3 * c - 0.5;
    Tensor keys = extract_keys_v1(x, w);
    for (int t = 1; t < 6; ++t)
        for (int j = 0; j < 3; ++j)
            CHECK(keys.at(t, j) == Catch::Approx(keys.at(0, j)).margin(1e-9));
}

TEST_CASE("v1 keys match a hand-unrolled two-step recurrence", "[extractors]") {
    Rng rng(53);
    ExtractorWeights w = rand_weights(rng, 3, 2);
    w.lambda_fixed = 0.5;
    Tensor x = rand_tensor(rng, {2, 3});
    Tensor keys = extract_keys_v1(x, w);

    // kbar_2 = W_phi x_2 + 0.5 W_phi x_1
    double kbar2[2], norm2 = 0.0;
    for (int j = 0; j < 2; ++j) {
        double p1 = 0.0, p2 = 0.0;
        for (int c = 0; c < 3; ++c) {
            p1 += w.w_phi.at(j, c) * x.at(0, c);
            p2 += w.w_phi.at(j, c) * x.at(1, c);
        }
        kbar2[j] = p2 + 0.5 * p1;
        norm2 += kbar2[j] * kbar2[j];
    }
    for (int j = 0; j < 2; ++j)
        CHECK(keys.at(1, j) ==
              Catch::Approx(kbar2[j] / (std::sqrt(norm2) + 1e-12)).margin(1e-12));
}

TEST_CASE("gated keys with zero gates are a cumulative sum", "[extractors]") {
    Rng rng(54);
    ExtractorWeights w = rand_weights(rng, 4, 3);
    for (int c = 0; c < 4; ++c) {
        w.w_g.at(0, c) = 0.0;
        w.w_lambda.at(0, c) = 0.0;
    }
    Tensor x = rand_tensor(rng, {5, 4});
    Tensor keys = extract_keys_gated(x, w);
    // kbar_T = sum of projections up to T
    Tensor acc = Tensor::zeros({3});
    for (int t = 0; t < 5; ++t) {
        double norm2 = 0.0;
        for (int j = 0; j < 3; ++j) {
            double p = 0.0;
            for (int c = 0; c < 4; ++c) p += w.w_phi.at(j, c) * x.at(t, c);
            acc.at(j) += p;
            norm2 += acc.at(j) * acc.at(j);
        }
        for (int j = 0; j < 3; ++j)
            CHECK(keys.at(t, j) ==
                  Catch::Approx(acc.at(j) / (std::sqrt(norm2) + 1e-12)).margin(1e-10));
    }
}

TEST_CASE("gated keys reduce to v1 under constant decay", "[extractors]") {
    Rng rng(55);
    ExtractorWeights w = rand_weights(rng, 4, 3);
    for (int c = 0; c < 4; ++c) w.w_g.at(0, c) = 0.0;
    // constant input makes W_lambda x a constant c, so lambda = e^{-|c|}
    Tensor x({6, 4});
    for (int t = 0; t < 6; ++t)
        for (int c = 0; c < 4; ++c) x.at(t, c) = 0.2 * c + 0.1;
    double c = 0.0;
    for (int j = 0; j < 4; ++j) c += w.w_lambda.at(0, j) * x.at(0, j);

    Tensor gated = extract_keys_gated(x, w);
    ExtractorWeights v1 = w;
    v1.lambda_fixed = std::exp(-std::abs(c));
    Tensor plain = extract_keys_v1(x, v1);
    for (int t = 0; t < 6; ++t)
        for (int j = 0; j < 3; ++j)
            CHECK(gated.at(t, j) == Catch::Approx(plain.at(t, j)).margin(1e-9));
}

TEST_CASE("gated keys match a hand-unrolled recurrence", "[extractors]") {
    Rng rng(56);
    ExtractorWeights w = rand_weights(rng, 3, 2);
    Tensor x = rand_tensor(rng, {4, 3});
    Tensor keys = extract_keys_gated(x, w);

    double kbar[2] = {0.0, 0.0};
    for (int t = 0; t < 4; ++t) {
        double gpre = 0.0, lpre = 0.0, ktil[2];
        for (int c = 0; c < 3; ++c) {
            gpre += w.w_g.at(0, c) * x.at(t, c);
            lpre += w.w_lambda.at(0, c) * x.at(t, c);
        }
        double g = std::exp(std::min(30.0, std::max(-30.0, gpre)));
        double lam = std::exp(-std::abs(lpre));
        double norm2 = 0.0;
        for (int j = 0; j < 2; ++j) {
            ktil[j] = 0.0;
            for (int c = 0; c < 3; ++c) ktil[j] += w.w_phi.at(j, c) * x.at(t, c);
            kbar[j] = g * ktil[j] + lam * kbar[j];
            norm2 += kbar[j] * kbar[j];
        }
        for (int j = 0; j < 2; ++j)
            CHECK(keys.at(t, j) ==
                  Catch::Approx(kbar[j] / (std::sqrt(norm2) + 1e-12)).margin(1e-10));
    }
}

TEST_CASE("gate stays positive and decay stays in (0,1]", "[extractors]") {
    Rng rng(57);
    for (int trial = 0; trial < 1000; ++trial) {
        double pre = rng.uniform(-200.0, 200.0);
        double g = gate_scalar(pre);
        double lam = decay_scalar(pre);
        CHECK(g > 0.0);
        CHECK(std::isfinite(g));
        CHECK(lam > 0.0);
        CHECK(lam <= 1.0);
    }
    CHECK(gate_scalar(0.0) == 1.0);
    CHECK(decay_scalar(0.0) == 1.0);
    CHECK(gate_scalar(1000.0) == std::exp(30.0));  // clamped exponent
}

TEST_CASE("emitted keys and values are unit norm", "[extractors]") {
    Rng rng(58);
    for (int trial = 0; trial < 20; ++trial) {
        ExtractorWeights w = rand_weights(rng, 5, 3);
        Tensor x = rand_tensor(rng, {7, 5});
        Tensor k1 = extract_keys_v1(x, w);
        Tensor kg = extract_keys_gated(x, w);
        Tensor v = extract_values(x, w);
        for (int t = 0; t < 7; ++t) {
            CHECK(std::abs(row_norm(k1, t) - 1.0) < 1e-6);
            CHECK(std::abs(row_norm(kg, t) - 1.0) < 1e-6);
            CHECK(std::abs(row_norm(v, t) - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("value blend limits", "[extractors]") {
    Rng rng(59);
    ExtractorWeights w = rand_weights(rng, 4, 3);
    Tensor x = rand_tensor(rng, {5, 4});
    Tensor proj({5, 3});
    for (int t = 0; t < 5; ++t)
        for (int j = 0; j < 3; ++j) {
            proj.at(t, j) = 0.0;
            for (int c = 0; c < 4; ++c) proj.at(t, j) += w.w_psi.at(j, c) * x.at(t, c);
        }

    w.gamma = 1.0;  // no lookahead
    Tensor v1 = extract_values(x, w);
    for (int t = 0; t < 5; ++t) {
        double n = 0.0;
        for (int j = 0; j < 3; ++j) n += proj.at(t, j) * proj.at(t, j);
        for (int j = 0; j < 3; ++j)
            CHECK(v1.at(t, j) ==
                  Catch::Approx(proj.at(t, j) / (std::sqrt(n) + 1e-12)).margin(1e-12));
    }

    w.gamma = 0.0;  // pure lookahead; the final row blends with zero
    Tensor v0 = extract_values(x, w);
    for (int t = 0; t < 4; ++t) {
        double n = 0.0;
        for (int j = 0; j < 3; ++j) n += proj.at(t + 1, j) * proj.at(t + 1, j);
        for (int j = 0; j < 3; ++j)
            CHECK(v0.at(t, j) ==
                  Catch::Approx(proj.at(t + 1, j) / (std::sqrt(n) + 1e-12)).margin(1e-12));
    }
    for (int j = 0; j < 3; ++j) CHECK(v0.at(4, j) == 0.0);  // zero lookahead normalizes to zero

    w.gamma = 0.5;  // explicit three-token check at the first position
    Tensor xh = rand_tensor(rng, {3, 4});
    Tensor projh({3, 3});
    for (int t = 0; t < 3; ++t)
        for (int j = 0; j < 3; ++j) {
            projh.at(t, j) = 0.0;
            for (int c = 0; c < 4; ++c) projh.at(t, j) += w.w_psi.at(j, c) * xh.at(t, c);
        }
    Tensor vh = extract_values(xh, w);
    double blend[3], n2 = 0.0;
    for (int j = 0; j < 3; ++j) {
        blend[j] = 0.5 * projh.at(0, j) + 0.5 * projh.at(1, j);
        n2 += blend[j] * blend[j];
    }
    for (int j = 0; j < 3; ++j)
        CHECK(vh.at(0, j) == Catch::Approx(blend[j] / (std::sqrt(n2) + 1e-12)).margin(1e-12));
}

TEST_CASE("gated recurrence carries state across a split", "[extractors]") {
    Rng rng(60);
    for (int trial = 0; trial < 20; ++trial) {
        ExtractorWeights w = rand_weights(rng, 4, 3);
        Tensor full = rand_tensor(rng, {9, 4});
        Tensor whole = extract_keys_gated(full, w);

        int cut = rng.uniform_int(1, 8);
        Tensor head({cut, 4}), tail({9 - cut, 4});
        for (int t = 0; t < 9; ++t)
            for (int c = 0; c < 4; ++c) {
                if (t < cut)
                    head.at(t, c) = full.at(t, c);
                else
                    tail.at(t - cut, c) = full.at(t, c);
            }
        Tensor state;
        extract_keys_gated(head, w, &state);
        Tensor rest = extract_keys_gated(tail, w, &state);
        for (int t = 0; t < 9 - cut; ++t)
            for (int j = 0; j < 3; ++j)
                CHECK(rest.at(t, j) == Catch::Approx(whole.at(cut + t, j)).margin(1e-12));
    }
}

TEST_CASE("document ids restart the key recurrences", "[extractors]") {
    Rng rng(61);
    ExtractorWeights w = rand_weights(rng, 4, 3);
    Tensor x = rand_tensor(rng, {8, 4});
    std::vector<int> docs = {0, 0, 0, 1, 1, 2, 2, 2};

    Tensor joint = extract_keys_gated(x, w, nullptr, &docs);
    // each document processed alone must give identical rows
    int starts[] = {0, 3, 5, 8};
    for (int d = 0; d < 3; ++d) {
        int a = starts[d], b = starts[d + 1];
        Tensor piece({b - a, 4});
        for (int t = a; t < b; ++t)
            for (int c = 0; c < 4; ++c) piece.at(t - a, c) = x.at(t, c);
        Tensor alone = extract_keys_gated(piece, w);
        for (int t = 0; t < b - a; ++t)
            for (int j = 0; j < 3; ++j)
                CHECK(joint.at(a + t, j) == Catch::Approx(alone.at(t, j)).margin(1e-12));
    }
}

TEST_CASE("graph key extractors agree with the plain loops", "[extractors]") {
    Rng rng(62);
    for (int trial = 0; trial < 15; ++trial) {
        int l = rng.uniform_int(1, 10), dm = 4, dh = 3;
        ExtractorWeights w = rand_weights(rng, dm, dh);
        Tensor x = rand_tensor(rng, {l, dm});
        std::vector<int> docs(l, 0);
        if (l > 2)
            for (int t = l / 2; t < l; ++t) docs[t] = 1;

        Tensor plain_g = extract_keys_gated(x, w, nullptr, &docs);
        Tensor plain_1 = extract_keys_v1(x, w, nullptr, &docs);
        Tensor plain_v = extract_values(x, w);

        Graph g;
        Var xv = g.constant(x.clone());
        Var kg = keys_gated_rows(g, xv, g.constant(w.w_phi.clone()), g.constant(w.w_g.clone()),
                                 g.constant(w.w_lambda.clone()), docs);
        Var k1 = keys_v1_rows(g, xv, g.constant(w.w_phi.clone()), w.lambda_fixed, docs);
        Var vv = values_rows(g, xv, g.constant(w.w_psi.clone()),
                             g.constant(Tensor({1}, {w.gamma})));
        for (int t = 0; t < l; ++t)
            for (int j = 0; j < dh; ++j) {
                CHECK(g.value(kg).at(t, j) == Catch::Approx(plain_g.at(t, j)).margin(1e-9));
                CHECK(g.value(k1).at(t, j) == Catch::Approx(plain_1.at(t, j)).margin(1e-9));
                CHECK(g.value(vv).at(t, j) == Catch::Approx(plain_v.at(t, j)).margin(1e-9));
            }
    }
}

TEST_CASE("graph extractors differentiate wrt their weights", "[extractors]") {
    Rng rng(63);
    int l = 5, dm = 3, dh = 2;
    Tensor x = rand_tensor(rng, {l, dm});
    std::vector<int> docs = {0, 0, 0, 1, 1};
    ExtractorWeights w = rand_weights(rng, dm, dh);
    Tensor wsum = rand_tensor(rng, {l, dh});
    for (std::int64_t i = 0; i < wsum.numel(); ++i)
        wsum.mut()[i] = rng.uniform(0.5, 1.5);

    auto wrap = [&](Var y, Graph& g) { return g.reduce_sum(g.mul(y, g.constant(wsum.clone()))); };

    auto f_phi = [&](Graph& g, Var p) {
        return wrap(keys_gated_rows(g, g.constant(x.clone()), p, g.constant(w.w_g.clone()),
                                    g.constant(w.w_lambda.clone()), docs),
                    g);
    };
    auto f_g = [&](Graph& g, Var p) {
        return wrap(keys_gated_rows(g, g.constant(x.clone()), g.constant(w.w_phi.clone()), p,
                                    g.constant(w.w_lambda.clone()), docs),
                    g);
    };
    auto f_lam = [&](Graph& g, Var p) {
        return wrap(keys_gated_rows(g, g.constant(x.clone()), g.constant(w.w_phi.clone()),
                                    g.constant(w.w_g.clone()), p, docs),
                    g);
    };
    auto f_psi = [&](Graph& g, Var p) {
        return wrap(values_rows(g, g.constant(x.clone()), p, g.constant(Tensor({1}, {0.37}))),
                    g);
    };
    auto f_gamma = [&](Graph& g, Var p) {
        return wrap(values_rows(g, g.constant(x.clone()), g.constant(w.w_psi.clone()), p), g);
    };
    REQUIRE(check_gradient(f_phi, w.w_phi, 1e-5) < 1e-4);
    REQUIRE(check_gradient(f_g, w.w_g, 1e-5) < 1e-4);
    REQUIRE(check_gradient(f_lam, w.w_lambda, 1e-5) < 1e-4);
    REQUIRE(check_gradient(f_psi, w.w_psi, 1e-5) < 1e-4);
    REQUIRE(check_gradient(f_gamma, Tensor({1}, {0.37}), 1e-5) < 1e-4);
}
