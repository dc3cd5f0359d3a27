#pragma once
// Evaluation harness: candidate-scoring over closed label sets, task suites
// (induction, few-shot classification, multi-doc QA, persistent probes,
// length extrapolation), last-token attention profiles, and a Spearman
// helper. Suites are generic over a Predictor so they can be exercised with
// hand-coded oracles as well as trained models.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "mosaic/model.hpp"
#include "mosaic/tasks.hpp"

namespace mosaic {

// Picks one index into `candidates` for a prompt whose answer is the next
// token after the final position.
using Predictor =
    std::function<int(const std::vector<int>& tokens, const std::vector<int>& candidates)>;

// Log-softmax at the final position, restricted to the candidate set.
// Softmax is monotone per row, so the raw logits decide; ties break toward
// the lower candidate index for determinism.
inline int score_candidates(const ModelWeights& w, const std::vector<int>& tokens,
                            const std::vector<int>& candidates, int m) {
    detail::require(!candidates.empty(), "score: no candidates");
    Graph g;
    LeafMap lm(g);
    std::vector<int> docs(tokens.size(), 0);
    Var logits = model_logits(g, lm, w, tokens, docs, m);
    const Tensor& out = g.value(logits);
    int last = static_cast<int>(tokens.size()) - 1;
    int best = 0;
    double best_v = out.at(last, candidates[0]);
    for (std::size_t i = 1; i < candidates.size(); ++i) {
        double v = out.at(last, candidates[i]);
        if (v > best_v) {
            best_v = v;
            best = static_cast<int>(i);
        }
    }
    return best;
}

inline Predictor model_predictor(const ModelWeights& w, int m) {
    return [&w, m](const std::vector<int>& tokens, const std::vector<int>& candidates) {
        return score_candidates(w, tokens, candidates, m);
    };
}

// ------------------------------------------------------------------ reports

struct EvalRow {
    std::string task;
    std::string model;
    int length = 0;  // context length, 0 when not applicable
    int shots = 0;
    std::string variant;  // prompt variant or "-"
    double accuracy = 0.0;
    int n = 0;
};

inline void write_report_csv(const std::string& path, const std::vector<EvalRow>& rows) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    detail::require(f != nullptr, "report: cannot open " + path);
    std::fprintf(f, "task,model,length,shots,variant,accuracy,n_eval\n");
    for (const EvalRow& r : rows)
        std::fprintf(f, "%s,%s,%d,%d,%s,%.6f,%d\n", r.task.c_str(), r.model.c_str(), r.length,
                     r.shots, r.variant.c_str(), r.accuracy, r.n);
    std::fclose(f);
}

// ---------------------------------------------------------------- induction

// Greedy next-token accuracy at the second and later occurrences of each
// trigger token. The model chooses over the whole vocabulary, not a
// candidate list, since the task defines an exact continuation.
inline double eval_induction(const ModelWeights& w, Rng& rng, const Vocab& v,
                             const InductionConfig& c, int n_seqs, int m) {
    long hits = 0, total = 0;
    for (int s = 0; s < n_seqs; ++s) {
        InductionEval e = gen_induction_eval(rng, v, c);
        if (e.positions.empty()) continue;
        Graph g;
        LeafMap lm(g);
        std::vector<int> docs(e.tokens.size(), 0);
        const Tensor& out = g.value(model_logits(g, lm, w, e.tokens, docs, m));
        for (std::size_t k = 0; k < e.positions.size(); ++k) {
            int p = e.positions[k];
            int arg = 0;
            for (int j = 1; j < w.cfg.vocab_size; ++j)
                if (out.at(p, j) > out.at(p, arg)) arg = j;
            hits += (arg == e.targets[k]);
            ++total;
        }
    }
    detail::require(total > 0, "induction eval: no trigger positions");
    return static_cast<double>(hits) / static_cast<double>(total);
}

// ----------------------------------------------------------- classification

struct IclOutcome {
    std::vector<EvalRow> rows;          // per-variant rows plus one "best" row per n
    std::vector<double> best_by_shots;  // best-of-variants accuracy, one per n
};

// The same tasks are scored under all four prompt variants; the reported
// number per shot count is the best variant, mirroring prompt tuning.
inline IclOutcome eval_icl(const Predictor& predict, const Vocab& v, const ClsBank& bank,
                           Rng& rng, int n_tasks, const std::vector<int>& shots_list,
                           bool anonymous, int n_classes, const std::string& model_tag,
                           double noise_prob = 0.0) {
    IclOutcome out;
    std::string task_name = anonymous ? "icl_anonymous" : "icl_semantic";
    for (int shots : shots_list) {
        std::vector<IclTask> tasks;
        for (int i = 0; i < n_tasks; ++i)
            tasks.push_back(
                gen_icl_classification(rng, v, bank, n_classes, shots, anonymous, noise_prob));
        double best = -1.0;
        std::string best_name;
        int length = 0;
        for (const PromptSpec& spec : all_prompt_variants()) {
            long hits = 0;
            for (const IclTask& t : tasks) {
                std::vector<int> prompt = build_prompt(t, spec);
                length = std::max(length, static_cast<int>(prompt.size()));
                hits += (predict(prompt, t.label_of_class) == t.answer_class);
            }
            double acc = static_cast<double>(hits) / n_tasks;
            out.rows.push_back(
                {task_name, model_tag, length, shots, variant_name(spec), acc, n_tasks});
            if (acc > best) {
                best = acc;
                best_name = variant_name(spec);
            }
        }
        out.rows.push_back({task_name, model_tag, length, shots, "best:" + best_name, best,
                            n_tasks});
        out.best_by_shots.push_back(best);
    }
    return out;
}

// ------------------------------------------------------------- multi-doc QA

inline EvalRow eval_qa(const Predictor& predict, const Vocab& v, Rng& rng, int n_tasks,
                       int n_docs, int doc_len, int total_len, const std::string& model_tag) {
    long hits = 0;
    for (int i = 0; i < n_tasks; ++i) {
        QaTask t = gen_multidoc_qa(rng, v, n_docs, doc_len, total_len);
        int pick = predict(t.tokens, t.candidates);
        hits += (t.candidates[pick] == t.answer);
    }
    return {"qa", model_tag, total_len, 0, "-",
            static_cast<double>(hits) / n_tasks, n_tasks};
}

inline EvalRow eval_persistent(const Predictor& predict, const Vocab& v, const FactTable& facts,
                               const std::string& model_tag) {
    long hits = 0;
    for (int i = 0; i < facts.size(); ++i) {
        QaTask t = make_persistent_probe(v, facts, i);
        int pick = predict(t.tokens, t.candidates);
        hits += (t.candidates[pick] == t.answer);
    }
    return {"persistent", model_tag, 0, 0, "-",
            static_cast<double>(hits) / facts.size(), facts.size()};
}

// ------------------------------------------------------------ long contexts

// QA accuracy at multiples of the base context length. The factor-1 entry
// runs the exact same code path as plain eval_qa.
inline std::vector<EvalRow> eval_extrapolation(const Predictor& predict, const Vocab& v,
                                               Rng& rng, int n_tasks, int n_docs, int doc_len,
                                               int base_len, const std::vector<int>& factors,
                                               const std::string& model_tag) {
    std::vector<EvalRow> rows;
    for (int f : factors) {
        EvalRow r = eval_qa(predict, v, rng, n_tasks, n_docs, doc_len, base_len * f, model_tag);
        r.task = "qa_extrapolation";
        rows.push_back(r);
    }
    return rows;
}

// -------------------------------------------------------- attention profile

struct AttnProfile {
    std::string kind;  // "short", "long", or "attn"
    int layer = -1;    // -1 = averaged across layers
    int seq_len = 0;
    std::vector<double> mean, stddev;  // per position, last-query-row weights
};

// Head-averaged attention mass the final query assigns to each position,
// with mean and std taken across sequences.
inline AttnProfile attention_profile(const ModelWeights& w,
                                     const std::vector<std::vector<int>>& seqs, int m,
                                     const std::string& kind, int layer = -1) {
    detail::require(!seqs.empty(), "profile: no sequences");
    int t = static_cast<int>(seqs[0].size());
    AttnProfile prof;
    prof.kind = kind;
    prof.layer = layer;
    prof.seq_len = t;
    std::vector<double> sum(t, 0.0), sumsq(t, 0.0);

    for (const std::vector<int>& tokens : seqs) {
        detail::require(static_cast<int>(tokens.size()) == t, "profile: ragged lengths");
        Graph g;
        LeafMap lm(g);
        AttnCapture cap;
        std::vector<int> docs(tokens.size(), 0);
        model_logits(g, lm, w, tokens, docs, m, &cap);
        const std::vector<Tensor>& mats =
            kind == "short" ? cap.short_attn : kind == "long" ? cap.long_attn : cap.attn;
        detail::require(!mats.empty(), "profile: no captures of kind " + kind);
        int heads = w.cfg.n_heads;
        std::vector<double> row(t, 0.0);
        int used = 0;
        for (std::size_t i = 0; i < mats.size(); ++i) {
            int l = static_cast<int>(i) / heads;
            if (layer >= 0 && l != layer) continue;
            for (int p = 0; p < t; ++p) row[p] += mats[i].at(t - 1, p);
            ++used;
        }
        detail::require(used > 0, "profile: layer index out of range");
        for (int p = 0; p < t; ++p) {
            row[p] /= used;
            sum[p] += row[p];
            sumsq[p] += row[p] * row[p];
        }
    }
    int n = static_cast<int>(seqs.size());
    prof.mean.resize(t);
    prof.stddev.resize(t);
    for (int p = 0; p < t; ++p) {
        prof.mean[p] = sum[p] / n;
        double var = sumsq[p] / n - prof.mean[p] * prof.mean[p];
        prof.stddev[p] = std::sqrt(std::max(0.0, var));
    }
    return prof;
}

inline void write_profile_csv(const std::string& path, const AttnProfile& prof) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    detail::require(f != nullptr, "profile: cannot open " + path);
    std::fprintf(f, "position,mean,std\n");
    for (int p = 0; p < prof.seq_len; ++p)
        std::fprintf(f, "%d,%.10g,%.10g\n", p, prof.mean[p], prof.stddev[p]);
    std::fclose(f);
}

// Flatness of the far region: variance of the mean curve over positions
// strictly older than the final h (the part only reachable through the
// long-term route).
inline double far_region_variance(const AttnProfile& prof, int h) {
    int far_end = prof.seq_len - h;
    detail::require(far_end >= 2, "profile: far region too small");
    double s = 0.0;
    for (int p = 0; p < far_end; ++p) s += prof.mean[p];
    double mu = s / far_end;
    double v = 0.0;
    for (int p = 0; p < far_end; ++p) v += (prof.mean[p] - mu) * (prof.mean[p] - mu);
    return v / far_end;
}

// ----------------------------------------------------------------- spearman

// Rank correlation with average ranks on ties.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
    int n = static_cast<int>(x.size());
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return x[a] < x[b]; });
    std::vector<double> ranks(n);
    int i = 0;
    while (i < n) {
        int j = i;
        while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
        double r = 0.5 * (i + j) + 1.0;  // 1-based average rank of the tie group
        for (int k = i; k <= j; ++k) ranks[idx[k]] = r;
        i = j + 1;
    }
    return ranks;
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    detail::require(x.size() == y.size() && x.size() >= 2, "spearman: need n >= 2 pairs");
    std::vector<double> rx = average_ranks(x), ry = average_ranks(y);
    int n = static_cast<int>(x.size());
    double mx = 0, my = 0;
    for (int i = 0; i < n; ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (int i = 0; i < n; ++i) {
        sxy += (rx[i] - mx) * (ry[i] - my);
        sxx += (rx[i] - mx) * (rx[i] - mx);
        syy += (ry[i] - my) * (ry[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;  // constant input: no ordering signal
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace mosaic
