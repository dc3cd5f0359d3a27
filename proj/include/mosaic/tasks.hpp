#pragma once
// Synthetic desk-scale task generators. One shared token vocabulary feeds
// four document families:
//   - induction: in-sequence bigram pairs whose continuation is fixed by the
//     first occurrence,
//   - few-shot classification: latent feature templates with semantic or
//     per-task anonymous labels, serialized as query/label blocks,
//   - multi-document QA: entity-attribute articles followed by a question,
//     with values re-randomized per document (contextual recall only),
//   - persistent facts: a global fact table rendered the same way every
//     time, so the values can soak into the feed-forward weights.
// Every generator is a pure function of its Rng, so suites regenerate
// identically from a seed.

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mosaic/rng.hpp"
#include "mosaic/training.hpp"

namespace mosaic {

// Token id layout. Ids 0..11 are structural; the pools follow densely.
struct Vocab {
    static constexpr int kSpace = 3;
    static constexpr int kNewline = 4;
    static constexpr int kQueryMark = 5;    // "query:"
    static constexpr int kLabelMark = 6;    // "intent:"
    static constexpr int kClsPreamble = 7;  // classification task header
    static constexpr int kQaPreamble = 8;   // "answer from the documents" header
    static constexpr int kDocMark = 9;      // article separator
    static constexpr int kQuestionMark = 10;
    static constexpr int kAnswerMark = 11;

    int n_features = 24;
    int n_labels = 16;
    int n_symbols = 12;  // anonymous class symbols
    int n_entities = 24;
    int n_attributes = 8;
    int n_values = 24;
    int n_filler = 32;

    int feature(int i) const { return idx(i, n_features, 12); }
    int label(int i) const { return idx(i, n_labels, 12 + n_features); }
    int symbol(int i) const { return idx(i, n_symbols, 12 + n_features + n_labels); }
    int entity(int i) const { return idx(i, n_entities, 12 + n_features + n_labels + n_symbols); }
    int attribute(int i) const {
        return idx(i, n_attributes, 12 + n_features + n_labels + n_symbols + n_entities);
    }
    int value(int i) const {
        return idx(i, n_values,
                   12 + n_features + n_labels + n_symbols + n_entities + n_attributes);
    }
    int filler(int i) const {
        return idx(i, n_filler,
                   12 + n_features + n_labels + n_symbols + n_entities + n_attributes + n_values);
    }
    int size() const {
        return 12 + n_features + n_labels + n_symbols + n_entities + n_attributes + n_values +
               n_filler;
    }

private:
    static int idx(int i, int n, int base) {
        detail::require(0 <= i && i < n, "vocab: pool index out of range");
        return base + i;
    }
};

// ---------------------------------------------------------------- induction

struct InductionConfig {
    int n_tokens = 32;  // alphabet drawn from the filler pool
    int n_pairs = 8;    // (a, b) pairs defined per sequence
    int length = 64;    // tokens per document (pairs repeated)
};

// One training document: pairs laid out back to back in random order with
// repetition, so later occurrences of a are predictable from the first.
inline std::vector<int> gen_induction_doc(Rng& rng, const Vocab& v, const InductionConfig& c) {
    detail::require(2 * c.n_pairs <= c.n_tokens, "induction: alphabet too small");
    std::vector<int> pool(c.n_tokens);
    for (int i = 0; i < c.n_tokens; ++i) pool[i] = v.filler(i);
    rng.shuffle(pool);
    std::vector<int> a(pool.begin(), pool.begin() + c.n_pairs);
    std::vector<int> b(pool.begin() + c.n_pairs, pool.begin() + 2 * c.n_pairs);

    std::vector<int> doc;
    doc.reserve(c.length);
    while (static_cast<int>(doc.size()) + 2 <= c.length) {
        int j = rng.uniform_int(0, c.n_pairs - 1);
        doc.push_back(a[j]);
        doc.push_back(b[j]);
    }
    return doc;
}

struct InductionEval {
    std::vector<int> tokens;     // BOT-prefixed sequence
    std::vector<int> positions;  // second-and-later trigger positions
    std::vector<int> targets;    // the b bound to each trigger
};

inline InductionEval gen_induction_eval(Rng& rng, const Vocab& v, const InductionConfig& c) {
    InductionEval e;
    std::vector<int> doc = gen_induction_doc(rng, v, c);
    e.tokens.push_back(kBotToken);
    for (int t : doc) e.tokens.push_back(t);

    std::vector<int> seen_a;  // first-occurrence bindings, in order
    std::vector<int> bound_b;
    for (std::size_t i = 1; i + 1 < e.tokens.size(); i += 2) {
        int a = e.tokens[i], b = e.tokens[i + 1];
        bool known = false;
        for (std::size_t k = 0; k < seen_a.size(); ++k)
            if (seen_a[k] == a) {
                known = true;
                e.positions.push_back(static_cast<int>(i));
                e.targets.push_back(bound_b[k]);
            }
        if (!known) {
            seen_a.push_back(a);
            bound_b.push_back(b);
        }
    }
    return e;
}

// ------------------------------------------------------------ classification

// Fixed latent template clusters shared by the corpus and all eval tasks:
// disjoint feature-token cores with one stable semantic label each.
struct ClsBank {
    int core_size = 3;
    std::vector<std::vector<int>> core;  // [class][core_size] feature tokens
    std::vector<int> semantic_label;     // [class] label token
};

inline ClsBank make_cls_bank(Rng& rng, const Vocab& v, int n_classes = 8, int core_size = 3) {
    detail::require(n_classes * core_size <= v.n_features, "cls bank: feature pool too small");
    detail::require(n_classes <= v.n_labels, "cls bank: label pool too small");
    ClsBank bank;
    bank.core_size = core_size;
    std::vector<int> feats(v.n_features), labs(v.n_labels);
    for (int i = 0; i < v.n_features; ++i) feats[i] = v.feature(i);
    for (int i = 0; i < v.n_labels; ++i) labs[i] = v.label(i);
    rng.shuffle(feats);
    rng.shuffle(labs);
    for (int c = 0; c < n_classes; ++c) {
        bank.core.emplace_back(feats.begin() + c * core_size,
                               feats.begin() + (c + 1) * core_size);
        bank.semantic_label.push_back(labs[c]);
    }
    return bank;
}

// x = the class core in random order, with optional per-position noise.
inline std::vector<int> sample_cls_x(Rng& rng, const Vocab& v, const ClsBank& bank, int cls,
                                     double noise_prob) {
    std::vector<int> x = bank.core[cls];
    rng.shuffle(x);
    for (int& t : x)
        if (rng.uniform() < noise_prob) t = v.feature(rng.uniform_int(0, v.n_features - 1));
    return x;
}

struct IclTask {
    int n_classes = 0;
    int n_shots = 0;
    bool anonymous = false;
    std::vector<int> bank_class;                      // task class -> bank class
    std::vector<int> label_of_class;                  // task class -> label token
    std::vector<std::vector<std::vector<int>>> shots; // [shot][class] -> x tokens
    std::vector<int> query_x;
    int answer_class = 0;          // index into task classes
    std::uint64_t shuffle_seed = 0;  // drives shuffle_within_shot deterministically
};

// Anonymous mode re-randomizes the class -> symbol mapping per task, so no
// label prior learned in training can help.
inline IclTask gen_icl_classification(Rng& rng, const Vocab& v, const ClsBank& bank,
                                      int n_classes, int n_shots, bool anonymous,
                                      double noise_prob = 0.0) {
    detail::require(n_classes >= 2 && n_classes <= static_cast<int>(bank.core.size()),
                    "icl: class count out of range");
    detail::require(!anonymous || n_classes <= v.n_symbols, "icl: symbol pool too small");
    IclTask task;
    task.n_classes = n_classes;
    task.n_shots = n_shots;
    task.anonymous = anonymous;

    std::vector<int> order(bank.core.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    rng.shuffle(order);
    order.resize(n_classes);
    task.bank_class = order;

    if (anonymous) {
        std::vector<int> syms(v.n_symbols);
        for (int i = 0; i < v.n_symbols; ++i) syms[i] = v.symbol(i);
        rng.shuffle(syms);
        for (int c = 0; c < n_classes; ++c) task.label_of_class.push_back(syms[c]);
    } else {
        for (int c = 0; c < n_classes; ++c)
            task.label_of_class.push_back(bank.semantic_label[order[c]]);
    }

    for (int s = 0; s < n_shots; ++s) {
        std::vector<std::vector<int>> shot;
        for (int c = 0; c < n_classes; ++c)
            shot.push_back(sample_cls_x(rng, v, bank, order[c], noise_prob));
        task.shots.push_back(std::move(shot));
    }
    task.answer_class = rng.uniform_int(0, n_classes - 1);
    task.query_x = sample_cls_x(rng, v, bank, order[task.answer_class], noise_prob);
    task.shuffle_seed = rng.engine()();
    return task;
}

struct PromptSpec {
    bool newline_delim = false;     // space otherwise
    bool shuffle_within_shot = false;
};

inline std::vector<PromptSpec> all_prompt_variants() {
    return {{false, false}, {false, true}, {true, false}, {true, true}};
}

inline std::string variant_name(const PromptSpec& s) {
    return std::string(s.newline_delim ? "newline" : "space") +
           (s.shuffle_within_shot ? "+shuffle" : "");
}

// BOT [preamble] d { per shot, per class: QUERY x.. d LABEL y d } QUERY q.. d LABEL
// The next token after the trailing label marker is the answer slot.
inline std::vector<int> build_prompt(const IclTask& task, const PromptSpec& spec) {
    int d = spec.newline_delim ? Vocab::kNewline : Vocab::kSpace;
    Rng rng(task.shuffle_seed);
    std::vector<int> p = {kBotToken, Vocab::kClsPreamble, d};
    for (int s = 0; s < task.n_shots; ++s) {
        std::vector<int> order(task.n_classes);
        for (int c = 0; c < task.n_classes; ++c) order[c] = c;
        if (spec.shuffle_within_shot) rng.shuffle(order);
        for (int c : order) {
            p.push_back(Vocab::kQueryMark);
            for (int t : task.shots[s][c]) p.push_back(t);
            p.push_back(d);
            p.push_back(Vocab::kLabelMark);
            p.push_back(task.label_of_class[c]);
            p.push_back(d);
        }
    }
    p.push_back(Vocab::kQueryMark);
    for (int t : task.query_x) p.push_back(t);
    p.push_back(d);
    p.push_back(Vocab::kLabelMark);
    return p;
}

// ------------------------------------------------------------- multi-doc QA

struct QaArticle {
    int entity = 0;
    std::vector<int> attrs, values;  // parallel, one value per attribute
};

struct QaTask {
    std::vector<int> tokens;      // BOT docs... QUESTION entity attr ANSWER
    int answer = 0;               // value token
    std::vector<int> candidates;  // the whole value pool
    int answer_doc_index = 0;
};

// One article: DOC { entity attr value } x n_attrs, padded with filler. The
// entity is restated before every attribute, so each fact is one contiguous
// triple and stays decodable from a short key window. Extra passes restate
// the whole fact set in fresh shuffled order.
inline std::vector<int> render_article(Rng& rng, const Vocab& v, const QaArticle& art,
                                       int doc_len, int passes = 1) {
    std::vector<int> out = {Vocab::kDocMark};
    std::vector<int> order(art.attrs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    for (int p = 0; p < passes; ++p) {
        rng.shuffle(order);
        for (int i : order) {
            out.push_back(art.entity);
            out.push_back(art.attrs[i]);
            out.push_back(art.values[i]);
        }
    }
    while (static_cast<int>(out.size()) < doc_len)
        out.push_back(v.filler(rng.uniform_int(0, v.n_filler - 1)));
    return out;
}

inline QaArticle sample_article(Rng& rng, const Vocab& v, int entity, int n_attrs) {
    detail::require(n_attrs <= v.n_attributes, "qa: attribute pool too small");
    QaArticle art;
    art.entity = entity;
    std::vector<int> attrs(v.n_attributes);
    for (int i = 0; i < v.n_attributes; ++i) attrs[i] = v.attribute(i);
    rng.shuffle(attrs);
    for (int i = 0; i < n_attrs; ++i) {
        art.attrs.push_back(attrs[i]);
        art.values.push_back(v.value(rng.uniform_int(0, v.n_values - 1)));
    }
    return art;
}

// Articles have distinct entities; the question targets one (entity, attr)
// pair, so the answer is derivable only from that article. The question
// always comes after the documents. total_length is met by padding with
// filler-only distractor articles.
inline QaTask gen_multidoc_qa(Rng& rng, const Vocab& v, int n_docs, int doc_len,
                              int total_length, int n_attrs = 3) {
    detail::require(n_docs >= 1 && n_docs <= v.n_entities, "qa: doc count out of range");
    QaTask task;
    std::vector<int> ents(v.n_entities);
    for (int i = 0; i < v.n_entities; ++i) ents[i] = v.entity(i);
    rng.shuffle(ents);

    std::vector<QaArticle> arts;
    for (int d = 0; d < n_docs; ++d) arts.push_back(sample_article(rng, v, ents[d], n_attrs));
    task.answer_doc_index = rng.uniform_int(0, n_docs - 1);
    const QaArticle& target = arts[task.answer_doc_index];
    int which = rng.uniform_int(0, n_attrs - 1);

    task.tokens = {kBotToken, Vocab::kQaPreamble};
    int question_len = 4;
    for (int d = 0; d < n_docs; ++d) {
        std::vector<int> a = render_article(rng, v, arts[d], doc_len);
        task.tokens.insert(task.tokens.end(), a.begin(), a.end());
    }
    // filler articles (no facts) up to the requested context length
    while (static_cast<int>(task.tokens.size()) + question_len < total_length) {
        task.tokens.push_back(Vocab::kDocMark);
        int room = total_length - question_len - static_cast<int>(task.tokens.size());
        int n = std::min(room, doc_len - 1);
        for (int i = 0; i < n; ++i)
            task.tokens.push_back(v.filler(rng.uniform_int(0, v.n_filler - 1)));
    }
    task.tokens.push_back(Vocab::kQuestionMark);
    task.tokens.push_back(target.entity);
    task.tokens.push_back(target.attrs[which]);
    task.tokens.push_back(Vocab::kAnswerMark);

    task.answer = target.values[which];
    for (int i = 0; i < v.n_values; ++i) task.candidates.push_back(v.value(i));
    return task;
}

// -------------------------------------------------------- persistent facts

// Global (entity, attribute) -> value bindings that never change across the
// corpus; the training documents repeat them so they migrate into weights.
struct FactTable {
    std::vector<int> entity, attr, value;  // parallel
    int size() const { return static_cast<int>(entity.size()); }
};

inline FactTable make_fact_table(Rng& rng, const Vocab& v, int n_facts) {
    detail::require(n_facts <= v.n_entities * v.n_attributes, "facts: table too large");
    FactTable t;
    std::vector<std::pair<int, int>> slots;
    for (int e = 0; e < v.n_entities; ++e)
        for (int a = 0; a < v.n_attributes; ++a) slots.emplace_back(e, a);
    rng.shuffle(slots);
    for (int i = 0; i < n_facts; ++i) {
        t.entity.push_back(v.entity(slots[i].first));
        t.attr.push_back(v.attribute(slots[i].second));
        t.value.push_back(v.value(rng.uniform_int(0, v.n_values - 1)));
    }
    return t;
}

// Zero-context probe: BOT QUESTION entity attr ANSWER -> value.
inline QaTask make_persistent_probe(const Vocab& v, const FactTable& facts, int i) {
    QaTask task;
    task.tokens = {kBotToken, Vocab::kQuestionMark, facts.entity[i], facts.attr[i],
                   Vocab::kAnswerMark};
    task.answer = facts.value[i];
    for (int k = 0; k < v.n_values; ++k) task.candidates.push_back(v.value(k));
    return task;
}

// ------------------------------------------------------------ corpus mixing

struct CorpusConfig {
    Vocab vocab;
    ClsBank bank;
    FactTable facts;
    double p_cls = 0.25;         // classification documents
    double p_qa = 0.35;          // contextual QA documents (fresh facts)
    double p_persistent = 0.2;   // fact-table documents
    double p_induction = 0.2;    // the rest: induction documents
    int qa_docs_lo = 1, qa_docs_hi = 3;
    int qa_doc_len = 24;
    int qa_questions_lo = 2, qa_questions_hi = 4;
    int cls_shots_lo = 1, cls_shots_hi = 4;
    int cls_classes = 4;
    double cls_anonymous_prob = 0.5;
    double cls_noise = 0.0;
    InductionConfig induction;
};

// Training document: articles followed by several answered questions, so
// one document supervises retrieval across the preceding articles several
// times. Articles sometimes restate their facts in a second shuffled pass,
// and questions sometimes repeat an earlier question; both give a dense
// match-the-repetition path into the harder single-exposure retrieval.
// Sometimes ends the article run with a filler-only article so eval-style
// padding stays in distribution.
inline std::vector<int> gen_qa_doc(Rng& rng, const CorpusConfig& c) {
    const Vocab& v = c.vocab;
    int n_docs = rng.uniform_int(c.qa_docs_lo, c.qa_docs_hi);
    int n_attrs = 3;
    std::vector<int> ents(v.n_entities);
    for (int i = 0; i < v.n_entities; ++i) ents[i] = v.entity(i);
    rng.shuffle(ents);

    std::vector<QaArticle> arts;
    std::vector<int> doc = {Vocab::kQaPreamble};
    for (int d = 0; d < n_docs; ++d) {
        arts.push_back(sample_article(rng, v, ents[d], n_attrs));
        int passes = rng.uniform() < 0.5 ? 2 : 1;
        std::vector<int> a = render_article(rng, v, arts[d], c.qa_doc_len, passes);
        doc.insert(doc.end(), a.begin(), a.end());
    }
    if (rng.uniform() < 0.5) {
        doc.push_back(Vocab::kDocMark);
        int n = rng.uniform_int(3, c.qa_doc_len - 1);
        for (int i = 0; i < n; ++i) doc.push_back(v.filler(rng.uniform_int(0, v.n_filler - 1)));
    }

    std::vector<std::pair<int, int>> fresh;  // (article, attribute slot)
    for (int d = 0; d < n_docs; ++d)
        for (int i = 0; i < n_attrs; ++i) fresh.emplace_back(d, i);
    rng.shuffle(fresh);
    int q = rng.uniform_int(c.qa_questions_lo, c.qa_questions_hi);
    std::size_t next_fresh = 0;
    std::vector<std::pair<int, int>> asked;
    for (int k = 0; k < q; ++k) {
        std::pair<int, int> pick;
        bool echo = !asked.empty() &&
                    (next_fresh >= fresh.size() || rng.uniform() < 0.5);
        if (echo)
            pick = asked[rng.uniform_int(0, static_cast<int>(asked.size()) - 1)];
        else
            pick = fresh[next_fresh++];
        asked.push_back(pick);
        const QaArticle& a = arts[pick.first];
        doc.push_back(Vocab::kQuestionMark);
        doc.push_back(a.entity);
        doc.push_back(a.attrs[pick.second]);
        doc.push_back(Vocab::kAnswerMark);
        doc.push_back(a.values[pick.second]);
    }
    return doc;
}

inline std::vector<int> gen_cls_doc(Rng& rng, const CorpusConfig& c) {
    bool anon = rng.uniform() < c.cls_anonymous_prob;
    int shots = rng.uniform_int(c.cls_shots_lo, c.cls_shots_hi);
    IclTask t = gen_icl_classification(rng, c.vocab, c.bank, c.cls_classes, shots, anon,
                                       c.cls_noise);
    PromptSpec spec;
    spec.newline_delim = rng.uniform() < 0.5;
    spec.shuffle_within_shot = rng.uniform() < 0.5;
    std::vector<int> p = build_prompt(t, spec);
    std::vector<int> doc(p.begin() + 1, p.end());
    doc.push_back(t.label_of_class[t.answer_class]);  // supervised ending
    return doc;
}

// A handful of facts rendered as an article, closed by one probe question.
inline std::vector<int> gen_persistent_doc(Rng& rng, const CorpusConfig& c) {
    const FactTable& f = c.facts;
    int n = std::min(f.size(), rng.uniform_int(3, 6));
    std::vector<int> doc = {Vocab::kDocMark};
    std::vector<int> idx(f.size());
    for (int i = 0; i < f.size(); ++i) idx[i] = i;
    rng.shuffle(idx);
    for (int k = 0; k < n; ++k) {
        doc.push_back(f.entity[idx[k]]);
        doc.push_back(f.attr[idx[k]]);
        doc.push_back(f.value[idx[k]]);
        doc.push_back(Vocab::kSpace);
    }
    int probe = idx[rng.uniform_int(0, n - 1)];
    doc.push_back(Vocab::kQuestionMark);
    doc.push_back(f.entity[probe]);
    doc.push_back(f.attr[probe]);
    doc.push_back(Vocab::kAnswerMark);
    doc.push_back(f.value[probe]);
    return doc;
}

// Fixed-length sequences stitched from sampled documents (BOT doc EOT BOT
// doc ... truncated), for attention profiling and other whole-row probes.
inline std::vector<std::vector<int>> stitch_sequences(const DocSampler& sampler, Rng& rng,
                                                      int count, int len) {
    detail::require(count >= 1 && len >= 2, "stitch: need count >= 1, len >= 2");
    std::vector<std::vector<int>> seqs;
    for (int s = 0; s < count; ++s) {
        std::vector<int> seq = {kBotToken};
        while (static_cast<int>(seq.size()) < len) {
            for (int t : sampler(rng)) {
                seq.push_back(t);
                if (static_cast<int>(seq.size()) == len) break;
            }
            if (static_cast<int>(seq.size()) + 2 <= len) {
                seq.push_back(kEotToken);
                seq.push_back(kBotToken);
            }
        }
        seq.resize(len);
        seqs.push_back(std::move(seq));
    }
    return seqs;
}

inline DocSampler make_corpus_sampler(const CorpusConfig& c) {
    detail::require(std::abs(c.p_cls + c.p_qa + c.p_persistent + c.p_induction - 1.0) < 1e-9,
                    "corpus: mixture must sum to 1");
    return [c](Rng& rng) -> std::vector<int> {
        double u = rng.uniform();
        if (u < c.p_cls) return gen_cls_doc(rng, c);
        if (u < c.p_cls + c.p_qa) return gen_qa_doc(rng, c);
        if (u < c.p_cls + c.p_qa + c.p_persistent) return gen_persistent_doc(rng, c);
        return gen_induction_doc(rng, c.vocab, c.induction);
    };
}

}  // namespace mosaic
