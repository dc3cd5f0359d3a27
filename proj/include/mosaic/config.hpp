#pragma once
// Run configuration: one JSON document with model / train / data / eval
// sections, lenient on input (absent keys keep defaults), written back out
// complete so a resolved config reruns bit-identically. Dotted-path --set
// overrides edit the JSON before parsing.

#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mosaic/eval.hpp"
#include "mosaic/serialize.hpp"
#include "mosaic/tasks.hpp"
#include "mosaic/training.hpp"

namespace mosaic {

struct DataConfig {
    std::string corpus = "mixed";  // "mixed" or "induction"
    std::uint64_t seed = 1;        // derives the class bank, fact table, and stream
    int n_facts = 12;
    double p_cls = 0.25, p_qa = 0.35, p_persistent = 0.2, p_induction = 0.2;
    InductionConfig induction;
};

struct EvalConfig {
    std::uint64_t seed = 5;
    int n_tasks = 200;
    int n_classes = 4;
    std::vector<int> shots = {1, 2, 4, 8};
    int qa_docs = 3;
    int qa_doc_len = 24;
    int qa_len = 256;
    std::vector<int> factors = {1, 2, 4};
    int profile_seqs = 100;
    int profile_len = 256;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    DataConfig data;
    EvalConfig eval;
};

// ------------------------------------------------------------- json <-> cfg

inline void overlay_model(ModelConfig& c, const nlohmann::json& j) {
    c.n_layers = j.value("n_layers", c.n_layers);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.h = j.value("h", c.h);
    c.m_lo = j.value("m_lo", c.m_lo);
    c.m_hi = j.value("m_hi", c.m_hi);
    c.m_eval = j.value("m_eval", c.m_eval);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
    c.combine_sum = j.value("combine_sum", c.combine_sum);
    c.gated_keys = j.value("gated_keys", c.gated_keys);
    c.lambda_fixed = j.value("lambda_fixed", c.lambda_fixed);
    c.baseline = j.value("baseline", c.baseline);
}

inline void overlay_train(TrainConfig& c, const nlohmann::json& j) {
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seq_len = j.value("seq_len", c.seq_len);
    c.lr_peak = j.value("lr_peak", c.lr_peak);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.lr_floor_ratio = j.value("lr_floor_ratio", c.lr_floor_ratio);
    c.adam_beta1 = j.value("adam_beta1", c.adam_beta1);
    c.adam_beta2 = j.value("adam_beta2", c.adam_beta2);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.clip_norm = j.value("clip_norm", c.clip_norm);
    c.seed = j.value("seed", c.seed);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.decay_scalars = j.value("decay_scalars", c.decay_scalars);
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return {{"batch_size", c.batch_size},
            {"seq_len", c.seq_len},
            {"lr_peak", c.lr_peak},
            {"warmup_steps", c.warmup_steps},
            {"total_steps", c.total_steps},
            {"lr_floor_ratio", c.lr_floor_ratio},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"weight_decay", c.weight_decay},
            {"clip_norm", c.clip_norm},
            {"seed", c.seed},
            {"checkpoint_every", c.checkpoint_every},
            {"decay_scalars", c.decay_scalars}};
}

inline void overlay_data(DataConfig& c, const nlohmann::json& j) {
    c.corpus = j.value("corpus", c.corpus);
    c.seed = j.value("seed", c.seed);
    c.n_facts = j.value("n_facts", c.n_facts);
    c.p_cls = j.value("p_cls", c.p_cls);
    c.p_qa = j.value("p_qa", c.p_qa);
    c.p_persistent = j.value("p_persistent", c.p_persistent);
    c.p_induction = j.value("p_induction", c.p_induction);
    if (j.contains("induction")) {
        const nlohmann::json& k = j.at("induction");
        c.induction.n_tokens = k.value("n_tokens", c.induction.n_tokens);
        c.induction.n_pairs = k.value("n_pairs", c.induction.n_pairs);
        c.induction.length = k.value("length", c.induction.length);
    }
}

inline nlohmann::json data_config_to_json(const DataConfig& c) {
    return {{"corpus", c.corpus},
            {"seed", c.seed},
            {"n_facts", c.n_facts},
            {"p_cls", c.p_cls},
            {"p_qa", c.p_qa},
            {"p_persistent", c.p_persistent},
            {"p_induction", c.p_induction},
            {"induction",
             {{"n_tokens", c.induction.n_tokens},
              {"n_pairs", c.induction.n_pairs},
              {"length", c.induction.length}}}};
}

inline void overlay_eval(EvalConfig& c, const nlohmann::json& j) {
    c.seed = j.value("seed", c.seed);
    c.n_tasks = j.value("n_tasks", c.n_tasks);
    c.n_classes = j.value("n_classes", c.n_classes);
    if (j.contains("shots")) c.shots = j.at("shots").get<std::vector<int>>();
    c.qa_docs = j.value("qa_docs", c.qa_docs);
    c.qa_doc_len = j.value("qa_doc_len", c.qa_doc_len);
    c.qa_len = j.value("qa_len", c.qa_len);
    if (j.contains("factors")) c.factors = j.at("factors").get<std::vector<int>>();
    c.profile_seqs = j.value("profile_seqs", c.profile_seqs);
    c.profile_len = j.value("profile_len", c.profile_len);
}

inline nlohmann::json eval_config_to_json(const EvalConfig& c) {
    return {{"seed", c.seed},         {"n_tasks", c.n_tasks},
            {"n_classes", c.n_classes}, {"shots", c.shots},
            {"qa_docs", c.qa_docs},   {"qa_doc_len", c.qa_doc_len},
            {"qa_len", c.qa_len},     {"factors", c.factors},
            {"profile_seqs", c.profile_seqs}, {"profile_len", c.profile_len}};
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig rc;
    if (j.contains("model")) overlay_model(rc.model, j.at("model"));
    if (j.contains("train")) overlay_train(rc.train, j.at("train"));
    if (j.contains("data")) overlay_data(rc.data, j.at("data"));
    if (j.contains("eval")) overlay_eval(rc.eval, j.at("eval"));
    rc.model.validate();
    rc.train.validate();
    return rc;
}

inline nlohmann::json run_config_to_json(const RunConfig& rc) {
    return {{"model", model_config_to_json(rc.model)},
            {"train", train_config_to_json(rc.train)},
            {"data", data_config_to_json(rc.data)},
            {"eval", eval_config_to_json(rc.eval)}};
}

// ----------------------------------------------------------------- file i/o

inline nlohmann::json load_json_file(const std::string& path) {
    std::ifstream in(path);
    detail::require(in.good(), "cannot open config file: " + path);
    nlohmann::json j;
    in >> j;
    return j;
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path);
    detail::require(out.good(), "cannot write: " + path);
    out << j.dump(2) << "\n";
}

// Applies "a.b.c=value" onto a JSON document; the value is parsed as a JSON
// literal when possible (numbers, bools, arrays), else taken as a string.
inline void apply_set_override(nlohmann::json& j, const std::string& spec) {
    std::size_t eq = spec.find('=');
    detail::require(eq != std::string::npos && eq > 0, "override must look like path=value: " + spec);
    std::string path = spec.substr(0, eq), value = spec.substr(eq + 1);

    nlohmann::json parsed;
    try {
        parsed = nlohmann::json::parse(value);
    } catch (const nlohmann::json::parse_error&) {
        parsed = value;
    }

    nlohmann::json* node = &j;
    std::size_t start = 0;
    while (true) {
        std::size_t dot = path.find('.', start);
        std::string key = path.substr(start, dot == std::string::npos ? dot : dot - start);
        detail::require(!key.empty(), "empty key in override path: " + spec);
        if (dot == std::string::npos) {
            (*node)[key] = parsed;
            return;
        }
        node = &(*node)[key];
        start = dot + 1;
    }
}

// ------------------------------------------------------------- shared data

// The class bank and fact table are functions of the data seed alone, so the
// training corpus and every eval suite see the same latent world.
inline ClsBank bank_for(const DataConfig& d, const Vocab& v) {
    Rng rng(d.seed ^ 0xba11ad5eed5ull);
    return make_cls_bank(rng, v);
}

inline FactTable facts_for(const DataConfig& d, const Vocab& v) {
    Rng rng(d.seed ^ 0xfac7ab1eull);
    return make_fact_table(rng, v, d.n_facts);
}

inline DocSampler sampler_for(const DataConfig& d, const Vocab& v) {
    if (d.corpus == "induction") {
        InductionConfig ic = d.induction;
        return [ic, v](Rng& rng) { return gen_induction_doc(rng, v, ic); };
    }
    detail::require(d.corpus == "mixed", "unknown corpus kind: " + d.corpus);
    CorpusConfig cc;
    cc.vocab = v;
    cc.bank = bank_for(d, v);
    cc.facts = facts_for(d, v);
    cc.p_cls = d.p_cls;
    cc.p_qa = d.p_qa;
    cc.p_persistent = d.p_persistent;
    cc.p_induction = d.p_induction;
    cc.induction = d.induction;
    return make_corpus_sampler(cc);
}

}  // namespace mosaic
