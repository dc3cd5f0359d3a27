// Command-line driver: train, eval, ablate, analyze-attn, flops. Every
// command reads one JSON config (plus dotted --set overrides), writes its
// resolved form next to its outputs, and is deterministic given the config.
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mosaic/config.hpp"

namespace fs = std::filesystem;
using namespace mosaic;

namespace {

// Config plus overrides, resolved once and echoed into the output directory
// so a rerun needs only the resolved file.
nlohmann::json resolve_config(const std::string& path, const std::vector<std::string>& sets) {
    nlohmann::json j = load_json_file(path);
    for (const std::string& s : sets) apply_set_override(j, s);
    RunConfig rc = run_config_from_json(j);  // validate early
    return run_config_to_json(rc);
}

std::string model_tag(const ModelWeights& w) {
    if (w.cfg.baseline) return "baseline";
    return w.stripped ? "mosaic_stripped" : "mosaic";
}

// Held-out corpus rows for attention profiling.
std::vector<std::vector<int>> profile_sequences(const RunConfig& rc, const Vocab& v, int count,
                                                int len) {
    DocSampler sampler = sampler_for(rc.data, v);
    Rng rng(rc.eval.seed ^ 0xa77e9d0full);
    return stitch_sequences(sampler, rng, count, len);
}

int cmd_train(const std::string& config_path, const std::vector<std::string>& sets,
              const std::string& out_dir, bool resume) {
    nlohmann::json resolved = resolve_config(config_path, sets);
    RunConfig rc = run_config_from_json(resolved);
    fs::create_directories(out_dir);
    write_json_file(out_dir + "/resolved.json", resolved);

    Vocab v;
    detail::require(rc.model.vocab_size >= v.size(),
                    "model.vocab_size must cover the task vocabulary (" +
                        std::to_string(v.size()) + " tokens)");
    DocSampler sampler = sampler_for(rc.data, v);

    ModelWeights w = init_weights(rc.model, rc.train.seed);
    OptimizerState opt;
    int start_step = 0;
    std::string rng_state;
    if (resume) {
        std::string ckpt = find_latest_checkpoint(out_dir);
        CheckpointMeta meta;
        w = load_checkpoint(ckpt, &meta);
        opt = load_optimizer_state(ckpt, w);
        start_step = meta.step;
        rng_state = meta.rng_state;
        std::printf("resuming from %s at step %d\n", ckpt.c_str(), start_step);
    }

    TrainResult res = train_loop(w, sampler, rc.train, out_dir,
                                 resume ? &opt : nullptr, start_step, rng_state);
    std::printf("trained %d steps, final loss %.6f, checkpoint %s\n", res.steps_run,
                res.final_loss, res.final_checkpoint.c_str());
    return 0;
}

void run_suite(const std::string& suite, const RunConfig& rc, const ModelWeights& w,
               const std::string& out_dir) {
    Vocab v;
    const EvalConfig& ec = rc.eval;
    Predictor pred = model_predictor(w, rc.model.m_eval);
    std::string tag = model_tag(w);
    std::vector<EvalRow> rows;

    // each suite derives its own rng from the eval seed, so "all" produces
    // byte-identical reports to running suites one at a time
    if (suite == "induction") {
        Rng rng(ec.seed ^ 0x1d);
        double acc = eval_induction(w, rng, v, rc.data.induction, ec.n_tasks, rc.model.m_eval);
        rows.push_back({"induction", tag, rc.data.induction.length, 0, "-", acc, ec.n_tasks});
    } else if (suite == "icl") {
        Rng rng(ec.seed ^ 0x2d);
        ClsBank bank = bank_for(rc.data, v);
        IclOutcome sem = eval_icl(pred, v, bank, rng, ec.n_tasks, ec.shots, false,
                                  ec.n_classes, tag);
        IclOutcome anon = eval_icl(pred, v, bank, rng, ec.n_tasks, ec.shots, true,
                                   ec.n_classes, tag);
        rows = sem.rows;
        rows.insert(rows.end(), anon.rows.begin(), anon.rows.end());
    } else if (suite == "qa") {
        Rng rng(ec.seed ^ 0x3d);
        rows.push_back(eval_qa(pred, v, rng, ec.n_tasks, ec.qa_docs, ec.qa_doc_len, ec.qa_len,
                               tag));
    } else if (suite == "persistent") {
        rows.push_back(eval_persistent(pred, v, facts_for(rc.data, v), tag));
    } else if (suite == "extrapolation") {
        Rng rng(ec.seed ^ 0x5d);
        rows = eval_extrapolation(pred, v, rng, ec.n_tasks, ec.qa_docs, ec.qa_doc_len,
                                  ec.qa_len, ec.factors, tag);
    } else {
        detail::require(false, "unknown suite: " + suite +
                                   " (available: induction icl qa persistent extrapolation all)");
    }

    std::string path = out_dir + "/report_" + suite + ".csv";
    write_report_csv(path, rows);
    for (const EvalRow& r : rows)
        std::printf("%s %s len=%d shots=%d %s acc=%.4f n=%d\n", r.task.c_str(),
                    r.model.c_str(), r.length, r.shots, r.variant.c_str(), r.accuracy, r.n);
    std::printf("wrote %s\n", path.c_str());
}

int cmd_eval(const std::string& config_path, const std::vector<std::string>& sets,
             const std::string& ckpt_dir, const std::string& suite,
             const std::string& out_dir) {
    static const std::vector<std::string> kSuites = {"induction", "icl", "qa", "persistent",
                                                     "extrapolation"};
    bool known = suite == "all";
    for (const std::string& s : kSuites) known = known || s == suite;
    detail::require(known,
                    "unknown suite: " + suite +
                        " (available: induction icl qa persistent extrapolation all)");

    nlohmann::json resolved = resolve_config(config_path, sets);
    RunConfig rc = run_config_from_json(resolved);
    ModelWeights w = load_checkpoint(ckpt_dir);
    fs::create_directories(out_dir);
    write_json_file(out_dir + "/resolved.json", resolved);

    if (suite == "all")
        for (const std::string& s : kSuites) run_suite(s, rc, w, out_dir);
    else
        run_suite(suite, rc, w, out_dir);
    return 0;
}

int cmd_ablate(const std::string& ckpt_dir, const std::string& out_dir) {
    detail::require(fs::absolute(out_dir) != fs::absolute(ckpt_dir),
                    "ablate writes a new checkpoint; out must differ from the input");
    CheckpointMeta meta;
    ModelWeights w = load_checkpoint(ckpt_dir, &meta);
    detail::require(!w.cfg.baseline, "ablate applies to the memory model only");
    std::int64_t before = w.param_count();
    ModelWeights s = strip_long_term(w);
    meta.stripped = true;
    save_checkpoint(out_dir, s, meta);
    std::printf("stripped long-term memories: %lld -> %lld parameters, wrote %s\n",
                static_cast<long long>(before), static_cast<long long>(s.param_count()),
                out_dir.c_str());
    return 0;
}

int cmd_analyze_attn(const std::string& config_path, const std::vector<std::string>& sets,
                     const std::string& ckpt_dir, const std::string& out_dir) {
    nlohmann::json resolved = resolve_config(config_path, sets);
    RunConfig rc = run_config_from_json(resolved);
    ModelWeights w = load_checkpoint(ckpt_dir);
    fs::create_directories(out_dir);
    write_json_file(out_dir + "/resolved.json", resolved);

    Vocab v;
    std::vector<std::vector<int>> seqs =
        profile_sequences(rc, v, rc.eval.profile_seqs, rc.eval.profile_len);

    std::vector<std::string> kinds =
        w.cfg.baseline ? std::vector<std::string>{"attn"} : std::vector<std::string>{"short", "long"};
    std::FILE* summary = std::fopen((out_dir + "/far_variance.csv").c_str(), "wb");
    detail::require(summary != nullptr, "cannot write summary csv");
    std::fprintf(summary, "kind,layer,far_variance\n");
    for (const std::string& kind : kinds) {
        for (int layer = -1; layer < w.cfg.n_layers; ++layer) {
            AttnProfile prof = attention_profile(w, seqs, w.cfg.m_eval, kind, layer);
            std::string stem = out_dir + "/profile_" + kind +
                               (layer < 0 ? "_all" : "_L" + std::to_string(layer)) + ".csv";
            write_profile_csv(stem, prof);
            double fv = far_region_variance(prof, w.cfg.h);
            std::fprintf(summary, "%s,%d,%.12g\n", kind.c_str(), layer, fv);
            if (layer < 0)
                std::printf("%s (all layers): far-region variance %.6g\n", kind.c_str(), fv);
        }
    }
    std::fclose(summary);
    std::printf("wrote profiles to %s\n", out_dir.c_str());
    return 0;
}

int cmd_flops(const std::string& config_path, const std::vector<std::string>& sets,
              int seq_len) {
    nlohmann::json resolved = resolve_config(config_path, sets);
    RunConfig rc = run_config_from_json(resolved);
    if (seq_len <= 0) seq_len = rc.train.seq_len;

    ModelWeights w = init_weights(rc.model, 0);
    double per_token = estimate_flops(rc.model, seq_len);
    std::printf("model: %s\n", rc.model.baseline ? "baseline" : "mosaic");
    std::printf("parameters: %lld\n", static_cast<long long>(w.param_count()));
    std::printf("forward flops/token @ T=%d (m=%d): %.6g  (%.6g per sequence)\n", seq_len,
                rc.model.m_eval, per_token, per_token * seq_len);
    if (!rc.model.baseline) {
        double stripped = estimate_flops(rc.model, seq_len, true);
        w.stripped = true;
        std::printf("stripped: %lld parameters, %.6g flops/token (%.6g per sequence)\n",
                    static_cast<long long>(w.param_count()), stripped, stripped * seq_len);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"memory-mosaic sequence models: train, evaluate, analyze"};
    app.require_subcommand(1);

    std::string config_path, out_dir, ckpt_dir, suite;
    std::vector<std::string> sets;
    bool resume = false;
    int seq_len = 0;

    CLI::App* train = app.add_subcommand("train", "train a model from a config");
    train->add_option("--config", config_path, "JSON run config")->required();
    train->add_option("--set", sets, "dotted-path override, e.g. model.d_model=64");
    train->add_option("--out", out_dir, "output directory")->required();
    train->add_flag("--resume", resume, "continue from the latest checkpoint in --out");

    CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint on a task suite");
    ev->add_option("--config", config_path, "JSON run config")->required();
    ev->add_option("--set", sets, "dotted-path override");
    ev->add_option("--checkpoint", ckpt_dir, "checkpoint directory")->required();
    ev->add_option("--suite", suite, "induction|icl|qa|persistent|extrapolation|all")
        ->required();
    ev->add_option("--out", out_dir, "output directory")->required();

    CLI::App* ab = app.add_subcommand("ablate", "strip long-term memories into a new checkpoint");
    ab->add_option("--checkpoint", ckpt_dir, "input checkpoint directory")->required();
    ab->add_option("--out", out_dir, "output checkpoint directory")->required();

    CLI::App* an = app.add_subcommand("analyze-attn", "attention profiles over far positions");
    an->add_option("--config", config_path, "JSON run config")->required();
    an->add_option("--set", sets, "dotted-path override");
    an->add_option("--checkpoint", ckpt_dir, "checkpoint directory")->required();
    an->add_option("--out", out_dir, "output directory")->required();

    CLI::App* fl = app.add_subcommand("flops", "parameter and flop estimates");
    fl->add_option("--config", config_path, "JSON run config")->required();
    fl->add_option("--set", sets, "dotted-path override");
    fl->add_option("--seq-len", seq_len, "sequence length (default: train.seq_len)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train->parsed()) return cmd_train(config_path, sets, out_dir, resume);
        if (ev->parsed()) return cmd_eval(config_path, sets, ckpt_dir, suite, out_dir);
        if (ab->parsed()) return cmd_ablate(ckpt_dir, out_dir);
        if (an->parsed()) return cmd_analyze_attn(config_path, sets, ckpt_dir, out_dir);
        if (fl->parsed()) return cmd_flops(config_path, sets, seq_len);
    } catch (const TrainingDiverged& e) {
        std::fprintf(stderr, "error: training diverged: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
