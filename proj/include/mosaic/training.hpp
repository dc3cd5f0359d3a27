#pragma once
// Next-token training: AdamW with decoupled weight decay, linear warmup +
// cosine decay to lr_peak/100, global-norm clipping, document packing with
// begin/end markers, per-step sampling of the long-term delay m, metrics
// CSV, and periodic checkpoints. Everything is deterministic in (seed,
// config); wall_ms is the single metrics column allowed to vary.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mosaic/model.hpp"
#include "mosaic/serialize.hpp"

namespace mosaic {

// Reserved token ids shared by packing and the synthetic corpora.
constexpr int kPadToken = 0;
constexpr int kBotToken = 1;  // document begin marker
constexpr int kEotToken = 2;  // document end marker

struct TrainConfig {
    int batch_size = 8;
    int seq_len = 128;
    double lr_peak = 3e-3;
    int warmup_steps = 100;
    int total_steps = 1000;
    double lr_floor_ratio = 0.01;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.95;
    double weight_decay = 0.1;
    double clip_norm = 1.0;
    std::uint64_t seed = 0;
    int checkpoint_every = 0;    // steps between periodic checkpoints; 0 = final only
    bool decay_scalars = false;  // also decay gains/gamma/theta (off by default)

    void validate() const {
        detail::require(batch_size >= 1 && seq_len >= 2 && total_steps >= 1,
                        "train config: sizes must be positive");
        detail::require(warmup_steps >= 0 && warmup_steps < total_steps,
                        "train config: need warmup_steps < total_steps");
        detail::require(lr_peak > 0.0 && lr_floor_ratio > 0.0 && lr_floor_ratio <= 1.0,
                        "train config: learning rate bounds");
        detail::require(clip_norm > 0.0 && weight_decay >= 0.0, "train config: optimizer bounds");
    }
};

// Linear 0 -> lr_peak over warmup, then cosine lr_peak -> lr_peak*floor_ratio.
inline double lr_at(int step, const TrainConfig& c) {
    detail::require(0 <= step && step <= c.total_steps, "lr_at: step out of range");
    if (step < c.warmup_steps)
        return c.lr_peak * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
    double floor = c.lr_peak * c.lr_floor_ratio;
    double span = static_cast<double>(c.total_steps - c.warmup_steps);
    double p = static_cast<double>(step - c.warmup_steps) / span;
    return floor + (c.lr_peak - floor) * 0.5 * (1.0 + std::cos(M_PI * p));
}

using GradMap = std::unordered_map<std::string, Tensor>;

struct OptimizerState {
    int step = 0;  // completed optimizer steps (bias-correction exponent)
    std::unordered_map<std::string, Tensor> m, v;
};

// Global L2 norm over all gradients in the model's visit order; scales in
// place when above max_norm. Returns the pre-clip norm.
inline double clip_grad_norm(ModelWeights& w, GradMap& grads, double max_norm) {
    double sq = 0.0;
    w.visit([&](const std::string& name, Tensor&, bool) {
        auto it = grads.find(name);
        if (it == grads.end()) return;
        const Tensor& g = it->second;
        for (std::int64_t i = 0; i < g.numel(); ++i) sq += g.ptr()[i] * g.ptr()[i];
    });
    double norm = std::sqrt(sq);
    if (norm > max_norm) {
        double scale = max_norm / norm;
        for (auto& [name, g] : grads)
            for (std::int64_t i = 0; i < g.numel(); ++i) g.mut()[i] *= scale;
    }
    return norm;
}

// One AdamW update. Decoupled weight decay runs before the Adam step; decay
// applies to matrices only unless decay_scalars is set. Throws on any
// non-finite gradient (the caller reports and halts).
inline void adamw_step(ModelWeights& w, const GradMap& grads, OptimizerState& st, double lr,
                       const TrainConfig& c) {
    st.step += 1;
    double bc1 = 1.0 - std::pow(c.adam_beta1, st.step);
    double bc2 = 1.0 - std::pow(c.adam_beta2, st.step);
    const double eps = 1e-8;

    w.visit([&](const std::string& name, Tensor& p, bool decay) {
        auto it = grads.find(name);
        if (it == grads.end()) return;
        const Tensor& g = it->second;
        detail::require(g.same_shape(p), "adamw_step: gradient shape mismatch for " + name);
        for (std::int64_t i = 0; i < g.numel(); ++i)
            detail::require(std::isfinite(g.ptr()[i]),
                            "adamw_step: non-finite gradient in " + name);

        if (!st.m.count(name)) {
            st.m.emplace(name, Tensor::zeros(p.shape()));
            st.v.emplace(name, Tensor::zeros(p.shape()));
        }
        Tensor& m = st.m[name];
        Tensor& v = st.v[name];
        double wd = (decay || c.decay_scalars) ? c.weight_decay : 0.0;
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            double gi = g.ptr()[i];
            p.mut()[i] *= 1.0 - lr * wd;
            m.mut()[i] = c.adam_beta1 * m.ptr()[i] + (1.0 - c.adam_beta1) * gi;
            v.mut()[i] = c.adam_beta2 * v.ptr()[i] + (1.0 - c.adam_beta2) * gi * gi;
            double mhat = m.ptr()[i] / bc1;
            double vhat = v.ptr()[i] / bc2;
            p.mut()[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    });
}

// One delay per optimizer step, shared across the batch.
inline int sample_m(Rng& rng, const ModelConfig& c) { return rng.uniform_int(c.m_lo, c.m_hi); }

// Yields one document of token ids (content only; packing adds markers).
using DocSampler = std::function<std::vector<int>(Rng&)>;

struct Batch {
    std::vector<std::vector<int>> tokens, targets, doc_ids;
    std::vector<std::vector<std::uint8_t>> loss_mask;
};

// Packs sampled documents into batch rows: [BOT doc EOT][BOT doc EOT]...,
// truncating the last document at the row boundary and padding any leftover.
// Every pad token gets a fresh document id so it can neither see nor be seen.
// The loss counts position i only when i+1 exists in the same document, so
// each document's final position (and all pads) carry no loss.
inline Batch pack_batch(const DocSampler& sampler, Rng& rng, int batch_size, int seq_len) {
    Batch b;
    for (int r = 0; r < batch_size; ++r) {
        std::vector<int> toks, docs;
        toks.reserve(seq_len);
        int doc_id = 0;
        while (static_cast<int>(toks.size()) < seq_len) {
            std::vector<int> doc = sampler(rng);
            detail::require(!doc.empty(), "pack_batch: sampler produced an empty document");
            toks.push_back(kBotToken);
            docs.push_back(doc_id);
            for (int t : doc) {
                if (static_cast<int>(toks.size()) >= seq_len) break;
                toks.push_back(t);
                docs.push_back(doc_id);
            }
            if (static_cast<int>(toks.size()) < seq_len) {
                toks.push_back(kEotToken);
                docs.push_back(doc_id);
            }
            ++doc_id;
        }
        toks.resize(seq_len);
        docs.resize(seq_len);
        for (int i = 0; i < seq_len; ++i)
            if (toks[i] == kPadToken) docs[i] = doc_id++;  // isolate pads

        std::vector<int> targets(seq_len, kPadToken);
        std::vector<std::uint8_t> mask(seq_len, 0);
        for (int i = 0; i + 1 < seq_len; ++i)
            if (docs[i] == docs[i + 1]) {
                targets[i] = toks[i + 1];
                mask[i] = 1;
            }
        b.tokens.push_back(std::move(toks));
        b.targets.push_back(std::move(targets));
        b.doc_ids.push_back(std::move(docs));
        b.loss_mask.push_back(std::move(mask));
    }
    return b;
}

struct StepStats {
    double loss = 0.0;
    double grad_norm = 0.0;
};

// Forward + backward over one batch; gradients land in `grads` keyed by
// parameter name. Loss is the mean over all unmasked positions in the batch.
inline StepStats batch_loss_and_grads(ModelWeights& w, const Batch& b, int m, GradMap* grads) {
    Graph g;
    LeafMap lm(g);
    std::int64_t total = 0;
    for (const auto& mask : b.loss_mask)
        for (std::uint8_t v : mask) total += v ? 1 : 0;
    detail::require(total > 0, "batch_loss_and_grads: batch carries no loss positions");

    Var loss;
    bool first = true;
    for (std::size_t r = 0; r < b.tokens.size(); ++r) {
        std::int64_t count = 0;
        for (std::uint8_t v : b.loss_mask[r]) count += v ? 1 : 0;
        if (count == 0) continue;
        Var logits = model_logits(g, lm, w, b.tokens[r], b.doc_ids[r], m);
        Var ce = g.cross_entropy(logits, make_ints(b.targets[r]), make_mask(b.loss_mask[r]));
        Var scaled = g.mul_c(ce, static_cast<double>(count) / static_cast<double>(total));
        loss = first ? scaled : g.add(loss, scaled);
        first = false;
    }

    StepStats s;
    s.loss = g.value(loss).item();
    if (grads) {
        g.backward(loss);
        w.visit([&](const std::string& name, Tensor& p, bool) {
            grads->emplace(name, lm.grad(p));
        });
    }
    return s;
}

namespace detail {

inline std::string rng_state_string(Rng& rng) {
    std::ostringstream os;
    os << rng.engine();
    return os.str();
}

inline void rng_state_restore(Rng& rng, const std::string& s) {
    std::istringstream is(s);
    is >> rng.engine();
    require(!is.fail(), "train: bad rng state string");
}

}  // namespace detail

inline void save_optimizer_state(const std::filesystem::path& dir, const OptimizerState& st,
                                 ModelWeights& w) {
    std::filesystem::create_directories(dir / "optimizer");
    nlohmann::json j = {{"step", st.step}};
    detail::write_file(dir / "optimizer" / "state.json", j.dump(2) + "\n");
    w.visit([&](const std::string& name, Tensor&, bool) {
        auto mit = st.m.find(name);
        if (mit == st.m.end()) return;
        write_tensor_f32(dir / "optimizer" / (name + ".m"), name + ".m", mit->second);
        write_tensor_f32(dir / "optimizer" / (name + ".v"), name + ".v", st.v.at(name));
    });
}

inline OptimizerState load_optimizer_state(const std::filesystem::path& dir, ModelWeights& w) {
    OptimizerState st;
    nlohmann::json j =
        nlohmann::json::parse(detail::read_file(dir / "optimizer" / "state.json"));
    st.step = j.at("step");
    w.visit([&](const std::string& name, Tensor&, bool) {
        std::filesystem::path stem = dir / "optimizer" / (name + ".m");
        if (!std::filesystem::exists(stem.string() + ".bin")) return;
        st.m.emplace(name, read_tensor_f32(stem));
        st.v.emplace(name, read_tensor_f32(dir / "optimizer" / (name + ".v")));
    });
    return st;
}

struct TrainResult {
    int steps_run = 0;
    double final_loss = 0.0;
    std::filesystem::path final_checkpoint;
};

// Thrown when the loss or a gradient stops being finite; the diagnostic dump
// has already been written when this reaches the caller.
struct TrainingDiverged : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Runs steps [start_step, total_steps). Appends one metrics row per step:
// step,lr,m,loss,grad_norm,wall_ms. Periodic checkpoints go to
// out_dir/ckpt_<step>, the final state to out_dir/final. Pass an empty
// out_dir to train purely in memory (tests). For resumption, pass the
// optimizer state, start step and rng state recovered from a checkpoint.
inline TrainResult train_loop(ModelWeights& w, const DocSampler& sampler, const TrainConfig& tc,
                              const std::filesystem::path& out_dir,
                              OptimizerState* resume_opt = nullptr, int start_step = 0,
                              const std::string& resume_rng = "") {
    tc.validate();
    w.cfg.validate();
    bool emit = !out_dir.empty();
    if (emit) std::filesystem::create_directories(out_dir);

    Rng rng(tc.seed);
    if (!resume_rng.empty()) detail::rng_state_restore(rng, resume_rng);
    OptimizerState st;
    if (resume_opt) st = std::move(*resume_opt);

    std::ofstream metrics;
    if (emit) {
        bool fresh = start_step == 0;
        metrics.open(out_dir / "metrics.csv", fresh ? std::ios::trunc : std::ios::app);
        detail::require(metrics.good(), "train: cannot open metrics.csv");
        if (fresh) metrics << "step,lr,m,loss,grad_norm,wall_ms\n";
    }

    auto checkpoint = [&](const std::filesystem::path& dir, int step) {
        CheckpointMeta meta;
        meta.seed = tc.seed;
        meta.step = step;
        meta.rng_state = detail::rng_state_string(rng);
        save_checkpoint(dir, w, meta);
        save_optimizer_state(dir, st, w);
    };

    TrainResult res;
    for (int step = start_step; step < tc.total_steps; ++step) {
        auto t0 = std::chrono::steady_clock::now();
        int m = sample_m(rng, w.cfg);
        Batch b = pack_batch(sampler, rng, tc.batch_size, tc.seq_len);

        GradMap grads;
        StepStats s;
        try {
            s = batch_loss_and_grads(w, b, m, &grads);
            detail::require(std::isfinite(s.loss), "loss is not finite");
            s.grad_norm = clip_grad_norm(w, grads, tc.clip_norm);
            adamw_step(w, grads, st, lr_at(step, tc), tc);
        } catch (const std::exception& e) {
            if (emit) {
                nlohmann::json diag = {{"step", step}, {"loss", s.loss}, {"error", e.what()}};
                detail::write_file(out_dir / "divergence.json", diag.dump(2) + "\n");
            }
            throw TrainingDiverged(std::string("training diverged at step ") +
                                   std::to_string(step) + ": " + e.what());
        }

        double wall_ms =
            std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
                .count();
        if (emit) {
            char line[160];
            std::snprintf(line, sizeof(line), "%d,%.8g,%d,%.17g,%.17g,%.1f\n", step,
                          lr_at(step, tc), m, s.loss, s.grad_norm, wall_ms);
            metrics << line;
            metrics.flush();
        }
        if (emit && tc.checkpoint_every > 0 && (step + 1) % tc.checkpoint_every == 0 &&
            step + 1 < tc.total_steps)
            checkpoint(out_dir / ("ckpt_" + std::to_string(step + 1)), step + 1);

        res.steps_run = step + 1;
        res.final_loss = s.loss;
    }

    if (emit) {
        checkpoint(out_dir / "final", tc.total_steps);
        res.final_checkpoint = out_dir / "final";
    }
    return res;
}

// Latest resumable checkpoint inside a training output directory.
inline std::filesystem::path find_latest_checkpoint(const std::filesystem::path& out_dir) {
    if (std::filesystem::exists(out_dir / "final" / "config.json")) return out_dir / "final";
    int best = -1;
    for (const auto& e : std::filesystem::directory_iterator(out_dir)) {
        std::string name = e.path().filename().string();
        if (name.rfind("ckpt_", 0) != 0) continue;
        int step = std::atoi(name.c_str() + 5);
        if (step > best && std::filesystem::exists(e.path() / "config.json")) best = step;
    }
    detail::require(best >= 0, "resume: no checkpoint found in " + out_dir.string());
    return out_dir / ("ckpt_" + std::to_string(best));
}

}  // namespace mosaic
