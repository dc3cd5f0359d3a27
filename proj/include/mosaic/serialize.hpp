#pragma once
// Checkpoint I/O. A checkpoint is a directory holding config.json (model
// config + run metadata) and, per named parameter, a raw little-endian
// float32 payload `<name>.bin` with a JSON sidecar `<name>.json` recording
// {name, shape, dtype}. Values are widened back to double on load. Nothing
// here ever mutates an existing checkpoint directory in place on load.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "mosaic/model.hpp"

namespace mosaic {

namespace detail {

inline void append_le_f32(std::string& out, float f) {
    std::uint32_t bits;
    static_assert(sizeof(bits) == sizeof(f));
    std::memcpy(&bits, &f, 4);
    out.push_back(static_cast<char>(bits & 0xff));
    out.push_back(static_cast<char>((bits >> 8) & 0xff));
    out.push_back(static_cast<char>((bits >> 16) & 0xff));
    out.push_back(static_cast<char>((bits >> 24) & 0xff));
}

inline float read_le_f32(const unsigned char* p) {
    std::uint32_t bits = static_cast<std::uint32_t>(p[0]) |
                         (static_cast<std::uint32_t>(p[1]) << 8) |
                         (static_cast<std::uint32_t>(p[2]) << 16) |
                         (static_cast<std::uint32_t>(p[3]) << 24);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    require(out.good(), "serialize: cannot open for writing: " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(out.good(), "serialize: write failed: " + path.string());
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), "serialize: cannot open: " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace detail

// Writes <stem>.bin and <stem>.json for one tensor.
inline void write_tensor_f32(const std::filesystem::path& stem, const std::string& name,
                             const Tensor& t) {
    std::string payload;
    payload.reserve(static_cast<std::size_t>(t.numel()) * 4);
    for (std::int64_t i = 0; i < t.numel(); ++i)
        detail::append_le_f32(payload, static_cast<float>(t.ptr()[i]));
    detail::write_file(std::filesystem::path(stem.string() + ".bin"), payload);

    nlohmann::json side = {{"name", name}, {"shape", t.shape()}, {"dtype", "f32"}};
    detail::write_file(std::filesystem::path(stem.string() + ".json"), side.dump(2) + "\n");
}

inline Tensor read_tensor_f32(const std::filesystem::path& stem) {
    nlohmann::json side =
        nlohmann::json::parse(detail::read_file(std::filesystem::path(stem.string() + ".json")));
    detail::require(side.at("dtype").get<std::string>() == "f32",
                    "serialize: unsupported dtype in " + stem.string());
    std::vector<int> shape = side.at("shape").get<std::vector<int>>();
    std::string payload = detail::read_file(std::filesystem::path(stem.string() + ".bin"));
    Tensor t(shape);
    detail::require(static_cast<std::int64_t>(payload.size()) == t.numel() * 4,
                    "serialize: payload size mismatch in " + stem.string());
    const unsigned char* p = reinterpret_cast<const unsigned char*>(payload.data());
    for (std::int64_t i = 0; i < t.numel(); ++i)
        t.mut()[i] = static_cast<double>(detail::read_le_f32(p + 4 * i));
    return t;
}

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},
            {"d_model", c.d_model},
            {"n_heads", c.n_heads},
            {"vocab_size", c.vocab_size},
            {"h", c.h},
            {"m_lo", c.m_lo},
            {"m_hi", c.m_hi},
            {"m_eval", c.m_eval},
            {"max_seq_len", c.max_seq_len},
            {"ffn_hidden", c.ffn_hidden},
            {"combine_sum", c.combine_sum},
            {"gated_keys", c.gated_keys},
            {"lambda_fixed", c.lambda_fixed},
            {"baseline", c.baseline}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers");
    c.d_model = j.at("d_model");
    c.n_heads = j.at("n_heads");
    c.vocab_size = j.at("vocab_size");
    c.h = j.at("h");
    c.m_lo = j.at("m_lo");
    c.m_hi = j.at("m_hi");
    c.m_eval = j.at("m_eval");
    c.max_seq_len = j.at("max_seq_len");
    c.ffn_hidden = j.at("ffn_hidden");
    c.combine_sum = j.at("combine_sum");
    c.gated_keys = j.at("gated_keys");
    c.lambda_fixed = j.at("lambda_fixed");
    c.baseline = j.at("baseline");
    c.validate();
    return c;
}

// Run metadata stored in config.json. No wall-clock fields: a rerun with the
// same seed must reproduce the checkpoint byte for byte.
struct CheckpointMeta {
    std::uint64_t seed = 0;
    int step = 0;
    bool stripped = false;
    std::string rng_state;  // serialized engine, lets training resume exactly
};

inline void save_checkpoint(const std::filesystem::path& dir, const ModelWeights& w,
                            const CheckpointMeta& meta) {
    std::filesystem::create_directories(dir);
    nlohmann::json j = {{"format_version", 1},
                        {"model", model_config_to_json(w.cfg)},
                        {"run",
                         {{"seed", meta.seed},
                          {"step", meta.step},
                          {"stripped", w.stripped},
                          {"rng_state", meta.rng_state}}}};
    detail::write_file(dir / "config.json", j.dump(2) + "\n");

    const_cast<ModelWeights&>(w).visit([&](const std::string& name, Tensor& t, bool) {
        write_tensor_f32(dir / name, name, t);
    });
}

inline ModelWeights load_checkpoint(const std::filesystem::path& dir,
                                    CheckpointMeta* meta = nullptr) {
    nlohmann::json j = nlohmann::json::parse(detail::read_file(dir / "config.json"));
    ModelConfig c = model_config_from_json(j.at("model"));
    ModelWeights w;
    w.cfg = c;
    w.stripped = j.at("run").at("stripped").get<bool>();
    if (meta) {
        meta->seed = j.at("run").at("seed").get<std::uint64_t>();
        meta->step = j.at("run").at("step").get<int>();
        meta->stripped = w.stripped;
        meta->rng_state = j.at("run").value("rng_state", "");
    }

    // allocate at the right shapes, then overwrite from disk
    ModelWeights shaped = init_weights(c, 0);
    w.embed = shaped.embed;
    w.unembed = shaped.unembed;
    w.final_gain = shaped.final_gain;
    w.layers = std::move(shaped.layers);
    w.visit([&](const std::string& name, Tensor& t, bool) {
        Tensor loaded = read_tensor_f32(dir / name);
        detail::require(loaded.same_shape(t),
                        "serialize: shape mismatch for parameter " + name);
        t = std::move(loaded);
    });
    return w;
}

}  // namespace mosaic
