#pragma once
// Bit-exact model persistence.  Container layout:
//   bytes 0..3   magic "HPRN"
//   bytes 4..7   format version, unsigned 32-bit little-endian
//   bytes 8..15  metadata length N, unsigned 64-bit little-endian
//   N bytes      UTF-8 JSON metadata (geometry, gate state, vocabulary,
//                provenance, tensor directory with byte offsets)
//   rest         raw little-endian 32-bit float tensor payloads
// The metadata JSON is emitted with sorted keys and the payload order follows
// the tensor directory, so save -> load -> save reproduces identical bytes.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "headlab/model.hpp"

namespace headlab {

constexpr uint32_t CHECKPOINT_VERSION = 1;
inline const char CHECKPOINT_MAGIC[5] = "HPRN";

struct Checkpoint {
    TransformerModel<float> model;
    std::vector<std::string> vocab_tokens;
    nlohmann::json provenance;  // free-form training lineage (seeds, steps, task)
};

namespace detail {

inline void append_u32_le(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void append_u64_le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void append_f32_le(std::string& out, float f) {
    append_u32_le(out, std::bit_cast<uint32_t>(f));
}

struct ByteReader {
    const std::string& bytes;
    size_t pos = 0;

    void need(size_t n, const char* what) const {
        if (pos + n > bytes.size())
            throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers},   {"n_heads", c.n_heads},
            {"d_model", c.d_model},     {"d_head", c.d_head},
            {"d_ff", c.d_ff},           {"vocab_size", c.vocab_size},
            {"max_seq_len", c.max_seq_len}, {"share_params", c.share_params},
            {"n_classes", c.n_classes}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        c.n_layers = j.at("n_layers").get<int>();
        c.n_heads = j.at("n_heads").get<int>();
        c.d_model = j.at("d_model").get<int>();
        c.d_head = j.at("d_head").get<int>();
        c.d_ff = j.at("d_ff").get<int>();
        c.vocab_size = j.at("vocab_size").get<int>();
        c.max_seq_len = j.at("max_seq_len").get<int>();
        c.share_params = j.at("share_params").get<bool>();
        c.n_classes = j.at("n_classes").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint config block malformed: ") + e.what());
    }
    return c;
}

}  // namespace detail

inline std::string serialize_checkpoint(const TransformerModel<float>& model,
                                        const std::vector<std::string>& vocab_tokens,
                                        const nlohmann::json& provenance) {
    if (static_cast<int>(vocab_tokens.size()) != model.cfg.vocab_size)
        throw ContractError("checkpoint: vocabulary size " + std::to_string(vocab_tokens.size()) +
                            " does not match model vocab_size " +
                            std::to_string(model.cfg.vocab_size));
    nlohmann::json meta;
    meta["config"] = detail::config_to_json(model.cfg);
    meta["gates"] = {{"value", model.gates.raw_values()},
                     {"masked", model.gates.raw_masks()}};
    meta["vocab"] = vocab_tokens;
    meta["provenance"] = provenance.is_null() ? nlohmann::json::object() : provenance;

    // tensor directory in parameters() order; offsets are into the payload
    auto params = const_cast<TransformerModel<float>&>(model).parameters();
    nlohmann::json dir = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& e : params) {
        const uint64_t count = e.tensor.data().size();
        dir.push_back({{"name", e.name},
                       {"shape", e.tensor.shape()},
                       {"offset", offset},
                       {"count", count}});
        offset += count * 4;
    }
    meta["tensors"] = dir;

    const std::string meta_text = meta.dump();
    std::string out;
    out.reserve(16 + meta_text.size() + offset);
    out.append(CHECKPOINT_MAGIC, 4);
    detail::append_u32_le(out, CHECKPOINT_VERSION);
    detail::append_u64_le(out, meta_text.size());
    out += meta_text;
    for (const auto& e : params)
        for (float f : e.tensor.data()) detail::append_f32_le(out, f);
    return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
    detail::ByteReader r{bytes};
    r.need(4, "magic");
    if (std::memcmp(bytes.data(), CHECKPOINT_MAGIC, 4) != 0)
        throw CheckpointError("not a checkpoint file (bad magic)");
    r.pos = 4;
    const uint32_t version = r.u32("version");
    if (version != CHECKPOINT_VERSION)
        throw CheckpointError("unsupported checkpoint version " + std::to_string(version) +
                              " (this build reads version " + std::to_string(CHECKPOINT_VERSION) +
                              ")");
    const uint64_t meta_len = r.u64("metadata length");
    r.need(meta_len, "metadata");
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(bytes.substr(r.pos, meta_len));
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
    }
    r.pos += meta_len;
    const size_t payload_start = r.pos;

    // any missing or mistyped metadata field surfaces as a CheckpointError;
    // a corrupted byte inside the JSON often still parses, so every lookup
    // below stays inside this guard
    auto meta_at = [&meta](const char* key) -> const nlohmann::json& {
        if (!meta.contains(key))
            throw CheckpointError(std::string("checkpoint metadata lacks the '") + key + "' block");
        return meta.at(key);
    };

    Checkpoint ck;
    const ModelConfig cfg = detail::config_from_json(meta_at("config"));
    cfg.validate();
    ck.model = TransformerModel<float>::init(cfg, 0);

    try {
        ck.vocab_tokens = meta_at("vocab").get<std::vector<std::string>>();
        ck.provenance = meta_at("provenance");
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint metadata malformed: ") + e.what());
    }
    if (static_cast<int>(ck.vocab_tokens.size()) != cfg.vocab_size)
        throw CheckpointError("checkpoint vocabulary length does not match config vocab_size");

    // gate state
    try {
        const auto& gates = meta_at("gates");
        const auto values = gates.at("value").get<std::vector<double>>();
        const auto masks = gates.at("masked").get<std::vector<uint8_t>>();
        if (values.size() != ck.model.gates.raw_values().size() ||
            masks.size() != ck.model.gates.raw_masks().size())
            throw CheckpointError("checkpoint gate state has the wrong size");
        ck.model.gates.raw_values() = values;
        ck.model.gates.raw_masks() = masks;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(std::string("checkpoint gate block malformed: ") + e.what());
    }

    // tensor payloads, matched one-to-one against this geometry's parameters
    auto params = ck.model.parameters();
    const nlohmann::json& dir = meta_at("tensors");
    if (dir.size() != params.size())
        throw CheckpointError("checkpoint tensor directory lists " + std::to_string(dir.size()) +
                              " tensors, model needs " + std::to_string(params.size()));
    for (size_t i = 0; i < params.size(); ++i) {
        const nlohmann::json& entry = dir[i];
        std::string name;
        std::vector<int> shape;
        uint64_t offset = 0, count = 0;
        try {
            name = entry.at("name").get<std::string>();
            shape = entry.at("shape").get<std::vector<int>>();
            offset = entry.at("offset").get<uint64_t>();
            count = entry.at("count").get<uint64_t>();
        } catch (const nlohmann::json::exception& e) {
            throw CheckpointError(std::string("checkpoint tensor entry malformed: ") + e.what());
        }
        if (name != params[i].name)
            throw CheckpointError("checkpoint tensor '" + name + "' does not match expected '" +
                                  params[i].name + "'");
        if (shape != params[i].tensor.shape())
            throw CheckpointError("checkpoint tensor '" + name + "' has the wrong shape");
        if (count != params[i].tensor.data().size())
            throw CheckpointError("checkpoint tensor '" + name + "' has the wrong element count");
        detail::ByteReader tr{bytes};
        tr.pos = payload_start + offset;
        auto& dst = params[i].tensor.data();
        for (size_t k = 0; k < dst.size(); ++k) dst[k] = tr.f32(name.c_str());
    }
    return ck;
}

inline void save_checkpoint(const std::string& path, const TransformerModel<float>& model,
                            const std::vector<std::string>& vocab_tokens,
                            const nlohmann::json& provenance) {
    const std::string bytes = serialize_checkpoint(model, vocab_tokens, provenance);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot open checkpoint file for writing: " + path);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw InputError("failed writing checkpoint file: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open checkpoint file: " + path);
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return deserialize_checkpoint(bytes);
}

}  // namespace headlab
