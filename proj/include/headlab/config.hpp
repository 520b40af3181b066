#pragma once
// Run configuration: a strict JSON file the CLI layers flag overrides onto.
// Unknown keys are rejected at every nesting level so typos fail loudly
// instead of silently running with defaults.

#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "headlab/importance.hpp"
#include "headlab/model.hpp"
#include "headlab/train.hpp"

namespace headlab {

struct DataSpec {
    std::string task = "mlm";  // synthetic task name, or "text" with corpus path
    std::string corpus;        // used only when task == "text"
    int n_train = 2048;
    int n_dev = 384;
    int seq_len = 32;
    int min_freq = 1;          // text ingestion vocabulary cutoff
    double dev_fraction = 0.1; // text ingestion split
    uint64_t data_seed = 11;
};

struct RunConfig {
    ModelConfig model;
    DataSpec data;
    TrainConfig train;
    SweepConfig sweep;
    std::vector<uint64_t> seeds = {1};
    int k_frozen = 0;
    std::string out_dir = ".";
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& obj, const std::string& where,
                                const std::vector<std::string>& known) {
    for (const auto& [key, value] : obj.items()) {
        bool ok = false;
        for (const std::string& k : known) ok = ok || k == key;
        if (!ok) throw ConfigError("config: unknown key '" + where + key + "'");
    }
}

template <typename T>
void take(const nlohmann::json& obj, const char* key, T& out, const std::string& where) {
    if (!obj.contains(key)) return;
    try {
        out = obj.at(key).get<T>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: bad value for '" + where + key + "': " + e.what());
    }
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config: top level must be a JSON object");
    detail::reject_unknown_keys(
        j, "", {"model", "data", "train", "sweep", "seeds", "k_frozen", "out_dir"});
    RunConfig cfg;

    if (j.contains("model")) {
        const auto& m = j.at("model");
        if (!m.is_object()) throw ConfigError("config: 'model' must be an object");
        detail::reject_unknown_keys(m, "model.",
                                    {"n_layers", "n_heads", "d_model", "d_head", "d_ff",
                                     "max_seq_len", "share_params"});
        detail::take(m, "n_layers", cfg.model.n_layers, "model.");
        detail::take(m, "n_heads", cfg.model.n_heads, "model.");
        detail::take(m, "d_model", cfg.model.d_model, "model.");
        detail::take(m, "d_head", cfg.model.d_head, "model.");
        detail::take(m, "d_ff", cfg.model.d_ff, "model.");
        detail::take(m, "max_seq_len", cfg.model.max_seq_len, "model.");
        detail::take(m, "share_params", cfg.model.share_params, "model.");
    }

    if (j.contains("data")) {
        const auto& d = j.at("data");
        if (!d.is_object()) throw ConfigError("config: 'data' must be an object");
        detail::reject_unknown_keys(d, "data.",
                                    {"task", "corpus", "n_train", "n_dev", "seq_len", "min_freq",
                                     "dev_fraction", "data_seed"});
        detail::take(d, "task", cfg.data.task, "data.");
        detail::take(d, "corpus", cfg.data.corpus, "data.");
        detail::take(d, "n_train", cfg.data.n_train, "data.");
        detail::take(d, "n_dev", cfg.data.n_dev, "data.");
        detail::take(d, "seq_len", cfg.data.seq_len, "data.");
        detail::take(d, "min_freq", cfg.data.min_freq, "data.");
        detail::take(d, "dev_fraction", cfg.data.dev_fraction, "data.");
        detail::take(d, "data_seed", cfg.data.data_seed, "data.");
    }

    if (j.contains("train")) {
        const auto& t = j.at("train");
        if (!t.is_object()) throw ConfigError("config: 'train' must be an object");
        detail::reject_unknown_keys(t, "train.",
                                    {"steps", "batch_size", "lr", "p_mask", "grad_clip",
                                     "eval_batch", "eval_every"});
        detail::take(t, "steps", cfg.train.steps, "train.");
        detail::take(t, "batch_size", cfg.train.batch_size, "train.");
        detail::take(t, "lr", cfg.train.lr, "train.");
        detail::take(t, "p_mask", cfg.train.p_mask, "train.");
        detail::take(t, "grad_clip", cfg.train.grad_clip, "train.");
        detail::take(t, "eval_batch", cfg.train.eval_batch, "train.");
        detail::take(t, "eval_every", cfg.train.eval_every, "train.");
    }

    if (j.contains("sweep")) {
        const auto& s = j.at("sweep");
        if (!s.is_object()) throw ConfigError("config: 'sweep' must be an object");
        detail::reject_unknown_keys(s, "sweep.",
                                    {"norm", "mode", "step_fraction", "eval_subsample",
                                     "importance_subsample", "batch_size", "p_mask"});
        std::string norm = norm_name(cfg.sweep.norm), mode = sweep_mode_name(cfg.sweep.mode);
        detail::take(s, "norm", norm, "sweep.");
        detail::take(s, "mode", mode, "sweep.");
        cfg.sweep.norm = norm_from_name(norm);
        cfg.sweep.mode = sweep_mode_from_name(mode);
        detail::take(s, "step_fraction", cfg.sweep.step_fraction, "sweep.");
        detail::take(s, "eval_subsample", cfg.sweep.eval_subsample, "sweep.");
        detail::take(s, "importance_subsample", cfg.sweep.importance_subsample, "sweep.");
        detail::take(s, "batch_size", cfg.sweep.batch_size, "sweep.");
        detail::take(s, "p_mask", cfg.sweep.p_mask, "sweep.");
    }

    detail::take(j, "seeds", cfg.seeds, "");
    detail::take(j, "k_frozen", cfg.k_frozen, "");
    detail::take(j, "out_dir", cfg.out_dir, "");
    if (cfg.seeds.empty()) throw ConfigError("config: 'seeds' must list at least one seed");
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config: '" + path + "' is not valid JSON: " + e.what());
    }
    return parse_run_config(j);
}

// Effective settings echoed into run manifests.
inline nlohmann::json run_config_to_json(const RunConfig& cfg) {
    return {
        {"model",
         {{"n_layers", cfg.model.n_layers},
          {"n_heads", cfg.model.n_heads},
          {"d_model", cfg.model.d_model},
          {"d_head", cfg.model.d_head},
          {"d_ff", cfg.model.d_ff},
          {"max_seq_len", cfg.model.max_seq_len},
          {"share_params", cfg.model.share_params}}},
        {"data",
         {{"task", cfg.data.task},
          {"corpus", cfg.data.corpus},
          {"n_train", cfg.data.n_train},
          {"n_dev", cfg.data.n_dev},
          {"seq_len", cfg.data.seq_len},
          {"min_freq", cfg.data.min_freq},
          {"dev_fraction", cfg.data.dev_fraction},
          {"data_seed", cfg.data.data_seed}}},
        {"train",
         {{"steps", cfg.train.steps},
          {"batch_size", cfg.train.batch_size},
          {"lr", cfg.train.lr},
          {"p_mask", cfg.train.p_mask},
          {"grad_clip", cfg.train.grad_clip},
          {"eval_batch", cfg.train.eval_batch},
          {"eval_every", cfg.train.eval_every}}},
        {"sweep",
         {{"norm", norm_name(cfg.sweep.norm)},
          {"mode", sweep_mode_name(cfg.sweep.mode)},
          {"step_fraction", cfg.sweep.step_fraction},
          {"eval_subsample", cfg.sweep.eval_subsample},
          {"importance_subsample", cfg.sweep.importance_subsample},
          {"batch_size", cfg.sweep.batch_size},
          {"p_mask", cfg.sweep.p_mask}}},
        {"seeds", cfg.seeds},
        {"k_frozen", cfg.k_frozen},
        {"out_dir", cfg.out_dir}};
}

}  // namespace headlab
