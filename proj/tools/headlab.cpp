// headlab — command-line front end for the attention-head pruning laboratory.
//
// Subcommands cover the whole pipeline: pretrain, finetune, importance,
// prune, recall, compare, freeze-compare, report.  Every command writes its
// artifacts under --out and drops a manifest JSON next to them with the
// effective configuration and FNV-1a hashes of every input and output, so a
// pipeline is replayable from config + seeds alone.  Nothing here depends on
// wall-clock time; rerunning a command with the same inputs reproduces every
// byte.
//
// Exit codes: 0 ok, 2 config/input error, 3 training failure, 4 geometry
// mismatch, 1 unexpected.

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "headlab/analysis.hpp"
#include "headlab/checkpoint.hpp"
#include "headlab/config.hpp"
#include "headlab/csv.hpp"
#include "headlab/importance.hpp"
#include "headlab/svg.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace headlab;

namespace {

// ---------------------------------------------------------------------------
// Worker pool.  HEADLAB_THREADS caps how many independent work items (one per
// seed, typically) run at once; unset means "up to the hardware".  Items are
// mutually independent and write distinct files, so scheduling order cannot
// change any artifact.

int thread_cap() {
    const char* env = std::getenv("HEADLAB_THREADS");
    if (env == nullptr || *env == '\0')
        return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    char* end = nullptr;
    long v = std::strtol(env, &end, 10);
    if (end == nullptr || *end != '\0' || v < 1 || v > 4096)
        throw ConfigError("HEADLAB_THREADS must be a positive integer, got '" + std::string(env) + "'");
    return static_cast<int>(v);
}

template <typename Fn>
void run_parallel(int n_items, Fn&& item) {
    int workers = std::min(thread_cap(), n_items);
    if (workers <= 1) {
        for (int i = 0; i < n_items; ++i) item(i);
        return;
    }
    std::atomic<int> next{0};
    std::mutex fail_mutex;
    std::exception_ptr first_failure;
    auto worker = [&] {
        for (;;) {
            int i = next.fetch_add(1);
            if (i >= n_items) return;
            try {
                item(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(fail_mutex);
                if (!first_failure) first_failure = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (first_failure) std::rethrow_exception(first_failure);
}

// ---------------------------------------------------------------------------
// Manifest plumbing.  One manifest per command invocation, named after the
// command (plus any distinguishing tags) so reruns overwrite rather than
// accumulate.

struct Manifest {
    std::string command;
    json settings = json::object();
    json config;  // effective run config echo
    std::vector<std::pair<std::string, std::string>> inputs;   // path, hash
    std::vector<std::pair<std::string, std::string>> outputs;  // path, hash

    void add_input(const std::string& path) { inputs.emplace_back(path, hash_of(path)); }
    void add_output(const std::string& path) { outputs.emplace_back(path, hash_of(path)); }

    static std::string hash_of(const std::string& path) {
        return hex_u64(fnv1a64(read_text_file(path)));
    }

    void write(const std::string& path) const {
        json j;
        j["command"] = command;
        j["config"] = config;
        j["settings"] = settings;
        auto entries = [](const std::vector<std::pair<std::string, std::string>>& v) {
            json arr = json::array();
            for (const auto& [p, h] : v) arr.push_back({{"path", p}, {"fnv1a64", h}});
            return arr;
        };
        j["inputs"] = entries(inputs);
        j["outputs"] = entries(outputs);
        write_text_file(path, j.dump(2) + "\n");
    }
};

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw InputError("cannot create output directory '" + dir + "': " + ec.message());
}

std::string join_path(const std::string& dir, const std::string& name) {
    return (fs::path(dir) / name).string();
}

// ---------------------------------------------------------------------------
// Config assembly.  --config loads a JSON RunConfig; individual flags override
// whatever the file (or the default) says.  Each subcommand registers only
// the flags it actually consumes.

struct FlagOverrides {
    // data
    std::optional<std::string> task, corpus;
    std::optional<int> n_train, n_dev, seq_len, min_freq;
    std::optional<double> dev_fraction;
    std::optional<uint64_t> data_seed;
    // model
    std::optional<int> n_layers, n_heads, d_model, d_head, d_ff, max_seq_len;
    std::optional<bool> share_params;
    // train
    std::optional<int> steps, batch_size, eval_batch, eval_every;
    std::optional<double> lr, p_mask, grad_clip;
    // sweep
    std::optional<std::string> norm, mode;
    std::optional<double> step_fraction;
    std::optional<int> eval_subsample, importance_subsample;
    std::optional<uint64_t> sweep_seed;
    // run
    std::optional<std::vector<uint64_t>> seeds;
    std::optional<int> k_frozen;
    std::optional<std::string> out_dir;
};

template <typename T>
void put(const std::optional<T>& v, T& into) {
    if (v) into = *v;
}

RunConfig effective_config(const std::string& config_path, const FlagOverrides& f) {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_run_config(config_path);
    put(f.task, cfg.data.task);
    put(f.corpus, cfg.data.corpus);
    put(f.n_train, cfg.data.n_train);
    put(f.n_dev, cfg.data.n_dev);
    put(f.seq_len, cfg.data.seq_len);
    put(f.min_freq, cfg.data.min_freq);
    put(f.dev_fraction, cfg.data.dev_fraction);
    put(f.data_seed, cfg.data.data_seed);
    put(f.n_layers, cfg.model.n_layers);
    put(f.n_heads, cfg.model.n_heads);
    put(f.d_model, cfg.model.d_model);
    put(f.d_head, cfg.model.d_head);
    put(f.d_ff, cfg.model.d_ff);
    put(f.max_seq_len, cfg.model.max_seq_len);
    put(f.share_params, cfg.model.share_params);
    put(f.steps, cfg.train.steps);
    put(f.batch_size, cfg.train.batch_size);
    put(f.eval_batch, cfg.train.eval_batch);
    put(f.eval_every, cfg.train.eval_every);
    put(f.lr, cfg.train.lr);
    put(f.p_mask, cfg.train.p_mask);
    put(f.grad_clip, cfg.train.grad_clip);
    if (f.norm) cfg.sweep.norm = norm_from_name(*f.norm);
    if (f.mode) cfg.sweep.mode = sweep_mode_from_name(*f.mode);
    put(f.step_fraction, cfg.sweep.step_fraction);
    put(f.eval_subsample, cfg.sweep.eval_subsample);
    put(f.importance_subsample, cfg.sweep.importance_subsample);
    put(f.sweep_seed, cfg.sweep.seed);
    if (f.batch_size) cfg.sweep.batch_size = *f.batch_size;
    if (f.p_mask) cfg.sweep.p_mask = *f.p_mask;
    put(f.seeds, cfg.seeds);
    put(f.k_frozen, cfg.k_frozen);
    put(f.out_dir, cfg.out_dir);
    if (cfg.seeds.empty()) throw ConfigError("seeds list must not be empty");
    return cfg;
}

// CLI11 wiring: every flag lands in a std::optional so "not passed" is
// distinguishable from "passed the default value".
template <typename T>
void opt_flag(CLI::App* sub, const std::string& name, std::optional<T>& into, const std::string& help) {
    sub->add_option_function<T>(name, [&into](const T& v) { into = v; }, help);
}

void seeds_flag(CLI::App* sub, FlagOverrides& f) {
    sub->add_option_function<std::string>(
        "--seeds",
        [&f](const std::string& s) {
            std::vector<uint64_t> out;
            for (const auto& part : detail::split_on(s, ','))
                out.push_back(static_cast<uint64_t>(detail::parse_int(part, "--seeds")));
            f.seeds = out;
        },
        "comma-separated training seeds (one run per seed)");
}

void data_flags(CLI::App* sub, FlagOverrides& f) {
    opt_flag(sub, "--task", f.task, "task name (mlm, tok_majority, pair_grammar, seg_duplicate, seg_entail, text)");
    opt_flag(sub, "--corpus", f.corpus, "text corpus path (task 'text' only)");
    opt_flag(sub, "--n-train", f.n_train, "synthetic training examples");
    opt_flag(sub, "--n-dev", f.n_dev, "synthetic dev examples");
    opt_flag(sub, "--seq-len", f.seq_len, "sequence length");
    opt_flag(sub, "--min-freq", f.min_freq, "text ingestion vocabulary cutoff");
    opt_flag(sub, "--dev-fraction", f.dev_fraction, "text ingestion dev split fraction");
    opt_flag(sub, "--data-seed", f.data_seed, "dataset generation seed");
}

void train_flags(CLI::App* sub, FlagOverrides& f) {
    opt_flag(sub, "--steps", f.steps, "optimizer steps");
    opt_flag(sub, "--batch-size", f.batch_size, "training batch size");
    opt_flag(sub, "--lr", f.lr, "Adam learning rate");
    opt_flag(sub, "--p-mask", f.p_mask, "masking probability");
    opt_flag(sub, "--grad-clip", f.grad_clip, "global gradient-norm clip");
    opt_flag(sub, "--eval-batch", f.eval_batch, "evaluation batch size");
    opt_flag(sub, "--eval-every", f.eval_every, "evaluate every N steps (0 = final only)");
}

Dataset dataset_from_spec(const DataSpec& d, Manifest* manifest = nullptr) {
    if (d.task == "text") {
        if (d.corpus.empty()) throw ConfigError("task 'text' requires a corpus path");
        std::ifstream in(d.corpus, std::ios::binary);
        if (!in) throw InputError("cannot open corpus file '" + d.corpus + "'");
        if (manifest) manifest->add_input(d.corpus);
        return ingest_text_lines(in, d.min_freq, d.seq_len, d.dev_fraction, d.data_seed);
    }
    return make_task(d.task, d.data_seed, d.n_train, d.n_dev, d.seq_len);
}

Checkpoint load_required(const std::string& path, Manifest& manifest) {
    if (!fs::exists(path)) throw InputError("checkpoint '" + path + "' does not exist");
    manifest.add_input(path);
    return load_checkpoint(path);
}

json train_config_json(const TrainConfig& t) {
    return {{"steps", t.steps},       {"batch_size", t.batch_size}, {"lr", t.lr},
            {"p_mask", t.p_mask},     {"grad_clip", t.grad_clip},   {"eval_batch", t.eval_batch},
            {"eval_every", t.eval_every}};
}

// ---------------------------------------------------------------------------
// pretrain: one masked-lm model per seed.

int cmd_pretrain(const std::string& config_path, const FlagOverrides& f) {
    RunConfig cfg = effective_config(config_path, f);
    ensure_dir(cfg.out_dir);
    Manifest manifest;
    manifest.command = "pretrain";
    manifest.config = run_config_to_json(cfg);
    if (!config_path.empty()) manifest.add_input(config_path);

    Dataset data = dataset_from_spec(cfg.data, &manifest);
    if (data.kind != TaskKind::masked_lm)
        throw ConfigError("pretrain expects a masked-lm task, got '" + cfg.data.task + "'");
    ModelConfig mc = cfg.model;
    mc.vocab_size = static_cast<int>(data.vocab.size());
    mc.n_classes = 0;
    mc.validate();

    const int n = static_cast<int>(cfg.seeds.size());
    std::vector<std::string> ckpt_paths(n), metric_paths(n), lines(n);
    run_parallel(n, [&](int i) {
        const uint64_t seed = cfg.seeds[static_cast<size_t>(i)];
        auto model = TransformerModel<float>::init(mc, seed);
        PretrainResult res = pretrain(model, data, cfg.train, seed);

        json prov = {{"kind", "pretrain"},
                     {"task", data.name},
                     {"seed", seed},
                     {"data_seed", cfg.data.data_seed},
                     {"train", train_config_json(cfg.train)},
                     {"final_dev_recall", res.final_dev_recall}};
        std::string ckpt = join_path(cfg.out_dir, "pretrain_seed" + std::to_string(seed) + ".ckpt");
        save_checkpoint(ckpt, model, data.vocab.id_to_tok, prov);

        json metrics = {{"command", "pretrain"},
                        {"seed", seed},
                        {"task", data.name},
                        {"metric_name", metric_name(data.metric)},
                        {"final_dev_recall", res.final_dev_recall},
                        {"dev_recall", res.dev_recall},
                        {"train_loss_first", res.train_loss.empty() ? 0.0 : res.train_loss.front()},
                        {"train_loss_last", res.train_loss.empty() ? 0.0 : res.train_loss.back()}};
        std::string mpath = join_path(cfg.out_dir, "pretrain_seed" + std::to_string(seed) + "_metrics.json");
        write_text_file(mpath, metrics.dump(2) + "\n");

        ckpt_paths[static_cast<size_t>(i)] = ckpt;
        metric_paths[static_cast<size_t>(i)] = mpath;
        lines[static_cast<size_t>(i)] = "pretrain seed " + std::to_string(seed) + ": dev Recall@1 " +
                                        format_real(res.final_dev_recall) + " -> " + ckpt;
    });
    for (int i = 0; i < n; ++i) {
        std::cout << lines[static_cast<size_t>(i)] << "\n";
        manifest.add_output(ckpt_paths[static_cast<size_t>(i)]);
        manifest.add_output(metric_paths[static_cast<size_t>(i)]);
    }
    manifest.settings = {{"task", data.name}, {"n_seeds", n}};
    manifest.write(join_path(cfg.out_dir, "manifest_pretrain.json"));
    return 0;
}

// ---------------------------------------------------------------------------
// finetune: attach a classifier head to a pre-trained checkpoint and train it
// on a downstream task, once per seed.  The classifier initialization seed
// matches the training seed so the pair is reproducible from one number.

int cmd_finetune(const std::string& config_path, const FlagOverrides& f, const std::string& ckpt_path) {
    RunConfig cfg = effective_config(config_path, f);
    ensure_dir(cfg.out_dir);
    Manifest manifest;
    manifest.command = "finetune";
    manifest.config = run_config_to_json(cfg);
    if (!config_path.empty()) manifest.add_input(config_path);

    Checkpoint base = load_required(ckpt_path, manifest);
    Dataset data = dataset_from_spec(cfg.data, &manifest);
    if (data.kind != TaskKind::classification)
        throw ConfigError("finetune expects a classification task, got '" + cfg.data.task + "'");

    const int n = static_cast<int>(cfg.seeds.size());
    std::vector<std::string> ckpt_paths(n), metric_paths(n), lines(n);
    run_parallel(n, [&](int i) {
        const uint64_t seed = cfg.seeds[static_cast<size_t>(i)];
        auto model = make_task_model(base.model, data.n_classes, seed);
        FinetuneResult res = finetune(model, data, cfg.train, seed, cfg.k_frozen);

        json prov = {{"kind", "finetune"},
                     {"task", data.name},
                     {"seed", seed},
                     {"data_seed", cfg.data.data_seed},
                     {"k_frozen", cfg.k_frozen},
                     {"base_checkpoint", ckpt_path},
                     {"base_fnv1a64", Manifest::hash_of(ckpt_path)},
                     {"train", train_config_json(cfg.train)},
                     {"dev_metric", res.dev_metric}};
        std::string stem = "finetune_" + data.name + "_seed" + std::to_string(seed);
        std::string ckpt = join_path(cfg.out_dir, stem + ".ckpt");
        save_checkpoint(ckpt, model, data.vocab.id_to_tok, prov);

        json metrics = {{"command", "finetune"},
                        {"seed", seed},
                        {"task", data.name},
                        {"metric_name", metric_name(data.metric)},
                        {"dev_metric", res.dev_metric},
                        {"k_frozen", cfg.k_frozen},
                        {"train_loss_first", res.train_loss.empty() ? 0.0 : res.train_loss.front()},
                        {"train_loss_last", res.train_loss.empty() ? 0.0 : res.train_loss.back()}};
        std::string mpath = join_path(cfg.out_dir, stem + "_metrics.json");
        write_text_file(mpath, metrics.dump(2) + "\n");

        ckpt_paths[static_cast<size_t>(i)] = ckpt;
        metric_paths[static_cast<size_t>(i)] = mpath;
        lines[static_cast<size_t>(i)] = "finetune " + data.name + " seed " + std::to_string(seed) + ": " +
                                        metric_name(data.metric) + " " + format_real(res.dev_metric) +
                                        " -> " + ckpt;
    });
    for (int i = 0; i < n; ++i) {
        std::cout << lines[static_cast<size_t>(i)] << "\n";
        manifest.add_output(ckpt_paths[static_cast<size_t>(i)]);
        manifest.add_output(metric_paths[static_cast<size_t>(i)]);
    }
    manifest.settings = {{"task", data.name}, {"n_seeds", n}, {"k_frozen", cfg.k_frozen}};
    manifest.write(join_path(cfg.out_dir, "manifest_finetune_" + data.name + ".json"));
    return 0;
}

// ---------------------------------------------------------------------------
// importance: estimate head importance for one checkpoint on one task and
// write the per-head CSV under the requested normalization.

int cmd_importance(const std::string& config_path, const FlagOverrides& f, const std::string& ckpt_path) {
    RunConfig cfg = effective_config(config_path, f);
    ensure_dir(cfg.out_dir);
    Manifest manifest;
    manifest.command = "importance";
    manifest.config = run_config_to_json(cfg);
    if (!config_path.empty()) manifest.add_input(config_path);

    Checkpoint ck = load_required(ckpt_path, manifest);
    Dataset data = dataset_from_spec(cfg.data, &manifest);

    ImportanceConfig icfg;
    icfg.batch_size = cfg.sweep.batch_size;
    icfg.subsample = cfg.sweep.importance_subsample;
    icfg.p_mask = cfg.sweep.p_mask;
    icfg.seed = cfg.sweep.seed;
    ImportanceTable table = estimate_importance(ck.model, data, icfg);
    table = normalize_importance(std::move(table), cfg.sweep.norm);
    if (table.zero_row_warning)
        std::cerr << "warning: at least one layer row has zero total importance; "
                     "its normalized entries were left at zero\n";

    std::string out = join_path(cfg.out_dir,
                                "importance_" + data.name + "_" + norm_name(cfg.sweep.norm) + ".csv");
    write_text_file(out, importance_csv(table));
    manifest.add_output(out);
    manifest.settings = {{"task", data.name},
                         {"norm", norm_name(cfg.sweep.norm)},
                         {"batch_size", icfg.batch_size},
                         {"subsample", icfg.subsample},
                         {"seed", icfg.seed}};
    manifest.write(join_path(cfg.out_dir, "manifest_importance_" + data.name + "_" +
                                              norm_name(cfg.sweep.norm) + ".json"));
    std::cout << "importance " << data.name << " (" << norm_name(cfg.sweep.norm) << ", "
              << table.n_examples << " examples) -> " << out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// prune: run one iterative (or one-shot) pruning sweep and write the
// trajectory CSV.  The sweep seed distinguishes repeated sweeps of the same
// checkpoint in the file name.

int cmd_prune(const std::string& config_path, const FlagOverrides& f, const std::string& ckpt_path) {
    RunConfig cfg = effective_config(config_path, f);
    ensure_dir(cfg.out_dir);
    Manifest manifest;
    manifest.command = "prune";
    manifest.config = run_config_to_json(cfg);
    if (!config_path.empty()) manifest.add_input(config_path);

    Checkpoint ck = load_required(ckpt_path, manifest);
    Dataset data = dataset_from_spec(cfg.data, &manifest);

    PruneTrajectory traj = prune_sweep(ck.model, data, cfg.sweep);
    std::string stem = "trajectory_" + data.name + "_" + norm_name(cfg.sweep.norm) + "_" +
                       sweep_mode_name(cfg.sweep.mode) + "_seed" + std::to_string(cfg.sweep.seed);
    std::string out = join_path(cfg.out_dir, stem + ".csv");
    write_text_file(out, trajectory_csv(traj));
    manifest.add_output(out);
    manifest.settings = {{"task", data.name},
                         {"norm", norm_name(cfg.sweep.norm)},
                         {"mode", sweep_mode_name(cfg.sweep.mode)},
                         {"step_fraction", cfg.sweep.step_fraction},
                         {"eval_subsample", cfg.sweep.eval_subsample},
                         {"importance_subsample", cfg.sweep.importance_subsample},
                         {"sweep_seed", cfg.sweep.seed}};
    manifest.write(join_path(cfg.out_dir, "manifest_" + stem + ".json"));
    std::cout << "prune " << data.name << " (" << norm_name(cfg.sweep.norm) << ", "
              << sweep_mode_name(cfg.sweep.mode) << ", seed " << cfg.sweep.seed << "): baseline "
              << metric_name(traj.metric) << " " << format_real(traj.metric_full) << ", "
              << traj.steps.size() << " steps -> " << out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// recall: consume pre-training and downstream trajectory CSVs (paired by
// position) and write the recall-vs-threshold curve.

int cmd_recall(const std::vector<std::string>& pre_paths, const std::vector<std::string>& down_paths,
               double threshold, const std::string& name, const std::string& out_dir) {
    if (pre_paths.size() != down_paths.size())
        throw ConfigError("recall needs equally many --pre and --down trajectories (got " +
                          std::to_string(pre_paths.size()) + " vs " + std::to_string(down_paths.size()) + ")");
    if (pre_paths.empty()) throw ConfigError("recall needs at least one --pre/--down pair");
    ensure_dir(out_dir);
    Manifest manifest;
    manifest.command = "recall";
    manifest.config = json::object();

    std::vector<PruneTrajectory> pre, down;
    for (const auto& p : pre_paths) {
        if (!fs::exists(p)) throw InputError("trajectory '" + p + "' does not exist");
        manifest.add_input(p);
        pre.push_back(parse_trajectory_csv(read_text_file(p), p));
    }
    for (const auto& p : down_paths) {
        if (!fs::exists(p)) throw InputError("trajectory '" + p + "' does not exist");
        manifest.add_input(p);
        down.push_back(parse_trajectory_csv(read_text_file(p), p));
    }

    RecallCurve curve = recall_curve(pre, down, threshold);
    std::string out = join_path(out_dir, "recall_" + name + ".csv");
    write_text_file(out, recall_csv(curve));
    manifest.add_output(out);
    manifest.settings = {{"threshold", threshold}, {"name", name}, {"n_pairs", pre_paths.size()}};
    manifest.write(join_path(out_dir, "manifest_recall_" + name + ".json"));
    std::cout << "recall '" << name << "' over " << pre.size() << " seed pair(s), " << curve.x.size()
              << " grid points -> " << out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// compare: attention JS divergence + per-layer feature distance between two
// checkpoints, plus the importance-vs-divergence correlation measured on the
// second (downstream) model.

int cmd_compare(const std::string& config_path, const FlagOverrides& f, const std::string& path_a,
                const std::string& path_b, const std::string& tag_flag) {
    RunConfig cfg = effective_config(config_path, f);
    ensure_dir(cfg.out_dir);
    Manifest manifest;
    manifest.command = "compare";
    manifest.config = run_config_to_json(cfg);
    if (!config_path.empty()) manifest.add_input(config_path);

    Checkpoint a = load_required(path_a, manifest);
    Checkpoint b = path_b == path_a ? a : load_required(path_b, manifest);
    Dataset data = dataset_from_spec(cfg.data, &manifest);
    const std::string tag = tag_flag.empty() ? data.name : tag_flag;

    CompareConfig ccfg;
    ccfg.batch_size = cfg.sweep.batch_size;
    ccfg.subsample = cfg.sweep.eval_subsample;
    DivergenceTable div = attention_divergence(a.model, b.model, data, ccfg);
    LayerDistanceProfile dist = feature_distance(a.model, b.model, data, ccfg);

    ImportanceConfig icfg;
    icfg.batch_size = cfg.sweep.batch_size;
    icfg.subsample = cfg.sweep.importance_subsample;
    icfg.p_mask = cfg.sweep.p_mask;
    icfg.seed = cfg.sweep.seed;
    ImportanceTable imp = normalize_importance(estimate_importance(b.model, data, icfg), cfg.sweep.norm);
    CorrelationResult corr = importance_divergence_correlation(imp, div);

    std::string div_path = join_path(cfg.out_dir, "divergence_" + tag + ".csv");
    std::string dist_path = join_path(cfg.out_dir, "distance_" + tag + ".csv");
    std::string corr_path = join_path(cfg.out_dir, "correlation_" + tag + ".csv");
    write_text_file(div_path, divergence_csv(div));
    write_text_file(dist_path, distance_csv(dist));
    write_text_file(corr_path, correlation_csv(corr));
    manifest.add_output(div_path);
    manifest.add_output(dist_path);
    manifest.add_output(corr_path);
    manifest.settings = {{"task", data.name},
                         {"tag", tag},
                         {"norm", norm_name(cfg.sweep.norm)},
                         {"batch_size", ccfg.batch_size},
                         {"subsample", ccfg.subsample}};
    manifest.write(join_path(cfg.out_dir, "manifest_compare_" + tag + ".json"));
    std::cout << "compare '" << tag << "': mean JS " << format_real(div.layer_mean(0)) << " (layer 0), "
              << "pearson r " << format_real(corr.pearson_r) << " -> " << div_path << ", " << dist_path
              << ", " << corr_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// freeze-compare: fine-tune twice from the same checkpoint (k blocks frozen
// vs fully trainable) and report the metric ratio as JSON.

int cmd_freeze_compare(const std::string& config_path, const FlagOverrides& f,
                       const std::string& ckpt_path) {
    RunConfig cfg = effective_config(config_path, f);
    ensure_dir(cfg.out_dir);
    Manifest manifest;
    manifest.command = "freeze-compare";
    manifest.config = run_config_to_json(cfg);
    if (!config_path.empty()) manifest.add_input(config_path);

    Checkpoint ck = load_required(ckpt_path, manifest);
    Dataset data = dataset_from_spec(cfg.data, &manifest);
    const uint64_t seed = cfg.seeds.front();
    FreezeCompareResult res = freeze_compare(ck.model, data, cfg.k_frozen, cfg.train, seed, seed);

    json out = {{"command", "freeze-compare"},
                {"task", data.name},
                {"metric_name", metric_name(data.metric)},
                {"k_frozen", res.k_frozen},
                {"metric_frozen", res.metric_frozen},
                {"metric_unfrozen", res.metric_unfrozen},
                {"ratio", res.ratio},
                {"seed", seed}};
    std::string stem = "freeze_" + data.name + "_k" + std::to_string(cfg.k_frozen);
    std::string out_path = join_path(cfg.out_dir, stem + ".json");
    write_text_file(out_path, out.dump(2) + "\n");
    manifest.add_output(out_path);
    manifest.settings = {{"task", data.name}, {"k_frozen", cfg.k_frozen}, {"seed", seed}};
    manifest.write(join_path(cfg.out_dir, "manifest_" + stem + ".json"));
    std::cout << "freeze-compare " << data.name << " k=" << cfg.k_frozen << ": frozen "
              << format_real(res.metric_frozen) << " vs unfrozen " << format_real(res.metric_unfrozen)
              << " (ratio " << format_real(res.ratio) << ") -> " << out_path << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// report: sweep an artifact directory and render every CSV family to SVG,
// plus a summary JSON of per-seed aggregates.

std::vector<std::string> sorted_matches(const std::string& dir, const std::string& prefix,
                                        const std::string& suffix) {
    std::vector<std::string> out;
    if (!fs::is_directory(dir)) return out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string name = entry.path().filename().string();
        if (name.size() > prefix.size() + suffix.size() && name.rfind(prefix, 0) == 0 &&
            name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
            out.push_back(name);
    }
    std::sort(out.begin(), out.end());
    return out;
}

// "trajectory_<group>_seed<N>.csv" -> (group, "seed N"); files without the
// seed suffix form single-member groups labeled by their stem.
std::pair<std::string, std::string> trajectory_group(const std::string& name) {
    std::string stem = name.substr(std::string("trajectory_").size());
    stem = stem.substr(0, stem.size() - 4);  // drop ".csv"
    size_t pos = stem.rfind("_seed");
    if (pos != std::string::npos) {
        std::string tail = stem.substr(pos + 5);
        if (!tail.empty() && std::all_of(tail.begin(), tail.end(), [](char c) { return std::isdigit(c); }))
            return {stem.substr(0, pos), "seed " + tail};
    }
    return {stem, stem};
}

int cmd_report(const std::string& dir) {
    const std::string report_dir = join_path(dir, "report");
    Manifest manifest;
    manifest.command = "report";
    manifest.config = json::object();

    auto trajectories = sorted_matches(dir, "trajectory_", ".csv");
    if (trajectories.empty())
        throw InputError("report: no trajectory CSVs found (expected trajectory_*.csv in '" + dir + "')");
    ensure_dir(report_dir);

    json summary;
    std::vector<std::string> svg_paths;
    auto render = [&](svg::Chart& chart, const std::string& name) {
        std::string path = join_path(report_dir, name);
        write_text_file(path, chart.render());
        svg_paths.push_back(path);
    };

    // Pruning curves, one chart per (task, norm, mode) group, one dotted
    // polyline per seed.
    std::map<std::string, std::vector<std::pair<std::string, PruneTrajectory>>> groups;
    for (const auto& name : trajectories) {
        std::string path = join_path(dir, name);
        manifest.add_input(path);
        auto [group, label] = trajectory_group(name);
        groups[group].emplace_back(label, parse_trajectory_csv(read_text_file(path), name));
    }
    summary["trajectories"] = json::object();
    for (auto& [group, members] : groups) {
        svg::Chart chart("pruning sweep: " + group, "heads pruned (ratio)", "relative performance");
        json entry;
        entry["seeds"] = json::array();
        bool shared_grid = true;
        for (size_t s = 1; s < members.size(); ++s) {
            if (members[s].second.steps.size() != members[0].second.steps.size()) shared_grid = false;
        }
        std::vector<double> mean_rel;
        for (auto& [label, traj] : members) {
            std::vector<std::pair<double, double>> pts;
            for (size_t k = 0; k < traj.steps.size(); ++k) {
                const auto& st = traj.steps[k];
                pts.emplace_back(st.pruned_ratio, st.relative_performance);
                if (shared_grid) {
                    if (mean_rel.size() <= k) mean_rel.push_back(0.0);
                    mean_rel[k] += st.relative_performance / static_cast<double>(members.size());
                }
            }
            chart.add_series(svg::Series{pts, label, "", true});
            entry["seeds"].push_back({{"label", label},
                                      {"metric_name", metric_name(traj.metric)},
                                      {"metric_full", traj.metric_full},
                                      {"final_relative", traj.steps.back().relative_performance}});
        }
        if (shared_grid && members.size() > 1) {
            std::vector<std::pair<double, double>> pts;
            for (size_t k = 0; k < mean_rel.size(); ++k)
                pts.emplace_back(members[0].second.steps[k].pruned_ratio, mean_rel[k]);
            chart.add_series(svg::Series{pts, "mean", "", false});
            entry["mean_final_relative"] = mean_rel.back();
        }
        render(chart, "curve_" + group + ".svg");
        summary["trajectories"][group] = entry;
    }

    // Recall curves: mean line with a ±1 std band plus dotted per-seed lines.
    summary["recall"] = json::object();
    for (const auto& name : sorted_matches(dir, "recall_", ".csv")) {
        std::string path = join_path(dir, name);
        manifest.add_input(path);
        RecallCurve c = parse_recall_csv(read_text_file(path), name);
        std::string tag = name.substr(7, name.size() - 11);
        svg::Chart chart("head-set recall: " + tag, "pre-training performance threshold", "recall");
        svg::Band band;
        for (size_t i = 0; i < c.x.size(); ++i) {
            band.x.push_back(c.x[i]);
            band.lo.push_back(c.mean[i] - c.stddev[i]);
            band.hi.push_back(c.mean[i] + c.stddev[i]);
        }
        chart.add_band(band);
        for (size_t s = 0; s < c.per_seed.size(); ++s) {
            std::vector<std::pair<double, double>> pts;
            for (size_t i = 0; i < c.x.size(); ++i) pts.emplace_back(c.x[i], c.per_seed[s][i]);
            chart.add_series(svg::Series{pts, "seed " + std::to_string(s), "", true});
        }
        std::vector<std::pair<double, double>> mean_pts;
        for (size_t i = 0; i < c.x.size(); ++i) mean_pts.emplace_back(c.x[i], c.mean[i]);
        chart.add_series(svg::Series{mean_pts, "mean", "", false});
        chart.fix_y_range(0.0, 1.05);
        render(chart, "recall_" + tag + ".svg");
        summary["recall"][tag] = {{"x", c.x},
                                  {"mean", c.mean},
                                  {"stddev", c.stddev},
                                  {"n_seeds", c.per_seed.size()},
                                  {"down_threshold", c.down_threshold}};
    }

    // Per-layer attention-divergence and feature-distance profiles.
    summary["divergence"] = json::object();
    for (const auto& name : sorted_matches(dir, "divergence_", ".csv")) {
        std::string path = join_path(dir, name);
        manifest.add_input(path);
        DivergenceTable t = parse_divergence_csv(read_text_file(path), name);
        std::string tag = name.substr(11, name.size() - 15);
        svg::Chart chart("attention divergence: " + tag, "layer", "JS divergence (nats)");
        std::vector<std::pair<double, double>> means, maxes;
        double overall = 0.0;
        for (int l = 0; l < t.n_layers; ++l) {
            means.emplace_back(l, t.layer_mean(l));
            maxes.emplace_back(l, t.layer_max(l));
            overall += t.layer_mean(l) / t.n_layers;
        }
        chart.add_series(svg::Series{means, "layer mean", "", false});
        chart.add_series(svg::Series{maxes, "layer max of head means", "", true});
        render(chart, "divergence_" + tag + ".svg");
        summary["divergence"][tag] = {{"overall_mean_js", overall}, {"n_positions", t.n_positions}};
    }
    summary["distance"] = json::object();
    for (const auto& name : sorted_matches(dir, "distance_", ".csv")) {
        std::string path = join_path(dir, name);
        manifest.add_input(path);
        LayerDistanceProfile p = parse_distance_csv(read_text_file(path), name);
        std::string tag = name.substr(9, name.size() - 13);
        svg::Chart chart("feature distance: " + tag, "layer", "L2 distance");
        std::vector<std::pair<double, double>> means, maxes;
        for (int l = 0; l < p.n_layers; ++l) {
            means.emplace_back(l, p.mean_l2[static_cast<size_t>(l)]);
            maxes.emplace_back(l, p.max_l2[static_cast<size_t>(l)]);
        }
        chart.add_series(svg::Series{means, "mean over tokens", "", false});
        chart.add_series(svg::Series{maxes, "max over tokens", "", true});
        render(chart, "distance_" + tag + ".svg");
        summary["distance"][tag] = {{"mean_l2", p.mean_l2}, {"max_l2", p.max_l2}};
    }

    // Importance-vs-divergence scatter with the fitted regression line.
    summary["correlation"] = json::object();
    for (const auto& name : sorted_matches(dir, "correlation_", ".csv")) {
        std::string path = join_path(dir, name);
        manifest.add_input(path);
        CorrelationResult r = parse_correlation_csv(read_text_file(path), name);
        std::string tag = name.substr(12, name.size() - 16);
        svg::Chart chart("importance vs divergence: " + tag, "head importance", "mean JS divergence (nats)");
        svg::Scatter sc;
        for (const auto& pt : r.points) sc.points.emplace_back(pt.importance, pt.divergence);
        sc.label = "heads";
        chart.add_scatter(sc);
        chart.add_line(r.slope, r.intercept, "fit (r " + format_real(r.pearson_r).substr(0, 6) + ")");
        render(chart, "correlation_" + tag + ".svg");
        summary["correlation"][tag] = {{"pearson_r", r.pearson_r},
                                       {"spearman_rho", r.spearman_rho},
                                       {"slope", r.slope},
                                       {"intercept", r.intercept},
                                       {"n_points", r.points.size()}};
    }

    // Freeze-compare results are already JSON; fold them into the summary.
    summary["freeze"] = json::object();
    for (const auto& name : sorted_matches(dir, "freeze_", ".json")) {
        std::string path = join_path(dir, name);
        manifest.add_input(path);
        json j = json::parse(read_text_file(path));
        summary["freeze"][name.substr(7, name.size() - 12)] = j;
    }

    std::string summary_path = join_path(report_dir, "summary.json");
    write_text_file(summary_path, summary.dump(2) + "\n");
    for (const auto& p : svg_paths) manifest.add_output(p);
    manifest.add_output(summary_path);
    manifest.settings = {{"dir", dir}};
    manifest.write(join_path(report_dir, "manifest_report.json"));
    std::cout << "report: " << svg_paths.size() << " chart(s) + summary -> " << report_dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"attention-head importance, pruning, and model-comparison laboratory"};
    app.require_subcommand(1);

    std::string config_path;
    FlagOverrides f;
    std::string ckpt_path, ckpt_b, tag;
    std::vector<std::string> pre_paths, down_paths;
    double threshold = 0.9;
    std::string recall_name = "curve";
    std::string report_path;

    auto add_common = [&](CLI::App* sub, bool with_data = true) {
        sub->add_option("--config", config_path, "JSON run configuration; flags override file values");
        sub->add_option_function<std::string>(
            "--out", [&f](const std::string& v) { f.out_dir = v; }, "output directory");
        if (with_data) data_flags(sub, f);
    };

    CLI::App* sp = app.add_subcommand("pretrain", "train masked-lm models, one checkpoint per seed");
    add_common(sp);
    train_flags(sp, f);
    seeds_flag(sp, f);
    opt_flag(sp, "--n-layers", f.n_layers, "transformer blocks");
    opt_flag(sp, "--n-heads", f.n_heads, "attention heads per block");
    opt_flag(sp, "--d-model", f.d_model, "model width");
    opt_flag(sp, "--d-head", f.d_head, "per-head width");
    opt_flag(sp, "--d-ff", f.d_ff, "feed-forward width");
    opt_flag(sp, "--max-seq-len", f.max_seq_len, "positional table length");
    opt_flag(sp, "--share-params", f.share_params, "reuse one parameter block across layers");

    CLI::App* sf = app.add_subcommand("finetune", "attach a classifier head and train it per seed");
    add_common(sf);
    train_flags(sf, f);
    seeds_flag(sf, f);
    sf->add_option("--checkpoint", ckpt_path, "pre-trained checkpoint")->required();
    opt_flag(sf, "--k-frozen", f.k_frozen, "freeze embedding plus the lowest k blocks");

    CLI::App* si = app.add_subcommand("importance", "estimate per-head importance on a task");
    add_common(si);
    si->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    opt_flag(si, "--norm", f.norm, "normalization: l1, l2, or none");
    opt_flag(si, "--batch-size", f.batch_size, "estimation batch size");
    opt_flag(si, "--importance-subsample", f.importance_subsample, "train examples used (0 = all)");
    opt_flag(si, "--sweep-seed", f.sweep_seed, "mask/subsample seed");

    CLI::App* spr = app.add_subcommand("prune", "iterative or one-shot pruning sweep");
    add_common(spr);
    spr->add_option("--checkpoint", ckpt_path, "model checkpoint")->required();
    opt_flag(spr, "--norm", f.norm, "normalization: l1, l2, or none");
    opt_flag(spr, "--mode", f.mode, "sweep mode: iterative or one_shot");
    opt_flag(spr, "--step-fraction", f.step_fraction, "fraction of all heads pruned per step");
    opt_flag(spr, "--eval-subsample", f.eval_subsample, "dev examples per evaluation (0 = all)");
    opt_flag(spr, "--importance-subsample", f.importance_subsample, "train examples per estimate (0 = all)");
    opt_flag(spr, "--batch-size", f.batch_size, "sweep batch size");
    opt_flag(spr, "--sweep-seed", f.sweep_seed, "sweep seed (subsampling, masking; names the output)");

    CLI::App* sr = app.add_subcommand("recall", "head-set recall curve from trajectory CSV pairs");
    sr->add_option("--pre", pre_paths, "pre-training trajectory CSV (repeat per seed)")->required();
    sr->add_option("--down", down_paths, "downstream trajectory CSV (repeat per seed)")->required();
    sr->add_option("--threshold", threshold, "downstream relative-performance cut (default 0.9)");
    sr->add_option("--name", recall_name, "output tag (default 'curve')");
    std::string recall_out = ".";
    sr->add_option("--out", recall_out, "output directory");

    CLI::App* sc = app.add_subcommand("compare", "attention divergence, feature distance, correlation");
    add_common(sc);
    sc->add_option("--a", ckpt_path, "first checkpoint (reference)")->required();
    sc->add_option("--b", ckpt_b, "second checkpoint (importance source)")->required();
    sc->add_option("--tag", tag, "artifact tag (default: task name)");
    opt_flag(sc, "--norm", f.norm, "importance normalization for the correlation");
    opt_flag(sc, "--batch-size", f.batch_size, "forward batch size");
    opt_flag(sc, "--eval-subsample", f.eval_subsample, "dev examples compared (0 = all)");
    opt_flag(sc, "--importance-subsample", f.importance_subsample, "train examples for importance (0 = all)");
    opt_flag(sc, "--sweep-seed", f.sweep_seed, "importance mask/subsample seed");

    CLI::App* sz = app.add_subcommand("freeze-compare", "fine-tune with k blocks frozen vs none");
    add_common(sz);
    train_flags(sz, f);
    seeds_flag(sz, f);
    sz->add_option("--checkpoint", ckpt_path, "pre-trained checkpoint")->required();
    opt_flag(sz, "--k-frozen", f.k_frozen, "freeze embedding plus the lowest k blocks");

    CLI::App* srep = app.add_subcommand("report", "render an artifact directory to SVG + summary JSON");
    srep->add_option("--dir", report_path, "artifact directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (sp->parsed()) return cmd_pretrain(config_path, f);
        if (sf->parsed()) return cmd_finetune(config_path, f, ckpt_path);
        if (si->parsed()) return cmd_importance(config_path, f, ckpt_path);
        if (spr->parsed()) return cmd_prune(config_path, f, ckpt_path);
        if (sr->parsed()) return cmd_recall(pre_paths, down_paths, threshold, recall_name, recall_out);
        if (sc->parsed()) return cmd_compare(config_path, f, ckpt_path, ckpt_b, tag);
        if (sz->parsed()) return cmd_freeze_compare(config_path, f, ckpt_path);
        if (srep->parsed()) return cmd_report(report_path);
        throw ContractError("no subcommand dispatched");
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 2;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return 2;
    } catch (const ContractError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 2;
    } catch (const TrainingError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return 3;
    } catch (const GeometryError& e) {
        std::cerr << "geometry error: " << e.what() << "\n";
        return 4;
    } catch (const ShapeError& e) {
        std::cerr << "geometry error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "unexpected error: " << e.what() << "\n";
        return 1;
    }
}
