#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "headlab/common.hpp"
#include "headlab/model.hpp"
#include "headlab/tasks.hpp"
#include "headlab/train.hpp"

namespace headlab {

enum class NormMode { l1, l2, none };

inline const char* norm_name(NormMode m) {
    switch (m) {
        case NormMode::l1: return "l1";
        case NormMode::l2: return "l2";
        case NormMode::none: return "none";
    }
    throw ContractError("unknown norm mode");
}

inline NormMode norm_from_name(const std::string& s) {
    if (s == "l1") return NormMode::l1;
    if (s == "l2") return NormMode::l2;
    if (s == "none") return NormMode::none;
    throw ConfigError("unknown norm mode '" + s + "' (expected l1, l2, or none)");
}

// Per-head importance scores. Unshared tables hold one row per layer; shared
// tables collapse to a single row indexed by head position.
struct ImportanceTable {
    bool shared = false;
    int n_layers = 0, n_heads = 0;
    std::vector<double> raw;         // rows() × n_heads, row-major, all ≥ 0
    std::vector<double> normalized;  // same shape
    NormMode norm_mode = NormMode::none;
    int64_t n_examples = 0;  // provenance: examples consumed by the estimate
    int batch_size = 0;      // provenance: batch size used for the estimate
    bool zero_row_warning = false;

    int rows() const { return shared ? 1 : n_layers; }

    double raw_at(int layer, int head) const {
        return raw[static_cast<size_t>(layer) * static_cast<size_t>(n_heads) +
                   static_cast<size_t>(head)];
    }
    double norm_at(int layer, int head) const {
        return normalized[static_cast<size_t>(layer) * static_cast<size_t>(n_heads) +
                          static_cast<size_t>(head)];
    }
};

namespace detail {

// Restores parameter requires_grad flags on scope exit. Importance estimation
// only needs gate gradients, so parameter-gradient work is switched off.
template <typename T>
class ParamGradGuard {
public:
    explicit ParamGradGuard(TransformerModel<T>& m) : model_(m) {
        for (auto& e : model_.parameters()) {
            saved_.push_back(e.tensor.requires_grad());
            e.tensor.set_requires_grad(false);
        }
    }
    ~ParamGradGuard() {
        auto params = model_.parameters();
        for (size_t i = 0; i < params.size(); ++i) params[i].tensor.set_requires_grad(saved_[i]);
    }
    ParamGradGuard(const ParamGradGuard&) = delete;
    ParamGradGuard& operator=(const ParamGradGuard&) = delete;

private:
    TransformerModel<T>& model_;
    std::vector<bool> saved_;
};

}  // namespace detail

// One backward pass of the batch loss; returns ∂L/∂ξ for every (layer, head)
// gate, masked heads included (their gates sit at 0). Parameters unchanged.
template <typename T>
std::vector<double> gate_gradients(TransformerModel<T>& model, const Batch& b, TaskKind kind) {
    detail::ParamGradGuard<T> guard(model);
    Tape<T> tape;
    ForwardOptions opt;
    opt.want_gate_grads = true;
    auto res = model.forward(tape, b.ids, b.valid, b.batch, b.seq, opt);
    Tensor<T> loss;
    if (kind == TaskKind::masked_lm) {
        loss = tape.cross_entropy_logits(model.lm_logits(tape, res.encoder_out), b.mlm_targets,
                                         b.mlm_weight);
    } else {
        std::vector<double> weights(static_cast<size_t>(b.batch), 1.0);
        loss = tape.cross_entropy_logits(model.cls_logits(tape, res.encoder_out), b.labels, weights);
    }
    tape.backward(loss);
    std::vector<double> grads;
    grads.reserve(static_cast<size_t>(model.cfg.n_layers) * static_cast<size_t>(model.cfg.n_heads));
    for (int l = 0; l < model.cfg.n_layers; ++l)
        for (int h = 0; h < model.cfg.n_heads; ++h)
            grads.push_back(static_cast<double>(res.gate_tensors[static_cast<size_t>(l)][static_cast<size_t>(h)].grad()[0]));
    return grads;
}

struct ImportanceConfig {
    int batch_size = 32;
    int subsample = 0;  // train examples to use; 0 = the full split
    double p_mask = 0.15;
    uint64_t seed = 0;
};

// Importance estimate: mean over batches of |per-batch gate gradient|; in
// shared mode the layer sum happens inside the absolute value.
template <typename T>
ImportanceTable estimate_importance(TransformerModel<T>& model, const Dataset& data,
                                    const ImportanceConfig& cfg = {}) {
    if (cfg.batch_size <= 0) throw ConfigError("importance batch_size must be positive");
    if (cfg.subsample < 0) throw ConfigError("importance subsample must be nonnegative");
    if (data.train.empty()) throw ContractError("importance estimate on empty dataset");
    if (model.cfg.vocab_size != data.vocab.size())
        throw GeometryError("model vocab " + std::to_string(model.cfg.vocab_size) +
                            " != task vocab " + std::to_string(data.vocab.size()));
    if (data.kind == TaskKind::classification && model.cfg.n_classes != data.n_classes)
        throw GeometryError("model has " + std::to_string(model.cfg.n_classes) +
                            " classes, task needs " + std::to_string(data.n_classes));

    std::vector<size_t> indices = all_indices(data.train.size());
    if (cfg.subsample > 0 && static_cast<size_t>(cfg.subsample) < indices.size()) {
        RandomSource order_rng(RandomSource::derive(cfg.seed, stream::subsample, 0));
        order_rng.shuffle(indices);
        indices.resize(static_cast<size_t>(cfg.subsample));
    }
    RandomSource mask_rng(RandomSource::derive(cfg.seed, stream::train_mask, 1));

    const int L = model.cfg.n_layers, H = model.cfg.n_heads;
    const bool shared = model.cfg.share_params;
    ImportanceTable table;
    table.shared = shared;
    table.n_layers = L;
    table.n_heads = H;
    table.batch_size = cfg.batch_size;
    table.raw.assign(static_cast<size_t>(table.rows()) * static_cast<size_t>(H), 0.0);

    int64_t n_batches = 0;
    for (size_t at = 0; at < indices.size(); at += static_cast<size_t>(cfg.batch_size)) {
        std::vector<size_t> chunk(
            indices.begin() + static_cast<int64_t>(at),
            indices.begin() +
                static_cast<int64_t>(std::min(indices.size(), at + static_cast<size_t>(cfg.batch_size))));
        Batch b = data.kind == TaskKind::masked_lm
                      ? mask_tokens(data, chunk, /*dev_split=*/false, cfg.p_mask, mask_rng)
                      : make_cls_batch(data, chunk, /*dev_split=*/false);
        if (data.kind == TaskKind::masked_lm) {
            bool any = false;
            for (double w : b.mlm_weight) any = any || w > 0.0;
            if (!any) continue;  // no masked position: the loss is undefined, skip the batch
        }
        const std::vector<double> g = gate_gradients(model, b, data.kind);
        if (shared) {
            for (int h = 0; h < H; ++h) {
                double layer_sum = 0.0;
                for (int l = 0; l < L; ++l) layer_sum += g[static_cast<size_t>(l * H + h)];
                table.raw[static_cast<size_t>(h)] += std::abs(layer_sum);
            }
        } else {
            for (size_t i = 0; i < g.size(); ++i) table.raw[i] += std::abs(g[i]);
        }
        table.n_examples += static_cast<int64_t>(chunk.size());
        ++n_batches;
    }
    if (n_batches == 0) throw ContractError("importance estimate consumed no batches");
    for (double& v : table.raw) v /= static_cast<double>(n_batches);
    table.normalized = table.raw;
    table.norm_mode = NormMode::none;
    return table;
}

// Per-row normalization of the raw scores; zero rows pass through with a warning.
inline ImportanceTable normalize_importance(ImportanceTable table, NormMode mode) {
    table.norm_mode = mode;
    table.normalized = table.raw;
    table.zero_row_warning = false;
    if (mode == NormMode::none) return table;
    for (int r = 0; r < table.rows(); ++r) {
        double denom = 0.0;
        for (int h = 0; h < table.n_heads; ++h) {
            const double v = table.raw_at(r, h);
            denom += mode == NormMode::l1 ? std::abs(v) : v * v;
        }
        if (mode == NormMode::l2) denom = std::sqrt(denom);
        if (denom == 0.0) {
            table.zero_row_warning = true;
            continue;
        }
        for (int h = 0; h < table.n_heads; ++h)
            table.normalized[static_cast<size_t>(r) * static_cast<size_t>(table.n_heads) +
                             static_cast<size_t>(h)] = table.raw_at(r, h) / denom;
    }
    return table;
}

// Ascending by normalized score, ties by (layer, head). Shared tables rank
// head positions and report them as layer 0.
inline std::vector<HeadId> rank_heads(const ImportanceTable& table) {
    std::vector<HeadId> order;
    for (int r = 0; r < table.rows(); ++r)
        for (int h = 0; h < table.n_heads; ++h) order.push_back({r, h});
    std::stable_sort(order.begin(), order.end(), [&](const HeadId& a, const HeadId& b) {
        const double va = table.norm_at(a.layer, a.head);
        const double vb = table.norm_at(b.layer, b.head);
        if (va != vb) return va < vb;
        return a < b;
    });
    return order;
}

enum class SweepMode { iterative, one_shot };

inline const char* sweep_mode_name(SweepMode m) {
    return m == SweepMode::iterative ? "iterative" : "one_shot";
}

inline SweepMode sweep_mode_from_name(const std::string& s) {
    if (s == "iterative") return SweepMode::iterative;
    if (s == "one_shot" || s == "one-shot") return SweepMode::one_shot;
    throw ConfigError("unknown sweep mode '" + s + "' (expected iterative or one_shot)");
}

struct SweepConfig {
    NormMode norm = NormMode::l1;
    SweepMode mode = SweepMode::iterative;
    double step_fraction = 0.1;
    int eval_subsample = 128;        // dev examples per evaluation; 0 = full dev
    int importance_subsample = 128;  // train examples per estimate; 0 = full
    int batch_size = 32;
    double p_mask = 0.15;
    uint64_t seed = 0;
};

struct PruneStep {
    int step = 0;
    std::vector<HeadId> pruned_now;  // masked this step (empty at the baseline)
    std::vector<HeadId> retained;    // still live after this step
    double pruned_ratio = 0.0;
    double metric_value = 0.0;
    double relative_performance = 0.0;
};

struct PruneTrajectory {
    std::string task;
    uint64_t seed = 0;
    bool shared = false;
    int n_layers = 0, n_heads = 0;
    NormMode norm = NormMode::l1;
    SweepMode mode = SweepMode::iterative;
    MetricKind metric = MetricKind::Accuracy;
    double metric_full = 0.0;
    std::vector<PruneStep> steps;
};

namespace detail {

// Pruning units: (layer, head) pairs, or head positions under sharing (one
// gate decision masks that head index in every layer).
template <typename T>
std::vector<HeadId> sweep_units(const TransformerModel<T>& m) {
    std::vector<HeadId> units;
    if (m.cfg.share_params) {
        for (int h = 0; h < m.cfg.n_heads; ++h) units.push_back({0, h});
    } else {
        for (int l = 0; l < m.cfg.n_layers; ++l)
            for (int h = 0; h < m.cfg.n_heads; ++h) units.push_back({l, h});
    }
    return units;
}

template <typename T>
void mask_unit(TransformerModel<T>& m, const HeadId& unit) {
    if (m.cfg.share_params) {
        for (int l = 0; l < m.cfg.n_layers; ++l) m.gates.set_masked(l, unit.head, true);
    } else {
        m.gates.set_masked(unit.layer, unit.head, true);
    }
}

template <typename T>
bool unit_masked(const TransformerModel<T>& m, const HeadId& unit) {
    // under sharing every layer carries the same mask for a head position
    return m.gates.masked(m.cfg.share_params ? 0 : unit.layer, unit.head);
}

}  // namespace detail

// Evaluates the model's task metric on a fixed dev subsample, deterministic
// per seed (including the masked-lm mask pattern).
template <typename T>
double sweep_evaluate(const TransformerModel<T>& model, const Dataset& data,
                      const SweepConfig& cfg) {
    std::vector<size_t> dev_idx = all_indices(data.dev.size());
    if (cfg.eval_subsample > 0 && static_cast<size_t>(cfg.eval_subsample) < dev_idx.size()) {
        RandomSource rng(RandomSource::derive(cfg.seed, stream::subsample, 1));
        rng.shuffle(dev_idx);
        dev_idx.resize(static_cast<size_t>(cfg.eval_subsample));
    }
    return evaluate_model(model, data, dev_idx, cfg.batch_size, cfg.p_mask, cfg.seed);
}

// Iterative sweep: mask the lowest-importance live units in slices of
// ⌈step_fraction·total⌉ until every head is gone, evaluating after each slice.
// Importance may be estimated on a different task than the evaluation task
// (both tasks must match the model's geometry).
template <typename T>
PruneTrajectory prune_sweep(const TransformerModel<T>& model, const Dataset& eval_task,
                            const Dataset& importance_task, const SweepConfig& cfg) {
    if (cfg.step_fraction <= 0.0 || cfg.step_fraction > 1.0)
        throw ConfigError("step_fraction must be in (0, 1]");
    eval_task.validate();
    importance_task.validate();

    TransformerModel<T> m = model.clone();
    const std::vector<HeadId> units = detail::sweep_units(m);
    const int total = static_cast<int>(units.size());
    const int per_step = static_cast<int>(std::ceil(cfg.step_fraction * total));

    ImportanceConfig icfg;
    icfg.batch_size = cfg.batch_size;
    icfg.subsample = cfg.importance_subsample;
    icfg.p_mask = cfg.p_mask;
    icfg.seed = cfg.seed;

    PruneTrajectory out;
    out.task = eval_task.name;
    out.seed = cfg.seed;
    out.shared = m.cfg.share_params;
    out.n_layers = m.cfg.n_layers;
    out.n_heads = m.cfg.n_heads;
    out.norm = cfg.norm;
    out.mode = cfg.mode;
    out.metric = eval_task.metric;

    auto retained_of = [&]() {
        std::vector<HeadId> live;
        for (const HeadId& u : units)
            if (!detail::unit_masked(m, u)) live.push_back(u);
        return live;
    };

    out.metric_full = sweep_evaluate(m, eval_task, cfg);
    PruneStep base;
    base.step = 0;
    base.retained = retained_of();
    base.metric_value = out.metric_full;
    base.relative_performance = relative_performance(out.metric_full, out.metric_full);
    out.steps.push_back(base);

    // one-shot mode ranks once on the unpruned model and never re-estimates
    std::vector<HeadId> fixed_order;
    if (cfg.mode == SweepMode::one_shot) {
        ImportanceTable t = normalize_importance(estimate_importance(m, importance_task, icfg), cfg.norm);
        fixed_order = rank_heads(t);
    }

    int masked = 0, step = 0;
    while (masked < total) {
        ++step;
        std::vector<HeadId> victims;
        if (cfg.mode == SweepMode::iterative) {
            ImportanceTable t =
                normalize_importance(estimate_importance(m, importance_task, icfg), cfg.norm);
            for (const HeadId& u : rank_heads(t)) {
                if (static_cast<int>(victims.size()) == per_step) break;
                if (!detail::unit_masked(m, u)) victims.push_back(u);
            }
        } else {
            for (const HeadId& u : fixed_order) {
                if (static_cast<int>(victims.size()) == per_step) break;
                if (!detail::unit_masked(m, u)) victims.push_back(u);
            }
        }
        for (const HeadId& u : victims) detail::mask_unit(m, u);
        masked += static_cast<int>(victims.size());

        PruneStep ps;
        ps.step = step;
        ps.pruned_now = victims;
        ps.retained = retained_of();
        ps.pruned_ratio = static_cast<double>(masked) / static_cast<double>(total);
        ps.metric_value = sweep_evaluate(m, eval_task, cfg);
        ps.relative_performance = relative_performance(ps.metric_value, out.metric_full);
        out.steps.push_back(ps);
    }
    return out;
}

template <typename T>
PruneTrajectory prune_sweep(const TransformerModel<T>& model, const Dataset& task,
                            const SweepConfig& cfg) {
    return prune_sweep(model, task, task, cfg);
}

struct OracleResult {
    std::vector<HeadId> retained;
    double metric = 0.0;
};

// Exhaustive best-k retained set, for cross-checking greedy pruning on small
// models. Ties keep the lexicographically smallest subset.
template <typename T>
OracleResult oracle_best_subset(const TransformerModel<T>& model, const Dataset& task, int k,
                                const SweepConfig& cfg) {
    const std::vector<HeadId> units = detail::sweep_units(model);
    const int total = static_cast<int>(units.size());
    if (total > 12)
        throw ContractError("oracle_best_subset: " + std::to_string(total) +
                            " heads exceed the exhaustive limit of 12");
    if (k < 0 || k > total) throw ContractError("oracle_best_subset: k out of range");

    OracleResult best;
    bool have = false;
    std::vector<int> pick(static_cast<size_t>(k));
    std::iota(pick.begin(), pick.end(), 0);  // first k indices = lexicographically smallest
    while (true) {
        TransformerModel<T> m = model.clone();
        std::vector<uint8_t> keep(static_cast<size_t>(total), 0);
        for (int i : pick) keep[static_cast<size_t>(i)] = 1;
        for (int i = 0; i < total; ++i)
            if (!keep[static_cast<size_t>(i)]) detail::mask_unit(m, units[static_cast<size_t>(i)]);
        const double metric = sweep_evaluate(m, task, cfg);
        if (!have || metric > best.metric) {
            have = true;
            best.metric = metric;
            best.retained.clear();
            for (int i : pick) best.retained.push_back(units[static_cast<size_t>(i)]);
        }
        // next combination in lexicographic order
        int i = k - 1;
        while (i >= 0 && pick[static_cast<size_t>(i)] == total - k + i) --i;
        if (i < 0) break;
        ++pick[static_cast<size_t>(i)];
        for (int j = i + 1; j < k; ++j) pick[static_cast<size_t>(j)] = pick[static_cast<size_t>(j - 1)] + 1;
    }
    return best;
}

// Zeroes each listed head's value projection (weights and bias slice), making
// its output contribution exactly zero while its attention pattern survives.
template <typename T>
void zero_value_heads(TransformerModel<T>& m, const std::vector<HeadId>& heads) {
    const int D = m.cfg.d_model, dh = m.cfg.d_head;
    for (const HeadId& id : heads) {
        if (id.layer < 0 || id.layer >= static_cast<int>(m.blocks.size()) || id.head < 0 ||
            id.head >= m.cfg.n_heads)
            throw ContractError("zero_value_heads: head " + head_str(id) + " out of range");
        LayerParams<T>& blk = m.blocks[static_cast<size_t>(id.layer)];
        auto& wv = blk.wv.data();
        auto& bv = blk.bv.data();
        for (int r = 0; r < D; ++r)
            for (int c = 0; c < dh; ++c) wv[static_cast<size_t>(r) * static_cast<size_t>(D) +
                                             static_cast<size_t>(id.head * dh + c)] = T(0);
        for (int c = 0; c < dh; ++c) bv[static_cast<size_t>(id.head * dh + c)] = T(0);
    }
}

}  // namespace headlab
