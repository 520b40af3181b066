#pragma once
// Cross-task head-set consistency (recall over retained-head sets), attention
// Jensen-Shannon divergence, intermediate-feature L2 distance, the
// importance-vs-divergence correlation, and the layer-freezing comparison.

#include <algorithm>
#include <array>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "headlab/importance.hpp"
#include "headlab/model.hpp"
#include "headlab/tasks.hpp"
#include "headlab/train.hpp"

namespace headlab {

// ---- head sets and recall ----

// A retained-head set with the provenance needed to label chart series.
struct HeadSet {
    std::set<HeadId> heads;
    std::string task;         // dataset the trajectory was evaluated on
    double threshold = 0.0;   // relative-performance cut that selected the set
    uint64_t sweep_seed = 0;  // seed of the originating sweep
};

// Smallest retained set whose relative performance still reaches x: scan from
// the most-pruned step back toward the baseline and take the first step that
// qualifies.  Because retained sets along a trajectory are nested, this rule
// also resolves non-monotone trajectories, and it makes the result grow with
// x: x <= x' implies H_x is a subset of H_x'.
inline HeadSet head_set_at_performance(const PruneTrajectory& traj, double x) {
    if (traj.steps.empty()) throw ContractError("head_set_at_performance: empty trajectory");
    if (!(x >= 0.0 && x <= 1.0))
        throw ContractError("head_set_at_performance: x must lie in [0,1], got " + format_real(x));
    const PruneStep* chosen = nullptr;
    for (auto it = traj.steps.rbegin(); it != traj.steps.rend(); ++it) {
        if (it->relative_performance >= x) {
            chosen = &*it;
            break;
        }
    }
    // The baseline step has relative performance 1.0 >= x, so a sweep-produced
    // trajectory always qualifies somewhere; a hand-built trajectory with no
    // qualifying step falls back to its least-pruned (fullest) set.
    if (chosen == nullptr) chosen = &traj.steps.front();
    HeadSet s;
    s.heads.insert(chosen->retained.begin(), chosen->retained.end());
    s.task = traj.task;
    s.threshold = x;
    s.sweep_seed = traj.seed;
    return s;
}

// Fraction of the downstream-important heads that the pre-train set retains.
inline double recall(const HeadSet& hp, const HeadSet& hd) {
    if (hd.heads.empty()) throw ContractError("recall: downstream head set is empty");
    size_t hit = 0;
    for (const HeadId& id : hd.heads) hit += hp.heads.count(id);
    return static_cast<double>(hit) / static_cast<double>(hd.heads.size());
}

struct RecallCurve {
    std::vector<double> x;                      // ascending grid of pre-train thresholds
    std::vector<std::vector<double>> per_seed;  // [seed][grid point]
    std::vector<double> mean;                   // across seeds, per grid point
    std::vector<double> stddev;                 // population std across seeds
    double down_threshold = 0.9;                // fixed downstream cut
};

namespace detail {

inline void check_traj_geometry(const PruneTrajectory& a, const PruneTrajectory& b) {
    if (a.n_layers != b.n_layers || a.n_heads != b.n_heads || a.shared != b.shared)
        throw GeometryError("recall_curve: trajectories come from different head grids (" +
                            std::to_string(a.n_layers) + "x" + std::to_string(a.n_heads) +
                            (a.shared ? " shared" : "") + " vs " + std::to_string(b.n_layers) + "x" +
                            std::to_string(b.n_heads) + (b.shared ? " shared" : "") + ")");
}

inline void finalize_curve_stats(RecallCurve& c) {
    const size_t n_seeds = c.per_seed.size(), n_x = c.x.size();
    c.mean.assign(n_x, 0.0);
    c.stddev.assign(n_x, 0.0);
    for (size_t g = 0; g < n_x; ++g) {
        double m = 0.0;
        for (const auto& row : c.per_seed) m += row[g];
        m /= static_cast<double>(n_seeds);
        double var = 0.0;
        for (const auto& row : c.per_seed) var += (row[g] - m) * (row[g] - m);
        c.mean[g] = m;
        c.stddev[g] = std::sqrt(var / static_cast<double>(n_seeds));
    }
}

}  // namespace detail

// Single seed-pair curve over an explicit threshold grid.
inline RecallCurve recall_curve(const PruneTrajectory& pretrain_traj,
                                const PruneTrajectory& downstream_traj,
                                const std::vector<double>& x_grid, double down_threshold = 0.9) {
    detail::check_traj_geometry(pretrain_traj, downstream_traj);
    if (x_grid.empty()) throw ContractError("recall_curve: empty threshold grid");
    RecallCurve c;
    c.x = x_grid;
    std::sort(c.x.begin(), c.x.end());
    c.down_threshold = down_threshold;
    const HeadSet hd = head_set_at_performance(downstream_traj, down_threshold);
    std::vector<double> row;
    for (double x : c.x) row.push_back(recall(head_set_at_performance(pretrain_traj, x), hd));
    c.per_seed.push_back(std::move(row));
    detail::finalize_curve_stats(c);
    return c;
}

// Multi-seed curve: seed i pairs pretrain trajectory i with downstream
// trajectory i.  The grid is the union of relative-performance values the
// pre-train sweeps actually realized (no interpolation).
inline RecallCurve recall_curve(const std::vector<PruneTrajectory>& pretrain_by_seed,
                                const std::vector<PruneTrajectory>& downstream_by_seed,
                                double down_threshold = 0.9) {
    if (pretrain_by_seed.empty() || pretrain_by_seed.size() != downstream_by_seed.size())
        throw ContractError("recall_curve: need equally many pre-train and downstream trajectories");
    RecallCurve c;
    c.down_threshold = down_threshold;
    for (size_t i = 0; i < pretrain_by_seed.size(); ++i) {
        detail::check_traj_geometry(pretrain_by_seed[i], downstream_by_seed[i]);
        for (const PruneStep& s : pretrain_by_seed[i].steps)
            c.x.push_back(std::clamp(s.relative_performance, 0.0, 1.0));
    }
    std::sort(c.x.begin(), c.x.end());
    c.x.erase(std::unique(c.x.begin(), c.x.end()), c.x.end());
    for (size_t i = 0; i < pretrain_by_seed.size(); ++i) {
        const HeadSet hd = head_set_at_performance(downstream_by_seed[i], down_threshold);
        std::vector<double> row;
        for (double x : c.x)
            row.push_back(recall(head_set_at_performance(pretrain_by_seed[i], x), hd));
        c.per_seed.push_back(std::move(row));
    }
    detail::finalize_curve_stats(c);
    return c;
}

// ---- Jensen-Shannon divergence ----

// JS(p, q) = ½KL(p‖m) + ½KL(q‖m) with m = (p+q)/2, natural log, 0·ln 0 = 0.
// Inputs must be distributions already (sum within 1e-5 of 1); tiny drift is
// renormalized away.  Symmetric by construction and bounded by ln 2.
inline double js_divergence(const std::vector<double>& p, const std::vector<double>& q) {
    if (p.size() != q.size()) throw ContractError("js_divergence: length mismatch");
    if (p.empty()) throw ContractError("js_divergence: empty distributions");
    double sp = 0.0, sq = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        if (p[i] < 0.0 || q[i] < 0.0) throw ContractError("js_divergence: negative probability");
        sp += p[i];
        sq += q[i];
    }
    if (std::abs(sp - 1.0) > 1e-5 || std::abs(sq - 1.0) > 1e-5)
        throw ContractError("js_divergence: inputs must sum to 1 within 1e-5 (got " +
                            format_real(sp) + ", " + format_real(sq) + ")");
    // the two KL halves accumulate separately so swapping p and q produces
    // the identical addition sequence: symmetry holds bit for bit
    double kl_p = 0.0, kl_q = 0.0;
    for (size_t i = 0; i < p.size(); ++i) {
        const double pi = p[i] / sp, qi = q[i] / sq, mi = 0.5 * (pi + qi);
        if (pi > 0.0) kl_p += pi * std::log(pi / mi);
        if (qi > 0.0) kl_q += qi * std::log(qi / mi);
    }
    // clamp floating-point residue into the mathematical range
    return std::clamp(0.5 * kl_p + 0.5 * kl_q, 0.0, std::log(2.0));
}

// ---- attention divergence between two models ----

struct DivergenceTable {
    int n_layers = 0, n_heads = 0;
    std::vector<double> mean_js;  // per head, nats; row-major layer x head
    std::vector<double> max_js;   // per head, max over query positions/examples
    long long n_positions = 0;    // query positions averaged per head

    double mean_at(int layer, int head) const {
        return mean_js[static_cast<size_t>(layer * n_heads + head)];
    }
    double max_at(int layer, int head) const {
        return max_js[static_cast<size_t>(layer * n_heads + head)];
    }
    // Layer profiles aggregate the per-head means (head averages come first,
    // the layer line reports their mean / extreme).
    double layer_mean(int layer) const {
        double s = 0.0;
        for (int h = 0; h < n_heads; ++h) s += mean_at(layer, h);
        return s / n_heads;
    }
    double layer_max(int layer) const {
        double m = 0.0;
        for (int h = 0; h < n_heads; ++h) m = std::max(m, mean_at(layer, h));
        return m;
    }
};

struct CompareConfig {
    int batch_size = 16;
    int subsample = 0;  // >0: use only the first k dev examples
};

namespace detail {

inline void check_model_geometry(const ModelConfig& a, const ModelConfig& b, const char* who) {
    if (a.n_layers != b.n_layers || a.n_heads != b.n_heads || a.d_model != b.d_model ||
        a.d_head != b.d_head || a.max_seq_len != b.max_seq_len || a.vocab_size != b.vocab_size)
        throw GeometryError(std::string(who) + ": models have different geometry");
}

// Dev examples as raw (unmasked) token batches, chunked for bounded memory.
inline std::vector<std::vector<size_t>> dev_chunks(const Dataset& d, const CompareConfig& cfg) {
    if (cfg.batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (cfg.subsample < 0) throw ConfigError("subsample must be nonnegative");
    size_t n = d.dev.size();
    if (cfg.subsample > 0) n = std::min(n, static_cast<size_t>(cfg.subsample));
    if (n == 0) throw ContractError("model comparison needs a nonempty dev split");
    std::vector<std::vector<size_t>> chunks;
    for (size_t start = 0; start < n; start += static_cast<size_t>(cfg.batch_size)) {
        std::vector<size_t> c;
        for (size_t i = start; i < std::min(n, start + static_cast<size_t>(cfg.batch_size)); ++i)
            c.push_back(i);
        chunks.push_back(std::move(c));
    }
    return chunks;
}

}  // namespace detail

// Per-head JS divergence between the two models' attention distributions on
// the same inputs.  Rows are taken per query position over the valid keys
// (padding keys dropped, rows renormalized), then averaged over all valid
// query positions of all examples.
template <typename T>
DivergenceTable attention_divergence(const TransformerModel<T>& model_a,
                                     const TransformerModel<T>& model_b, const Dataset& data,
                                     const CompareConfig& cfg = {}) {
    detail::check_model_geometry(model_a.cfg, model_b.cfg, "attention_divergence");
    if (model_a.cfg.vocab_size != data.vocab.size())
        throw GeometryError("attention_divergence: model/vocab size mismatch");
    const int L = model_a.cfg.n_layers, H = model_a.cfg.n_heads;
    DivergenceTable table;
    table.n_layers = L;
    table.n_heads = H;
    table.mean_js.assign(static_cast<size_t>(L * H), 0.0);
    table.max_js.assign(static_cast<size_t>(L * H), 0.0);

    ForwardOptions opt;
    opt.capture = true;
    for (const auto& chunk : detail::dev_chunks(data, cfg)) {
        Batch b = make_cls_batch(data, chunk, /*dev_split=*/true);
        Tape<T> tape_a, tape_b;
        auto ra = model_a.forward(tape_a, b.ids, b.valid, b.batch, b.seq, opt);
        auto rb = model_b.forward(tape_b, b.ids, b.valid, b.batch, b.seq, opt);
        for (int l = 0; l < L; ++l) {
            const auto& pa = ra.trace.attention[static_cast<size_t>(l)];  // (B,H,S,S)
            const auto& pb = rb.trace.attention[static_cast<size_t>(l)];
            for (int ex = 0; ex < b.batch; ++ex) {
                // valid key positions for this example
                std::vector<int> keys;
                for (int kpos = 0; kpos < b.seq; ++kpos)
                    if (b.valid[static_cast<size_t>(ex * b.seq + kpos)]) keys.push_back(kpos);
                for (int h = 0; h < H; ++h) {
                    for (int qpos = 0; qpos < b.seq; ++qpos) {
                        if (!b.valid[static_cast<size_t>(ex * b.seq + qpos)]) continue;
                        std::vector<double> p, q;
                        double sp = 0.0, sq = 0.0;
                        for (int kpos : keys) {
                            const size_t at = static_cast<size_t>(
                                ((ex * H + h) * b.seq + qpos) * b.seq + kpos);
                            p.push_back(static_cast<double>(pa.data()[at]));
                            q.push_back(static_cast<double>(pb.data()[at]));
                            sp += p.back();
                            sq += q.back();
                        }
                        for (double& v : p) v /= sp;  // renormalize over valid keys
                        for (double& v : q) v /= sq;
                        const double js = js_divergence(p, q);
                        const size_t cell = static_cast<size_t>(l * H + h);
                        table.mean_js[cell] += js;
                        table.max_js[cell] = std::max(table.max_js[cell], js);
                        if (l == 0 && h == 0) ++table.n_positions;
                    }
                }
            }
        }
    }
    if (table.n_positions == 0) throw ContractError("attention_divergence: no valid query positions");
    for (double& v : table.mean_js) v /= static_cast<double>(table.n_positions);
    return table;
}

// ---- intermediate-feature distance ----

struct LayerDistanceProfile {
    int n_layers = 0;
    std::vector<double> mean_l2;  // per layer, averaged over valid tokens
    std::vector<double> max_l2;   // per layer, max over valid tokens
    long long n_tokens = 0;
};

// Euclidean distance between the two models' block outputs per (non-padding)
// token, averaged over tokens and examples, per layer.
template <typename T>
LayerDistanceProfile feature_distance(const TransformerModel<T>& model_a,
                                      const TransformerModel<T>& model_b, const Dataset& data,
                                      const CompareConfig& cfg = {}) {
    detail::check_model_geometry(model_a.cfg, model_b.cfg, "feature_distance");
    if (model_a.cfg.vocab_size != data.vocab.size())
        throw GeometryError("feature_distance: model/vocab size mismatch");
    const int L = model_a.cfg.n_layers, D = model_a.cfg.d_model;
    LayerDistanceProfile prof;
    prof.n_layers = L;
    prof.mean_l2.assign(static_cast<size_t>(L), 0.0);
    prof.max_l2.assign(static_cast<size_t>(L), 0.0);

    ForwardOptions opt;
    opt.capture = true;
    for (const auto& chunk : detail::dev_chunks(data, cfg)) {
        Batch b = make_cls_batch(data, chunk, /*dev_split=*/true);
        Tape<T> tape_a, tape_b;
        auto ra = model_a.forward(tape_a, b.ids, b.valid, b.batch, b.seq, opt);
        auto rb = model_b.forward(tape_b, b.ids, b.valid, b.batch, b.seq, opt);
        for (int l = 0; l < L; ++l) {
            const auto& xa = ra.trace.block_outputs[static_cast<size_t>(l)];  // (B,S,D)
            const auto& xb = rb.trace.block_outputs[static_cast<size_t>(l)];
            for (int ex = 0; ex < b.batch; ++ex) {
                for (int pos = 0; pos < b.seq; ++pos) {
                    if (!b.valid[static_cast<size_t>(ex * b.seq + pos)]) continue;
                    double sq = 0.0;
                    const size_t base = static_cast<size_t>((ex * b.seq + pos) * D);
                    for (int c = 0; c < D; ++c) {
                        const double diff = static_cast<double>(xa.data()[base + static_cast<size_t>(c)]) -
                                            static_cast<double>(xb.data()[base + static_cast<size_t>(c)]);
                        sq += diff * diff;
                    }
                    const double dist = std::sqrt(sq);
                    prof.mean_l2[static_cast<size_t>(l)] += dist;
                    prof.max_l2[static_cast<size_t>(l)] = std::max(prof.max_l2[static_cast<size_t>(l)], dist);
                    if (l == 0) ++prof.n_tokens;
                }
            }
        }
    }
    if (prof.n_tokens == 0) throw ContractError("feature_distance: no valid token positions");
    for (double& v : prof.mean_l2) v /= static_cast<double>(prof.n_tokens);
    return prof;
}

// ---- importance vs divergence correlation ----

struct ScatterPoint {
    HeadId head;
    double importance = 0.0;  // normalized importance
    double divergence = 0.0;  // mean JS, nats
};

struct CorrelationResult {
    double pearson_r = 0.0;
    double spearman_rho = 0.0;
    double slope = 0.0;      // OLS regression of divergence on importance
    double intercept = 0.0;
    std::vector<ScatterPoint> points;
};

namespace detail {

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    const size_t n = x.size();
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;  // a constant variable correlates with nothing
    return sxy / std::sqrt(sxx * syy);
}

// Average ranks (1-based), ties share the mean of their rank block.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
    std::vector<size_t> order(v.size());
    for (size_t i = 0; i < v.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(v.size(), 0.0);
    size_t i = 0;
    while (i < order.size()) {
        size_t j = i;
        while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
        const double shared = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = shared;
        i = j + 1;
    }
    return ranks;
}

}  // namespace detail

// One scatter point per head: normalized importance against mean JS.  For
// parameter-shared importance tables (one row of head positions), the
// divergence is averaged over layers so both sides live on the same universe.
inline CorrelationResult importance_divergence_correlation(const ImportanceTable& importance,
                                                           const DivergenceTable& divergence) {
    if (importance.n_heads != divergence.n_heads ||
        (!importance.shared && importance.n_layers != divergence.n_layers))
        throw GeometryError("importance_divergence_correlation: head universes differ");
    CorrelationResult res;
    if (importance.shared) {
        for (int h = 0; h < importance.n_heads; ++h) {
            double js = 0.0;
            for (int l = 0; l < divergence.n_layers; ++l) js += divergence.mean_at(l, h);
            res.points.push_back({{0, h}, importance.norm_at(0, h), js / divergence.n_layers});
        }
    } else {
        for (int l = 0; l < importance.n_layers; ++l)
            for (int h = 0; h < importance.n_heads; ++h)
                res.points.push_back({{l, h}, importance.norm_at(l, h), divergence.mean_at(l, h)});
    }
    if (res.points.size() < 3)
        throw ContractError("importance_divergence_correlation: need at least 3 heads, got " +
                            std::to_string(res.points.size()));
    std::vector<double> x, y;
    for (const auto& p : res.points) {
        x.push_back(p.importance);
        y.push_back(p.divergence);
    }
    res.pearson_r = detail::pearson(x, y);
    res.spearman_rho = detail::pearson(detail::average_ranks(x), detail::average_ranks(y));
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(x.size());
    my /= static_cast<double>(y.size());
    double sxy = 0.0, sxx = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
    }
    res.slope = sxx == 0.0 ? 0.0 : sxy / sxx;
    res.intercept = my - res.slope * mx;
    return res;
}

// ---- layer-freezing comparison ----

struct FreezeCompareResult {
    int k_frozen = 0;
    double metric_frozen = 0.0;
    double metric_unfrozen = 0.0;
    double ratio = 1.0;  // frozen relative to unfrozen
};

// Fine-tunes the same pre-trained model twice with identical seed and budget,
// once with the embedding plus the lowest k blocks frozen, once fully
// trainable, and reports the metric ratio.  k = 0 is a single run with ratio
// exactly 1.0 by construction.
template <typename T>
FreezeCompareResult freeze_compare(const TransformerModel<T>& pretrained, const Dataset& task,
                                   int k_frozen, const TrainConfig& cfg, uint64_t seed,
                                   uint64_t head_seed) {
    pretrained.check_freeze_k(k_frozen);
    FreezeCompareResult res;
    res.k_frozen = k_frozen;
    auto run = [&](int k) {
        auto m = make_task_model(pretrained, task.n_classes, head_seed);
        return finetune(m, task, cfg, seed, k).dev_metric;
    };
    if (k_frozen == 0) {
        res.metric_frozen = res.metric_unfrozen = run(0);
        res.ratio = 1.0;
        return res;
    }
    res.metric_frozen = run(k_frozen);
    res.metric_unfrozen = run(0);
    res.ratio = relative_performance(res.metric_frozen, res.metric_unfrozen);
    return res;
}

}  // namespace headlab
