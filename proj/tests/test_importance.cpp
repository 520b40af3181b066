// Gate-gradient importance (per-head and parameter-shared), normalization,
// ranking, and the iterative prune-and-evaluate sweep.

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <set>

#include "headlab/importance.hpp"
#include "headlab/model.hpp"
#include "headlab/tasks.hpp"
#include "headlab/train.hpp"
#include "helpers.hpp"

using namespace headlab;

namespace {

ModelConfig small_config(int n_classes = 0, bool shared = false, int n_layers = 2) {
    ModelConfig cfg;
    cfg.n_layers = n_layers;
    cfg.n_heads = 2;
    cfg.d_model = 32;
    cfg.d_head = 16;
    cfg.d_ff = 64;
    cfg.max_seq_len = 16;
    cfg.n_classes = n_classes;
    cfg.share_params = shared;
    return cfg;
}

// Copies head src's q/k/v projection slices and output rows onto head dst so
// both heads compute identical functions.
template <typename T>
void copy_head(TransformerModel<T>& m, int layer, int src, int dst) {
    LayerParams<T>& blk = m.blocks[static_cast<size_t>(layer)];
    const int D = m.cfg.d_model, dh = m.cfg.d_head;
    auto copy_cols = [&](Tensor<T>& w) {
        auto& v = w.data();
        for (int r = 0; r < D; ++r)
            for (int c = 0; c < dh; ++c)
                v[static_cast<size_t>(r * D + dst * dh + c)] = v[static_cast<size_t>(r * D + src * dh + c)];
    };
    auto copy_slice = [&](Tensor<T>& b) {
        auto& v = b.data();
        for (int c = 0; c < dh; ++c) v[static_cast<size_t>(dst * dh + c)] = v[static_cast<size_t>(src * dh + c)];
    };
    copy_cols(blk.wq);
    copy_cols(blk.wk);
    copy_cols(blk.wv);
    copy_slice(blk.bq);
    copy_slice(blk.bk);
    copy_slice(blk.bv);
    auto& wo = blk.wo.data();
    for (int r = 0; r < dh; ++r)
        for (int c = 0; c < D; ++c)
            wo[static_cast<size_t>((dst * dh + r) * D + c)] = wo[static_cast<size_t>((src * dh + r) * D + c)];
}

Batch small_mlm_batch(const Dataset& d, uint64_t seed, size_t n = 16) {
    RandomSource rng(seed);
    std::vector<size_t> idx;
    for (size_t i = 0; i < n; ++i) idx.push_back(i);
    return mask_tokens(d, idx, false, 0.15, rng);
}

// A quickly trained classifier whose value paths outside `live` are zeroed, so
// exactly those heads carry the function.
TransformerModel<float> planted_model(const std::string& task_name, const std::set<int>& live_flat,
                                      int n_layers, int n_heads, uint64_t seed, int steps = 200) {
    ModelConfig cfg = small_config(0, false, n_layers);
    cfg.n_heads = n_heads;
    cfg.d_model = n_heads * 16;
    cfg.d_ff = cfg.d_model * 2;
    Dataset d = make_task(task_name, seed, 512, 128, 16);
    auto base = TransformerModel<float>::init(cfg, seed);
    auto m = make_task_model(base, d.n_classes, seed + 1);
    // mask the dead slots during training so only live heads learn the task
    std::vector<HeadId> dead;
    for (int l = 0; l < n_layers; ++l)
        for (int h = 0; h < n_heads; ++h)
            if (!live_flat.count(l * n_heads + h)) dead.push_back({l, h});
    for (const HeadId& id : dead) m.gates.set_masked(id, true);
    TrainConfig tc;
    tc.steps = steps;
    tc.batch_size = 32;
    tc.lr = 3e-3;
    finetune(m, d, tc, seed);
    // unmask and surgically kill the dead slots: contribution and gradient
    // both become exactly zero while all gates report live
    for (const HeadId& id : dead) m.gates.set_masked(id, false);
    zero_value_heads(m, dead);
    return m;
}

}  // namespace

TEST_CASE("a zero value projection yields an exactly zero gate gradient") {
    Dataset d = make_task("mlm", 5, 64, 16, 16);
    auto m = TransformerModel<float>::init(small_config(), 3);
    zero_value_heads(m, {{0, 1}, {1, 0}});
    Batch b = small_mlm_batch(d, 7);
    auto g = gate_gradients(m, b, TaskKind::masked_lm);
    REQUIRE(g.size() == 4);
    CHECK(g[0] != 0.0);
    CHECK(g[1] == 0.0);  // (0,1) value path is all zeros
    CHECK(g[2] == 0.0);  // (1,0)
    CHECK(g[3] != 0.0);
    CHECK_THROWS_AS(zero_value_heads(m, {{5, 0}}), ContractError);
    CHECK_THROWS_AS(zero_value_heads(m, {{0, 9}}), ContractError);
}

TEST_CASE("identical heads receive identical gate gradients") {
    Dataset d = make_task("mlm", 6, 64, 16, 16);
    auto m = TransformerModel<float>::init(small_config(), 4);
    copy_head(m, 0, 0, 1);  // layer 0: head 1 := head 0
    Batch b = small_mlm_batch(d, 8);
    auto g = gate_gradients(m, b, TaskKind::masked_lm);
    CHECK(g[0] == g[1]);  // same params, same input → bitwise-equal gradients
    CHECK(g[2] != g[3]);  // untouched layer keeps distinct heads
}

TEST_CASE("gate gradients match finite differences of the loss") {
    // double precision end to end so the central-difference oracle is tight
    for (bool classification : {false, true}) {
        ModelConfig cfg = small_config(classification ? 2 : 0);
        auto m = TransformerModel<double>::init(cfg, 9);
        Dataset d = make_task(classification ? "tok_majority" : "mlm", 10, 64, 16, 16);
        Batch b;
        if (classification) {
            b = make_cls_batch(d, {0, 1, 2, 3, 4, 5, 6, 7}, false);
        } else {
            b = small_mlm_batch(d, 11, 8);
        }
        const TaskKind kind = classification ? TaskKind::classification : TaskKind::masked_lm;
        auto analytic = gate_gradients(m, b, kind);

        auto loss_at = [&]() {
            Tape<double> tape;
            auto res = m.forward(tape, b.ids, b.valid, b.batch, b.seq);
            Tensor<double> loss;
            if (kind == TaskKind::masked_lm) {
                loss = tape.cross_entropy_logits(m.lm_logits(tape, res.encoder_out), b.mlm_targets,
                                                 b.mlm_weight);
            } else {
                std::vector<double> w(static_cast<size_t>(b.batch), 1.0);
                loss = tape.cross_entropy_logits(m.cls_logits(tape, res.encoder_out), b.labels, w);
            }
            return static_cast<double>(loss.item());
        };

        const double h = 1e-3;
        for (int l = 0; l < cfg.n_layers; ++l) {
            for (int hd = 0; hd < cfg.n_heads; ++hd) {
                m.gates.set_value(l, hd, 1.0 + h);
                const double up = loss_at();
                m.gates.set_value(l, hd, 1.0 - h);
                const double down = loss_at();
                m.gates.set_value(l, hd, 1.0);
                const double fd = (up - down) / (2.0 * h);
                const double got = analytic[static_cast<size_t>(l * cfg.n_heads + hd)];
                const double tol = std::max(1e-6, 1e-4 * std::max(std::abs(fd), std::abs(got)));
                INFO("cls=" << classification << " gate (" << l << "," << hd << ") analytic "
                            << got << " fd " << fd);
                REQUIRE(std::abs(got - fd) <= tol);
            }
        }
    }
}

TEST_CASE("gate gradient estimation leaves parameters and flags untouched") {
    Dataset d = make_task("mlm", 12, 64, 16, 16);
    auto m = TransformerModel<float>::init(small_config(), 13);
    std::vector<std::vector<float>> before;
    for (auto& e : m.parameters()) before.push_back(e.tensor.data());
    Batch b = small_mlm_batch(d, 14);
    gate_gradients(m, b, TaskKind::masked_lm);
    auto params = m.parameters();
    for (size_t i = 0; i < params.size(); ++i) {
        CHECK(params[i].tensor.requires_grad());  // guard restored the flag
        CHECK(std::memcmp(params[i].tensor.data().data(), before[i].data(),
                          before[i].size() * sizeof(float)) == 0);
    }
}

TEST_CASE("importance on one layer: shared equals unshared") {
    Dataset d = make_task("mlm", 15, 96, 16, 16);
    auto shared = TransformerModel<float>::init(small_config(0, true, 1), 16);
    auto untied = shared.untied_clone();
    REQUIRE_FALSE(untied.cfg.share_params);
    ImportanceConfig icfg;
    icfg.batch_size = 16;
    icfg.seed = 3;
    auto ts = estimate_importance(shared, d, icfg);
    auto tu = estimate_importance(untied, d, icfg);
    REQUIRE(ts.shared);
    REQUIRE(ts.rows() == 1);
    REQUIRE(tu.rows() == 1);
    for (int h = 0; h < 2; ++h)
        CHECK(ts.raw_at(0, h) == Catch::Approx(tu.raw_at(0, h)).margin(1e-12));
}

TEST_CASE("shared importance obeys the triangle inequality against layer sums") {
    Dataset d = make_task("mlm", 17, 96, 16, 16);
    auto shared = TransformerModel<float>::init(small_config(0, true, 3), 18);
    auto untied = shared.untied_clone();
    ImportanceConfig icfg;
    icfg.batch_size = 16;
    icfg.seed = 4;
    auto ts = estimate_importance(shared, d, icfg);
    auto tu = estimate_importance(untied, d, icfg);
    REQUIRE(ts.n_examples == tu.n_examples);
    for (int h = 0; h < 2; ++h) {
        double layer_sum = 0.0;
        for (int l = 0; l < 3; ++l) layer_sum += tu.raw_at(l, h);
        INFO("head " << h);
        CHECK(ts.raw_at(0, h) <= layer_sum + 1e-9);  // |Σx| ≤ Σ|x| per batch
    }
}

TEST_CASE("tied-weight gate gradients match an untied clone, layer-summed") {
    // Weight-tying identity: the shared model's ∂L/∂ξ_h^{(l)} per layer agrees with
    // the same gradient in an untied copy of the same weights.
    Dataset d = make_task("mlm", 19, 64, 16, 16);
    auto shared = TransformerModel<float>::init(small_config(0, true, 3), 20);
    auto untied = shared.untied_clone();
    Batch b = small_mlm_batch(d, 21);
    auto gs = gate_gradients(shared, b, TaskKind::masked_lm);
    auto gu = gate_gradients(untied, b, TaskKind::masked_lm);
    REQUIRE(gs.size() == gu.size());
    for (int h = 0; h < 2; ++h) {
        double sum_shared = 0.0, sum_untied = 0.0;
        for (int l = 0; l < 3; ++l) {
            sum_shared += gs[static_cast<size_t>(l * 2 + h)];
            sum_untied += gu[static_cast<size_t>(l * 2 + h)];
            // per-layer gradients agree too: same weights, same forward values
            CHECK(gs[static_cast<size_t>(l * 2 + h)] ==
                  Catch::Approx(gu[static_cast<size_t>(l * 2 + h)]).margin(1e-5));
        }
        CHECK(sum_shared == Catch::Approx(sum_untied).margin(1e-5));
    }
}

TEST_CASE("planted single-head model: that head dominates importance") {
    // only flat index 1 → head (0,1) carries the trained function
    auto m = planted_model("tok_majority", {1}, 2, 2, 29);
    Dataset d = make_task("tok_majority", 29, 512, 128, 16);
    ImportanceConfig icfg;
    icfg.batch_size = 32;
    icfg.subsample = 128;
    icfg.seed = 5;
    auto t = estimate_importance(m, d, icfg);
    const double live = t.raw_at(0, 1);
    CHECK(live > 0.0);
    CHECK(t.raw_at(0, 0) == 0.0);  // value paths zeroed ⇒ exactly no gradient
    CHECK(t.raw_at(1, 0) == 0.0);
    CHECK(t.raw_at(1, 1) == 0.0);

    // leave-one-out oracle: masking the planted head hurts; masking any dead
    // head leaves the metric bit-identical
    SweepConfig scfg;
    scfg.eval_subsample = 0;
    scfg.batch_size = 32;
    const double full = sweep_evaluate(m, d, scfg);
    REQUIRE(full > 0.6);  // the planted head did learn the task
    auto masked_metric = [&](HeadId id) {
        auto c = m.clone();
        c.gates.set_masked(id, true);
        return sweep_evaluate(c, d, scfg);
    };
    CHECK(masked_metric({0, 1}) < full);
    CHECK(masked_metric({0, 0}) == full);
    CHECK(masked_metric({1, 0}) == full);
    CHECK(masked_metric({1, 1}) == full);
}

TEST_CASE("importance estimation validates inputs") {
    Dataset d = make_task("mlm", 1, 32, 8, 16);
    auto m = TransformerModel<float>::init(small_config(), 1);
    ImportanceConfig icfg;
    icfg.batch_size = 0;
    CHECK_THROWS_AS(estimate_importance(m, d, icfg), ConfigError);
    icfg.batch_size = 16;
    icfg.subsample = -1;
    CHECK_THROWS_AS(estimate_importance(m, d, icfg), ConfigError);
    icfg.subsample = 0;
    Dataset empty = d;
    empty.train.clear();
    CHECK_THROWS_AS(estimate_importance(m, empty, icfg), ContractError);
    ModelConfig wrong = small_config();
    wrong.vocab_size = 11;
    auto mw = TransformerModel<float>::init(wrong, 1);
    CHECK_THROWS_AS(estimate_importance(mw, d, icfg), GeometryError);
    Dataset cls = make_task("seg_entail", 1, 32, 8, 16);
    CHECK_THROWS_AS(estimate_importance(m, cls, icfg), GeometryError);  // no 3-way head
}

TEST_CASE("normalization matches hand examples and flags zero rows") {
    ImportanceTable t;
    t.shared = false;
    t.n_layers = 3;
    t.n_heads = 2;
    t.raw = {3, 4, 2, 2, 0, 0};

    auto l2 = normalize_importance(t, NormMode::l2);
    CHECK(l2.norm_at(0, 0) == Catch::Approx(0.6).epsilon(1e-12));
    CHECK(l2.norm_at(0, 1) == Catch::Approx(0.8).epsilon(1e-12));
    CHECK(l2.zero_row_warning);          // row (0,0) passed through
    CHECK(l2.norm_at(2, 0) == 0.0);
    CHECK(l2.norm_at(2, 1) == 0.0);

    auto l1 = normalize_importance(t, NormMode::l1);
    CHECK(l1.norm_at(1, 0) == Catch::Approx(0.5).epsilon(1e-12));
    CHECK(l1.norm_at(1, 1) == Catch::Approx(0.5).epsilon(1e-12));

    auto none = normalize_importance(t, NormMode::none);
    CHECK(none.normalized == none.raw);
    CHECK_FALSE(none.zero_row_warning);

    CHECK(norm_from_name("l1") == NormMode::l1);
    CHECK(norm_from_name(norm_name(NormMode::l2)) == NormMode::l2);
    CHECK_THROWS_AS(norm_from_name("l3"), ConfigError);
}

TEST_CASE("normalization preserves within-row ranking on random tables") {
    RandomSource rng(31);
    for (int trial = 0; trial < 50; ++trial) {
        ImportanceTable t;
        t.shared = false;
        t.n_layers = 3;
        t.n_heads = 4;
        for (int i = 0; i < 12; ++i)
            t.raw.push_back(trial % 5 == 0 && i / 4 == 1 ? 0.0 : rng.uniform());
        for (NormMode mode : {NormMode::l1, NormMode::l2}) {
            auto n = normalize_importance(t, mode);
            for (int r = 0; r < 3; ++r) {
                double l1_sum = 0.0, l2_sum = 0.0;
                bool zero_row = true;
                for (int h = 0; h < 4; ++h) zero_row = zero_row && t.raw_at(r, h) == 0.0;
                for (int h = 0; h < 4; ++h) {
                    l1_sum += std::abs(n.norm_at(r, h));
                    l2_sum += n.norm_at(r, h) * n.norm_at(r, h);
                    for (int h2 = 0; h2 < 4; ++h2) {
                        // argsort equality: strict order relations survive
                        if (t.raw_at(r, h) < t.raw_at(r, h2))
                            REQUIRE(n.norm_at(r, h) < n.norm_at(r, h2));
                    }
                }
                if (!zero_row) {
                    if (mode == NormMode::l1) REQUIRE(l1_sum == Catch::Approx(1.0).margin(1e-6));
                    if (mode == NormMode::l2)
                        REQUIRE(std::sqrt(l2_sum) == Catch::Approx(1.0).margin(1e-6));
                }
            }
        }
    }
}

TEST_CASE("head ranking sorts ascending with index tie-breaks") {
    ImportanceTable t;
    t.shared = false;
    t.n_layers = 2;
    t.n_heads = 2;
    t.raw = {0.4, 0.1, 0.4, 0.9};
    t.normalized = t.raw;
    auto order = rank_heads(t);
    REQUIRE(order.size() == 4);
    CHECK(order[0] == HeadId{0, 1});
    CHECK(order[1] == HeadId{0, 0});  // tie 0.4: (0,0) before (1,0)
    CHECK(order[2] == HeadId{1, 0});
    CHECK(order[3] == HeadId{1, 1});

    ImportanceTable all_equal = t;
    all_equal.raw = {0.5, 0.5, 0.5, 0.5};
    all_equal.normalized = all_equal.raw;
    auto tie_order = rank_heads(all_equal);
    for (size_t i = 0; i < 4; ++i)
        CHECK(tie_order[i] == (HeadId{static_cast<int>(i) / 2, static_cast<int>(i) % 2}));

    // reference sort on 384 random scores
    ImportanceTable big;
    big.shared = false;
    big.n_layers = 96;
    big.n_heads = 4;
    RandomSource rng(37);
    for (int i = 0; i < 384; ++i) big.raw.push_back(rng.uniform());
    big.normalized = big.raw;
    auto got = rank_heads(big);
    std::vector<std::pair<double, HeadId>> ref;
    for (int l = 0; l < 96; ++l)
        for (int h = 0; h < 4; ++h) ref.push_back({big.norm_at(l, h), {l, h}});
    std::sort(ref.begin(), ref.end(), [](const auto& a, const auto& b) {
        return a.first != b.first ? a.first < b.first : a.second < b.second;
    });
    for (size_t i = 0; i < ref.size(); ++i) REQUIRE(got[i] == ref[i].second);
}

TEST_CASE("prune sweep produces a sound trajectory") {
    auto m = planted_model("tok_majority", {0, 1, 2, 3}, 2, 2, 43, 250);  // all heads live
    Dataset d = make_task("tok_majority", 43, 512, 128, 16);
    SweepConfig cfg;
    cfg.step_fraction = 0.25;  // 4 units → 1 per step
    cfg.eval_subsample = 64;
    cfg.importance_subsample = 64;
    cfg.seed = 7;
    auto traj = prune_sweep(m, d, cfg);

    REQUIRE(traj.steps.size() == 5);  // baseline + 4 pruning steps
    CHECK(traj.steps[0].pruned_ratio == 0.0);
    CHECK(traj.steps[0].relative_performance == 1.0);
    CHECK(traj.steps[0].pruned_now.empty());
    CHECK(traj.metric_full == traj.steps[0].metric_value);

    std::set<std::pair<int, int>> seen;
    for (size_t i = 1; i < traj.steps.size(); ++i) {
        const auto& s = traj.steps[i];
        CHECK(s.pruned_ratio > traj.steps[i - 1].pruned_ratio);  // strictly increasing
        REQUIRE(s.pruned_now.size() == 1);
        for (const auto& id : s.pruned_now) {
            const bool fresh = seen.insert({id.layer, id.head}).second;
            CHECK(fresh);  // pruned sets disjoint
        }
        CHECK(s.retained.size() == 4 - i);
    }
    CHECK(traj.steps.back().pruned_ratio == 1.0);
    CHECK(traj.steps.back().retained.empty());

    SweepConfig bad = cfg;
    bad.step_fraction = 0.0;
    CHECK_THROWS_AS(prune_sweep(m, d, bad), ConfigError);
    bad.step_fraction = 1.5;
    CHECK_THROWS_AS(prune_sweep(m, d, bad), ConfigError);
}

TEST_CASE("full-mask step scores chance and equals one-shot at fraction 1") {
    auto m = planted_model("tok_majority", {0, 1, 2, 3}, 2, 2, 47, 250);
    Dataset d = make_task("tok_majority", 47, 512, 256, 16);
    SweepConfig cfg;
    cfg.step_fraction = 1.0;
    cfg.eval_subsample = 0;  // full dev for a stable chance estimate
    cfg.importance_subsample = 64;
    cfg.seed = 9;
    auto iterative = prune_sweep(m, d, cfg);
    REQUIRE(iterative.steps.size() == 2);
    CHECK(iterative.steps[1].pruned_ratio == 1.0);
    // all attention gone: accuracy collapses toward the majority class
    CHECK(iterative.steps[1].metric_value <= 0.75);

    SweepConfig one_shot = cfg;
    one_shot.mode = SweepMode::one_shot;
    auto os = prune_sweep(m, d, one_shot);
    REQUIRE(os.steps.size() == iterative.steps.size());
    for (size_t i = 0; i < os.steps.size(); ++i) {
        CHECK(os.steps[i].metric_value == iterative.steps[i].metric_value);
        CHECK(os.steps[i].pruned_now == iterative.steps[i].pruned_now);
    }
}

TEST_CASE("sweeps are bit-reproducible per seed") {
    auto m = planted_model("tok_majority", {0, 3}, 2, 2, 53, 200);
    Dataset d = make_task("tok_majority", 53, 256, 128, 16);
    SweepConfig cfg;
    cfg.step_fraction = 0.5;
    cfg.eval_subsample = 48;
    cfg.importance_subsample = 48;
    cfg.seed = 11;
    auto a = prune_sweep(m, d, cfg);
    auto b = prune_sweep(m, d, cfg);
    REQUIRE(a.steps.size() == b.steps.size());
    for (size_t i = 0; i < a.steps.size(); ++i) {
        CHECK(a.steps[i].metric_value == b.steps[i].metric_value);  // bitwise
        CHECK(a.steps[i].pruned_now == b.steps[i].pruned_now);
        CHECK(a.steps[i].retained == b.steps[i].retained);
    }
    cfg.seed = 12;
    auto c = prune_sweep(m, d, cfg);
    bool same_eval = true;
    for (size_t i = 0; i < a.steps.size(); ++i)
        same_eval = same_eval && a.steps[i].metric_value == c.steps[i].metric_value;
    CHECK_FALSE(same_eval);  // different subsample/mask draws
}

TEST_CASE("planted redundancy: importance pruning beats random pruning") {
    // 8 units, half carry the function; the pruning-curve separation property at
    // unit-test scale.
    auto m = planted_model("tok_majority", {0, 2, 5, 7}, 2, 4, 59, 250);
    Dataset d = make_task("tok_majority", 59, 512, 128, 16);
    SweepConfig cfg;
    cfg.norm = NormMode::l1;
    cfg.step_fraction = 0.125;  // one unit per step
    cfg.eval_subsample = 0;
    cfg.importance_subsample = 96;
    cfg.seed = 13;
    auto traj = prune_sweep(m, d, cfg);

    // after 4 steps the 4 dead heads are gone and nothing else is
    const auto& at_half = traj.steps[4];
    REQUIRE(at_half.pruned_ratio == 0.5);
    CHECK(at_half.relative_performance >= 0.9);
    for (const auto& id : at_half.retained) {
        const int flat = id.layer * 4 + id.head;
        CHECK((flat == 0 || flat == 2 || flat == 5 || flat == 7));
    }

    // random same-size prunings: median strictly below the importance result
    RandomSource rng(61);
    std::vector<double> random_rel;
    std::vector<HeadId> units;
    for (int l = 0; l < 2; ++l)
        for (int h = 0; h < 4; ++h) units.push_back({l, h});
    for (int trial = 0; trial < 20; ++trial) {
        auto c = m.clone();
        std::vector<HeadId> shuffled = units;
        rng.shuffle(shuffled);
        for (int i = 0; i < 4; ++i) c.gates.set_masked(shuffled[static_cast<size_t>(i)], true);
        random_rel.push_back(relative_performance(sweep_evaluate(c, d, cfg), traj.metric_full));
    }
    std::sort(random_rel.begin(), random_rel.end());
    const double median = 0.5 * (random_rel[9] + random_rel[10]);
    INFO("importance rel " << at_half.relative_performance << " random median " << median);
    CHECK(at_half.relative_performance > median);
}

TEST_CASE("exhaustive subset oracle brackets greedy pruning") {
    auto m = planted_model("tok_majority", {0, 3}, 2, 2, 67, 250);
    Dataset d = make_task("tok_majority", 67, 256, 128, 16);
    SweepConfig cfg;
    cfg.eval_subsample = 0;
    cfg.importance_subsample = 96;
    cfg.seed = 17;

    auto full = oracle_best_subset(m, d, 4, cfg);
    REQUIRE(full.retained.size() == 4);
    CHECK(full.metric == sweep_evaluate(m, d, cfg));

    auto none = oracle_best_subset(m, d, 0, cfg);
    CHECK(none.retained.empty());
    CHECK(none.metric <= 0.75);  // no attention anywhere ≈ majority-class guessing

    auto best2 = oracle_best_subset(m, d, 2, cfg);
    REQUIRE(best2.retained.size() == 2);

    // greedy: retained set after pruning half via the sweep
    cfg.step_fraction = 0.25;
    auto traj = prune_sweep(m, d, cfg);
    const auto& at_half = traj.steps[2];
    REQUIRE(at_half.retained.size() == 2);
    CHECK(at_half.metric_value >= 0.8 * best2.metric);

    ModelConfig big = small_config(0, false, 4);
    big.n_heads = 4;
    big.d_model = 64;
    auto mb = TransformerModel<float>::init(big, 1);
    CHECK_THROWS_AS(oracle_best_subset(mb, d, 2, cfg), ContractError);  // 16 > 12 heads
    CHECK_THROWS_AS(oracle_best_subset(m, d, 5, cfg), ContractError);
    CHECK_THROWS_AS(oracle_best_subset(m, d, -1, cfg), ContractError);
}

TEST_CASE("shared-mode sweeps prune head positions across every layer") {
    ModelConfig cfg = small_config(0, true, 3);
    auto base = TransformerModel<float>::init(cfg, 71);
    Dataset d = make_task("mlm", 71, 256, 64, 16);
    TrainConfig tc;
    tc.steps = 150;
    tc.batch_size = 32;
    tc.lr = 3e-3;
    pretrain(base, d, tc, 71);

    SweepConfig scfg;
    scfg.step_fraction = 0.5;  // 2 head positions → 1 per step
    scfg.eval_subsample = 48;
    scfg.importance_subsample = 48;
    scfg.seed = 19;
    auto traj = prune_sweep(base, d, scfg);
    REQUIRE(traj.shared);
    REQUIRE(traj.steps.size() == 3);  // baseline + 2 positions
    REQUIRE(traj.steps[1].pruned_now.size() == 1);
    CHECK(traj.steps[1].pruned_now[0].layer == 0);  // units reported as layer 0
    CHECK(traj.steps[1].pruned_ratio == 0.5);
    CHECK(traj.steps[2].pruned_ratio == 1.0);
}
