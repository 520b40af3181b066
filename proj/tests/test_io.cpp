// Checkpoint container, CSV schemas, strict run configuration, and SVG
// chart determinism.

#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <string>

#include "headlab/checkpoint.hpp"
#include "headlab/config.hpp"
#include "headlab/csv.hpp"
#include "headlab/svg.hpp"
#include "headlab/tasks.hpp"
#include "helpers.hpp"

using namespace headlab;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config(int n_classes = 0) {
    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_model = 32;
    cfg.d_head = 16;
    cfg.d_ff = 64;
    cfg.max_seq_len = 16;
    cfg.n_classes = n_classes;
    return cfg;
}

struct TempDir {
    fs::path path;
    TempDir() : path(fs::temp_directory_path() / "headlab_io_test") {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

uint64_t read_u64_le(const std::string& bytes, size_t at) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
        v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[at + static_cast<size_t>(i)]))
             << (8 * i);
    return v;
}

}  // namespace

TEST_CASE("checkpoint serializes to the documented container layout") {
    auto m = TransformerModel<float>::init(small_config(2), 5);
    auto vocab = Vocab::synthetic();
    nlohmann::json prov = {{"kind", "finetune"}, {"seed", 7}, {"steps", 100}};
    const std::string bytes = serialize_checkpoint(m, vocab.id_to_tok, prov);

    REQUIRE(bytes.size() > 16);
    CHECK(bytes.substr(0, 4) == "HPRN");
    // version, little-endian u32
    CHECK(static_cast<unsigned char>(bytes[4]) == 1);
    CHECK(static_cast<unsigned char>(bytes[5]) == 0);
    CHECK(static_cast<unsigned char>(bytes[6]) == 0);
    CHECK(static_cast<unsigned char>(bytes[7]) == 0);
    const uint64_t meta_len = read_u64_le(bytes, 8);
    REQUIRE(16 + meta_len < bytes.size());

    const auto meta = nlohmann::json::parse(bytes.substr(16, meta_len));
    CHECK(meta.contains("config"));
    CHECK(meta.contains("gates"));
    CHECK(meta.contains("vocab"));
    CHECK(meta.contains("provenance"));
    CHECK(meta.contains("tensors"));
    CHECK(meta["config"]["n_layers"] == 2);
    CHECK(meta["config"]["n_classes"] == 2);
    CHECK(meta["provenance"]["kind"] == "finetune");
    CHECK(meta["vocab"].size() == 37);

    // payload is exactly the parameter floats, 4 bytes each, in directory order
    size_t total = 0;
    for (auto& e : m.parameters()) total += e.tensor.data().size();
    CHECK(bytes.size() == 16 + meta_len + 4 * total);
    uint64_t running = 0;
    for (const auto& t : meta["tensors"]) {
        CHECK(t["offset"].get<uint64_t>() == running);
        running += t["count"].get<uint64_t>() * 4;
    }

    // first payload float equals the first parameter element bit for bit
    const size_t payload = 16 + meta_len;
    float first = 0;
    uint32_t le = 0;
    for (int i = 0; i < 4; ++i)
        le |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[payload + static_cast<size_t>(i)]))
              << (8 * i);
    std::memcpy(&first, &le, 4);
    CHECK(first == m.parameters()[0].tensor.data()[0]);
}

TEST_CASE("checkpoint round-trip is byte-identical and forward-identical") {
    auto m = TransformerModel<float>::init(small_config(3), 9);
    m.gates.set_value(0, 1, 0.5);
    m.gates.set_masked(1, 0, true);
    auto vocab = Vocab::synthetic();
    nlohmann::json prov = {{"kind", "pretrain"}, {"seed", 9}, {"steps", 0}};

    const std::string once = serialize_checkpoint(m, vocab.id_to_tok, prov);
    Checkpoint ck = deserialize_checkpoint(once);
    const std::string twice = serialize_checkpoint(ck.model, ck.vocab_tokens, ck.provenance);
    REQUIRE(once == twice);  // save -> load -> save, bit for bit

    CHECK(ck.model.gates.value(0, 1) == 0.5);
    CHECK(ck.model.gates.masked(1, 0));
    CHECK(ck.vocab_tokens == vocab.id_to_tok);

    // reloaded model computes bit-identical forwards
    Dataset d = make_task("seg_entail", 3, 32, 8, 16);
    Batch b = make_cls_batch(d, {0, 1, 2, 3}, false);
    Tape<float> t1, t2;
    auto r1 = m.forward(t1, b.ids, b.valid, b.batch, b.seq);
    auto r2 = ck.model.forward(t2, b.ids, b.valid, b.batch, b.seq);
    auto l1 = m.cls_logits(t1, r1.encoder_out);
    auto l2 = ck.model.cls_logits(t2, r2.encoder_out);
    REQUIRE(l1.data() == l2.data());
}

TEST_CASE("checkpoint files survive the disk round trip") {
    TempDir tmp;
    auto m = TransformerModel<float>::init(small_config(), 11);
    auto vocab = Vocab::synthetic();
    const std::string path = tmp.file("model.ckpt");
    save_checkpoint(path, m, vocab.id_to_tok, {{"kind", "pretrain"}});
    Checkpoint ck = load_checkpoint(path);
    for (size_t i = 0; i < m.parameters().size(); ++i)
        REQUIRE(ck.model.parameters()[i].tensor.data() == m.parameters()[i].tensor.data());

    CHECK_THROWS_AS(load_checkpoint(tmp.file("missing.ckpt")), InputError);
    CHECK_THROWS_AS(save_checkpoint((tmp.path / "no_dir" / "x.ckpt").string(), m,
                                    vocab.id_to_tok, {}),
                    InputError);
}

TEST_CASE("checkpoint refuses bad magic, versions, and truncation") {
    auto m = TransformerModel<float>::init(small_config(), 13);
    auto vocab = Vocab::synthetic();
    const std::string good = serialize_checkpoint(m, vocab.id_to_tok, {});

    std::string bad_magic = good;
    bad_magic[0] = 'X';
    CHECK_THROWS_AS(deserialize_checkpoint(bad_magic), CheckpointError);
    CHECK_THROWS_WITH(deserialize_checkpoint(bad_magic), Catch::Matchers::ContainsSubstring("magic"));

    std::string bad_version = good;
    bad_version[4] = 9;
    CHECK_THROWS_AS(deserialize_checkpoint(bad_version), CheckpointError);
    CHECK_THROWS_WITH(deserialize_checkpoint(bad_version),
                      Catch::Matchers::ContainsSubstring("version 9"));

    for (size_t cut : {size_t(2), size_t(7), size_t(12), size_t(40), good.size() - 5})
        CHECK_THROWS_AS(deserialize_checkpoint(good.substr(0, cut)), CheckpointError);

    // metadata garbage
    std::string bad_meta = good;
    bad_meta[20] = '!';
    CHECK_THROWS_AS(deserialize_checkpoint(bad_meta), CheckpointError);

    // vocabulary that disagrees with the declared vocab_size
    std::vector<std::string> short_vocab = {"a", "b"};
    CHECK_THROWS_AS(serialize_checkpoint(m, short_vocab, {}), ContractError);
}

TEST_CASE("importance CSV emits one row per table cell") {
    ImportanceTable t;
    t.shared = false;
    t.n_layers = 2;
    t.n_heads = 2;
    t.raw = {3, 4, 0.5, 0.25};
    t.n_examples = 96;
    t = normalize_importance(t, NormMode::l2);
    const std::string csv = importance_csv(t);
    CHECK(csv ==
          "layer,head,raw,normalized,norm_mode,n_examples\n"
          "0,0,3,0.6,l2,96\n"
          "0,1,4,0.8,l2,96\n"
          "1,0,0.5,0.894427191,l2,96\n"
          "1,1,0.25,0.4472135955,l2,96\n");
}

TEST_CASE("trajectory CSV round-trips through its parser") {
    PruneTrajectory t;
    t.task = "tok_majority";
    t.seed = 3;
    t.n_layers = 2;
    t.n_heads = 2;
    t.metric = MetricKind::Accuracy;
    t.metric_full = 0.9;
    PruneStep s0;
    s0.step = 0;
    s0.pruned_ratio = 0.0;
    s0.retained = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
    s0.metric_value = 0.9;
    s0.relative_performance = 1.0;
    PruneStep s1;
    s1.step = 1;
    s1.pruned_ratio = 0.5;
    s1.pruned_now = {{0, 1}, {1, 0}};
    s1.retained = {{0, 0}, {1, 1}};
    s1.metric_value = 0.72;
    s1.relative_performance = 0.8;
    PruneStep s2;
    s2.step = 2;
    s2.pruned_ratio = 1.0;
    s2.retained = {};
    s2.metric_value = 0.45;
    s2.relative_performance = 0.5;
    t.steps = {s0, s1, s2};

    const std::string csv = trajectory_csv(t);
    CHECK(csv ==
          "step,pruned_ratio,retained_heads,metric_name,metric_value,relative_performance\n"
          "0,0,0:0;0:1;1:0;1:1,accuracy,0.9,1\n"
          "1,0.5,0:0;1:1,accuracy,0.72,0.8\n"
          "2,1,,accuracy,0.45,0.5\n");

    PruneTrajectory back = parse_trajectory_csv(csv, "test");
    REQUIRE(back.steps.size() == 3);
    CHECK(back.n_layers == 2);
    CHECK(back.n_heads == 2);
    CHECK(back.metric == MetricKind::Accuracy);
    CHECK(back.metric_full == 0.9);
    CHECK(back.steps[0].retained.size() == 4);
    CHECK(back.steps[1].retained == (std::vector<HeadId>{{0, 0}, {1, 1}}));
    CHECK(back.steps[2].retained.empty());
    CHECK(back.steps[1].relative_performance == 0.8);

    CHECK_THROWS_AS(parse_trajectory_csv("wrong,header\n1,2\n", "test"), InputError);
    CHECK_THROWS_AS(parse_trajectory_csv(TRAJECTORY_HEADER + "\n0,0,bad-head,m,1,1\n", "test"),
                    InputError);
    CHECK_THROWS_AS(parse_trajectory_csv(TRAJECTORY_HEADER + "\n0,0,0:0\n", "test"), InputError);
    CHECK_THROWS_AS(parse_trajectory_csv(TRAJECTORY_HEADER + "\n", "test"), InputError);
}

TEST_CASE("divergence and distance CSVs round-trip") {
    DivergenceTable d;
    d.n_layers = 2;
    d.n_heads = 2;
    d.mean_js = {0.1, 0.2, 0.3, 0.4};
    d.max_js = {0.15, 0.25, 0.35, 0.45};
    const std::string csv = divergence_csv(d);
    CHECK(csv ==
          "layer,head,mean_js_nats,max_js_nats\n"
          "0,0,0.1,0.15\n"
          "0,1,0.2,0.25\n"
          "1,0,0.3,0.35\n"
          "1,1,0.4,0.45\n");
    auto back = parse_divergence_csv(csv, "test");
    CHECK(back.n_layers == 2);
    CHECK(back.mean_js == d.mean_js);
    CHECK(back.max_js == d.max_js);
    CHECK_THROWS_AS(parse_divergence_csv("layer,head,mean_js_nats,max_js_nats\n0,0,0.1,0.2\n0,2,0.1,0.2\n",
                                         "test"),
                    InputError);  // grid gap

    LayerDistanceProfile p;
    p.n_layers = 2;
    p.mean_l2 = {0.0, 1.25};
    p.max_l2 = {0.0, 2.5};
    const std::string dcsv = distance_csv(p);
    CHECK(dcsv == "layer,mean_l2,max_l2\n0,0,0\n1,1.25,2.5\n");
    auto pback = parse_distance_csv(dcsv, "test");
    CHECK(pback.mean_l2 == p.mean_l2);
    CHECK(pback.max_l2 == p.max_l2);
    CHECK_THROWS_AS(parse_distance_csv("layer,mean_l2,max_l2\n1,0,0\n", "test"), InputError);
}

TEST_CASE("recall CSV stores per-seed values in one field") {
    RecallCurve c;
    c.x = {0.5, 1.0};
    c.per_seed = {{0.25, 1.0}, {0.75, 1.0}};
    c.mean = {0.5, 1.0};
    c.stddev = {0.25, 0.0};
    const std::string csv = recall_csv(c);
    CHECK(csv ==
          "x,recall_mean,recall_std,seed_values\n"
          "0.5,0.5,0.25,0.25;0.75\n"
          "1,1,0,1;1\n");
    auto back = parse_recall_csv(csv, "test");
    CHECK(back.x == c.x);
    CHECK(back.mean == c.mean);
    CHECK(back.stddev == c.stddev);
    REQUIRE(back.per_seed.size() == 2);
    CHECK(back.per_seed[0] == c.per_seed[0]);
    CHECK(back.per_seed[1] == c.per_seed[1]);
    CHECK_THROWS_AS(
        parse_recall_csv("x,recall_mean,recall_std,seed_values\n0.5,0.5,0,1;1\n1,1,0,1\n", "test"),
        InputError);
}

TEST_CASE("correlation CSV uses the two-block layout") {
    CorrelationResult r;
    r.pearson_r = 0.125;
    r.spearman_rho = -0.5;
    r.slope = 2.0;
    r.intercept = 0.25;
    r.points = {{{0, 0}, 0.1, 0.3}, {{0, 1}, 0.2, 0.1}, {{1, 0}, 0.4, 0.2}};
    const std::string csv = correlation_csv(r);
    CHECK(csv ==
          "pearson_r,spearman_rho,slope,intercept\n"
          "0.125,-0.5,2,0.25\n"
          "layer,head,importance,mean_js_nats\n"
          "0,0,0.1,0.3\n"
          "0,1,0.2,0.1\n"
          "1,0,0.4,0.2\n");
    auto back = parse_correlation_csv(csv, "test");
    CHECK(back.pearson_r == 0.125);
    CHECK(back.spearman_rho == -0.5);
    CHECK(back.slope == 2.0);
    CHECK(back.intercept == 0.25);
    REQUIRE(back.points.size() == 3);
    CHECK(back.points[2].head == HeadId{1, 0});
    CHECK(back.points[2].importance == 0.4);
    CHECK_THROWS_AS(parse_correlation_csv("pearson_r\n0.1\n", "test"), InputError);
}

TEST_CASE("run config parses strictly and rejects unknown keys") {
    nlohmann::json j = {
        {"model", {{"n_layers", 2}, {"n_heads", 2}, {"d_model", 32}, {"d_head", 16}, {"d_ff", 64}, {"max_seq_len", 16}, {"share_params", true}}},
        {"data", {{"task", "pair_grammar"}, {"n_train", 512}, {"n_dev", 128}, {"seq_len", 16}, {"data_seed", 12}}},
        {"train", {{"steps", 400}, {"batch_size", 16}, {"lr", 1e-3}}},
        {"sweep", {{"norm", "l2"}, {"mode", "one_shot"}, {"step_fraction", 0.25}, {"eval_subsample", 0}}},
        {"seeds", {100, 101}},
        {"k_frozen", 1},
        {"out_dir", "runs/x"}};
    RunConfig cfg = parse_run_config(j);
    CHECK(cfg.model.n_layers == 2);
    CHECK(cfg.model.share_params);
    CHECK(cfg.data.task == "pair_grammar");
    CHECK(cfg.data.data_seed == 12);
    CHECK(cfg.train.steps == 400);
    CHECK(cfg.train.lr == 1e-3);
    CHECK(cfg.sweep.norm == NormMode::l2);
    CHECK(cfg.sweep.mode == SweepMode::one_shot);
    CHECK(cfg.sweep.eval_subsample == 0);
    CHECK(cfg.seeds == std::vector<uint64_t>{100, 101});
    CHECK(cfg.k_frozen == 1);
    CHECK(cfg.out_dir == "runs/x");
    // defaults survive for everything unspecified
    CHECK(cfg.train.p_mask == 0.15);
    CHECK(cfg.sweep.importance_subsample == 128);

    nlohmann::json top = j;
    top["typo_key"] = 1;
    CHECK_THROWS_WITH(parse_run_config(top), Catch::Matchers::ContainsSubstring("typo_key"));
    nlohmann::json model = j;
    model["model"]["n_layer"] = 3;
    CHECK_THROWS_WITH(parse_run_config(model), Catch::Matchers::ContainsSubstring("model.n_layer"));
    nlohmann::json sweep = j;
    sweep["sweep"]["norm"] = "l7";
    CHECK_THROWS_AS(parse_run_config(sweep), ConfigError);
    nlohmann::json badtype = j;
    badtype["train"]["steps"] = "many";
    CHECK_THROWS_AS(parse_run_config(badtype), ConfigError);
    nlohmann::json noseeds = j;
    noseeds["seeds"] = nlohmann::json::array();
    CHECK_THROWS_AS(parse_run_config(noseeds), ConfigError);
    CHECK_THROWS_AS(parse_run_config(nlohmann::json::array()), ConfigError);

    // defaults-only config works, and the echo round-trips
    CHECK(parse_run_config(nlohmann::json::object()).seeds == std::vector<uint64_t>{1});
    RunConfig echo = parse_run_config(run_config_to_json(cfg));
    CHECK(run_config_to_json(echo) == run_config_to_json(cfg));

    TempDir tmp;
    write_text_file(tmp.file("cfg.json"), j.dump());
    CHECK(load_run_config(tmp.file("cfg.json")).data.task == "pair_grammar");
    write_text_file(tmp.file("broken.json"), "{nope");
    CHECK_THROWS_AS(load_run_config(tmp.file("broken.json")), ConfigError);
    CHECK_THROWS_AS(load_run_config(tmp.file("missing.json")), ConfigError);
}

TEST_CASE("SVG charts render deterministically") {
    auto build = []() {
        svg::Chart chart("relative performance vs pruned ratio", "pruned ratio",
                         "relative performance");
        svg::Series seed_a;
        seed_a.points = {{0.0, 1.0}, {0.5, 0.8}, {1.0, 0.4}};
        seed_a.label = "seed 1";
        seed_a.dotted = true;
        chart.add_series(seed_a);
        svg::Series seed_b;
        seed_b.points = {{0.0, 1.0}, {0.5, 0.9}, {1.0, 0.3}};
        seed_b.label = "seed 2";
        seed_b.dotted = true;
        chart.add_series(seed_b);
        svg::Band band;
        band.x = {0.0, 0.5, 1.0};
        band.lo = {0.95, 0.75, 0.25};
        band.hi = {1.0, 0.95, 0.45};
        chart.add_band(band);
        svg::Scatter sc;
        sc.points = {{0.2, 0.6}, {0.7, 0.5}};
        sc.label = "heads";
        chart.add_scatter(sc);
        chart.add_line(-0.5, 1.0, "fit");
        return chart.render();
    };
    const std::string a = build(), b = build();
    REQUIRE(a == b);  // byte-identical rerun
    CHECK(a.substr(0, 4) == "<svg");
    CHECK(a.find("<polyline") != std::string::npos);
    CHECK(a.find("stroke-dasharray") != std::string::npos);  // dotted per-seed lines
    CHECK(a.find("<polygon") != std::string::npos);          // std band
    CHECK(a.find("<circle") != std::string::npos);           // scatter
    CHECK(a.find("seed 2") != std::string::npos);            // legend
    CHECK(a.find("</svg>") != std::string::npos);

    svg::Chart empty("nothing", "x", "y");
    CHECK_THROWS_AS(empty.render(), ContractError);

    // label text is escaped
    svg::Chart esc("a<b & c>d", "x", "y");
    svg::Series s;
    s.points = {{0, 0}, {1, 1}};
    esc.add_series(s);
    const std::string rendered = esc.render();
    CHECK(rendered.find("a&lt;b &amp; c&gt;d") != std::string::npos);
    CHECK(rendered.find("a<b") == std::string::npos);
}

TEST_CASE("text file helpers round-trip bytes exactly") {
    TempDir tmp;
    const std::string payload = "line1\nline2\r\nraw\tbytes\n";
    write_text_file(tmp.file("t.txt"), payload);
    CHECK(read_text_file(tmp.file("t.txt")) == payload);
    CHECK_THROWS_AS(read_text_file(tmp.file("nope.txt")), InputError);
    CHECK_THROWS_AS(write_text_file((tmp.path / "no_dir" / "t.txt").string(), "x"), InputError);
}
