#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "headlab/common.hpp"
#include "headlab/tensor.hpp"

namespace headlab {

struct ModelConfig {
    int n_layers = 4;
    int n_heads = 4;
    int d_model = 64;
    int d_head = 16;
    int d_ff = 128;
    int vocab_size = 37;
    int max_seq_len = 32;
    bool share_params = false;  // one parameter block reused by every layer
    int n_classes = 0;          // 0 = masked-lm head only; >0 adds a classifier head

    void validate() const {
        auto positive = [](int v, const char* name) {
            if (v <= 0) throw ConfigError(std::string(name) + " must be positive, got " + std::to_string(v));
        };
        positive(n_layers, "n_layers");
        positive(n_heads, "n_heads");
        positive(d_model, "d_model");
        positive(d_head, "d_head");
        positive(d_ff, "d_ff");
        positive(vocab_size, "vocab_size");
        positive(max_seq_len, "max_seq_len");
        if (d_model != n_heads * d_head)
            throw ConfigError("d_model (" + std::to_string(d_model) + ") must equal n_heads*d_head (" +
                              std::to_string(n_heads) + "*" + std::to_string(d_head) + ")");
        if (n_classes < 0) throw ConfigError("n_classes must be nonnegative");
    }

    int total_heads() const { return n_layers * n_heads; }
};

struct HeadId {
    int layer = 0;
    int head = 0;
    auto operator<=>(const HeadId&) const = default;
};

inline std::string head_str(const HeadId& h) {
    return std::to_string(h.layer) + ":" + std::to_string(h.head);
}

// Gate value and mask per (layer, head). Effective gate is 0 for masked
// heads regardless of the stored value; values default to the constant 1.
class HeadGateSet {
public:
    HeadGateSet() = default;
    HeadGateSet(int n_layers, int n_heads)
        : n_layers_(n_layers),
          n_heads_(n_heads),
          value_(static_cast<size_t>(n_layers) * n_heads, 1.0),
          masked_(static_cast<size_t>(n_layers) * n_heads, 0) {}

    int n_layers() const { return n_layers_; }
    int n_heads() const { return n_heads_; }

    double value(int l, int h) const { return value_[index(l, h)]; }
    void set_value(int l, int h, double v) { value_[index(l, h)] = v; }
    bool masked(int l, int h) const { return masked_[index(l, h)] != 0; }
    void set_masked(int l, int h, bool m) { masked_[index(l, h)] = m ? 1 : 0; }
    void set_masked(const HeadId& id, bool m) { set_masked(id.layer, id.head, m); }
    double effective(int l, int h) const { return masked(l, h) ? 0.0 : value(l, h); }

    int n_masked() const {
        int n = 0;
        for (uint8_t m : masked_) n += m;
        return n;
    }

    std::vector<HeadId> live_heads() const {
        std::vector<HeadId> out;
        for (int l = 0; l < n_layers_; ++l)
            for (int h = 0; h < n_heads_; ++h)
                if (!masked(l, h)) out.push_back({l, h});
        return out;
    }

    std::vector<HeadId> masked_heads() const {
        std::vector<HeadId> out;
        for (int l = 0; l < n_layers_; ++l)
            for (int h = 0; h < n_heads_; ++h)
                if (masked(l, h)) out.push_back({l, h});
        return out;
    }

    const std::vector<double>& raw_values() const { return value_; }
    const std::vector<uint8_t>& raw_masks() const { return masked_; }
    std::vector<double>& raw_values() { return value_; }
    std::vector<uint8_t>& raw_masks() { return masked_; }

private:
    size_t index(int l, int h) const {
        if (l < 0 || l >= n_layers_ || h < 0 || h >= n_heads_)
            throw ContractError("head index (" + std::to_string(l) + "," + std::to_string(h) + ") out of range");
        return static_cast<size_t>(l) * n_heads_ + h;
    }

    int n_layers_ = 0;
    int n_heads_ = 0;
    std::vector<double> value_;
    std::vector<uint8_t> masked_;
};

template <typename T>
struct LayerParams {
    Tensor<T> wq, bq, wk, bk, wv, bv;
    Tensor<T> wo;  // no output bias: a fully masked layer must contribute exactly zero
    Tensor<T> ln1_g, ln1_b;
    Tensor<T> ff1_w, ff1_b, ff2_w, ff2_b;
    Tensor<T> ln2_g, ln2_b;
};

// Per-layer post-softmax attention (B,H,S,S) and per-layer block outputs (B,S,D).
template <typename T>
struct ForwardTrace {
    std::vector<Tensor<T>> attention;
    std::vector<Tensor<T>> block_outputs;
};

template <typename T>
struct ForwardResult {
    Tensor<T> encoder_out;  // (B,S,D)
    std::vector<std::vector<Tensor<T>>> gate_tensors;  // [layer][head] scalar gates used this pass
    ForwardTrace<T> trace;  // filled when capture requested
};

struct ForwardOptions {
    bool capture = false;          // record attention weights and block outputs
    bool want_gate_grads = false;  // gate scalars require grad (importance estimation)
    bool apply_gates = true;       // false = ungated reference path for neutrality checks
};

template <typename T>
class TransformerModel {
public:
    ModelConfig cfg;
    Tensor<T> tok_emb, pos_emb, emb_ln_g, emb_ln_b;
    std::vector<LayerParams<T>> blocks;  // size 1 when share_params, else n_layers
    Tensor<T> lm_w, lm_b;                // masked-lm head (untied from tok_emb)
    Tensor<T> cls_w, cls_b;              // classifier head, present when n_classes > 0
    HeadGateSet gates;

    static TransformerModel init(const ModelConfig& config, uint64_t seed) {
        config.validate();
        TransformerModel m;
        m.cfg = config;
        m.gates = HeadGateSet(config.n_layers, config.n_heads);
        RandomSource rng(RandomSource::derive(seed, 0x696e6974, 0));  // init stream
        const double s = 0.02;
        const int D = config.d_model;
        auto w = [&](int r, int c) { return Tensor<T>::randn({r, c}, rng, s, true); };
        auto zeros1 = [&](int n) { return Tensor<T>::zeros({n}, true); };
        auto ones1 = [&](int n) {
            return Tensor<T>::from_data({n}, std::vector<T>(static_cast<size_t>(n), T(1)), true);
        };
        m.tok_emb = w(config.vocab_size, D);
        m.pos_emb = w(config.max_seq_len, D);
        m.emb_ln_g = ones1(D);
        m.emb_ln_b = zeros1(D);
        const int n_blocks = config.share_params ? 1 : config.n_layers;
        for (int b = 0; b < n_blocks; ++b) {
            LayerParams<T> p;
            p.wq = w(D, D);
            p.bq = zeros1(D);
            p.wk = w(D, D);
            p.bk = zeros1(D);
            p.wv = w(D, D);
            p.bv = zeros1(D);
            p.wo = w(D, D);
            p.ln1_g = ones1(D);
            p.ln1_b = zeros1(D);
            p.ff1_w = w(D, config.d_ff);
            p.ff1_b = zeros1(config.d_ff);
            p.ff2_w = w(config.d_ff, D);
            p.ff2_b = zeros1(D);
            p.ln2_g = ones1(D);
            p.ln2_b = zeros1(D);
            m.blocks.push_back(std::move(p));
        }
        m.lm_w = w(D, config.vocab_size);
        m.lm_b = zeros1(config.vocab_size);
        if (config.n_classes > 0) {
            m.cls_w = w(D, config.n_classes);
            m.cls_b = zeros1(config.n_classes);
        }
        return m;
    }

    struct ParamEntry {
        std::string name;
        Tensor<T> tensor;
        int freeze_group;  // -1 task heads, 0 embedding, l+1 block l (1 = shared block)
    };

    // Stable registry: order defines checkpoint layout and optimizer slot order.
    std::vector<ParamEntry> parameters() {
        std::vector<ParamEntry> out;
        out.push_back({"tok_emb", tok_emb, 0});
        out.push_back({"pos_emb", pos_emb, 0});
        out.push_back({"emb_ln_g", emb_ln_g, 0});
        out.push_back({"emb_ln_b", emb_ln_b, 0});
        for (size_t b = 0; b < blocks.size(); ++b) {
            const std::string pre =
                cfg.share_params ? std::string("shared.") : "block" + std::to_string(b) + ".";
            const int group = static_cast<int>(b) + 1;
            auto add = [&](const char* n, Tensor<T>& t) { out.push_back({pre + n, t, group}); };
            add("wq", blocks[b].wq);
            add("bq", blocks[b].bq);
            add("wk", blocks[b].wk);
            add("bk", blocks[b].bk);
            add("wv", blocks[b].wv);
            add("bv", blocks[b].bv);
            add("wo", blocks[b].wo);
            add("ln1_g", blocks[b].ln1_g);
            add("ln1_b", blocks[b].ln1_b);
            add("ff1_w", blocks[b].ff1_w);
            add("ff1_b", blocks[b].ff1_b);
            add("ff2_w", blocks[b].ff2_w);
            add("ff2_b", blocks[b].ff2_b);
            add("ln2_g", blocks[b].ln2_g);
            add("ln2_b", blocks[b].ln2_b);
        }
        out.push_back({"lm_w", lm_w, -1});
        out.push_back({"lm_b", lm_b, -1});
        if (cfg.n_classes > 0) {
            out.push_back({"cls_w", cls_w, -1});
            out.push_back({"cls_b", cls_b, -1});
        }
        return out;
    }

    // Embedding + lowest k layers excluded from updates; k=0 trains everything.
    static bool frozen_group(int group, int k_frozen) {
        return k_frozen > 0 && group >= 0 && group <= k_frozen;
    }

    void check_freeze_k(int k) const {
        if (k < 0 || k > cfg.n_layers)
            throw ContractError("freeze count " + std::to_string(k) + " out of range [0," +
                                std::to_string(cfg.n_layers) + "]");
    }

    TransformerModel clone() const {
        TransformerModel m;
        m.cfg = cfg;
        m.gates = gates;
        m.tok_emb = tok_emb.clone_values();
        m.pos_emb = pos_emb.clone_values();
        m.emb_ln_g = emb_ln_g.clone_values();
        m.emb_ln_b = emb_ln_b.clone_values();
        for (const auto& b : blocks) {
            LayerParams<T> p;
            p.wq = b.wq.clone_values();
            p.bq = b.bq.clone_values();
            p.wk = b.wk.clone_values();
            p.bk = b.bk.clone_values();
            p.wv = b.wv.clone_values();
            p.bv = b.bv.clone_values();
            p.wo = b.wo.clone_values();
            p.ln1_g = b.ln1_g.clone_values();
            p.ln1_b = b.ln1_b.clone_values();
            p.ff1_w = b.ff1_w.clone_values();
            p.ff1_b = b.ff1_b.clone_values();
            p.ff2_w = b.ff2_w.clone_values();
            p.ff2_b = b.ff2_b.clone_values();
            p.ln2_g = b.ln2_g.clone_values();
            p.ln2_b = b.ln2_b.clone_values();
            m.blocks.push_back(std::move(p));
        }
        m.lm_w = lm_w.clone_values();
        m.lm_b = lm_b.clone_values();
        if (cfg.n_classes > 0) {
            m.cls_w = cls_w.clone_values();
            m.cls_b = cls_b.clone_values();
        }
        return m;
    }

    // Shared-parameter model rewritten as an untied one: every layer gets its
    // own deep copy of the single block. Outputs are identical by construction.
    TransformerModel untied_clone() const {
        if (!cfg.share_params) throw ContractError("untied_clone: model is not parameter-shared");
        TransformerModel m = clone();
        m.cfg.share_params = false;
        m.blocks.reserve(static_cast<size_t>(cfg.n_layers));
        const LayerParams<T> src = m.blocks[0];  // by value: push_back reallocates
        for (int l = 1; l < cfg.n_layers; ++l) {
            LayerParams<T> p;
            p.wq = src.wq.clone_values();
            p.bq = src.bq.clone_values();
            p.wk = src.wk.clone_values();
            p.bk = src.bk.clone_values();
            p.wv = src.wv.clone_values();
            p.bv = src.bv.clone_values();
            p.wo = src.wo.clone_values();
            p.ln1_g = src.ln1_g.clone_values();
            p.ln1_b = src.ln1_b.clone_values();
            p.ff1_w = src.ff1_w.clone_values();
            p.ff1_b = src.ff1_b.clone_values();
            p.ff2_w = src.ff2_w.clone_values();
            p.ff2_b = src.ff2_b.clone_values();
            p.ln2_g = src.ln2_g.clone_values();
            p.ln2_b = src.ln2_b.clone_values();
            m.blocks.push_back(std::move(p));
        }
        return m;
    }

    void zero_grads() {
        for (auto& e : parameters()) e.tensor.zero_grad();
    }

    // Single gated attention sublayer (pre-residual). Gates multiply each
    // head's context slice before the merged output projection; by linearity
    // this equals gating the head's projected output contribution.
    Tensor<T> mh_attention(Tape<T>& tape, const Tensor<T>& x, const LayerParams<T>& blk,
                           const std::vector<Tensor<T>>& gate_scalars,
                           const std::vector<uint8_t>& key_valid, bool apply_gates,
                           Tensor<T>* probs_out) const {
        if (x.ndim() != 3 || x.dim(2) != cfg.d_model)
            throw ShapeError("mh_attention: expected (B,S," + std::to_string(cfg.d_model) + "), got " +
                             shape_str(x.shape()));
        const int batch = x.dim(0), seq = x.dim(1);
        const int H = cfg.n_heads, dh = cfg.d_head;
        auto q = tape.add_bias(tape.matmul(x, blk.wq), blk.bq);
        auto k = tape.add_bias(tape.matmul(x, blk.wk), blk.bk);
        auto v = tape.add_bias(tape.matmul(x, blk.wv), blk.bv);
        auto split = [&](const Tensor<T>& t) {
            return tape.reshape(tape.permute(tape.reshape(t, {batch, seq, H, dh}), {0, 2, 1, 3}),
                                {batch * H, seq, dh});
        };
        auto qh = split(q), kh = split(k), vh = split(v);
        auto scores = tape.scale(tape.matmul(qh, tape.transpose_last2(kh)),
                                 static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
        auto masked = tape.mask_keys(tape.reshape(scores, {batch, H, seq, seq}), key_valid);
        auto probs = tape.softmax(masked, -1);
        if (probs_out) *probs_out = probs;
        auto ctx = tape.reshape(tape.matmul(tape.reshape(probs, {batch * H, seq, seq}), vh),
                                {batch, H, seq, dh});
        auto gated = apply_gates ? tape.gate_heads(ctx, gate_scalars) : ctx;
        auto merged = tape.reshape(tape.permute(gated, {0, 2, 1, 3}), {batch, seq, cfg.d_model});
        return tape.matmul(merged, blk.wo);
    }

    ForwardResult<T> forward(Tape<T>& tape, const std::vector<int>& ids,
                             const std::vector<uint8_t>& valid, int batch, int seq,
                             const ForwardOptions& opt = {}) const {
        if (seq > cfg.max_seq_len)
            throw InputError("sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                             std::to_string(cfg.max_seq_len));
        if (static_cast<int64_t>(ids.size()) != static_cast<int64_t>(batch) * seq ||
            ids.size() != valid.size())
            throw ShapeError("forward: ids/valid size mismatch with batch x seq");
        ForwardResult<T> res;
        res.gate_tensors.assign(static_cast<size_t>(cfg.n_layers), {});
        for (int l = 0; l < cfg.n_layers; ++l)
            for (int h = 0; h < cfg.n_heads; ++h)
                res.gate_tensors[static_cast<size_t>(l)].push_back(
                    Tensor<T>::scalar(static_cast<T>(gates.effective(l, h)), opt.want_gate_grads));

        auto x = tape.layernorm(tape.add_position(tape.embedding(ids, batch, seq, tok_emb), pos_emb),
                                emb_ln_g, emb_ln_b);
        for (int l = 0; l < cfg.n_layers; ++l) {
            const LayerParams<T>& blk = blocks[cfg.share_params ? 0 : static_cast<size_t>(l)];
            Tensor<T> probs;
            auto attn = mh_attention(tape, x, blk, res.gate_tensors[static_cast<size_t>(l)], valid,
                                     opt.apply_gates, opt.capture ? &probs : nullptr);
            x = tape.layernorm(tape.add(x, attn), blk.ln1_g, blk.ln1_b);
            auto ff = tape.add_bias(
                tape.matmul(tape.gelu(tape.add_bias(tape.matmul(x, blk.ff1_w), blk.ff1_b)), blk.ff2_w),
                blk.ff2_b);
            x = tape.layernorm(tape.add(x, ff), blk.ln2_g, blk.ln2_b);
            if (opt.capture) {
                res.trace.attention.push_back(probs);
                res.trace.block_outputs.push_back(x);
            }
        }
        res.encoder_out = x;
        return res;
    }

    // (B,S,D) -> (B*S, vocab) token logits.
    Tensor<T> lm_logits(Tape<T>& tape, const Tensor<T>& encoder_out) const {
        const int batch = encoder_out.dim(0), seq = encoder_out.dim(1);
        return tape.add_bias(
            tape.matmul(tape.reshape(encoder_out, {batch * seq, cfg.d_model}), lm_w), lm_b);
    }

    // (B,S,D) -> (B, n_classes) logits from the CLS position.
    Tensor<T> cls_logits(Tape<T>& tape, const Tensor<T>& encoder_out) const {
        if (cfg.n_classes <= 0) throw ContractError("cls_logits: model has no classifier head");
        return tape.add_bias(tape.matmul(tape.select_position(encoder_out, 0), cls_w), cls_b);
    }
};

}  // namespace headlab
