#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "headlab/common.hpp"
#include "headlab/model.hpp"
#include "headlab/tasks.hpp"
#include "headlab/tensor.hpp"

namespace headlab {

// Seed-stream tags (RandomSource::derive second argument).
namespace stream {
constexpr uint64_t batch_order = 10;
constexpr uint64_t train_mask = 11;
constexpr uint64_t dev_mask = 12;
constexpr uint64_t head_init = 13;
constexpr uint64_t subsample = 14;
}  // namespace stream

struct TrainConfig {
    int steps = 600;
    int batch_size = 32;
    double lr = 1e-3;
    double p_mask = 0.15;
    double grad_clip = 1.0;
    int eval_batch = 64;
    int eval_every = 0;  // 0 = final evaluation only

    void validate() const {
        if (steps < 0) throw ConfigError("steps must be nonnegative");
        if (batch_size <= 0) throw ConfigError("batch_size must be positive");
        if (lr <= 0) throw ConfigError("lr must be positive");
        if (p_mask <= 0.0 || p_mask >= 1.0) throw ConfigError("p_mask must be in (0,1)");
        if (eval_batch <= 0) throw ConfigError("eval_batch must be positive");
    }
};

// Adam with global-norm gradient clipping. Moments are kept in 64-bit and the
// update is computed in 64-bit, then stored back at parameter precision.
// Frozen parameter groups are skipped entirely, so their bytes never change.
template <typename T>
class Adam {
public:
    Adam(std::vector<typename TransformerModel<T>::ParamEntry> params, double lr, int k_frozen,
         double clip = 1.0)
        : lr_(lr), clip_(clip) {
        for (auto& e : params) {
            Slot s;
            s.tensor = e.tensor;
            s.trainable = !TransformerModel<T>::frozen_group(e.freeze_group, k_frozen);
            if (s.trainable) {
                s.m.assign(s.tensor.data().size(), 0.0);
                s.v.assign(s.tensor.data().size(), 0.0);
            }
            slots_.push_back(std::move(s));
        }
    }

    void step() {
        ++t_;
        double sq = 0.0;
        for (const auto& s : slots_) {
            if (!s.trainable || !s.tensor.has_grad()) continue;
            for (T g : s.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
        }
        const double norm = std::sqrt(sq);
        const double scale = (clip_ > 0.0 && norm > clip_) ? clip_ / norm : 1.0;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (auto& s : slots_) {
            if (!s.trainable) continue;
            auto& data = s.tensor.data();
            const bool has_grad = s.tensor.has_grad();
            for (size_t i = 0; i < data.size(); ++i) {
                const double g = has_grad ? static_cast<double>(s.tensor.grad()[i]) * scale : 0.0;
                s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g;
                s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g * g;
                const double update = lr_ * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + eps_);
                data[i] = static_cast<T>(static_cast<double>(data[i]) - update);
            }
        }
    }

private:
    struct Slot {
        Tensor<T> tensor;
        bool trainable = true;
        std::vector<double> m, v;
    };
    std::vector<Slot> slots_;
    double lr_;
    double clip_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    int64_t t_ = 0;
};

// Deterministic epoch-shuffled batch index stream; tails shorter than
// batch_size roll into the next epoch's reshuffle.
class BatchStream {
public:
    BatchStream(size_t n, int batch_size, uint64_t seed)
        : n_(n), batch_size_(static_cast<size_t>(batch_size)), seed_(seed) {
        if (n == 0) throw ContractError("empty dataset");
        reshuffle();
    }

    std::vector<size_t> next() {
        if (pos_ + batch_size_ > order_.size()) {
            ++epoch_;
            reshuffle();
        }
        std::vector<size_t> out(order_.begin() + static_cast<int64_t>(pos_),
                                order_.begin() + static_cast<int64_t>(pos_ + std::min(batch_size_, order_.size() - pos_)));
        pos_ += out.size();
        return out;
    }

private:
    void reshuffle() {
        order_.resize(n_);
        for (size_t i = 0; i < n_; ++i) order_[i] = i;
        RandomSource rng(RandomSource::derive(seed_, stream::batch_order, epoch_));
        rng.shuffle(order_);
        pos_ = 0;
    }

    size_t n_, batch_size_;
    uint64_t seed_;
    uint64_t epoch_ = 0;
    size_t pos_ = 0;
    std::vector<size_t> order_;
};

inline std::vector<size_t> all_indices(size_t n) {
    std::vector<size_t> v(n);
    for (size_t i = 0; i < n; ++i) v[i] = i;
    return v;
}

// ---- evaluation ----

// Dev Recall@1 with deterministic masks: the same mask_seed yields the same
// masked positions on every call, so scores are comparable across models.
template <typename T>
double evaluate_mlm_recall(const TransformerModel<T>& model, const Dataset& d,
                           const std::vector<size_t>& indices, int eval_batch, double p_mask,
                           uint64_t mask_seed) {
    RandomSource rng(RandomSource::derive(mask_seed, stream::dev_mask, 0));
    double hits = 0.0, total = 0.0;
    for (size_t at = 0; at < indices.size(); at += static_cast<size_t>(eval_batch)) {
        std::vector<size_t> chunk(indices.begin() + static_cast<int64_t>(at),
                                  indices.begin() + static_cast<int64_t>(std::min(indices.size(), at + static_cast<size_t>(eval_batch))));
        Batch b = mask_tokens(d, chunk, /*dev_split=*/true, p_mask, rng);
        Tape<T> tape;
        auto res = model.forward(tape, b.ids, b.valid, b.batch, b.seq);
        auto logits = model.lm_logits(tape, res.encoder_out);
        const auto& lv = logits.data();
        const int v = model.cfg.vocab_size;
        for (size_t i = 0; i < b.mlm_weight.size(); ++i) {
            if (b.mlm_weight[i] <= 0.0) continue;
            const T* row = lv.data() + static_cast<int64_t>(i) * v;
            int arg = 0;
            for (int j = 1; j < v; ++j)
                if (row[j] > row[arg]) arg = j;
            total += 1.0;
            hits += arg == b.mlm_targets[i] ? 1.0 : 0.0;
        }
        tape.clear();
    }
    if (total == 0.0) throw ContractError("evaluate_mlm_recall: no masked positions");
    return hits / total;
}

template <typename T>
double evaluate_classification(const TransformerModel<T>& model, const Dataset& d,
                               const std::vector<size_t>& indices, int eval_batch) {
    std::vector<int> preds, labels;
    for (size_t at = 0; at < indices.size(); at += static_cast<size_t>(eval_batch)) {
        std::vector<size_t> chunk(indices.begin() + static_cast<int64_t>(at),
                                  indices.begin() + static_cast<int64_t>(std::min(indices.size(), at + static_cast<size_t>(eval_batch))));
        Batch b = make_cls_batch(d, chunk, /*dev_split=*/true);
        Tape<T> tape;
        auto res = model.forward(tape, b.ids, b.valid, b.batch, b.seq);
        auto logits = model.cls_logits(tape, res.encoder_out);
        const auto& lv = logits.data();
        const int c = model.cfg.n_classes;
        for (int i = 0; i < b.batch; ++i) {
            const T* row = lv.data() + static_cast<int64_t>(i) * c;
            int arg = 0;
            for (int j = 1; j < c; ++j)
                if (row[j] > row[arg]) arg = j;
            preds.push_back(arg);
            labels.push_back(b.labels[static_cast<size_t>(i)]);
        }
        tape.clear();
    }
    return compute_metric(d.metric, preds, labels);
}

// Task-appropriate dev metric on the given dev-split indices.
template <typename T>
double evaluate_model(const TransformerModel<T>& model, const Dataset& d,
                      const std::vector<size_t>& indices, int eval_batch, double p_mask,
                      uint64_t mask_seed) {
    if (indices.empty()) throw ContractError("evaluate_model: no examples selected");
    return d.kind == TaskKind::masked_lm
               ? evaluate_mlm_recall(model, d, indices, eval_batch, p_mask, mask_seed)
               : evaluate_classification(model, d, indices, eval_batch);
}

// ---- training loops ----

template <typename T>
Tensor<T> classification_loss(Tape<T>& tape, const TransformerModel<T>& model, const Batch& b) {
    auto res = model.forward(tape, b.ids, b.valid, b.batch, b.seq);
    std::vector<double> weights(static_cast<size_t>(b.batch), 1.0);
    return tape.cross_entropy_logits(model.cls_logits(tape, res.encoder_out), b.labels, weights);
}

template <typename T>
Tensor<T> mlm_loss(Tape<T>& tape, const TransformerModel<T>& model, const Batch& b) {
    auto res = model.forward(tape, b.ids, b.valid, b.batch, b.seq);
    return tape.cross_entropy_logits(model.lm_logits(tape, res.encoder_out), b.mlm_targets,
                                     b.mlm_weight);
}

struct PretrainResult {
    std::vector<double> train_loss;                 // one entry per step
    std::vector<std::pair<int, double>> dev_recall; // (step, Recall@1) at eval points
    double final_dev_recall = 0.0;
};

template <typename T>
PretrainResult pretrain(TransformerModel<T>& model, const Dataset& data, const TrainConfig& cfg,
                        uint64_t seed) {
    cfg.validate();
    data.validate();
    if (data.kind != TaskKind::masked_lm) throw ConfigError("pretrain expects a masked-lm task");
    if (model.cfg.vocab_size != data.vocab.size())
        throw GeometryError("model vocab " + std::to_string(model.cfg.vocab_size) +
                            " != task vocab " + std::to_string(data.vocab.size()));

    Adam<T> opt(model.parameters(), cfg.lr, /*k_frozen=*/0, cfg.grad_clip);
    BatchStream batches(data.train.size(), cfg.batch_size, seed);
    RandomSource mask_rng(RandomSource::derive(seed, stream::train_mask, 0));
    PretrainResult out;
    const auto dev_idx = all_indices(data.dev.size());
    for (int step = 0; step < cfg.steps; ++step) {
        Batch b = mask_tokens(data, batches.next(), /*dev_split=*/false, cfg.p_mask, mask_rng);
        bool any_masked = false;
        for (double w : b.mlm_weight) any_masked = any_masked || w > 0.0;
        if (!any_masked) {
            // vanishingly rare; keep the step count while staying deterministic
            out.train_loss.push_back(out.train_loss.empty() ? 0.0 : out.train_loss.back());
            continue;
        }
        Tape<T> tape;
        auto loss = mlm_loss(tape, model, b);
        const double lv = static_cast<double>(loss.item());
        if (!std::isfinite(lv))
            throw TrainingError("pretraining loss diverged at step " + std::to_string(step));
        model.zero_grads();
        tape.backward(loss);
        opt.step();
        out.train_loss.push_back(lv);
        if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0)
            out.dev_recall.emplace_back(
                step + 1, evaluate_mlm_recall(model, data, dev_idx, cfg.eval_batch, cfg.p_mask, seed));
    }
    out.final_dev_recall = evaluate_mlm_recall(model, data, dev_idx, cfg.eval_batch, cfg.p_mask, seed);
    if (out.dev_recall.empty() || out.dev_recall.back().first != cfg.steps)
        out.dev_recall.emplace_back(cfg.steps, out.final_dev_recall);
    return out;
}

// Task model = pretrained encoder + embedding + a fresh seeded classifier head.
template <typename T>
TransformerModel<T> make_task_model(const TransformerModel<T>& pretrained, int n_classes,
                                    uint64_t head_seed) {
    if (n_classes < 2) throw ConfigError("task model needs at least 2 classes");
    TransformerModel<T> m = pretrained.clone();
    m.cfg.n_classes = n_classes;
    RandomSource rng(RandomSource::derive(head_seed, stream::head_init, 0));
    m.cls_w = Tensor<T>::randn({m.cfg.d_model, n_classes}, rng, 0.02, true);
    m.cls_b = Tensor<T>::zeros({n_classes}, true);
    return m;
}

struct FinetuneResult {
    double dev_metric = 0.0;
    std::vector<double> train_loss;
};

template <typename T>
FinetuneResult finetune(TransformerModel<T>& model, const Dataset& data, const TrainConfig& cfg,
                        uint64_t seed, int k_frozen = 0) {
    cfg.validate();
    data.validate();
    if (data.kind != TaskKind::classification) throw ConfigError("finetune expects a classification task");
    if (model.cfg.n_classes != data.n_classes)
        throw GeometryError("model has " + std::to_string(model.cfg.n_classes) +
                            " classes, task needs " + std::to_string(data.n_classes));
    if (model.cfg.vocab_size != data.vocab.size())
        throw GeometryError("model vocab " + std::to_string(model.cfg.vocab_size) +
                            " != task vocab " + std::to_string(data.vocab.size()));
    model.check_freeze_k(k_frozen);

    Adam<T> opt(model.parameters(), cfg.lr, k_frozen, cfg.grad_clip);
    BatchStream batches(data.train.size(), cfg.batch_size, seed);
    FinetuneResult out;
    for (int step = 0; step < cfg.steps; ++step) {
        Batch b = make_cls_batch(data, batches.next(), /*dev_split=*/false);
        Tape<T> tape;
        auto loss = classification_loss(tape, model, b);
        const double lv = static_cast<double>(loss.item());
        if (!std::isfinite(lv))
            throw TrainingError("fine-tuning loss diverged at step " + std::to_string(step));
        model.zero_grads();
        tape.backward(loss);
        opt.step();
        out.train_loss.push_back(lv);
    }
    out.dev_metric =
        evaluate_classification(model, data, all_indices(data.dev.size()), cfg.eval_batch);
    return out;
}

}  // namespace headlab
