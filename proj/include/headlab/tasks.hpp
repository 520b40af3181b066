#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "headlab/common.hpp"

namespace headlab {

// Reserved token ids, fixed across every vocabulary.
constexpr int PAD_ID = 0;
constexpr int MASK_ID = 1;
constexpr int CLS_ID = 2;
constexpr int UNK_ID = 3;
constexpr int SEP_ID = 4;
constexpr int N_RESERVED = 5;

// Synthetic tasks draw from a 32-token content alphabet.
constexpr int CONTENT_TOKENS = 32;
constexpr int SYNTH_VOCAB_SIZE = N_RESERVED + CONTENT_TOKENS;

inline int content_id(int index) { return N_RESERVED + index; }
inline bool is_content(int id) { return id >= N_RESERVED; }
inline int content_index(int id) { return id - N_RESERVED; }

struct Vocab {
    std::vector<std::string> id_to_tok;
    std::map<std::string, int> tok_to_id;

    int size() const { return static_cast<int>(id_to_tok.size()); }

    int id_or_unk(const std::string& tok) const {
        auto it = tok_to_id.find(tok);
        return it == tok_to_id.end() ? UNK_ID : it->second;
    }

    void push(const std::string& tok) {
        if (tok_to_id.count(tok)) throw ContractError("vocab: duplicate token '" + tok + "'");
        tok_to_id[tok] = static_cast<int>(id_to_tok.size());
        id_to_tok.push_back(tok);
    }

    static Vocab reserved_only() {
        Vocab v;
        v.push("<pad>");
        v.push("<mask>");
        v.push("<cls>");
        v.push("<unk>");
        v.push("<sep>");
        return v;
    }

    static Vocab synthetic() {
        Vocab v = reserved_only();
        for (int i = 0; i < CONTENT_TOKENS; ++i) v.push("c" + std::to_string(i));
        return v;
    }
};

enum class TaskKind { masked_lm, classification };
enum class MetricKind { MCC, Accuracy, AvgAccF1, RecallAt1 };

inline const char* metric_name(MetricKind m) {
    switch (m) {
        case MetricKind::MCC: return "mcc";
        case MetricKind::Accuracy: return "accuracy";
        case MetricKind::AvgAccF1: return "avg_acc_f1";
        case MetricKind::RecallAt1: return "recall_at_1";
    }
    throw ContractError("unknown metric kind");
}

inline MetricKind metric_from_name(const std::string& s) {
    if (s == "mcc") return MetricKind::MCC;
    if (s == "accuracy") return MetricKind::Accuracy;
    if (s == "avg_acc_f1") return MetricKind::AvgAccF1;
    if (s == "recall_at_1") return MetricKind::RecallAt1;
    throw InputError("unknown metric name '" + s + "'");
}

struct Example {
    std::vector<int> ids;  // padded to the dataset's seq_len
    int label = -1;        // class id; -1 for masked-lm examples
};

struct Dataset {
    std::string name;
    TaskKind kind = TaskKind::masked_lm;
    MetricKind metric = MetricKind::RecallAt1;
    int n_classes = 0;  // 0 for masked-lm
    int seq_len = 0;
    Vocab vocab;
    std::vector<Example> train, dev;

    void validate() const {
        const bool is_mlm = kind == TaskKind::masked_lm;
        if ((metric == MetricKind::RecallAt1) != is_mlm)
            throw ConfigError("task '" + name + "': Recall@1 is valid exactly for masked-lm tasks");
        if (!is_mlm && n_classes < 2) throw ConfigError("task '" + name + "': classification needs >= 2 classes");
        if (vocab.size() <= N_RESERVED) throw ConfigError("task '" + name + "': vocabulary has no content tokens");
        if (train.empty() || dev.empty()) throw ContractError("task '" + name + "': empty split");
    }
};

struct Batch {
    int batch = 0, seq = 0;
    std::vector<int> ids;           // model input (possibly masked)
    std::vector<uint8_t> valid;     // 1 where not padding
    std::vector<int> labels;        // classification targets, one per example
    std::vector<int> mlm_targets;   // original token per position (where weighted)
    std::vector<double> mlm_weight; // 1.0 at masked positions, else 0
};

namespace detail {

inline void pad_to(std::vector<int>& ids, int seq_len) {
    if (static_cast<int>(ids.size()) > seq_len)
        throw ContractError("generated sequence longer than seq_len");
    ids.resize(static_cast<size_t>(seq_len), PAD_ID);
}

// Deterministic token-dependency maps for the masked-lm grammar: each triple
// is (a, succ1(a), succ2(a)) so any element is recoverable from any other.
inline int succ1(int i) { return (i * 11 + 5) % CONTENT_TOKENS; }
inline int succ2(int i) { return (i * 23 + 7) % CONTENT_TOKENS; }

// pair_grammar alphabet: openers 0..7 pair with 8+o; fillers 16..31.
constexpr int N_OPENERS = 8;
inline int partner_index(int opener) { return N_OPENERS + opener; }

}  // namespace detail

// ---- per-task generators and independent label rules ----

inline Example gen_mlm_example(RandomSource& rng, int seq_len) {
    Example ex;
    ex.ids.push_back(CLS_ID);
    const int cap = seq_len - 1;  // token budget after CLS
    const int lo = std::max(1, cap / 6);
    const int triples = static_cast<int>(rng.uniform_int(lo, std::max(lo, cap / 3)));
    for (int t = 0; t < triples; ++t) {
        const int a = static_cast<int>(rng.uniform_int(0, CONTENT_TOKENS - 1));
        ex.ids.push_back(content_id(a));
        ex.ids.push_back(content_id(detail::succ1(a)));
        ex.ids.push_back(content_id(detail::succ2(a)));
    }
    detail::pad_to(ex.ids, seq_len);
    return ex;
}

// Majority vote between even and odd content indices; odd counts avoid ties.
inline int label_tok_majority(const std::vector<int>& ids) {
    int even = 0, odd = 0;
    for (int id : ids)
        if (is_content(id)) (content_index(id) % 2 == 0 ? even : odd)++;
    return even > odd ? 1 : 0;
}

inline Example gen_tok_majority(RandomSource& rng, int seq_len) {
    Example ex;
    ex.ids.push_back(CLS_ID);
    const int cap = seq_len - 1;
    const int lo_half = std::max(1, std::min(cap / 8, 3));
    const int hi_half = std::max(lo_half, std::min(cap / 3, 7));
    // odd count: the even/odd majority vote can never tie
    const int n = 2 * static_cast<int>(rng.uniform_int(lo_half, hi_half)) + 1;
    for (int i = 0; i < n; ++i)
        ex.ids.push_back(content_id(static_cast<int>(rng.uniform_int(0, CONTENT_TOKENS - 1))));
    ex.label = label_tok_majority(ex.ids);
    detail::pad_to(ex.ids, seq_len);
    return ex;
}

// Well-formed iff every opener token is immediately followed by its partner.
inline int label_pair_grammar(const std::vector<int>& ids) {
    for (size_t i = 0; i < ids.size(); ++i) {
        if (!is_content(ids[i])) continue;
        const int c = content_index(ids[i]);
        if (c >= detail::N_OPENERS) continue;
        if (i + 1 >= ids.size() || !is_content(ids[i + 1]) ||
            content_index(ids[i + 1]) != detail::partner_index(c))
            return 0;
    }
    return 1;
}

inline Example gen_pair_grammar(RandomSource& rng, int seq_len) {
    // 2·pairs + fillers ≤ budget: each bound capped at budget/6 keeps the sum
    // under budget/2. Absolute caps keep the rule (not sheer length) as the
    // difficulty even at longer seq_len.
    const int cap = seq_len - 1;
    const int hi_pairs = std::max(1, std::min(cap / 6, 3));
    const int hi_fill = std::max(1, std::min(cap / 6, 4));
    const int n_pairs = static_cast<int>(rng.uniform_int(std::max(1, std::min(cap / 10, 2)), hi_pairs));
    const int n_fill = static_cast<int>(rng.uniform_int(std::max(1, cap / 16), hi_fill));
    const bool positive = rng.uniform() < 0.5;
    // items: pair blocks (opener, partner) and single fillers, shuffled
    struct Item { int a, b; };  // b < 0 = filler
    std::vector<Item> items;
    for (int i = 0; i < n_pairs; ++i) {
        const int o = static_cast<int>(rng.uniform_int(0, detail::N_OPENERS - 1));
        items.push_back({o, detail::partner_index(o)});
    }
    for (int i = 0; i < n_fill; ++i)
        items.push_back({static_cast<int>(rng.uniform_int(16, CONTENT_TOKENS - 1)), -1});
    rng.shuffle(items);
    if (!positive) {
        // corrupt one pair: partner of a different opener
        std::vector<size_t> pair_at;
        for (size_t i = 0; i < items.size(); ++i)
            if (items[i].b >= 0) pair_at.push_back(i);
        Item& bad = items[pair_at[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(pair_at.size()) - 1))]];
        const int shift = static_cast<int>(rng.uniform_int(1, detail::N_OPENERS - 1));
        bad.b = detail::partner_index((bad.a + shift) % detail::N_OPENERS);
    }
    Example ex;
    ex.ids.push_back(CLS_ID);
    for (const Item& it : items) {
        ex.ids.push_back(content_id(it.a));
        if (it.b >= 0) ex.ids.push_back(content_id(it.b));
    }
    ex.label = positive ? 1 : 0;
    detail::pad_to(ex.ids, seq_len);
    return ex;
}

// Splits at the first SEP; -1 if absent.
inline void split_segments(const std::vector<int>& ids, std::vector<int>& s1, std::vector<int>& s2) {
    s1.clear();
    s2.clear();
    bool after = false;
    for (int id : ids) {
        if (id == SEP_ID) {
            after = true;
            continue;
        }
        if (!is_content(id)) continue;
        (after ? s2 : s1).push_back(content_index(id));
    }
}

inline int label_seg_duplicate(const std::vector<int>& ids) {
    std::vector<int> s1, s2;
    split_segments(ids, s1, s2);
    return s1 == s2 ? 1 : 0;
}

inline Example gen_seg_duplicate(RandomSource& rng, int seq_len) {
    // CLS + s1 + SEP + s2 must fit: m ≤ (seq_len − 2) / 2; the absolute cap
    // keeps per-position comparison tractable at any seq_len
    const int cap = seq_len - 1;
    const int hi_m = std::min({(cap - 1) / 2, std::max(2, cap / 3), 5});
    const int lo_m = std::max(2, hi_m / 2);
    const int m = static_cast<int>(rng.uniform_int(lo_m, hi_m));
    std::vector<int> s1(static_cast<size_t>(m));
    for (int& t : s1) t = static_cast<int>(rng.uniform_int(0, CONTENT_TOKENS - 1));
    std::vector<int> s2 = s1;
    const bool positive = rng.uniform() < 0.3;  // imbalanced: F1 is informative
    if (!positive) {
        if (rng.uniform() < 0.5) {
            // corrupted copy: at least one position changed
            const int n_corrupt = static_cast<int>(rng.uniform_int(1, m));
            for (int c = 0; c < n_corrupt; ++c) {
                const int at = static_cast<int>(rng.uniform_int(0, m - 1));
                int repl = s2[static_cast<size_t>(at)];
                while (repl == s1[static_cast<size_t>(at)])
                    repl = static_cast<int>(rng.uniform_int(0, CONTENT_TOKENS - 1));
                s2[static_cast<size_t>(at)] = repl;
            }
        } else {
            do {
                for (int& t : s2) t = static_cast<int>(rng.uniform_int(0, CONTENT_TOKENS - 1));
            } while (s2 == s1);
        }
    }
    Example ex;
    ex.ids.push_back(CLS_ID);
    for (int t : s1) ex.ids.push_back(content_id(t));
    ex.ids.push_back(SEP_ID);
    for (int t : s2) ex.ids.push_back(content_id(t));
    ex.label = positive ? 1 : 0;
    detail::pad_to(ex.ids, seq_len);
    return ex;
}

// 0: every s2 token occurs in s1; 2: none does; 1: mixed.
inline int label_seg_entail(const std::vector<int>& ids) {
    std::vector<int> s1, s2;
    split_segments(ids, s1, s2);
    int in = 0, out = 0;
    for (int t : s2)
        (std::find(s1.begin(), s1.end(), t) != s1.end() ? in : out)++;
    if (out == 0) return 0;
    if (in == 0) return 2;
    return 1;
}

inline Example gen_seg_entail(RandomSource& rng, int seq_len) {
    // s1 is drawn without repeats, so m is capped by the content alphabet and
    // by an absolute bound that keeps containment checks tractable
    const int cap = seq_len - 1;
    const int hi_m = std::min({CONTENT_TOKENS - 1, (cap - 1) / 2, std::max(3, cap / 3), 6});
    const int lo_m = std::max(3, hi_m / 2);
    const int m = static_cast<int>(rng.uniform_int(lo_m, hi_m));
    std::vector<int> alphabet(CONTENT_TOKENS);
    for (int i = 0; i < CONTENT_TOKENS; ++i) alphabet[static_cast<size_t>(i)] = i;
    rng.shuffle(alphabet);
    std::vector<int> s1(alphabet.begin(), alphabet.begin() + m);  // distinct tokens
    std::vector<int> rest(alphabet.begin() + m, alphabet.end());
    const int label = static_cast<int>(rng.uniform_int(0, 2));
    const int m2 = static_cast<int>(rng.uniform_int(std::min(3, m), m));
    std::vector<int> s2;
    auto pick = [&](const std::vector<int>& pool) {
        return pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
    };
    if (label == 0) {
        for (int i = 0; i < m2; ++i) s2.push_back(pick(s1));
    } else if (label == 2) {
        for (int i = 0; i < m2; ++i) s2.push_back(pick(rest));
    } else {
        // keep the mixture away from the all-in/none-in boundaries so the
        // middle class is separable, not a one-token edge case
        const int lo_in = std::max(1, m2 / 3);
        const int n_in = static_cast<int>(rng.uniform_int(lo_in, m2 - lo_in));
        for (int i = 0; i < n_in; ++i) s2.push_back(pick(s1));
        for (int i = n_in; i < m2; ++i) s2.push_back(pick(rest));
        rng.shuffle(s2);
    }
    Example ex;
    ex.ids.push_back(CLS_ID);
    for (int t : s1) ex.ids.push_back(content_id(t));
    ex.ids.push_back(SEP_ID);
    for (int t : s2) ex.ids.push_back(content_id(t));
    ex.label = label;
    detail::pad_to(ex.ids, seq_len);
    return ex;
}

// ---- dataset construction ----

inline std::vector<std::string> task_names() {
    return {"mlm", "tok_majority", "pair_grammar", "seg_duplicate", "seg_entail"};
}

inline Dataset make_task(const std::string& name, uint64_t seed, int n_train = 2048, int n_dev = 384,
                         int seq_len = 32) {
    if (n_train <= 0 || n_dev <= 0) throw ConfigError("dataset sizes must be positive");
    if (seq_len < 8) throw ConfigError("seq_len must be at least 8 for the synthetic grammars");
    Dataset d;
    d.name = name;
    d.seq_len = seq_len;
    d.vocab = Vocab::synthetic();
    Example (*gen)(RandomSource&, int) = nullptr;
    uint64_t tag = 0;
    if (name == "mlm") {
        d.kind = TaskKind::masked_lm;
        d.metric = MetricKind::RecallAt1;
        d.n_classes = 0;
        gen = &gen_mlm_example;
        tag = 1;
    } else if (name == "tok_majority") {
        d.kind = TaskKind::classification;
        d.metric = MetricKind::Accuracy;
        d.n_classes = 2;
        gen = &gen_tok_majority;
        tag = 2;
    } else if (name == "pair_grammar") {
        d.kind = TaskKind::classification;
        d.metric = MetricKind::MCC;
        d.n_classes = 2;
        gen = &gen_pair_grammar;
        tag = 3;
    } else if (name == "seg_duplicate") {
        d.kind = TaskKind::classification;
        d.metric = MetricKind::AvgAccF1;
        d.n_classes = 2;
        gen = &gen_seg_duplicate;
        tag = 4;
    } else if (name == "seg_entail") {
        d.kind = TaskKind::classification;
        d.metric = MetricKind::Accuracy;
        d.n_classes = 3;
        gen = &gen_seg_entail;
        tag = 5;
    } else {
        throw ConfigError("unknown task '" + name + "'");
    }
    RandomSource train_rng(RandomSource::derive(seed, tag, 0));
    RandomSource dev_rng(RandomSource::derive(seed, tag, 1));
    d.train.reserve(static_cast<size_t>(n_train));
    d.dev.reserve(static_cast<size_t>(n_dev));
    for (int i = 0; i < n_train; ++i) d.train.push_back(gen(train_rng, seq_len));
    for (int i = 0; i < n_dev; ++i) d.dev.push_back(gen(dev_rng, seq_len));
    d.validate();
    return d;
}

// Plain text: one UTF-8 document per line, whitespace tokenization, vocabulary
// from all lines with a minimum-frequency cutoff, seeded train/dev split.
inline Dataset ingest_text_lines(std::istream& in, int min_freq, int seq_len, double dev_fraction,
                                 uint64_t seed) {
    if (min_freq < 1) throw ConfigError("min_freq must be >= 1");
    if (dev_fraction <= 0.0 || dev_fraction >= 1.0) throw ConfigError("dev_fraction must be in (0,1)");
    std::vector<std::vector<std::string>> docs;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::vector<std::string> toks;
        std::string t;
        while (ls >> t) toks.push_back(t);
        if (!toks.empty()) docs.push_back(std::move(toks));
    }
    if (docs.size() < 2) throw InputError("text corpus needs at least 2 non-empty lines");
    std::map<std::string, int64_t> freq;
    for (const auto& doc : docs)
        for (const auto& t : doc) freq[t]++;
    // deterministic order: frequency descending, then token ascending
    std::vector<std::pair<std::string, int64_t>> kept(freq.begin(), freq.end());
    std::erase_if(kept, [&](const auto& kv) { return kv.second < min_freq; });
    std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
        return a.second != b.second ? a.second > b.second : a.first < b.first;
    });
    Vocab vocab = Vocab::reserved_only();
    for (const auto& [tok, n] : kept) vocab.push(tok);
    if (vocab.size() <= N_RESERVED)
        throw ConfigError("min_freq " + std::to_string(min_freq) + " leaves no content tokens");

    Dataset d;
    d.name = "text";
    d.kind = TaskKind::masked_lm;
    d.metric = MetricKind::RecallAt1;
    d.n_classes = 0;
    d.seq_len = seq_len;
    d.vocab = vocab;
    std::vector<size_t> order(docs.size());
    for (size_t i = 0; i < docs.size(); ++i) order[i] = i;
    RandomSource rng(RandomSource::derive(seed, 6, 0));
    rng.shuffle(order);
    const size_t n_dev = std::max<size_t>(1, static_cast<size_t>(dev_fraction * static_cast<double>(docs.size())));
    for (size_t i = 0; i < order.size(); ++i) {
        const auto& doc = docs[order[i]];
        Example ex;
        ex.ids.push_back(CLS_ID);
        for (const auto& t : doc) {
            if (static_cast<int>(ex.ids.size()) >= seq_len) break;
            ex.ids.push_back(vocab.id_or_unk(t));
        }
        detail::pad_to(ex.ids, seq_len);
        (i < n_dev ? d.dev : d.train).push_back(std::move(ex));
    }
    if (d.train.empty()) throw InputError("text corpus too small for the requested dev fraction");
    d.validate();
    return d;
}

// ---- batching and masking ----

inline Batch make_cls_batch(const Dataset& d, const std::vector<size_t>& indices, bool dev_split) {
    const auto& split = dev_split ? d.dev : d.train;
    Batch b;
    b.batch = static_cast<int>(indices.size());
    b.seq = d.seq_len;
    b.ids.reserve(indices.size() * static_cast<size_t>(d.seq_len));
    for (size_t ix : indices) {
        const Example& ex = split.at(ix);
        b.ids.insert(b.ids.end(), ex.ids.begin(), ex.ids.end());
        b.labels.push_back(ex.label);
    }
    b.valid.resize(b.ids.size());
    for (size_t i = 0; i < b.ids.size(); ++i) b.valid[i] = b.ids[i] != PAD_ID;
    return b;
}

// BERT-style masking: each non-reserved position is selected with probability
// p_mask; a selected position becomes MASK (80%), a random content token (10%),
// or stays unchanged (10%). Targets are recorded for every selected position.
inline Batch mask_tokens(const Dataset& d, const std::vector<size_t>& indices, bool dev_split,
                         double p_mask, RandomSource& rng) {
    if (p_mask <= 0.0 || p_mask >= 1.0) throw ConfigError("p_mask must be in (0,1)");
    const auto& split = dev_split ? d.dev : d.train;
    Batch b;
    b.batch = static_cast<int>(indices.size());
    b.seq = d.seq_len;
    const int first_content = N_RESERVED;
    const int last_content = d.vocab.size() - 1;
    for (size_t ix : indices) {
        const Example& ex = split.at(ix);
        for (int id : ex.ids) {
            int input = id;
            int target = 0;
            double weight = 0.0;
            if (id >= N_RESERVED && rng.uniform() < p_mask) {
                target = id;
                weight = 1.0;
                const double roll = rng.uniform();
                if (roll < 0.8)
                    input = MASK_ID;
                else if (roll < 0.9)
                    input = static_cast<int>(rng.uniform_int(first_content, last_content));
                // else: keep the original token
            }
            b.ids.push_back(input);
            b.mlm_targets.push_back(target);
            b.mlm_weight.push_back(weight);
            b.valid.push_back(id != PAD_ID);  // masking never touches padding
        }
    }
    return b;
}

// ---- metrics ----

namespace detail {
struct Confusion {
    double tp = 0, tn = 0, fp = 0, fn = 0;
};
inline Confusion confusion(const std::vector<int>& preds, const std::vector<int>& labels) {
    if (preds.empty()) throw ContractError("metric on empty input");
    if (preds.size() != labels.size()) throw ContractError("preds/labels size mismatch");
    Confusion c;
    for (size_t i = 0; i < preds.size(); ++i) {
        if (labels[i] == 1)
            (preds[i] == 1 ? c.tp : c.fn)++;
        else
            (preds[i] == 1 ? c.fp : c.tn)++;
    }
    return c;
}
}  // namespace detail

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
    if (preds.empty()) throw ContractError("metric on empty input");
    if (preds.size() != labels.size()) throw ContractError("preds/labels size mismatch");
    int64_t hit = 0;
    for (size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
    return static_cast<double>(hit) / static_cast<double>(preds.size());
}

// (TP·TN − FP·FN)/√((TP+FP)(TP+FN)(TN+FP)(TN+FN)); 0 when any factor is 0.
inline double mcc(const std::vector<int>& preds, const std::vector<int>& labels) {
    auto c = detail::confusion(preds, labels);
    const double f1 = c.tp + c.fp, f2 = c.tp + c.fn, f3 = c.tn + c.fp, f4 = c.tn + c.fn;
    if (f1 == 0 || f2 == 0 || f3 == 0 || f4 == 0) return 0.0;
    return (c.tp * c.tn - c.fp * c.fn) / std::sqrt(f1 * f2 * f3 * f4);
}

// Binary F1 for the positive class; 0 when there are no predicted positives.
inline double f1_binary(const std::vector<int>& preds, const std::vector<int>& labels) {
    auto c = detail::confusion(preds, labels);
    if (c.tp == 0) return 0.0;  // covers zero predicted or zero actual positives
    const double precision = c.tp / (c.tp + c.fp);
    const double recall = c.tp / (c.tp + c.fn);
    return 2.0 * precision * recall / (precision + recall);
}

inline double avg_acc_f1(const std::vector<int>& preds, const std::vector<int>& labels) {
    return 0.5 * (accuracy(preds, labels) + f1_binary(preds, labels));
}

// Fraction of weighted positions whose argmax logit (first occurrence wins)
// equals the target.
template <typename T>
double recall_at_1(const std::vector<T>& logits, int n, int v, const std::vector<int>& targets,
                   const std::vector<double>& weights) {
    if (static_cast<int64_t>(logits.size()) != static_cast<int64_t>(n) * v ||
        static_cast<int>(targets.size()) != n || static_cast<int>(weights.size()) != n)
        throw ContractError("recall_at_1: size mismatch");
    double total = 0.0, hit = 0.0;
    for (int i = 0; i < n; ++i) {
        if (weights[static_cast<size_t>(i)] <= 0.0) continue;
        const T* row = logits.data() + static_cast<int64_t>(i) * v;
        int arg = 0;
        for (int j = 1; j < v; ++j)
            if (row[j] > row[arg]) arg = j;
        total += 1.0;
        hit += arg == targets[static_cast<size_t>(i)] ? 1.0 : 0.0;
    }
    if (total == 0.0) throw ContractError("recall_at_1: no masked positions");
    return hit / total;
}

inline double compute_metric(MetricKind m, const std::vector<int>& preds, const std::vector<int>& labels) {
    switch (m) {
        case MetricKind::MCC: return mcc(preds, labels);
        case MetricKind::Accuracy: return accuracy(preds, labels);
        case MetricKind::AvgAccF1: return avg_acc_f1(preds, labels);
        case MetricKind::RecallAt1: throw ContractError("Recall@1 needs logits, not predictions");
    }
    throw ContractError("unknown metric kind");
}

// Negative pruned metrics (MCC) clamp to 0 before the ratio; a nonpositive
// full-model metric leaves the ratio undefined.
inline double relative_performance(double metric_pruned, double metric_full) {
    if (metric_full <= 0.0)
        throw ContractError("relative performance undefined: full-model metric " +
                            format_real(metric_full) + " is not positive");
    return std::max(0.0, metric_pruned) / metric_full;
}

}  // namespace headlab
