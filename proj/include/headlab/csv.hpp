#pragma once
// CSV emission and parsing for every tabular artifact.  All writers use "\n"
// line endings and format_real for floating-point fields so reruns are
// byte-identical; readers validate the header row before touching data.

#include <algorithm>
#include <fstream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "headlab/analysis.hpp"
#include "headlab/importance.hpp"

namespace headlab {

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    fields.push_back(cur);
    return fields;
}

inline std::vector<std::string> split_on(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) parts.push_back(cur);
    return parts;
}

inline double parse_real(const std::string& s, const std::string& where) {
    try {
        size_t used = 0;
        const double v = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw InputError(where + ": malformed number '" + s + "'");
    }
}

inline long long parse_int(const std::string& s, const std::string& where) {
    try {
        size_t used = 0;
        const long long v = std::stoll(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw InputError(where + ": malformed integer '" + s + "'");
    }
}

// Reads non-empty lines and checks the expected header.
inline std::vector<std::string> csv_lines(const std::string& text, const std::string& header,
                                          const std::string& what) {
    std::vector<std::string> lines;
    std::string cur;
    std::istringstream in(text);
    while (std::getline(in, cur)) {
        if (!cur.empty() && cur.back() == '\r') cur.pop_back();
        if (!cur.empty()) lines.push_back(cur);
    }
    if (lines.empty()) throw InputError(what + ": file is empty");
    if (lines.front() != header)
        throw InputError(what + ": expected header '" + header + "', got '" + lines.front() + "'");
    lines.erase(lines.begin());
    return lines;
}

}  // namespace detail

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw InputError("cannot open file for writing: " + path);
    f.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!f) throw InputError("failed writing file: " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw InputError("cannot open file: " + path);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// ---- importance table ----

inline std::string importance_csv(const ImportanceTable& t) {
    std::string out = "layer,head,raw,normalized,norm_mode,n_examples\n";
    for (int l = 0; l < t.rows(); ++l)
        for (int h = 0; h < t.n_heads; ++h) {
            out += std::to_string(l) + "," + std::to_string(h) + "," + format_real(t.raw_at(l, h)) +
                   "," + format_real(t.norm_at(l, h)) + "," + norm_name(t.norm_mode) + "," +
                   std::to_string(t.n_examples) + "\n";
        }
    return out;
}

// ---- prune trajectory ----

inline std::string heads_field(const std::vector<HeadId>& heads) {
    std::string out;
    for (size_t i = 0; i < heads.size(); ++i) {
        if (i) out += ";";
        out += std::to_string(heads[i].layer) + ":" + std::to_string(heads[i].head);
    }
    return out;
}

inline std::vector<HeadId> parse_heads_field(const std::string& field, const std::string& where) {
    std::vector<HeadId> heads;
    if (field.empty()) return heads;
    for (const std::string& part : detail::split_on(field, ';')) {
        const auto lh = detail::split_on(part, ':');
        if (lh.size() != 2) throw InputError(where + ": malformed head '" + part + "'");
        heads.push_back({static_cast<int>(detail::parse_int(lh[0], where)),
                         static_cast<int>(detail::parse_int(lh[1], where))});
    }
    return heads;
}

inline const std::string TRAJECTORY_HEADER =
    "step,pruned_ratio,retained_heads,metric_name,metric_value,relative_performance";

inline std::string trajectory_csv(const PruneTrajectory& t) {
    std::string out = TRAJECTORY_HEADER + "\n";
    for (const PruneStep& s : t.steps) {
        out += std::to_string(s.step) + "," + format_real(s.pruned_ratio) + "," +
               heads_field(s.retained) + "," + metric_name(t.metric) + "," +
               format_real(s.metric_value) + "," + format_real(s.relative_performance) + "\n";
    }
    return out;
}

// Rebuilds the trajectory fields the analysis layer consumes (head-set
// selection needs retained sets and relative performance; geometry is
// recovered from the union of heads ever retained).
inline PruneTrajectory parse_trajectory_csv(const std::string& text, const std::string& what) {
    PruneTrajectory t;
    int max_layer = -1, max_head = -1;
    for (const std::string& line : detail::csv_lines(text, TRAJECTORY_HEADER, what)) {
        const auto f = detail::split_csv_line(line);
        if (f.size() != 6) throw InputError(what + ": expected 6 fields, got '" + line + "'");
        PruneStep s;
        s.step = static_cast<int>(detail::parse_int(f[0], what));
        s.pruned_ratio = detail::parse_real(f[1], what);
        s.retained = parse_heads_field(f[2], what);
        t.metric = metric_from_name(f[3]);
        s.metric_value = detail::parse_real(f[4], what);
        s.relative_performance = detail::parse_real(f[5], what);
        for (const HeadId& id : s.retained) {
            max_layer = std::max(max_layer, id.layer);
            max_head = std::max(max_head, id.head);
        }
        t.steps.push_back(std::move(s));
    }
    if (t.steps.empty()) throw InputError(what + ": no trajectory rows");
    t.n_layers = max_layer + 1;
    t.n_heads = max_head + 1;
    if (!t.steps.empty()) t.metric_full = t.steps.front().metric_value;
    return t;
}

// ---- divergence / distance ----

inline std::string divergence_csv(const DivergenceTable& t) {
    std::string out = "layer,head,mean_js_nats,max_js_nats\n";
    for (int l = 0; l < t.n_layers; ++l)
        for (int h = 0; h < t.n_heads; ++h)
            out += std::to_string(l) + "," + std::to_string(h) + "," + format_real(t.mean_at(l, h)) +
                   "," + format_real(t.max_at(l, h)) + "\n";
    return out;
}

inline DivergenceTable parse_divergence_csv(const std::string& text, const std::string& what) {
    DivergenceTable t;
    std::vector<std::tuple<int, int, double, double>> rows;
    for (const std::string& line : detail::csv_lines(text, "layer,head,mean_js_nats,max_js_nats", what)) {
        const auto f = detail::split_csv_line(line);
        if (f.size() != 4) throw InputError(what + ": expected 4 fields, got '" + line + "'");
        rows.emplace_back(static_cast<int>(detail::parse_int(f[0], what)),
                          static_cast<int>(detail::parse_int(f[1], what)),
                          detail::parse_real(f[2], what), detail::parse_real(f[3], what));
        t.n_layers = std::max(t.n_layers, std::get<0>(rows.back()) + 1);
        t.n_heads = std::max(t.n_heads, std::get<1>(rows.back()) + 1);
    }
    if (rows.size() != static_cast<size_t>(t.n_layers) * static_cast<size_t>(t.n_heads))
        throw InputError(what + ": head grid has gaps");
    t.mean_js.assign(rows.size(), 0.0);
    t.max_js.assign(rows.size(), 0.0);
    for (const auto& [l, h, mean, mx] : rows) {
        t.mean_js[static_cast<size_t>(l * t.n_heads + h)] = mean;
        t.max_js[static_cast<size_t>(l * t.n_heads + h)] = mx;
    }
    return t;
}

inline std::string distance_csv(const LayerDistanceProfile& p) {
    std::string out = "layer,mean_l2,max_l2\n";
    for (int l = 0; l < p.n_layers; ++l)
        out += std::to_string(l) + "," + format_real(p.mean_l2[static_cast<size_t>(l)]) + "," +
               format_real(p.max_l2[static_cast<size_t>(l)]) + "\n";
    return out;
}

inline LayerDistanceProfile parse_distance_csv(const std::string& text, const std::string& what) {
    LayerDistanceProfile p;
    for (const std::string& line : detail::csv_lines(text, "layer,mean_l2,max_l2", what)) {
        const auto f = detail::split_csv_line(line);
        if (f.size() != 3) throw InputError(what + ": expected 3 fields, got '" + line + "'");
        if (detail::parse_int(f[0], what) != p.n_layers)
            throw InputError(what + ": layers out of order");
        p.mean_l2.push_back(detail::parse_real(f[1], what));
        p.max_l2.push_back(detail::parse_real(f[2], what));
        ++p.n_layers;
    }
    if (p.n_layers == 0) throw InputError(what + ": no layer rows");
    return p;
}

// ---- recall curve ----

inline std::string recall_csv(const RecallCurve& c) {
    std::string out = "x,recall_mean,recall_std,seed_values\n";
    for (size_t g = 0; g < c.x.size(); ++g) {
        std::string seeds;
        for (size_t s = 0; s < c.per_seed.size(); ++s) {
            if (s) seeds += ";";
            seeds += format_real(c.per_seed[s][g]);
        }
        out += format_real(c.x[g]) + "," + format_real(c.mean[g]) + "," + format_real(c.stddev[g]) +
               "," + seeds + "\n";
    }
    return out;
}

inline RecallCurve parse_recall_csv(const std::string& text, const std::string& what) {
    RecallCurve c;
    for (const std::string& line :
         detail::csv_lines(text, "x,recall_mean,recall_std,seed_values", what)) {
        const auto f = detail::split_csv_line(line);
        if (f.size() != 4) throw InputError(what + ": expected 4 fields, got '" + line + "'");
        c.x.push_back(detail::parse_real(f[0], what));
        c.mean.push_back(detail::parse_real(f[1], what));
        c.stddev.push_back(detail::parse_real(f[2], what));
        const auto seeds = detail::split_on(f[3], ';');
        if (c.per_seed.empty()) c.per_seed.resize(seeds.size());
        if (seeds.size() != c.per_seed.size())
            throw InputError(what + ": inconsistent seed column count");
        for (size_t s = 0; s < seeds.size(); ++s)
            c.per_seed[s].push_back(detail::parse_real(seeds[s], what));
    }
    if (c.x.empty()) throw InputError(what + ": no curve rows");
    return c;
}

// ---- importance vs divergence correlation ----

// Two blocks: a one-row summary of the fitted statistics, then the per-head
// scatter points the regression was computed from.
inline std::string correlation_csv(const CorrelationResult& r) {
    std::string out = "pearson_r,spearman_rho,slope,intercept\n";
    out += format_real(r.pearson_r) + "," + format_real(r.spearman_rho) + "," +
           format_real(r.slope) + "," + format_real(r.intercept) + "\n";
    out += "layer,head,importance,mean_js_nats\n";
    for (const ScatterPoint& p : r.points)
        out += std::to_string(p.head.layer) + "," + std::to_string(p.head.head) + "," +
               format_real(p.importance) + "," + format_real(p.divergence) + "\n";
    return out;
}

inline CorrelationResult parse_correlation_csv(const std::string& text, const std::string& what) {
    std::vector<std::string> lines;
    std::string cur;
    std::istringstream in(text);
    while (std::getline(in, cur)) {
        if (!cur.empty() && cur.back() == '\r') cur.pop_back();
        if (!cur.empty()) lines.push_back(cur);
    }
    if (lines.size() < 4 || lines[0] != "pearson_r,spearman_rho,slope,intercept" ||
        lines[2] != "layer,head,importance,mean_js_nats")
        throw InputError(what + ": expected the two-block correlation layout");
    CorrelationResult r;
    const auto stats = detail::split_csv_line(lines[1]);
    if (stats.size() != 4) throw InputError(what + ": malformed statistics row");
    r.pearson_r = detail::parse_real(stats[0], what);
    r.spearman_rho = detail::parse_real(stats[1], what);
    r.slope = detail::parse_real(stats[2], what);
    r.intercept = detail::parse_real(stats[3], what);
    for (size_t i = 3; i < lines.size(); ++i) {
        const auto f = detail::split_csv_line(lines[i]);
        if (f.size() != 4) throw InputError(what + ": malformed scatter row '" + lines[i] + "'");
        ScatterPoint p;
        p.head = {static_cast<int>(detail::parse_int(f[0], what)),
                  static_cast<int>(detail::parse_int(f[1], what))};
        p.importance = detail::parse_real(f[2], what);
        p.divergence = detail::parse_real(f[3], what);
        r.points.push_back(p);
    }
    return r;
}

}  // namespace headlab
