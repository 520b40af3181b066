#pragma once
// Deterministic SVG line charts.  Every coordinate is formatted with a fixed
// printf pattern and elements are emitted in insertion order, so the same
// inputs always render byte-identical markup — no external plotting stack.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "headlab/common.hpp"

namespace headlab::svg {

inline std::string px(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return std::string(buf);
}

// Fixed palette; series cycle through it in insertion order.
inline const char* palette(size_t i) {
    static const char* colors[] = {"#1f6fb2", "#d1495b", "#3e8e5a", "#8661a8",
                                   "#c78722", "#4aa3a2", "#7d7d7d", "#b05bb1"};
    return colors[i % 8];
}

struct Series {
    std::vector<std::pair<double, double>> points;
    std::string label;
    std::string color;
    bool dotted = false;
};

struct Band {  // shaded area between (x, lo) and (x, hi), e.g. mean ± std
    std::vector<double> x, lo, hi;
    std::string color;
};

struct Scatter {
    std::vector<std::pair<double, double>> points;
    std::string label;
    std::string color;
};

class Chart {
public:
    Chart(std::string title, std::string x_label, std::string y_label)
        : title_(std::move(title)), x_label_(std::move(x_label)), y_label_(std::move(y_label)) {}

    void add_series(Series s) {
        if (s.color.empty()) s.color = palette(n_colored_++);
        series_.push_back(std::move(s));
    }
    void add_band(Band b) {
        if (b.x.size() != b.lo.size() || b.x.size() != b.hi.size())
            throw ContractError("svg band: x/lo/hi lengths differ");
        bands_.push_back(std::move(b));
    }
    void add_scatter(Scatter s) {
        if (s.color.empty()) s.color = palette(n_colored_++);
        scatters_.push_back(std::move(s));
    }
    // straight regression line clipped to the data's x extent
    void add_line(double slope, double intercept, std::string label = "") {
        line_ = {slope, intercept};
        has_line_ = true;
        line_label_ = std::move(label);
    }
    void fix_y_range(double lo, double hi) {
        y_fixed_ = true;
        y_lo_ = lo;
        y_hi_ = hi;
    }

    std::string render() const {
        double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
        bool any = false;
        auto eat = [&](double x, double y) {
            if (!any) {
                xmin = xmax = x;
                ymin = ymax = y;
                any = true;
            }
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
            ymin = std::min(ymin, y);
            ymax = std::max(ymax, y);
        };
        for (const auto& s : series_)
            for (const auto& [x, y] : s.points) eat(x, y);
        for (const auto& s : scatters_)
            for (const auto& [x, y] : s.points) eat(x, y);
        for (const auto& b : bands_)
            for (size_t i = 0; i < b.x.size(); ++i) {
                eat(b.x[i], b.lo[i]);
                eat(b.x[i], b.hi[i]);
            }
        if (!any) throw ContractError("svg chart '" + title_ + "' has no data");
        if (y_fixed_) {
            ymin = y_lo_;
            ymax = y_hi_;
        }
        if (xmax == xmin) {
            xmin -= 0.5;
            xmax += 0.5;
        }
        if (ymax == ymin) {
            ymin -= 0.5;
            ymax += 0.5;
        }
        // breathing room above/below the data unless the caller pinned it
        if (!y_fixed_) {
            const double pad = 0.05 * (ymax - ymin);
            ymin -= pad;
            ymax += pad;
        }

        const double W = 640, H = 420, ml = 62, mr = 18, mt = 34, mb = 46;
        const double pw = W - ml - mr, ph = H - mt - mb;
        auto X = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * pw; };
        auto Y = [&](double y) { return mt + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };

        std::string out;
        out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + px(W) + "\" height=\"" +
               px(H) + "\" viewBox=\"0 0 " + px(W) + " " + px(H) + "\">\n";
        out += "<rect width=\"" + px(W) + "\" height=\"" + px(H) + "\" fill=\"#ffffff\"/>\n";
        out += "<text x=\"" + px(W / 2) + "\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" +
               escape(title_) + "</text>\n";

        // gridlines and tick labels: five evenly spaced ticks per axis
        for (int i = 0; i <= 4; ++i) {
            const double tx = xmin + (xmax - xmin) * i / 4.0;
            const double ty = ymin + (ymax - ymin) * i / 4.0;
            out += "<line x1=\"" + px(X(tx)) + "\" y1=\"" + px(mt) + "\" x2=\"" + px(X(tx)) +
                   "\" y2=\"" + px(mt + ph) + "\" stroke=\"#e3e3e3\" stroke-width=\"1\"/>\n";
            out += "<line x1=\"" + px(ml) + "\" y1=\"" + px(Y(ty)) + "\" x2=\"" + px(ml + pw) +
                   "\" y2=\"" + px(Y(ty)) + "\" stroke=\"#e3e3e3\" stroke-width=\"1\"/>\n";
            out += "<text x=\"" + px(X(tx)) + "\" y=\"" + px(mt + ph + 16) +
                   "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" +
                   tick(tx) + "</text>\n";
            out += "<text x=\"" + px(ml - 6) + "\" y=\"" + px(Y(ty) + 3) +
                   "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" + tick(ty) +
                   "</text>\n";
        }
        out += "<rect x=\"" + px(ml) + "\" y=\"" + px(mt) + "\" width=\"" + px(pw) + "\" height=\"" +
               px(ph) + "\" fill=\"none\" stroke=\"#444444\" stroke-width=\"1\"/>\n";
        out += "<text x=\"" + px(ml + pw / 2) + "\" y=\"" + px(H - 10) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" +
               escape(x_label_) + "</text>\n";
        out += "<text x=\"16\" y=\"" + px(mt + ph / 2) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 " +
               px(mt + ph / 2) + ")\">" + escape(y_label_) + "</text>\n";

        // bands under the lines
        for (const auto& b : bands_) {
            if (b.x.empty()) continue;
            std::string pts;
            for (size_t i = 0; i < b.x.size(); ++i)
                pts += px(X(b.x[i])) + "," + px(Y(clampy(b.hi[i], ymin, ymax))) + " ";
            for (size_t i = b.x.size(); i-- > 0;)
                pts += px(X(b.x[i])) + "," + px(Y(clampy(b.lo[i], ymin, ymax))) + " ";
            pts.pop_back();
            out += "<polygon points=\"" + pts + "\" fill=\"" +
                   (b.color.empty() ? std::string("#1f6fb2") : b.color) +
                   "\" fill-opacity=\"0.18\" stroke=\"none\"/>\n";
        }
        if (has_line_) {
            const double y1 = line_.first * xmin + line_.second;
            const double y2 = line_.first * xmax + line_.second;
            out += "<line x1=\"" + px(X(xmin)) + "\" y1=\"" + px(Y(clampy(y1, ymin, ymax))) +
                   "\" x2=\"" + px(X(xmax)) + "\" y2=\"" + px(Y(clampy(y2, ymin, ymax))) +
                   "\" stroke=\"#222222\" stroke-width=\"1.5\"/>\n";
        }
        for (const auto& s : series_) {
            if (s.points.empty()) continue;
            std::string pts;
            for (const auto& [x, y] : s.points) pts += px(X(x)) + "," + px(Y(clampy(y, ymin, ymax))) + " ";
            pts.pop_back();
            out += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + s.color +
                   "\" stroke-width=\"1.6\"" +
                   (s.dotted ? std::string(" stroke-dasharray=\"3 4\"") : std::string("")) + "/>\n";
        }
        for (const auto& s : scatters_)
            for (const auto& [x, y] : s.points)
                out += "<circle cx=\"" + px(X(x)) + "\" cy=\"" + px(Y(clampy(y, ymin, ymax))) +
                       "\" r=\"3\" fill=\"" + s.color + "\" fill-opacity=\"0.8\"/>\n";

        // legend: one row per labeled element, top-right inside the plot
        double ly = mt + 14;
        auto legend_row = [&](const std::string& label, const std::string& color, bool dotted) {
            if (label.empty()) return;
            out += "<line x1=\"" + px(ml + pw - 150) + "\" y1=\"" + px(ly - 4) + "\" x2=\"" +
                   px(ml + pw - 126) + "\" y2=\"" + px(ly - 4) + "\" stroke=\"" + color +
                   "\" stroke-width=\"2\"" +
                   (dotted ? std::string(" stroke-dasharray=\"3 4\"") : std::string("")) + "/>\n";
            out += "<text x=\"" + px(ml + pw - 120) + "\" y=\"" + px(ly) +
                   "\" font-family=\"sans-serif\" font-size=\"10\">" + escape(label) + "</text>\n";
            ly += 14;
        };
        for (const auto& s : series_) legend_row(s.label, s.color, s.dotted);
        for (const auto& s : scatters_) legend_row(s.label, s.color, false);
        if (has_line_) legend_row(line_label_, "#222222", false);

        out += "</svg>\n";
        return out;
    }

private:
    static double clampy(double v, double lo, double hi) { return std::clamp(v, lo, hi); }

    static std::string tick(double v) {
        char buf[48];
        std::snprintf(buf, sizeof(buf), "%.3g", v);
        return std::string(buf);
    }

    static std::string escape(const std::string& s) {
        std::string out;
        for (char c : s) {
            if (c == '&') out += "&amp;";
            else if (c == '<') out += "&lt;";
            else if (c == '>') out += "&gt;";
            else out.push_back(c);
        }
        return out;
    }

    std::string title_, x_label_, y_label_;
    std::vector<Series> series_;
    std::vector<Band> bands_;
    std::vector<Scatter> scatters_;
    std::pair<double, double> line_{0, 0};
    bool has_line_ = false;
    std::string line_label_;
    bool y_fixed_ = false;
    double y_lo_ = 0, y_hi_ = 1;
    size_t n_colored_ = 0;
};

}  // namespace headlab::svg
