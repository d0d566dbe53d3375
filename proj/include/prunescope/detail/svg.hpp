#pragma once

// Minimal deterministic SVG line charts. No timestamps, no randomness, fixed
// number formatting: identical inputs produce identical bytes.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <utility>
#include <vector>

namespace prunescope::svg {

struct Series {
    std::string label;
    std::vector<std::pair<double, double>> points;  // (x, y)
    bool right_axis = false;  // plot against the secondary y scale
    bool dashed = false;
};

struct Chart {
    std::string title;
    std::string x_label;
    std::string y_left_label;
    std::string y_right_label;
    std::vector<Series> series;
};

namespace detail {

inline std::string escape(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            case '\'': out += "&apos;"; break;
            default: out += c;
        }
    }
    return out;
}

inline std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string fmt_tick(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

struct Range {
    double lo = 0.0;
    double hi = 1.0;

    void expand(double v) {
        if (!std::isfinite(v)) return;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }

    void pad() {
        if (lo > hi) {  // nothing expanded
            lo = 0.0;
            hi = 1.0;
            return;
        }
        if (lo == hi) {
            lo -= 1.0;
            hi += 1.0;
            return;
        }
        const double m = 0.05 * (hi - lo);
        lo -= m;
        hi += m;
    }
};

constexpr const char* kPalette[10] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                      "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f"};

}  // namespace detail

inline std::string render_chart(const Chart& chart) {
    constexpr double kWidth = 880, kHeight = 540;
    constexpr double kLeft = 72, kRight = 72, kTop = 52, kBottom = 56;
    const double plot_w = kWidth - kLeft - kRight;
    const double plot_h = kHeight - kTop - kBottom;

    detail::Range xr, yl, yr;
    xr.lo = yl.lo = yr.lo = std::numeric_limits<double>::infinity();
    xr.hi = yl.hi = yr.hi = -std::numeric_limits<double>::infinity();
    bool any_right = false;
    for (const auto& s : chart.series) {
        for (const auto& [x, y] : s.points) {
            xr.expand(x);
            (s.right_axis ? yr : yl).expand(y);
        }
        any_right |= s.right_axis;
    }
    xr.pad();
    yl.pad();
    yr.pad();

    auto sx = [&](double x) { return kLeft + (x - xr.lo) / (xr.hi - xr.lo) * plot_w; };
    auto sy = [&](double y, bool right) {
        const detail::Range& r = right ? yr : yl;
        return kTop + plot_h - (y - r.lo) / (r.hi - r.lo) * plot_h;
    };

    std::string out;
    out += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"880\" height=\"540\" "
           "viewBox=\"0 0 880 540\">\n";
    out += "<rect x=\"0\" y=\"0\" width=\"880\" height=\"540\" fill=\"#ffffff\"/>\n";
    out += "<text x=\"440\" y=\"28\" font-family=\"sans-serif\" font-size=\"16\" "
           "text-anchor=\"middle\">" +
           detail::escape(chart.title) + "</text>\n";

    // Grid and ticks: 5 divisions on each axis.
    for (int i = 0; i <= 4; ++i) {
        const double fx = kLeft + plot_w * i / 4.0;
        const double fy = kTop + plot_h * i / 4.0;
        out += "<line x1=\"" + detail::fmt(fx) + "\" y1=\"" + detail::fmt(kTop) + "\" x2=\"" +
               detail::fmt(fx) + "\" y2=\"" + detail::fmt(kTop + plot_h) +
               "\" stroke=\"#e0e0e0\" stroke-width=\"1\"/>\n";
        out += "<line x1=\"" + detail::fmt(kLeft) + "\" y1=\"" + detail::fmt(fy) + "\" x2=\"" +
               detail::fmt(kLeft + plot_w) + "\" y2=\"" + detail::fmt(fy) +
               "\" stroke=\"#e0e0e0\" stroke-width=\"1\"/>\n";
        const double xv = xr.lo + (xr.hi - xr.lo) * i / 4.0;
        out += "<text x=\"" + detail::fmt(fx) + "\" y=\"" + detail::fmt(kTop + plot_h + 18) +
               "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">" +
               detail::fmt_tick(xv) + "</text>\n";
        const double ylv = yl.lo + (yl.hi - yl.lo) * (4 - i) / 4.0;
        out += "<text x=\"" + detail::fmt(kLeft - 8) + "\" y=\"" + detail::fmt(fy + 4) +
               "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">" +
               detail::fmt_tick(ylv) + "</text>\n";
        if (any_right) {
            const double yrv = yr.lo + (yr.hi - yr.lo) * (4 - i) / 4.0;
            out += "<text x=\"" + detail::fmt(kLeft + plot_w + 8) + "\" y=\"" +
                   detail::fmt(fy + 4) +
                   "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"start\">" +
                   detail::fmt_tick(yrv) + "</text>\n";
        }
    }
    out += "<rect x=\"" + detail::fmt(kLeft) + "\" y=\"" + detail::fmt(kTop) + "\" width=\"" +
           detail::fmt(plot_w) + "\" height=\"" + detail::fmt(plot_h) +
           "\" fill=\"none\" stroke=\"#404040\" stroke-width=\"1\"/>\n";

    out += "<text x=\"" + detail::fmt(kLeft + plot_w / 2) + "\" y=\"" +
           detail::fmt(kHeight - 14) +
           "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">" +
           detail::escape(chart.x_label) + "</text>\n";
    out += "<text x=\"18\" y=\"" + detail::fmt(kTop + plot_h / 2) +
           "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" "
           "transform=\"rotate(-90 18 " +
           detail::fmt(kTop + plot_h / 2) + ")\">" + detail::escape(chart.y_left_label) +
           "</text>\n";
    if (any_right) {
        out += "<text x=\"" + detail::fmt(kWidth - 16) + "\" y=\"" +
               detail::fmt(kTop + plot_h / 2) +
               "\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\" "
               "transform=\"rotate(90 " +
               detail::fmt(kWidth - 16) + " " + detail::fmt(kTop + plot_h / 2) + ")\">" +
               detail::escape(chart.y_right_label) + "</text>\n";
    }

    for (std::size_t i = 0; i < chart.series.size(); ++i) {
        const auto& s = chart.series[i];
        const char* color = detail::kPalette[i % 10];
        std::string pts;
        for (const auto& [x, y] : s.points) {
            if (!pts.empty()) pts += " ";
            pts += detail::fmt(sx(x)) + "," + detail::fmt(sy(y, s.right_axis));
        }
        out += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color +
               "\" stroke-width=\"1.6\"" +
               (s.dashed ? std::string(" stroke-dasharray=\"6,4\"") : std::string()) + "/>\n";
        if (s.points.size() <= 2) {
            for (const auto& [x, y] : s.points)
                out += "<circle cx=\"" + detail::fmt(sx(x)) + "\" cy=\"" +
                       detail::fmt(sy(y, s.right_axis)) + "\" r=\"2.5\" fill=\"" + color +
                       "\"/>\n";
        }
    }

    // Legend: one row per series, top-right corner of the plot area.
    for (std::size_t i = 0; i < chart.series.size(); ++i) {
        const auto& s = chart.series[i];
        const char* color = detail::kPalette[i % 10];
        const double ly = kTop + 14 + 15.0 * static_cast<double>(i);
        const double lx = kLeft + plot_w - 180;
        out += "<line x1=\"" + detail::fmt(lx) + "\" y1=\"" + detail::fmt(ly - 3) + "\" x2=\"" +
               detail::fmt(lx + 22) + "\" y2=\"" + detail::fmt(ly - 3) + "\" stroke=\"" + color +
               "\" stroke-width=\"1.6\"" +
               (s.dashed ? std::string(" stroke-dasharray=\"6,4\"") : std::string()) + "/>\n";
        out += "<text x=\"" + detail::fmt(lx + 27) + "\" y=\"" + detail::fmt(ly) +
               "\" font-family=\"sans-serif\" font-size=\"11\">" + detail::escape(s.label) +
               "</text>\n";
    }

    out += "</svg>\n";
    return out;
}

}  // namespace prunescope::svg
