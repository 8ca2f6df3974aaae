// SPDX-License-Identifier: Apache-2.0
#include "report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

namespace sg {
namespace {

using nlohmann::json;

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

const char *kPalette[] = {"#1f6fb4", "#e07b27", "#2e9e4f", "#c23a3a", "#7b5ccc", "#5a5a5a"};

struct Extent {
    double lo = 0.0, hi = 1.0;
};

Extent extent_of(std::span<const double> vs, bool pad) {
    Extent e;
    if (vs.empty()) return e;
    e.lo = e.hi = vs[0];
    for (double v : vs) {
        e.lo = std::min(e.lo, v);
        e.hi = std::max(e.hi, v);
    }
    if (e.hi == e.lo) {
        e.hi = e.lo + 1.0;
    }
    if (pad) {
        const double m = 0.06 * (e.hi - e.lo);
        e.lo -= m;
        e.hi += m;
    }
    return e;
}

std::vector<double> nice_ticks(double lo, double hi, int want) {
    const double span = hi - lo;
    const double raw = span / std::max(1, want);
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = mag;
    for (double m : {1.0, 2.0, 2.5, 5.0, 10.0}) {
        if (mag * m >= raw) {
            step = mag * m;
            break;
        }
    }
    std::vector<double> ticks;
    double t = std::ceil(lo / step) * step;
    for (; t <= hi + 1e-12 * span; t += step) {
        ticks.push_back(std::fabs(t) < 1e-12 * span ? 0.0 : t);
    }
    return ticks;
}

void heat_color(double u, int &r, int &g, int &b) {
    // dark blue -> teal -> yellow
    struct Stop {
        double t;
        int r, g, b;
    };
    static const Stop stops[] = {
        {0.0, 13, 8, 135}, {0.35, 30, 110, 161}, {0.7, 53, 183, 121}, {1.0, 240, 220, 47}};
    u = std::clamp(u, 0.0, 1.0);
    for (size_t i = 1; i < std::size(stops); ++i) {
        if (u <= stops[i].t) {
            const double f = (u - stops[i - 1].t) / (stops[i].t - stops[i - 1].t);
            r = static_cast<int>(std::lround(stops[i - 1].r + f * (stops[i].r - stops[i - 1].r)));
            g = static_cast<int>(std::lround(stops[i - 1].g + f * (stops[i].g - stops[i - 1].g)));
            b = static_cast<int>(std::lround(stops[i - 1].b + f * (stops[i].b - stops[i - 1].b)));
            return;
        }
    }
    r = 240;
    g = 220;
    b = 47;
}

}  // namespace

void write_line_chart_svg(const std::string &path, const std::string &title,
                          const std::string &x_label, const std::string &y_label,
                          std::span<const Series> series) {
    const int W = 860, H = 520;
    const int ml = 78, mr = 24, mt = 48, mb = 62;
    const double pw = W - ml - mr, ph = H - mt - mb;

    std::vector<double> all_x, all_y;
    for (const Series &s : series) {
        all_x.insert(all_x.end(), s.x.begin(), s.x.end());
        all_y.insert(all_y.end(), s.y.begin(), s.y.end());
    }
    const Extent ex = extent_of(all_x, false);
    const Extent ey = extent_of(all_y, true);
    auto sx = [&](double v) { return ml + (v - ex.lo) / (ex.hi - ex.lo) * pw; };
    auto sy = [&](double v) { return mt + ph - (v - ey.lo) / (ey.hi - ey.lo) * ph; };

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << W << " " << H
       << "\" font-family=\"Helvetica, Arial, sans-serif\">\n";
    os << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"26\" text-anchor=\"middle\" font-size=\"17\">" << title
       << "</text>\n";

    for (double t : nice_ticks(ex.lo, ex.hi, 6)) {
        const double x = sx(t);
        os << "<line x1=\"" << fmt(x) << "\" y1=\"" << mt << "\" x2=\"" << fmt(x) << "\" y2=\""
           << mt + ph << "\" stroke=\"#e3e3e3\"/>\n";
        os << "<text x=\"" << fmt(x) << "\" y=\"" << mt + ph + 20
           << "\" text-anchor=\"middle\" font-size=\"12\">" << fmt(t) << "</text>\n";
    }
    for (double t : nice_ticks(ey.lo, ey.hi, 6)) {
        const double y = sy(t);
        os << "<line x1=\"" << ml << "\" y1=\"" << fmt(y) << "\" x2=\"" << ml + pw << "\" y2=\""
           << fmt(y) << "\" stroke=\"#e3e3e3\"/>\n";
        os << "<text x=\"" << ml - 8 << "\" y=\"" << fmt(y + 4)
           << "\" text-anchor=\"end\" font-size=\"12\">" << fmt(t) << "</text>\n";
    }
    os << "<rect x=\"" << ml << "\" y=\"" << mt << "\" width=\"" << fmt(pw) << "\" height=\""
       << fmt(ph) << "\" fill=\"none\" stroke=\"#555\"/>\n";
    os << "<text x=\"" << ml + pw / 2 << "\" y=\"" << H - 16
       << "\" text-anchor=\"middle\" font-size=\"14\">" << x_label << "</text>\n";
    os << "<text x=\"22\" y=\"" << mt + ph / 2
       << "\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 22 " << mt + ph / 2
       << ")\">" << y_label << "</text>\n";

    for (size_t si = 0; si < series.size(); ++si) {
        const Series &s = series[si];
        const char *color = kPalette[si % std::size(kPalette)];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (size_t i = 0; i < s.x.size(); ++i) {
            os << fmt(sx(s.x[i])) << "," << fmt(sy(s.y[i])) << " ";
        }
        os << "\"/>\n";
        for (size_t i = 0; i < s.x.size(); ++i) {
            os << "<circle cx=\"" << fmt(sx(s.x[i])) << "\" cy=\"" << fmt(sy(s.y[i]))
               << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
        }
        const double ly = mt + 16 + 18 * static_cast<double>(si);
        os << "<line x1=\"" << ml + pw - 150 << "\" y1=\"" << fmt(ly - 4) << "\" x2=\""
           << ml + pw - 126 << "\" y2=\"" << fmt(ly - 4) << "\" stroke=\"" << color
           << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << ml + pw - 120 << "\" y=\"" << fmt(ly)
           << "\" font-size=\"12\">" << s.label << "</text>\n";
    }
    os << "</svg>\n";
}

void write_heatmap_svg(const std::string &path, const std::string &title,
                       const std::string &x_label, const std::string &y_label,
                       const std::vector<std::vector<double>> &cells,
                       std::span<const std::string> col_labels,
                       std::span<const std::string> row_labels, bool normalize_columns) {
    if (cells.empty()) throw std::invalid_argument("heatmap: no cells");
    const size_t rows = cells.size(), cols = cells[0].size();
    const int W = 860, H = 520;
    const int ml = 86, mr = 24, mt = 48, mb = 72;
    const double cw = (W - ml - mr) / static_cast<double>(cols);
    const double ch = (H - mt - mb) / static_cast<double>(rows);

    std::vector<std::vector<double>> norm(rows, std::vector<double>(cols, 0.0));
    if (normalize_columns) {
        for (size_t c = 0; c < cols; ++c) {
            double mx = 0.0;
            for (size_t r = 0; r < rows; ++r) mx = std::max(mx, cells[r][c]);
            for (size_t r = 0; r < rows; ++r) norm[r][c] = mx > 0.0 ? cells[r][c] / mx : 0.0;
        }
    } else {
        double mx = 0.0;
        for (const auto &row : cells)
            for (double v : row) mx = std::max(mx, v);
        for (size_t r = 0; r < rows; ++r)
            for (size_t c = 0; c < cols; ++c) norm[r][c] = mx > 0.0 ? cells[r][c] / mx : 0.0;
    }

    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " << W << " " << H
       << "\" font-family=\"Helvetica, Arial, sans-serif\">\n";
    os << "<rect width=\"" << W << "\" height=\"" << H << "\" fill=\"white\"/>\n";
    os << "<text x=\"" << W / 2 << "\" y=\"26\" text-anchor=\"middle\" font-size=\"17\">" << title
       << "</text>\n";
    for (size_t r = 0; r < rows; ++r) {
        for (size_t c = 0; c < cols; ++c) {
            int cr = 0, cg = 0, cb = 0;
            heat_color(norm[r][c], cr, cg, cb);
            // row 0 at the bottom
            const double x = ml + cw * static_cast<double>(c);
            const double y = mt + ch * static_cast<double>(rows - 1 - r);
            char color[16];
            std::snprintf(color, sizeof color, "#%02x%02x%02x", cr, cg, cb);
            os << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(y) << "\" width=\"" << fmt(cw + 0.5)
               << "\" height=\"" << fmt(ch + 0.5) << "\" fill=\"" << color << "\"/>\n";
        }
    }
    for (size_t c = 0; c < cols; ++c) {
        if (cols > 16 && c % 2 == 1) continue;
        os << "<text x=\"" << fmt(ml + cw * (static_cast<double>(c) + 0.5)) << "\" y=\""
           << H - mb + 18 << "\" text-anchor=\"middle\" font-size=\"11\">"
           << (c < col_labels.size() ? col_labels[c] : "") << "</text>\n";
    }
    for (size_t r = 0; r < rows; ++r) {
        os << "<text x=\"" << ml - 8 << "\" y=\""
           << fmt(mt + ch * (static_cast<double>(rows - 1 - r) + 0.5) + 4)
           << "\" text-anchor=\"end\" font-size=\"11\">"
           << (r < row_labels.size() ? row_labels[r] : "") << "</text>\n";
    }
    os << "<text x=\"" << ml + (W - ml - mr) / 2 << "\" y=\"" << H - 16
       << "\" text-anchor=\"middle\" font-size=\"14\">" << x_label << "</text>\n";
    os << "<text x=\"24\" y=\"" << mt + (H - mt - mb) / 2
       << "\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 24 "
       << mt + (H - mt - mb) / 2 << ")\">" << y_label << "</text>\n";
    os << "</svg>\n";
}

void write_grounding_report_json(const std::string &path, const GroundingReport &report) {
    json j;
    j["fingerprint"] = report.fingerprint;
    json cks = json::array();
    for (const CheckpointEval &ev : report.checkpoints) {
        json c;
        c["step"] = ev.step;
        c["match_sps"] = ev.match_sps;
        c["mismatch_sps"] = ev.mismatch_sps;
        c["gain"] = ev.gain;
        if (std::isfinite(ev.r2)) {
            c["r2"] = ev.r2;
            c["slope"] = ev.slope;
            c["intercept"] = ev.intercept;
            c["r2_degenerate"] = ev.r2_degenerate;
        }
        json words = json::array();
        for (const WordGain &wg : ev.per_word) {
            words.push_back({{"word", wg.word},
                             {"gain", wg.gain},
                             {"match_sps", wg.match_sps},
                             {"mismatch_sps", wg.mismatch_sps}});
        }
        c["per_word"] = std::move(words);
        cks.push_back(std::move(c));
    }
    j["checkpoints"] = std::move(cks);
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << j.dump(2) << "\n";
}

void write_grounding_report_csv(const std::string &path, const GroundingReport &report) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << "step,match_sps,mismatch_sps,G,R2\n";
    for (const CheckpointEval &ev : report.checkpoints) {
        os << ev.step << "," << fmt(ev.match_sps) << "," << fmt(ev.mismatch_sps) << ","
           << fmt(ev.gain) << "," << (std::isfinite(ev.r2) ? fmt(ev.r2) : "") << "\n";
    }
}

GroundingReport load_grounding_report_json(const std::string &path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    json j = json::parse(is);
    GroundingReport report;
    report.fingerprint = j.at("fingerprint").get<uint64_t>();
    for (const json &c : j.at("checkpoints")) {
        CheckpointEval ev;
        ev.step = c.at("step").get<uint64_t>();
        ev.match_sps = c.at("match_sps").get<double>();
        ev.mismatch_sps = c.at("mismatch_sps").get<double>();
        ev.gain = c.at("gain").get<double>();
        if (c.contains("r2")) {
            ev.r2 = c.at("r2").get<double>();
            ev.slope = c.value("slope", 0.0);
            ev.intercept = c.value("intercept", 0.0);
            ev.r2_degenerate = c.value("r2_degenerate", false);
        }
        for (const json &w : c.value("per_word", json::array())) {
            WordGain wg;
            wg.word = w.at("word").get<std::string>();
            wg.gain = w.at("gain").get<double>();
            wg.match_sps = w.value("match_sps", 0.0);
            wg.mismatch_sps = w.value("mismatch_sps", 0.0);
            ev.per_word.push_back(std::move(wg));
        }
        report.checkpoints.push_back(std::move(ev));
    }
    return report;
}

}  // namespace sg
