#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "unigen/core/common.hpp"

namespace unigen::pipe {

// Line-delimited {step, stage, metric, value} records.
class MetricsWriter {
public:
    MetricsWriter() = default;
    explicit MetricsWriter(const std::string& path) { open(path); }

    void open(const std::string& path) {
        path_ = path;
        out_.open(path, std::ios::app);
        core::require(out_.good(), "metrics: cannot open " + path);
    }

    bool is_open() const { return out_.is_open(); }

    void append(int64_t step, const std::string& stage, const std::string& metric, double value) {
        if (!out_.is_open()) return;
        out_ << nlohmann::json{{"step", step}, {"stage", stage}, {"metric", metric}, {"value", value}}
                    .dump()
             << "\n";
        out_.flush();
    }

private:
    std::string path_;
    std::ofstream out_;
};

struct MetricPoint {
    int64_t step;
    std::string stage;
    double value;
};

inline std::map<std::string, std::vector<MetricPoint>> read_metrics(const std::string& path) {
    std::ifstream in(path);
    core::require(in.good(), "metrics: cannot open " + path);
    std::map<std::string, std::vector<MetricPoint>> out;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line);
        out[j.at("metric").get<std::string>()].push_back(
            {j.at("step").get<int64_t>(), j.at("stage").get<std::string>(), j.at("value").get<double>()});
    }
    return out;
}

// Minimal static SVG line chart per metric.
inline void write_metric_svg(const std::string& path, const std::string& metric,
                             const std::vector<MetricPoint>& points) {
    const int W = 720, H = 360, pad = 45;
    double lo = 1e300, hi = -1e300;
    int64_t smin = points.front().step, smax = points.back().step;
    for (const auto& p : points) {
        lo = std::min(lo, p.value);
        hi = std::max(hi, p.value);
        smin = std::min(smin, p.step);
        smax = std::max(smax, p.step);
    }
    if (hi <= lo) hi = lo + 1.0;
    if (smax <= smin) smax = smin + 1;
    std::ofstream out(path);
    core::require(out.good(), "report: cannot open " + path);
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">" << metric
        << "</text>\n";
    auto X = [&](int64_t s) {
        return pad + (W - 2 * pad) * static_cast<double>(s - smin) / static_cast<double>(smax - smin);
    };
    auto Y = [&](double v) { return H - pad - (H - 2 * pad) * (v - lo) / (hi - lo); };
    out << "<line x1=\"" << pad << "\" y1=\"" << H - pad << "\" x2=\"" << W - pad << "\" y2=\""
        << H - pad << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\"" << H - pad
        << "\" stroke=\"black\"/>\n";
    out << "<text x=\"" << pad << "\" y=\"" << H - pad + 16 << "\" font-size=\"11\">" << smin
        << "</text>\n<text x=\"" << W - pad << "\" y=\"" << H - pad + 16
        << "\" text-anchor=\"end\" font-size=\"11\">" << smax << "</text>\n";
    out << "<text x=\"" << pad - 4 << "\" y=\"" << H - pad << "\" text-anchor=\"end\" font-size=\"11\">"
        << lo << "</text>\n<text x=\"" << pad - 4 << "\" y=\"" << pad + 4
        << "\" text-anchor=\"end\" font-size=\"11\">" << hi << "</text>\n";
    out << "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"";
    for (const auto& p : points) out << X(p.step) << "," << Y(p.value) << " ";
    out << "\"/>\n</svg>\n";
}

inline std::vector<std::string> write_report(const std::string& metrics_path,
                                             const std::string& out_dir) {
    auto metrics = read_metrics(metrics_path);
    std::vector<std::string> written;
    for (const auto& [name, points] : metrics) {
        if (points.empty()) continue;
        std::string fname = name;
        std::replace(fname.begin(), fname.end(), '/', '_');
        const std::string path = out_dir + "/" + fname + ".svg";
        write_metric_svg(path, name, points);
        written.push_back(path);
    }
    std::ofstream idx(out_dir + "/report.txt");
    for (const auto& [name, points] : metrics) {
        idx << name << ": " << points.size() << " points, last = " << points.back().value << "\n";
    }
    return written;
}

}  // namespace unigen::pipe
