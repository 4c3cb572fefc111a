// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "lopt/cli.hpp"

namespace lopt::cli {

namespace {

struct Series {
    std::string label;
    std::vector<std::pair<double, double>> points;
};

double parse_number(const std::string& cell, const std::string& column) {
    try {
        std::size_t used = 0;
        const double v = std::stod(cell, &used);
        if (used == cell.size()) return v;
    } catch (const std::exception&) {
    }
    throw Error(ErrorCode::SchemaMismatch, "column '" + column + "' holds non-numeric value '" + cell + "'");
}

void require_schema(const CsvTable& table, const std::string& expected) {
    const std::size_t col = table.column("schema");
    for (const auto& row : table.rows)
        require(row[col] == expected, ErrorCode::SchemaMismatch,
                "unsupported schema '" + row[col] + "', expected '" + expected + "'");
}

std::vector<Series> collect(const CsvTable& table, PlotKind kind) {
    require(!table.rows.empty(), ErrorCode::SchemaMismatch, "table has no data rows");
    std::map<std::string, Series> by_label;
    std::vector<std::string> order;
    auto add = [&](const std::string& label, double x, double y) {
        auto [it, inserted] = by_label.try_emplace(label, Series{label, {}});
        if (inserted) order.push_back(label);
        it->second.points.emplace_back(x, y);
    };

    if (kind == PlotKind::LossCurve) {
        require_schema(table, kTrainSchema);
        const auto opt = table.column("optimizer"), step = table.column("step"), loss = table.column("loss");
        for (const auto& row : table.rows) {
            const double y = parse_number(row[loss], "loss");
            if (std::isfinite(y)) add(row[opt], parse_number(row[step], "step"), y);
        }
    } else {
        require_schema(table, kBenchSchema);
        const bool by_width = kind == PlotKind::StepTimeVsWidth;
        const auto opt = table.column("optimizer"), status = table.column("status");
        const auto xcol = table.column(by_width ? "width" : "depth");
        const auto fixed = table.column(by_width ? "depth" : "width");
        const auto median = table.column("median_ms");
        for (const auto& row : table.rows) {
            if (row[status] != "ok") continue;
            const std::string label = row[opt] + (by_width ? " depth " : " width ") + row[fixed];
            add(label, parse_number(row[xcol], by_width ? "width" : "depth"), parse_number(row[median], "median_ms"));
        }
    }
    std::vector<Series> out;
    for (const auto& label : order) {
        auto s = by_label.at(label);
        std::stable_sort(s.points.begin(), s.points.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        out.push_back(std::move(s));
    }
    require(!out.empty(), ErrorCode::SchemaMismatch, "no plottable rows");
    return out;
}

std::string num(double v) {
    std::ostringstream os;
    os.precision(4);
    os << v;
    return os.str();
}

} // namespace

PlotKind parse_plot_kind(const std::string& s) {
    if (s == "step_time_vs_width") return PlotKind::StepTimeVsWidth;
    if (s == "step_time_vs_depth") return PlotKind::StepTimeVsDepth;
    if (s == "loss_curve") return PlotKind::LossCurve;
    throw Error(ErrorCode::InvalidArgument, "unknown plot kind '" + s + "'");
}

std::string render_plot(const CsvTable& table, PlotKind kind) {
    const auto series = collect(table, kind);
    constexpr double kW = 720, kH = 440, kLeft = 70, kRight = 200, kTop = 40, kBottom = 50;
    const double pw = kW - kLeft - kRight, ph = kH - kTop - kBottom;

    double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
    for (const auto& s : series)
        for (auto [x, y] : s.points) {
            x0 = std::min(x0, x);
            x1 = std::max(x1, x);
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    y0 = std::min(y0, 0.0);
    if (x1 <= x0) x1 = x0 + 1;
    if (y1 <= y0) y1 = y0 + 1;
    auto sx = [&](double x) { return kLeft + (x - x0) / (x1 - x0) * pw; };
    auto sy = [&](double y) { return kTop + ph - (y - y0) / (y1 - y0) * ph; };

    const char* title = kind == PlotKind::LossCurve         ? "loss vs step"
                        : kind == PlotKind::StepTimeVsWidth ? "optimizer step time vs width"
                                                            : "optimizer step time vs depth";
    const char* xlabel = kind == PlotKind::LossCurve ? "step" : kind == PlotKind::StepTimeVsWidth ? "width" : "depth";
    const char* ylabel = kind == PlotKind::LossCurve ? "loss" : "median step time (ms)";
    static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2"};

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kW << "\" height=\"" << kH
       << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title
       << "</text>\n";
    os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + ph << "\" x2=\"" << kLeft + pw << "\" y2=\"" << kTop + ph
       << "\" stroke=\"black\"/>\n";
    os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + ph
       << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double xv = x0 + (x1 - x0) * i / 4, yv = y0 + (y1 - y0) * i / 4;
        os << "<text x=\"" << sx(xv) << "\" y=\"" << kTop + ph + 18 << "\" text-anchor=\"middle\">" << num(xv)
           << "</text>\n";
        os << "<text x=\"" << kLeft - 6 << "\" y=\"" << sy(yv) + 4 << "\" text-anchor=\"end\">" << num(yv)
           << "</text>\n";
        os << "<line x1=\"" << kLeft << "\" y1=\"" << sy(yv) << "\" x2=\"" << kLeft + pw << "\" y2=\"" << sy(yv)
           << "\" stroke=\"#ddd\"/>\n";
    }
    os << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kH - 10 << "\" text-anchor=\"middle\">" << xlabel
       << "</text>\n";
    os << "<text transform=\"translate(16," << kTop + ph / 2 << ") rotate(-90)\" text-anchor=\"middle\">" << ylabel
       << "</text>\n";

    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* color = kColors[i % std::size(kColors)];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (auto [x, y] : series[i].points) os << sx(x) << ',' << sy(y) << ' ';
        os << "\"/>\n";
        for (auto [x, y] : series[i].points)
            os << "<circle cx=\"" << sx(x) << "\" cy=\"" << sy(y) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
        const double ly = kTop + 10 + 18 * double(i);
        os << "<line x1=\"" << kW - kRight + 15 << "\" y1=\"" << ly << "\" x2=\"" << kW - kRight + 35 << "\" y2=\""
           << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << kW - kRight + 40 << "\" y=\"" << ly + 4 << "\">" << series[i].label << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

} // namespace lopt::cli
