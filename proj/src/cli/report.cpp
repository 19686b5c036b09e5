#include "forgetbench/report.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>

#include <json.hpp>

#include "forgetbench/error.hpp"
#include "forgetbench/trainer.hpp"

namespace forgetbench::report {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::string number(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string number(const std::optional<double>& v) { return v ? number(*v) : std::string(); }

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataError("cannot write " + path.string());
    }
    out << text;
}

std::string escape_xml(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&':
            out += "&amp;";
            break;
        case '<':
            out += "&lt;";
            break;
        case '>':
            out += "&gt;";
            break;
        default:
            out.push_back(c);
        }
    }
    return out;
}

}  // namespace

ReportBundle collect(const fs::path& runs_dir) {
    if (!fs::is_directory(runs_dir)) {
        throw DataError("runs directory " + runs_dir.string() + " does not exist");
    }
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(runs_dir)) {
        if (entry.is_directory() && fs::exists(entry.path() / "config.json")) {
            dirs.push_back(entry.path());
        }
    }
    std::sort(dirs.begin(), dirs.end());
    ReportBundle bundle;
    for (const auto& dir : dirs) {
        trainer::RunRecord record;
        try {
            record = trainer::read_run_record(dir);
        } catch (const IncompleteRunError& e) {
            bundle.skipped.push_back(dir.filename().string() + ": " + e.what());
            continue;
        }
        CellSummary cell;
        cell.cell = dir.filename().string();
        cell.architecture = models::to_string(record.config.architecture);
        cell.strategies = record.config.strategy_name();
        cell.seed = record.config.seed;
        cell.tasks = record.matrix.tasks();
        cell.metrics = record.metrics;
        cell.curve = metrics::curves(record.matrix);
        bundle.cells.push_back(std::move(cell));
    }
    if (bundle.cells.empty()) {
        throw IncompleteRunError("no complete run under " + runs_dir.string() +
                                 (bundle.skipped.empty() ? "" : " (" + std::to_string(bundle.skipped.size()) +
                                                                    " incomplete)"));
    }
    bundle.best = best_per_architecture(bundle.cells);
    return bundle;
}

std::vector<BestRow> best_per_architecture(const std::vector<CellSummary>& cells) {
    std::map<std::string, const CellSummary*> best;
    for (const auto& c : cells) {
        if (c.strategies == "naive" || c.strategies == "joint") {
            continue;
        }
        auto it = best.find(c.architecture);
        if (it == best.end()) {
            best[c.architecture] = &c;
            continue;
        }
        const CellSummary& b = *it->second;
        const bool better = c.metrics.aa > b.metrics.aa ||
                            (c.metrics.aa == b.metrics.aa &&
                             (c.metrics.af1 > b.metrics.af1 || (c.metrics.af1 == b.metrics.af1 && c.cell < b.cell)));
        if (better) {
            it->second = &c;
        }
    }
    std::vector<BestRow> out;
    for (const auto& [arch, c] : best) {
        out.push_back(BestRow{arch, c->strategies, c->cell, c->metrics.aa, c->metrics.af1, c->metrics.avg_bwt_acc,
                              c->metrics.avg_bwt_f1});
    }
    return out;
}

std::string summary_csv(const ReportBundle& bundle) {
    std::string out = "cell,architecture,strategies,seed,tasks,aa,af1,bwt_acc,bwt_f1,avg_bwt_acc,avg_bwt_f1\n";
    for (const auto& c : bundle.cells) {
        const auto& m = c.metrics;
        out += c.cell + "," + c.architecture + "," + c.strategies + "," + std::to_string(c.seed) + "," +
               std::to_string(c.tasks) + "," + number(m.aa) + "," + number(m.af1) + "," + number(m.bwt_acc) + "," +
               number(m.bwt_f1) + "," + number(m.avg_bwt_acc) + "," + number(m.avg_bwt_f1) + "\n";
    }
    return out;
}

std::string best_csv(const ReportBundle& bundle) {
    std::string out = "architecture,best_strategies,cell,aa,af1,avg_bwt_acc,avg_bwt_f1\n";
    for (const auto& b : bundle.best) {
        out += b.architecture + "," + b.strategies + "," + b.cell + "," + number(b.aa) + "," + number(b.af1) + "," +
               number(b.avg_bwt_acc) + "," + number(b.avg_bwt_f1) + "\n";
    }
    return out;
}

std::string summary_json(const ReportBundle& bundle) {
    json cells = json::array();
    for (const auto& c : bundle.cells) {
        json curve = json::array();
        for (const auto& p : c.curve) {
            curve.push_back(json{{"task", p.task},
                                 {"aa", p.aa},
                                 {"af1", p.af1},
                                 {"avg_bwt_acc", optional_json(p.avg_bwt_acc)},
                                 {"avg_bwt_f1", optional_json(p.avg_bwt_f1)}});
        }
        cells.push_back(json{{"cell", c.cell},
                             {"architecture", c.architecture},
                             {"strategies", c.strategies},
                             {"seed", c.seed},
                             {"tasks", c.tasks},
                             {"aa", c.metrics.aa},
                             {"af1", c.metrics.af1},
                             {"bwt_acc", optional_json(c.metrics.bwt_acc)},
                             {"bwt_f1", optional_json(c.metrics.bwt_f1)},
                             {"avg_bwt_acc", optional_json(c.metrics.avg_bwt_acc)},
                             {"avg_bwt_f1", optional_json(c.metrics.avg_bwt_f1)},
                             {"curve", std::move(curve)}});
    }
    json best = json::array();
    for (const auto& b : bundle.best) {
        best.push_back(json{{"architecture", b.architecture},
                            {"best_strategies", b.strategies},
                            {"cell", b.cell},
                            {"aa", b.aa},
                            {"af1", b.af1},
                            {"avg_bwt_acc", optional_json(b.avg_bwt_acc)},
                            {"avg_bwt_f1", optional_json(b.avg_bwt_f1)}});
    }
    json out{{"cells", std::move(cells)}, {"best_per_architecture", std::move(best)}, {"skipped", bundle.skipped}};
    return out.dump(2) + "\n";
}

std::string curve_svg(const CellSummary& cell) {
    constexpr double width = 640, height = 400, left = 60, right = 150, top = 40, bottom = 50;
    const double plot_w = width - left - right;
    const double plot_h = height - top - bottom;
    const std::size_t n = cell.curve.size();
    auto x_of = [&](std::size_t task) {
        return n <= 1 ? left + plot_w / 2 : left + plot_w * static_cast<double>(task - 1) / static_cast<double>(n - 1);
    };
    // y axis spans [-1, 1]: the BWT family can be negative.
    auto y_of = [&](double v) { return top + plot_h * (1.0 - (v + 1.0) / 2.0); };
    auto fmt = [](double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.2f", v);
        return std::string(buf);
    };

    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + fmt(width) + "\" height=\"" +
                      fmt(height) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg += "<text x=\"" + fmt(left) + "\" y=\"24\" font-size=\"14\">" + escape_xml(cell.cell) + "</text>\n";
    for (int tick = -4; tick <= 4; ++tick) {
        const double v = tick / 4.0;
        const double y = y_of(v);
        svg += "<line x1=\"" + fmt(left) + "\" y1=\"" + fmt(y) + "\" x2=\"" + fmt(left + plot_w) + "\" y2=\"" +
               fmt(y) + "\" stroke=\"" + (tick == 0 ? "#888" : "#e0e0e0") + "\"/>\n";
        svg += "<text x=\"" + fmt(left - 8) + "\" y=\"" + fmt(y + 4) + "\" text-anchor=\"end\">" + fmt(v) +
               "</text>\n";
    }
    for (const auto& p : cell.curve) {
        svg += "<text x=\"" + fmt(x_of(p.task)) + "\" y=\"" + fmt(top + plot_h + 18) + "\" text-anchor=\"middle\">" +
               std::to_string(p.task) + "</text>\n";
    }
    svg += "<text x=\"" + fmt(left + plot_w / 2) + "\" y=\"" + fmt(height - 12) +
           "\" text-anchor=\"middle\">tasks learned</text>\n";

    struct Series {
        const char* name;
        const char* colour;
        std::optional<double> (*value)(const metrics::CurvePoint&);
    };
    const Series series[] = {
        {"AA", "#1f77b4", [](const metrics::CurvePoint& p) { return std::optional<double>(p.aa); }},
        {"AF1", "#2ca02c", [](const metrics::CurvePoint& p) { return std::optional<double>(p.af1); }},
        {"avg BWT (acc)", "#d62728", [](const metrics::CurvePoint& p) { return p.avg_bwt_acc; }},
        {"avg BWT (F1)", "#ff7f0e", [](const metrics::CurvePoint& p) { return p.avg_bwt_f1; }},
    };
    double legend_y = top + 10;
    for (const auto& s : series) {
        std::string points;
        for (const auto& p : cell.curve) {
            if (const auto v = s.value(p)) {
                points += (points.empty() ? "" : " ") + fmt(x_of(p.task)) + "," + fmt(y_of(*v));
                svg += "<circle cx=\"" + fmt(x_of(p.task)) + "\" cy=\"" + fmt(y_of(*v)) + "\" r=\"3\" fill=\"" +
                       s.colour + "\"/>\n";
            }
        }
        if (!points.empty()) {
            svg += "<polyline fill=\"none\" stroke=\"" + std::string(s.colour) + "\" stroke-width=\"2\" points=\"" +
                   points + "\"/>\n";
        }
        const double lx = left + plot_w + 15;
        svg += "<line x1=\"" + fmt(lx) + "\" y1=\"" + fmt(legend_y) + "\" x2=\"" + fmt(lx + 20) + "\" y2=\"" +
               fmt(legend_y) + "\" stroke=\"" + s.colour + "\" stroke-width=\"2\"/>\n";
        svg += "<text x=\"" + fmt(lx + 26) + "\" y=\"" + fmt(legend_y + 4) + "\">" + s.name + "</text>\n";
        legend_y += 20;
    }
    svg += "</svg>\n";
    return svg;
}

Format parse_format(const std::string& name) {
    if (name == "csv") {
        return Format::csv;
    }
    if (name == "json") {
        return Format::json;
    }
    if (name == "svg") {
        return Format::svg;
    }
    throw ConfigError("unknown report format '" + name + "' (valid: csv, json, svg)");
}

std::vector<fs::path> write(const ReportBundle& bundle, const fs::path& out_dir, const std::vector<Format>& formats) {
    fs::create_directories(out_dir);
    std::vector<fs::path> written;
    for (Format f : formats) {
        switch (f) {
        case Format::csv:
            write_file(out_dir / "summary.csv", summary_csv(bundle));
            write_file(out_dir / "best_per_architecture.csv", best_csv(bundle));
            written.push_back(out_dir / "summary.csv");
            written.push_back(out_dir / "best_per_architecture.csv");
            break;
        case Format::json:
            write_file(out_dir / "summary.json", summary_json(bundle));
            written.push_back(out_dir / "summary.json");
            break;
        case Format::svg:
            fs::create_directories(out_dir / "curves");
            for (const auto& c : bundle.cells) {
                const fs::path p = out_dir / "curves" / (c.cell + ".svg");
                write_file(p, curve_svg(c));
                written.push_back(p);
            }
            break;
        }
    }
    return written;
}

}  // namespace forgetbench::report
