#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cobalt/common.hpp"
#include "cobalt/pipeline.hpp"

namespace cobalt {

// ---------------------------------------------------------------------------
// Minimal SVG charts (no plotting dependency; output is deterministic)
// ---------------------------------------------------------------------------

namespace svg {

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(2) << v;
    return os.str();
}

struct Series {
    std::string label;
    std::vector<double> values;
    std::string color = "#3366cc";
};

inline std::string line_chart(const std::string& title, const std::vector<Series>& series) {
    const double W = 640, H = 360, ml = 60, mr = 140, mt = 40, mb = 40;
    double lo = 0.0, hi = 1e-9;
    std::size_t n = 1;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.values.size(); ++i) {
            lo = std::min(lo, s.values[i]);
            hi = std::max(hi, s.values[i]);
            n = std::max(n, s.values.size());
        }
    if (hi <= lo) hi = lo + 1.0;
    auto px = [&](std::size_t i) { return ml + (W - ml - mr) * (n > 1 ? static_cast<double>(i) / (n - 1) : 0.5); };
    auto py = [&](double v) { return H - mb - (H - mt - mb) * (v - lo) / (hi - lo); };
    std::ostringstream os;
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    os << "<rect width='100%' height='100%' fill='white'/>\n";
    os << "<text x='" << W / 2 << "' y='20' text-anchor='middle' font-size='15'>" << title << "</text>\n";
    os << "<line x1='" << ml << "' y1='" << py(lo) << "' x2='" << W - mr << "' y2='" << py(lo)
       << "' stroke='#444'/>\n";
    os << "<line x1='" << ml << "' y1='" << py(lo) << "' x2='" << ml << "' y2='" << mt
       << "' stroke='#444'/>\n";
    for (int g = 0; g <= 4; ++g) {
        const double v = lo + (hi - lo) * g / 4.0;
        os << "<text x='" << ml - 6 << "' y='" << py(v) + 4 << "' text-anchor='end' font-size='11'>"
           << fmt(v) << "</text>\n";
        os << "<line x1='" << ml << "' y1='" << py(v) << "' x2='" << W - mr << "' y2='" << py(v)
           << "' stroke='#ddd'/>\n";
    }
    double ly = mt;
    for (const auto& s : series) {
        os << "<polyline fill='none' stroke='" << s.color << "' stroke-width='1.5' points='";
        for (std::size_t i = 0; i < s.values.size(); ++i)
            os << fmt(px(i)) << "," << fmt(py(s.values[i])) << " ";
        os << "'/>\n";
        os << "<text x='" << W - mr + 10 << "' y='" << ly + 12 << "' font-size='12' fill='" << s.color
           << "'>" << s.label << "</text>\n";
        ly += 16;
    }
    os << "</svg>\n";
    return os.str();
}

inline std::string bar_chart(const std::string& title, const std::vector<std::string>& labels,
                             const std::vector<double>& values, const std::string& color = "#3366cc") {
    const double W = std::max<double>(320, 60 + 26.0 * static_cast<double>(values.size()) + 20);
    const double H = 360, ml = 60, mt = 40, mb = 70;
    double hi = 1e-9;
    for (double v : values) hi = std::max(hi, v);
    auto py = [&](double v) { return H - mb - (H - mt - mb) * v / hi; };
    std::ostringstream os;
    os << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
    os << "<rect width='100%' height='100%' fill='white'/>\n";
    os << "<text x='" << W / 2 << "' y='20' text-anchor='middle' font-size='15'>" << title << "</text>\n";
    for (int g = 0; g <= 4; ++g) {
        const double v = hi * g / 4.0;
        os << "<text x='" << ml - 6 << "' y='" << py(v) + 4 << "' text-anchor='end' font-size='11'>"
           << fmt(v) << "</text>\n";
        os << "<line x1='" << ml << "' y1='" << py(v) << "' x2='" << W - 20 << "' y2='" << py(v)
           << "' stroke='#ddd'/>\n";
    }
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double x = ml + 26.0 * static_cast<double>(i) + 4;
        os << "<rect x='" << fmt(x) << "' y='" << fmt(py(values[i])) << "' width='18' height='"
           << fmt(py(0) - py(values[i])) << "' fill='" << color << "'/>\n";
        os << "<text x='" << fmt(x + 9) << "' y='" << H - mb + 14
           << "' text-anchor='end' font-size='10' transform='rotate(-45 " << fmt(x + 9) << " "
           << H - mb + 14 << ")'>" << labels[i] << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

} // namespace svg

// ---------------------------------------------------------------------------
// Run report: summary + plots from the metrics and prediction files
// ---------------------------------------------------------------------------

inline std::vector<nlohmann::json> read_ndjson(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ArtifactError(strcat("missing metrics file ", path.string()));
    std::vector<nlohmann::json> rows;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            rows.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw ArtifactError(strcat("corrupt metrics at ", path.string(), ":", line_no, ": ", e.what()));
        }
    }
    return rows;
}

struct RunEntry {
    std::string sampler, strategy;
    std::filesystem::path dir;
};

inline std::vector<RunEntry> discover_stage2_runs(const std::filesystem::path& run_dir) {
    std::vector<RunEntry> out;
    if (!std::filesystem::exists(run_dir)) return out;
    std::vector<std::filesystem::path> dirs;
    for (const auto& e : std::filesystem::directory_iterator(run_dir))
        if (e.is_directory() && e.path().filename().string().rfind("stage2_", 0) == 0)
            dirs.push_back(e.path());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& d : dirs) {
        auto name = d.filename().string().substr(7); // after "stage2_"
        const auto us = name.find('_');
        if (us == std::string::npos) continue;
        out.push_back({name.substr(0, us), name.substr(us + 1), d});
    }
    return out;
}

// Assembles summary.json, summary.md and SVG plots for a finished run
// directory. Evaluation files (eval_*.json, predictions ndjson) contribute
// final test numbers when present.
inline nlohmann::json report_run(const std::filesystem::path& run_dir) {
    const auto report_dir = run_dir / "report";
    std::filesystem::create_directories(report_dir / "plots");

    nlohmann::json summary;
    summary["run"] = run_dir.filename().string();

    // stage-1 curves and codebook usage
    if (std::filesystem::exists(paths::stage1_metrics(run_dir))) {
        auto rows = read_ndjson(paths::stage1_metrics(run_dir));
        std::vector<double> dis, con, vq, total;
        for (const auto& r : rows) {
            dis.push_back(r.at("l_dis").get<double>());
            con.push_back(r.at("l_con").get<double>());
            vq.push_back(r.at("l_vq").get<double>());
            total.push_back(r.at("loss").get<double>());
        }
        std::ofstream os(report_dir / "plots" / "stage1_loss.svg");
        os << svg::line_chart("stage-1 loss components",
                              {{"distill", dis, "#3366cc"},
                               {"contrast", con, "#dc3912"},
                               {"vq", vq, "#ff9900"},
                               {"total", total, "#109618"}});
        summary["stage1"]["epochs"] = rows.size();
        if (!rows.empty()) {
            summary["stage1"]["final_loss"] = rows.back().at("loss");
            summary["stage1"]["codes_in_use"] = rows.back().at("codes_in_use");
        }
    }
    if (std::filesystem::exists(paths::codebook(run_dir))) {
        auto dict = load_dictionary(paths::codebook(run_dir));
        std::vector<std::string> labels;
        std::vector<double> usage;
        for (int k = 0; k < dict.K; ++k) {
            labels.push_back(strcat("c", k));
            usage.push_back(static_cast<double>(dict.usage[static_cast<std::size_t>(k)]));
        }
        std::ofstream os(report_dir / "plots" / "codebook_usage.svg");
        os << svg::bar_chart("codebook usage (cumulative assignments)", labels, usage, "#990099");
        int dead = 0;
        for (auto u : dict.usage)
            if (u == 0) ++dead;
        summary["stage1"]["dead_codes"] = dead;
    }

    // stage-2 runs
    auto entries = discover_stage2_runs(run_dir);
    auto runs = nlohmann::json::array();
    for (const auto& entry : entries) {
        nlohmann::json rj;
        rj["sampler"] = entry.sampler;
        rj["early_stop"] = entry.strategy;
        auto rows = read_ndjson(entry.dir / "metrics.ndjson");
        std::vector<double> avg, worst_hg;
        for (const auto& r : rows) {
            avg.push_back(r.at("val_avg").get<double>());
            worst_hg.push_back(r.at("val_worst_hg").get<double>());
        }
        std::ofstream os(report_dir / "plots" /
                         strcat("val_", entry.sampler, "_", entry.strategy, ".svg"));
        os << svg::line_chart(strcat("validation accuracy (", entry.sampler, ", ", entry.strategy, ")"),
                              {{"average", avg, "#3366cc"}, {"worst group", worst_hg, "#dc3912"}});
        if (std::filesystem::exists(entry.dir / "train_summary.json")) {
            std::ifstream is(entry.dir / "train_summary.json");
            nlohmann::json ts;
            try {
                is >> ts;
            } catch (const nlohmann::json::exception& e) {
                throw ArtifactError(strcat("corrupt train summary ",
                                           (entry.dir / "train_summary.json").string(), ": ", e.what()));
            }
            rj["best_epoch"] = ts.value("best_epoch", -1);
            if (ts.contains("lambda")) rj["lambda"] = ts["lambda"];
        }
        // final test evaluation, when the eval step has run
        const auto eval_path = entry.dir / "eval_test_ground_truth.json";
        if (std::filesystem::exists(eval_path)) {
            std::ifstream is(eval_path);
            nlohmann::json ej;
            try {
                is >> ej;
            } catch (const nlohmann::json::exception& e) {
                throw ArtifactError(strcat("corrupt eval file ", eval_path.string(), ": ", e.what()));
            }
            rj["test_average"] = ej.at("average");
            rj["test_worst_group"] = ej.at("worst_group");
            // per-group bar chart
            std::vector<std::string> labels;
            std::vector<double> accs;
            for (const auto& g : ej.at("groups")) {
                if (!g.at("considered").get<bool>()) continue;
                labels.push_back(strcat("y", g.at("class").get<int>(), "/a", g.at("attribute").get<int>()));
                accs.push_back(g.at("accuracy").get<double>());
            }
            std::ofstream bos(report_dir / "plots" /
                              strcat("groups_", entry.sampler, "_", entry.strategy, ".svg"));
            bos << svg::bar_chart(strcat("per-group test accuracy (", entry.sampler, ", ",
                                         entry.strategy, ")"),
                                  labels, accs, "#109618");
        }
        runs.push_back(std::move(rj));
    }
    summary["runs"] = runs;

    // deltas between the balanced sampler and the iid baseline, matched on strategy
    auto deltas = nlohmann::json::array();
    for (const auto& a : runs) {
        if (a["sampler"] != "cobalt" || !a.contains("test_worst_group")) continue;
        for (const auto& b : runs) {
            if (b["sampler"] != "iid" || b["early_stop"] != a["early_stop"] ||
                !b.contains("test_worst_group"))
                continue;
            nlohmann::json d;
            d["early_stop"] = a["early_stop"];
            d["worst_group_delta"] =
                a["test_worst_group"].get<double>() - b["test_worst_group"].get<double>();
            d["average_delta"] = a["test_average"].get<double>() - b["test_average"].get<double>();
            deltas.push_back(std::move(d));
        }
    }
    summary["deltas"] = deltas;

    {
        std::ofstream os(report_dir / "summary.json");
        os << summary.dump(2) << "\n";
    }
    {
        std::ofstream os(report_dir / "summary.md");
        os << "# Run summary: " << run_dir.filename().string() << "\n\n";
        if (summary.contains("stage1")) {
            os << "## Concept discovery\n\n";
            os << "- epochs: " << summary["stage1"].value("epochs", 0) << "\n";
            if (summary["stage1"].contains("codes_in_use"))
                os << "- codes in use at end: " << summary["stage1"]["codes_in_use"] << "\n";
            if (summary["stage1"].contains("dead_codes"))
                os << "- dead codes: " << summary["stage1"]["dead_codes"] << "\n";
            os << "\n";
        }
        os << "## Classifier runs\n\n";
        os << "| sampler | early stop | best epoch | test avg | test worst group |\n";
        os << "|---------|-----------|-----------|----------|------------------|\n";
        for (const auto& r : runs) {
            os << "| " << r.value("sampler", "?") << " | " << r.value("early_stop", "?") << " | "
               << r.value("best_epoch", -1) << " | ";
            if (r.contains("test_average"))
                os << std::fixed << std::setprecision(4) << r["test_average"].get<double>();
            else
                os << "-";
            os << " | ";
            if (r.contains("test_worst_group"))
                os << std::fixed << std::setprecision(4) << r["test_worst_group"].get<double>();
            else
                os << "-";
            os << " |\n";
        }
        if (!deltas.empty()) {
            os << "\n## Balanced sampling vs iid baseline\n\n";
            for (const auto& d : deltas)
                os << "- early stop `" << d["early_stop"].get<std::string>()
                   << "`: worst-group delta " << std::showpos << std::fixed << std::setprecision(4)
                   << d["worst_group_delta"].get<double>() << ", average delta "
                   << d["average_delta"].get<double>() << std::noshowpos << "\n";
        }
        os << "\nPlots are under `report/plots/`.\n";
    }
    return summary;
}

} // namespace cobalt
