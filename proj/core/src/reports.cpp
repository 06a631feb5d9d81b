#include "cmr/reports.h"

#include "cmr/util.h"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>

namespace cmr::reports {

namespace fs = std::filesystem;

namespace {

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string pad(std::string s, std::size_t width) {
    if (s.size() < width) s.append(width - s.size(), ' ');
    return s;
}

std::string lpad(const std::string& s, std::size_t width) {
    return s.size() < width ? std::string(width - s.size(), ' ') + s : s;
}

std::string row_key(const eval::RetrievalReport& r) {
    if (!r.label.empty()) return r.label;
    if (!r.dropped_entities.empty()) return "w/o " + util::join(r.dropped_entities, "+");
    return "full";
}

std::string direction_cells(const eval::RetrievalReport* r) {
    if (!r) return lpad("-", 7) + lpad("-", 7) + lpad("-", 7) + lpad("-", 7);
    return lpad(fmt("%.1f", r->medr), 7) + lpad(fmt("%.1f", 100.0 * r->r1), 7) + lpad(fmt("%.1f", 100.0 * r->r5), 7) +
           lpad(fmt("%.1f", 100.0 * r->r10), 7);
}

constexpr std::size_t kLabelWidth = 24;

std::string header() {
    std::string h1 = pad("", kLabelWidth) + " | " + pad("image-to-recipe", 28) + " | " + pad("recipe-to-image", 28) +
                     " |\n";
    std::string cols = lpad("medR", 7) + lpad("R@1", 7) + lpad("R@5", 7) + lpad("R@10", 7);
    std::string h2 = pad("model", kLabelWidth) + " | " + cols + " | " + cols + " | " + lpad("RSUM", 7) + "\n";
    return h1 + h2 + std::string(h2.size() - 1, '-') + "\n";
}

}  // namespace

std::string render_table(const std::vector<eval::RetrievalReport>& reports) {
    std::string out = header();
    std::vector<int> sizes;
    for (const auto& r : reports) {
        if (std::find(sizes.begin(), sizes.end(), r.gallery_size) == sizes.end()) sizes.push_back(r.gallery_size);
    }
    for (int size : sizes) {
        std::vector<std::string> keys;
        std::map<std::string, std::pair<const eval::RetrievalReport*, const eval::RetrievalReport*>> rows;
        int runs = 0;
        for (const auto& r : reports) {
            if (r.gallery_size != size) continue;
            runs = r.num_runs;
            const std::string key = row_key(r);
            if (!rows.count(key)) keys.push_back(key);
            auto& slot = rows[key];
            (r.direction == eval::Direction::ImageToRecipe ? slot.first : slot.second) = &r;
        }
        if (sizes.size() > 1) {
            out += "[gallery " + std::to_string(size) + ", " + std::to_string(runs) + " runs]\n";
        }
        for (const auto& key : keys) {
            const auto& [i2r, r2i] = rows[key];
            const double rsum = (i2r ? i2r->rsum : 0.0) + (r2i ? r2i->rsum : 0.0);
            out += pad(key, kLabelWidth) + " | " + direction_cells(i2r) + " | " + direction_cells(r2i) + " | " +
                   lpad(fmt("%.1f", rsum), 7) + "\n";
        }
    }
    return out;
}

std::string render_ablation_table(const std::vector<pipeline::AblationRow>& rows) {
    std::string out = pad("row", 14) + pad("ing", 9) + pad("ttl", 9) + lpad("RSUM", 9) + "\n";
    out += std::string(41, '-') + "\n";
    for (const auto& row : rows) {
        const auto& ctx = row.arm.finetune.context;
        const double rsum = row.reports[0].rsum + row.reports[1].rsum;
        out += pad(row.arm.label, 14) + pad(vision::position_name(ctx.ingredients), 9) +
               pad(vision::position_name(ctx.titles), 9) + lpad(fmt("%.2f", rsum), 9) + "\n";
    }
    return out;
}

std::vector<pipeline::EpochLog> read_epoch_log(const fs::path& path, std::vector<std::string>* warnings) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open log " + path.string());
    std::vector<pipeline::EpochLog> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (util::trim(line).empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            pipeline::EpochLog log;
            log.epoch = j.at("epoch").get<int>();
            log.itc = j.at("itc").get<double>();
            log.itm = j.at("itm").get<double>();
            log.total = j.at("total").get<double>();
            log.margin = j.at("margin").get<double>();
            log.frozen = j.value("frozen", false);
            out.push_back(log);
        } catch (const std::exception& e) {
            if (warnings) warnings->push_back(path.string() + ":" + std::to_string(n) + ": skipped (" + e.what() + ")");
        }
    }
    return out;
}

std::string render_svg(const std::string& title, const std::vector<double>& x, const std::vector<Series>& series) {
    constexpr double kW = 640, kH = 400, kLeft = 60, kRight = 20, kTop = 40, kBottom = 50;
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
    double x0 = x.empty() ? 0.0 : *std::min_element(x.begin(), x.end());
    double x1 = x.empty() ? 1.0 : *std::max_element(x.begin(), x.end());
    double y0 = 0.0, y1 = 0.0;
    bool first = true;
    for (const auto& s : series) {
        for (double v : s.values) {
            y0 = first ? v : std::min(y0, v);
            y1 = first ? v : std::max(y1, v);
            first = false;
        }
    }
    if (x1 <= x0) x1 = x0 + 1.0;
    if (y1 <= y0) {
        y0 -= 0.5;
        y1 += 0.5;
    }
    auto px = [&](double v) { return kLeft + (v - x0) / (x1 - x0) * (kW - kLeft - kRight); };
    auto py = [&](double v) { return kH - kBottom - (v - y0) / (y1 - y0) * (kH - kTop - kBottom); };

    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"400\" viewBox=\"0 0 640 400\">\n";
    svg += "<rect width=\"640\" height=\"400\" fill=\"white\"/>\n";
    svg += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">" + title +
           "</text>\n";
    svg += "<line x1=\"60\" y1=\"350\" x2=\"620\" y2=\"350\" stroke=\"black\"/>\n";
    svg += "<line x1=\"60\" y1=\"40\" x2=\"60\" y2=\"350\" stroke=\"black\"/>\n";
    svg += "<text x=\"340\" y=\"385\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">epoch</text>\n";
    for (int t = 0; t <= 4; ++t) {
        const double yv = y0 + (y1 - y0) * t / 4.0;
        svg += "<text x=\"55\" y=\"" + fmt("%.1f", py(yv) + 4) +
               "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" + fmt("%.3g", yv) + "</text>\n";
        const double xv = x0 + (x1 - x0) * t / 4.0;
        svg += "<text x=\"" + fmt("%.1f", px(xv)) +
               "\" y=\"365\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">" + fmt("%.4g", xv) +
               "</text>\n";
    }
    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = colors[s % 5];
        std::string pts;
        const std::size_t n = std::min(x.size(), series[s].values.size());
        for (std::size_t i = 0; i < n; ++i) {
            if (i) pts += ' ';
            pts += fmt("%.2f", px(x[i])) + "," + fmt("%.2f", py(series[s].values[i]));
        }
        svg += "<polyline class=\"series\" data-name=\"" + series[s].name + "\" data-points=\"" + std::to_string(n) +
               "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
        svg += "<text x=\"" + fmt("%.0f", kW - kRight - 80) + "\" y=\"" + fmt("%.0f", kTop + 14.0 * (s + 1)) +
               "\" font-family=\"sans-serif\" font-size=\"11\" fill=\"" + color + "\">" + series[s].name + "</text>\n";
    }
    svg += "</svg>\n";
    return svg;
}

CurveFiles render_curves(const fs::path& log_path, const fs::path& out_dir) {
    CurveFiles files;
    const auto logs = read_epoch_log(log_path, &files.warnings);
    std::vector<double> x, itc, itm, total, margin;
    for (std::size_t i = 0; i < logs.size(); ++i) {
        x.push_back(static_cast<double>(i));
        itc.push_back(logs[i].itc);
        itm.push_back(logs[i].itm);
        total.push_back(logs[i].total);
        margin.push_back(logs[i].margin);
    }
    fs::create_directories(out_dir);
    files.loss = out_dir / "loss.svg";
    files.margin = out_dir / "margin.svg";
    files.points = logs.size();
    std::ofstream(files.loss) << render_svg("loss", x, {{"itc", itc}, {"itm", itm}, {"total", total}});
    std::ofstream(files.margin) << render_svg("margin", x, {{"margin", margin}});
    return files;
}

}  // namespace cmr::reports
