#pragma once

// Text tables and static SVG plots for retrieval reports and training logs.

#include "cmr/pipeline.h"
#include "cmr/retrieval_eval.h"

#include <filesystem>
#include <string>
#include <vector>

namespace cmr::reports {

/// Fixed-width table with one row per model (label or drop set) and both
/// directions side by side: medR, R@1, R@5, R@10 (percent) and RSUM. Reports
/// with different gallery sizes go to separate sections. An empty list gives
/// the header alone.
std::string render_table(const std::vector<eval::RetrievalReport>& reports);

/// Rows of the context ablation: which context goes where, and RSUM per gallery.
std::string render_ablation_table(const std::vector<pipeline::AblationRow>& rows);

/// Reads a JSON-lines epoch log. Malformed lines are skipped and described in
/// `warnings`. A missing file throws.
std::vector<pipeline::EpochLog> read_epoch_log(const std::filesystem::path& path,
                                               std::vector<std::string>* warnings = nullptr);

struct CurveFiles {
    std::filesystem::path loss;    // <out_dir>/loss.svg: itc, itm, total
    std::filesystem::path margin;  // <out_dir>/margin.svg
    std::size_t points = 0;
    std::vector<std::string> warnings;
};

/// Plots every logged epoch in file order.
CurveFiles render_curves(const std::filesystem::path& log_path, const std::filesystem::path& out_dir);

/// One SVG line chart; series share the x values. Pure function of its inputs.
struct Series {
    std::string name;
    std::vector<double> values;
};
std::string render_svg(const std::string& title, const std::vector<double>& x, const std::vector<Series>& series);

}  // namespace cmr::reports
