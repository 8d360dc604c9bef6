#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "smn/eval.hpp"
#include "smn/trainer.hpp"

namespace smn {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

/// Self-contained SVG line chart. Output depends only on the inputs, so
/// reports diff cleanly between runs.
std::string svg_line_plot(const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<Series>& series);

/// Grouped bars: one group per category, one bar per series (y[i] for category i).
std::string svg_bar_chart(const std::string& title, const std::vector<std::string>& categories,
                          const std::vector<Series>& series);

/// Precision-recall curves at IoU 0.5, one per comparison row.
std::string svg_pr_curves(const std::vector<ComparisonRow>& rows);

/// AP and AR-10 per method for each protocol.
std::string svg_comparison(const std::vector<ComparisonRow>& rows);

/// Total loss against step, plus a 50-step moving average.
std::string svg_loss_curve(const std::string& title, const TrainLog& log);

/// Reads a training log written by TrainLog::write_csv (wall time ignored).
TrainLog read_train_log(const std::filesystem::path& path);

/// Reads rows written by write_comparison_csv; pr50 is not stored there and stays empty.
std::vector<ComparisonRow> read_comparison_csv(const std::filesystem::path& path);

}  // namespace smn
