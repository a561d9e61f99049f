#pragma once

#include <string>
#include <vector>

namespace wdlab {

enum class PlotKind {
  NormCurves,
  AccuracyCurves,
  Decomposition,
  Cosines,
  QuantileBand,
  SharpnessBars,
};

PlotKind plot_kind_from_string(const std::string& s);

/// Render metric logs from the given run directories into a deterministic
/// SVG at `out_path`, and export the plotted series as CSV beside it
/// (same stem, .csv). Missing columns are reported by name.
void plot_runs(const std::vector<std::string>& run_dirs, PlotKind kind,
               const std::string& out_path);

}  // namespace wdlab
