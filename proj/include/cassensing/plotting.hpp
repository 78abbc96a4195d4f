#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "cassensing/fields.hpp"

namespace cas {

// Binary PPM (P6) images; no external image library needed.

// One channel of a snapshot on a diverging blue-white-red map symmetric
// about 0 (limit = max |value| unless given). Invalid points are grey. The
// first grid row is drawn at the bottom.
void write_field_ppm(const std::filesystem::path& path, const FieldSnapshot& field, int channel = 0, int cell = 6,
                     double limit = 0.0);

struct PlotSeries {
  std::vector<double> x;
  std::vector<double> y;
};

// Polylines on shared auto-scaled axes, one colour per series.
void write_line_plot_ppm(const std::filesystem::path& path, const std::vector<PlotSeries>& series, int width = 640,
                         int height = 400);

}  // namespace cas
