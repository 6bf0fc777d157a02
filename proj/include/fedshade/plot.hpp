#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fedshade/tensor.hpp"

namespace fedshade {

struct LineSeries {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;  // NaN entries are skipped
};

// Renders a line chart into an RGB tensor [3,H,W]; axes autoscale over the
// finite points of all series.
ad::Tensor render_line_plot(const std::vector<LineSeries>& series, int64_t width = 360,
                            int64_t height = 240);

void write_line_plot(const std::filesystem::path& file, const std::vector<LineSeries>& series,
                     int64_t width = 360, int64_t height = 240);

// Grid of equally sized [C,H,W] tiles with a 2-pixel gutter; empty cells stay
// dark. rows x cols layout follows the nesting of the argument.
ad::Tensor render_contact_sheet(const std::vector<std::vector<ad::Tensor>>& rows);

void write_contact_sheet(const std::filesystem::path& file,
                         const std::vector<std::vector<ad::Tensor>>& rows);

}  // namespace fedshade
