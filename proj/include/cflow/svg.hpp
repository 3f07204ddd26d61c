#pragma once

#include "cflow/types.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace cflow {

struct SvgSeries {
    std::vector<Real> x;
    std::vector<Real> y;
    std::string label;
    std::string color;  // empty picks from a default palette
};

void write_scatter_svg(const std::filesystem::path& path, const std::vector<SvgSeries>& series,
                       const std::string& title);
void write_line_svg(const std::filesystem::path& path, const std::vector<SvgSeries>& series,
                    const std::string& title);
// One bar per value, x axis is the value index.
void write_bar_svg(const std::filesystem::path& path, const std::vector<Real>& values,
                   const std::string& title);

}  // namespace cflow
