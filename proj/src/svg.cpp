#include "cflow/svg.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>

namespace cflow {

namespace {

constexpr int kWidth = 640;
constexpr int kHeight = 480;
constexpr int kLeft = 56;
constexpr int kRight = 16;
constexpr int kTop = 36;
constexpr int kBottom = 40;

const char* kPalette[] = {"#4878cf", "#e1812c", "#3a923a", "#c03d3e", "#8172b2", "#937860"};

struct Bounds {
    Real xmin = std::numeric_limits<Real>::max();
    Real xmax = std::numeric_limits<Real>::lowest();
    Real ymin = std::numeric_limits<Real>::max();
    Real ymax = std::numeric_limits<Real>::lowest();

    void include(Real x, Real y) {
        xmin = std::min(xmin, x);
        xmax = std::max(xmax, x);
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
    }

    void finalize() {
        if (xmin > xmax) {
            xmin = 0;
            xmax = 1;
            ymin = 0;
            ymax = 1;
        }
        const Real xpad = (xmax - xmin) * 0.05 + 1e-9;
        const Real ypad = (ymax - ymin) * 0.05 + 1e-9;
        xmin -= xpad;
        xmax += xpad;
        ymin -= ypad;
        ymax += ypad;
    }

    Real px(Real x) const {
        return kLeft + (x - xmin) / (xmax - xmin) * (kWidth - kLeft - kRight);
    }
    Real py(Real y) const {
        return kHeight - kBottom - (y - ymin) / (ymax - ymin) * (kHeight - kTop - kBottom);
    }
};

std::string num(Real v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '&')
            out += "&amp;";
        else if (c == '<')
            out += "&lt;";
        else if (c == '>')
            out += "&gt;";
        else
            out += c;
    }
    return out;
}

void open_svg(std::ofstream& os, const std::string& title, const Bounds& b) {
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\""
       << kHeight << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\">\n";
    os << "<rect width=\"" << kWidth << "\" height=\"" << kHeight << "\" fill=\"white\"/>\n";
    os << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" "
          "font-size=\"15\">"
       << escape(title) << "</text>\n";
    // axes
    os << "<line x1=\"" << kLeft << "\" y1=\"" << kHeight - kBottom << "\" x2=\"" << kWidth - kRight
       << "\" y2=\"" << kHeight - kBottom << "\" stroke=\"#444\"/>\n";
    os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\""
       << kHeight - kBottom << "\" stroke=\"#444\"/>\n";
    os << "<text x=\"" << kLeft << "\" y=\"" << kHeight - kBottom + 16
       << "\" font-family=\"sans-serif\" font-size=\"11\">" << num(b.xmin) << "</text>\n";
    os << "<text x=\"" << kWidth - kRight << "\" y=\"" << kHeight - kBottom + 16
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << num(b.xmax)
       << "</text>\n";
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << kHeight - kBottom
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << num(b.ymin)
       << "</text>\n";
    os << "<text x=\"" << kLeft - 6 << "\" y=\"" << kTop + 4
       << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" << num(b.ymax)
       << "</text>\n";
}

void legend(std::ofstream& os, const std::vector<SvgSeries>& series) {
    int at = 0;
    for (std::size_t s = 0; s < series.size(); ++s) {
        if (series[s].label.empty()) continue;
        const char* color =
            series[s].color.empty() ? kPalette[s % 6] : series[s].color.c_str();
        const int y = kTop + 14 + 16 * at++;
        os << "<rect x=\"" << kWidth - kRight - 130 << "\" y=\"" << y - 9
           << "\" width=\"10\" height=\"10\" fill=\"" << color << "\"/>\n";
        os << "<text x=\"" << kWidth - kRight - 116 << "\" y=\"" << y
           << "\" font-family=\"sans-serif\" font-size=\"11\">" << escape(series[s].label)
           << "</text>\n";
    }
}

std::ofstream open_file(const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) throw ConfigError("svg: cannot open " + path.string() + " for writing");
    return os;
}

Bounds series_bounds(const std::vector<SvgSeries>& series) {
    Bounds b;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) b.include(s.x[i], s.y[i]);
    b.finalize();
    return b;
}

}  // namespace

void write_scatter_svg(const std::filesystem::path& path, const std::vector<SvgSeries>& series,
                       const std::string& title) {
    auto os = open_file(path);
    const Bounds b = series_bounds(series);
    open_svg(os, title, b);
    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = series[s].color.empty() ? kPalette[s % 6] : series[s].color.c_str();
        for (std::size_t i = 0; i < series[s].x.size(); ++i)
            os << "<circle cx=\"" << num(b.px(series[s].x[i])) << "\" cy=\""
               << num(b.py(series[s].y[i])) << "\" r=\"1.8\" fill=\"" << color
               << "\" fill-opacity=\"0.6\"/>\n";
    }
    legend(os, series);
    os << "</svg>\n";
}

void write_line_svg(const std::filesystem::path& path, const std::vector<SvgSeries>& series,
                    const std::string& title) {
    auto os = open_file(path);
    const Bounds b = series_bounds(series);
    open_svg(os, title, b);
    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = series[s].color.empty() ? kPalette[s % 6] : series[s].color.c_str();
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.6\" points=\"";
        for (std::size_t i = 0; i < series[s].x.size(); ++i)
            os << num(b.px(series[s].x[i])) << "," << num(b.py(series[s].y[i])) << " ";
        os << "\"/>\n";
        for (std::size_t i = 0; i < series[s].x.size(); ++i)
            os << "<circle cx=\"" << num(b.px(series[s].x[i])) << "\" cy=\""
               << num(b.py(series[s].y[i])) << "\" r=\"2.4\" fill=\"" << color << "\"/>\n";
    }
    legend(os, series);
    os << "</svg>\n";
}

void write_bar_svg(const std::filesystem::path& path, const std::vector<Real>& values,
                   const std::string& title) {
    auto os = open_file(path);
    Bounds b;
    b.include(0, 0);
    for (std::size_t i = 0; i < values.size(); ++i)
        b.include(static_cast<Real>(i + 1), values[i]);
    b.finalize();
    open_svg(os, title, b);
    const Real w =
        values.empty() ? 1.0
                       : std::max(1.0, (kWidth - kLeft - kRight) / static_cast<Real>(values.size()) - 1.0);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const Real x = b.px(static_cast<Real>(i));
        const Real y = b.py(std::max(0.0, values[i]));
        const Real y0 = b.py(0.0);
        os << "<rect x=\"" << num(x) << "\" y=\"" << num(std::min(y, y0)) << "\" width=\"" << num(w)
           << "\" height=\"" << num(std::abs(y0 - y)) << "\" fill=\"" << kPalette[0] << "\"/>\n";
    }
    os << "</svg>\n";
}

}  // namespace cflow
