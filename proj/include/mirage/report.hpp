#pragma once

// CSV tables and small PNG plots (heatmaps, line charts).

#include "mirage/core.hpp"
#include "mirage/feature_store.hpp"
#include "mirage/scoring.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

namespace mirage {

/// Header row `corner,col_0,...`, then one line per row labelled `row_prefix + i`.
inline std::string matrix_csv(const Matrix& m, const std::string& corner, const std::string& row_prefix,
                              const std::string& col_prefix)
{
    std::string out = corner;
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
        out += "," + col_prefix + std::to_string(c);
    }
    out += "\n";
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        out += row_prefix + std::to_string(r);
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            out += "," + format_double(m(r, c));
        }
        out += "\n";
    }
    return out;
}

/// 8-bit RGB raster.
struct Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> rgb;

    Image(int w, int h, std::array<std::uint8_t, 3> fill = {255, 255, 255})
        : width(w), height(h), rgb(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3)
    {
        for (std::size_t i = 0; i < rgb.size(); i += 3) {
            std::copy(fill.begin(), fill.end(), rgb.begin() + static_cast<std::ptrdiff_t>(i));
        }
    }

    void set(int x, int y, std::array<std::uint8_t, 3> c)
    {
        if (x < 0 || y < 0 || x >= width || y >= height) {
            return;
        }
        const std::size_t at = (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) + static_cast<std::size_t>(x)) * 3;
        std::copy(c.begin(), c.end(), rgb.begin() + static_cast<std::ptrdiff_t>(at));
    }

    void fill_rect(int x0, int y0, int w, int h, std::array<std::uint8_t, 3> c)
    {
        for (int y = y0; y < y0 + h; ++y) {
            for (int x = x0; x < x0 + w; ++x) {
                set(x, y, c);
            }
        }
    }

    void line(int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> c)
    {
        const int dx = std::abs(x1 - x0);
        const int dy = -std::abs(y1 - y0);
        const int sx = x0 < x1 ? 1 : -1;
        const int sy = y0 < y1 ? 1 : -1;
        int err = dx + dy;
        while (true) {
            set(x0, y0, c);
            if (x0 == x1 && y0 == y1) {
                break;
            }
            const int e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x0 += sx;
            }
            if (e2 <= dx) {
                err += dx;
                y0 += sy;
            }
        }
    }
};

namespace detail {

inline void put_be32(std::string& out, std::uint32_t v)
{
    for (int shift = 24; shift >= 0; shift -= 8) {
        out.push_back(static_cast<char>((v >> shift) & 0xffu));
    }
}

inline void put_chunk(std::string& out, const char* type, const std::string& payload)
{
    put_be32(out, static_cast<std::uint32_t>(payload.size()));
    const std::string body = std::string(type, 4) + payload;
    out += body;
    put_be32(out, static_cast<std::uint32_t>(
                      crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

}  // namespace detail

inline std::string encode_png(const Image& img)
{
    std::string raw;
    raw.reserve(img.rgb.size() + static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y) {
        raw.push_back('\0');
        const auto* row = img.rgb.data() + static_cast<std::size_t>(y) * static_cast<std::size_t>(img.width) * 3;
        raw.append(reinterpret_cast<const char*>(row), static_cast<std::size_t>(img.width) * 3);
    }
    uLongf packed_size = compressBound(static_cast<uLong>(raw.size()));
    std::string packed(packed_size, '\0');
    if (compress2(reinterpret_cast<Bytef*>(packed.data()), &packed_size, reinterpret_cast<const Bytef*>(raw.data()),
                  static_cast<uLong>(raw.size()), 9) != Z_OK) {
        throw IoError("PNG compression failed");
    }
    packed.resize(packed_size);

    std::string out = "\x89PNG\r\n\x1a\n";
    std::string header;
    detail::put_be32(header, static_cast<std::uint32_t>(img.width));
    detail::put_be32(header, static_cast<std::uint32_t>(img.height));
    header += std::string("\x08\x02\x00\x00\x00", 5);  // 8-bit RGB, no interlace
    detail::put_chunk(out, "IHDR", header);
    detail::put_chunk(out, "IDAT", packed);
    detail::put_chunk(out, "IEND", "");
    return out;
}

inline void write_png(const Image& img, const std::filesystem::path& path) { detail::write_file(path, encode_png(img)); }

/// Dark blue -> teal -> yellow ramp for t in [0, 1].
inline std::array<std::uint8_t, 3> colormap(double t)
{
    static constexpr std::array<std::array<double, 3>, 5> stops{{{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98}, {253, 231, 37}}};
    t = std::clamp(std::isfinite(t) ? t : 0.0, 0.0, 1.0) * static_cast<double>(stops.size() - 1);
    const auto i = std::min(static_cast<std::size_t>(t), stops.size() - 2);
    const double f = t - static_cast<double>(i);
    std::array<std::uint8_t, 3> c{};
    for (std::size_t k = 0; k < 3; ++k) {
        c[k] = static_cast<std::uint8_t>(std::lround(stops[i][k] + f * (stops[i + 1][k] - stops[i][k])));
    }
    return c;
}

/// One cell per entry, rows top to bottom, min..max mapped onto the ramp.
inline Image heatmap(const Matrix& m, int cell = 12)
{
    if (m.size() == 0) {
        throw ValidationError("cannot draw an empty matrix");
    }
    const double lo = m.minCoeff();
    const double hi = m.maxCoeff();
    const double span = hi > lo ? hi - lo : 1.0;
    Image img(static_cast<int>(m.cols()) * cell, static_cast<int>(m.rows()) * cell);
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            img.fill_rect(static_cast<int>(c) * cell, static_cast<int>(r) * cell, cell, cell, colormap((m(r, c) - lo) / span));
        }
    }
    return img;
}

/// Polyline of (x, y) points with marked vertices on a framed canvas.
inline Image line_plot(const std::vector<double>& xs, const std::vector<double>& ys, int width = 480, int height = 320)
{
    if (xs.size() != ys.size() || xs.empty()) {
        throw ValidationError("line plot needs matching, non-empty x and y");
    }
    const int margin = 24;
    Image img(width, height);
    const std::array<std::uint8_t, 3> axis{0, 0, 0};
    const std::array<std::uint8_t, 3> ink{33, 102, 172};
    img.line(margin, height - margin, width - margin, height - margin, axis);
    img.line(margin, margin, margin, height - margin, axis);
    const auto [xlo, xhi] = std::minmax_element(xs.begin(), xs.end());
    const auto [ylo, yhi] = std::minmax_element(ys.begin(), ys.end());
    const double xspan = *xhi > *xlo ? *xhi - *xlo : 1.0;
    const double yspan = *yhi > *ylo ? *yhi - *ylo : 1.0;
    auto px = [&](double x) { return margin + static_cast<int>(std::lround((x - *xlo) / xspan * (width - 2 * margin))); };
    auto py = [&](double y) { return height - margin - static_cast<int>(std::lround((y - *ylo) / yspan * (height - 2 * margin))); };
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i > 0) {
            img.line(px(xs[i - 1]), py(ys[i - 1]), px(xs[i]), py(ys[i]), ink);
        }
        img.fill_rect(px(xs[i]) - 2, py(ys[i]) - 2, 5, 5, ink);
    }
    return img;
}

/// Vertical bars, one per value, on a common zero baseline.
inline Image bar_chart(const std::vector<double>& values, int width = 480, int height = 320)
{
    if (values.empty()) {
        throw ValidationError("bar chart needs values");
    }
    const int margin = 24;
    Image img(width, height);
    const double hi = std::max(*std::max_element(values.begin(), values.end()), 0.0);
    const double lo = std::min(*std::min_element(values.begin(), values.end()), 0.0);
    const double span = hi > lo ? hi - lo : 1.0;
    const int plot_h = height - 2 * margin;
    const int base = margin + static_cast<int>(std::lround(hi / span * plot_h));
    const int bar_w = std::max(1, (width - 2 * margin) / static_cast<int>(values.size()));
    for (std::size_t i = 0; i < values.size(); ++i) {
        const int h = static_cast<int>(std::lround(std::fabs(values[i]) / span * plot_h));
        const int x = margin + static_cast<int>(i) * bar_w;
        img.fill_rect(x, values[i] >= 0 ? base - h : base, std::max(1, bar_w - 1), h, {33, 102, 172});
    }
    img.line(margin, base, width - margin, base, {0, 0, 0});
    return img;
}

}  // namespace mirage
