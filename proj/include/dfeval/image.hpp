#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dfeval/error.hpp"

namespace dfeval {

/// Raster size in pixels.
struct Canvas {
    int height = 0;
    int width = 0;

    long long pixels() const { return static_cast<long long>(height) * width; }
    friend bool operator==(const Canvas&, const Canvas&) = default;
};

/// Interleaved 8-bit raster (row-major, channels innermost).
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<std::uint8_t> data;

    Image() = default;
    Image(int h, int w, int c, std::uint8_t fill = 0)
        : height(h), width(w), channels(c),
          data(static_cast<std::size_t>(h) * w * c, fill) {}

    Canvas canvas() const { return {height, width}; }
    bool empty() const { return data.empty(); }

    std::uint8_t& at(int y, int x, int c) {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    std::uint8_t at(int y, int x, int c) const {
        return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }

    friend bool operator==(const Image&, const Image&) = default;
};

/// Bilinear resize with half-pixel centers and edge clamping.
inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
    if (src.height == out_h && src.width == out_w) return src;
    Image out(out_h, out_w, src.channels);
    const double sy = static_cast<double>(src.height) / out_h;
    const double sx = static_cast<double>(src.width) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, src.height - 1);
        const double wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, src.width - 1);
            const double wx = fx - x0;
            for (int c = 0; c < src.channels; ++c) {
                const double v = (1 - wy) * ((1 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c)) +
                                 wy * ((1 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c));
                out.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
    }
    return out;
}

// Netpbm I/O. These are the lossless formats used for frames (P6/P5),
// region masks (P4) and heatmaps (16-bit P5).
namespace pnm {

namespace detail {

inline std::string next_token(std::istream& in) {
    std::string tok;
    char ch;
    while (in.get(ch)) {
        if (ch == '#') {
            std::string skip;
            std::getline(in, skip);
        } else if (!std::isspace(static_cast<unsigned char>(ch))) {
            tok.push_back(ch);
            break;
        }
    }
    while (in.get(ch) && !std::isspace(static_cast<unsigned char>(ch))) tok.push_back(ch);
    return tok;
}

inline int parse_positive(const std::string& tok, const std::filesystem::path& path) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(tok, &used);
        if (used != tok.size() || v <= 0) throw std::invalid_argument(tok);
        return v;
    } catch (const std::exception&) {
        throw Error(ErrorKind::UndecodableSource, "bad header field '" + tok + "' in " + path.string());
    }
}

inline std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
    return out;
}

} // namespace detail

/// Writes 1-channel images as P5 and 3-channel images as P6.
inline void write(const std::filesystem::path& path, const Image& img) {
    if (img.channels != 1 && img.channels != 3)
        throw Error(ErrorKind::ShapeError, "netpbm supports 1 or 3 channels");
    auto out = detail::open_out(path);
    out << (img.channels == 1 ? "P5" : "P6") << '\n' << img.width << ' ' << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
}

inline Image read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::UndecodableSource, "cannot open " + path.string());
    const std::string magic = detail::next_token(in);
    if (magic != "P5" && magic != "P6")
        throw Error(ErrorKind::UndecodableSource, "not a P5/P6 file: " + path.string());
    const int w = detail::parse_positive(detail::next_token(in), path);
    const int h = detail::parse_positive(detail::next_token(in), path);
    const int maxval = detail::parse_positive(detail::next_token(in), path);
    if (maxval != 255) throw Error(ErrorKind::UndecodableSource, "only 8-bit netpbm is supported: " + path.string());
    Image img(h, w, magic == "P5" ? 1 : 3);
    in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.data.size()))
        throw Error(ErrorKind::UndecodableSource, "truncated pixel data in " + path.string());
    return img;
}

/// 1-bit P4; bits is row-major, nonzero = set.
inline void write_bitmap(const std::filesystem::path& path, Canvas canvas, const std::vector<std::uint8_t>& bits) {
    auto out = detail::open_out(path);
    out << "P4\n" << canvas.width << ' ' << canvas.height << '\n';
    const int row_bytes = (canvas.width + 7) / 8;
    std::vector<char> row(static_cast<std::size_t>(row_bytes));
    for (int y = 0; y < canvas.height; ++y) {
        std::fill(row.begin(), row.end(), 0);
        for (int x = 0; x < canvas.width; ++x)
            if (bits[static_cast<std::size_t>(y) * canvas.width + x]) row[x / 8] |= static_cast<char>(0x80 >> (x % 8));
        out.write(row.data(), row_bytes);
    }
}

inline std::vector<std::uint8_t> read_bitmap(const std::filesystem::path& path, Canvas& canvas) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::UndecodableSource, "cannot open " + path.string());
    if (detail::next_token(in) != "P4") throw Error(ErrorKind::UndecodableSource, "not a P4 file: " + path.string());
    canvas.width = detail::parse_positive(detail::next_token(in), path);
    canvas.height = detail::parse_positive(detail::next_token(in), path);
    const int row_bytes = (canvas.width + 7) / 8;
    std::vector<std::uint8_t> bits(static_cast<std::size_t>(canvas.pixels()));
    std::vector<char> row(static_cast<std::size_t>(row_bytes));
    for (int y = 0; y < canvas.height; ++y) {
        in.read(row.data(), row_bytes);
        if (in.gcount() != row_bytes) throw Error(ErrorKind::UndecodableSource, "truncated bitmap " + path.string());
        for (int x = 0; x < canvas.width; ++x)
            bits[static_cast<std::size_t>(y) * canvas.width + x] = (row[x / 8] >> (7 - x % 8)) & 1;
    }
    return bits;
}

/// 16-bit grayscale P5 for values in [0,1].
inline void write_gray16(const std::filesystem::path& path, Canvas canvas, const std::vector<double>& values) {
    auto out = detail::open_out(path);
    out << "P5\n" << canvas.width << ' ' << canvas.height << "\n65535\n";
    for (double v : values) {
        const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
        const char be[2] = {static_cast<char>(q >> 8), static_cast<char>(q & 0xFF)};
        out.write(be, 2);
    }
}

} // namespace pnm

} // namespace dfeval
