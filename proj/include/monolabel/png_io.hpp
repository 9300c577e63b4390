#pragma once

// Minimal libpng wrappers: 8/16-bit gray and 8-bit RGB. Output is
// byte-deterministic (no timestamps, fixed compression settings).

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <png.h>

#include "monolabel/errors.hpp"
#include "monolabel/grid.hpp"

namespace monolabel {

struct PngPixels {
    int width = 0;
    int height = 0;
    int channels = 0;   ///< 1 gray, 2 gray+alpha, 3 RGB, 4 RGBA
    int bit_depth = 0;  ///< 8 or 16
    std::vector<std::uint16_t> samples;  ///< row-major, interleaved channels
};

namespace detail {

struct FileCloser {
    std::FILE* f;
    ~FileCloser() {
        if (f) std::fclose(f);
    }
};

// libpng reports errors by longjmp; nothing with a destructor lives in the
// frames it jumps over.
inline bool png_read_raw(std::FILE* fp, PngPixels& out, std::vector<png_bytep>& rows, std::vector<png_byte>& buffer,
                         std::string& error) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) {
        error = "out of memory";
        return false;
    }
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        error = "corrupt PNG data";
        return false;
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    const png_uint_32 w = png_get_image_width(png, info);
    const png_uint_32 h = png_get_image_height(png, info);
    const int depth = png_get_bit_depth(png, info);
    const int type = png_get_color_type(png, info);
    if (type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (type == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_read_update_info(png, info);
    out.width = static_cast<int>(w);
    out.height = static_cast<int>(h);
    out.channels = png_get_channels(png, info);
    out.bit_depth = png_get_bit_depth(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    buffer.resize(stride * h);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) rows[y] = buffer.data() + y * stride;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return true;
}

inline bool png_write_raw(std::FILE* fp, int width, int height, int channels, int bit_depth,
                          std::vector<png_bytep>& rows, std::string& error) {
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) {
        error = "out of memory";
        return false;
    }
    png_infop info = png_create_info_struct(png);
    if (!info || setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, info ? &info : nullptr);
        error = "libpng write failure";
        return false;
    }
    png_init_io(png, fp);
    const int type = channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), bit_depth, type,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_set_compression_level(png, 6);
    png_write_info(png, info);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return true;
}

inline void write_png_bytes(const std::filesystem::path& path, int width, int height, int channels, int bit_depth,
                            std::vector<png_byte>& buffer) {
    if (width <= 0 || height <= 0) throw IoError(path.string() + ": cannot write an empty image");
    FileCloser file{std::fopen(path.string().c_str(), "wb")};
    if (!file.f) throw IoError("cannot write " + path.string());
    const std::size_t stride = static_cast<std::size_t>(width) * channels * (bit_depth / 8);
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y) rows[static_cast<std::size_t>(y)] = buffer.data() + y * stride;
    std::string error;
    if (!png_write_raw(file.f, width, height, channels, bit_depth, rows, error)) {
        throw IoError(path.string() + ": " + error);
    }
}

}  // namespace detail

inline PngPixels read_png(const std::filesystem::path& path) {
    detail::FileCloser file{std::fopen(path.string().c_str(), "rb")};
    if (!file.f) throw IoError("cannot open " + path.string());
    png_byte sig[8];
    if (std::fread(sig, 1, 8, file.f) != 8 || png_sig_cmp(sig, 0, 8) != 0) throw IoError(path.string() + ": not a PNG file");
    std::rewind(file.f);
    PngPixels out;
    std::vector<png_bytep> rows;
    std::vector<png_byte> buffer;
    std::string error;
    if (!detail::png_read_raw(file.f, out, rows, buffer, error)) throw IoError(path.string() + ": " + error);
    const std::size_t n = static_cast<std::size_t>(out.width) * out.height * out.channels;
    out.samples.resize(n);
    if (out.bit_depth == 16) {
        for (std::size_t i = 0; i < n; ++i) out.samples[i] = static_cast<std::uint16_t>((buffer[2 * i] << 8) | buffer[2 * i + 1]);
    } else {
        for (std::size_t i = 0; i < n; ++i) out.samples[i] = buffer[i];
    }
    return out;
}

inline Grid<std::uint16_t> read_png_gray16(const std::filesystem::path& path) {
    const PngPixels p = read_png(path);
    if (p.channels != 1 || p.bit_depth != 16) {
        throw IoError(path.string() + ": bit-depth mismatch, expected 16-bit single-channel PNG (got " +
                      std::to_string(p.bit_depth) + "-bit, " + std::to_string(p.channels) + " channel(s))");
    }
    Grid<std::uint16_t> g(p.width, p.height);
    std::copy(p.samples.begin(), p.samples.end(), g.data());
    return g;
}

inline Grid<std::uint8_t> read_png_gray8(const std::filesystem::path& path) {
    const PngPixels p = read_png(path);
    if (p.channels != 1 || p.bit_depth != 8) {
        throw IoError(path.string() + ": bit-depth mismatch, expected 8-bit single-channel PNG (got " +
                      std::to_string(p.bit_depth) + "-bit, " + std::to_string(p.channels) + " channel(s))");
    }
    Grid<std::uint8_t> g(p.width, p.height);
    for (std::size_t i = 0; i < p.samples.size(); ++i) g.data()[i] = static_cast<std::uint8_t>(p.samples[i]);
    return g;
}

/// Any gray/RGB(A) PNG as luma in [0, 1].
inline Image read_png_intensity(const std::filesystem::path& path) {
    const PngPixels p = read_png(path);
    const double scale = p.bit_depth == 16 ? 65535.0 : 255.0;
    Image img(p.width, p.height);
    const std::size_t n = static_cast<std::size_t>(p.width) * p.height;
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint16_t* s = p.samples.data() + i * p.channels;
        double v;
        if (p.channels >= 3) v = 0.299 * s[0] + 0.587 * s[1] + 0.114 * s[2];
        else v = s[0];
        img.data()[i] = static_cast<float>(v / scale);
    }
    return img;
}

inline void write_png_gray8(const std::filesystem::path& path, const Grid<std::uint8_t>& g) {
    std::vector<png_byte> buffer(g.data(), g.data() + g.size());
    detail::write_png_bytes(path, g.width(), g.height(), 1, 8, buffer);
}

inline void write_png_gray16(const std::filesystem::path& path, const Grid<std::uint16_t>& g) {
    std::vector<png_byte> buffer(2 * g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        buffer[2 * i] = static_cast<png_byte>(g.data()[i] >> 8);
        buffer[2 * i + 1] = static_cast<png_byte>(g.data()[i] & 0xff);
    }
    detail::write_png_bytes(path, g.width(), g.height(), 1, 16, buffer);
}

struct Rgb {
    std::uint8_t r = 0, g = 0, b = 0;
    bool operator==(const Rgb&) const = default;
};

inline void write_png_rgb8(const std::filesystem::path& path, const Grid<Rgb>& g) {
    std::vector<png_byte> buffer(3 * g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        buffer[3 * i] = g.data()[i].r;
        buffer[3 * i + 1] = g.data()[i].g;
        buffer[3 * i + 2] = g.data()[i].b;
    }
    detail::write_png_bytes(path, g.width(), g.height(), 3, 8, buffer);
}

/// Intensity image in [0, 1] as 8-bit gray (values clamped).
inline void write_png_intensity(const std::filesystem::path& path, const Image& img) {
    Grid<std::uint8_t> g(img.width(), img.height());
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double v = std::clamp(static_cast<double>(img.data()[i]), 0.0, 1.0);
        g.data()[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
    write_png_gray8(path, g);
}

}  // namespace monolabel
