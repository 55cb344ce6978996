#pragma once

#include <agp/error.hpp>
#include <agp/tensor.hpp>

#include <png.h>
// jpeglib.h needs FILE/size_t declared first
#include <cstdio>
#include <jpeglib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace agp {

/// Decoded 8-bit raster, 1 to 4 channels.
struct Raster8 {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<std::uint8_t> data;
};

namespace detail {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& path, const char* mode) {
    FilePtr f(std::fopen(path.string().c_str(), mode));
    require(f != nullptr, ErrorKind::io, "cannot open " + path.string());
    return f;
}

inline Raster8 read_png8(const std::filesystem::path& path) {
    auto file = open_file(path, "rb");
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    require(png != nullptr, ErrorKind::io, "png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        fail(ErrorKind::io, "png_create_info_struct failed");
    }
    Raster8 out;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        fail(ErrorKind::io, "corrupt PNG " + path.string());
    }
    png_init_io(png, file.get());
    png_read_info(png, info);
    const auto color = png_get_color_type(png, info);
    const auto depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_read_update_info(png, info);
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.channels = png_get_channels(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    out.data.resize(stride * out.height);
    rows.resize(out.height);
    for (int y = 0; y < out.height; ++y) rows[y] = out.data.data() + stride * y;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return out;
}

struct JpegErrorManager {
    jpeg_error_mgr base;
    std::jmp_buf jump;
};

inline void jpeg_error_exit(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegErrorManager*>(cinfo->err);
    std::longjmp(err->jump, 1);
}

inline Raster8 read_jpeg8(const std::filesystem::path& path) {
    auto file = open_file(path, "rb");
    jpeg_decompress_struct cinfo{};
    JpegErrorManager err{};
    cinfo.err = jpeg_std_error(&err.base);
    err.base.error_exit = jpeg_error_exit;
    Raster8 out;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        fail(ErrorKind::io, "corrupt JPEG " + path.string());
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, file.get());
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = cinfo.num_components == 1 ? JCS_GRAYSCALE : JCS_RGB;
    jpeg_start_decompress(&cinfo);
    out.width = static_cast<int>(cinfo.output_width);
    out.height = static_cast<int>(cinfo.output_height);
    out.channels = cinfo.output_components;
    out.data.resize(static_cast<std::size_t>(out.width) * out.height * out.channels);
    while (cinfo.output_scanline < cinfo.output_height) {
        JSAMPROW row = out.data.data() + static_cast<std::size_t>(cinfo.output_scanline) * out.width * out.channels;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return out;
}

inline bool has_extension(const std::filesystem::path& p, std::initializer_list<const char*> exts) {
    std::string e = p.extension().string();
    std::transform(e.begin(), e.end(), e.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return std::any_of(exts.begin(), exts.end(), [&](const char* x) { return e == x; });
}

} // namespace detail

inline Raster8 read_raster(const std::filesystem::path& path) {
    if (detail::has_extension(path, {".jpg", ".jpeg"})) return detail::read_jpeg8(path);
    return detail::read_png8(path);
}

/// Decodes an image as RGB reals in [0,1] (value / 255). Gray inputs are
/// replicated across channels, alpha is dropped.
inline Image read_image_rgb(const std::filesystem::path& path) {
    const Raster8 r = read_raster(path);
    Image img(r.height, r.width, 3);
    for (int y = 0; y < r.height; ++y)
        for (int x = 0; x < r.width; ++x)
            for (int c = 0; c < 3; ++c) {
                const int src_c = r.channels >= 3 ? c : 0;
                img.at(y, x, c) = r.data[(static_cast<std::size_t>(y) * r.width + x) * r.channels + src_c] / 255.0;
            }
    return img;
}

/// Reads a mask: any nonzero sample in the first channel marks an anomalous pixel.
inline BinaryMask read_mask(const std::filesystem::path& path) {
    const Raster8 r = read_raster(path);
    BinaryMask m(r.height, r.width);
    for (int y = 0; y < r.height; ++y)
        for (int x = 0; x < r.width; ++x)
            m.at(y, x) = r.data[(static_cast<std::size_t>(y) * r.width + x) * r.channels] != 0 ? 1 : 0;
    return m;
}

inline void write_png8(const std::filesystem::path& path, const Raster8& r) {
    require(r.channels == 1 || r.channels == 3 || r.channels == 4, ErrorKind::io, "unsupported channel count");
    auto file = detail::open_file(path, "wb");
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    require(png != nullptr, ErrorKind::io, "png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        fail(ErrorKind::io, "png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        fail(ErrorKind::io, "PNG write failed for " + path.string());
    }
    png_init_io(png, file.get());
    const int color = r.channels == 1 ? PNG_COLOR_TYPE_GRAY : (r.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_RGBA);
    png_set_IHDR(png, info, r.width, r.height, 8, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t stride = static_cast<std::size_t>(r.width) * r.channels;
    for (int y = 0; y < r.height; ++y) png_write_row(png, const_cast<png_bytep>(r.data.data() + stride * y));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

inline std::uint8_t to_byte(double v) {
    return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline void write_image_png(const std::filesystem::path& path, const Image& img) {
    Raster8 r{img.height, img.width, img.channels, {}};
    r.data.resize(img.data.size());
    std::transform(img.data.begin(), img.data.end(), r.data.begin(), to_byte);
    write_png8(path, r);
}

inline void write_mask_png(const std::filesystem::path& path, const BinaryMask& m) {
    Raster8 r{m.height, m.width, 1, {}};
    r.data.resize(m.data.size());
    std::transform(m.data.begin(), m.data.end(), r.data.begin(), [](auto v) { return v ? 255 : 0; });
    write_png8(path, r);
}

} // namespace agp
