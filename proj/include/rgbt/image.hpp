#pragma once

#include <png.h>

#include <cstdio>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "rgbt/common.hpp"
#include "rgbt/tensor.hpp"

namespace rgbt {

// Channel-major float image, values normalized to [-1, 1].
struct Image {
    int c = 0, h = 0, w = 0;
    std::vector<float> v;

    Image() = default;
    Image(int c_, int h_, int w_, float fill = 0.f) : c(c_), h(h_), w(w_), v(c_ * h_ * w_, fill) {}

    float& at(int ch, int y, int x) { return v[(ch * h + y) * w + x]; }
    float at(int ch, int y, int x) const { return v[(ch * h + y) * w + x]; }
    i64 numel() const { return static_cast<i64>(v.size()); }
};

// Raw decoded PNG: integer samples, gray or RGB, 8 or 16 bit.
struct RawPng {
    int width = 0, height = 0, channels = 0, bit_depth = 8;
    std::vector<std::uint16_t> pixels;  // interleaved, row-major
};

namespace detail {
struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
}  // namespace detail

inline RawPng read_png(const std::string& path) {
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw DataError("cannot open " + path);

    png_byte header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8)) {
        throw DataError("not a PNG file: " + path);
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DataError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw DataError("libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("undecodable PNG: " + path);
    }
    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    const int color_type = png_get_color_type(png, info);
    int bit_depth = png_get_bit_depth(png, info);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    if (color_type & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);

    RawPng out;
    out.width = static_cast<int>(png_get_image_width(png, info));
    out.height = static_cast<int>(png_get_image_height(png, info));
    out.bit_depth = png_get_bit_depth(png, info);
    out.channels = png_get_channels(png, info);
    if (out.channels != 1 && out.channels != 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError(path + ": unsupported channel count " + std::to_string(out.channels));
    }

    const size_t rowbytes = png_get_rowbytes(png, info);
    std::vector<png_byte> raw(rowbytes * out.height);
    std::vector<png_bytep> rows(out.height);
    for (int y = 0; y < out.height; ++y) rows[y] = raw.data() + y * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    const i64 n = i64(out.width) * out.height * out.channels;
    out.pixels.resize(n);
    if (out.bit_depth == 16) {
        // PNG stores 16-bit samples big-endian
        for (i64 i = 0; i < n; ++i) {
            out.pixels[i] = static_cast<std::uint16_t>((raw[2 * i] << 8) | raw[2 * i + 1]);
        }
    } else {
        for (i64 i = 0; i < n; ++i) out.pixels[i] = raw[i];
    }
    return out;
}

// Writes [0,1]-valued channel-major planes as 8- or 16-bit PNG (1 or 3 ch).
inline void write_png(const std::string& path, const Image& img01, int bit_depth = 8) {
    if (img01.c != 1 && img01.c != 3) {
        throw DataError("write_png supports 1 or 3 channels, got " + std::to_string(img01.c));
    }
    if (bit_depth != 8 && bit_depth != 16) throw DataError("write_png: bit depth must be 8 or 16");
    std::unique_ptr<std::FILE, detail::FileCloser> fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw DataError("cannot write " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (!png || !info) throw DataError("libpng init failed");
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("PNG write failed: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img01.w, img01.h, bit_depth,
                 img01.c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    const int maxv = bit_depth == 8 ? 255 : 65535;
    const int bpp = bit_depth / 8;
    std::vector<png_byte> row(i64(img01.w) * img01.c * bpp);
    for (int y = 0; y < img01.h; ++y) {
        for (int x = 0; x < img01.w; ++x) {
            for (int ch = 0; ch < img01.c; ++ch) {
                float f = img01.at(ch, y, x);
                f = std::min(1.f, std::max(0.f, f));
                const int q = static_cast<int>(std::lround(double(f) * maxv));
                if (bit_depth == 8) {
                    row[x * img01.c + ch] = static_cast<png_byte>(q);
                } else {
                    row[(x * img01.c + ch) * 2] = static_cast<png_byte>(q >> 8);
                    row[(x * img01.c + ch) * 2 + 1] = static_cast<png_byte>(q & 0xff);
                }
            }
        }
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

// Bilinear resize, pixel-center convention.
inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
    Image dst(src.c, out_h, out_w);
    const double sy = double(src.h) / out_h;
    const double sx = double(src.w) / out_w;
    for (int ch = 0; ch < src.c; ++ch) {
        for (int y = 0; y < out_h; ++y) {
            double fy = (y + 0.5) * sy - 0.5;
            fy = std::min(std::max(fy, 0.0), double(src.h - 1));
            const int y0 = static_cast<int>(fy);
            const int y1 = std::min(y0 + 1, src.h - 1);
            const double wy = fy - y0;
            for (int x = 0; x < out_w; ++x) {
                double fx = (x + 0.5) * sx - 0.5;
                fx = std::min(std::max(fx, 0.0), double(src.w - 1));
                const int x0 = static_cast<int>(fx);
                const int x1 = std::min(x0 + 1, src.w - 1);
                const double wx = fx - x0;
                const double top = src.at(ch, y0, x0) * (1 - wx) + src.at(ch, y0, x1) * wx;
                const double bot = src.at(ch, y1, x0) * (1 - wx) + src.at(ch, y1, x1) * wx;
                dst.at(ch, y, x) = static_cast<float>(top * (1 - wy) + bot * wy);
            }
        }
    }
    return dst;
}

// [-1,1] <-> [0,1]
inline Image denormalize(const Image& img) {
    Image out = img;
    for (float& f : out.v) f = 0.5f * (f + 1.f);
    return out;
}

inline Image normalize01(const Image& img01) {
    Image out = img01;
    for (float& f : out.v) f = 2.f * f - 1.f;
    return out;
}

// Rec.601 luminance of a normalized RGB image; stays in [-1, 1]. This is the
// copy-source baseline every trained model has to beat.
inline Image luminance(const Image& rgb) {
    if (rgb.c != 3) throw DataError("luminance expects 3 channels, got " + std::to_string(rgb.c));
    Image out(1, rgb.h, rgb.w);
    for (int y = 0; y < rgb.h; ++y)
        for (int x = 0; x < rgb.w; ++x) {
            out.at(0, y, x) = 0.299f * rgb.at(0, y, x) + 0.587f * rgb.at(1, y, x) +
                              0.114f * rgb.at(2, y, x);
        }
    return out;
}

inline Tensor to_tensor(const Image& img) {
    return Tensor::from_data({1, img.c, img.h, img.w}, img.v);
}

inline Image from_tensor(const Tensor& t, i64 batch_index = 0) {
    const auto& s = t.shape();
    if (s.size() != 4) throw ShapeError("from_tensor expects [N,C,H,W], got " + shape_str(s));
    Image img(static_cast<int>(s[1]), static_cast<int>(s[2]), static_cast<int>(s[3]));
    const i64 per = img.numel();
    std::copy(t.data().begin() + batch_index * per, t.data().begin() + (batch_index + 1) * per,
              img.v.begin());
    return img;
}

// Side-by-side panel grid (rows of images), normalized inputs, RGB output.
// Grayscale panels are replicated across RGB.
inline Image compose_grid(const std::vector<std::vector<Image>>& rows, int pad = 2) {
    if (rows.empty() || rows[0].empty()) throw DataError("empty image grid");
    const int ph = rows[0][0].h, pw = rows[0][0].w;
    const int ncols = static_cast<int>(rows[0].size());
    const int nrows = static_cast<int>(rows.size());
    Image grid(3, nrows * (ph + pad) + pad, ncols * (pw + pad) + pad);
    std::fill(grid.v.begin(), grid.v.end(), 1.f);  // white background, [0,1] domain
    for (int r = 0; r < nrows; ++r) {
        if (static_cast<int>(rows[r].size()) != ncols) throw DataError("ragged image grid");
        for (int cidx = 0; cidx < ncols; ++cidx) {
            const Image& p = rows[r][cidx];
            if (p.h != ph || p.w != pw) throw DataError("grid panels differ in size");
            const int oy = pad + r * (ph + pad);
            const int ox = pad + cidx * (pw + pad);
            for (int y = 0; y < ph; ++y)
                for (int x = 0; x < pw; ++x)
                    for (int ch = 0; ch < 3; ++ch) {
                        const float val = p.c == 3 ? p.at(ch, y, x) : p.at(0, y, x);
                        grid.at(ch, oy + y, ox + x) = 0.5f * (val + 1.f);
                    }
        }
    }
    return grid;  // [0,1] domain, ready for write_png
}

}  // namespace rgbt
