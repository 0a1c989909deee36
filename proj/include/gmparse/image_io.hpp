#pragma once

#include <fstream>

#include "gmparse/tensor.hpp"

// Binary PGM (P5) / PPM (P6) round trip. Sample values live in [-1, 1] and
// quantize as byte = round((v+1)/2 * 255); decode inverts exactly on the byte
// lattice, so encode-decode is lossless for 8-bit payloads.

namespace gmparse {

inline unsigned char to_byte(double v) {
    const double b = std::lround((std::clamp(v, -1.0, 1.0) + 1.0) / 2.0 * 255.0);
    return static_cast<unsigned char>(b);
}
inline double from_byte(unsigned char b) { return double(b) / 255.0 * 2.0 - 1.0; }

// image: [C, H, W] with C == 1 (PGM) or C == 3 (PPM).
template <class T>
void write_image(const std::string& path, const TensorND<T>& image) {
    if (image.shape.size() != 3 || (image.shape[0] != 1 && image.shape[0] != 3))
        throw ShapeError("write_image: need [1,H,W] or [3,H,W], got " + shape_str(image.shape));
    const int c = image.shape[0], h = image.shape[1], w = image.shape[2];
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open image for writing: " + path);
    f << (c == 1 ? "P5" : "P6") << "\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(std::size_t(w) * c);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch)
                row[std::size_t(x) * c + ch] = to_byte(double(image.data[(std::size_t(ch) * h + y) * w + x]));
        f.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    }
    if (!f) throw IoError("short write to image: " + path);
}

template <class T = float>
TensorND<T> read_image(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open image: " + path);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    f >> magic >> w >> h >> maxval;
    if ((magic != "P5" && magic != "P6") || w <= 0 || h <= 0 || maxval != 255)
        throw IoError("unsupported image header in " + path);
    f.get();  // single whitespace after maxval
    const int c = magic == "P5" ? 1 : 3;
    std::vector<unsigned char> raw(std::size_t(w) * h * c);
    f.read(reinterpret_cast<char*>(raw.data()), std::streamsize(raw.size()));
    if (std::size_t(f.gcount()) != raw.size()) throw IoError("truncated image payload in " + path);
    TensorND<T> img(Shape{c, h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int ch = 0; ch < c; ++ch)
                img.data[(std::size_t(ch) * h + y) * w + x] = T(from_byte(raw[(std::size_t(y) * w + x) * c + ch]));
    return img;
}

// Grayscale export of values already in [0, 1] (heatmaps, spectra).
template <class T>
void write_pgm_unit(const std::string& path, const TensorND<T>& image) {
    if (image.shape.size() != 2) throw ShapeError("write_pgm_unit: need [H,W], got " + shape_str(image.shape));
    const int h = image.shape[0], w = image.shape[1];
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open image for writing: " + path);
    f << "P5\n" << w << " " << h << "\n255\n";
    for (T v : image.data) {
        const auto b = static_cast<unsigned char>(std::lround(std::clamp(double(v), 0.0, 1.0) * 255.0));
        f.write(reinterpret_cast<const char*>(&b), 1);
    }
}

}  // namespace gmparse
