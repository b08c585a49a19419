#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "prvql/core/tensor.hpp"

namespace prvql {

// 8-bit interleaved RGB (channels = 3) or grayscale (channels = 1) image.
struct Image {
    std::int64_t width = 0, height = 0, channels = 3;
    std::vector<std::uint8_t> pixels;

    Image() = default;
    Image(std::int64_t w, std::int64_t h, std::int64_t c = 3)
        : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w * h * c), 0) {}

    std::uint8_t* at(std::int64_t x, std::int64_t y) { return pixels.data() + (y * width + x) * channels; }
    const std::uint8_t* at(std::int64_t x, std::int64_t y) const { return pixels.data() + (y * width + x) * channels; }
    bool operator==(const Image&) const = default;
};

// Binary P6 (RGB) / P5 (grayscale), maxval 255.
void write_ppm(const std::filesystem::path& path, const Image& image);
void write_pgm(const std::filesystem::path& path, const Image& image);
// Reads P6 or P5; throws IoError / ParseError naming the file.
Image read_pnm(const std::filesystem::path& path);

// [H, W, 3] tensor scaled to [0, 1].
Tensor image_to_tensor(const Image& image, DType dtype = default_dtype());
// Stacks the selected frames into [n, H, W, 3].
Tensor frames_to_tensor(std::span<const Image> frames, std::span<const std::int64_t> indices,
                        DType dtype = default_dtype());
// Maps values in [0, 1] of a [H, W] row-major map to a grayscale image.
Image grayscale_from_unit(std::span<const double> values, std::int64_t width, std::int64_t height);

}  // namespace prvql
