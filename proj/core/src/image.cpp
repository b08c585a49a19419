#include "prvql/image.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

#include "prvql/core/ops.hpp"

namespace prvql {

namespace {

void write_pnm(const std::filesystem::path& path, const Image& image, const char* magic, std::int64_t channels) {
    if (image.channels != channels)
        throw ContractError(std::string(magic) + " needs " + std::to_string(channels) + " channels");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << magic << '\n' << image.width << ' ' << image.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

std::int64_t header_int(std::istream& in, const std::string& where) {
    int c = in.get();
    while (c != EOF && (std::isspace(c) || c == '#')) {
        if (c == '#')
            while (c != EOF && c != '\n') c = in.get();
        c = in.get();
    }
    if (c == EOF || !std::isdigit(c)) throw ParseError(where + ": malformed header");
    std::int64_t value = 0;
    while (c != EOF && std::isdigit(c)) {
        value = value * 10 + (c - '0');
        if (value > 1'000'000) throw ParseError(where + ": header value too large");
        c = in.get();
    }
    if (c == EOF || !std::isspace(c)) throw ParseError(where + ": malformed header");
    return value;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Image& image) { write_pnm(path, image, "P6", 3); }
void write_pgm(const std::filesystem::path& path, const Image& image) { write_pnm(path, image, "P5", 1); }

Image read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    const std::string where = path.string();
    char magic[2];
    if (!in.read(magic, 2) || magic[0] != 'P' || (magic[1] != '6' && magic[1] != '5'))
        throw ParseError(where + ": not a binary PPM/PGM file");
    const std::int64_t channels = magic[1] == '6' ? 3 : 1;
    const auto w = header_int(in, where), h = header_int(in, where), maxval = header_int(in, where);
    if (w < 1 || h < 1) throw ParseError(where + ": empty image");
    if (maxval != 255) throw ParseError(where + ": only maxval 255 is supported");
    Image image(w, h, channels);
    if (!in.read(reinterpret_cast<char*>(image.pixels.data()), static_cast<std::streamsize>(image.pixels.size())))
        throw ParseError(where + ": truncated pixel data");
    if (in.peek() != std::char_traits<char>::eof()) throw ParseError(where + ": trailing bytes");
    return image;
}

Tensor image_to_tensor(const Image& image, DType dtype) {
    const std::int64_t idx = 0;
    return ops::reshape(frames_to_tensor(std::span<const Image>(&image, 1), std::span<const std::int64_t>(&idx, 1), dtype),
                        {image.height, image.width, 3});
}

Tensor frames_to_tensor(std::span<const Image> frames, std::span<const std::int64_t> indices, DType dtype) {
    if (indices.empty()) throw ContractError("frames_to_tensor: no frames selected");
    const Image& first = frames[static_cast<std::size_t>(indices[0])];
    const auto n = static_cast<std::int64_t>(indices.size());
    std::vector<double> values;
    values.reserve(static_cast<std::size_t>(n * first.width * first.height * 3));
    for (auto i : indices) {
        if (i < 0 || i >= static_cast<std::int64_t>(frames.size())) throw ContractError("frames_to_tensor: index out of range");
        const Image& img = frames[static_cast<std::size_t>(i)];
        if (img.width != first.width || img.height != first.height || img.channels != 3)
            throw DimensionError("frames_to_tensor: frames differ in size or are not RGB");
        for (auto p : img.pixels) values.push_back(static_cast<double>(p) / 255.0);
    }
    return Tensor::from_values({n, first.height, first.width, 3}, values, dtype);
}

Image grayscale_from_unit(std::span<const double> values, std::int64_t width, std::int64_t height) {
    if (static_cast<std::int64_t>(values.size()) != width * height) throw DimensionError("grayscale map size mismatch");
    Image img(width, height, 1);
    for (std::size_t i = 0; i < values.size(); ++i)
        img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(values[i], 0.0, 1.0) * 255.0));
    return img;
}

}  // namespace prvql
