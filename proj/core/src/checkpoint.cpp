#include "prvql/core/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_map>

namespace prvql {

namespace {

constexpr char kMagic[8] = {'P', 'R', 'V', 'Q', 'L', 'C', 'K', 'P'};

template <class U>
void put(std::ostream& out, U value) {
    unsigned char bytes[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>(value >> (8 * i));
    out.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <class U>
U get(std::istream& in, const std::string& where) {
    unsigned char bytes[sizeof(U)];
    if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw ParseError(where + ": truncated checkpoint");
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
    return value;
}

struct Entry {
    Shape shape;
    std::vector<float> values;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, std::span<const Parameter> params) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out.write(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
        out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
        put<std::uint32_t>(out, static_cast<std::uint32_t>(p.tensor.dim()));
        for (auto d : p.tensor.shape()) put<std::uint64_t>(out, static_cast<std::uint64_t>(d));
        for (double v : p.tensor.to_vector()) put<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    }
    if (!out) throw IoError("write failed: " + path.string());
}

void load_checkpoint(const std::filesystem::path& path, std::span<const Parameter> params) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint " + path.string());
    const std::string where = path.string();
    char magic[sizeof(kMagic)];
    if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw ParseError(where + ": bad magic");
    const auto version = get<std::uint32_t>(in, where);
    if (version != kCheckpointVersion) throw ParseError(where + ": unsupported version " + std::to_string(version));
    const auto count = get<std::uint32_t>(in, where);

    std::unordered_map<std::string, Entry> entries;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = get<std::uint32_t>(in, where);
        if (len > 4096) throw ParseError(where + ": implausible name length");
        std::string name(len, '\0');
        if (!in.read(name.data(), len)) throw ParseError(where + ": truncated checkpoint");
        const auto rank = get<std::uint32_t>(in, where);
        if (rank > 8) throw ParseError(where + ": implausible rank for " + name);
        Entry e;
        for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(static_cast<std::int64_t>(get<std::uint64_t>(in, where)));
        const auto n = shape_numel(e.shape);
        if (n > (std::int64_t{1} << 32)) throw ParseError(where + ": implausible size for " + name);
        e.values.resize(static_cast<std::size_t>(n));
        for (auto& v : e.values) v = std::bit_cast<float>(get<std::uint32_t>(in, where));
        if (!entries.emplace(name, std::move(e)).second) throw ParseError(where + ": duplicate entry " + name);
    }
    if (in.peek() != std::char_traits<char>::eof()) throw ParseError(where + ": trailing bytes");
    if (entries.size() != params.size())
        throw ParseError(where + ": has " + std::to_string(entries.size()) + " entries, model expects " +
                         std::to_string(params.size()));
    for (const auto& p : params) {
        auto it = entries.find(p.name);
        if (it == entries.end()) throw ParseError(where + ": missing parameter " + p.name);
        if (it->second.shape != p.tensor.shape())
            throw ParseError(where + ": shape mismatch for " + p.name + ": " + shape_str(it->second.shape) + " vs " +
                             shape_str(p.tensor.shape()));
    }
    for (const auto& p : params) {
        const auto& values = entries.at(p.name).values;
        Tensor t = p.tensor;
        visit_dtype(t.dtype(), [&]<typename T>() {
            T* dst = t.mutable_data<T>();
            for (std::size_t i = 0; i < values.size(); ++i) dst[i] = static_cast<T>(values[i]);
        });
    }
}

}  // namespace prvql
