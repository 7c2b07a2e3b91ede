#include "diver/checkpoint.hpp"

#include <cstdint>
#include <fstream>
#include <unordered_map>

namespace diver {

namespace {

constexpr char kMagic[4] = {'D', 'C', 'P', '1'};
constexpr uint32_t kVersion = 1;
constexpr uint8_t kDtypeF64 = 0;
constexpr uint8_t kDtypeF32 = 1;

template <typename T>
void write_le(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw CheckpointError("DCP: truncated file");
    return v;
}

void write_string(std::ostream& os, const std::string& s) {
    write_le<uint64_t>(os, s.size());
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& is) {
    uint64_t n = read_le<uint64_t>(is);
    std::string s(n, '\0');
    is.read(s.data(), static_cast<std::streamsize>(n));
    if (!is) throw CheckpointError("DCP: truncated string");
    return s;
}

}  // namespace

void save_checkpoint(const std::string& path, const std::string& config_text,
                     const std::vector<NamedParam>& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw CheckpointError("DCP: cannot open for writing: " + path);
    os.write(kMagic, 4);
    write_le<uint32_t>(os, kVersion);
    write_string(os, config_text);
    write_le<uint64_t>(os, params.size());
    for (const auto& p : params) {
        write_string(os, p.name);
        write_le<uint8_t>(os, kDtypeF64);
        const Shape& sh = p.tensor.shape();
        write_le<uint8_t>(os, static_cast<uint8_t>(sh.size()));
        for (int d : sh) write_le<uint64_t>(os, static_cast<uint64_t>(d));
        for (double v : p.tensor.data()) write_le<double>(os, v);
    }
    if (!os) throw CheckpointError("DCP: write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw CheckpointError("DCP: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != std::string(kMagic, 4))
        throw CheckpointError("DCP: bad magic in " + path);
    uint32_t version = read_le<uint32_t>(is);
    if (version != kVersion)
        throw CheckpointError("DCP: unsupported version " + std::to_string(version));

    Checkpoint ckpt;
    ckpt.config_text = read_string(is);
    uint64_t count = read_le<uint64_t>(is);
    for (uint64_t i = 0; i < count; ++i) {
        std::string name = read_string(is);
        uint8_t dtype = read_le<uint8_t>(is);
        if (dtype != kDtypeF64 && dtype != kDtypeF32)
            throw CheckpointError("DCP: unknown dtype tag for '" + name + "'");
        uint8_t rank = read_le<uint8_t>(is);
        Shape sh(rank);
        for (auto& d : sh) d = static_cast<int>(read_le<uint64_t>(is));
        std::vector<double> data(shape_numel(sh));
        for (double& v : data)
            v = dtype == kDtypeF64 ? read_le<double>(is)
                                   : static_cast<double>(read_le<float>(is));
        ckpt.entries.emplace_back(name, Tensor::from_vector(std::move(data), sh));
    }
    return ckpt;
}

void load_into(const Checkpoint& ckpt, const std::vector<NamedParam>& params) {
    std::unordered_map<std::string, const Tensor*> by_name;
    for (const auto& [name, t] : ckpt.entries) by_name[name] = &t;
    for (const auto& p : params) {
        auto it = by_name.find(p.name);
        if (it == by_name.end())
            throw CheckpointError("DCP: missing parameter '" + p.name + "'");
        if (it->second->shape() != p.tensor.shape())
            throw CheckpointError("DCP: shape mismatch for '" + p.name + "': " +
                                  shape_str(it->second->shape()) + " vs " +
                                  shape_str(p.tensor.shape()));
        const_cast<Tensor&>(p.tensor).mutable_data() = it->second->data();
    }
}

}  // namespace diver
