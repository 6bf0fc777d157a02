#include "fedshade/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>

#include "fedshade/errors.hpp"

namespace fedshade {

namespace {
constexpr char kMagic[8] = {'F', 'S', 'H', 'D', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void write_u64(std::ostream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = (v >> (8 * i)) & 0xff;  // little endian
    os.write(reinterpret_cast<const char*>(b), 8);
}

uint64_t read_u64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(b[i]) << (8 * i);
    return v;
}
}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    nlohmann::json header;
    header["manifest"] = ckpt.manifest;
    nlohmann::json arrays = nlohmann::json::object();
    for (const auto& [name, sv] : ckpt.arrays) {
        if (ad::numel(sv.first) != static_cast<int64_t>(sv.second.size()))
            throw DataError("array " + name + " shape does not match its data");
        arrays[name] = sv.first;
    }
    header["arrays"] = arrays;
    std::string hs = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os.write(kMagic, 8);
    write_u64(os, kVersion);
    write_u64(os, hs.size());
    os.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    for (const auto& [name, sv] : ckpt.arrays) {
        for (double d : sv.second) {
            uint64_t bits;
            static_assert(sizeof(bits) == sizeof(d));
            std::memcpy(&bits, &d, 8);
            write_u64(os, bits);
        }
    }
    if (!os) throw DataError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open checkpoint " + path.string());
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0)
        throw DataError(path.string() + " is not a checkpoint archive");
    uint64_t version = read_u64(is);
    if (version != kVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    uint64_t hlen = read_u64(is);
    std::string hs(hlen, '\0');
    is.read(hs.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw DataError("truncated checkpoint header in " + path.string());
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(hs);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("corrupt checkpoint header: " + std::string(e.what()));
    }
    Checkpoint ckpt;
    ckpt.manifest = header.value("manifest", nlohmann::json::object());
    // std::map keys iterate sorted, matching the write order
    for (const auto& [name, js] : header.at("arrays").items()) {
        ad::Shape shape = js.get<ad::Shape>();
        std::vector<double> data(ad::numel(shape));
        for (double& d : data) {
            uint64_t bits = read_u64(is);
            std::memcpy(&d, &bits, 8);
        }
        if (!is) throw DataError("truncated array " + name + " in " + path.string());
        ckpt.arrays[name] = {std::move(shape), std::move(data)};
    }
    return ckpt;
}

}  // namespace fedshade
