#include "minipost/checkpoint.hpp"

#include <bit>
#include <fstream>

namespace minipost {

static_assert(std::endian::native == std::endian::little,
              "checkpoint serialization assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'M', 'P', 'O', 'S', 'T', 'C', 'K', 'P'};

template <typename T>
void write_pod(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) {
        throw std::runtime_error("checkpoint: truncated file");
    }
    return v;
}

void write_bytes(std::ostream& os, const void* data, std::size_t n) {
    os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n));
}

void read_bytes(std::istream& is, void* data, std::size_t n) {
    is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n));
    if (!is) {
        throw std::runtime_error("checkpoint: truncated file");
    }
}

}  // namespace

const TensorBlob* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors) {
        if (t.name == name) return &t;
    }
    return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw std::runtime_error("checkpoint: cannot open for writing: " +
                                 path.string());
    }
    write_bytes(os, kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(os, ckpt.version);
    write_pod<std::uint64_t>(os, ckpt.metadata.size());
    write_bytes(os, ckpt.metadata.data(), ckpt.metadata.size());
    write_pod<std::uint64_t>(os, ckpt.tensors.size());
    for (const auto& t : ckpt.tensors) {
        write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(t.name.size()));
        write_bytes(os, t.name.data(), t.name.size());
        write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(t.dtype));
        write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(t.dims.size()));
        for (auto d : t.dims) {
            write_pod<std::uint64_t>(os, d);
        }
        write_bytes(os, t.payload.data(), t.payload.size());
    }
    if (!os) {
        throw std::runtime_error("checkpoint: write failed: " + path.string());
    }
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw std::runtime_error("checkpoint: cannot open: " + path.string());
    }
    char magic[8];
    read_bytes(is, magic, sizeof(magic));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw std::runtime_error("checkpoint: bad magic in " + path.string());
    }
    Checkpoint ckpt;
    ckpt.version = read_pod<std::uint32_t>(is);
    if (ckpt.version != 1) {
        throw std::runtime_error("checkpoint: unsupported version " +
                                 std::to_string(ckpt.version));
    }
    const auto meta_len = read_pod<std::uint64_t>(is);
    ckpt.metadata.resize(meta_len);
    if (meta_len > 0) {
        read_bytes(is, ckpt.metadata.data(), meta_len);
    }
    const auto count = read_pod<std::uint64_t>(is);
    ckpt.tensors.resize(count);
    for (auto& t : ckpt.tensors) {
        const auto name_len = read_pod<std::uint32_t>(is);
        t.name.resize(name_len);
        read_bytes(is, t.name.data(), name_len);
        const auto dtype = read_pod<std::uint8_t>(is);
        if (dtype > 1) {
            throw std::runtime_error("checkpoint: unknown dtype tag " +
                                     std::to_string(dtype));
        }
        t.dtype = static_cast<DType>(dtype);
        const auto rank = read_pod<std::uint8_t>(is);
        t.dims.resize(rank);
        for (auto& d : t.dims) {
            d = read_pod<std::uint64_t>(is);
        }
        const std::size_t elem = (t.dtype == DType::kF32) ? 4 : 8;
        t.payload.resize(t.element_count() * elem);
        read_bytes(is, t.payload.data(), t.payload.size());
    }
    return ckpt;
}

}  // namespace minipost
