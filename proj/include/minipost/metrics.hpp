#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

namespace minipost {

// Append-only JSON Lines writer; one flushed line per record. Records must
// contain only deterministic fields (no wall-clock data): metrics files
// are compared byte-for-byte in replay tests.
class JsonlWriter {
public:
    JsonlWriter() = default;
    explicit JsonlWriter(const std::filesystem::path& path);

    void append(const nlohmann::json& record);
    bool is_open() const { return os_.is_open(); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
    std::ofstream os_;
};

// FNV-1a 64-bit over raw bytes; used for manifest content hashes and
// config hashes.
std::uint64_t fnv1a64(const void* data, std::size_t n);
std::uint64_t fnv1a64_file(const std::filesystem::path& path);
std::string hex64(std::uint64_t v);

}  // namespace minipost
