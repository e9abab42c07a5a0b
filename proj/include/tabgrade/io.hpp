#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace tabgrade {

std::string read_file(const std::filesystem::path& path);

// Writes to a sibling temporary file, then renames over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

// 64-bit FNV-1a, rendered as 16 lowercase hex digits by hex_digest.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex_digest(std::uint64_t value);

}  // namespace tabgrade
