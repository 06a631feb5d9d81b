#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cmr::util {

std::string sha256_hex(std::span<const unsigned char> bytes);
std::string sha256_hex(std::string_view text);
/// First 8 bytes of SHA-256, for seeding RNGs from strings portably.
std::uint64_t stable_seed(std::string_view text);

std::string to_lower(std::string_view s);
std::string trim(std::string_view s);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

/// Lowercase alphanumeric word pieces; everything else separates.
std::vector<std::string> word_tokens(std::string_view text);

}  // namespace cmr::util
