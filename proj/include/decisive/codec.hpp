#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace decisive {

std::string base64_encode(std::span<const std::uint8_t> bytes);
/// Throws InputError on malformed input.
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// Little-endian float32 payload (lossy for doubles).
std::string encode_f32(std::span<const double> values);
std::vector<double> decode_f32(std::string_view text);
/// Little-endian float64 payload (exact).
std::string encode_f64(std::span<const double> values);
std::vector<double> decode_f64(std::string_view text);

/// Rounds every value through float32, matching an encode_f32/decode_f32 trip.
void round_to_f32(std::span<double> values);

/// Run-length encoding of an integer label map: (label, run) pairs.
std::vector<std::pair<int, std::size_t>> rle_encode(std::span<const int> labels);
std::vector<int> rle_decode(const std::vector<std::pair<int, std::size_t>>& runs);

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes,
                      std::uint64_t basis = 0xcbf29ce484222325ULL);
std::uint64_t fnv1a64(std::string_view text);
std::uint64_t fnv1a64(std::span<const double> values);
std::string hex64(std::uint64_t v);

}  // namespace decisive
