#pragma once

// On-disk tensor container (little-endian):
//
//   magic "EVAI" | u32 version = 1 | u32 ndim | u32 dims[ndim]
//   | u8 dtype (0 = float32) | 3 reserved bytes
//   | row-major float32 payload
//   | u64 trailer length | UTF-8 JSON trailer
//
// A zero trailer length means "no metadata".

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <json.hpp>

namespace evai {

inline constexpr std::uint32_t kTensorFileVersion = 1;

struct TensorFile {
    std::vector<std::uint32_t> dims;
    std::vector<float> values;
    /// Null means an empty trailer.
    nlohmann::json trailer;

    std::size_t element_count() const;
};

/// Byte size of everything before the payload.
constexpr std::size_t tensor_header_size(std::size_t ndim) { return 4 + 4 + 4 + 4 * ndim + 1 + 3; }

std::vector<std::uint8_t> encode_tensor(const TensorFile& tensor);
TensorFile decode_tensor(std::span<const std::uint8_t> bytes);

void write_tensor_file(const std::filesystem::path& path, const TensorFile& tensor);
TensorFile read_tensor_file(const std::filesystem::path& path);

}  // namespace evai
