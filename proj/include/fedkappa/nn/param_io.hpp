#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fedkappa/common/bytes.hpp"
#include "fedkappa/nn/model.hpp"

namespace fedkappa::nn {

// FKPV layout (little-endian):
//   "FKPV" | u16 version=1 | 32-byte spec hash | u64 count | count x f32
inline constexpr std::uint16_t kParamFormatVersion = 1;

void encode_params(ByteWriter& out, const ParamVector& params);
std::vector<std::uint8_t> encode_params(const ParamVector& params);
ParamVector decode_params(ByteReader& in);
ParamVector decode_params(std::span<const std::uint8_t> bytes);

void save_params(const std::filesystem::path& path, const ParamVector& params);
ParamVector load_params(const std::filesystem::path& path);

}  // namespace fedkappa::nn
