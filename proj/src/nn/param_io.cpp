#include "fedkappa/nn/param_io.hpp"

#include <algorithm>
#include <cstring>

#include "fedkappa/common/error.hpp"

namespace fedkappa::nn {

namespace {
constexpr char kMagic[4] = {'F', 'K', 'P', 'V'};
}

void encode_params(ByteWriter& out, const ParamVector& params) {
  out.raw(std::string_view(kMagic, 4));
  out.u16(kParamFormatVersion);
  out.bytes(params.spec_hash);
  out.u64(params.values.size());
  out.f32s(params.values);
}

std::vector<std::uint8_t> encode_params(const ParamVector& params) {
  ByteWriter w;
  encode_params(w, params);
  return w.take();
}

ParamVector decode_params(ByteReader& in) {
  auto magic = in.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kMagic)) {
    throw Error(ErrorCode::BadMagic, "not a parameter vector (expected FKPV)");
  }
  const auto version = in.u16();
  if (version != kParamFormatVersion) {
    throw Error(ErrorCode::VersionMismatch, "parameter format version " + std::to_string(version));
  }
  ParamVector p;
  auto hash = in.bytes(p.spec_hash.size());
  std::copy(hash.begin(), hash.end(), p.spec_hash.begin());
  const auto count = in.u64();
  if (count > in.remaining() / 4) {
    throw Error(ErrorCode::Truncated, "parameter payload declares " + std::to_string(count) +
                                          " values but only " + std::to_string(in.remaining()) +
                                          " bytes remain");
  }
  p.values.resize(count);
  in.f32s(p.values);
  return p;
}

ParamVector decode_params(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  auto p = decode_params(r);
  if (r.remaining() != 0) throw Error(ErrorCode::Malformed, "trailing bytes after parameter vector");
  return p;
}

void save_params(const std::filesystem::path& path, const ParamVector& params) {
  write_file(path, encode_params(params));
}

ParamVector load_params(const std::filesystem::path& path) { return decode_params(read_file(path)); }

}  // namespace fedkappa::nn
