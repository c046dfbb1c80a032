#pragma once

#include <string>

#include "molang/nn.hpp"

namespace molang {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

uint32_t crc32(const uint8_t* data, size_t len, uint32_t seed = 0);

// Binary tensor container:
//   magic "MOLN", u32 version = 1, u32 tensor count;
//   per tensor: u32 name length, UTF-8 name, u8 rank, u64 extents[rank],
//   raw little-endian f32 payload;
//   trailing u32 CRC32 over the tensor records.
// The JSON sidecar (path + ".json") carries model config and run metadata.
void save_checkpoint(const ParamStore& store, const std::string& path,
                     const std::string& sidecar_json);
ParamStore load_checkpoint(const std::string& path);
std::string load_checkpoint_sidecar(const std::string& path);

}  // namespace molang
