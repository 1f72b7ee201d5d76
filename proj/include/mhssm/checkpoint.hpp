#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mhssm/tensor.hpp"

namespace mhssm {

// Binary container, all integers little-endian:
//   "MHSSMCKP"  u32 version  u32 entry_count
//   entry_count x { u32 name_len, name bytes, u8 dtype, u32 ndim, u64 dims[ndim],
//                   u64 offset, u64 nbytes }
//   data section; offsets are relative to its start.
// dtype 0 = float64 array, 1 = raw bytes (ndim 1).
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::vector<std::pair<std::string, std::string>> blobs;

  const Tensor* find_tensor(const std::string& name) const;
  const std::string* find_blob(const std::string& name) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Written to a temporary file and renamed into place, so a crash leaves any
// previous file at `path` intact.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace mhssm
