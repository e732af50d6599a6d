// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "cladapter/synth.hpp"

namespace cladapter {

// Binary layout, all integers u32 and all values f64, little-endian:
//
//   "CLAD" | version | D | K | ratio | C | flags
//   adapter arrays (absent when kHeadOnly): centers (D x K), transforms[0..K) (D x D),
//     norm_in gain, norm_in bias, norm_mid gain, norm_mid bias,
//     W1 (D x rD), b1, W2 (rD x D), b2
//   head: W_hd (D x C), b_hd
//   backbone (only when kHasBackbone): input_dim | kind | frames | projection (input_dim x D)
//   "DALC"
//
// Matrices are row-major. K and ratio are written as 0 for head-only models.
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum CheckpointFlags : std::uint32_t {
  kHeadOnly = 1u << 0,
  kHasBackbone = 1u << 1,
};

struct CheckpointHeader {
  std::uint32_t version = kCheckpointVersion;
  std::uint32_t dim = 0;
  std::uint32_t clusters = 0;
  std::uint32_t ratio = 0;
  std::uint32_t classes = 0;
  std::uint32_t flags = 0;
};

std::string encode_checkpoint(const Model& model, bool include_backbone = true);
Model decode_checkpoint(const std::string& bytes, CheckpointHeader* header = nullptr);

void save_checkpoint(const std::filesystem::path& path, const Model& model, bool include_backbone = true);
Model load_checkpoint(const std::filesystem::path& path, CheckpointHeader* header = nullptr);

}  // namespace cladapter
