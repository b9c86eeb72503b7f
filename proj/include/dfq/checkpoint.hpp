// SPDX-License-Identifier: Apache-2.0
/**
 * @file   checkpoint.hpp
 * @brief  Little-endian tensor container.
 *
 *   "DFQVITCK"            8-byte magic
 *   u16 version
 *   u32 tensor count
 *   per tensor: u16 name length, UTF-8 name, u8 rank, u32 extents[rank],
 *               f32 payload (row-major)
 *   u32 config length, config blob
 *
 * Values are computed in 64-bit and stored as 32-bit; down-conversion rounds
 * to nearest, ties to even.
 */
#pragma once

#include <dfq/quant.hpp>
#include <dfq/synthesis.hpp>
#include <dfq/vit.hpp>

#include <filesystem>
#include <stdexcept>

namespace dfq {

inline constexpr char kCheckpointMagic[8] = {'D', 'F', 'Q', 'V',
                                             'I', 'T', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// The file does not exist.
class CheckpointNotFound : public CheckpointError {
public:
  using CheckpointError::CheckpointError;
};

struct Checkpoint {
  std::vector<NamedTensor> tensors;
  std::string config;

  const Tensor &at(std::string_view name) const;
};

void save_checkpoint(const std::filesystem::path &path, const Checkpoint &ck);
Checkpoint load_checkpoint(const std::filesystem::path &path);

/// Serialized bytes (what save_checkpoint writes).
std::string encode_checkpoint(const Checkpoint &ck);
Checkpoint decode_checkpoint(std::string_view bytes);

/// Rounds every value to the nearest 32-bit float, as storage would.
void round_to_storage(MicroViT &model);

Checkpoint model_checkpoint(const MicroViT &model);
MicroViT model_from_checkpoint(const Checkpoint &ck);

/// Student: weights, quantizer state under "quant.<w|a>.<site>.<field>", and
/// the bit setting in the config blob.
Checkpoint student_checkpoint(const QuantizedViT &student);
QuantizedViT student_from_checkpoint(const Checkpoint &ck);

/// Synthetic set on disk: one container per batch ("shard_NNN.ck", images,
/// labels and telemetry) and a manifest.json listing the shards in order.
void save_synth_dataset(const std::filesystem::path &dir, const SynthDataset &ds);
SynthDataset load_synth_dataset(const std::filesystem::path &dir);

} // namespace dfq
