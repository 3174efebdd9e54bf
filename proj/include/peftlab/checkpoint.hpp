#pragma once

#include <cstdint>
#include <filesystem>

#include "peftlab/model.hpp"

namespace peftlab {

struct NamedArray {
  std::string name;
  Tensor tensor;
};

/// In-memory image of a weight archive: textual header (format tag,
/// architecture signature, seed, step), then named arrays stored as shape
/// plus little-endian 64-bit values. Round-trips are bit-exact.
struct CheckpointData {
  std::string signature;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::vector<NamedArray> arrays;

  const Tensor* find(const std::string& name) const;
};

CheckpointData snapshot_model(Model& model, std::uint64_t seed, std::uint64_t step);
void write_checkpoint(const CheckpointData& ckpt, const std::filesystem::path& path);
CheckpointData read_checkpoint(const std::filesystem::path& path);

void save_checkpoint(Model& model, const std::filesystem::path& path, std::uint64_t seed,
                     std::uint64_t step);

/// Loads an archive back into a model with the same architecture signature;
/// mismatches name both signatures.
void load_checkpoint(Model& model, const CheckpointData& ckpt);
void load_checkpoint_file(Model& model, const std::filesystem::path& path);

}  // namespace peftlab
