#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mvc/autodiff.hpp"
#include "mvc/tensor.hpp"

namespace mvc {

/// Model checkpoint container: magic "MVCL", format version u16, u32-length
/// JSON metadata (parameter names/shapes plus a free-form "extra" document),
/// then raw little-endian 64-bit floats per parameter in metadata order.
/// Bounded parameters are stored as their unconstrained raw tensors.
inline constexpr std::uint16_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const std::vector<const Parameter*>& params,
                     const std::string& extra_metadata_json);

struct LoadedCheckpoint {
  std::string extra_metadata_json;
  std::vector<std::string> order;
  std::map<std::string, Tensor> raw_tensors;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Copies raw tensors into matching parameters; throws DataError on missing
/// names or shape mismatches.
void restore_parameters(const LoadedCheckpoint& ckpt, const std::vector<Parameter*>& params);

}  // namespace mvc
