#pragma once

#include <filesystem>

#include "flexio/model.h"

namespace flexio {

// Directory layout: manifest.json (ordered [{name, shape, dtype, byte_offset}]),
// weights.bin (little-endian f32 in manifest order) and config.json.
template <typename T>
void SaveCheckpoint(const std::filesystem::path& dir, const FlexioModel<T>& model);

// Rebuilds the model from config.json and loads the weights. Names, shapes
// and offsets must match the model's parameter order exactly.
template <typename T>
FlexioModel<T> LoadCheckpoint(const std::filesystem::path& dir);

ModelConfig LoadCheckpointConfig(const std::filesystem::path& dir);

}  // namespace flexio
