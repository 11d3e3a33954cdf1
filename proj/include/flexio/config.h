#pragma once

#include <filesystem>

#include "flexio/model.h"
#include "flexio/synth.h"
#include "flexio/train.h"
#include "json.hpp"

namespace flexio {

using Json = nlohmann::json;

// One run: sections {model, stft, train, data}. Missing sections keep their
// defaults; unknown keys anywhere throw ConfigError.
struct RunConfig {
  ModelConfig model = ModelConfig::Toy(CommMechanism::kTac);
  TrainConfig train;
  DataConfig data;
};

Json ToJson(const ModelConfig& c);  // {"model": ..., "stft": ...}
Json ToJson(const StftConfig& c);
Json ToJson(const TrainConfig& c);
Json ToJson(const DataConfig& c);
Json ToJson(const RunConfig& c);

// `model` may carry "preset": "toy" | "medium" | "large" as the base that
// the remaining keys override.
ModelConfig ModelConfigFromJson(const Json& model_section, const Json& stft_section);
StftConfig StftConfigFromJson(const Json& j);
TrainConfig TrainConfigFromJson(const Json& j);
DataConfig DataConfigFromJson(const Json& j);
RunConfig RunConfigFromJson(const Json& j);

Json ReadJsonFile(const std::filesystem::path& path);
void WriteJsonFile(const std::filesystem::path& path, const Json& j);
RunConfig LoadRunConfig(const std::filesystem::path& path);

}  // namespace flexio
