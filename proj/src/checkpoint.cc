#include "flexio/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>

#include "flexio/config.h"
#include "flexio/errors.h"

namespace flexio {
namespace {

void PutF32(std::vector<unsigned char>& out, float v) {
  std::uint32_t u;
  std::memcpy(&u, &v, sizeof(u));
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((u >> (8 * i)) & 0xFF));
}

float GetF32(const unsigned char* p) {
  const std::uint32_t u = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                          (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  float v;
  std::memcpy(&v, &u, sizeof(v));
  return v;
}

}  // namespace

template <typename T>
void SaveCheckpoint(const std::filesystem::path& dir, const FlexioModel<T>& model) {
  std::filesystem::create_directories(dir);
  const auto& params = model.params();
  Json manifest = Json::array();
  std::vector<unsigned char> bytes;
  bytes.reserve(4 * params.NumElements());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor<T>& v = params.vars()[i].value();
    manifest.push_back({{"name", params.names()[i]}, {"shape", v.shape()}, {"dtype", "f32"}, {"byte_offset", bytes.size()}});
    for (T x : v.values()) PutF32(bytes, static_cast<float>(x));
  }
  WriteJsonFile(dir / "manifest.json", manifest);
  WriteJsonFile(dir / "config.json", ToJson(model.config()));
  std::ofstream out(dir / "weights.bin", std::ios::binary);
  if (!out) throw DataError("cannot write " + (dir / "weights.bin").string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing " + (dir / "weights.bin").string());
}

ModelConfig LoadCheckpointConfig(const std::filesystem::path& dir) {
  const Json j = ReadJsonFile(dir / "config.json");
  if (!j.is_object() || !j.contains("model") || !j.contains("stft")) {
    throw DataError("checkpoint config.json needs model and stft sections");
  }
  for (const auto& item : j.items()) {
    if (item.key() != "model" && item.key() != "stft") {
      throw ConfigError("unknown key '" + item.key() + "' in checkpoint config.json");
    }
  }
  return ModelConfigFromJson(j.at("model"), j.at("stft"));
}

template <typename T>
FlexioModel<T> LoadCheckpoint(const std::filesystem::path& dir) {
  FlexioModel<T> model(LoadCheckpointConfig(dir));
  const Json manifest = ReadJsonFile(dir / "manifest.json");
  std::ifstream in(dir / "weights.bin", std::ios::binary);
  if (!in) throw DataError("cannot open " + (dir / "weights.bin").string());
  const std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto& params = model.params();
  if (!manifest.is_array() || manifest.size() != params.size()) {
    throw DataError("checkpoint manifest lists " + std::to_string(manifest.size()) + " tensors, model has " +
                    std::to_string(params.size()));
  }
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Json& e = manifest[i];
    std::string name, dtype;
    Shape shape;
    std::size_t offset = 0;
    try {
      name = e.at("name").get<std::string>();
      shape = e.at("shape").get<Shape>();
      dtype = e.at("dtype").get<std::string>();
      offset = e.at("byte_offset").get<std::size_t>();
    } catch (const Json::exception& ex) {
      throw DataError(std::string("malformed checkpoint manifest: ") + ex.what());
    }
    Var<T> var = params.vars()[i];
    if (name != params.names()[i] || shape != var.shape() || dtype != "f32" || offset != expected_offset) {
      throw DataError("checkpoint tensor " + std::to_string(i) + " (" + name + ") does not match parameter " +
                      params.names()[i] + " " + ShapeString(var.shape()));
    }
    const std::size_t count = NumElements(shape);
    if (offset + 4 * count > bytes.size()) throw DataError("weights.bin is truncated");
    Tensor<T>& value = var.mutable_value();
    for (std::size_t k = 0; k < count; ++k) value[k] = static_cast<T>(GetF32(bytes.data() + offset + 4 * k));
    expected_offset = offset + 4 * count;
  }
  if (expected_offset != bytes.size()) throw DataError("weights.bin has trailing bytes");
  return model;
}

template void SaveCheckpoint(const std::filesystem::path&, const FlexioModel<float>&);
template void SaveCheckpoint(const std::filesystem::path&, const FlexioModel<double>&);
template FlexioModel<float> LoadCheckpoint<float>(const std::filesystem::path&);
template FlexioModel<double> LoadCheckpoint<double>(const std::filesystem::path&);

}  // namespace flexio
