#include "flexio/config.h"

#include <fstream>
#include <set>

#include "flexio/errors.h"

namespace flexio {
namespace {

// Reads typed fields from one JSON object and rejects anything left over.
class Fields {
 public:
  Fields(const Json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError("section '" + section_ + "' must be a JSON object");
  }

  template <typename V>
  void Read(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const Json::exception& e) {
      throw ConfigError(section_ + "." + key + ": " + e.what());
    }
  }

  const Json* Raw(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  void Finish() const {
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) throw ConfigError("unknown key '" + item.key() + "' in section '" + section_ + "'");
    }
  }

 private:
  const Json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

const Json& EmptyObject() {
  static const Json empty = Json::object();
  return empty;
}

ReverbSpec ReverbFromJson(const Json& j) {
  ReverbSpec r;
  Fields f(j, "data.reverb");
  f.Read("enabled", r.enabled);
  f.Read("taps", r.taps);
  f.Read("decay_ms", r.decay_ms);
  f.Read("min_delay_ms", r.min_delay_ms);
  f.Read("max_delay_ms", r.max_delay_ms);
  f.Read("level", r.level);
  f.Finish();
  if (r.enabled && (r.taps == 0 || !(r.decay_ms > 0) || r.min_delay_ms < 0 || r.max_delay_ms < r.min_delay_ms)) {
    throw ConfigError("data.reverb: invalid tap settings");
  }
  return r;
}

}  // namespace

Json ToJson(const StftConfig& c) {
  return {{"window_len", c.window_len}, {"hop", c.hop}, {"window", WindowName(c.window)}};
}

Json ToJson(const ModelConfig& c) {
  Json m = {{"dim", c.dim},
            {"heads", c.heads},
            {"head_dim", c.head_dim},
            {"tac_hidden", c.tac_hidden},
            {"chatt_heads", c.chatt_heads},
            {"chatt_head_dim", c.chatt_head_dim},
            {"cross_prompt_blocks", c.cross_prompt_blocks},
            {"tse_blocks", c.tse_blocks},
            {"comm", CommMechanismName(c.comm)},
            {"ref_channel", c.ref_channel},
            {"max_prompts", c.max_prompts},
            {"ffn_expansion", c.ffn_expansion},
            {"norm_groups", c.norm_groups},
            {"conv_kernel", c.conv_kernel},
            {"conv_stride", c.conv_stride},
            {"encoder_kernel", c.encoder_kernel},
            {"omit_cross_prompt_pre_ffn", c.omit_cross_prompt_pre_ffn},
            {"eps", c.eps},
            {"init_seed", c.init_seed}};
  return {{"model", m}, {"stft", ToJson(c.stft)}};
}

Json ToJson(const TrainConfig& c) {
  Json nm = Json::array();
  for (const NmWeight& w : c.nm_distribution) nm.push_back({{"N", w.speakers}, {"M", w.channels}, {"weight", w.weight}});
  return {{"batch_size", c.batch_size},
          {"crop_seconds", c.crop_seconds},
          {"warmup_steps", c.warmup_steps},
          {"peak_lr", c.peak_lr},
          {"plateau_patience", c.plateau_patience},
          {"halt_patience", c.halt_patience},
          {"weight_decay", c.weight_decay},
          {"steps_per_epoch", c.steps_per_epoch},
          {"max_epochs", c.max_epochs},
          {"max_steps", c.max_steps},
          {"grad_clip", c.grad_clip},
          {"seed", c.seed},
          {"nm_distribution", nm},
          {"train_split", c.train_split},
          {"val_split", c.val_split}};
}

Json ToJson(const DataConfig& c) {
  Json splits = Json::array();
  for (const SplitSpec& s : c.splits) {
    splits.push_back({{"name", s.name}, {"N", s.speakers}, {"M", s.channels}, {"count", s.count}});
  }
  const ReverbSpec& r = c.reverb;
  return {{"seed", c.seed},
          {"length_seconds", c.length_seconds},
          {"snr_db_min", c.snr_db_min},
          {"snr_db_max", c.snr_db_max},
          {"add_noise", c.add_noise},
          {"max_delay", c.max_delay},
          {"reverb",
           {{"enabled", r.enabled},
            {"taps", r.taps},
            {"decay_ms", r.decay_ms},
            {"min_delay_ms", r.min_delay_ms},
            {"max_delay_ms", r.max_delay_ms},
            {"level", r.level}}},
          {"splits", splits}};
}

Json ToJson(const RunConfig& c) {
  Json j = ToJson(c.model);
  j["train"] = ToJson(c.train);
  j["data"] = ToJson(c.data);
  return j;
}

StftConfig StftConfigFromJson(const Json& j) {
  StftConfig c;
  Fields f(j, "stft");
  f.Read("window_len", c.window_len);
  f.Read("hop", c.hop);
  std::string window = WindowName(c.window);
  f.Read("window", window);
  f.Finish();
  c.window = ParseWindow(window);
  c.Validate();
  return c;
}

ModelConfig ModelConfigFromJson(const Json& model_section, const Json& stft_section) {
  Fields f(model_section, "model");
  std::string preset = "toy";
  f.Read("preset", preset);
  std::string comm = "tac";
  f.Read("comm", comm);
  const CommMechanism mech = ParseCommMechanism(comm);
  ModelConfig c;
  if (preset == "toy") {
    c = ModelConfig::Toy(mech);
  } else if (preset == "medium") {
    c = ModelConfig::Medium(mech);
  } else if (preset == "large") {
    c = ModelConfig::Large(mech);
  } else {
    throw ConfigError("model.preset: unknown preset '" + preset + "'");
  }
  f.Read("dim", c.dim);
  f.Read("heads", c.heads);
  f.Read("head_dim", c.head_dim);
  f.Read("tac_hidden", c.tac_hidden);
  f.Read("chatt_heads", c.chatt_heads);
  f.Read("chatt_head_dim", c.chatt_head_dim);
  f.Read("cross_prompt_blocks", c.cross_prompt_blocks);
  f.Read("tse_blocks", c.tse_blocks);
  f.Read("ref_channel", c.ref_channel);
  f.Read("max_prompts", c.max_prompts);
  f.Read("ffn_expansion", c.ffn_expansion);
  f.Read("norm_groups", c.norm_groups);
  f.Read("conv_kernel", c.conv_kernel);
  f.Read("conv_stride", c.conv_stride);
  f.Read("encoder_kernel", c.encoder_kernel);
  f.Read("omit_cross_prompt_pre_ffn", c.omit_cross_prompt_pre_ffn);
  f.Read("eps", c.eps);
  f.Read("init_seed", c.init_seed);
  f.Finish();
  c.stft = StftConfigFromJson(stft_section);
  c.Validate();
  return c;
}

TrainConfig TrainConfigFromJson(const Json& j) {
  TrainConfig c;
  Fields f(j, "train");
  f.Read("batch_size", c.batch_size);
  f.Read("crop_seconds", c.crop_seconds);
  f.Read("warmup_steps", c.warmup_steps);
  f.Read("peak_lr", c.peak_lr);
  f.Read("plateau_patience", c.plateau_patience);
  f.Read("halt_patience", c.halt_patience);
  f.Read("weight_decay", c.weight_decay);
  f.Read("steps_per_epoch", c.steps_per_epoch);
  f.Read("max_epochs", c.max_epochs);
  f.Read("max_steps", c.max_steps);
  f.Read("grad_clip", c.grad_clip);
  f.Read("seed", c.seed);
  f.Read("train_split", c.train_split);
  f.Read("val_split", c.val_split);
  if (const Json* nm = f.Raw("nm_distribution")) {
    if (!nm->is_array()) throw ConfigError("train.nm_distribution must be an array");
    c.nm_distribution.clear();
    for (const Json& item : *nm) {
      NmWeight w;
      Fields g(item, "train.nm_distribution[]");
      g.Read("N", w.speakers);
      g.Read("M", w.channels);
      g.Read("weight", w.weight);
      g.Finish();
      c.nm_distribution.push_back(w);
    }
  }
  f.Finish();
  c.Validate();
  return c;
}

DataConfig DataConfigFromJson(const Json& j) {
  DataConfig c;
  Fields f(j, "data");
  f.Read("seed", c.seed);
  f.Read("length_seconds", c.length_seconds);
  f.Read("snr_db_min", c.snr_db_min);
  f.Read("snr_db_max", c.snr_db_max);
  f.Read("add_noise", c.add_noise);
  f.Read("max_delay", c.max_delay);
  if (const Json* r = f.Raw("reverb")) c.reverb = ReverbFromJson(*r);
  if (const Json* splits = f.Raw("splits")) {
    if (!splits->is_array()) throw ConfigError("data.splits must be an array");
    for (const Json& item : *splits) {
      SplitSpec s;
      Fields g(item, "data.splits[]");
      g.Read("name", s.name);
      g.Read("N", s.speakers);
      g.Read("M", s.channels);
      g.Read("count", s.count);
      g.Finish();
      if (s.name.empty() || s.speakers == 0 || s.channels == 0) {
        throw ConfigError("data.splits[]: name, N >= 1 and M >= 1 are required");
      }
      c.splits.push_back(s);
    }
  }
  f.Finish();
  if (!(c.length_seconds > 0) || c.snr_db_max < c.snr_db_min || c.max_delay < 0) {
    throw ConfigError("data: invalid length, SNR range or delay");
  }
  return c;
}

RunConfig RunConfigFromJson(const Json& j) {
  Fields f(j, "<root>");
  const Json* model = f.Raw("model");
  const Json* stft = f.Raw("stft");
  const Json* train = f.Raw("train");
  const Json* data = f.Raw("data");
  f.Finish();
  RunConfig c;
  c.model = ModelConfigFromJson(model ? *model : EmptyObject(), stft ? *stft : EmptyObject());
  if (train) c.train = TrainConfigFromJson(*train);
  if (data) c.data = DataConfigFromJson(*data);
  return c;
}

Json ReadJsonFile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void WriteJsonFile(const std::filesystem::path& path, const Json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

RunConfig LoadRunConfig(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw ConfigError("config file not found: " + path.string());
  return RunConfigFromJson(ReadJsonFile(path));
}

}  // namespace flexio
