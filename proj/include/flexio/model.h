#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flexio/channel_comm.h"
#include "flexio/locoformer.h"
#include "flexio/stft.h"

namespace flexio {

// All architecture dimensions. Parameter shapes depend on these fields only,
// never on the number of channels or prompts a model is run with.
struct ModelConfig {
  std::size_t dim = 64;            // D
  std::size_t heads = 4;           // H
  std::size_t head_dim = 16;       // D_att
  std::size_t tac_hidden = 128;    // E
  std::size_t chatt_heads = 4;
  std::size_t chatt_head_dim = 16;
  std::size_t cross_prompt_blocks = 2;
  std::size_t tse_blocks = 4;
  CommMechanism comm = CommMechanism::kCoAttention;
  StftConfig stft;
  std::size_t ref_channel = 0;
  std::size_t max_prompts = 5;     // documented soft cap, not enforced by shapes
  std::size_t ffn_expansion = 4;
  std::size_t norm_groups = 4;
  int conv_kernel = 4;
  int conv_stride = 1;
  int encoder_kernel = 3;
  bool omit_cross_prompt_pre_ffn = true;
  double eps = 1e-5;
  std::uint64_t init_seed = 0;

  static ModelConfig Medium(CommMechanism comm);
  static ModelConfig Large(CommMechanism comm);
  // Desk-scale configuration used by tests and the acceptance suite.
  static ModelConfig Toy(CommMechanism comm);

  BlockConfig CrossPromptBlock() const;
  BlockConfig TseBlock() const;
  void Validate() const;
};

// Per-speaker outputs at the reference channel.
struct SeparationResult {
  Waveform sources;    // N channels, input length
  ComplexSpec masks;   // N x T x F complex masks
};

// Prompt frames and mixture frames of a prompted feature map.
template <typename T>
struct PromptSplit {
  Var<T> prompts;  // [B, N, F, D]
  Var<T> mixture;  // [B, T, F, D]
};

template <typename T>
class FlexioModel {
 public:
  explicit FlexioModel(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  const ParameterStore<T>& params() const { return store_; }
  ParameterStore<T>& params() { return store_; }
  const Var<T>& prompt() const { return prompt_; }

  // [B, T, F, 2] real/imag planes -> [B, T, F, D].
  Var<T> Encode(const Tensor<T>& spec_planes) const;
  // [B, T, F, D] -> [B, N + T, F, D], prompt vector repeated over N frames and all bins.
  Var<T> AttachPrompts(const Var<T>& z, std::size_t n) const;
  // Blocks with shared weights across channels; `channels` consecutive batch
  // entries form one scene for channel communication.
  Var<T> CrossPromptForward(const Var<T>& x, std::size_t channels) const;
  PromptSplit<T> SplitPrompts(const Var<T>& x, std::size_t n) const;
  // prompts [S, N, F, D], mixture [S, T, F, D] -> [S*N, T, F, D].
  Var<T> ConditionalTse(const Var<T>& prompts, const Var<T>& mixture) const;
  // [S*N, T, F, D] -> complex masks as [S*N, T, F, 2].
  Var<T> DecodeMasks(const Var<T>& features) const;

  // Full network up to the masks for S scenes of M channels each. The
  // spectrogram planes are [S*M, T, F, 2] with channels of a scene adjacent.
  Var<T> ForwardMasks(const Tensor<T>& spec_planes, std::size_t channels, std::size_t speakers,
                      std::size_t ref_channel) const;

  // Waveform in, N reference-channel estimates out. Uses config().ref_channel
  // unless `ref_channel` is given.
  SeparationResult Separate(const Waveform& mixture, std::size_t speakers) const;
  SeparationResult Separate(const Waveform& mixture, std::size_t speakers,
                            std::size_t ref_channel) const;

 private:
  struct Block {
    LocoformerParams<T> body;
    TacParams<T> tac;
    ChAttParams<T> chatt;
  };

  ModelConfig cfg_;
  ParameterStore<T> store_;
  Var<T> enc_w_, enc_b_, enc_gain_, enc_bias_;
  Var<T> prompt_;
  std::vector<Block> cross_blocks_;
  std::vector<LocoformerParams<T>> tse_blocks_;
  Var<T> dec_w_, dec_b_;
};

// Stacks the channels of spectrograms as [S*M, T, F, 2].
template <typename T>
Tensor<T> SpecToPlanes(std::span<const ComplexSpec> scenes);

// Differentiable mask application + inverse STFT. masks: [S*N, T, F, 2];
// mixtures: S single-channel spectrograms. Returns [S*N, out_len].
template <typename T>
Var<T> MaskedIstft(const Var<T>& masks, std::span<const ComplexSpec> mixtures,
                   std::size_t speakers, const StftConfig& cfg, std::size_t out_len);

}  // namespace flexio
