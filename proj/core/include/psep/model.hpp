#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "psep/autodiff.hpp"
#include "psep/stft.hpp"
#include "psep/targets.hpp"
#include "psep/wave.hpp"

namespace psep {

enum class MaskActivation { kSigmoid, kRelu };

struct ModelConfig {
  int layers = 2;       // BLSTM depth, both towers
  int hidden = 64;      // units per direction
  int embed_dim = 10;   // D
  int num_sources = 2;  // C
  int freq_bins = 129;  // F = fft_size/2 + 1
  MaskActivation mask_activation = MaskActivation::kSigmoid;
  double dropout = 0.3;  // on BLSTM outputs between layers, training only
};

struct LstmDirParams {
  ad::Tensor w_x, w_h, bias;
};

struct BlstmLayerParams {
  LstmDirParams fwd, bwd;
};

// Recurrent body shared by the embedding and mask heads.
struct ChimeraParams {
  std::vector<BlstmLayerParams> layers;
  ad::Tensor emb_w, emb_b;    // [2H, F*D], [F*D]
  ad::Tensor mask_w, mask_b;  // [2H, F*C], [F*C]
};

// Phase tower: one recurrent stack shared across sources, applied once per
// source on (estimated magnitude, mixture re, mixture im).
struct PhaseNetParams {
  std::vector<BlstmLayerParams> layers;
  ad::Tensor out_w, out_b;  // [2H, F*2], [F*2]
};

class SeparatorModel {
 public:
  ModelConfig config;
  ChimeraParams chimera;
  PhaseNetParams phase;

  static SeparatorModel init(const ModelConfig& cfg, std::uint64_t seed);

  // Stable name -> tensor listing used by the optimizer and checkpoints.
  std::vector<std::pair<std::string, ad::Tensor>> named_params() const;
};

struct ForwardOptions {
  bool training = false;
  std::uint64_t dropout_seed = 0;
};

// Constant input tensors for a batch of equally sized mixture spectra.
struct BatchConstants {
  ad::Tensor logmag;               // [T,B,F] log(1 + |X|)
  ad::Tensor mag, re, im;          // [T,B,F]
  ad::Tensor noisy_cos, noisy_sin; // [T,B,F]
  std::size_t frames = 0, batch = 0, bins = 0;
};
BatchConstants make_batch_constants(const std::vector<const ComplexSpectrogram*>& mixtures);

struct ChimeraBatchOut {
  ad::Tensor embeddings;          // [T*B*F, D], rows unit-normalized
  std::vector<ad::Tensor> masks;  // C tensors, each [T,B,F]
};
ChimeraBatchOut chimera_forward_batch(const SeparatorModel& model, const BatchConstants& in,
                                      const ForwardOptions& opts = {});

struct PhaseBatchOut {
  std::vector<ad::Tensor> cos_t, sin_t;  // C tensors, each [T,B,F], unit per bin
};
PhaseBatchOut phase_forward_batch(const SeparatorModel& model,
                                  const std::vector<ad::Tensor>& masks, const BatchConstants& in,
                                  const ForwardOptions& opts = {});

// Single-utterance wrappers (inference, no tape needed).

// -> (embeddings (T*F) x D, C masks)
std::pair<Matrix, std::vector<Mask>> chimera_forward(const SeparatorModel& model,
                                                     const Matrix& mixture_logmag);

PhaseField phase_forward(const SeparatorModel& model, const Mask& mask_c,
                         const ComplexSpectrogram& mixture);

// S_c = |X| . M . (cos theta + j sin theta)
ComplexSpectrogram reconstruct(const ComplexSpectrogram& mixture, const Mask& mask,
                               const PhaseField& phase);

// Full pipeline: stft -> chimera -> per-source phase -> reconstruct -> istft.
std::vector<Waveform> separate(const SeparatorModel& model, const Waveform& mixture,
                               const StftConfig& cfg);

Matrix log_compress(const Matrix& mag);  // log(1 + m)

}  // namespace psep
