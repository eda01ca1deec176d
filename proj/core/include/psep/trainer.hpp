#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "psep/checkpoint.hpp"
#include "psep/datagen.hpp"
#include "psep/losses.hpp"
#include "psep/model.hpp"
#include "psep/stft.hpp"

namespace psep {

struct TrainConfig {
  double lr = 1e-3;
  int max_epochs = 100;
  int patience = 10;
  double alpha = 0.975;
  PitCriterion pit_criterion = PitCriterion::kMaskDependent;
  WeightScheme weight_scheme;  // plain, gamma = 0.2
  MaskActivation mask_activation = MaskActivation::kSigmoid;
  MiVariant mi_variant = MiVariant::kMsa;
  std::uint64_t seed = 0;
  std::size_t chunk_frames = 400;
  std::size_t batch_size = 16;
  double grad_clip = 5.0;  // global gradient norm
  StftConfig stft;

  void validate() const;
};

// Waveforms held in memory; spectra and targets are recomputed per chunk
// (cheap next to the network passes).
struct Corpus {
  std::vector<MixtureItem> train, valid, test;

  static Corpus load(const std::string& dir);       // from manifest + WAVs
  static Corpus generate(const CorpusSpec& spec);   // in-memory, no files
};

struct AdamState {
  std::vector<std::vector<double>> m, v;  // one slot per named parameter
  std::uint64_t t = 0;
};

// One optimizer step over named parameters whose gradients are populated.
// Throws on a non-finite gradient, naming the tensor.
void adam_step(const std::vector<std::pair<std::string, ad::Tensor>>& params, AdamState& state,
               double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

struct EpochLog {
  int epoch = 0;
  double dc = 0.0, mi = 0.0, pi = 0.0, total = 0.0;
  double val_total = 0.0;
  double alpha = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> log;
  Checkpoint best;
  double best_val = std::numeric_limits<double>::infinity();
  int epochs_run = 0;
  int alpha_switch_epoch = -1;  // first epoch of the second curriculum phase
  Checkpoint phase1_best;       // curriculum only: stage-one best, stage two resumes from it
};

// Loss pieces for one utterance (or chunk) under one assignment choice.
LossBreakdown evaluate_item_loss(const SeparatorModel& model, const MixtureItem& item,
                                 const TrainConfig& cfg);

TrainResult train(const TrainConfig& cfg, const Corpus& corpus, SeparatorModel& model);

// Stage one at cfg.alpha, stage two resumed from the stage-one best
// checkpoint (bitwise) at alpha = 0.5 with fresh optimizer moments.
TrainResult curriculum_train(const TrainConfig& cfg, const Corpus& corpus, SeparatorModel& model);

// ---- checkpoint packing ----

std::string config_snapshot(const TrainConfig& cfg, const ModelConfig& model_cfg);
Checkpoint make_checkpoint(const SeparatorModel& model, const AdamState* adam,
                           std::uint64_t epoch, double best_val, const std::string& config_text);
void load_model_params(SeparatorModel& model, const Checkpoint& ckpt);
ModelConfig model_config_from_snapshot(const std::string& config_text);
TrainConfig train_config_from_snapshot(const std::string& config_text);

// Flag-value parsers shared with the CLI; throw on unknown values.
PitCriterion pit_criterion_from_string(const std::string& s);
WeightSchemeKind weight_scheme_from_string(const std::string& s);
MaskActivation mask_activation_from_string(const std::string& s);
MiVariant mi_variant_from_string(const std::string& s);

}  // namespace psep
