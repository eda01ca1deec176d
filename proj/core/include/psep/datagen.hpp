#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "psep/wave.hpp"

namespace psep {

struct CorpusSpec {
  int n_train = 500;
  int n_valid = 50;
  int n_test = 50;
  double duration_s = 2.0;
  int sample_rate_hz = 8000;
  double snr_lo_db = 0.0;
  double snr_hi_db = 10.0;
  std::uint64_t seed = 0;

  void validate() const;
};

// Synthetic "speaker": a pitch-contoured harmonic source shaped by slowly
// drifting resonators and a syllabic on/off envelope. Profiles differ in
// pitch base, resonance layout, and spectral tilt.
struct SpeakerProfile {
  double f0_base_hz = 120.0;
  double f0_range_oct = 0.2;      // contour span in octaves around the base
  double formant_hz[3] = {500.0, 1500.0, 2500.0};
  double formant_bw_hz[3] = {80.0, 120.0, 180.0};
  double formant_gain[3] = {1.0, 0.6, 0.3};
  double tilt = 1.0;              // harmonic k amplitude ~ k^-tilt
  double syllable_rate_hz = 3.5;  // pacing of the on/off envelope
  double breath = 0.02;           // noise floor mixed into the source
};

inline constexpr int kSpeakerBankSize = 8;
SpeakerProfile speaker_profile(int speaker_id);

Waveform synth_speaker(std::uint64_t seed, double duration_s, const SpeakerProfile& profile,
                       int sample_rate_hz = 8000);

// One example. Construction guarantees mixture == sum of sources,
// sample for sample.
struct MixtureItem {
  std::string id;
  Waveform mixture;
  std::vector<Waveform> sources;
  double snr_db = 0.0;
};

// Scales s2 so the s1/s2 power ratio matches snr_db, then adds. Both
// signals are jointly rescaled if the sum would clip.
MixtureItem make_mixture(const Waveform& s1, const Waveform& s2, double snr_db,
                         const std::string& id = "");

// Fully deterministic item generation: speakers, utterance seeds, and SNR
// derive from (spec.seed, split, index).
MixtureItem generate_item(const CorpusSpec& spec, const std::string& split, int index);

struct ManifestEntry {
  std::string id, split;
  std::string mix_path, s1_path, s2_path;  // relative to the corpus dir
  double snr_db = 0.0;
  std::uint64_t seed = 0;
};

// Writes WAVs plus manifest.tsv (one tab-separated line per item:
// id, split, mix, s1, s2, snr_db, seed). Samples are quantized so that the
// on-disk mixture is still the exact sample-wise sum of the on-disk sources.
void write_corpus(const CorpusSpec& spec, const std::string& dir);

std::vector<ManifestEntry> read_manifest(const std::string& dir);
MixtureItem load_item(const std::string& dir, const ManifestEntry& entry);

// One chunk of an item: frames [start_frame, start_frame + chunk_frames).
struct Chunk {
  std::size_t item_index = 0;
  std::size_t start_frame = 0;
};

// One epoch of shuffled batches, one chunk per item with a uniformly random
// start (items shorter than the chunk start at 0 and get zero-padded
// downstream). Throws on an empty corpus.
std::vector<std::vector<Chunk>> epoch_batches(const std::vector<std::size_t>& item_frames,
                                              std::size_t chunk_frames, std::size_t batch_size,
                                              std::mt19937_64& rng);

}  // namespace psep
