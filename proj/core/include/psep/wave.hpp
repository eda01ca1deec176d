#pragma once

#include <string>
#include <vector>

namespace psep {

// Mono time-domain signal. Samples are dimensionless amplitudes, nominally
// in [-1, 1].
struct Waveform {
  std::vector<double> samples;
  int sample_rate_hz = 8000;

  std::size_t size() const { return samples.size(); }
  double duration_s() const {
    return sample_rate_hz > 0 ? static_cast<double>(samples.size()) / sample_rate_hz : 0.0;
  }
};

// 16-bit PCM mono little-endian WAV only. Samples are scaled to [-1, 1) by
// 1/32768 on read; write saturates out-of-range values.
Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& w);

}  // namespace psep
