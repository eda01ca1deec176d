#pragma once

#include <cstddef>

#include "psep/matrix.hpp"
#include "psep/wave.hpp"

namespace psep {

enum class Window { kHann };

struct StftConfig {
  int fft_size = 256;
  int hop = 64;
  Window window = Window::kHann;
  bool center_padding = true;

  // Throws std::invalid_argument on a malformed config (fft_size not a
  // power of two, hop not dividing fft_size).
  void validate() const;
};

// T x F complex short-time spectrum, F = fft_size/2 + 1.
struct ComplexSpectrogram {
  Matrix re, im;
  StftConfig config;

  std::size_t frames() const { return re.rows(); }
  std::size_t bins() const { return re.cols(); }
};

// Per-bin unit vectors (cos theta, sin theta), each T x F.
struct PhaseField {
  Matrix cos_theta, sin_theta;
};

ComplexSpectrogram stft(const Waveform& w, const StftConfig& cfg);

// Weighted overlap-add inverse with window-square normalization. Output is
// trimmed or zero-padded to target_len samples. Throws "COLA violation" if
// any retained sample has (near-)zero normalization weight.
Waveform istft(const ComplexSpectrogram& s, const StftConfig& cfg, std::size_t target_len);

Matrix magnitude(const ComplexSpectrogram& s);

// (re, im)/|.| per bin; bins with magnitude < 1e-12 take the fallback value,
// (1, 0) by default.
PhaseField phase_field(const ComplexSpectrogram& s);
PhaseField phase_field(const ComplexSpectrogram& s, const PhaseField& fallback);

// Periodic Hann window of length n.
std::vector<double> hann_window(int n);

// Frame count stft() will produce for a signal of the given length.
std::size_t stft_frame_count(std::size_t samples, const StftConfig& cfg);

}  // namespace psep
