#include "psep/misi.hpp"

#include <cmath>
#include <stdexcept>

namespace psep {

namespace {

double residual_norm(const std::vector<double>& r) {
  double s = 0.0;
  for (double v : r) s += v * v;
  return std::sqrt(s);
}

}  // namespace

std::vector<Waveform> misi(const std::vector<Matrix>& mag_estimates, const Waveform& mixture,
                           const MisiConfig& cfg, std::vector<double>* consistency_trace) {
  if (mag_estimates.empty()) throw std::invalid_argument("misi: no magnitude estimates");
  if (cfg.iterations < 0) throw std::invalid_argument("misi: iterations must be >= 0");
  const std::size_t c_count = mag_estimates.size();
  const std::size_t len = mixture.samples.size();

  ComplexSpectrogram mix_spec = stft(mixture, cfg.stft);
  for (const auto& m : mag_estimates)
    if (!m.same_shape(mix_spec.re))
      throw std::invalid_argument("misi: magnitude shape does not match stft(mixture)");

  PhaseField mix_phase = phase_field(mix_spec);
  std::vector<PhaseField> phases(c_count, mix_phase);
  if (consistency_trace) consistency_trace->clear();

  auto synthesize = [&](std::vector<Waveform>& out) {
    out.resize(c_count);
    for (std::size_t c = 0; c < c_count; ++c) {
      ComplexSpectrogram s;
      s.config = cfg.stft;
      s.re = Matrix(mix_spec.frames(), mix_spec.bins());
      s.im = Matrix(mix_spec.frames(), mix_spec.bins());
      for (std::size_t i = 0; i < s.re.size(); ++i) {
        s.re[i] = mag_estimates[c][i] * phases[c].cos_theta[i];
        s.im[i] = mag_estimates[c][i] * phases[c].sin_theta[i];
      }
      out[c] = istft(s, cfg.stft, len);
      out[c].sample_rate_hz = mixture.sample_rate_hz;
    }
  };

  auto redistribute = [&](std::vector<Waveform>& sources) {
    std::vector<double> residual(len);
    for (std::size_t i = 0; i < len; ++i) {
      double total = 0.0;
      for (const auto& s : sources) total += s.samples[i];
      residual[i] = mixture.samples[i] - total;
    }
    if (consistency_trace) consistency_trace->push_back(residual_norm(residual));
    const double share = 1.0 / double(c_count);
    for (auto& s : sources)
      for (std::size_t i = 0; i < len; ++i) s.samples[i] += residual[i] * share;
  };

  std::vector<Waveform> sources;
  for (int it = 0; it < cfg.iterations; ++it) {
    synthesize(sources);
    redistribute(sources);
    for (std::size_t c = 0; c < c_count; ++c) {
      // Keep the estimated magnitudes, adopt the phases of the corrected
      // signals. The previous phase stands in where a bin goes silent.
      phases[c] = phase_field(stft(sources[c], cfg.stft), phases[c]);
    }
  }
  synthesize(sources);
  redistribute(sources);
  return sources;
}

}  // namespace psep
