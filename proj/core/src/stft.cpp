#include "psep/stft.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

namespace psep {

namespace {

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Iterative radix-2 Cooley-Tukey, in place, n a power of two.
void fft_inplace(std::vector<double>& re, std::vector<double>& im, bool inverse) {
  const std::size_t n = re.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * std::numbers::pi / double(len) * (inverse ? 1.0 : -1.0);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (std::size_t i = 0; i < n; i += len) {
      double cr = 1.0, ci = 0.0;
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::size_t a = i + k, b = i + k + len / 2;
        const double tr = re[b] * cr - im[b] * ci;
        const double ti = re[b] * ci + im[b] * cr;
        re[b] = re[a] - tr;
        im[b] = im[a] - ti;
        re[a] += tr;
        im[a] += ti;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
  if (inverse) {
    const double inv = 1.0 / double(n);
    for (std::size_t i = 0; i < n; ++i) {
      re[i] *= inv;
      im[i] *= inv;
    }
  }
}

}  // namespace

void StftConfig::validate() const {
  if (!is_pow2(fft_size))
    throw std::invalid_argument("StftConfig: fft_size must be a power of two, got " +
                                std::to_string(fft_size));
  if (hop <= 0 || fft_size % hop != 0)
    throw std::invalid_argument("StftConfig: hop must divide fft_size, got hop=" +
                                std::to_string(hop) + " fft_size=" + std::to_string(fft_size));
}

std::vector<double> hann_window(int n) {
  // Periodic variant: w[k] = 0.5 - 0.5 cos(2 pi k / n). Exact COLA at
  // hop = n/4 with square-window normalization.
  std::vector<double> w(n);
  for (int k = 0; k < n; ++k)
    w[k] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * k / double(n));
  return w;
}

std::size_t stft_frame_count(std::size_t samples, const StftConfig& cfg) {
  const std::size_t padded = samples + (cfg.center_padding ? cfg.fft_size : 0);
  if (padded < std::size_t(cfg.fft_size)) return 0;
  return 1 + (padded - cfg.fft_size) / cfg.hop;
}

ComplexSpectrogram stft(const Waveform& w, const StftConfig& cfg) {
  cfg.validate();
  if (w.samples.empty() || w.samples.size() < std::size_t(cfg.fft_size))
    throw std::runtime_error("stft: signal too short");
  for (double v : w.samples)
    if (!std::isfinite(v)) throw std::invalid_argument("stft: non-finite sample");

  const int n = cfg.fft_size;
  const int pad = cfg.center_padding ? n / 2 : 0;
  const std::size_t frames = stft_frame_count(w.samples.size(), cfg);
  const std::size_t bins = std::size_t(n) / 2 + 1;
  const std::vector<double> win = hann_window(n);

  ComplexSpectrogram out;
  out.config = cfg;
  out.re = Matrix(frames, bins);
  out.im = Matrix(frames, bins);

  std::vector<double> fr(n), fi(n);
  const auto& x = w.samples;
  const long len = static_cast<long>(x.size());
  for (std::size_t t = 0; t < frames; ++t) {
    const long start = static_cast<long>(t) * cfg.hop - pad;
    for (int k = 0; k < n; ++k) {
      const long idx = start + k;
      fr[k] = (idx >= 0 && idx < len) ? x[idx] * win[k] : 0.0;
      fi[k] = 0.0;
    }
    fft_inplace(fr, fi, false);
    for (std::size_t f = 0; f < bins; ++f) {
      out.re(t, f) = fr[f];
      out.im(t, f) = fi[f];
    }
  }
  return out;
}

Waveform istft(const ComplexSpectrogram& s, const StftConfig& cfg, std::size_t target_len) {
  cfg.validate();
  const int n = cfg.fft_size;
  const std::size_t bins = std::size_t(n) / 2 + 1;
  if (s.bins() != bins)
    throw std::invalid_argument("istft: spectrogram has " + std::to_string(s.bins()) +
                                " bins, config expects " + std::to_string(bins));

  const std::size_t frames = s.frames();
  const int pad = cfg.center_padding ? n / 2 : 0;
  const std::size_t synth_len = frames == 0 ? 0 : (frames - 1) * cfg.hop + n;
  const std::vector<double> win = hann_window(n);

  std::vector<double> acc(synth_len, 0.0), wsq(synth_len, 0.0);
  std::vector<double> fr(n), fi(n);
  for (std::size_t t = 0; t < frames; ++t) {
    // Expand the half spectrum to the full conjugate-symmetric one.
    for (std::size_t f = 0; f < bins; ++f) {
      fr[f] = s.re(t, f);
      fi[f] = s.im(t, f);
    }
    for (int f = int(bins); f < n; ++f) {
      fr[f] = s.re(t, n - f);
      fi[f] = -s.im(t, n - f);
    }
    fft_inplace(fr, fi, true);
    const std::size_t base = t * cfg.hop;
    for (int k = 0; k < n; ++k) {
      acc[base + k] += win[k] * fr[k];
      wsq[base + k] += win[k] * win[k];
    }
  }

  Waveform out;
  out.sample_rate_hz = 8000;
  out.samples.assign(target_len, 0.0);
  for (std::size_t i = 0; i < target_len; ++i) {
    const std::size_t j = i + pad;
    if (j >= synth_len) break;  // beyond synthesis coverage: stays zero
    if (wsq[j] < 1e-12)
      throw std::runtime_error("istft: COLA violation at sample " + std::to_string(i));
    out.samples[i] = acc[j] / wsq[j];
  }
  return out;
}

Matrix magnitude(const ComplexSpectrogram& s) {
  Matrix m(s.frames(), s.bins());
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = std::hypot(s.re[i], s.im[i]);
  return m;
}

PhaseField phase_field(const ComplexSpectrogram& s) {
  PhaseField fb;  // empty: use the (1, 0) default
  return phase_field(s, fb);
}

PhaseField phase_field(const ComplexSpectrogram& s, const PhaseField& fallback) {
  const bool have_fb = !fallback.cos_theta.empty();
  if (have_fb &&
      (!fallback.cos_theta.same_shape(s.re) || !fallback.sin_theta.same_shape(s.re)))
    throw std::invalid_argument("phase_field: fallback shape mismatch");
  PhaseField p;
  p.cos_theta = Matrix(s.frames(), s.bins());
  p.sin_theta = Matrix(s.frames(), s.bins());
  for (std::size_t i = 0; i < p.cos_theta.size(); ++i) {
    const double mag = std::hypot(s.re[i], s.im[i]);
    if (mag < 1e-12) {
      p.cos_theta[i] = have_fb ? fallback.cos_theta[i] : 1.0;
      p.sin_theta[i] = have_fb ? fallback.sin_theta[i] : 0.0;
    } else {
      p.cos_theta[i] = s.re[i] / mag;
      p.sin_theta[i] = s.im[i] / mag;
    }
  }
  return p;
}

}  // namespace psep
