#include "psep/targets.hpp"

#include <cmath>
#include <stdexcept>

namespace psep {

namespace {

void check_sources(const std::vector<ComplexSpectrogram>& sources,
                   const ComplexSpectrogram* mixture, const char* who) {
  if (sources.size() < 2)
    throw std::invalid_argument(std::string(who) + ": need at least 2 sources");
  for (const auto& s : sources) {
    if (!s.re.same_shape(sources[0].re))
      throw std::invalid_argument(std::string(who) + ": source shape mismatch");
  }
  if (mixture && !mixture->re.same_shape(sources[0].re))
    throw std::invalid_argument(std::string(who) + ": mixture shape mismatch");
}

}  // namespace

std::vector<Mask> ideal_masks(const std::vector<ComplexSpectrogram>& sources,
                              const ComplexSpectrogram& mixture, MaskKind kind) {
  check_sources(sources, &mixture, "ideal_masks");
  const std::size_t c_count = sources.size();
  const std::size_t n = mixture.re.size();
  std::vector<Mask> masks(c_count);
  for (auto& m : masks) {
    m.values = Matrix(mixture.frames(), mixture.bins());
    m.kind = kind;
  }

  switch (kind) {
    case MaskKind::kIrm: {
      for (std::size_t i = 0; i < n; ++i) {
        double denom = kMaskEpsilon;
        for (const auto& s : sources) denom += std::hypot(s.re[i], s.im[i]);
        for (std::size_t c = 0; c < c_count; ++c)
          masks[c].values[i] = std::hypot(sources[c].re[i], sources[c].im[i]) / denom;
      }
      break;
    }
    case MaskKind::kPsm: {
      for (std::size_t i = 0; i < n; ++i) {
        const double xr = mixture.re[i], xi = mixture.im[i];
        const double denom = xr * xr + xi * xi + kMaskEpsilon;
        for (std::size_t c = 0; c < c_count; ++c)
          masks[c].values[i] = (sources[c].re[i] * xr + sources[c].im[i] * xi) / denom;
      }
      break;
    }
    case MaskKind::kIbm: {
      for (std::size_t i = 0; i < n; ++i) {
        std::size_t best = 0;
        double best_mag = std::hypot(sources[0].re[i], sources[0].im[i]);
        for (std::size_t c = 1; c < c_count; ++c) {
          const double mag = std::hypot(sources[c].re[i], sources[c].im[i]);
          if (mag > best_mag) {
            best_mag = mag;
            best = c;
          }
        }
        masks[best].values[i] = 1.0;
      }
      break;
    }
    case MaskKind::kEstimated:
      throw std::invalid_argument("ideal_masks: kEstimated is not an oracle mask kind");
  }
  return masks;
}

Matrix truncate(const Matrix& x, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("truncate: lo > hi");
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = std::min(std::max(x[i], lo), hi);
  return out;
}

Matrix truncate(const Matrix& x, double lo, const Matrix& hi) {
  check_same_shape(x, hi, "truncate");
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (lo > hi[i]) throw std::invalid_argument("truncate: lo > hi");
    out[i] = std::min(std::max(x[i], lo), hi[i]);
  }
  return out;
}

Matrix truncate(const Matrix& x, const Matrix& lo, const Matrix& hi) {
  check_same_shape(x, lo, "truncate");
  check_same_shape(x, hi, "truncate");
  Matrix out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (lo[i] > hi[i]) throw std::invalid_argument("truncate: lo > hi");
    out[i] = std::min(std::max(x[i], lo[i]), hi[i]);
  }
  return out;
}

LabelMatrix dominance_labels(const std::vector<ComplexSpectrogram>& sources) {
  check_sources(sources, nullptr, "dominance_labels");
  const std::size_t c_count = sources.size();
  const std::size_t n = sources[0].re.size();
  LabelMatrix labels;
  labels.values = Matrix(n, c_count);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    double best_mag = std::hypot(sources[0].re[i], sources[0].im[i]);
    for (std::size_t c = 1; c < c_count; ++c) {
      const double mag = std::hypot(sources[c].re[i], sources[c].im[i]);
      if (mag > best_mag) {
        best_mag = mag;
        best = c;
      }
    }
    labels.values(i, best) = 1.0;
  }
  return labels;
}

VAWeights va_weights(const ComplexSpectrogram& mixture, double threshold_db) {
  if (threshold_db <= 0) throw std::invalid_argument("va_weights: threshold_db must be > 0");
  const std::size_t n = mixture.re.size();
  VAWeights w;
  w.values = Matrix(mixture.frames(), mixture.bins());
  double max_mag = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    max_mag = std::max(max_mag, std::hypot(mixture.re[i], mixture.im[i]));
  if (max_mag == 0.0) return w;  // silent mixture: all weights zero
  const double floor_mag = max_mag * std::pow(10.0, -threshold_db / 20.0);
  for (std::size_t i = 0; i < n; ++i)
    w.values[i] = std::hypot(mixture.re[i], mixture.im[i]) > floor_mag ? 1.0 : 0.0;
  return w;
}

Matrix phase_sensitive_target(const ComplexSpectrogram& source,
                              const ComplexSpectrogram& mixture) {
  check_same_shape(source.re, mixture.re, "phase_sensitive_target");
  Matrix out(source.re.rows(), source.re.cols());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double mag_x = std::hypot(mixture.re[i], mixture.im[i]);
    out[i] = (source.re[i] * mixture.re[i] + source.im[i] * mixture.im[i]) /
             (mag_x + kMaskEpsilon);
  }
  return out;
}

}  // namespace psep
