#pragma once

#include <vector>

#include "psep/matrix.hpp"
#include "psep/stft.hpp"

namespace psep {

// Denominator guard for mask ratios on silent bins.
inline constexpr double kMaskEpsilon = 1e-8;

enum class MaskKind { kIbm, kIrm, kPsm, kEstimated };

// T x F gain matrix applied to the mixture magnitude.
struct Mask {
  Matrix values;
  MaskKind kind = MaskKind::kEstimated;
};

// (T*F) x C one-hot rows: dominant source per time-frequency bin.
struct LabelMatrix {
  Matrix values;
};

// T x F binary voice-activity weights.
struct VAWeights {
  Matrix values;
};

// Oracle masks from reference source spectra and the mixture spectrum.
//   irm_c = |S_c| / (sum_i |S_i| + eps)
//   psm_c = Re(S_c * conj(X)) / (|X|^2 + eps)
//   ibm_c = 1 iff c = argmax_i |S_i|  (ties to the lowest index)
std::vector<Mask> ideal_masks(const std::vector<ComplexSpectrogram>& sources,
                              const ComplexSpectrogram& mixture, MaskKind kind);

// Elementwise clamp to [lo, hi]. Throws if lo > hi anywhere.
Matrix truncate(const Matrix& x, double lo, double hi);
Matrix truncate(const Matrix& x, double lo, const Matrix& hi);
Matrix truncate(const Matrix& x, const Matrix& lo, const Matrix& hi);

// One-hot dominant-source labels by per-bin magnitude argmax, ties to the
// lowest source index. Rows ordered bin-major: row = t * F + f.
LabelMatrix dominance_labels(const std::vector<ComplexSpectrogram>& sources);

// Bin active iff 20 log10 |X| > (max over bins) - threshold_db. An all-zero
// mixture yields all-zero weights.
VAWeights va_weights(const ComplexSpectrogram& mixture, double threshold_db = 40.0);

// |S| cos(theta_X - theta_S) = Re(S * conj(X)) / (|X| + eps), the untruncated
// phase-sensitive magnitude target.
Matrix phase_sensitive_target(const ComplexSpectrogram& source, const ComplexSpectrogram& mixture);

}  // namespace psep
