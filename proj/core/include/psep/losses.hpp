#pragma once

#include <utility>
#include <vector>

#include "psep/autodiff.hpp"
#include "psep/stft.hpp"
#include "psep/targets.hpp"

namespace psep {

// Assignment of network outputs to reference sources: estimate c is scored
// against reference mapping[c].
struct Permutation {
  std::vector<int> mapping;
};

enum class PitCriterion { kMaskPhase, kMaskDependent };
enum class MiVariant { kMsa, kTpsa };
enum class WeightSchemeKind { kPlain, kMwl, kImwl, kJoint };

struct WeightScheme {
  WeightSchemeKind kind = WeightSchemeKind::kPlain;
  double gamma = 0.2;
};

struct LossBreakdown {
  double dc = 0.0, mi = 0.0, pi = 0.0, total = 0.0;
  Permutation chosen_perm;
};

// Embedding affinity loss, computed through the expanded Gram form
//   ||(W^1/2 V)^T (W^1/2 V)||^2 - 2 ||(W^1/2 V)^T (W^1/2 Y)||^2
//     + ||(W^1/2 Y)^T (W^1/2 Y)||^2,
// normalized by (sum w)^2. v is (T*F) x D, rows bin-major; w == nullptr
// means all-ones weights.
ad::Tensor dc_loss(const ad::Tensor& v, const LabelMatrix& y, const VAWeights* w);

// Mask-inference loss under a fixed assignment, mean absolute deviation of
// mask * |X| from per-source magnitude targets, normalized by C*T*F.
ad::Tensor mi_loss(const std::vector<ad::Tensor>& masks, const ComplexSpectrogram& mixture,
                   const std::vector<ComplexSpectrogram>& sources, MiVariant variant,
                   const Permutation& perm);

// Per-pair term of mi_loss: mean |mask * |X| - target| over T*F bins.
ad::Tensor mask_approx_loss(const ad::Tensor& mask, const ad::Tensor& mixture_mag,
                            const ad::Tensor& target);

// The magnitude target a mask is trained toward: |S| for kMsa, the
// [0, |X|]-truncated phase-sensitive magnitude for kTpsa.
Matrix mi_target(const ComplexSpectrogram& source, const ComplexSpectrogram& mixture,
                 MiVariant variant);

struct PhaseEstimate {
  ad::Tensor cos_t, sin_t;  // [T,F] each, unit-norm bins
};

// Negative inner product of estimated and true phase vectors, optionally
// weighted, normalized by C*T*F. source_mags are ground-truth magnitudes,
// already scaled by the caller so gamma is meaningful (the trainer divides
// by the utterance's max mixture magnitude). Throws if estimated phase
// vectors drift off unit norm by more than 1e-3.
ad::Tensor phase_loss(const std::vector<PhaseEstimate>& estimates,
                      const std::vector<PhaseField>& truth, const WeightScheme& scheme,
                      const std::vector<Matrix>& source_mags, const Permutation& perm);

// Per-pair term: estimate phase (cos_t, sin_t) against reference j with the
// scheme's weights for reference j.
ad::Tensor phase_pair_loss(const PhaseEstimate& estimate, const PhaseField& truth_j,
                           const WeightScheme& scheme, const std::vector<Matrix>& source_mags,
                           std::size_t j);

// Brute-force assignment over C <= 8 outputs. mask_losses(c, j) scores
// estimate c against reference j. kMaskPhase minimizes the mask+phase sum;
// kMaskDependent picks the permutation by mask losses alone, then reports
// mask + phase totals under it. Ties break to the lexicographically
// smallest permutation.
std::pair<Permutation, double> pit_assign(const Matrix& mask_losses, const Matrix* phase_losses,
                                          PitCriterion criterion);

ad::Tensor combined_loss(const ad::Tensor& dc, const ad::Tensor& mi, const ad::Tensor& pi,
                         double alpha);
double combined_loss(double dc, double mi, double pi, double alpha);

}  // namespace psep
