#pragma once

#include <vector>

#include "psep/losses.hpp"
#include "psep/wave.hpp"

namespace psep {

struct EvalResult {
  std::vector<double> per_source_si_sdr;  // dB
  double mean_si_sdr = 0.0;
  double si_sdr_improvement = 0.0;  // vs the mixture used as every estimate
  Permutation chosen_perm;
};

// Scale-invariant SDR in dB: project the estimate onto the reference and
// compare projected energy with the residual. Capped at +100 dB when the
// error energy drops below 1e-20 of the projected signal energy. Throws on
// an all-zero reference.
double si_sdr(const Waveform& estimate, const Waveform& reference);

// Scores estimates against references under the permutation that maximizes
// mean SI-SDR (exhaustive, C <= 8). Improvement is measured against scoring
// the mixture itself as every estimate.
EvalResult eval_separation(const std::vector<Waveform>& estimates,
                           const std::vector<Waveform>& references, const Waveform& mixture);

}  // namespace psep
