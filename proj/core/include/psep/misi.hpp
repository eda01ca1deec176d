#pragma once

#include <vector>

#include "psep/matrix.hpp"
#include "psep/stft.hpp"
#include "psep/wave.hpp"

namespace psep {

struct MisiConfig {
  int iterations = 5;
  StftConfig stft;
};

// Iterative joint phase reconstruction from magnitude estimates. Phases
// start at the mixture phase; each iteration synthesizes every source,
// spreads the time-domain residual (mixture - sum of sources) evenly across
// them, and re-analyzes to update the phases while keeping the given
// magnitudes. The returned signals always carry one final residual
// redistribution, so iterations = 0 is the noisy-phase estimate plus a
// single mixture-consistency correction.
//
// consistency_trace, when non-null, receives ||mixture - sum(synthesized)||_2
// measured before each redistribution: entry k is the error after k phase
// updates (k = 0 .. iterations).
std::vector<Waveform> misi(const std::vector<Matrix>& mag_estimates, const Waveform& mixture,
                           const MisiConfig& cfg, std::vector<double>* consistency_trace = nullptr);

}  // namespace psep
