#include "psep/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace psep {

double si_sdr(const Waveform& estimate, const Waveform& reference) {
  if (estimate.samples.size() != reference.samples.size())
    throw std::invalid_argument("si_sdr: length mismatch");
  const auto& e = estimate.samples;
  const auto& r = reference.samples;
  double dot = 0.0, ref_energy = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    dot += e[i] * r[i];
    ref_energy += r[i] * r[i];
  }
  if (ref_energy <= 0.0) throw std::invalid_argument("si_sdr: zero reference");
  const double alpha = dot / ref_energy;
  double signal = 0.0, error = 0.0;
  for (std::size_t i = 0; i < e.size(); ++i) {
    const double s = alpha * r[i];
    signal += s * s;
    const double d = s - e[i];
    error += d * d;
  }
  if (error < 1e-20 * signal) return 100.0;  // cap for (near-)perfect estimates
  if (signal <= 0.0) return -100.0;          // zero projection, floor for CSV sanity
  return 10.0 * std::log10(signal / error);
}

EvalResult eval_separation(const std::vector<Waveform>& estimates,
                           const std::vector<Waveform>& references, const Waveform& mixture) {
  if (estimates.size() != references.size())
    throw std::invalid_argument("eval_separation: count mismatch");
  const std::size_t c_count = estimates.size();
  if (c_count == 0) throw std::invalid_argument("eval_separation: no sources");
  if (c_count > 8) throw std::invalid_argument("eval_separation: brute-force limit (C <= 8)");

  Matrix scores(c_count, c_count);
  for (std::size_t c = 0; c < c_count; ++c)
    for (std::size_t j = 0; j < c_count; ++j) scores(c, j) = si_sdr(estimates[c], references[j]);

  std::vector<int> idx(c_count);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<int> best = idx;
  double best_total = -1e300;
  bool first = true;
  do {
    double total = 0.0;
    for (std::size_t c = 0; c < c_count; ++c) total += scores(c, idx[c]);
    if (first || total > best_total) {
      first = false;
      best_total = total;
      best = idx;
    }
  } while (std::next_permutation(idx.begin(), idx.end()));

  EvalResult out;
  out.chosen_perm.mapping = best;
  out.per_source_si_sdr.resize(c_count);
  for (std::size_t c = 0; c < c_count; ++c) out.per_source_si_sdr[c] = scores(c, best[c]);
  out.mean_si_sdr = best_total / double(c_count);

  double baseline = 0.0;
  for (std::size_t j = 0; j < c_count; ++j) baseline += si_sdr(mixture, references[j]);
  out.si_sdr_improvement = out.mean_si_sdr - baseline / double(c_count);
  return out;
}

}  // namespace psep
