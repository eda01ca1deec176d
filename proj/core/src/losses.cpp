#include "psep/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace psep {

namespace {

using ad::Tensor;

void check_perm(const Permutation& perm, std::size_t c_count, const char* who) {
  if (perm.mapping.size() != c_count)
    throw std::invalid_argument(std::string(who) + ": permutation size mismatch");
  std::vector<bool> seen(c_count, false);
  for (int j : perm.mapping) {
    if (j < 0 || std::size_t(j) >= c_count || seen[j])
      throw std::invalid_argument(std::string(who) + ": mapping is not a permutation");
    seen[j] = true;
  }
}

}  // namespace

ad::Tensor dc_loss(const ad::Tensor& v, const LabelMatrix& y, const VAWeights* w) {
  if (v.shape().size() != 2)
    throw std::invalid_argument("dc_loss: embeddings must be 2-D, got " +
                                ad::shape_str(v.shape()));
  const std::size_t n = v.shape()[0];
  const std::size_t c_count = y.values.cols();
  if (y.values.rows() != n)
    throw std::invalid_argument("dc_loss: label rows " + std::to_string(y.values.rows()) +
                                " != embedding rows " + std::to_string(n));
  if (w && w->values.size() != n)
    throw std::invalid_argument("dc_loss: weight count mismatch");

  // sqrt of binary weights is the weights themselves, but keep the sqrt so
  // fractional weights stay correct.
  std::vector<double> wsqrt(n, 1.0);
  double w_sum = double(n);
  if (w) {
    w_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      w_sum += w->values[i];
      wsqrt[i] = std::sqrt(w->values[i]);
    }
    if (w_sum <= 0.0) return ad::scalar_constant(0.0);
  }

  Matrix yw(n, c_count);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < c_count; ++c) yw(i, c) = y.values(i, c) * wsqrt[i];

  Tensor vw = w ? ad::mul_colvec(v, ad::constant({n, 1}, wsqrt)) : v;
  Tensor vv = ad::matmul(vw, vw, true, false);                    // [D,D]
  Tensor vy = ad::matmul(vw, ad::constant(yw), true, false);      // [D,C]

  double yy_term = 0.0;  // ||Yw^T Yw||_F^2, constant wrt the embeddings
  {
    Matrix yy(c_count, c_count);
    for (std::size_t a = 0; a < c_count; ++a)
      for (std::size_t b = 0; b < c_count; ++b) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += yw(i, a) * yw(i, b);
        yy(a, b) = s;
      }
    for (std::size_t i = 0; i < yy.size(); ++i) yy_term += yy[i] * yy[i];
  }

  Tensor quad = ad::add(ad::sum(ad::mul(vv, vv)), ad::scale(ad::sum(ad::mul(vy, vy)), -2.0));
  return ad::scale(ad::add_scalar(quad, yy_term), 1.0 / (w_sum * w_sum));
}

Matrix mi_target(const ComplexSpectrogram& source, const ComplexSpectrogram& mixture,
                 MiVariant variant) {
  if (variant == MiVariant::kMsa) return magnitude(source);
  // tPSA: |S| cos(theta_X - theta_S) clamped to [0, |X|].
  return truncate(phase_sensitive_target(source, mixture), 0.0, magnitude(mixture));
}

ad::Tensor mask_approx_loss(const ad::Tensor& mask, const ad::Tensor& mixture_mag,
                            const ad::Tensor& target) {
  if (mask.shape() != mixture_mag.shape() || mask.shape() != target.shape())
    throw std::invalid_argument("mask_approx_loss: shape mismatch " +
                                ad::shape_str(mask.shape()) + " vs " +
                                ad::shape_str(mixture_mag.shape()) + " vs " +
                                ad::shape_str(target.shape()));
  return ad::mean(ad::abs(ad::sub(ad::mul(mask, mixture_mag), target)));
}

ad::Tensor mi_loss(const std::vector<ad::Tensor>& masks, const ComplexSpectrogram& mixture,
                   const std::vector<ComplexSpectrogram>& sources, MiVariant variant,
                   const Permutation& perm) {
  const std::size_t c_count = masks.size();
  if (sources.size() != c_count)
    throw std::invalid_argument("mi_loss: source count mismatch");
  check_perm(perm, c_count, "mi_loss");

  Tensor mag = ad::constant(magnitude(mixture));
  Tensor total;
  for (std::size_t c = 0; c < c_count; ++c) {
    Matrix target = mi_target(sources[perm.mapping[c]], mixture, variant);
    Tensor term = mask_approx_loss(masks[c], mag, ad::constant(target));
    total = total.defined() ? ad::add(total, term) : term;
  }
  return ad::scale(total, 1.0 / double(c_count));
}

ad::Tensor phase_pair_loss(const PhaseEstimate& estimate, const PhaseField& truth_j,
                           const WeightScheme& scheme, const std::vector<Matrix>& source_mags,
                           std::size_t j) {
  const std::size_t n = estimate.cos_t.numel();
  if (truth_j.cos_theta.size() != n)
    throw std::invalid_argument("phase_pair_loss: shape mismatch");
  const auto& cv = estimate.cos_t.value();
  const auto& sv = estimate.sin_t.value();
  for (std::size_t i = 0; i < n; ++i) {
    const double norm = std::hypot(cv[i], sv[i]);
    if (std::abs(norm - 1.0) > 1e-3)
      throw std::invalid_argument("phase_pair_loss: estimated phase is not unit norm (|p|=" +
                                  std::to_string(norm) + ")");
  }

  Tensor ip = ad::add(ad::mul(estimate.cos_t, ad::constant(truth_j.cos_theta)),
                      ad::mul(estimate.sin_t, ad::constant(truth_j.sin_theta)));
  if (scheme.kind == WeightSchemeKind::kPlain) return ad::scale(ad::mean(ip), -1.0);

  Matrix wmat(truth_j.cos_theta.rows(), truth_j.cos_theta.cols());
  switch (scheme.kind) {
    case WeightSchemeKind::kMwl:
      for (std::size_t i = 0; i < wmat.size(); ++i) wmat[i] = scheme.gamma + source_mags[j][i];
      break;
    case WeightSchemeKind::kImwl:
      for (std::size_t i = 0; i < wmat.size(); ++i) {
        double other = 0.0;
        for (std::size_t k = 0; k < source_mags.size(); ++k)
          if (k != j) other += source_mags[k][i];
        wmat[i] = scheme.gamma + other;
      }
      break;
    case WeightSchemeKind::kJoint:
      for (std::size_t i = 0; i < wmat.size(); ++i) {
        double all = 0.0;
        for (const auto& m : source_mags) all += m[i];
        wmat[i] = all;
      }
      break;
    case WeightSchemeKind::kPlain:
      break;
  }
  return ad::scale(ad::mean(ad::mul(ip, ad::constant(wmat))), -1.0);
}

ad::Tensor phase_loss(const std::vector<PhaseEstimate>& estimates,
                      const std::vector<PhaseField>& truth, const WeightScheme& scheme,
                      const std::vector<Matrix>& source_mags, const Permutation& perm) {
  const std::size_t c_count = estimates.size();
  if (truth.size() != c_count || (scheme.kind != WeightSchemeKind::kPlain &&
                                  source_mags.size() != c_count))
    throw std::invalid_argument("phase_loss: count mismatch");
  check_perm(perm, c_count, "phase_loss");
  Tensor total;
  for (std::size_t c = 0; c < c_count; ++c) {
    const std::size_t j = std::size_t(perm.mapping[c]);
    Tensor term = phase_pair_loss(estimates[c], truth[j], scheme, source_mags, j);
    total = total.defined() ? ad::add(total, term) : term;
  }
  return ad::scale(total, 1.0 / double(c_count));
}

std::pair<Permutation, double> pit_assign(const Matrix& mask_losses, const Matrix* phase_losses,
                                          PitCriterion criterion) {
  const std::size_t c_count = mask_losses.rows();
  if (mask_losses.cols() != c_count)
    throw std::invalid_argument("pit_assign: cost matrix must be square");
  if (c_count == 0) throw std::invalid_argument("pit_assign: empty cost matrix");
  if (c_count > 8) throw std::invalid_argument("pit_assign: brute-force limit (C <= 8)");
  if (phase_losses && (phase_losses->rows() != c_count || phase_losses->cols() != c_count))
    throw std::invalid_argument("pit_assign: phase matrix shape mismatch");

  std::vector<int> idx(c_count);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<int> best = idx;
  double best_key = 0.0, best_value = 0.0;
  bool first = true;
  do {
    double mask_total = 0.0, phase_total = 0.0;
    for (std::size_t c = 0; c < c_count; ++c) {
      mask_total += mask_losses(c, idx[c]);
      if (phase_losses) phase_total += (*phase_losses)(c, idx[c]);
    }
    const double key =
        criterion == PitCriterion::kMaskDependent ? mask_total : mask_total + phase_total;
    // next_permutation enumerates in lexicographic order, so a strict
    // comparison keeps the lexicographically smallest tie.
    if (first || key < best_key) {
      first = false;
      best_key = key;
      best = idx;
      best_value = mask_total + phase_total;
    }
  } while (std::next_permutation(idx.begin(), idx.end()));

  Permutation perm;
  perm.mapping = best;
  return {perm, best_value};
}

ad::Tensor combined_loss(const ad::Tensor& dc, const ad::Tensor& mi, const ad::Tensor& pi,
                         double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("combined_loss: alpha outside [0,1]");
  return ad::add(ad::scale(dc, alpha), ad::scale(ad::add(mi, pi), 1.0 - alpha));
}

double combined_loss(double dc, double mi, double pi, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("combined_loss: alpha outside [0,1]");
  return alpha * dc + (1.0 - alpha) * (mi + pi);
}

}  // namespace psep
