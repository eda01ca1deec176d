#include "psep/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace psep {

namespace {

using ad::Tensor;

Tensor uniform_param(ad::Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> data(ad::numel(shape));
  for (auto& v : data) v = dist(rng);
  return ad::param(std::move(shape), std::move(data));
}

BlstmLayerParams init_blstm_layer(std::size_t in_dim, std::size_t hidden, std::mt19937_64& rng) {
  const double k = 1.0 / std::sqrt(double(hidden));
  BlstmLayerParams layer;
  for (LstmDirParams* dir : {&layer.fwd, &layer.bwd}) {
    dir->w_x = uniform_param({in_dim, 4 * hidden}, k, rng);
    dir->w_h = uniform_param({hidden, 4 * hidden}, k, rng);
    dir->bias = uniform_param({4 * hidden}, k, rng);
  }
  return layer;
}

// [T,B,I] -> [T,B,2H] through the layer stack, with inverted dropout on the
// outputs of all but the last layer when training.
Tensor blstm_stack(const std::vector<BlstmLayerParams>& layers, Tensor x, double dropout,
                   const ForwardOptions& opts) {
  std::mt19937_64 drop_rng(opts.dropout_seed);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    const auto& lp = layers[l];
    const std::size_t t_len = x.shape()[0], batch = x.shape()[1];
    const std::size_t hidden = lp.fwd.w_h.shape()[0];
    Tensor fg = ad::lstm_seq(x, lp.fwd.w_x, lp.fwd.w_h, lp.fwd.bias, false);
    Tensor bg = ad::lstm_seq(x, lp.bwd.w_x, lp.bwd.w_h, lp.bwd.bias, true);
    Tensor h = ad::concat_cols({ad::reshape(fg, {t_len * batch, hidden}),
                                ad::reshape(bg, {t_len * batch, hidden})});
    x = ad::reshape(h, {t_len, batch, 2 * hidden});
    if (opts.training && dropout > 0.0 && l + 1 < layers.size()) {
      std::bernoulli_distribution keep(1.0 - dropout);
      std::vector<double> mask(x.numel());
      const double inv_keep = 1.0 / (1.0 - dropout);
      for (auto& v : mask) v = keep(drop_rng) ? inv_keep : 0.0;
      x = ad::mul(x, ad::constant(x.shape(), std::move(mask)));
    }
  }
  return x;
}

// Rows of [N,D] scaled to unit norm. eps keeps the gradient finite on
// all-zero rows, which random parameters never produce in practice.
Tensor unit_normalize_rows(const Tensor& x) {
  Tensor n2 = ad::rowsum(ad::mul(x, x));
  Tensor inv = ad::reciprocal(ad::sqrt(ad::add_scalar(n2, 1e-24)));
  return ad::mul_colvec(x, inv);
}

}  // namespace

Matrix log_compress(const Matrix& mag) {
  Matrix out(mag.rows(), mag.cols());
  for (std::size_t i = 0; i < mag.size(); ++i) out[i] = std::log1p(mag[i]);
  return out;
}

SeparatorModel SeparatorModel::init(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.layers < 1 || cfg.hidden < 1 || cfg.embed_dim < 1 || cfg.num_sources < 2 ||
      cfg.freq_bins < 1)
    throw std::invalid_argument("SeparatorModel: bad config");
  std::mt19937_64 rng(seed);
  SeparatorModel m;
  m.config = cfg;

  const std::size_t f = cfg.freq_bins, h = cfg.hidden;
  std::size_t in_dim = f;
  for (int l = 0; l < cfg.layers; ++l) {
    m.chimera.layers.push_back(init_blstm_layer(in_dim, h, rng));
    in_dim = 2 * h;
  }
  const double k_head = 1.0 / std::sqrt(double(2 * h));
  m.chimera.emb_w = uniform_param({2 * h, f * std::size_t(cfg.embed_dim)}, k_head, rng);
  m.chimera.emb_b = uniform_param({f * std::size_t(cfg.embed_dim)}, k_head, rng);
  m.chimera.mask_w = uniform_param({2 * h, f * std::size_t(cfg.num_sources)}, k_head, rng);
  m.chimera.mask_b = uniform_param({f * std::size_t(cfg.num_sources)}, k_head, rng);

  in_dim = 3 * f;
  for (int l = 0; l < cfg.layers; ++l) {
    m.phase.layers.push_back(init_blstm_layer(in_dim, h, rng));
    in_dim = 2 * h;
  }
  m.phase.out_w = uniform_param({2 * h, 2 * f}, k_head, rng);
  m.phase.out_b = uniform_param({2 * f}, k_head, rng);
  return m;
}

std::vector<std::pair<std::string, ad::Tensor>> SeparatorModel::named_params() const {
  std::vector<std::pair<std::string, ad::Tensor>> out;
  auto add_stack = [&out](const std::string& prefix, const std::vector<BlstmLayerParams>& layers) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string base = prefix + ".l" + std::to_string(l);
      out.emplace_back(base + ".f.wx", layers[l].fwd.w_x);
      out.emplace_back(base + ".f.wh", layers[l].fwd.w_h);
      out.emplace_back(base + ".f.b", layers[l].fwd.bias);
      out.emplace_back(base + ".b.wx", layers[l].bwd.w_x);
      out.emplace_back(base + ".b.wh", layers[l].bwd.w_h);
      out.emplace_back(base + ".b.b", layers[l].bwd.bias);
    }
  };
  add_stack("chimera", chimera.layers);
  out.emplace_back("chimera.emb_w", chimera.emb_w);
  out.emplace_back("chimera.emb_b", chimera.emb_b);
  out.emplace_back("chimera.mask_w", chimera.mask_w);
  out.emplace_back("chimera.mask_b", chimera.mask_b);
  add_stack("phase", phase.layers);
  out.emplace_back("phase.out_w", phase.out_w);
  out.emplace_back("phase.out_b", phase.out_b);
  return out;
}

BatchConstants make_batch_constants(const std::vector<const ComplexSpectrogram*>& mixtures) {
  if (mixtures.empty()) throw std::invalid_argument("make_batch_constants: empty batch");
  const std::size_t t_len = mixtures[0]->frames(), bins = mixtures[0]->bins();
  const std::size_t batch = mixtures.size();
  for (const auto* m : mixtures)
    if (m->frames() != t_len || m->bins() != bins)
      throw std::invalid_argument("make_batch_constants: mixed spectrogram shapes");

  std::vector<double> logmag(t_len * batch * bins), mag(t_len * batch * bins),
      re(t_len * batch * bins), im(t_len * batch * bins), ncos(t_len * batch * bins),
      nsin(t_len * batch * bins);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& s = *mixtures[b];
    for (std::size_t t = 0; t < t_len; ++t) {
      for (std::size_t f = 0; f < bins; ++f) {
        const std::size_t i = (t * batch + b) * bins + f;
        const double rr = s.re(t, f), ii = s.im(t, f);
        const double m = std::hypot(rr, ii);
        if (!std::isfinite(m))
          throw std::invalid_argument("make_batch_constants: non-finite input");
        mag[i] = m;
        logmag[i] = std::log1p(m);
        re[i] = rr;
        im[i] = ii;
        ncos[i] = m < 1e-12 ? 1.0 : rr / m;
        nsin[i] = m < 1e-12 ? 0.0 : ii / m;
      }
    }
  }
  BatchConstants k;
  const ad::Shape shape{t_len, batch, bins};
  k.logmag = ad::constant(shape, std::move(logmag));
  k.mag = ad::constant(shape, std::move(mag));
  k.re = ad::constant(shape, std::move(re));
  k.im = ad::constant(shape, std::move(im));
  k.noisy_cos = ad::constant(shape, std::move(ncos));
  k.noisy_sin = ad::constant(shape, std::move(nsin));
  k.frames = t_len;
  k.batch = batch;
  k.bins = bins;
  return k;
}

ChimeraBatchOut chimera_forward_batch(const SeparatorModel& model, const BatchConstants& in,
                                      const ForwardOptions& opts) {
  const auto& cfg = model.config;
  if (in.bins != std::size_t(cfg.freq_bins))
    throw std::invalid_argument("chimera_forward_batch: bin count mismatch");
  const std::size_t t_len = in.frames, batch = in.batch, f = in.bins;
  const std::size_t rows = t_len * batch;
  const std::size_t h2 = 2 * std::size_t(cfg.hidden);

  Tensor body = blstm_stack(model.chimera.layers, in.logmag, cfg.dropout, opts);
  Tensor body2d = ad::reshape(body, {rows, h2});

  Tensor emb = ad::add_bias(ad::matmul(body2d, model.chimera.emb_w), model.chimera.emb_b);
  Tensor v = unit_normalize_rows(
      ad::reshape(ad::tanh(emb), {rows * f, std::size_t(cfg.embed_dim)}));

  Tensor mask_logits = ad::add_bias(ad::matmul(body2d, model.chimera.mask_w), model.chimera.mask_b);
  Tensor act = cfg.mask_activation == MaskActivation::kSigmoid ? ad::sigmoid(mask_logits)
                                                               : ad::relu(mask_logits);
  Tensor act3d = ad::reshape(act, {t_len, batch, f * std::size_t(cfg.num_sources)});

  ChimeraBatchOut out;
  out.embeddings = v;
  for (int c = 0; c < cfg.num_sources; ++c) {
    Tensor mc = ad::slice_cols(ad::reshape(act3d, {rows, f * std::size_t(cfg.num_sources)}),
                               std::size_t(c) * f, std::size_t(c + 1) * f);
    out.masks.push_back(ad::reshape(mc, {t_len, batch, f}));
  }
  return out;
}

PhaseBatchOut phase_forward_batch(const SeparatorModel& model,
                                  const std::vector<ad::Tensor>& masks, const BatchConstants& in,
                                  const ForwardOptions& opts) {
  const auto& cfg = model.config;
  if (masks.empty()) throw std::invalid_argument("phase_forward_batch: no masks");
  const std::size_t t_len = in.frames, batch = in.batch, f = in.bins;
  const std::size_t rows = t_len * batch;

  // One pass over all sources: lanes are grouped source-major.
  std::vector<Tensor> lanes;
  lanes.reserve(masks.size());
  for (const auto& m : masks) {
    Tensor mag_est = ad::mul(m, in.mag);
    Tensor cat = ad::concat_cols({ad::reshape(mag_est, {rows, f}),
                                  ad::reshape(in.re, {rows, f}),
                                  ad::reshape(in.im, {rows, f})});
    lanes.push_back(ad::reshape(cat, {t_len, batch, 3 * f}));
  }
  Tensor stacked = ad::concat_batch(lanes);

  ForwardOptions phase_opts = opts;
  phase_opts.dropout_seed = opts.dropout_seed ^ 0x9e3779b97f4a7c15ull;
  Tensor body = blstm_stack(model.phase.layers, stacked, cfg.dropout, phase_opts);
  const std::size_t all_rows = t_len * batch * masks.size();
  Tensor residual = ad::add_bias(
      ad::matmul(ad::reshape(body, {all_rows, 2 * std::size_t(cfg.hidden)}), model.phase.out_w),
      model.phase.out_b);

  // An exactly zero residual leaves the noisy phase untouched, bit for bit.
  bool all_zero = true;
  for (double v : residual.value())
    if (v != 0.0) {
      all_zero = false;
      break;
    }

  PhaseBatchOut out;
  if (all_zero) {
    for (std::size_t c = 0; c < masks.size(); ++c) {
      out.cos_t.push_back(in.noisy_cos);
      out.sin_t.push_back(in.noisy_sin);
    }
    return out;
  }

  Tensor resid3d = ad::reshape(residual, {t_len, batch * masks.size(), 2 * f});
  for (std::size_t c = 0; c < masks.size(); ++c) {
    Tensor rc = ad::slice_batch_range(resid3d, c * batch, (c + 1) * batch);
    Tensor r2d = ad::reshape(rc, {rows, 2 * f});
    Tensor raw_cos = ad::add(ad::slice_cols(r2d, 0, f), ad::reshape(in.noisy_cos, {rows, f}));
    Tensor raw_sin = ad::add(ad::slice_cols(r2d, f, 2 * f), ad::reshape(in.noisy_sin, {rows, f}));

    Tensor n2 = ad::add(ad::mul(raw_cos, raw_cos), ad::mul(raw_sin, raw_sin));
    // Bins whose pre-normalization norm collapses fall back to the noisy
    // phase; the fallback mask also keeps the divide finite there.
    std::vector<double> fb(n2.numel(), 0.0);
    bool any_fb = false;
    for (std::size_t i = 0; i < fb.size(); ++i)
      if (n2.value()[i] < 1e-16) {
        fb[i] = 1.0;
        any_fb = true;
      }
    Tensor inv;
    Tensor keep_mask, fb_mask;
    if (any_fb) {
      fb_mask = ad::constant({rows, f}, fb);
      std::vector<double> keep(fb.size());
      for (std::size_t i = 0; i < fb.size(); ++i) keep[i] = 1.0 - fb[i];
      keep_mask = ad::constant({rows, f}, std::move(keep));
      inv = ad::reciprocal(ad::sqrt(ad::add(n2, fb_mask)));
    } else {
      inv = ad::reciprocal(ad::sqrt(n2));
    }

    Tensor cos_n = ad::mul(raw_cos, inv);
    Tensor sin_n = ad::mul(raw_sin, inv);
    if (any_fb) {
      cos_n = ad::add(ad::mul(cos_n, keep_mask),
                      ad::mul(ad::reshape(in.noisy_cos, {rows, f}), fb_mask));
      sin_n = ad::add(ad::mul(sin_n, keep_mask),
                      ad::mul(ad::reshape(in.noisy_sin, {rows, f}), fb_mask));
    }
    out.cos_t.push_back(ad::reshape(cos_n, {t_len, batch, f}));
    out.sin_t.push_back(ad::reshape(sin_n, {t_len, batch, f}));
  }
  return out;
}

std::pair<Matrix, std::vector<Mask>> chimera_forward(const SeparatorModel& model,
                                                     const Matrix& mixture_logmag) {
  const std::size_t t_len = mixture_logmag.rows(), f = mixture_logmag.cols();
  for (std::size_t i = 0; i < mixture_logmag.size(); ++i)
    if (!std::isfinite(mixture_logmag[i]))
      throw std::invalid_argument("chimera_forward: non-finite input");
  // Assemble single-lane batch constants directly from the log magnitude;
  // only the logmag field is consumed by the chimera tower.
  BatchConstants in;
  std::vector<double> lm(mixture_logmag.values());
  in.logmag = ad::constant({t_len, 1, f}, std::move(lm));
  in.frames = t_len;
  in.batch = 1;
  in.bins = f;
  ChimeraBatchOut out = chimera_forward_batch(model, in);

  Matrix v(t_len * f, model.config.embed_dim);
  const auto& vv = out.embeddings.value();
  for (std::size_t i = 0; i < vv.size(); ++i) v[i] = vv[i];
  std::vector<Mask> masks(model.config.num_sources);
  for (int c = 0; c < model.config.num_sources; ++c) {
    masks[c].kind = MaskKind::kEstimated;
    masks[c].values = Matrix(t_len, f);
    const auto& mv = out.masks[c].value();
    for (std::size_t i = 0; i < mv.size(); ++i) masks[c].values[i] = mv[i];
  }
  return {std::move(v), std::move(masks)};
}

PhaseField phase_forward(const SeparatorModel& model, const Mask& mask_c,
                         const ComplexSpectrogram& mixture) {
  if (!mask_c.values.same_shape(mixture.re))
    throw std::invalid_argument("phase_forward: mask/mixture shape mismatch");
  BatchConstants in = make_batch_constants({&mixture});
  std::vector<ad::Tensor> masks{ad::constant({in.frames, 1, in.bins}, mask_c.values.values())};
  PhaseBatchOut out = phase_forward_batch(model, masks, in);

  PhaseField field;
  field.cos_theta = Matrix(mixture.frames(), mixture.bins());
  field.sin_theta = Matrix(mixture.frames(), mixture.bins());
  const auto& cv = out.cos_t[0].value();
  const auto& sv = out.sin_t[0].value();
  for (std::size_t i = 0; i < cv.size(); ++i) {
    field.cos_theta[i] = cv[i];
    field.sin_theta[i] = sv[i];
  }
  return field;
}

ComplexSpectrogram reconstruct(const ComplexSpectrogram& mixture, const Mask& mask,
                               const PhaseField& phase) {
  if (!mask.values.same_shape(mixture.re) || !phase.cos_theta.same_shape(mixture.re))
    throw std::invalid_argument("reconstruct: shape mismatch");
  ComplexSpectrogram out;
  out.config = mixture.config;
  out.re = Matrix(mixture.frames(), mixture.bins());
  out.im = Matrix(mixture.frames(), mixture.bins());
  for (std::size_t i = 0; i < out.re.size(); ++i) {
    const double mag = std::hypot(mixture.re[i], mixture.im[i]) * mask.values[i];
    out.re[i] = mag * phase.cos_theta[i];
    out.im[i] = mag * phase.sin_theta[i];
  }
  return out;
}

std::vector<Waveform> separate(const SeparatorModel& model, const Waveform& mixture,
                               const StftConfig& cfg) {
  ComplexSpectrogram spec = stft(mixture, cfg);
  auto [v, masks] = chimera_forward(model, log_compress(magnitude(spec)));
  (void)v;
  std::vector<Waveform> out;
  out.reserve(masks.size());
  for (const auto& mask : masks) {
    PhaseField phase = phase_forward(model, mask, spec);
    Waveform w = istft(reconstruct(spec, mask, phase), cfg, mixture.samples.size());
    w.sample_rate_hz = mixture.sample_rate_hz;
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace psep
