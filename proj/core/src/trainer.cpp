#include "psep/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "psep/kvconfig.hpp"
#include "psep/threading.hpp"

namespace psep {

namespace {

using ad::Tensor;

std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Frame window [start, start+frames) of a spectrogram, zero rows past the end.
ComplexSpectrogram slice_spectrogram(const ComplexSpectrogram& s, std::size_t start,
                                     std::size_t frames) {
  ComplexSpectrogram out;
  out.config = s.config;
  out.re = Matrix(frames, s.bins());
  out.im = Matrix(frames, s.bins());
  for (std::size_t t = 0; t < frames; ++t) {
    const std::size_t src = start + t;
    if (src >= s.frames()) break;
    for (std::size_t f = 0; f < s.bins(); ++f) {
      out.re(t, f) = s.re(src, f);
      out.im(t, f) = s.im(src, f);
    }
  }
  return out;
}

struct ItemChunk {
  ComplexSpectrogram mix;
  std::vector<ComplexSpectrogram> sources;
};

ItemChunk make_chunk(const MixtureItem& item, const StftConfig& stft_cfg, std::size_t start,
                     std::size_t frames) {
  ItemChunk chunk;
  ComplexSpectrogram mix_full = stft(item.mixture, stft_cfg);
  const std::size_t use_frames = frames == 0 ? mix_full.frames() : frames;
  chunk.mix = slice_spectrogram(mix_full, start, use_frames);
  chunk.sources.reserve(item.sources.size());
  for (const auto& s : item.sources)
    chunk.sources.push_back(slice_spectrogram(stft(s, stft_cfg), start, use_frames));
  return chunk;
}

struct BatchLossOut {
  Tensor loss;
  double dc = 0.0, mi = 0.0, pi = 0.0, total = 0.0;
  std::vector<Permutation> perms;
};

// Eq.-style per-item losses assembled over a batch of equally sized chunks.
BatchLossOut batch_loss(const SeparatorModel& model, const std::vector<ItemChunk>& chunks,
                        const TrainConfig& cfg, const ForwardOptions& opts) {
  const std::size_t batch = chunks.size();
  const std::size_t c_count = std::size_t(model.config.num_sources);
  std::vector<const ComplexSpectrogram*> mixes(batch);
  for (std::size_t b = 0; b < batch; ++b) mixes[b] = &chunks[b].mix;
  BatchConstants in = make_batch_constants(mixes);
  const std::size_t t_len = in.frames, bins = in.bins;

  ChimeraBatchOut net = chimera_forward_batch(model, in, opts);
  PhaseBatchOut phases = phase_forward_batch(model, net.masks, in, opts);

  Tensor v3d = ad::reshape(net.embeddings,
                           {t_len, batch, bins * std::size_t(model.config.embed_dim)});

  BatchLossOut out;
  Tensor total_sum;
  for (std::size_t b = 0; b < batch; ++b) {
    const ItemChunk& chunk = chunks[b];
    LabelMatrix labels = dominance_labels(chunk.sources);
    VAWeights va = va_weights(chunk.mix);
    Matrix mix_mag = magnitude(chunk.mix);
    double max_mag = 0.0;
    for (std::size_t i = 0; i < mix_mag.size(); ++i) max_mag = std::max(max_mag, mix_mag[i]);
    const double mag_norm = max_mag > 0.0 ? 1.0 / max_mag : 0.0;

    std::vector<Matrix> targets(c_count), norm_mags(c_count);
    std::vector<PhaseField> true_phases(c_count);
    for (std::size_t j = 0; j < c_count; ++j) {
      targets[j] = mi_target(chunk.sources[j], chunk.mix, cfg.mi_variant);
      norm_mags[j] = magnitude(chunk.sources[j]);
      for (std::size_t i = 0; i < norm_mags[j].size(); ++i) norm_mags[j][i] *= mag_norm;
      true_phases[j] = phase_field(chunk.sources[j]);
    }

    Tensor v_b = ad::reshape(ad::slice_batch(v3d, b),
                             {t_len * bins, std::size_t(model.config.embed_dim)});
    Tensor dc_b = dc_loss(v_b, labels, &va);

    Tensor mag_const = ad::constant(mix_mag);
    std::vector<Tensor> mask_b(c_count);
    std::vector<PhaseEstimate> est_b(c_count);
    for (std::size_t c = 0; c < c_count; ++c) {
      mask_b[c] = ad::reshape(ad::slice_batch(net.masks[c], b), {t_len, bins});
      est_b[c].cos_t = ad::reshape(ad::slice_batch(phases.cos_t[c], b), {t_len, bins});
      est_b[c].sin_t = ad::reshape(ad::slice_batch(phases.sin_t[c], b), {t_len, bins});
    }

    Matrix mask_costs(c_count, c_count), phase_costs(c_count, c_count);
    std::vector<std::vector<Tensor>> mask_grid(c_count, std::vector<Tensor>(c_count));
    std::vector<std::vector<Tensor>> phase_grid(c_count, std::vector<Tensor>(c_count));
    for (std::size_t c = 0; c < c_count; ++c) {
      for (std::size_t j = 0; j < c_count; ++j) {
        mask_grid[c][j] = mask_approx_loss(mask_b[c], mag_const, ad::constant(targets[j]));
        phase_grid[c][j] =
            phase_pair_loss(est_b[c], true_phases[j], cfg.weight_scheme, norm_mags, j);
        mask_costs(c, j) = mask_grid[c][j].scalar();
        phase_costs(c, j) = phase_grid[c][j].scalar();
      }
    }
    auto [perm, pit_value] = pit_assign(mask_costs, &phase_costs, cfg.pit_criterion);
    (void)pit_value;

    Tensor mi_b, pi_b;
    for (std::size_t c = 0; c < c_count; ++c) {
      const std::size_t j = std::size_t(perm.mapping[c]);
      mi_b = mi_b.defined() ? ad::add(mi_b, mask_grid[c][j]) : mask_grid[c][j];
      pi_b = pi_b.defined() ? ad::add(pi_b, phase_grid[c][j]) : phase_grid[c][j];
    }
    mi_b = ad::scale(mi_b, 1.0 / double(c_count));
    pi_b = ad::scale(pi_b, 1.0 / double(c_count));

    Tensor item_total = combined_loss(dc_b, mi_b, pi_b, cfg.alpha);
    total_sum = total_sum.defined() ? ad::add(total_sum, item_total) : item_total;

    out.dc += dc_b.scalar();
    out.mi += mi_b.scalar();
    out.pi += pi_b.scalar();
    out.perms.push_back(perm);
  }
  out.loss = ad::scale(total_sum, 1.0 / double(batch));
  out.dc /= double(batch);
  out.mi /= double(batch);
  out.pi /= double(batch);
  out.total = out.loss.scalar();
  return out;
}

double validation_loss(const SeparatorModel& model, const std::vector<MixtureItem>& items,
                       const TrainConfig& cfg) {
  // Full utterances, grouped by frame count so each group batches cleanly.
  std::map<std::size_t, std::vector<const MixtureItem*>> groups;
  for (const auto& item : items)
    groups[stft_frame_count(item.mixture.samples.size(), cfg.stft)].push_back(&item);

  double total = 0.0;
  std::size_t count = 0;
  ForwardOptions opts;  // no dropout
  for (const auto& [frames, group] : groups) {
    (void)frames;
    for (std::size_t pos = 0; pos < group.size(); pos += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, group.size() - pos);
      std::vector<ItemChunk> chunks;
      chunks.reserve(n);
      for (std::size_t i = 0; i < n; ++i)
        chunks.push_back(make_chunk(*group[pos + i], cfg.stft, 0, 0));
      BatchLossOut bl = batch_loss(model, chunks, cfg, opts);
      total += bl.total * double(n);
      count += n;
    }
  }
  return count == 0 ? 0.0 : total / double(count);
}

double global_grad_norm(const std::vector<std::pair<std::string, Tensor>>& params) {
  double sq = 0.0;
  for (const auto& [name, p] : params) {
    (void)name;
    if (p.node()->grad->empty()) continue;
    for (double g : *p.node()->grad) sq += g * g;
  }
  return std::sqrt(sq);
}

void scale_grads(const std::vector<std::pair<std::string, Tensor>>& params, double factor) {
  for (const auto& [name, p] : params) {
    (void)name;
    if (p.node()->grad->empty()) continue;
    for (double& g : *p.node()->grad) g *= factor;
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (lr <= 0.0) throw std::invalid_argument("TrainConfig: lr must be > 0");
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("TrainConfig: alpha outside [0,1]");
  if (patience < 1) throw std::invalid_argument("TrainConfig: patience must be >= 1");
  if (max_epochs < 1) throw std::invalid_argument("TrainConfig: max_epochs must be >= 1");
  if (chunk_frames == 0 || batch_size == 0)
    throw std::invalid_argument("TrainConfig: zero chunk or batch size");
  stft.validate();
}

Corpus Corpus::load(const std::string& dir) {
  Corpus corpus;
  for (const auto& entry : read_manifest(dir)) {
    MixtureItem item = load_item(dir, entry);
    item.snr_db = entry.snr_db;
    if (entry.split == "train") corpus.train.push_back(std::move(item));
    else if (entry.split == "valid") corpus.valid.push_back(std::move(item));
    else if (entry.split == "test") corpus.test.push_back(std::move(item));
    else throw std::runtime_error("Corpus::load: unknown split " + entry.split);
  }
  return corpus;
}

Corpus Corpus::generate(const CorpusSpec& spec) {
  Corpus corpus;
  for (int i = 0; i < spec.n_train; ++i) corpus.train.push_back(generate_item(spec, "train", i));
  for (int i = 0; i < spec.n_valid; ++i) corpus.valid.push_back(generate_item(spec, "valid", i));
  for (int i = 0; i < spec.n_test; ++i) corpus.test.push_back(generate_item(spec, "test", i));
  return corpus;
}

void adam_step(const std::vector<std::pair<std::string, Tensor>>& params, AdamState& state,
               double lr, double beta1, double beta2, double eps) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].second.numel(), 0.0);
      state.v[i].assign(params[i].second.numel(), 0.0);
    }
    state.t = 0;
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(beta1, double(state.t));
  const double bc2 = 1.0 - std::pow(beta2, double(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, p] = params[i];
    if (p.node()->grad->empty()) continue;
    const auto& g = *p.node()->grad;
    auto& val = p.mutable_value();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < g.size(); ++k) {
      if (!std::isfinite(g[k]))
        throw std::runtime_error("adam_step: non-finite gradient in " + name);
      m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
      v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
      val[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + eps);
    }
  }
}

LossBreakdown evaluate_item_loss(const SeparatorModel& model, const MixtureItem& item,
                                 const TrainConfig& cfg) {
  std::vector<ItemChunk> chunks{make_chunk(item, cfg.stft, 0, 0)};
  BatchLossOut bl = batch_loss(model, chunks, cfg, ForwardOptions{});
  LossBreakdown out;
  out.dc = bl.dc;
  out.mi = bl.mi;
  out.pi = bl.pi;
  out.total = bl.total;
  out.chosen_perm = bl.perms[0];
  return out;
}

TrainResult train(const TrainConfig& cfg, const Corpus& corpus, SeparatorModel& model) {
  cfg.validate();
  if (corpus.train.empty()) throw std::invalid_argument("train: empty training corpus");
  configure_blas_threads();

  auto params = model.named_params();
  AdamState adam;
  TrainResult result;

  std::vector<std::size_t> item_frames(corpus.train.size());
  for (std::size_t i = 0; i < corpus.train.size(); ++i)
    item_frames[i] = stft_frame_count(corpus.train[i].mixture.samples.size(), cfg.stft);

  const std::string snapshot = config_snapshot(cfg, model.config);
  int epochs_without_improvement = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::mt19937_64 epoch_rng(mix64(cfg.seed, std::uint64_t(epoch)));
    auto batches = epoch_batches(item_frames, cfg.chunk_frames, cfg.batch_size, epoch_rng);

    double acc_dc = 0.0, acc_mi = 0.0, acc_pi = 0.0, acc_total = 0.0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      std::vector<ItemChunk> chunks;
      chunks.reserve(batches[bi].size());
      for (const Chunk& c : batches[bi])
        chunks.push_back(
            make_chunk(corpus.train[c.item_index], cfg.stft, c.start_frame, cfg.chunk_frames));

      ForwardOptions opts;
      opts.training = true;
      opts.dropout_seed = mix64(cfg.seed, mix64(std::uint64_t(epoch), bi));

      ad::Tape tape;
      BatchLossOut bl;
      {
        ad::TapeScope scope(tape);
        bl = batch_loss(model, chunks, cfg, opts);
        if (!std::isfinite(bl.total))
          throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   " batch " + std::to_string(bi));
        tape.backward(bl.loss);
      }
      const double gnorm = global_grad_norm(params);
      if (cfg.grad_clip > 0.0 && gnorm > cfg.grad_clip)
        scale_grads(params, cfg.grad_clip / gnorm);
      adam_step(params, adam, cfg.lr);
      for (auto& [name, p] : params) {
        (void)name;
        p.zero_grad();
      }
      acc_dc += bl.dc;
      acc_mi += bl.mi;
      acc_pi += bl.pi;
      acc_total += bl.total;
    }

    const double val_total = validation_loss(model, corpus.valid, cfg);
    EpochLog entry;
    entry.epoch = epoch;
    entry.dc = acc_dc / double(batches.size());
    entry.mi = acc_mi / double(batches.size());
    entry.pi = acc_pi / double(batches.size());
    entry.total = acc_total / double(batches.size());
    entry.val_total = val_total;
    entry.alpha = cfg.alpha;
    entry.lr = cfg.lr;
    result.log.push_back(entry);
    result.epochs_run = epoch;

    if (val_total < result.best_val) {
      result.best_val = val_total;
      result.best = make_checkpoint(model, &adam, std::uint64_t(epoch), val_total, snapshot);
      epochs_without_improvement = 0;
    } else {
      ++epochs_without_improvement;
      if (epochs_without_improvement >= cfg.patience) break;
    }
  }
  if (result.best.entries.empty())
    result.best = make_checkpoint(model, &adam, 0, result.best_val, snapshot);
  return result;
}

TrainResult curriculum_train(const TrainConfig& cfg, const Corpus& corpus, SeparatorModel& model) {
  TrainResult stage1 = train(cfg, corpus, model);

  load_model_params(model, stage1.best);
  TrainConfig cfg2 = cfg;
  cfg2.alpha = 0.5;
  cfg2.seed = mix64(cfg.seed, 0x5eedca5cade2ull);

  TrainResult stage2 = train(cfg2, corpus, model);

  TrainResult out;
  out.log = stage1.log;
  for (EpochLog e : stage2.log) {
    e.epoch += stage1.epochs_run;
    out.log.push_back(e);
  }
  out.epochs_run = stage1.epochs_run + stage2.epochs_run;
  out.alpha_switch_epoch = stage1.epochs_run + 1;
  out.best = stage2.best;
  out.best_val = stage2.best_val;
  out.phase1_best = stage1.best;
  return out;
}

// ---- config snapshot / checkpoint packing ----

namespace {

std::string pit_str(PitCriterion c) { return c == PitCriterion::kMaskDependent ? "md" : "mp"; }
std::string weight_str(WeightSchemeKind k) {
  switch (k) {
    case WeightSchemeKind::kPlain: return "plain";
    case WeightSchemeKind::kMwl: return "mwl";
    case WeightSchemeKind::kImwl: return "imwl";
    default: return "joint";
  }
}
std::string act_str(MaskActivation a) {
  return a == MaskActivation::kSigmoid ? "sigmoid" : "relu";
}
std::string mi_str(MiVariant v) { return v == MiVariant::kMsa ? "msa" : "tpsa"; }

}  // namespace

PitCriterion pit_criterion_from_string(const std::string& s) {
  if (s == "md") return PitCriterion::kMaskDependent;
  if (s == "mp") return PitCriterion::kMaskPhase;
  throw std::invalid_argument("unknown PIT criterion: " + s + " (want md|mp)");
}

WeightSchemeKind weight_scheme_from_string(const std::string& s) {
  if (s == "plain") return WeightSchemeKind::kPlain;
  if (s == "mwl") return WeightSchemeKind::kMwl;
  if (s == "imwl") return WeightSchemeKind::kImwl;
  if (s == "joint") return WeightSchemeKind::kJoint;
  throw std::invalid_argument("unknown phase weight scheme: " + s +
                              " (want plain|mwl|imwl|joint)");
}

MaskActivation mask_activation_from_string(const std::string& s) {
  if (s == "sigmoid") return MaskActivation::kSigmoid;
  if (s == "relu") return MaskActivation::kRelu;
  throw std::invalid_argument("unknown mask activation: " + s + " (want sigmoid|relu)");
}

MiVariant mi_variant_from_string(const std::string& s) {
  if (s == "msa") return MiVariant::kMsa;
  if (s == "tpsa") return MiVariant::kTpsa;
  throw std::invalid_argument("unknown mask loss variant: " + s + " (want msa|tpsa)");
}

std::string config_snapshot(const TrainConfig& cfg, const ModelConfig& model_cfg) {
  std::ostringstream out;
  out.precision(17);
  out << "lr = " << cfg.lr << "\n"
      << "max_epochs = " << cfg.max_epochs << "\n"
      << "patience = " << cfg.patience << "\n"
      << "alpha = " << cfg.alpha << "\n"
      << "pit_criterion = " << pit_str(cfg.pit_criterion) << "\n"
      << "phase_weight = " << weight_str(cfg.weight_scheme.kind) << "\n"
      << "gamma = " << cfg.weight_scheme.gamma << "\n"
      << "mask_activation = " << act_str(cfg.mask_activation) << "\n"
      << "mi_variant = " << mi_str(cfg.mi_variant) << "\n"
      << "seed = " << cfg.seed << "\n"
      << "chunk_frames = " << cfg.chunk_frames << "\n"
      << "batch = " << cfg.batch_size << "\n"
      << "grad_clip = " << cfg.grad_clip << "\n"
      << "fft_size = " << cfg.stft.fft_size << "\n"
      << "hop = " << cfg.stft.hop << "\n"
      << "layers = " << model_cfg.layers << "\n"
      << "hidden = " << model_cfg.hidden << "\n"
      << "embed_dim = " << model_cfg.embed_dim << "\n"
      << "sources = " << model_cfg.num_sources << "\n"
      << "dropout = " << model_cfg.dropout << "\n";
  return out.str();
}

Checkpoint make_checkpoint(const SeparatorModel& model, const AdamState* adam,
                           std::uint64_t epoch, double best_val, const std::string& config_text) {
  Checkpoint ckpt;
  ckpt.config_text = config_text;
  ckpt.epoch = epoch;
  ckpt.best_val_loss = best_val;
  auto params = model.named_params();
  for (const auto& [name, p] : params)
    ckpt.entries.push_back({name, p.shape(), p.value()});
  if (adam && adam->m.size() == params.size()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      ckpt.entries.push_back({"adam.m." + params[i].first, params[i].second.shape(), adam->m[i]});
      ckpt.entries.push_back({"adam.v." + params[i].first, params[i].second.shape(), adam->v[i]});
    }
    ckpt.entries.push_back({"adam.t", {1}, {double(adam->t)}});
  }
  return ckpt;
}

void load_model_params(SeparatorModel& model, const Checkpoint& ckpt) {
  for (auto& [name, p] : model.named_params()) {
    const TensorEntry* e = ckpt.find(name);
    if (!e) throw std::runtime_error("checkpoint: missing parameter " + name);
    if (e->shape != p.shape())
      throw std::runtime_error("checkpoint: shape mismatch for " + name);
    p.mutable_value() = e->data;
    p.zero_grad();
  }
}

ModelConfig model_config_from_snapshot(const std::string& config_text) {
  auto kv = parse_kvconfig(config_text);
  ModelConfig cfg;
  cfg.layers = std::stoi(kv.at("layers"));
  cfg.hidden = std::stoi(kv.at("hidden"));
  cfg.embed_dim = std::stoi(kv.at("embed_dim"));
  cfg.num_sources = std::stoi(kv.at("sources"));
  cfg.freq_bins = std::stoi(kv.at("fft_size")) / 2 + 1;
  cfg.mask_activation = mask_activation_from_string(kv.at("mask_activation"));
  cfg.dropout = std::stod(kv.at("dropout"));
  return cfg;
}

TrainConfig train_config_from_snapshot(const std::string& config_text) {
  auto kv = parse_kvconfig(config_text);
  TrainConfig cfg;
  cfg.lr = std::stod(kv.at("lr"));
  cfg.max_epochs = std::stoi(kv.at("max_epochs"));
  cfg.patience = std::stoi(kv.at("patience"));
  cfg.alpha = std::stod(kv.at("alpha"));
  cfg.pit_criterion = pit_criterion_from_string(kv.at("pit_criterion"));
  cfg.weight_scheme.kind = weight_scheme_from_string(kv.at("phase_weight"));
  cfg.weight_scheme.gamma = std::stod(kv.at("gamma"));
  cfg.mask_activation = mask_activation_from_string(kv.at("mask_activation"));
  cfg.mi_variant = mi_variant_from_string(kv.at("mi_variant"));
  cfg.seed = std::stoull(kv.at("seed"));
  cfg.chunk_frames = std::stoul(kv.at("chunk_frames"));
  cfg.batch_size = std::stoul(kv.at("batch"));
  cfg.grad_clip = std::stod(kv.at("grad_clip"));
  cfg.stft.fft_size = std::stoi(kv.at("fft_size"));
  cfg.stft.hop = std::stoi(kv.at("hop"));
  return cfg;
}

}  // namespace psep
