#include "psep/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace psep {

namespace {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 over the combined state
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

std::uint64_t split_tag(const std::string& split) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : split) h = (h ^ std::uint64_t(std::uint8_t(c))) * 1099511628211ull;
  return h;
}

double signal_power(const Waveform& w) {
  double p = 0.0;
  for (double v : w.samples) p += v * v;
  return w.samples.empty() ? 0.0 : p / double(w.samples.size());
}

struct Resonator {
  double a1 = 0.0, a2 = 0.0, b0 = 1.0;
  double y1 = 0.0, y2 = 0.0;

  void tune(double fc, double bw, double fs) {
    const double r = std::exp(-std::numbers::pi * bw / fs);
    a1 = -2.0 * r * std::cos(2.0 * std::numbers::pi * fc / fs);
    a2 = r * r;
    b0 = 1.0 - r;  // rough unity-ish gain at resonance
  }

  double step(double x) {
    const double y = b0 * x - a1 * y1 - a2 * y2;
    y2 = y1;
    y1 = y;
    return y;
  }
};

}  // namespace

void CorpusSpec::validate() const {
  if (n_train < 1 || n_valid < 1 || n_test < 1)
    throw std::invalid_argument("CorpusSpec: split counts must be >= 1");
  if (snr_lo_db > snr_hi_db) throw std::invalid_argument("CorpusSpec: snr range inverted");
  if (duration_s < 0.5) throw std::invalid_argument("CorpusSpec: duration must be >= 0.5 s");
  if (sample_rate_hz <= 0) throw std::invalid_argument("CorpusSpec: bad sample rate");
}

SpeakerProfile speaker_profile(int speaker_id) {
  const int id = ((speaker_id % kSpeakerBankSize) + kSpeakerBankSize) % kSpeakerBankSize;
  SpeakerProfile p;
  p.f0_base_hz = 95.0 * std::pow(1.14, id);  // ~95 .. ~240 Hz across the bank
  p.f0_range_oct = 0.15 + 0.02 * (id % 3);
  const double f1[] = {350, 420, 500, 580, 650, 480, 550, 400};
  const double f2[] = {1100, 1350, 1600, 1850, 2050, 1250, 1750, 1500};
  const double f3[] = {2400, 2600, 2800, 3000, 2500, 2900, 2700, 3100};
  p.formant_hz[0] = f1[id];
  p.formant_hz[1] = f2[id];
  p.formant_hz[2] = f3[id];
  p.formant_bw_hz[0] = 70.0 + 6.0 * id;
  p.formant_bw_hz[1] = 110.0 + 8.0 * id;
  p.formant_bw_hz[2] = 170.0 + 10.0 * id;
  p.formant_gain[0] = 1.0;
  p.formant_gain[1] = 0.45 + 0.08 * (id % 4);
  p.formant_gain[2] = 0.15 + 0.05 * (id % 5);
  p.tilt = 0.65 + 0.1 * id;  // brighter to darker across the bank
  p.syllable_rate_hz = 2.6 + 0.3 * (id % 5);
  p.breath = 0.015 + 0.004 * (id % 4);
  return p;
}

Waveform synth_speaker(std::uint64_t seed, double duration_s, const SpeakerProfile& profile,
                       int sample_rate_hz) {
  if (duration_s < 0.5) throw std::invalid_argument("synth_speaker: duration must be >= 0.5 s");
  const double fs = sample_rate_hz;
  const std::size_t n = std::size_t(std::llround(duration_s * fs));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  // Pitch contour: control points every ~120 ms, linearly interpolated.
  const std::size_t ctrl_step = std::size_t(0.12 * fs);
  const std::size_t n_ctrl = n / ctrl_step + 2;
  std::vector<double> f0_ctrl(n_ctrl);
  for (auto& v : f0_ctrl)
    v = profile.f0_base_hz * std::pow(2.0, (unit(rng) * 2.0 - 1.0) * profile.f0_range_oct);

  // Syllabic gate: alternating voiced / silent stretches with smooth edges.
  std::vector<double> env(n, 0.0);
  {
    const double mean_on = 1.0 / profile.syllable_rate_hz * 0.7;
    const std::size_t ramp = std::size_t(0.015 * fs);
    std::size_t pos = 0;
    bool on = true;
    while (pos < n) {
      const double span_s = on ? mean_on * (0.6 + 0.8 * unit(rng)) : 0.05 + 0.12 * unit(rng);
      std::size_t span = std::max<std::size_t>(ramp * 2 + 1, std::size_t(span_s * fs));
      span = std::min(span, n - pos);
      if (on) {
        const double level = 0.6 + 0.4 * unit(rng);
        for (std::size_t i = 0; i < span; ++i) {
          double g = 1.0;
          if (i < ramp) g = 0.5 - 0.5 * std::cos(std::numbers::pi * i / double(ramp));
          else if (span - i <= ramp)
            g = 0.5 - 0.5 * std::cos(std::numbers::pi * (span - i) / double(ramp));
          env[pos + i] = level * g;
        }
      }
      pos += span;
      on = !on;
    }
  }

  // Harmonic source with per-harmonic rolloff, then parallel resonators.
  const int max_harmonics = 48;
  std::vector<double> phase(max_harmonics, 0.0);
  std::vector<double> amp(max_harmonics);
  for (int k = 0; k < max_harmonics; ++k) amp[k] = std::pow(double(k + 1), -profile.tilt);

  Resonator res[3];
  std::vector<double> drift_ctrl(3 * n_ctrl);
  for (auto& v : drift_ctrl) v = 1.0 + (unit(rng) * 2.0 - 1.0) * 0.08;

  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> out(n, 0.0);
  const double nyq_frac = 0.45 * fs;
  double noise_lp = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i / ctrl_step;
    const double frac = double(i % ctrl_step) / double(ctrl_step);
    const double f0 = f0_ctrl[c] * (1.0 - frac) + f0_ctrl[c + 1] * frac;

    if (i % 64 == 0) {  // retune drifting resonators per small block
      for (int r = 0; r < 3; ++r) {
        const double d = drift_ctrl[r * n_ctrl + c] * (1.0 - frac) +
                         drift_ctrl[r * n_ctrl + std::min(c + 1, n_ctrl - 1)] * frac;
        res[r].tune(profile.formant_hz[r] * d, profile.formant_bw_hz[r], fs);
      }
    }

    double src = 0.0;
    for (int k = 0; k < max_harmonics; ++k) {
      const double fk = (k + 1) * f0;
      if (fk > nyq_frac) break;
      phase[k] += 2.0 * std::numbers::pi * fk / fs;
      if (phase[k] > 2.0 * std::numbers::pi) phase[k] -= 2.0 * std::numbers::pi;
      src += amp[k] * std::sin(phase[k]);
    }

    double shaped = 0.0;
    for (int r = 0; r < 3; ++r) shaped += profile.formant_gain[r] * res[r].step(src);

    noise_lp = 0.9 * noise_lp + 0.1 * gauss(rng);
    out[i] = env[i] * (shaped + profile.breath * 30.0 * noise_lp);
  }

  double peak = 0.0;
  for (double v : out) peak = std::max(peak, std::abs(v));
  const double norm = peak > 0.0 ? 0.95 / peak : 1.0;
  for (double& v : out) v *= norm;

  Waveform w;
  w.sample_rate_hz = sample_rate_hz;
  w.samples = std::move(out);
  return w;
}

MixtureItem make_mixture(const Waveform& s1, const Waveform& s2, double snr_db,
                         const std::string& id) {
  if (s1.samples.size() != s2.samples.size())
    throw std::invalid_argument("make_mixture: length mismatch");
  const double p1 = signal_power(s1), p2 = signal_power(s2);
  if (p1 <= 0.0 || p2 <= 0.0) throw std::invalid_argument("make_mixture: zero-power source");

  // Scale s2 so that 10 log10(P1/P2') = snr_db.
  const double gain = std::sqrt(p1 / (p2 * std::pow(10.0, snr_db / 10.0)));
  const std::size_t n = s1.samples.size();
  std::vector<double> a = s1.samples, b(n);
  for (std::size_t i = 0; i < n; ++i) b[i] = s2.samples[i] * gain;

  double peak = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    peak = std::max({peak, std::abs(a[i] + b[i]), std::abs(a[i]), std::abs(b[i])});
  if (peak > 0.98) {
    const double k = 0.98 / peak;
    for (std::size_t i = 0; i < n; ++i) {
      a[i] *= k;
      b[i] *= k;
    }
  }

  MixtureItem item;
  item.id = id;
  item.snr_db = snr_db;
  item.sources.resize(2);
  item.sources[0].sample_rate_hz = s1.sample_rate_hz;
  item.sources[1].sample_rate_hz = s1.sample_rate_hz;
  item.sources[0].samples = std::move(a);
  item.sources[1].samples = std::move(b);
  item.mixture.sample_rate_hz = s1.sample_rate_hz;
  item.mixture.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    item.mixture.samples[i] = item.sources[0].samples[i] + item.sources[1].samples[i];
  return item;
}

MixtureItem generate_item(const CorpusSpec& spec, const std::string& split, int index) {
  spec.validate();
  const std::uint64_t base = mix_seed(spec.seed, mix_seed(split_tag(split), std::uint64_t(index)));
  std::mt19937_64 rng(base);
  std::uniform_int_distribution<int> pick(0, kSpeakerBankSize - 1);
  const int sp1 = pick(rng);
  int sp2 = pick(rng);
  while (sp2 == sp1) sp2 = pick(rng);
  std::uniform_real_distribution<double> snr(spec.snr_lo_db, spec.snr_hi_db);
  const double snr_db = snr(rng);
  const std::uint64_t seed1 = mix_seed(base, 101), seed2 = mix_seed(base, 202);

  Waveform u1 = synth_speaker(seed1, spec.duration_s, speaker_profile(sp1), spec.sample_rate_hz);
  Waveform u2 = synth_speaker(seed2, spec.duration_s, speaker_profile(sp2), spec.sample_rate_hz);

  std::ostringstream id;
  id << split << "_" << index << "_sp" << sp1 << "_sp" << sp2;
  return make_mixture(u1, u2, snr_db, id.str());
}

namespace {

// Quantize so the written mixture is the integer sum of the written sources:
// dyadic values qi/32768 add exactly in doubles, so additivity survives the
// WAV round trip.
void quantize_item(MixtureItem& item) {
  const std::size_t n = item.mixture.samples.size();
  for (auto& s : item.sources)
    for (auto& v : s.samples) {
      double q = std::lrint(v * 32768.0);
      q = std::min(std::max(q, -32768.0), 32767.0);
      v = q / 32768.0;
    }
  for (std::size_t i = 0; i < n; ++i) {
    double total = 0.0;
    for (const auto& s : item.sources) total += s.samples[i];
    item.mixture.samples[i] = total;
  }
}

}  // namespace

void write_corpus(const CorpusSpec& spec, const std::string& dir) {
  spec.validate();
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "wav");

  std::ofstream manifest(fs::path(dir) / "manifest.tsv");
  if (!manifest) throw std::runtime_error("write_corpus: cannot write manifest in " + dir);

  const std::pair<std::string, int> splits[] = {
      {"train", spec.n_train}, {"valid", spec.n_valid}, {"test", spec.n_test}};
  for (const auto& [split, count] : splits) {
    for (int i = 0; i < count; ++i) {
      MixtureItem item = generate_item(spec, split, i);
      quantize_item(item);
      const std::uint64_t item_seed =
          mix_seed(spec.seed, mix_seed(split_tag(split), std::uint64_t(i)));
      const std::string mix_rel = "wav/" + item.id + "_mix.wav";
      const std::string s1_rel = "wav/" + item.id + "_s1.wav";
      const std::string s2_rel = "wav/" + item.id + "_s2.wav";
      write_wav((fs::path(dir) / mix_rel).string(), item.mixture);
      write_wav((fs::path(dir) / s1_rel).string(), item.sources[0]);
      write_wav((fs::path(dir) / s2_rel).string(), item.sources[1]);
      // SNR recorded to full precision for reproducibility checks.
      manifest.precision(17);
      manifest << item.id << '\t' << split << '\t' << mix_rel << '\t' << s1_rel << '\t' << s2_rel
               << '\t' << item.snr_db << '\t' << item_seed << '\n';
    }
  }
}

std::vector<ManifestEntry> read_manifest(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "manifest.tsv");
  if (!in) throw std::runtime_error("read_manifest: cannot open manifest in " + dir);
  std::vector<ManifestEntry> entries;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    std::string snr;
    std::string seed;
    if (!std::getline(ls, e.id, '\t') || !std::getline(ls, e.split, '\t') ||
        !std::getline(ls, e.mix_path, '\t') || !std::getline(ls, e.s1_path, '\t') ||
        !std::getline(ls, e.s2_path, '\t') || !std::getline(ls, snr, '\t') ||
        !std::getline(ls, seed, '\t'))
      throw std::runtime_error("read_manifest: malformed line: " + line);
    e.snr_db = std::stod(snr);
    e.seed = std::stoull(seed);
    entries.push_back(std::move(e));
  }
  if (entries.empty()) throw std::runtime_error("read_manifest: empty corpus in " + dir);
  return entries;
}

MixtureItem load_item(const std::string& dir, const ManifestEntry& entry) {
  namespace fs = std::filesystem;
  MixtureItem item;
  item.id = entry.id;
  item.mixture = read_wav((fs::path(dir) / entry.mix_path).string());
  item.sources.push_back(read_wav((fs::path(dir) / entry.s1_path).string()));
  item.sources.push_back(read_wav((fs::path(dir) / entry.s2_path).string()));
  return item;
}

std::vector<std::vector<Chunk>> epoch_batches(const std::vector<std::size_t>& item_frames,
                                              std::size_t chunk_frames, std::size_t batch_size,
                                              std::mt19937_64& rng) {
  if (item_frames.empty()) throw std::invalid_argument("epoch_batches: empty corpus");
  if (chunk_frames == 0 || batch_size == 0)
    throw std::invalid_argument("epoch_batches: zero chunk or batch size");

  std::vector<std::size_t> order(item_frames.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<Chunk>> batches;
  std::vector<Chunk> current;
  for (std::size_t idx : order) {
    Chunk c;
    c.item_index = idx;
    if (item_frames[idx] > chunk_frames) {
      std::uniform_int_distribution<std::size_t> start(0, item_frames[idx] - chunk_frames);
      c.start_frame = start(rng);
    }
    current.push_back(c);
    if (current.size() == batch_size) {
      batches.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) batches.push_back(std::move(current));
  return batches;
}

}  // namespace psep
