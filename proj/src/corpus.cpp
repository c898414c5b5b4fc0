// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include "enhasr/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "enhasr/errors.hpp"

namespace fs = std::filesystem;

namespace enhasr::corpus {

std::string split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::TestClean: return "test-clean";
    case Split::TestNoisy: return "test-noisy";
  }
  return "train";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::Train;
  if (name == "valid") return Split::Valid;
  if (name == "test-clean") return Split::TestClean;
  if (name == "test-noisy") return Split::TestNoisy;
  throw DataError("manifest: unknown split '" + name + "'");
}

std::vector<int> CorpusManifest::split_indices(Split s) const {
  std::vector<int> out;
  for (size_t i = 0; i < entries.size(); ++i) {
    if (entries[i].split == s) out.push_back(int(i));
  }
  return out;
}

NoiseKind parse_noise_kind(const std::string& name) {
  if (name == "white") return NoiseKind::White;
  if (name == "babble-like" || name == "babble") return NoiseKind::BabbleLike;
  if (name == "tonal") return NoiseKind::Tonal;
  throw DataError("unknown noise kind '" + name + "'");
}

const std::vector<double>& tonal_partials_hz() {
  static const std::vector<double> partials = {500.0, 1500.0, 3700.0};
  return partials;
}

std::pair<double, double> symbol_tones(int symbol_index) {
  if (symbol_index < 0 || symbol_index >= 16) {
    throw std::invalid_argument("symbol_tones: index out of the 16-symbol table");
  }
  return {350.0 + 170.0 * symbol_index, 2500.0 + 190.0 * symbol_index};
}

namespace {

void normalize_rms(std::vector<double>& x) {
  double p = 0.0;
  for (double v : x) p += v * v;
  p = std::sqrt(p / double(x.size()));
  if (p > 0) {
    for (double& v : x) v /= p;
  }
}

void add_tone_burst(std::vector<double>& out, int start, int len, double f1, double f2, double amp,
                    double phase1, double phase2) {
  const int ramp = std::min(160, len / 4);  // 10 ms attack/release
  for (int i = 0; i < len && start + i < int(out.size()); ++i) {
    double env = 1.0;
    if (i < ramp) env = 0.5 * (1.0 - std::cos(M_PI * i / ramp));
    else if (i >= len - ramp) env = 0.5 * (1.0 - std::cos(M_PI * (len - 1 - i) / ramp));
    const double t = double(i) / dsp::kSampleRate;
    out[size_t(start + i)] +=
        amp * env * 0.5 *
        (std::sin(2.0 * M_PI * f1 * t + phase1) + std::sin(2.0 * M_PI * f2 * t + phase2));
  }
}

}  // namespace

dsp::Waveform render_transcript(const std::vector<int>& ids, uint64_t seed) {
  Rng rng(Rng::derive({seed, 0x53594c4c}));
  const int unit = int(kSyllableSeconds * dsp::kSampleRate + 0.5);
  dsp::Waveform w;
  w.samples.assign(size_t(unit) * ids.size(), 0.0);
  for (size_t k = 0; k < ids.size(); ++k) {
    const auto [f1, f2] = symbol_tones(ids[k] - 1);  // ids are 1-based (0 = blank)
    const double amp = rng.uniform(0.25, 0.45);
    add_tone_burst(w.samples, int(k) * unit, unit, f1, f2, amp, 0.0, 0.0);
  }
  return w;
}

dsp::Waveform synth_noise(NoiseKind kind, double seconds, uint64_t seed) {
  const int n = std::max(1, int(seconds * dsp::kSampleRate + 0.5));
  Rng rng(Rng::derive({seed, 0x4e4f4953, uint64_t(kind)}));
  dsp::Waveform w;
  w.samples.assign(size_t(n), 0.0);
  switch (kind) {
    case NoiseKind::White: {
      for (double& v : w.samples) v = rng.gaussian();
      break;
    }
    case NoiseKind::Tonal: {
      for (double f : tonal_partials_hz()) {
        const double phase = rng.uniform(0.0, 2.0 * M_PI);
        for (int i = 0; i < n; ++i) {
          w.samples[size_t(i)] += std::sin(2.0 * M_PI * f * i / dsp::kSampleRate + phase);
        }
      }
      break;
    }
    case NoiseKind::BabbleLike: {
      // several competing tone-syllable streams
      for (int stream = 0; stream < 8; ++stream) {
        int pos = -rng.uniform_int(1600);
        while (pos < n) {
          const int len = 1280 + rng.uniform_int(1920);  // 80..200 ms
          const int sym = rng.uniform_int(16);
          auto [f1, f2] = symbol_tones(sym);
          f1 *= 1.0 + rng.uniform(-0.05, 0.05);
          f2 *= 1.0 + rng.uniform(-0.05, 0.05);
          const double amp = rng.uniform(0.2, 1.0);
          const double p1 = rng.uniform(0.0, 2.0 * M_PI);
          const double p2 = rng.uniform(0.0, 2.0 * M_PI);
          if (pos + len > 0) add_tone_burst(w.samples, std::max(0, pos), len, f1, f2, amp, p1, p2);
          pos += len;
        }
      }
      break;
    }
  }
  normalize_rms(w.samples);
  return w;
}

namespace {

std::string make_id(Split s, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%s-%05d", split_name(s).c_str(), index);
  return buf;
}

}  // namespace

CorpusManifest synth_corpus(const SynthSpec& spec, const std::string& out_dir) {
  if (spec.vocab_size < 2 || spec.vocab_size > 16) {
    throw std::invalid_argument("synth_corpus: vocab_size must be in [2,16]");
  }
  if (spec.min_len < 1 || spec.max_len < spec.min_len) {
    throw std::invalid_argument("synth_corpus: bad transcript length range");
  }
  CorpusManifest m;
  m.root_dir = out_dir;
  m.seed = spec.seed;
  for (int k = 0; k < spec.vocab_size; ++k) m.vocab.symbols.push_back(std::string(1, char('a' + k)));

  const int n_valid = std::max(1, int(spec.n_utts * spec.valid_frac));
  const int n_clean = std::max(1, int(spec.n_utts * spec.test_clean_frac));
  const int n_noisy = std::max(1, int(spec.n_utts * spec.test_noisy_frac));
  const int n_train = spec.n_utts - n_valid - n_clean - n_noisy;
  if (n_train < 1) throw std::invalid_argument("synth_corpus: too few utterances for the splits");

  const std::vector<std::pair<Split, int>> plan = {{Split::Train, n_train},
                                                   {Split::Valid, n_valid},
                                                   {Split::TestClean, n_clean},
                                                   {Split::TestNoisy, n_noisy}};
  const NoiseKind kinds[3] = {NoiseKind::White, NoiseKind::BabbleLike, NoiseKind::Tonal};

  for (const auto& [split, count] : plan) {
    const fs::path dir = fs::path(out_dir) / "audio" / split_name(split);
    fs::create_directories(dir);
    for (int i = 0; i < count; ++i) {
      // disjoint random streams per split and index
      const uint64_t useed = Rng::derive({spec.seed, uint64_t(split), uint64_t(i)});
      Rng rng(useed);
      Utterance u;
      u.id = make_id(split, i);
      u.split = split;
      const int len = spec.min_len + rng.uniform_int(spec.max_len - spec.min_len + 1);
      for (int k = 0; k < len; ++k) u.transcript.push_back(1 + rng.uniform_int(spec.vocab_size));
      dsp::Waveform clean = render_transcript(u.transcript, useed);
      const fs::path rel = fs::path("audio") / split_name(split) / (u.id + ".wav");
      if (split == Split::TestNoisy) {
        const NoiseKind kind = kinds[i % 3];
        // held-out noise stream, disjoint from anything used in training
        dsp::Waveform noise =
            synth_noise(kind, clean.duration_s(), Rng::derive({spec.seed, 0x54455354u, uint64_t(i)}));
        u.snr_db = rng.uniform(spec.noisy_snr_lo, spec.noisy_snr_hi);
        dsp::MixResult mix = dsp::mix_at_snr(clean, noise, u.snr_db);
        // keep the reference consistent with any clipping rescale
        for (double& v : clean.samples) v *= mix.rescale;
        dsp::write_wav((fs::path(out_dir) / rel).string(), mix.mixed);
        dsp::write_wav((dir / (u.id + ".ref.wav")).string(), clean);
      } else {
        dsp::write_wav((fs::path(out_dir) / rel).string(), clean);
      }
      u.audio_path = rel.generic_string();
      m.entries.push_back(std::move(u));
    }
  }
  save_manifest((fs::path(out_dir) / "manifest.tsv").string(), m);
  rnnt::save_vocabulary((fs::path(out_dir) / "vocab.txt").string(), m.vocab);
  return m;
}

void save_manifest(const std::string& path, const CorpusManifest& m) {
  std::ofstream os(path);
  if (!os) throw DataError("manifest: cannot open for writing " + path);
  os << "# enhasr corpus seed=" << m.seed << "\n";
  for (const auto& u : m.entries) {
    os << u.id << "\t" << u.audio_path << "\t" << m.vocab.decode(u.transcript) << "\t"
       << split_name(u.split) << "\t";
    if (std::isnan(u.snr_db)) {
      os << "-";
    } else {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.3f", u.snr_db);
      os << buf;
    }
    os << "\n";
  }
  if (!os) throw DataError("manifest: write failed " + path);
}

CorpusManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw DataError("manifest: cannot open " + path);
  CorpusManifest m;
  m.root_dir = fs::path(path).parent_path().string();
  if (m.root_dir.empty()) m.root_dir = ".";
  m.vocab = rnnt::load_vocabulary((fs::path(m.root_dir) / "vocab.txt").string());

  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto pos = line.find("seed=");
      if (pos != std::string::npos) m.seed = std::stoull(line.substr(pos + 5));
      continue;
    }
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() != 5) {
      throw DataError("manifest: malformed line " + std::to_string(line_no) + " in " + path +
                      " (expected 5 tab-separated columns, got " + std::to_string(cols.size()) + ")");
    }
    Utterance u;
    u.id = cols[0];
    u.audio_path = cols[1];
    u.transcript = m.vocab.encode(cols[2]);
    u.split = parse_split(cols[3]);
    u.snr_db = cols[4] == "-" ? std::nan("") : std::stod(cols[4]);
    const fs::path audio = fs::path(m.root_dir) / u.audio_path;
    if (!fs::exists(audio)) {
      throw DataError("manifest: missing audio file " + audio.string() + " (utterance " + u.id + ")");
    }
    for (const auto& seen : m.entries) {
      if (seen.id == u.id) throw DataError("manifest: duplicate utterance id " + u.id);
    }
    m.entries.push_back(std::move(u));
  }
  if (m.entries.empty()) throw DataError("manifest: no entries in " + path);
  return m;
}

dsp::Waveform load_audio(const CorpusManifest& m, const Utterance& u) {
  return dsp::read_wav((fs::path(m.root_dir) / u.audio_path).string());
}

dsp::Waveform load_reference(const CorpusManifest& m, const Utterance& u) {
  if (u.split != Split::TestNoisy) return load_audio(m, u);
  fs::path p = fs::path(m.root_dir) / u.audio_path;
  p.replace_extension();  // drop .wav
  p += ".ref.wav";
  return dsp::read_wav(p.string());
}

}  // namespace enhasr::corpus
