// Copyright 2026 the enhasr authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "enhasr/dsp.hpp"
#include "enhasr/rnnt.hpp"

namespace enhasr::corpus {

enum class Split { Train, Valid, TestClean, TestNoisy };
std::string split_name(Split s);
Split parse_split(const std::string& name);

struct Utterance {
  std::string id;
  std::string audio_path;  // relative to the manifest directory
  std::vector<int> transcript;
  Split split = Split::Train;
  double snr_db = std::nan("");  // recorded for the noisy test split
};

struct CorpusManifest {
  std::string root_dir;
  std::vector<Utterance> entries;
  rnnt::Vocabulary vocab;
  uint64_t seed = 0;

  std::vector<int> split_indices(Split s) const;
};

struct SynthSpec {
  int n_utts = 2000;
  int vocab_size = 8;  // <= 16
  uint64_t seed = 1;
  int min_len = 2, max_len = 6;
  double valid_frac = 0.075, test_clean_frac = 0.075, test_noisy_frac = 0.1;
  double noisy_snr_lo = 0.0, noisy_snr_hi = 15.0;
};

// Writes WAVs under <out_dir>/audio/<split>/ plus manifest.tsv and vocab.txt.
// Noisy test utterances also get a clean reference "<id>.ref.wav".
CorpusManifest synth_corpus(const SynthSpec& spec, const std::string& out_dir);

enum class NoiseKind { White, BabbleLike, Tonal };
NoiseKind parse_noise_kind(const std::string& name);
dsp::Waveform synth_noise(NoiseKind kind, double seconds, uint64_t seed);
const std::vector<double>& tonal_partials_hz();

inline constexpr double kSyllableSeconds = 0.12;
// Frequencies of the two simultaneous sinusoids backing symbol k.
std::pair<double, double> symbol_tones(int symbol_index);
// Deterministic audio for a transcript; per-utterance amplitude jitter only.
dsp::Waveform render_transcript(const std::vector<int>& ids, uint64_t seed);

void save_manifest(const std::string& path, const CorpusManifest& m);
// Expects vocab.txt next to the manifest; verifies referenced audio exists.
CorpusManifest load_manifest(const std::string& path);

dsp::Waveform load_audio(const CorpusManifest& m, const Utterance& u);
// Clean reference of a noisy utterance ("<id>.ref.wav"); clean utterances
// reference their own audio.
dsp::Waveform load_reference(const CorpusManifest& m, const Utterance& u);

}  // namespace enhasr::corpus
