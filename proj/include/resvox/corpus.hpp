#pragma once

// Synthetic corpus with closed-form structure. Every utterance field is a
// deterministic function of (seed, speaker, emotion, phonemes) plus seeded
// noise, and the constants behind the rules are derivable from the corpus
// parameters alone, so tests can recompute expected values independently.
//
// Generation rules:
//   duration[i]     = 1 + (hash(seed, phoneme, speaker, emotion) mod Dmax)
//   pitch[t]        = speaker_base(u) + emotion_offset(v) + phoneme_wiggle(p_t)
//   energy[t]       = speaker_energy(u) + emotion_energy(v)
//   mel[t][0]       = pitch[t] + noise
//   mel[t][1]       = energy[t]
//   mel[t][c >= 2]  = energy[t] * (phoneme_profile[p_t][c] +
//                     speaker_profile[u][c] + emotion_profile[v][c]) + noise
//
// Pitch augmentation is additive on pitch and channel 0; energy augmentation
// is multiplicative on energy, channel 1, and channels >= 2 (which are built
// proportional to energy, so scaling stays consistent with the rules).

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <map>
#include <string>
#include <vector>

#include "resvox/blob_io.hpp"
#include "resvox/fsutil.hpp"
#include "resvox/tensor.hpp"

namespace resvox {

struct CorpusParams {
  std::uint64_t seed = 0;
  long speakers = 4;
  long emotions = 3;
  long per_pair = 40;
  long phoneme_inventory = 24;
  long mel_dim = 16;
  long duration_max = 4;
  long min_phonemes = 6;
  long max_phonemes = 12;
  double noise_amp = 0.0;

  void validate() const {
    require(speakers >= 1 && emotions >= 1 && per_pair >= 1,
            "corpus: speakers, emotions, per_pair must be positive");
    require(phoneme_inventory >= 2, "corpus: need at least 2 phonemes");
    require(mel_dim >= 3,
            "corpus: mel_dim must be >= 3 (pitch, energy, timbre channels)");
    require(duration_max >= 1, "corpus: duration_max must be >= 1");
    require(min_phonemes >= 1 && max_phonemes >= min_phonemes,
            "corpus: bad phoneme length range");
    require(noise_amp >= 0.0, "corpus: noise_amp must be >= 0");
  }
};

struct Utterance {
  long id = 0;
  long speaker = 0;
  long emotion = 0;
  std::vector<long> phonemes;   // [L]
  std::vector<long> durations;  // [L], frames per phoneme
  std::vector<double> pitch;    // [T]
  std::vector<double> energy;   // [T]
  Tensor mel;                   // [T, mel_dim]
  double pitch_shift = 0.0;     // accumulated augmentation shift
  double energy_factor = 1.0;   // accumulated augmentation factor

  long phoneme_count() const { return long(phonemes.size()); }
  long frame_count() const { return long(pitch.size()); }
};

// Frame-level phoneme ids implied by the durations.
inline std::vector<long> expand_to_frames(const std::vector<long>& phonemes,
                                          const std::vector<long>& durations) {
  require(phonemes.size() == durations.size(),
          "expand_to_frames: size mismatch");
  std::vector<long> frames;
  for (size_t i = 0; i < phonemes.size(); ++i) {
    require(durations[i] >= 0, "expand_to_frames: negative duration");
    for (long r = 0; r < durations[i]; ++r) frames.push_back(phonemes[i]);
  }
  return frames;
}

// The seeded constants behind the generation rules.
struct GeneratorConstants {
  std::vector<double> speaker_pitch_base;    // [U] in [-0.5, 0.5]
  std::vector<double> emotion_pitch_offset;  // [V] in [-0.5, 0.5]
  std::vector<double> phoneme_pitch;         // [P] in [-0.5, 0.5]
  std::vector<double> speaker_energy;        // [U] in [0.5, 1.0]
  std::vector<double> emotion_energy;        // [V] in [0.0, 0.5]
  // per-channel profiles for mel channels 2..M-1, row-major [count][M-2]
  std::vector<double> phoneme_profile;  // [P][M-2] in [-0.4, 0.4]
  std::vector<double> speaker_profile;  // [U][M-2] in [-0.6, 0.6]
  std::vector<double> emotion_profile;  // [V][M-2] in [-0.4, 0.4]
  long timbre_channels = 0;

  static GeneratorConstants derive(const CorpusParams& p) {
    GeneratorConstants c;
    c.timbre_channels = p.mel_dim - 2;
    auto fill = [&](std::vector<double>& v, const char* tag, long n, double lo,
                    double hi) {
      Rng rng = seeded_stream(p.seed, std::string("corpus-const-") + tag);
      v.resize(size_t(n));
      for (long i = 0; i < n; ++i) v[size_t(i)] = rng.uniform(lo, hi);
    };
    fill(c.speaker_pitch_base, "speaker-pitch", p.speakers, -0.5, 0.5);
    fill(c.emotion_pitch_offset, "emotion-pitch", p.emotions, -0.5, 0.5);
    fill(c.phoneme_pitch, "phoneme-pitch", p.phoneme_inventory, -0.5, 0.5);
    fill(c.speaker_energy, "speaker-energy", p.speakers, 0.5, 1.0);
    fill(c.emotion_energy, "emotion-energy", p.emotions, 0.0, 0.5);
    long tc = c.timbre_channels;
    fill(c.phoneme_profile, "phoneme-profile", p.phoneme_inventory * tc, -0.4,
         0.4);
    fill(c.speaker_profile, "speaker-profile", p.speakers * tc, -0.6, 0.6);
    fill(c.emotion_profile, "emotion-profile", p.emotions * tc, -0.4, 0.4);
    return c;
  }
};

inline long rule_duration(std::uint64_t seed, long phoneme, long speaker,
                          long emotion, long duration_max) {
  Rng h(seeded_stream(seed, "duration-rule").state);
  h.state ^= std::uint64_t(phoneme) * 0x9e3779b97f4a7c15ull;
  h.next_u64();
  h.state ^= std::uint64_t(speaker) * 0xc2b2ae3d27d4eb4full;
  h.next_u64();
  h.state ^= std::uint64_t(emotion) * 0x165667b19e3779f9ull;
  return 1 + long(h.next_u64() % std::uint64_t(duration_max));
}

struct Corpus {
  CorpusParams params;
  std::vector<Utterance> utterances;

  const Utterance& by_id(long id) const {
    for (const Utterance& u : utterances)
      if (u.id == id) return u;
    fail("corpus: no utterance with id ", id);
  }
};

inline Corpus generate_corpus(const CorpusParams& params) {
  params.validate();
  const GeneratorConstants k = GeneratorConstants::derive(params);
  Corpus corpus;
  corpus.params = params;
  long id = 0;
  for (long u = 0; u < params.speakers; ++u) {
    for (long v = 0; v < params.emotions; ++v) {
      for (long i = 0; i < params.per_pair; ++i, ++id) {
        Rng rng = seeded_stream(params.seed, "utterance-" + std::to_string(id));
        Utterance utt;
        utt.id = id;
        utt.speaker = u;
        utt.emotion = v;
        long len = params.min_phonemes +
                   rng.uniform_int(params.max_phonemes - params.min_phonemes + 1);
        utt.phonemes.resize(size_t(len));
        for (long j = 0; j < len; ++j)
          utt.phonemes[size_t(j)] = rng.uniform_int(params.phoneme_inventory);
        utt.durations.resize(size_t(len));
        for (long j = 0; j < len; ++j)
          utt.durations[size_t(j)] = rule_duration(
              params.seed, utt.phonemes[size_t(j)], u, v, params.duration_max);
        std::vector<long> frames = expand_to_frames(utt.phonemes, utt.durations);
        long T = long(frames.size());
        long M = params.mel_dim;
        utt.pitch.resize(size_t(T));
        utt.energy.resize(size_t(T));
        utt.mel = Tensor({T, M});
        long tc = k.timbre_channels;
        for (long t = 0; t < T; ++t) {
          long p = frames[size_t(t)];
          double pitch = k.speaker_pitch_base[size_t(u)] +
                         k.emotion_pitch_offset[size_t(v)] +
                         k.phoneme_pitch[size_t(p)];
          double energy =
              k.speaker_energy[size_t(u)] + k.emotion_energy[size_t(v)];
          utt.pitch[size_t(t)] = pitch;
          utt.energy[size_t(t)] = energy;
          double* row = utt.mel.data() + t * M;
          row[0] = pitch + params.noise_amp * rng.uniform(-1.0, 1.0);
          row[1] = energy;
          for (long c = 0; c < tc; ++c) {
            double profile = k.phoneme_profile[size_t(p * tc + c)] +
                             k.speaker_profile[size_t(u * tc + c)] +
                             k.emotion_profile[size_t(v * tc + c)];
            row[2 + c] = energy * profile +
                         params.noise_amp * rng.uniform(-1.0, 1.0);
          }
        }
        corpus.utterances.push_back(std::move(utt));
      }
    }
  }
  return corpus;
}

constexpr double kPitchShiftMax = 0.4;    // 1.0 == 1000 cents, so +-400 cents
constexpr double kEnergyFactorMin = 0.3;  // widest allowed gain swing
constexpr double kEnergyFactorMax = 1.7;

// Pitch shift is additive on the pitch contour and mel channel 0; the energy
// factor is multiplicative on the energy contour, channel 1, and the timbre
// channels. Returns a modified copy and records the accumulated shift/factor.
inline Utterance augment_utterance(const Utterance& u, double pitch_shift,
                                   double energy_factor) {
  require(pitch_shift >= -kPitchShiftMax && pitch_shift <= kPitchShiftMax,
          "augment: pitch shift ", pitch_shift, " outside [-", kPitchShiftMax,
          ", ", kPitchShiftMax, "]");
  require(energy_factor >= kEnergyFactorMin &&
              energy_factor <= kEnergyFactorMax,
          "augment: energy factor ", energy_factor, " outside [",
          kEnergyFactorMin, ", ", kEnergyFactorMax, "]");
  Utterance out = u;
  out.mel = u.mel.clone();
  long T = out.frame_count();
  long M = out.mel.extent(1);
  for (long t = 0; t < T; ++t) {
    out.pitch[size_t(t)] += pitch_shift;
    out.energy[size_t(t)] *= energy_factor;
    double* row = out.mel.data() + t * M;
    row[0] += pitch_shift;
    for (long c = 1; c < M; ++c) row[c] *= energy_factor;
  }
  out.pitch_shift = u.pitch_shift + pitch_shift;
  out.energy_factor = u.energy_factor * energy_factor;
  return out;
}

struct PhonemeTargets {
  std::vector<double> pitch;   // [L] mean pitch over each phoneme's frames
  std::vector<double> energy;  // [L]
};

inline PhonemeTargets phoneme_level_targets(const Utterance& u) {
  PhonemeTargets t;
  long L = u.phoneme_count();
  t.pitch.resize(size_t(L));
  t.energy.resize(size_t(L));
  long at = 0;
  for (long l = 0; l < L; ++l) {
    long d = u.durations[size_t(l)];
    require(d > 0, "phoneme_level_targets: phoneme ", l,
            " has zero duration, no frames to average");
    double ps = 0.0, es = 0.0;
    for (long r = 0; r < d; ++r, ++at) {
      ps += u.pitch[size_t(at)];
      es += u.energy[size_t(at)];
    }
    t.pitch[size_t(l)] = ps / double(d);
    t.energy[size_t(l)] = es / double(d);
  }
  require(at == u.frame_count(),
          "phoneme_level_targets: durations sum to ", at, " but utterance has ",
          u.frame_count(), " frames");
  return t;
}

// Duration-weighted average of mel rows per phoneme: [T, M] -> [L, M].
inline Tensor mel_to_phoneme_average(const Tensor& mel,
                                     const std::vector<long>& durations) {
  require(mel.rank() == 2, "mel_to_phoneme_average: mel must be [T, M]");
  long T = mel.extent(0), M = mel.extent(1);
  long total = 0;
  for (long d : durations) {
    require(d > 0, "mel_to_phoneme_average: zero or negative duration");
    total += d;
  }
  require(total == T, "mel_to_phoneme_average: durations sum to ", total,
          " but mel has ", T, " frames");
  long L = long(durations.size());
  Tensor out({L, M});
  long at = 0;
  for (long l = 0; l < L; ++l) {
    long d = durations[size_t(l)];
    double* orow = out.data() + l * M;
    for (long r = 0; r < d; ++r, ++at) {
      const double* row = mel.data() + at * M;
      for (long c = 0; c < M; ++c) orow[c] += row[c];
    }
    for (long c = 0; c < M; ++c) orow[c] /= double(d);
  }
  return out;
}

// Reference front-end constants for real-audio pipelines; recorded in every
// corpus manifest for documentation, unused by the synthetic generator.
constexpr long kRefSampleRateHz = 22050;
constexpr long kRefFilterLength = 1024;
constexpr long kRefHopLength = 256;
constexpr long kRefWindowLength = 1024;

inline void save_corpus(const Corpus& corpus, const fs::path& dir) {
  fs::path tmp = begin_atomic_dir(dir);
  fs::create_directories(tmp / "blobs");
  std::string manifest;
  manifest += "# synthetic corpus\n";
  manifest += "format_version = 1\n";
  manifest += "seed = " + std::to_string(corpus.params.seed) + "\n";
  manifest += "speakers = " + std::to_string(corpus.params.speakers) + "\n";
  manifest += "emotions = " + std::to_string(corpus.params.emotions) + "\n";
  manifest += "per_pair = " + std::to_string(corpus.params.per_pair) + "\n";
  manifest += "phoneme_inventory = " +
              std::to_string(corpus.params.phoneme_inventory) + "\n";
  manifest += "mel_dim = " + std::to_string(corpus.params.mel_dim) + "\n";
  manifest +=
      "duration_max = " + std::to_string(corpus.params.duration_max) + "\n";
  manifest +=
      "min_phonemes = " + std::to_string(corpus.params.min_phonemes) + "\n";
  manifest +=
      "max_phonemes = " + std::to_string(corpus.params.max_phonemes) + "\n";
  manifest +=
      "noise_amp = " + detail::double_to_text(corpus.params.noise_amp) + "\n";
  manifest += "utterance_count = " +
              std::to_string(long(corpus.utterances.size())) + "\n";
  manifest += "# reference front-end constants for real-audio preprocessing\n";
  manifest += "ref_sample_rate_hz = " + std::to_string(kRefSampleRateHz) + "\n";
  manifest += "ref_filter_length = " + std::to_string(kRefFilterLength) + "\n";
  manifest += "ref_hop_length = " + std::to_string(kRefHopLength) + "\n";
  manifest +=
      "ref_window_length = " + std::to_string(kRefWindowLength) + "\n";
  manifest += "# utt <id> <speaker> <emotion> <phonemes> <frames>"
              " <pitch_shift> <energy_factor> <blob>\n";
  for (const Utterance& u : corpus.utterances) {
    std::string rel = "blobs/" + std::to_string(u.id) + ".bin";
    std::string blob;
    blob::append_i64(blob, {u.phoneme_count()}, u.phonemes.data());
    blob::append_i64(blob, {u.phoneme_count()}, u.durations.data());
    blob::append_f64(blob, {u.frame_count()}, u.pitch.data());
    blob::append_f64(blob, {u.frame_count()}, u.energy.data());
    blob::append_tensor(blob, u.mel);
    atomic_write_file(tmp / rel, blob);
    manifest += "utt " + std::to_string(u.id) + " " +
                std::to_string(u.speaker) + " " + std::to_string(u.emotion) +
                " " + std::to_string(u.phoneme_count()) + " " +
                std::to_string(u.frame_count()) + " " +
                detail::double_to_text(u.pitch_shift) + " " +
                detail::double_to_text(u.energy_factor) + " " + rel + "\n";
  }
  atomic_write_file(tmp / "manifest.txt", manifest);
  commit_atomic_dir(tmp, dir);
}

inline Corpus load_corpus(const fs::path& dir) {
  std::string manifest = read_file(dir / "manifest.txt");
  Corpus corpus;
  std::map<std::string, std::string> keys;
  struct Record {
    long id, speaker, emotion, phonemes, frames;
    double pitch_shift, energy_factor;
    std::string path;
  };
  std::vector<Record> records;
  size_t pos = 0;
  long lineno = 0;
  while (pos < manifest.size()) {
    size_t eol = manifest.find('\n', pos);
    if (eol == std::string::npos) eol = manifest.size();
    std::string line = manifest.substr(pos, eol - pos);
    pos = eol + 1;
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> parts = detail::split_ws(line);
    if (!parts.empty() && parts[0] == "utt") {
      if (parts.size() != 9)
        fail(dir.string(), "/manifest.txt:", lineno,
             ": utterance record needs 9 fields");
      Record r;
      r.id = detail::text_to_long(parts[1], "utterance id");
      r.speaker = detail::text_to_long(parts[2], "speaker");
      r.emotion = detail::text_to_long(parts[3], "emotion");
      r.phonemes = detail::text_to_long(parts[4], "phoneme count");
      r.frames = detail::text_to_long(parts[5], "frame count");
      r.pitch_shift = detail::text_to_double(parts[6], "pitch shift");
      r.energy_factor = detail::text_to_double(parts[7], "energy factor");
      r.path = parts[8];
      records.push_back(std::move(r));
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      fail(dir.string(), "/manifest.txt:", lineno, ": expected key = value");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    auto trim = [](std::string& s) {
      while (!s.empty() && (s.front() == ' ' || s.front() == '\t'))
        s.erase(s.begin());
      while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.pop_back();
    };
    trim(key);
    trim(value);
    keys[key] = value;
  }
  auto want = [&](const char* key) -> std::string {
    auto it = keys.find(key);
    if (it == keys.end())
      fail(dir.string(), "/manifest.txt: missing key ", key);
    std::string v = it->second;
    keys.erase(it);
    return v;
  };
  long version = detail::text_to_long(want("format_version"), "format_version");
  if (version != 1) fail("unsupported corpus format version ", version);
  corpus.params.seed =
      std::uint64_t(detail::text_to_long(want("seed"), "seed"));
  corpus.params.speakers = detail::text_to_long(want("speakers"), "speakers");
  corpus.params.emotions = detail::text_to_long(want("emotions"), "emotions");
  corpus.params.per_pair = detail::text_to_long(want("per_pair"), "per_pair");
  corpus.params.phoneme_inventory =
      detail::text_to_long(want("phoneme_inventory"), "phoneme_inventory");
  corpus.params.mel_dim = detail::text_to_long(want("mel_dim"), "mel_dim");
  corpus.params.duration_max =
      detail::text_to_long(want("duration_max"), "duration_max");
  corpus.params.min_phonemes =
      detail::text_to_long(want("min_phonemes"), "min_phonemes");
  corpus.params.max_phonemes =
      detail::text_to_long(want("max_phonemes"), "max_phonemes");
  corpus.params.noise_amp =
      detail::text_to_double(want("noise_amp"), "noise_amp");
  long count = detail::text_to_long(want("utterance_count"), "utterance_count");
  want("ref_sample_rate_hz");
  want("ref_filter_length");
  want("ref_hop_length");
  want("ref_window_length");
  for (const auto& [key, value] : keys)
    fail(dir.string(), "/manifest.txt: unknown key ", key);
  if (count != long(records.size()))
    fail(dir.string(), ": manifest claims ", count, " utterances but lists ",
         records.size());
  for (const Record& r : records) {
    std::string bytes = read_file(dir / r.path);
    blob::Reader reader(bytes, (dir / r.path).string());
    Utterance u;
    u.id = r.id;
    u.speaker = r.speaker;
    u.emotion = r.emotion;
    u.pitch_shift = r.pitch_shift;
    u.energy_factor = r.energy_factor;
    u.phonemes = reader.next_i64();
    u.durations = reader.next_i64();
    blob::Array pitch = reader.next();
    blob::Array energy = reader.next();
    u.pitch = std::move(pitch.f64);
    u.energy = std::move(energy.f64);
    u.mel = reader.next_tensor();
    if (!reader.done()) fail((dir / r.path).string(), ": trailing bytes");
    if (u.phoneme_count() != r.phonemes || u.frame_count() != r.frames)
      fail((dir / r.path).string(), ": array sizes disagree with manifest");
    if (u.mel.rank() != 2 || u.mel.extent(0) != r.frames ||
        u.mel.extent(1) != corpus.params.mel_dim)
      fail((dir / r.path).string(), ": mel shape disagrees with manifest");
    if (long(u.energy.size()) != r.frames)
      fail((dir / r.path).string(), ": energy length disagrees with manifest");
    long total = 0;
    for (long d : u.durations) total += d;
    if (total != r.frames)
      fail((dir / r.path).string(), ": durations sum to ", total, ", not ",
           r.frames);
    if (u.speaker < 0 || u.speaker >= corpus.params.speakers ||
        u.emotion < 0 || u.emotion >= corpus.params.emotions)
      fail((dir / r.path).string(), ": label out of range");
    corpus.utterances.push_back(std::move(u));
  }
  return corpus;
}

}  // namespace resvox
