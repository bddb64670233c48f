#pragma once

// The full acoustic model: phoneme encoder, style encoder, variance adapter,
// length regulator, and mel decoder sharing one parameter store. Training
// expands phonemes by their measured durations; synthesis expands by the
// duration predictor's output.

#include <memory>
#include <string>
#include <vector>

#include "resvox/adapter.hpp"
#include "resvox/backbone.hpp"
#include "resvox/config.hpp"
#include "resvox/params.hpp"

namespace resvox {

// Everything train_forward needs, already padded to the batch's longest
// sequence. pitch and energy hold the measured per-phoneme values of each
// (possibly augmented) sample; mel_avg is the duration-averaged spectrogram
// and is only consulted in phase 3; ref_mels carry each utterance's full
// spectrogram for the style encoder and are only consulted in phase 1.
struct BatchInputs {
  std::vector<std::vector<long>> phonemes;
  std::vector<std::vector<long>> durations;
  Tensor pitch;
  Tensor energy;
  Tensor mel_avg;
  std::vector<long> speakers;
  std::vector<long> emotions;
  std::vector<Tensor> ref_mels;
};

struct ModelOutputs {
  EncodedPhonemes encoded;
  AdapterResult adapter;
  Tensor style;       // [B, H], phase 1 only
  Tensor mel_hat;     // [B, T_max, M]
  Tensor frame_mask;  // [B, T_max]
};

struct Synthesis {
  Tensor mel;  // [T, M]
  std::vector<long> durations;
  ProbeTrace trace;
};

class Model {
 public:
  Model(const ModelConfig& cfg, std::uint64_t seed)
      : config((cfg.validate(), cfg)),
        store(seed),
        encoder(store, config),
        style_encoder(store, config),
        adapter(store, config),
        decoder(store, config) {}

  // One style embedding row per utterance. The reference encoder normalizes
  // over a single spectrogram at a time, so utterances pass one by one.
  Tensor style_rows(const std::vector<Tensor>& mels, bool training) const {
    require(!mels.empty(), "model: style path needs reference spectrograms");
    std::vector<Tensor> rows;
    rows.reserve(mels.size());
    for (const Tensor& mel : mels)
      rows.push_back(style_encoder.forward(mel, training));
    return rows.size() == 1 ? rows[0] : concat(rows, 0);
  }

  ModelOutputs train_forward(const BatchInputs& batch, long phase,
                             const RunMode& run) {
    require(phase >= 1 && phase <= 3, "model: training phase must be 1..3");
    long B = long(batch.phonemes.size());
    require(B >= 1, "model: empty batch");
    require(batch.durations.size() == size_t(B),
            "model: one duration sequence per utterance");

    ModelOutputs out;
    out.encoded = encoder.forward(batch.phonemes, run);

    AdapterMode mode;
    mode.phase = phase;
    mode.use_style_encoder = phase == 1;
    AdapterConditioning cond;
    cond.pitch_cond = batch.pitch;
    cond.energy_cond = batch.energy;
    if (phase == 1) {
      require(batch.ref_mels.size() == size_t(B),
              "model: phase 1 needs one reference spectrogram per utterance");
      out.style = style_rows(batch.ref_mels, run.training);
      cond.style = out.style;
    } else {
      cond.speakers = batch.speakers;
      cond.emotions = batch.emotions;
    }
    if (phase == 3) cond.mel_avg = batch.mel_avg;
    out.adapter = adapter.forward(out.encoded, mode, cond, run);

    // durations are per real phoneme; pad with zero-frame entries so every
    // item matches the batch's padded phoneme axis
    long l_max = out.encoded.mask.extent(1);
    std::vector<std::vector<long>> padded(static_cast<size_t>(B));
    std::vector<long> totals(size_t(B), 0);
    long t_max = 0;
    for (long b = 0; b < B; ++b) {
      padded[size_t(b)] = batch.durations[size_t(b)];
      padded[size_t(b)].resize(size_t(l_max), 0);
      for (long d : batch.durations[size_t(b)]) totals[size_t(b)] += d;
      t_max = std::max(t_max, totals[size_t(b)]);
    }
    Tensor expanded = length_regulate(out.adapter.output, padded, t_max);
    out.frame_mask = lengths_to_mask(totals, t_max);
    out.mel_hat = decoder.forward(expanded, out.frame_mask, run);
    return out;
  }

  Synthesis synthesize(const std::vector<long>& phonemes, long speaker,
                       long emotion, double pitch_shift,
                       double energy_factor) const {
    RunMode run;
    EncodedPhonemes enc = encoder.forward({phonemes}, run);
    AdapterMode mode;
    AdapterConditioning cond;
    cond.speakers = {speaker};
    cond.emotions = {emotion};
    cond.pitch_shift = pitch_shift;
    cond.energy_factor = energy_factor;
    AdapterResult res = adapter.forward(enc, mode, cond, run);

    Synthesis synth;
    synth.trace = res.trace;
    auto durations = VarianceAdapter::durations_from_log(
        res.trace.duration_log, enc.lengths);
    synth.durations = durations[0];
    long total = 0;
    for (long d : synth.durations) total += d;
    Tensor expanded = length_regulate(res.output, durations, total);
    Tensor frame_mask = lengths_to_mask({total}, total);
    Tensor mel = decoder.forward(expanded, frame_mask, run);
    synth.mel = reshape(mel, {total, config.mel_dim});
    return synth;
  }

  ModelConfig config;
  ParameterStore store;
  PhonemeEncoder encoder;
  StyleEncoder style_encoder;
  VarianceAdapter adapter;
  MelDecoder decoder;
};

}  // namespace resvox
