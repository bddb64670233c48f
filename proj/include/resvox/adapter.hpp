#pragma once

// The variance adapter: a chain of residual encoders that build the styled
// phoneme embedding in six recorded stages,
//
//   A  unstyled phoneme embedding
//   B  A + speaker residual        (or A + style embedding on the style path)
//   C  B + emotion residual
//   D  C + prosody residual
//   E  D + pitch residual
//   F  E + energy residual
//
// plus duration/pitch/energy predictors reading the stage that precedes
// their variable (duration and pitch read D, energy reads E). Every stage
// and residual is recorded in a ProbeTrace; stages are the very tensors used
// in the chain, so the additive identities hold exactly.
//
// Style sources are mutually exclusive per forward: either a style encoder
// embedding (one vector per utterance) or (speaker, emotion) labels through
// the distilled tables. Gradients never reach the tables: lookups pass
// through stop_gradient in every phase, and in phase 3 the speaker and
// emotion encoder outputs are wrapped in stop_gradient as well, leaving only
// the prosody nets trainable among the residual encoders.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "resvox/backbone.hpp"
#include "resvox/config.hpp"
#include "resvox/layers.hpp"

namespace resvox {

struct ProbeTrace {
  std::array<Tensor, 6> stage;     // A..F, each [B, L, H]
  std::array<Tensor, 5> residual;  // R1..R5, each [B, L, H]
  std::array<std::string, 5> residual_names;
  std::string mode;     // "style" or "labels"
  Tensor mask;          // [B, L]
  Tensor duration_log;  // [B, L], predicted log(1 + duration)
  Tensor pitch_pred;    // [B, L], unshifted pitch estimate
  Tensor energy_pred;   // [B, L], unscaled energy estimate
  Tensor prosody_encoded;    // [B, L, H], training path only
  Tensor prosody_predicted;  // [B, L, H], phase 3 and inference
};

// phase 0 = inference; 1..3 = the training phases. The style encoder path is
// mandatory in phase 1, forbidden in phases 2-3, and optional at inference.
struct AdapterMode {
  long phase = 0;
  bool use_style_encoder = false;

  bool training() const { return phase != 0; }

  void validate() const {
    require(phase >= 0 && phase <= 3, "adapter: phase must be 0..3");
    if (phase == 1)
      require(use_style_encoder,
              "adapter: phase 1 trains the style encoder path");
    if (phase == 2 || phase == 3)
      require(!use_style_encoder,
              "adapter: phase ", phase, " uses the label path only");
  }
};

struct AdapterConditioning {
  // style path: one style embedding row per utterance [B, H]
  Tensor style;
  // label path
  std::vector<long> speakers;
  std::vector<long> emotions;
  // training conditioning, phoneme level [B, L]: the measured values of the
  // (possibly augmented) sample, so any shift is already included
  Tensor pitch_cond;
  Tensor energy_cond;
  // phase 3 training: duration-averaged mel [B, L, M]
  Tensor mel_avg;
  // inference controls
  double pitch_shift = 0.0;
  double energy_factor = 1.0;
};

struct AdapterResult {
  ProbeTrace trace;
  Tensor output;  // stage F, [B, L, H]
};

namespace detail {

// [B, H] rows -> [B, L, H] with the row repeated L times, then masked.
inline Tensor broadcast_rows(const Tensor& rows, long L, const Tensor& mask) {
  long B = rows.extent(0), H = rows.extent(1);
  Tensor zeros({B, L, H});
  return apply_mask(add(zeros, reshape(rows, {B, 1, H})), mask);
}

}  // namespace detail

class VarianceAdapter {
 public:
  VarianceAdapter(ParameterStore& store, const ModelConfig& cfg)
      : speaker_table(store.add("tables.speaker", {cfg.speakers, cfg.hidden},
                                "tables", Init::zeros)),
        emotion_table(store.add("tables.emotion", {cfg.emotions, cfg.hidden},
                                "tables", Init::zeros)),
        speaker_net(store, "speaker_encoder", cfg.hidden, cfg.hidden,
                    cfg.predictor_filters, cfg.predictor_kernel,
                    cfg.predictor_dropout, "speaker_encoder"),
        emotion_net(store, "emotion_encoder", cfg.hidden, cfg.hidden,
                    cfg.predictor_filters, cfg.predictor_kernel,
                    cfg.predictor_dropout, "emotion_encoder"),
        prosody_net(store, "prosody_encoder", cfg.mel_dim, cfg.hidden,
                    cfg.predictor_filters, cfg.predictor_kernel,
                    cfg.predictor_dropout, "prosody_encoder"),
        pitch_net(store, "pitch_encoder", 1, cfg.hidden, cfg.predictor_filters,
                  cfg.predictor_kernel, cfg.predictor_dropout,
                  "pitch_encoder"),
        energy_net(store, "energy_encoder", 1, cfg.hidden,
                   cfg.predictor_filters, cfg.predictor_kernel,
                   cfg.predictor_dropout, "energy_encoder"),
        prosody_predictor(store, "prosody_predictor", cfg.hidden,
                          cfg.predictor_filters, cfg.predictor_kernel,
                          cfg.hidden, cfg.predictor_dropout,
                          "prosody_predictor"),
        duration_predictor(store, "duration_predictor", cfg.hidden,
                           cfg.predictor_filters, cfg.predictor_kernel,
                           cfg.predictor_dropout, "duration_predictor"),
        pitch_predictor(store, "pitch_predictor", cfg.hidden,
                        cfg.predictor_filters, cfg.predictor_kernel,
                        cfg.predictor_dropout, "pitch_predictor"),
        energy_predictor(store, "energy_predictor", cfg.hidden,
                         cfg.predictor_filters, cfg.predictor_kernel,
                         cfg.predictor_dropout, "energy_predictor"),
        hidden_(cfg.hidden) {}

  AdapterResult forward(const EncodedPhonemes& enc, const AdapterMode& mode,
                        const AdapterConditioning& cond,
                        const RunMode& run) const {
    mode.validate();
    const Tensor& A = enc.embedding;
    const Tensor& mask = enc.mask;
    long B = A.extent(0), L = A.extent(1);

    bool style_path = mode.use_style_encoder;
    if (style_path) {
      require(cond.style.defined(), "adapter: style path needs an embedding");
      require(cond.speakers.empty() && cond.emotions.empty(),
              "adapter: style embedding and labels are mutually exclusive");
      require(cond.style.rank() == 2 && cond.style.extent(0) == B &&
                  cond.style.extent(1) == hidden_,
              "adapter: style embedding must be [batch, hidden]");
    } else {
      require(!cond.style.defined(),
              "adapter: style embedding and labels are mutually exclusive");
      require(long(cond.speakers.size()) == B &&
                  long(cond.emotions.size()) == B,
              "adapter: label path needs one speaker and emotion per item");
    }
    if (mode.training()) {
      require(cond.pitch_cond.defined() && cond.energy_cond.defined(),
              "adapter: training needs measured pitch and energy values");
      require(cond.pitch_shift == 0.0 && cond.energy_factor == 1.0,
              "adapter: shifts are baked into training targets; user "
              "controls apply at inference only");
      require(cond.mel_avg.defined() == (mode.phase == 3),
              "adapter: the averaged mel is consumed by phase 3 exactly");
    } else {
      require(!cond.pitch_cond.defined() && !cond.energy_cond.defined() &&
                  !cond.mel_avg.defined(),
              "adapter: inference conditions on predictions, not targets");
      require(cond.energy_factor > 0.0, "adapter: energy factor must be > 0");
    }

    AdapterResult res;
    ProbeTrace& tr = res.trace;
    tr.mode = style_path ? "style" : "labels";
    tr.mask = mask;
    tr.stage[0] = A;
    Tensor zero_residual({B, L, hidden_});

    // stage B: speaker residual, or the style embedding on the style path
    if (style_path) {
      tr.residual[0] = detail::broadcast_rows(cond.style, L, mask);
      tr.residual_names[0] = "style";
    } else {
      Tensor mu = stop_gradient(
          embedding_lookup(speaker_table, cond.speakers, {B}));
      Tensor mu_rows = detail::broadcast_rows(mu, L, mask);
      Tensor net_out = speaker_net.forward(mu_rows, A, mask, run);
      if (mode.phase == 3) net_out = stop_gradient(net_out);
      tr.residual[0] = add(mu_rows, net_out);
      tr.residual_names[0] = "speaker";
    }
    tr.stage[1] = add(A, tr.residual[0]);

    // stage C: emotion residual (label path only)
    if (style_path) {
      tr.residual[1] = zero_residual;
      tr.residual_names[1] = "none";
      tr.stage[2] = tr.stage[1];
    } else {
      Tensor mu = stop_gradient(
          embedding_lookup(emotion_table, cond.emotions, {B}));
      Tensor mu_rows = detail::broadcast_rows(mu, L, mask);
      Tensor net_out = emotion_net.forward(mu_rows, tr.stage[1], mask, run);
      if (mode.phase == 3) net_out = stop_gradient(net_out);
      tr.residual[1] = add(mu_rows, net_out);
      tr.residual_names[1] = "emotion";
      tr.stage[2] = add(tr.stage[1], tr.residual[1]);
    }

    // stage D: prosody. Training phase 3 feeds the encoder's residual into
    // the chain and trains the predictor toward it; inference substitutes
    // the predictor. Phases 1 and 2 have no prosody stage.
    bool prosody_active = !style_path && (mode.phase == 3 || mode.phase == 0);
    if (prosody_active) {
      tr.prosody_predicted = prosody_predictor.forward(tr.stage[2], mask, run);
      if (mode.phase == 3) {
        Tensor mel_avg = apply_mask(cond.mel_avg, mask);
        tr.prosody_encoded =
            prosody_net.forward(mel_avg, tr.stage[2], mask, run);
        tr.residual[2] = tr.prosody_encoded;
      } else {
        tr.residual[2] = tr.prosody_predicted;
      }
      tr.residual_names[2] = "prosody";
      tr.stage[3] = add(tr.stage[2], tr.residual[2]);
    } else {
      tr.residual[2] = zero_residual;
      tr.residual_names[2] = "none";
      tr.stage[3] = tr.stage[2];
    }

    // duration and pitch predictors read the post-prosody embedding
    tr.duration_log = duration_predictor.forward(tr.stage[3], mask, run);
    tr.pitch_pred = pitch_predictor.forward(tr.stage[3], mask, run);

    // stage E: pitch residual from the conditioning value per phoneme
    Tensor pitch_values;
    if (mode.training()) {
      pitch_values = mul(cond.pitch_cond, mask);
    } else {
      pitch_values =
          mul(add_const(tr.pitch_pred, cond.pitch_shift), mask);
    }
    Tensor r4 = pitch_net.forward(reshape(pitch_values, {B, L, 1}),
                                  tr.stage[3], mask, run);
    tr.residual[3] = r4;
    tr.residual_names[3] = "pitch";
    tr.stage[4] = add(tr.stage[3], tr.residual[3]);

    // energy predictor reads the post-pitch embedding
    tr.energy_pred = energy_predictor.forward(tr.stage[4], mask, run);

    // stage F: energy residual, multiplicative user control
    Tensor energy_values;
    if (mode.training()) {
      energy_values = mul(cond.energy_cond, mask);
    } else {
      energy_values =
          mul(scale(tr.energy_pred, cond.energy_factor), mask);
    }
    Tensor r5 = energy_net.forward(reshape(energy_values, {B, L, 1}),
                                   tr.stage[4], mask, run);
    tr.residual[4] = r5;
    tr.residual_names[4] = "energy";
    tr.stage[5] = add(tr.stage[4], tr.residual[4]);

    res.output = tr.stage[5];
    return res;
  }

  // Converts predicted log(1 + d) values back to integer frame counts.
  static std::vector<std::vector<long>> durations_from_log(
      const Tensor& pred, const std::vector<long>& lengths) {
    require(pred.rank() == 2, "durations: predictions must be [B, L]");
    long B = pred.extent(0), L = pred.extent(1);
    require(long(lengths.size()) == B, "durations: lengths size mismatch");
    std::vector<std::vector<long>> out(static_cast<size_t>(B));
    for (long b = 0; b < B; ++b) {
      long total = 0;
      for (long l = 0; l < lengths[size_t(b)]; ++l) {
        double p = std::min(pred.at({b, l}), 30.0);
        long d = std::lround(std::exp(p) - 1.0);
        if (d < 0) d = 0;
        out[size_t(b)].push_back(d);
        total += d;
      }
      if (total < 1)
        fail("durations: item ", b,
             " predicts zero total frames; re-run with a minimum-length "
             "fallback (for example, force each phoneme to one frame)");
    }
    return out;
  }

  Tensor speaker_table;  // [U, H], distilled means, frozen after phase 1
  Tensor emotion_table;  // [V, H]
  ResidualNet speaker_net;
  ResidualNet emotion_net;
  ResidualNet prosody_net;
  ResidualNet pitch_net;
  ResidualNet energy_net;
  SequenceRegressor prosody_predictor;
  VariancePredictor duration_predictor;
  VariancePredictor pitch_predictor;
  VariancePredictor energy_predictor;

 private:
  long hidden_;
};

}  // namespace resvox
