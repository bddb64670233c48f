#pragma once

// Three-phase training: batch assembly from corpus utterances, masked losses,
// Adam with linear warmup, augmentation streams, style-table distillation,
// and the per-phase freeze sets.

#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "resvox/corpus.hpp"
#include "resvox/model.hpp"

namespace resvox {

struct LossReport {
  double mel = 0.0;
  double duration = 0.0;
  double pitch = 0.0;
  double energy = 0.0;
  double prosody = 0.0;
  double total = 0.0;
};

struct LossTensors {
  Tensor mel, duration, pitch, energy, prosody, total;

  LossReport report() const {
    LossReport r;
    r.mel = mel.item();
    r.duration = duration.item();
    r.pitch = pitch.item();
    r.energy = energy.item();
    r.prosody = prosody.defined() ? prosody.item() : 0.0;
    r.total = total.item();
    return r;
  }
};

// Ground truth the losses compare against. Pitch and energy are the
// pre-augmentation values: the measured (shifted) values condition the
// encoders, while the predictors learn the canonical contour, which is what
// makes the shift a control input rather than noise.
struct BatchTargets {
  Tensor mel;           // [B, T_max, M]
  Tensor duration_log;  // [B, L_max], log(1 + frames)
  Tensor pitch;         // [B, L_max]
  Tensor energy;        // [B, L_max]
};

struct TrainingBatch {
  BatchInputs inputs;
  BatchTargets targets;
};

inline TrainingBatch assemble_batch(const std::vector<const Utterance*>& utts,
                                    long phase) {
  require(!utts.empty(), "assemble_batch: empty batch");
  long B = long(utts.size());
  long l_max = 0, t_max = 0;
  for (const Utterance* u : utts) {
    l_max = std::max(l_max, u->phoneme_count());
    t_max = std::max(t_max, u->frame_count());
  }
  long M = utts[0]->mel.extent(1);

  TrainingBatch tb;
  tb.inputs.pitch = Tensor({B, l_max});
  tb.inputs.energy = Tensor({B, l_max});
  tb.targets.mel = Tensor({B, t_max, M});
  tb.targets.duration_log = Tensor({B, l_max});
  tb.targets.pitch = Tensor({B, l_max});
  tb.targets.energy = Tensor({B, l_max});
  if (phase == 3) tb.inputs.mel_avg = Tensor({B, l_max, M});

  for (long b = 0; b < B; ++b) {
    const Utterance& u = *utts[size_t(b)];
    require(u.mel.extent(1) == M, "assemble_batch: mixed mel widths");
    tb.inputs.phonemes.push_back(u.phonemes);
    tb.inputs.durations.push_back(u.durations);
    tb.inputs.speakers.push_back(u.speaker);
    tb.inputs.emotions.push_back(u.emotion);
    if (phase == 1) tb.inputs.ref_mels.push_back(u.mel);

    PhonemeTargets pt = phoneme_level_targets(u);
    for (long l = 0; l < u.phoneme_count(); ++l) {
      size_t at = size_t(b * l_max + l);
      tb.inputs.pitch.vec()[at] = pt.pitch[size_t(l)];
      tb.inputs.energy.vec()[at] = pt.energy[size_t(l)];
      tb.targets.pitch.vec()[at] = pt.pitch[size_t(l)] - u.pitch_shift;
      tb.targets.energy.vec()[at] = pt.energy[size_t(l)] / u.energy_factor;
      tb.targets.duration_log.vec()[at] =
          std::log(1.0 + double(u.durations[size_t(l)]));
    }
    std::copy(u.mel.data(), u.mel.data() + u.frame_count() * M,
              tb.targets.mel.data() + b * t_max * M);
    if (phase == 3) {
      Tensor avg = mel_to_phoneme_average(u.mel, u.durations);
      std::copy(avg.data(), avg.data() + u.phoneme_count() * M,
                tb.inputs.mel_avg.data() + b * l_max * M);
    }
  }
  return tb;
}

// Masked means: spectrogram error over real frames, the rest over real
// phonemes. The prosody term compares the predictor to the encoder's output
// treated as a fixed target, so it trains the predictor alone; the encoder
// itself learns through the spectrogram loss.
inline LossTensors compute_losses(const ModelOutputs& out,
                                  const BatchTargets& tgt, long phase) {
  const ProbeTrace& trace = out.adapter.trace;
  const Tensor& phoneme_mask = out.encoded.mask;
  LossTensors lt;
  lt.mel = masked_mae(out.mel_hat, tgt.mel, out.frame_mask);
  lt.duration = masked_mse(trace.duration_log, tgt.duration_log, phoneme_mask);
  lt.pitch = masked_mse(trace.pitch_pred, tgt.pitch, phoneme_mask);
  lt.energy = masked_mse(trace.energy_pred, tgt.energy, phoneme_mask);
  lt.total = add(add(lt.mel, lt.duration), add(lt.pitch, lt.energy));
  if (phase == 3) {
    lt.prosody = masked_mse(trace.prosody_predicted,
                            stop_gradient(trace.prosody_encoded), phoneme_mask);
    lt.total = add(lt.total, lt.prosody);
  }
  return lt;
}

// Adam with linear warmup. State is keyed by parameter name, so the update
// order follows the store's name order and reruns are bitwise identical.
class AdamOptimizer {
 public:
  AdamOptimizer(ParameterStore& store, const TrainConfig& cfg)
      : store_(store),
        lr_(cfg.learning_rate),
        warmup_(cfg.warmup_steps),
        beta1_(cfg.adam_beta1),
        beta2_(cfg.adam_beta2),
        eps_(cfg.adam_eps) {}

  void step() {
    ++t_;
    double lr = lr_;
    if (warmup_ > 0 && t_ < warmup_) lr = lr_ * double(t_) / double(warmup_);
    double bc1 = 1.0 - std::pow(beta1_, double(t_));
    double bc2 = 1.0 - std::pow(beta2_, double(t_));
    store_.for_each_trainable([&](const std::string& name, Tensor p) {
      State& s = state_[name];
      size_t n = p.vec().size();
      if (s.m.size() != n) {
        s.m.assign(n, 0.0);
        s.v.assign(n, 0.0);
      }
      const std::vector<double>& g = p.grad();
      for (size_t i = 0; i < n; ++i) {
        s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
        s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
        double mhat = s.m[i] / bc1;
        double vhat = s.v[i] / bc2;
        p.vec()[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    });
  }

  long steps_taken() const { return t_; }

 private:
  struct State {
    std::vector<double> m, v;
  };
  ParameterStore& store_;
  double lr_;
  long warmup_;
  double beta1_, beta2_, eps_;
  long t_ = 0;
  std::map<std::string, State> state_;
};

// One epoch of training samples: every original once plus fraction * N
// freshly augmented copies, then a seeded shuffle. Augmented copies carry
// their shift and factor, which batch assembly turns into conditioning and
// canonical targets.
inline std::vector<Utterance> epoch_stream(
    const std::vector<const Utterance*>& originals, double fraction,
    Rng& rng) {
  require(!originals.empty(), "epoch_stream: no training utterances");
  require(fraction >= 0.0 && fraction <= 1.0,
          "epoch_stream: fraction must be in [0, 1]");
  std::vector<Utterance> out;
  long n = long(originals.size());
  long n_aug = std::lround(fraction * double(n));
  out.reserve(size_t(n + n_aug));
  for (const Utterance* u : originals) out.push_back(*u);
  for (long k = 0; k < n_aug; ++k) {
    const Utterance& src = *originals[size_t(rng.uniform_int(n))];
    double delta = rng.uniform(-kPitchShiftMax, kPitchShiftMax);
    double gamma = rng.uniform(kEnergyFactorMin, kEnergyFactorMax);
    out.push_back(augment_utterance(src, delta, gamma));
  }
  for (long i = long(out.size()) - 1; i > 0; --i) {
    long j = rng.uniform_int(i + 1);
    std::swap(out[size_t(i)], out[size_t(j)]);
  }
  return out;
}

struct CorpusSplit {
  std::vector<const Utterance*> train;
  std::vector<const Utterance*> held;
};

inline CorpusSplit split_corpus(const Corpus& corpus, long modulus) {
  require(modulus == 0 || modulus >= 2,
          "split_corpus: modulus must be 0 (off) or >= 2");
  CorpusSplit split;
  for (const Utterance& u : corpus.utterances) {
    if (modulus != 0 && u.id % modulus == 0)
      split.held.push_back(&u);
    else
      split.train.push_back(&u);
  }
  require(!split.train.empty(), "split_corpus: holdout left no training data");
  return split;
}

// Sets the speaker table rows to the mean style embedding per speaker and
// the emotion rows to the mean speaker-normalized style embedding, then
// freezes both tables. Runs the style encoder in inference mode so the rows
// are deterministic functions of the checkpoint.
inline void distill_tables(Model& model, const Corpus& corpus) {
  long H = model.config.hidden;
  long U = model.config.speakers;
  long V = model.config.emotions;
  require(!corpus.utterances.empty(), "distill: empty corpus");

  std::vector<std::vector<double>> styles;
  styles.reserve(corpus.utterances.size());
  std::vector<double> spk_sum(size_t(U * H), 0.0);
  std::vector<long> spk_count(size_t(U), 0);
  for (const Utterance& u : corpus.utterances) {
    require(u.speaker >= 0 && u.speaker < U, "distill: utterance ", u.id,
            " names speaker ", u.speaker, " outside the model's ", U);
    require(u.emotion >= 0 && u.emotion < V, "distill: utterance ", u.id,
            " names emotion ", u.emotion, " outside the model's ", V);
    Tensor s = model.style_encoder.forward(u.mel, false);
    styles.emplace_back(s.data(), s.data() + H);
    for (long h = 0; h < H; ++h)
      spk_sum[size_t(u.speaker * H + h)] += styles.back()[size_t(h)];
    spk_count[size_t(u.speaker)]++;
  }
  for (long s = 0; s < U; ++s)
    require(spk_count[size_t(s)] > 0, "distill: speaker ", s,
            " has no utterances");

  Tensor spk_table = model.store.get("tables.speaker");
  for (long s = 0; s < U; ++s)
    for (long h = 0; h < H; ++h)
      spk_table.vec()[size_t(s * H + h)] =
          spk_sum[size_t(s * H + h)] / double(spk_count[size_t(s)]);

  std::vector<double> emo_sum(size_t(V * H), 0.0);
  std::vector<long> emo_count(size_t(V), 0);
  for (size_t i = 0; i < corpus.utterances.size(); ++i) {
    const Utterance& u = corpus.utterances[i];
    for (long h = 0; h < H; ++h)
      emo_sum[size_t(u.emotion * H + h)] +=
          styles[i][size_t(h)] -
          spk_table.vec()[size_t(u.speaker * H + h)];
    emo_count[size_t(u.emotion)]++;
  }
  for (long e = 0; e < V; ++e)
    require(emo_count[size_t(e)] > 0, "distill: emotion ", e,
            " has no utterances");

  Tensor emo_table = model.store.get("tables.emotion");
  for (long e = 0; e < V; ++e)
    for (long h = 0; h < H; ++h)
      emo_table.vec()[size_t(e * H + h)] =
          emo_sum[size_t(e * H + h)] / double(emo_count[size_t(e)]);

  model.store.freeze_group("tables");
}

// Which parameter groups stand still in each phase. Phase 1 runs the style
// path, so the label-path encoders rest; phase 2 trains the label path with
// the distilled tables pinned; phase 3 trains prosody while the identity
// encoders hold their ground.
inline const std::vector<std::string>& phase_frozen_groups(long phase) {
  static const std::vector<std::string> phase1 = {
      "speaker_encoder", "emotion_encoder", "prosody_encoder",
      "prosody_predictor", "tables"};
  static const std::vector<std::string> phase2 = {
      "style_encoder", "tables", "prosody_encoder", "prosody_predictor"};
  static const std::vector<std::string> phase3 = {
      "style_encoder", "tables", "speaker_encoder", "emotion_encoder"};
  switch (phase) {
    case 1: return phase1;
    case 2: return phase2;
    case 3: return phase3;
    default: fail("phase_frozen_groups: phase must be 1..3, got ", phase);
  }
}

inline long phase_step_budget(const TrainConfig& cfg, long phase) {
  switch (phase) {
    case 1: return cfg.phase1_steps;
    case 2: return cfg.phase2_steps;
    case 3: return cfg.phase3_steps;
    default: fail("phase_step_budget: phase must be 1..3, got ", phase);
  }
}

struct PhaseResult {
  LossReport first;
  LossReport last;
  long steps = 0;
};

namespace detail {

inline void write_log_line(std::ostream& log, long step, const LossReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf,
                "%ld\t%.6g\t%.6g\t%.6g\t%.6g\t%.6g\t%.6g\n", step, r.mel,
                r.duration, r.pitch, r.energy, r.prosody, r.total);
  log << buf;
}

inline bool table_rows_all_zero(const Tensor& t) {
  for (double v : t.vec())
    if (v != 0.0) return false;
  return true;
}

}  // namespace detail

// Runs one training phase in place on the model. The log, when given,
// receives tab-separated "step L_Mel L_dur L_pitch L_energy L_pros L_total"
// lines every log_every steps plus the first and last step.
inline PhaseResult train_phase(Model& model, const Corpus& corpus, long phase,
                               const TrainConfig& cfg, std::uint64_t seed,
                               std::ostream* log = nullptr) {
  cfg.validate();
  require(phase >= 1 && phase <= 3, "train_phase: phase must be 1..3");
  if (phase >= 2)
    require(!detail::table_rows_all_zero(model.store.get("tables.speaker")),
            "train_phase: phase ", phase, " needs distilled tables; run",
            " distillation on the phase 1 result first");

  CorpusSplit split = split_corpus(corpus, cfg.holdout_modulus);
  model.store.unfreeze_all();
  for (const std::string& group : phase_frozen_groups(phase))
    model.store.freeze_group(group);

  AdamOptimizer opt(model.store, cfg);
  Rng rng = seeded_stream(seed, "train-phase-" + std::to_string(phase));
  long budget = phase_step_budget(cfg, phase);
  PhaseResult result;
  long step = 0;
  while (step < budget) {
    std::vector<Utterance> stream =
        epoch_stream(split.train, cfg.augment_fraction, rng);
    for (size_t at = 0; at < stream.size() && step < budget;
         at += size_t(cfg.batch_size)) {
      std::vector<const Utterance*> batch;
      for (size_t i = at; i < stream.size() && i < at + size_t(cfg.batch_size);
           ++i)
        batch.push_back(&stream[i]);
      ++step;
      LossReport rep;
      try {
        TrainingBatch tb = assemble_batch(batch, phase);
        Tape tape;
        RunMode run;
        run.training = true;
        run.rng = &rng;
        ModelOutputs out = model.train_forward(tb.inputs, phase, run);
        LossTensors lt = compute_losses(out, tb.targets, phase);
        rep = lt.report();
        require(std::isfinite(rep.total), "loss is not finite");
        model.store.zero_grads();
        tape.backward(lt.total);
        opt.step();
      } catch (const std::runtime_error& e) {
        fail("phase ", phase, " step ", step, ": ", e.what());
      }
      if (step == 1) result.first = rep;
      result.last = rep;
      if (log && (step == 1 || step % cfg.log_every == 0 || step == budget))
        detail::write_log_line(*log, step, rep);
    }
  }
  result.steps = step;
  return result;
}

// Teacher-forced spectrogram error over a utterance set: mean absolute
// difference across every real mel cell, computed in inference mode so
// dropout and batch-norm updates stay off. Used for held-out tracking.
inline double evaluate_mel_mae(Model& model,
                               const std::vector<const Utterance*>& utts,
                               long phase, long batch_size) {
  require(!utts.empty(), "evaluate_mel_mae: no utterances");
  require(batch_size >= 1, "evaluate_mel_mae: batch_size must be positive");
  double total_abs = 0.0;
  double total_cells = 0.0;
  for (size_t at = 0; at < utts.size(); at += size_t(batch_size)) {
    std::vector<const Utterance*> chunk;
    for (size_t i = at; i < utts.size() && i < at + size_t(batch_size); ++i)
      chunk.push_back(utts[i]);
    TrainingBatch tb = assemble_batch(chunk, phase);
    RunMode run;
    ModelOutputs out = model.train_forward(tb.inputs, phase, run);
    long B = out.mel_hat.extent(0);
    long T = out.mel_hat.extent(1);
    long M = out.mel_hat.extent(2);
    for (long b = 0; b < B; ++b)
      for (long t = 0; t < T; ++t) {
        if (out.frame_mask.vec()[size_t(b * T + t)] == 0.0) continue;
        for (long m = 0; m < M; ++m) {
          size_t i = size_t((b * T + t) * M + m);
          total_abs +=
              std::fabs(out.mel_hat.vec()[i] - tb.targets.mel.vec()[i]);
          total_cells += 1.0;
        }
      }
  }
  return total_abs / total_cells;
}

}  // namespace resvox
