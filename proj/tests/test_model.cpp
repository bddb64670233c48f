#include <catch2/catch_amalgamated.hpp>
#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "resvox/model.hpp"

using namespace resvox;
using Catch::Matchers::ContainsSubstring;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.hidden = 8;
  cfg.embedding_dim = 8;
  cfg.encoder_layers = 1;
  cfg.decoder_layers = 1;
  cfg.conv_kernel = 3;
  cfg.conv_filters = 12;
  cfg.attention_heads = 2;
  cfg.predictor_kernel = 3;
  cfg.predictor_filters = 6;
  cfg.ref_conv_filters = {4, 4};
  cfg.ref_conv_kernel = 3;
  cfg.ref_conv_stride = 2;
  cfg.gru_hidden = 6;
  cfg.style_tokens = 4;
  cfg.style_token_dim = 6;
  cfg.style_heads = 2;
  cfg.style_attention_hidden = 8;
  cfg.mel_dim = 6;
  cfg.phoneme_inventory = 10;
  cfg.speakers = 3;
  cfg.emotions = 2;
  cfg.validate();
  return cfg;
}

Tensor rand_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.vec()) v = rng.uniform(lo, hi);
  return t;
}

// Padded [B, L_max] conditioning with zeros past each item's length.
Tensor padded_values(const std::vector<long>& lengths, const std::string& tag) {
  long B = long(lengths.size());
  long L = *std::max_element(lengths.begin(), lengths.end());
  Tensor t({B, L});
  Rng rng = seeded_stream(31, tag);
  for (long b = 0; b < B; ++b)
    for (long l = 0; l < lengths[size_t(b)]; ++l)
      t.vec()[size_t(b * L + l)] = rng.uniform(-1.0, 1.0);
  return t;
}

BatchInputs label_batch() {
  BatchInputs batch;
  batch.phonemes = {{3, 1, 4, 1}, {2, 7, 5}};
  batch.durations = {{2, 1, 3, 1}, {1, 2, 1}};
  batch.pitch = padded_values({4, 3}, "pitch");
  batch.energy = padded_values({4, 3}, "energy");
  batch.speakers = {0, 2};
  batch.emotions = {1, 0};
  return batch;
}

void add_mel_avg(BatchInputs& batch, long mel_dim) {
  long B = long(batch.phonemes.size());
  long L = 0;
  for (const auto& p : batch.phonemes) L = std::max(L, long(p.size()));
  Tensor t({B, L, mel_dim});
  Rng rng = seeded_stream(32, "mel-avg");
  for (long b = 0; b < B; ++b)
    for (long l = 0; l < long(batch.phonemes[size_t(b)].size()); ++l)
      for (long m = 0; m < mel_dim; ++m)
        t.vec()[size_t((b * L + l) * mel_dim + m)] = rng.uniform(-1.0, 1.0);
  batch.mel_avg = t;
}

void add_ref_mels(BatchInputs& batch, long mel_dim) {
  Rng rng = seeded_stream(33, "ref-mels");
  long frames = 9;
  for (size_t b = 0; b < batch.phonemes.size(); ++b)
    batch.ref_mels.push_back(rand_tensor({frames + long(b), mel_dim}, rng));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  REQUIRE(a.shape() == b.shape());
  double m = 0.0;
  for (long i = 0; i < a.size(); ++i)
    m = std::max(m, std::fabs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST_CASE("the assembled model registers every component group") {
  Model model(tiny_config(), 7);
  std::set<std::string> groups;
  for (const std::string& name : model.store.names())
    groups.insert(model.store.group_of(name));
  std::set<std::string> expected = {
      "backbone",          "style_encoder",    "tables",
      "speaker_encoder",   "emotion_encoder",  "prosody_encoder",
      "pitch_encoder",     "energy_encoder",   "prosody_predictor",
      "duration_predictor", "pitch_predictor", "energy_predictor"};
  REQUIRE(groups == expected);
  REQUIRE(model.store.total_parameters() > 0);
}

TEST_CASE("training forward masks every padded frame") {
  ModelConfig cfg = tiny_config();
  Model model(cfg, 7);
  BatchInputs batch = label_batch();
  RunMode run;
  run.training = true;
  Rng rng = seeded_stream(34, "dropout");
  run.rng = &rng;

  ModelOutputs out = model.train_forward(batch, 2, run);
  // totals: 2+1+3+1 = 7 and 1+2+1 = 4, so the second item has 3 padded frames
  REQUIRE(out.mel_hat.shape() == Shape{2, 7, cfg.mel_dim});
  REQUIRE(out.frame_mask.shape() == Shape{2, 7});
  for (long t = 0; t < 7; ++t)
    REQUIRE(out.frame_mask.vec()[size_t(7 + t)] == (t < 4 ? 1.0 : 0.0));
  for (long t = 4; t < 7; ++t)
    for (long m = 0; m < cfg.mel_dim; ++m)
      REQUIRE(out.mel_hat.vec()[size_t((7 + t) * cfg.mel_dim + m)] == 0.0);
  REQUIRE(out.adapter.trace.mode == "labels");
  REQUIRE_FALSE(out.style.defined());
}

TEST_CASE("phase selects the style source") {
  ModelConfig cfg = tiny_config();
  Model model(cfg, 7);
  RunMode run;
  run.training = true;
  Rng rng = seeded_stream(35, "dropout");
  run.rng = &rng;

  SECTION("phase 1 encodes each utterance's own spectrogram") {
    BatchInputs batch = label_batch();
    add_ref_mels(batch, cfg.mel_dim);
    ModelOutputs out = model.train_forward(batch, 1, run);
    REQUIRE(out.style.shape() == Shape{2, cfg.hidden});
    REQUIRE(out.adapter.trace.mode == "style");
    REQUIRE(out.adapter.trace.residual_names[0] == "style");

    // the style rows must match per-utterance encodings bit for bit
    Model twin(cfg, 7);
    Tensor row0 = twin.style_encoder.forward(batch.ref_mels[0], true);
    for (long h = 0; h < cfg.hidden; ++h)
      REQUIRE(out.style.vec()[size_t(h)] == row0.vec()[size_t(h)]);
  }

  SECTION("phase 1 without reference spectrograms is an error") {
    BatchInputs batch = label_batch();
    REQUIRE_THROWS_WITH(model.train_forward(batch, 1, run),
                        ContainsSubstring("reference spectrogram"));
  }

  SECTION("phase 3 consumes the averaged spectrogram") {
    BatchInputs batch = label_batch();
    add_mel_avg(batch, cfg.mel_dim);
    ModelOutputs out = model.train_forward(batch, 3, run);
    REQUIRE(out.adapter.trace.prosody_encoded.defined());
    REQUIRE(out.adapter.trace.residual_names[2] == "prosody");
  }

  SECTION("phase outside 1..3 is an error") {
    BatchInputs batch = label_batch();
    REQUIRE_THROWS_WITH(model.train_forward(batch, 0, run),
                        ContainsSubstring("phase"));
    REQUIRE_THROWS_WITH(model.train_forward(batch, 4, run),
                        ContainsSubstring("phase"));
  }

  SECTION("duration list must match the batch") {
    BatchInputs batch = label_batch();
    batch.durations.pop_back();
    REQUIRE_THROWS_WITH(model.train_forward(batch, 2, run),
                        ContainsSubstring("duration"));
  }
}

TEST_CASE("synthesis expands phonemes by the predicted durations") {
  ModelConfig cfg = tiny_config();
  Model model(cfg, 7);
  // pin the duration predictor to log(4) so every phoneme gets 3 frames
  for (double& v : model.store.get("duration_predictor.head.weight").vec())
    v = 0.0;
  for (double& v : model.store.get("duration_predictor.head.bias").vec())
    v = std::log(4.0);

  std::vector<long> phonemes = {3, 1, 4, 1, 5};
  Synthesis synth = model.synthesize(phonemes, 1, 0, 0.0, 1.0);
  REQUIRE(synth.durations == std::vector<long>{3, 3, 3, 3, 3});
  REQUIRE(synth.mel.shape() == Shape{15, cfg.mel_dim});
  REQUIRE(synth.trace.stage[5].defined());
  REQUIRE(synth.trace.mode == "labels");

  SECTION("pitch shift changes the spectrogram") {
    Synthesis shifted = model.synthesize(phonemes, 1, 0, 0.4, 1.0);
    REQUIRE(max_abs_diff(shifted.mel, synth.mel) > 1e-9);
  }

  SECTION("speaker identity changes the spectrogram") {
    // fresh tables are zero, so give speakers distinct rows first
    Tensor table = model.store.get("tables.speaker");
    for (long j = 0; j < cfg.hidden; ++j)
      table.vec()[size_t(2 * cfg.hidden + j)] = 0.5;
    Synthesis other = model.synthesize(phonemes, 2, 0, 0.0, 1.0);
    REQUIRE(max_abs_diff(other.mel, synth.mel) > 1e-9);
  }

  SECTION("the same request synthesizes the same audio") {
    Synthesis again = model.synthesize(phonemes, 1, 0, 0.0, 1.0);
    REQUIRE(max_abs_diff(again.mel, synth.mel) == 0.0);
  }
}

TEST_CASE("training forwards are reproducible across model rebuilds") {
  ModelConfig cfg = tiny_config();
  BatchInputs batch = label_batch();

  auto run_once = [&](std::uint64_t seed) {
    Model model(cfg, seed);
    RunMode run;
    run.training = true;
    Rng rng = seeded_stream(36, "dropout");
    run.rng = &rng;
    return model.train_forward(batch, 2, run).mel_hat;
  };

  Tensor a = run_once(7);
  Tensor b = run_once(7);
  REQUIRE(max_abs_diff(a, b) == 0.0);
  Tensor c = run_once(8);
  REQUIRE(max_abs_diff(a, c) > 0.0);
}
