#pragma once

// Model and training hyperparameters with two presets: a small configuration
// for tests and the full-size configuration. Values load from an INI file
// with [model] and [train] sections; any key not listed here is an error.

#include <set>
#include <string>
#include <vector>

#include "resvox/common.hpp"
#include "resvox/fsutil.hpp"
#include "resvox/inifile.hpp"

namespace resvox {

struct ModelConfig {
  // transformer backbone
  long hidden = 64;         // embedding width shared by every stage
  long embedding_dim = 64;  // phoneme embedding width, must equal hidden
  long encoder_layers = 2;
  long decoder_layers = 2;
  long conv_kernel = 3;
  long conv_filters = 128;
  long attention_heads = 2;
  double dropout = 0.2;

  // variance predictors and residual encoder nets
  long predictor_kernel = 3;
  long predictor_filters = 64;
  double predictor_dropout = 0.5;

  // reference encoder (style)
  std::vector<long> ref_conv_filters = {8, 8, 16};
  long ref_conv_kernel = 3;
  long ref_conv_stride = 2;
  long gru_hidden = 32;

  // style token layer
  long style_tokens = 10;
  long style_token_dim = 16;
  long style_heads = 2;
  long style_attention_hidden = 32;

  // data dimensions
  long mel_dim = 16;
  long phoneme_inventory = 24;
  long speakers = 4;
  long emotions = 3;

  static ModelConfig toy() { return ModelConfig(); }

  static ModelConfig full() {
    ModelConfig c;
    c.hidden = 384;
    c.embedding_dim = 384;
    c.encoder_layers = 6;
    c.decoder_layers = 6;
    c.conv_kernel = 9;
    c.conv_filters = 1536;
    c.attention_heads = 2;
    c.dropout = 0.2;
    c.predictor_kernel = 3;
    c.predictor_filters = 256;
    c.predictor_dropout = 0.5;
    c.ref_conv_filters = {32, 32, 64, 64, 128, 128};
    c.ref_conv_kernel = 3;
    c.ref_conv_stride = 2;
    c.gru_hidden = 192;
    c.style_tokens = 10;
    c.style_token_dim = 48;
    c.style_heads = 8;
    c.style_attention_hidden = 384;
    c.mel_dim = 80;
    c.phoneme_inventory = 80;
    c.speakers = 32;
    c.emotions = 7;
    return c;
  }

  void validate() const {
    require(hidden >= 1, "config: hidden must be positive");
    require(embedding_dim == hidden,
            "config: embedding_dim (", embedding_dim, ") must equal hidden (",
            hidden, "); the residual stages add embeddings in one space");
    require(encoder_layers >= 1 && decoder_layers >= 1,
            "config: layer counts must be positive");
    require(conv_kernel >= 1 && conv_kernel % 2 == 1,
            "config: conv_kernel must be a positive odd number");
    require(conv_filters >= 1, "config: conv_filters must be positive");
    require(attention_heads >= 1 && hidden % attention_heads == 0,
            "config: hidden (", hidden, ") must be divisible by",
            " attention_heads (", attention_heads, ")");
    require(dropout >= 0.0 && dropout < 1.0, "config: dropout in [0, 1)");
    require(predictor_kernel >= 1 && predictor_kernel % 2 == 1,
            "config: predictor_kernel must be a positive odd number");
    require(predictor_filters >= 1,
            "config: predictor_filters must be positive");
    require(predictor_dropout >= 0.0 && predictor_dropout < 1.0,
            "config: predictor_dropout in [0, 1)");
    require(!ref_conv_filters.empty(),
            "config: ref_conv_filters must not be empty");
    for (long f : ref_conv_filters)
      require(f >= 1, "config: ref_conv_filters entries must be positive");
    require(ref_conv_kernel >= 1 && ref_conv_kernel % 2 == 1,
            "config: ref_conv_kernel must be a positive odd number");
    require(ref_conv_stride >= 1, "config: ref_conv_stride must be positive");
    require(gru_hidden >= 1, "config: gru_hidden must be positive");
    require(style_tokens >= 1, "config: style_tokens must be positive");
    require(style_token_dim >= 1, "config: style_token_dim must be positive");
    require(style_heads >= 1 && style_attention_hidden % style_heads == 0,
            "config: style_attention_hidden (", style_attention_hidden,
            ") must be divisible by style_heads (", style_heads, ")");
    require(mel_dim >= 1, "config: mel_dim must be positive");
    require(phoneme_inventory >= 1,
            "config: phoneme_inventory must be positive");
    require(speakers >= 1 && emotions >= 1,
            "config: speakers and emotions must be positive");
  }
};

struct TrainConfig {
  long batch_size = 8;
  double learning_rate = 1e-3;
  long warmup_steps = 200;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-9;
  double augment_fraction = 0.5;
  long phase1_steps = 3000;
  long phase2_steps = 3000;
  long phase3_steps = 2000;
  long holdout_modulus = 0;  // 0 = no held-out split; else ids % m == 0 held
  long log_every = 100;

  void validate() const {
    require(batch_size >= 1, "config: batch_size must be positive");
    require(learning_rate > 0.0, "config: learning_rate must be positive");
    require(warmup_steps >= 0, "config: warmup_steps must be >= 0");
    require(adam_beta1 >= 0.0 && adam_beta1 < 1.0,
            "config: adam_beta1 in [0, 1)");
    require(adam_beta2 >= 0.0 && adam_beta2 < 1.0,
            "config: adam_beta2 in [0, 1)");
    require(adam_eps > 0.0, "config: adam_eps must be positive");
    require(augment_fraction >= 0.0 && augment_fraction <= 1.0,
            "config: augment_fraction in [0, 1]");
    require(phase1_steps >= 1 && phase2_steps >= 1 && phase3_steps >= 1,
            "config: phase step counts must be positive");
    require(holdout_modulus == 0 || holdout_modulus >= 2,
            "config: holdout_modulus must be 0 (off) or >= 2");
    require(log_every >= 1, "config: log_every must be positive");
  }
};

struct Config {
  ModelConfig model;
  TrainConfig train;

  void validate() const {
    model.validate();
    train.validate();
  }
};

inline Config parse_config(const std::string& text, const std::string& origin) {
  Config c;
  IniFile ini(text, origin);
  ini.get("model", "hidden", c.model.hidden);
  // embedding width follows hidden unless the file pins it separately
  c.model.embedding_dim = c.model.hidden;
  ini.get("model", "embedding_dim", c.model.embedding_dim);
  ini.get("model", "encoder_layers", c.model.encoder_layers);
  ini.get("model", "decoder_layers", c.model.decoder_layers);
  ini.get("model", "conv_kernel", c.model.conv_kernel);
  ini.get("model", "conv_filters", c.model.conv_filters);
  ini.get("model", "attention_heads", c.model.attention_heads);
  ini.get("model", "dropout", c.model.dropout);
  ini.get("model", "predictor_kernel", c.model.predictor_kernel);
  ini.get("model", "predictor_filters", c.model.predictor_filters);
  ini.get("model", "predictor_dropout", c.model.predictor_dropout);
  ini.get("model", "ref_conv_filters", c.model.ref_conv_filters);
  ini.get("model", "ref_conv_kernel", c.model.ref_conv_kernel);
  ini.get("model", "ref_conv_stride", c.model.ref_conv_stride);
  ini.get("model", "gru_hidden", c.model.gru_hidden);
  ini.get("model", "style_tokens", c.model.style_tokens);
  ini.get("model", "style_token_dim", c.model.style_token_dim);
  ini.get("model", "style_heads", c.model.style_heads);
  ini.get("model", "style_attention_hidden", c.model.style_attention_hidden);
  ini.get("model", "mel_dim", c.model.mel_dim);
  ini.get("model", "phoneme_inventory", c.model.phoneme_inventory);
  ini.get("model", "speakers", c.model.speakers);
  ini.get("model", "emotions", c.model.emotions);

  ini.get("train", "batch_size", c.train.batch_size);
  ini.get("train", "learning_rate", c.train.learning_rate);
  ini.get("train", "warmup_steps", c.train.warmup_steps);
  ini.get("train", "adam_beta1", c.train.adam_beta1);
  ini.get("train", "adam_beta2", c.train.adam_beta2);
  ini.get("train", "adam_eps", c.train.adam_eps);
  ini.get("train", "augment_fraction", c.train.augment_fraction);
  ini.get("train", "phase1_steps", c.train.phase1_steps);
  ini.get("train", "phase2_steps", c.train.phase2_steps);
  ini.get("train", "phase3_steps", c.train.phase3_steps);
  ini.get("train", "holdout_modulus", c.train.holdout_modulus);
  ini.get("train", "log_every", c.train.log_every);

  ini.finish({"model", "train"});
  c.validate();
  return c;
}

inline Config load_config(const fs::path& path) {
  return parse_config(read_file(path), path.string());
}

// INI text that parse_config reads back to an identical ModelConfig. Doubles
// are written as hexfloat, so the round trip is exact.
inline std::string serialize_model_config(const ModelConfig& m) {
  std::string out = "[model]\n";
  auto put_long = [&](const char* key, long v) {
    out += std::string(key) + " = " + std::to_string(v) + "\n";
  };
  auto put_double = [&](const char* key, double v) {
    out += std::string(key) + " = " + detail::double_to_text(v) + "\n";
  };
  put_long("hidden", m.hidden);
  put_long("embedding_dim", m.embedding_dim);
  put_long("encoder_layers", m.encoder_layers);
  put_long("decoder_layers", m.decoder_layers);
  put_long("conv_kernel", m.conv_kernel);
  put_long("conv_filters", m.conv_filters);
  put_long("attention_heads", m.attention_heads);
  put_double("dropout", m.dropout);
  put_long("predictor_kernel", m.predictor_kernel);
  put_long("predictor_filters", m.predictor_filters);
  put_double("predictor_dropout", m.predictor_dropout);
  std::string filters;
  for (size_t i = 0; i < m.ref_conv_filters.size(); ++i) {
    if (i) filters += ", ";
    filters += std::to_string(m.ref_conv_filters[i]);
  }
  out += "ref_conv_filters = " + filters + "\n";
  put_long("ref_conv_kernel", m.ref_conv_kernel);
  put_long("ref_conv_stride", m.ref_conv_stride);
  put_long("gru_hidden", m.gru_hidden);
  put_long("style_tokens", m.style_tokens);
  put_long("style_token_dim", m.style_token_dim);
  put_long("style_heads", m.style_heads);
  put_long("style_attention_hidden", m.style_attention_hidden);
  put_long("mel_dim", m.mel_dim);
  put_long("phoneme_inventory", m.phoneme_inventory);
  put_long("speakers", m.speakers);
  put_long("emotions", m.emotions);
  return out;
}

}  // namespace resvox
