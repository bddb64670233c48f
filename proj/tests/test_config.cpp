#include <catch2/catch_amalgamated.hpp>

#include "resvox/config.hpp"

using namespace resvox;

TEST_CASE("ini parsing handles sections, comments, and whitespace") {
  IniFile ini(
      "# leading comment\n"
      "[model]\n"
      "hidden = 128\n"
      "; another comment\n"
      "  dropout =  0.3  \n"
      "[train]\n"
      "filters = 1, 2 ,3\n",
      "test.ini");
  long hidden = 0;
  double dropout = 0.0;
  std::vector<long> filters;
  ini.get("model", "hidden", hidden);
  ini.get("model", "dropout", dropout);
  ini.get("train", "filters", filters);
  REQUIRE(hidden == 128);
  REQUIRE(dropout == 0.3);
  REQUIRE(filters == std::vector<long>{1, 2, 3});
  ini.finish({"model", "train"});
}

TEST_CASE("ini getters keep defaults for absent keys") {
  IniFile ini("[model]\nhidden = 96\n", "test.ini");
  long hidden = 1, layers = 5;
  ini.get("model", "hidden", hidden);
  ini.get("model", "layers", layers);
  REQUIRE(hidden == 96);
  REQUIRE(layers == 5);
  ini.finish({"model"});
}

TEST_CASE("ini rejects malformed input") {
  REQUIRE_THROWS(IniFile("hidden = 1\n", "t").finish({}));  // outside section
  REQUIRE_THROWS(IniFile("[model\nk = 1\n", "t"));
  REQUIRE_THROWS(IniFile("[model]\nno equals sign\n", "t"));
  REQUIRE_THROWS(IniFile("[model]\n= 1\n", "t"));
  REQUIRE_THROWS(IniFile("[model]\nk = 1\nk = 2\n", "t"));
  IniFile bad_int("[model]\nhidden = twelve\n", "t");
  long v = 0;
  REQUIRE_THROWS(bad_int.get("model", "hidden", v));
}

TEST_CASE("ini rejects unknown keys and sections at finish") {
  IniFile ini("[model]\nhidden = 1\nmystery = 2\n", "t");
  long hidden = 0;
  ini.get("model", "hidden", hidden);
  try {
    ini.finish({"model"});
    FAIL("expected unknown-key failure");
  } catch (const std::runtime_error& e) {
    REQUIRE(std::string(e.what()).find("mystery") != std::string::npos);
  }
  IniFile other("[mystery_section]\nk = 1\n", "t");
  long k = 0;
  other.get("mystery_section", "k", k);
  REQUIRE_THROWS(other.finish({"model", "train"}));
}

TEST_CASE("config presets validate and differ as documented") {
  ModelConfig toy = ModelConfig::toy();
  toy.validate();
  REQUIRE(toy.hidden == 64);
  REQUIRE(toy.encoder_layers == 2);
  REQUIRE(toy.conv_kernel == 3);
  REQUIRE(toy.conv_filters == 128);
  REQUIRE(toy.mel_dim == 16);

  ModelConfig full = ModelConfig::full();
  full.validate();
  REQUIRE(full.hidden == 384);
  REQUIRE(full.encoder_layers == 6);
  REQUIRE(full.decoder_layers == 6);
  REQUIRE(full.conv_kernel == 9);
  REQUIRE(full.conv_filters == 1536);
  REQUIRE(full.attention_heads == 2);
  REQUIRE(full.ref_conv_filters ==
          std::vector<long>{32, 32, 64, 64, 128, 128});
  REQUIRE(full.gru_hidden == 192);
  REQUIRE(full.style_tokens == 10);
  REQUIRE(full.style_token_dim == 48);
  REQUIRE(full.style_heads == 8);

  TrainConfig train;
  train.validate();
  REQUIRE(train.learning_rate == 1e-3);
  REQUIRE(train.warmup_steps == 200);
  REQUIRE(train.adam_beta1 == 0.9);
  REQUIRE(train.adam_beta2 == 0.98);
}

TEST_CASE("config file overrides defaults and is validated") {
  Config c = parse_config(
      "[model]\n"
      "hidden = 32\n"
      "attention_heads = 4\n"
      "mel_dim = 8\n"
      "[train]\n"
      "batch_size = 2\n"
      "phase1_steps = 10\n",
      "inline");
  REQUIRE(c.model.hidden == 32);
  REQUIRE(c.model.embedding_dim == 32);
  REQUIRE(c.model.attention_heads == 4);
  REQUIRE(c.model.mel_dim == 8);
  REQUIRE(c.train.batch_size == 2);
  REQUIRE(c.train.phase1_steps == 10);
  REQUIRE(c.train.phase2_steps == 3000);

  // hidden not divisible by heads
  REQUIRE_THROWS(
      parse_config("[model]\nhidden = 30\nattention_heads = 4\n", "inline"));
  // embedding width must match hidden
  REQUIRE_THROWS(
      parse_config("[model]\nhidden = 32\nembedding_dim = 16\n", "inline"));
  // unknown key
  REQUIRE_THROWS(parse_config("[model]\nhiden = 32\n", "inline"));
  // bad holdout modulus
  REQUIRE_THROWS(parse_config("[train]\nholdout_modulus = 1\n", "inline"));
}
