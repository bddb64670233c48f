#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <string>
#include <vector>

#include "resvox/checkpoint.hpp"

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

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("resvox_ckpt_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Move the buffers and one table away from their fresh-model values so the
// round trip has something nontrivial to preserve.
void perturb(Model& model) {
  Rng rng = seeded_stream(55, "perturb");
  Tensor table = model.store.get("tables.speaker");
  for (double& v : table.vec()) v = rng.uniform(-1.0, 1.0);
  Tensor mel = Tensor({12, model.config.mel_dim});
  for (double& v : mel.vec()) v = rng.uniform(-1.0, 1.0);
  model.style_encoder.forward(mel, true);
}

void require_same_tensors(const ParameterStore& a, const ParameterStore& b) {
  REQUIRE(a.names() == b.names());
  REQUIRE(a.buffer_names() == b.buffer_names());
  auto compare = [&](const std::vector<std::string>& names) {
    for (const std::string& name : names) {
      Tensor ta = a.get(name), tb = b.get(name);
      REQUIRE(ta.shape() == tb.shape());
      for (long i = 0; i < ta.size(); ++i)
        REQUIRE(ta.data()[i] == tb.data()[i]);
    }
  };
  compare(a.names());
  compare(a.buffer_names());
}

}  // namespace

TEST_CASE("checkpoints restore the model exactly") {
  TempDir tmp("roundtrip");
  ModelConfig cfg = tiny_config();
  Model model(cfg, 17);
  perturb(model);
  model.store.freeze_group("tables");
  model.store.freeze_group("style_encoder");

  CheckpointMeta meta;
  meta.phase = 2;
  meta.step = 123;
  save_checkpoint(model, meta, tmp.path / "ckpt");

  LoadedCheckpoint loaded = load_checkpoint(tmp.path / "ckpt");
  REQUIRE(loaded.meta.phase == 2);
  REQUIRE(loaded.meta.step == 123);
  REQUIRE(loaded.model->store.seed() == 17);
  require_same_tensors(model.store, loaded.model->store);

  SECTION("frozen flags survive the round trip") {
    for (const std::string& name : model.store.names())
      REQUIRE(loaded.model->store.frozen(name) == model.store.frozen(name));
    REQUIRE(loaded.model->store.frozen("tables.speaker"));
    REQUIRE_FALSE(loaded.model->store.frozen("decoder.head.weight"));
  }

  SECTION("the echoed architecture matches the original") {
    REQUIRE(loaded.model->config.hidden == cfg.hidden);
    REQUIRE(loaded.model->config.dropout == cfg.dropout);
    REQUIRE(loaded.model->config.ref_conv_filters == cfg.ref_conv_filters);
    REQUIRE(loaded.model->config.emotions == cfg.emotions);
  }

  SECTION("saving the loaded model reproduces the files byte for byte") {
    save_checkpoint(*loaded.model, loaded.meta, tmp.path / "again");
    for (const char* name : {"manifest.txt", "config.ini", "params.bin"})
      REQUIRE(read_file(tmp.path / "ckpt" / name) ==
              read_file(tmp.path / "again" / name));
  }

  SECTION("a loaded model synthesizes exactly like the original") {
    for (Model* m : {&model, loaded.model.get()}) {
      for (double& v : m->store.get("duration_predictor.head.weight").vec())
        v = 0.0;
      for (double& v : m->store.get("duration_predictor.head.bias").vec())
        v = std::log(3.0);
    }
    Synthesis a = model.synthesize({3, 1, 4}, 1, 0, 0.0, 1.0);
    Synthesis b = loaded.model->synthesize({3, 1, 4}, 1, 0, 0.0, 1.0);
    REQUIRE(a.durations == b.durations);
    for (long i = 0; i < a.mel.size(); ++i)
      REQUIRE(a.mel.data()[i] == b.mel.data()[i]);
  }
}

TEST_CASE("checkpoint loading rejects damaged or mismatched files") {
  TempDir tmp("damage");
  Model model(tiny_config(), 17);
  CheckpointMeta meta;
  meta.phase = 1;
  meta.step = 1;
  save_checkpoint(model, meta, tmp.path / "ckpt");

  SECTION("saving over an existing checkpoint is refused") {
    REQUIRE_THROWS(save_checkpoint(model, meta, tmp.path / "ckpt"));
  }

  SECTION("a flipped payload byte fails the checksum") {
    fs::path bin = tmp.path / "ckpt" / "params.bin";
    std::string bytes = read_file(bin);
    bytes[bytes.size() - 1] = char(bytes[bytes.size() - 1] ^ 0x5a);
    atomic_write_file(bin, bytes);
    REQUIRE_THROWS_WITH(load_checkpoint(tmp.path / "ckpt"),
                        ContainsSubstring("checksum"));
  }

  SECTION("a truncated blob file is reported") {
    fs::path bin = tmp.path / "ckpt" / "params.bin";
    std::string bytes = read_file(bin);
    atomic_write_file(bin, bytes.substr(0, bytes.size() / 2));
    REQUIRE_THROWS_WITH(load_checkpoint(tmp.path / "ckpt"),
                        ContainsSubstring("truncated"));
  }

  SECTION("an unknown parameter name is reported") {
    fs::path man = tmp.path / "ckpt" / "manifest.txt";
    std::string text = read_file(man);
    size_t at = text.find("param decoder.head.bias");
    REQUIRE(at != std::string::npos);
    text.replace(at, 23, "param decoder.head.bogu");
    atomic_write_file(man, text);
    REQUIRE_THROWS_WITH(load_checkpoint(tmp.path / "ckpt"),
                        ContainsSubstring("does not exist"));
  }

  SECTION("an architecture edit no longer matches the tensors") {
    fs::path ini = tmp.path / "ckpt" / "config.ini";
    std::string text = read_file(ini);
    size_t at = text.find("conv_filters = 12");
    REQUIRE(at != std::string::npos);
    text.replace(at, 17, "conv_filters = 16");
    atomic_write_file(ini, text);
    REQUIRE_THROWS(load_checkpoint(tmp.path / "ckpt"));
  }

  SECTION("a future format version is refused") {
    fs::path man = tmp.path / "ckpt" / "manifest.txt";
    std::string text = read_file(man);
    size_t at = text.find("format_version = 1");
    REQUIRE(at != std::string::npos);
    text.replace(at, 18, "format_version = 9");
    atomic_write_file(man, text);
    REQUIRE_THROWS_WITH(load_checkpoint(tmp.path / "ckpt"),
                        ContainsSubstring("version"));
  }

  SECTION("a missing directory is reported") {
    REQUIRE_THROWS(load_checkpoint(tmp.path / "nowhere"));
  }
}
