#pragma once

// Checkpoints are directories: manifest.txt lists phase, step, store seed,
// and every tensor by name; config.ini echoes the architecture so a load can
// rebuild the model before filling it; params.bin holds one blob per tensor
// in manifest order. Saving twice from the same state is byte-identical.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "resvox/blob_io.hpp"
#include "resvox/config.hpp"
#include "resvox/fsutil.hpp"
#include "resvox/model.hpp"

namespace resvox {

constexpr long kCheckpointFormatVersion = 1;

struct CheckpointMeta {
  long phase = 0;
  long step = 0;
};

inline void save_checkpoint(const Model& model, const CheckpointMeta& meta,
                            const fs::path& dir) {
  const ParameterStore& store = model.store;
  std::vector<std::string> params = store.names();
  std::vector<std::string> buffers = store.buffer_names();

  std::string manifest;
  manifest += "# model checkpoint\n";
  manifest += "format_version = " + std::to_string(kCheckpointFormatVersion) +
              "\n";
  manifest += "phase = " + std::to_string(meta.phase) + "\n";
  manifest += "step = " + std::to_string(meta.step) + "\n";
  manifest += "seed = " + std::to_string(store.seed()) + "\n";
  manifest += "parameter_count = " + std::to_string(long(params.size())) +
              "\n";
  manifest += "buffer_count = " + std::to_string(long(buffers.size())) + "\n";
  manifest += "# param <name> <group> <frozen 0|1>, then buffer <name>;\n";
  manifest += "# params.bin holds their blobs in this order\n";

  std::string blobs;
  for (const std::string& name : params) {
    manifest += "param " + name + " " + store.group_of(name) + " " +
                (store.frozen(name) ? "1" : "0") + "\n";
    blob::append_tensor(blobs, store.get(name));
  }
  for (const std::string& name : buffers) {
    manifest += "buffer " + name + "\n";
    blob::append_tensor(blobs, store.get(name));
  }

  fs::path tmp = begin_atomic_dir(dir);
  atomic_write_file(tmp / "manifest.txt", manifest);
  atomic_write_file(tmp / "config.ini", serialize_model_config(model.config));
  atomic_write_file(tmp / "params.bin", blobs);
  commit_atomic_dir(tmp, dir);
}

struct LoadedCheckpoint {
  CheckpointMeta meta;
  std::unique_ptr<Model> model;
};

inline LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  std::string origin = (dir / "manifest.txt").string();
  std::string manifest = read_file(dir / "manifest.txt");

  std::map<std::string, std::string> keys;
  struct Entry {
    std::string name;
    std::string group;  // empty for buffers
    bool frozen = false;
    bool is_param = false;
  };
  std::vector<Entry> entries;
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
    if (!parts.empty() && parts[0] == "param") {
      if (parts.size() != 4)
        fail(origin, ":", lineno, ": param record needs 4 fields");
      if (parts[3] != "0" && parts[3] != "1")
        fail(origin, ":", lineno, ": frozen flag must be 0 or 1");
      entries.push_back({parts[1], parts[2], parts[3] == "1", true});
      continue;
    }
    if (!parts.empty() && parts[0] == "buffer") {
      if (parts.size() != 2)
        fail(origin, ":", lineno, ": buffer record needs 2 fields");
      entries.push_back({parts[1], "", false, false});
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      fail(origin, ":", lineno, ": expected key = value");
    keys[detail::trim_copy(line.substr(0, eq))] =
        detail::trim_copy(line.substr(eq + 1));
  }

  auto want = [&](const char* key) -> std::string {
    auto it = keys.find(key);
    if (it == keys.end()) fail(origin, ": missing key ", key);
    std::string v = it->second;
    keys.erase(it);
    return v;
  };
  long version = detail::text_to_long(want("format_version"), "version");
  require(version == kCheckpointFormatVersion, origin,
          ": unsupported checkpoint format version ", version);
  LoadedCheckpoint loaded;
  loaded.meta.phase = detail::text_to_long(want("phase"), "phase");
  loaded.meta.step = detail::text_to_long(want("step"), "step");
  std::uint64_t seed = std::uint64_t(
      detail::text_to_long(want("seed"), "seed"));
  long param_count = detail::text_to_long(want("parameter_count"),
                                          "parameter_count");
  long buffer_count = detail::text_to_long(want("buffer_count"),
                                           "buffer_count");
  for (const auto& [key, value] : keys)
    fail(origin, ": unknown key ", key);

  long seen_params = 0, seen_buffers = 0;
  for (const Entry& e : entries) (e.is_param ? seen_params : seen_buffers)++;
  require(seen_params == param_count, origin, ": manifest claims ",
          param_count, " parameters but lists ", seen_params);
  require(seen_buffers == buffer_count, origin, ": manifest claims ",
          buffer_count, " buffers but lists ", seen_buffers);

  Config cfg = parse_config(read_file(dir / "config.ini"),
                            (dir / "config.ini").string());
  loaded.model = std::make_unique<Model>(cfg.model, seed);
  ParameterStore& store = loaded.model->store;

  // The store was just built from the echoed config, so the names must agree
  // with the manifest exactly; any gap means the files are from a different
  // build of the model.
  std::string bytes = read_file(dir / "params.bin");
  blob::Reader reader(bytes, (dir / "params.bin").string());
  for (const Entry& e : entries) {
    if (e.is_param) {
      require(store.has_parameter(e.name), origin, ": parameter ", e.name,
              " does not exist in a model built from config.ini");
      require(store.group_of(e.name) == e.group, origin, ": parameter ",
              e.name, " is recorded in group ", e.group,
              " but the model places it in ", store.group_of(e.name));
      store.set_frozen(e.name, e.frozen);
    }
    Tensor dst = store.get(e.name);
    Tensor src = reader.next_tensor();
    require(src.shape() == dst.shape(), origin, ": tensor ", e.name,
            " has a different shape in params.bin");
    std::copy(src.data(), src.data() + src.size(), dst.data());
  }
  require(reader.done(), (dir / "params.bin").string(), ": trailing bytes");

  // Catch tensors the manifest never mentioned.
  require(long(store.names().size()) == param_count, origin,
          ": model has ", store.names().size(), " parameters but the",
          " manifest lists ", param_count);
  require(long(store.buffer_names().size()) == buffer_count, origin,
          ": model has ", store.buffer_names().size(), " buffers but the",
          " manifest lists ", buffer_count);
  return loaded;
}

}  // namespace resvox
