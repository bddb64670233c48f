#pragma once

// Probe trace serialization. A trace is saved as a directory holding
// manifest.txt (labels, mode, residual names, and the tensor index) and
// tensors.bin (the checksummed arrays in index order). The directory is
// staged and renamed, so partially written traces never appear.

#include <map>
#include <string>
#include <vector>

#include "resvox/adapter.hpp"
#include "resvox/blob_io.hpp"
#include "resvox/config.hpp"
#include "resvox/fsutil.hpp"

namespace resvox {

constexpr long kTraceFormatVersion = 1;

// Where a trace came from. Synthesis traces carry the requested labels and
// controls; corpus probes carry the utterance's own id and labels.
struct TraceLabels {
  long id = -1;
  long speaker = -1;
  long emotion = -1;
  double pitch_shift = 0.0;
  double energy_factor = 1.0;
};

struct SavedTrace {
  ProbeTrace trace;
  TraceLabels labels;
};

namespace detail {

inline std::vector<std::pair<std::string, Tensor>> trace_tensor_index(
    const ProbeTrace& trace) {
  std::vector<std::pair<std::string, Tensor>> index;
  static const char* kStageNames[6] = {"stage.A", "stage.B", "stage.C",
                                       "stage.D", "stage.E", "stage.F"};
  for (int i = 0; i < 6; ++i) index.emplace_back(kStageNames[i], trace.stage[size_t(i)]);
  for (int i = 0; i < 5; ++i)
    index.emplace_back("residual." + std::to_string(i + 1),
                       trace.residual[size_t(i)]);
  index.emplace_back("mask", trace.mask);
  index.emplace_back("duration_log", trace.duration_log);
  index.emplace_back("pitch_pred", trace.pitch_pred);
  index.emplace_back("energy_pred", trace.energy_pred);
  if (trace.prosody_encoded.defined())
    index.emplace_back("prosody_encoded", trace.prosody_encoded);
  if (trace.prosody_predicted.defined())
    index.emplace_back("prosody_predicted", trace.prosody_predicted);
  return index;
}

}  // namespace detail

inline void save_trace(const ProbeTrace& trace, const TraceLabels& labels,
                       const fs::path& dir) {
  require(trace.mode == "style" || trace.mode == "labels",
          "save_trace: trace has no mode; run a forward first");
  for (int i = 0; i < 6; ++i)
    require(trace.stage[size_t(i)].defined(), "save_trace: stage ", i,
            " is missing");

  std::string manifest;
  manifest += "# probe trace\n";
  manifest += "format_version = " + std::to_string(kTraceFormatVersion) + "\n";
  manifest += "mode = " + trace.mode + "\n";
  manifest += "id = " + std::to_string(labels.id) + "\n";
  manifest += "speaker = " + std::to_string(labels.speaker) + "\n";
  manifest += "emotion = " + std::to_string(labels.emotion) + "\n";
  manifest +=
      "pitch_shift = " + detail::double_to_text(labels.pitch_shift) + "\n";
  manifest +=
      "energy_factor = " + detail::double_to_text(labels.energy_factor) + "\n";
  std::string names;
  for (int i = 0; i < 5; ++i) {
    if (i) names += ",";
    names += trace.residual_names[size_t(i)];
  }
  manifest += "residual_names = " + names + "\n";

  auto index = detail::trace_tensor_index(trace);
  manifest += "# tensor <name>, blobs follow in this order\n";
  std::string blobs;
  for (const auto& [name, tensor] : index) {
    manifest += "tensor " + name + "\n";
    blob::append_tensor(blobs, tensor);
  }

  fs::path tmp = begin_atomic_dir(dir);
  atomic_write_file(tmp / "manifest.txt", manifest);
  atomic_write_file(tmp / "tensors.bin", blobs);
  commit_atomic_dir(tmp, dir);
}

inline SavedTrace load_trace(const fs::path& dir) {
  const std::string origin = (dir / "manifest.txt").string();
  std::string manifest = read_file(dir / "manifest.txt");

  std::map<std::string, std::string> keys;
  std::vector<std::string> tensor_names;
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
    if (parts.size() == 2 && parts[0] == "tensor") {
      tensor_names.push_back(parts[1]);
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      fail(origin, ":", lineno, ": expected key = value or tensor record");
    std::string key = detail::trim_copy(line.substr(0, eq));
    keys[key] = detail::trim_copy(line.substr(eq + 1));
  }

  auto want = [&](const char* key) {
    auto it = keys.find(key);
    if (it == keys.end()) fail(origin, ": missing key ", key);
    std::string value = it->second;
    keys.erase(it);
    return value;
  };

  long version = detail::text_to_long(want("format_version"), "format_version");
  if (version != kTraceFormatVersion)
    fail(origin, ": unsupported trace format version ", version);

  SavedTrace out;
  out.trace.mode = want("mode");
  require(out.trace.mode == "style" || out.trace.mode == "labels", origin,
          ": mode must be style or labels");
  out.labels.id = detail::text_to_long(want("id"), "id");
  out.labels.speaker = detail::text_to_long(want("speaker"), "speaker");
  out.labels.emotion = detail::text_to_long(want("emotion"), "emotion");
  out.labels.pitch_shift =
      detail::text_to_double(want("pitch_shift"), "pitch_shift");
  out.labels.energy_factor =
      detail::text_to_double(want("energy_factor"), "energy_factor");

  std::string names = want("residual_names");
  std::vector<std::string> name_list;
  size_t start = 0;
  while (true) {
    size_t comma = names.find(',', start);
    name_list.push_back(names.substr(
        start, comma == std::string::npos ? std::string::npos : comma - start));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  require(name_list.size() == 5, origin, ": residual_names needs 5 entries");
  for (int i = 0; i < 5; ++i)
    out.trace.residual_names[size_t(i)] = name_list[size_t(i)];

  for (const auto& [key, value] : keys)
    fail(origin, ": unknown key ", key);

  std::string blobs = read_file(dir / "tensors.bin");
  blob::Reader reader(blobs, (dir / "tensors.bin").string());
  std::map<std::string, Tensor> tensors;
  for (const std::string& name : tensor_names) {
    require(tensors.count(name) == 0, origin, ": duplicate tensor ", name);
    tensors[name] = reader.next_tensor();
  }
  require(reader.done(), origin, ": trailing bytes in tensors.bin");

  auto take = [&](const std::string& name, bool required) {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
      if (required) fail(origin, ": missing tensor ", name);
      return Tensor();
    }
    Tensor t = it->second;
    tensors.erase(it);
    return t;
  };

  static const char* kStageNames[6] = {"stage.A", "stage.B", "stage.C",
                                       "stage.D", "stage.E", "stage.F"};
  for (int i = 0; i < 6; ++i)
    out.trace.stage[size_t(i)] = take(kStageNames[i], true);
  for (int i = 0; i < 5; ++i)
    out.trace.residual[size_t(i)] =
        take("residual." + std::to_string(i + 1), true);
  out.trace.mask = take("mask", true);
  out.trace.duration_log = take("duration_log", true);
  out.trace.pitch_pred = take("pitch_pred", true);
  out.trace.energy_pred = take("energy_pred", true);
  out.trace.prosody_encoded = take("prosody_encoded", false);
  out.trace.prosody_predicted = take("prosody_predicted", false);
  for (const auto& [name, tensor] : tensors)
    fail(origin, ": unexpected tensor ", name);

  return out;
}

}  // namespace resvox
