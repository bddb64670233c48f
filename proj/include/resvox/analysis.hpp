#pragma once

// Offline analysis over saved traces: residual extraction by stage
// subtraction, utterance-level embedding sets, principal-component
// projection to 2-D, silhouette scoring, style mixing, and the CSV formats
// the command-line tool emits.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "resvox/model.hpp"
#include "resvox/trace_io.hpp"

namespace resvox {

// One row per utterance plus the labels needed for scoring and plotting.
struct EmbeddingSet {
  Tensor rows;  // [N, D]
  std::vector<long> ids;
  std::map<std::string, std::vector<long>> labels;
  std::string provenance;

  long count() const { return rows.defined() ? rows.extent(0) : 0; }

  void validate() const {
    require(rows.defined() && rows.rank() == 2, "embedding set: rows must be [N, D]");
    require(long(ids.size()) == rows.extent(0),
            "embedding set: one id per row");
    for (const auto& [key, values] : labels)
      require(long(values.size()) == rows.extent(0),
              "embedding set: label ", key, " must cover every row");
  }
};

// stage(l) minus stage(k-1): the residual block for attributes k..l. A
// single-stage request returns the stored residual itself, so it is exact
// rather than a reconstruction.
inline Tensor extract_residual(const ProbeTrace& trace, long k, long l) {
  require(k >= 1 && l <= 5 && k <= l,
          "extract_residual: need 1 <= k <= l <= 5, got ", k, "..", l);
  if (k == l) return trace.residual[size_t(k - 1)];
  return sub(trace.stage[size_t(l)], trace.stage[size_t(k - 1)]);
}

// "F-A" style stage difference specs for the command line.
inline std::pair<long, long> parse_stage_diff(const std::string& spec) {
  require(spec.size() == 3 && spec[1] == '-', "stage diff must look like F-A, got ",
          spec);
  long hi = spec[0] - 'A';
  long lo = spec[2] - 'A';
  require(hi >= 0 && hi <= 5 && lo >= 0 && lo <= 5,
          "stage diff letters must be A..F, got ", spec);
  require(hi > lo, "stage diff must subtract an earlier stage, got ", spec);
  return {hi, lo};
}

inline Tensor stage_difference(const ProbeTrace& trace, long hi, long lo) {
  require(hi >= 0 && hi <= 5 && lo >= 0 && lo < hi,
          "stage_difference: bad stage indices");
  return sub(trace.stage[size_t(hi)], trace.stage[size_t(lo)]);
}

// The full style with the speaker component subtracted out.
inline Tensor normalized_full_style(const ProbeTrace& trace) {
  return sub(trace.stage[5], trace.stage[1]);
}

// Mean over the real rows of [B, L, D], one vector per batch item.
inline Tensor masked_row_mean(const Tensor& x, const Tensor& mask) {
  require(x.rank() == 3, "masked_row_mean: input must be [B, L, D]");
  require(mask.rank() == 2 && mask.extent(0) == x.extent(0) &&
              mask.extent(1) == x.extent(1),
          "masked_row_mean: mask must be [B, L]");
  long B = x.extent(0), L = x.extent(1), D = x.extent(2);
  Tensor out({B, D});
  for (long b = 0; b < B; ++b) {
    double count = 0.0;
    for (long l = 0; l < L; ++l) {
      double m = mask.vec()[size_t(b * L + l)];
      if (m == 0.0) continue;
      count += 1.0;
      for (long d = 0; d < D; ++d)
        out.vec()[size_t(b * D + d)] += x.vec()[size_t((b * L + l) * D + d)];
    }
    require(count > 0.0, "masked_row_mean: item ", b, " has no real rows");
    for (long d = 0; d < D; ++d) out.vec()[size_t(b * D + d)] /= count;
  }
  return out;
}

// One utterance-averaged difference vector per trace.
inline EmbeddingSet build_embedding_set(const std::vector<SavedTrace>& traces,
                                        const std::string& diff_spec) {
  require(!traces.empty(), "embedding set: no traces");
  auto [hi, lo] = parse_stage_diff(diff_spec);
  long D = traces[0].trace.stage[0].extent(2);
  EmbeddingSet set;
  set.provenance = diff_spec;
  set.rows = Tensor({long(traces.size()), D});
  set.labels["speaker"] = {};
  set.labels["emotion"] = {};
  for (size_t i = 0; i < traces.size(); ++i) {
    const ProbeTrace& tr = traces[i].trace;
    require(tr.stage[0].extent(0) == 1,
            "embedding set: traces must hold a single utterance each");
    require(tr.stage[0].extent(2) == D, "embedding set: mixed widths");
    Tensor diff = stage_difference(tr, hi, lo);
    Tensor row = masked_row_mean(diff, tr.mask);
    std::copy(row.data(), row.data() + D, set.rows.data() + long(i) * D);
    set.ids.push_back(traces[i].labels.id);
    set.labels["speaker"].push_back(traces[i].labels.speaker);
    set.labels["emotion"].push_back(traces[i].labels.emotion);
  }
  set.validate();
  return set;
}

namespace detail {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. `a` (row-major
// n by n) is reduced toward diagonal in place; `v` ends up with eigenvector
// j in column j.
inline void jacobi_eigen(std::vector<double>& a, long n,
                         std::vector<double>& v) {
  v.assign(size_t(n * n), 0.0);
  for (long i = 0; i < n; ++i) v[size_t(i * n + i)] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (long p = 0; p < n; ++p)
      for (long q = p + 1; q < n; ++q) off += a[size_t(p * n + q)] * a[size_t(p * n + q)];
    if (off <= 1e-30) break;
    for (long p = 0; p < n; ++p) {
      for (long q = p + 1; q < n; ++q) {
        double apq = a[size_t(p * n + q)];
        if (std::fabs(apq) <= 1e-300) continue;
        double theta = (a[size_t(q * n + q)] - a[size_t(p * n + p)]) / (2.0 * apq);
        double t = (theta >= 0.0 ? 1.0 : -1.0) /
                   (std::fabs(theta) + std::sqrt(1.0 + theta * theta));
        double c = 1.0 / std::sqrt(1.0 + t * t);
        double s = t * c;
        for (long i = 0; i < n; ++i) {
          double aip = a[size_t(i * n + p)];
          double aiq = a[size_t(i * n + q)];
          a[size_t(i * n + p)] = c * aip - s * aiq;
          a[size_t(i * n + q)] = s * aip + c * aiq;
        }
        for (long i = 0; i < n; ++i) {
          double api = a[size_t(p * n + i)];
          double aqi = a[size_t(q * n + i)];
          a[size_t(p * n + i)] = c * api - s * aqi;
          a[size_t(q * n + i)] = s * api + c * aqi;
        }
        for (long i = 0; i < n; ++i) {
          double vip = v[size_t(i * n + p)];
          double viq = v[size_t(i * n + q)];
          v[size_t(i * n + p)] = c * vip - s * viq;
          v[size_t(i * n + q)] = s * vip + c * viq;
        }
      }
    }
  }
}

}  // namespace detail

// Principal-component projection onto the top two variance directions.
// Deterministic: components are ordered by eigenvalue and each one is signed
// so its largest-magnitude loading is positive.
inline Tensor project_2d(const EmbeddingSet& set) {
  set.validate();
  long N = set.rows.extent(0);
  long D = set.rows.extent(1);
  require(N >= 2, "project_2d: need at least 2 rows");

  std::vector<double> mean(size_t(D), 0.0);
  for (long i = 0; i < N; ++i)
    for (long d = 0; d < D; ++d)
      mean[size_t(d)] += set.rows.vec()[size_t(i * D + d)];
  for (double& m : mean) m /= double(N);

  std::vector<double> centered(size_t(N * D));
  double scale = 0.0;
  for (long i = 0; i < N; ++i)
    for (long d = 0; d < D; ++d) {
      double c = set.rows.vec()[size_t(i * D + d)] - mean[size_t(d)];
      centered[size_t(i * D + d)] = c;
      scale += set.rows.vec()[size_t(i * D + d)] *
               set.rows.vec()[size_t(i * D + d)];
    }
  scale /= double(N);

  std::vector<double> cov(size_t(D * D), 0.0);
  for (long i = 0; i < N; ++i)
    for (long p = 0; p < D; ++p)
      for (long q = p; q < D; ++q)
        cov[size_t(p * D + q)] +=
            centered[size_t(i * D + p)] * centered[size_t(i * D + q)];
  for (long p = 0; p < D; ++p)
    for (long q = p; q < D; ++q) {
      cov[size_t(p * D + q)] /= double(N - 1);
      cov[size_t(q * D + p)] = cov[size_t(p * D + q)];
    }

  double total_variance = 0.0;
  for (long d = 0; d < D; ++d) total_variance += cov[size_t(d * D + d)];
  require(total_variance > 1e-18 * std::max(1.0, scale),
          "project_2d: rows have no variance to project");

  std::vector<double> vecs;
  detail::jacobi_eigen(cov, D, vecs);
  std::vector<long> order(static_cast<size_t>(D));
  for (long d = 0; d < D; ++d) order[size_t(d)] = d;
  std::stable_sort(order.begin(), order.end(), [&](long x, long y) {
    return cov[size_t(x * D + x)] > cov[size_t(y * D + y)];
  });

  Tensor coords({N, 2});
  long comps = std::min<long>(2, D);
  for (long j = 0; j < comps; ++j) {
    long col = order[size_t(j)];
    long peak = 0;
    for (long d = 1; d < D; ++d)
      if (std::fabs(vecs[size_t(d * D + col)]) >
          std::fabs(vecs[size_t(peak * D + col)]))
        peak = d;
    double sign = vecs[size_t(peak * D + col)] < 0.0 ? -1.0 : 1.0;
    for (long i = 0; i < N; ++i) {
      double x = 0.0;
      for (long d = 0; d < D; ++d)
        x += centered[size_t(i * D + d)] * vecs[size_t(d * D + col)];
      coords.vec()[size_t(i * 2 + j)] = sign * x;
    }
  }
  return coords;
}

// Mean silhouette with Euclidean distance, the textbook quadratic formula.
inline double cluster_quality(const EmbeddingSet& set,
                              const std::string& label_key) {
  set.validate();
  auto label_it = set.labels.find(label_key);
  require(label_it != set.labels.end(), "cluster_quality: no label named ",
          label_key);
  const std::vector<long>& label = label_it->second;
  long N = set.rows.extent(0);
  long D = set.rows.extent(1);

  std::map<long, std::vector<long>> members;
  for (long i = 0; i < N; ++i) members[label[size_t(i)]].push_back(i);
  require(members.size() >= 2, "cluster_quality: need at least 2 labels, got ",
          long(members.size()));
  for (const auto& [value, rows] : members)
    require(rows.size() >= 2, "cluster_quality: label value ", value,
            " has fewer than 2 rows");

  auto dist = [&](long i, long j) {
    double sum = 0.0;
    for (long d = 0; d < D; ++d) {
      double diff = set.rows.vec()[size_t(i * D + d)] -
                    set.rows.vec()[size_t(j * D + d)];
      sum += diff * diff;
    }
    return std::sqrt(sum);
  };

  double total = 0.0;
  for (long i = 0; i < N; ++i) {
    long own = label[size_t(i)];
    double a = 0.0;
    for (long j : members[own])
      if (j != i) a += dist(i, j);
    a /= double(members[own].size() - 1);

    double b = std::numeric_limits<double>::infinity();
    for (const auto& [value, rows] : members) {
      if (value == own) continue;
      double mean = 0.0;
      for (long j : rows) mean += dist(i, j);
      mean /= double(rows.size());
      b = std::min(b, mean);
    }

    double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / double(N);
}

// Style mixing: rebuild the final embedding from stage A of trace b plus
// each residual taken from the chosen source, then decode with durations
// from the selected side.
struct MixSelector {
  std::array<char, 5> source = {'b', 'b', 'b', 'b', 'b'};  // 'a' or 'b'
  char duration_source = 0;  // 'a', 'b', or 0 to follow the non-speaker side
};

struct MixResult {
  Tensor mel;  // [T, M]
  std::vector<long> durations;
  Tensor mixed;  // [1, L, H], the reassembled final stage
};

inline MixResult mix_styles(const Model& model, const ProbeTrace& a,
                            const ProbeTrace& b, const MixSelector& selector) {
  require(a.stage[0].defined() && b.stage[0].defined(),
          "mix_styles: traces are missing stages");
  require(a.stage[0].shape() == b.stage[0].shape(),
          "mix_styles: traces disagree on length; both must come from the "
          "same phoneme sequence");
  require(a.stage[0].extent(0) == 1,
          "mix_styles: traces must hold a single utterance each");
  for (char c : selector.source)
    require(c == 'a' || c == 'b', "mix_styles: selector entries must be a or b");

  char duration_source = selector.duration_source;
  if (duration_source == 0) {
    duration_source = selector.source[1];
    for (int k = 2; k < 5; ++k)
      require(selector.source[size_t(k)] == duration_source,
              "mix_styles: non-speaker sources disagree; pass the duration "
              "source explicitly");
  }
  require(duration_source == 'a' || duration_source == 'b',
          "mix_styles: duration source must be a or b");

  Tensor mixed = b.stage[0];
  for (int k = 0; k < 5; ++k) {
    const ProbeTrace& src = selector.source[size_t(k)] == 'a' ? a : b;
    mixed = add(mixed, src.residual[size_t(k)]);
  }

  const ProbeTrace& dsrc = duration_source == 'a' ? a : b;
  require(dsrc.duration_log.defined(), "mix_styles: trace has no durations");
  long L = dsrc.mask.extent(1);
  long length = 0;
  for (long l = 0; l < L; ++l)
    if (dsrc.mask.vec()[size_t(l)] != 0.0) ++length;
  auto durations =
      VarianceAdapter::durations_from_log(dsrc.duration_log, {length});

  MixResult out;
  out.mixed = mixed;
  out.durations = durations[0];
  long total = 0;
  for (long d : out.durations) total += d;
  Tensor expanded = length_regulate(mixed, durations, total);
  Tensor frame_mask = lengths_to_mask({total}, total);
  RunMode run;
  Tensor mel = model.decoder.forward(expanded, frame_mask, run);
  out.mel = reshape(mel, {total, model.config.mel_dim});
  return out;
}

// CSV boundary: projections as one row per utterance, metrics as name/value
// pairs. Doubles are printed with 17 significant digits so they read back
// to the same value.
namespace detail {

inline std::string csv_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::string projection_csv(const EmbeddingSet& set,
                                  const Tensor& coords) {
  set.validate();
  require(coords.rank() == 2 && coords.extent(0) == set.count() &&
              coords.extent(1) == 2,
          "projection_csv: coordinates must be [N, 2]");
  std::string out = "id,label_speaker,label_emotion,x,y\n";
  for (long i = 0; i < set.count(); ++i) {
    out += std::to_string(set.ids[size_t(i)]) + "," +
           std::to_string(set.labels.at("speaker")[size_t(i)]) + "," +
           std::to_string(set.labels.at("emotion")[size_t(i)]) + "," +
           detail::csv_double(coords.vec()[size_t(i * 2)]) + "," +
           detail::csv_double(coords.vec()[size_t(i * 2 + 1)]) + "\n";
  }
  return out;
}

inline std::string metrics_csv(
    const std::vector<std::pair<std::string, double>>& metrics) {
  std::string out = "metric,value\n";
  for (const auto& [name, value] : metrics)
    out += name + "," + detail::csv_double(value) + "\n";
  return out;
}

// Reads a projection CSV back into an embedding set with 2-D rows.
inline EmbeddingSet parse_projection_csv(const std::string& text,
                                         const std::string& origin) {
  std::vector<std::vector<std::string>> records;
  size_t pos = 0;
  while (pos < text.size()) {
    size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string line = text.substr(pos, eol - pos);
    pos = eol + 1;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    size_t start = 0;
    while (true) {
      size_t comma = line.find(',', start);
      fields.push_back(line.substr(
          start,
          comma == std::string::npos ? std::string::npos : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    records.push_back(std::move(fields));
  }
  require(!records.empty() &&
              records[0] == std::vector<std::string>{"id", "label_speaker",
                                                     "label_emotion", "x", "y"},
          origin, ": expected header id,label_speaker,label_emotion,x,y");

  EmbeddingSet set;
  set.provenance = "csv";
  long N = long(records.size()) - 1;
  require(N >= 1, origin, ": no data rows");
  set.rows = Tensor({N, 2});
  set.labels["speaker"] = {};
  set.labels["emotion"] = {};
  for (long i = 0; i < N; ++i) {
    const auto& f = records[size_t(i + 1)];
    require(f.size() == 5, origin, ": row ", i + 2, " needs 5 fields");
    set.ids.push_back(detail::text_to_long(f[0], "id"));
    set.labels["speaker"].push_back(detail::text_to_long(f[1], "speaker"));
    set.labels["emotion"].push_back(detail::text_to_long(f[2], "emotion"));
    set.rows.vec()[size_t(i * 2)] = detail::text_to_double(f[3], "x");
    set.rows.vec()[size_t(i * 2 + 1)] = detail::text_to_double(f[4], "y");
  }
  set.validate();
  return set;
}

}  // namespace resvox
