// SPDX-License-Identifier: Apache-2.0
//
// Analytic multiply-accumulate / parameter accounting.
//
// Headline numbers are MACs of convolutions, linear layers, attention matmuls
// and dynamic-kernel aggregation. Normalizations, activations and elementwise
// adds go to `aux_ops` and never enter the headline. FLOPs = 2 * MACs.
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace dmf {

struct FlopsRecord {
  std::string name;
  std::string kind;  // stem, downsample, dy-mobile, kernel-attention, irffn, attention, former, head
  std::uint64_t macs = 0;
  std::uint64_t aux_ops = 0;
  std::uint64_t params = 0;
};

struct FlopsReport {
  std::vector<FlopsRecord> records;

  void add(std::string name, std::string kind, std::uint64_t macs, std::uint64_t aux_ops, std::uint64_t params) {
    records.push_back({std::move(name), std::move(kind), macs, aux_ops, params});
  }

  std::uint64_t total_macs() const {
    std::uint64_t s = 0;
    for (const auto& r : records) s += r.macs;
    return s;
  }
  std::uint64_t total_flops() const { return 2 * total_macs(); }
  std::uint64_t total_aux() const {
    std::uint64_t s = 0;
    for (const auto& r : records) s += r.aux_ops;
    return s;
  }
  std::uint64_t total_params() const {
    std::uint64_t s = 0;
    for (const auto& r : records) s += r.params;
    return s;
  }
  std::map<std::string, std::uint64_t> macs_by_kind() const {
    std::map<std::string, std::uint64_t> m;
    for (const auto& r : records) m[r.kind] += r.macs;
    return m;
  }
  /// Sum over records whose name ends with `suffix`.
  FlopsRecord sum_matching(const std::string& suffix) const {
    FlopsRecord out{suffix, "", 0, 0, 0};
    for (const auto& r : records) {
      if (r.name.size() >= suffix.size() && r.name.compare(r.name.size() - suffix.size(), suffix.size(), suffix) == 0) {
        out.macs += r.macs;
        out.aux_ops += r.aux_ops;
        out.params += r.params;
      }
    }
    return out;
  }
};

/// Spatial/channel geometry flowing through the analytic walk (batch 1).
struct FeatureGeom {
  std::uint64_t channels = 0, height = 0, width = 0;
  std::uint64_t positions() const { return height * width; }
  std::uint64_t elements() const { return channels * height * width; }
};

inline std::uint64_t conv_out(std::uint64_t in, std::uint64_t k, std::uint64_t stride, std::uint64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

/// MACs of a grouped conv: Cout * Cin/g * kh * kw * H' * W'.
inline std::uint64_t conv_macs(std::uint64_t cin, std::uint64_t cout, std::uint64_t k, std::uint64_t groups,
                               std::uint64_t out_h, std::uint64_t out_w) {
  return cout * (cin / groups) * k * k * out_h * out_w;
}

}  // namespace dmf
