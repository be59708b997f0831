#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "safemerge/common.hpp"

namespace safemerge {

// Dense row-major 32-bit float tensor. An empty shape denotes a scalar
// (one element).
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<float> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<float> d)
      : shape(std::move(s)), data(std::move(d)) {}

  static Tensor zeros(std::vector<std::size_t> s) {
    std::size_t n = 1;
    for (std::size_t v : s) n *= v;
    return Tensor(std::move(s), std::vector<float>(n, 0.0f));
  }

  std::size_t numel() const {
    std::size_t n = 1;
    for (std::size_t v : shape) n *= v;
    return n;
  }

  bool valid() const { return numel() == data.size(); }

  bool all_finite() const {
    for (float v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

// Named tensor collection. std::map keeps iteration lexicographic by name,
// which every consumer relies on for determinism.
struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::map<std::string, std::string> metadata;

  std::size_t param_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : tensors) n += t.numel();
    return n;
  }

  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) {
      throw ValidationError("checkpoint has no tensor named '" + name + "'");
    }
    return it->second;
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

enum class MismatchReason { kMissingInA, kMissingInB, kShapeMismatch };

inline const char* to_string(MismatchReason r) {
  switch (r) {
    case MismatchReason::kMissingInA: return "missing-in-a";
    case MismatchReason::kMissingInB: return "missing-in-b";
    case MismatchReason::kShapeMismatch: return "shape-mismatch";
  }
  return "?";
}

struct CompatReport {
  bool compatible = true;
  std::vector<std::pair<std::string, MismatchReason>> mismatches;

  std::string describe() const {
    std::string out;
    for (const auto& [name, reason] : mismatches) {
      if (!out.empty()) out += ", ";
      out += name;
      out += ": ";
      out += to_string(reason);
    }
    return out;
  }
};

// Structural comparison: same tensor names, same per-name shapes. Values and
// metadata are not compared.
inline CompatReport validate_compat(const Checkpoint& a, const Checkpoint& b) {
  CompatReport report;
  for (const auto& [name, ta] : a.tensors) {
    auto it = b.tensors.find(name);
    if (it == b.tensors.end()) {
      report.mismatches.emplace_back(name, MismatchReason::kMissingInB);
    } else if (it->second.shape != ta.shape) {
      report.mismatches.emplace_back(name, MismatchReason::kShapeMismatch);
    }
  }
  for (const auto& [name, tb] : b.tensors) {
    if (!a.tensors.count(name)) {
      report.mismatches.emplace_back(name, MismatchReason::kMissingInA);
    }
  }
  report.compatible = report.mismatches.empty();
  return report;
}

inline void require_compat(const Checkpoint& a, const Checkpoint& b,
                           const std::string& what) {
  CompatReport r = validate_compat(a, b);
  if (!r.compatible) {
    throw ValidationError(what + ": incompatible checkpoints (" + r.describe() + ")");
  }
}

}  // namespace safemerge
