#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "safemerge/tensor.hpp"

namespace safemerge {

// Checkpoint files use the safetensors layout: an 8-byte little-endian header
// length, a UTF-8 JSON header mapping tensor names to
// {"dtype":"F32","shape":[...],"data_offsets":[begin,end]} plus an optional
// "__metadata__" string map, then the raw tensor bytes. Offsets are relative
// to the end of the header and tightly packed in lexicographic name order.
// Only F32 is supported.

inline void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path,
                            bool allow_nonfinite = false) {
  nlohmann::json header = nlohmann::json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    if (!t.valid()) {
      throw ValidationError("tensor '" + name + "': shape does not match data length");
    }
    if (!allow_nonfinite && !t.all_finite()) {
      throw ValidationError("tensor '" + name + "' contains non-finite values");
    }
    std::uint64_t nbytes = static_cast<std::uint64_t>(t.numel()) * 4;
    header[name] = {{"dtype", "F32"},
                    {"shape", t.shape},
                    {"data_offsets", {offset, offset + nbytes}}};
    offset += nbytes;
  }
  if (!ckpt.metadata.empty()) {
    header["__metadata__"] = ckpt.metadata;
  }

  std::string header_str = header.dump();
  std::uint64_t header_len = header_str.size();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  char len_bytes[8];
  for (int i = 0; i < 8; ++i) len_bytes[i] = static_cast<char>((header_len >> (8 * i)) & 0xff);
  out.write(len_bytes, 8);
  out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * 4));
  }
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path,
                                  bool allow_nonfinite = false) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  if (bytes.size() < 8) {
    throw ValidationError("'" + path.string() + "': file too short for a header");
  }
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) {
    header_len |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i])) << (8 * i);
  }
  if (header_len > bytes.size() - 8) {
    throw ValidationError("'" + path.string() + "': declared header length " +
                          std::to_string(header_len) + " exceeds file size");
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("'" + path.string() + "': malformed JSON header: " + e.what());
  }
  if (!header.is_object()) {
    throw ValidationError("'" + path.string() + "': header is not a JSON object");
  }

  const char* data = bytes.data() + 8 + header_len;
  std::uint64_t data_size = bytes.size() - 8 - header_len;

  Checkpoint ckpt;
  // (begin, end) ranges, checked for overlap after sorting.
  std::vector<std::pair<std::uint64_t, std::uint64_t>> ranges;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      if (!entry.is_object()) throw ValidationError("__metadata__ must be an object");
      for (const auto& [k, v] : entry.items()) {
        if (!v.is_string()) throw ValidationError("__metadata__ values must be strings");
        ckpt.metadata[k] = v.get<std::string>();
      }
      continue;
    }
    if (!entry.is_object() || !entry.contains("dtype") || !entry.contains("shape") ||
        !entry.contains("data_offsets")) {
      throw ValidationError("tensor '" + name + "': incomplete header entry");
    }
    std::string dtype = entry["dtype"].get<std::string>();
    if (dtype != "F32") {
      throw ValidationError("tensor '" + name + "': unsupported dtype '" + dtype +
                            "' (only F32 checkpoints are supported)");
    }
    Tensor t;
    t.shape = entry["shape"].get<std::vector<std::size_t>>();
    auto offsets = entry["data_offsets"].get<std::vector<std::uint64_t>>();
    if (offsets.size() != 2 || offsets[1] < offsets[0]) {
      throw ValidationError("tensor '" + name + "': bad data_offsets");
    }
    std::uint64_t nbytes = offsets[1] - offsets[0];
    if (offsets[1] > data_size) {
      throw ValidationError("tensor '" + name + "': data_offsets out of bounds");
    }
    if (nbytes != static_cast<std::uint64_t>(t.numel()) * 4) {
      throw ValidationError("tensor '" + name + "': data_offsets do not match shape");
    }
    t.data.resize(t.numel());
    std::memcpy(t.data.data(), data + offsets[0], nbytes);
    if (!allow_nonfinite && !t.all_finite()) {
      throw ValidationError("tensor '" + name + "' contains non-finite values " +
                            "(pass allow_nonfinite to accept)");
    }
    ranges.emplace_back(offsets[0], offsets[1]);
    ckpt.tensors.emplace(name, std::move(t));
  }

  std::sort(ranges.begin(), ranges.end());
  for (std::size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i].first < ranges[i - 1].second) {
      throw ValidationError("'" + path.string() + "': overlapping tensor data_offsets");
    }
  }
  return ckpt;
}

}  // namespace safemerge
