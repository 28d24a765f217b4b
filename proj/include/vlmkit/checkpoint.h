#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vlmkit/tensor.h"

namespace vlmkit {

// Flat name -> (shape, float64 payload) container with a string metadata
// section. Entries are written in sorted name order, little-endian, so the
// same contents always serialize to the same bytes.
struct CheckpointEntry {
  Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  static constexpr uint32_t kVersion = 1;

  std::map<std::string, std::string> meta;
  std::map<std::string, CheckpointEntry> tensors;

  void put(const std::string& name, const Tensor& t);
  // Copies a stored entry into an existing tensor of identical shape.
  void load_into(const std::string& name, Tensor& t) const;
  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  std::string serialize() const;
  static Checkpoint deserialize(const std::string& bytes);

  void save(const std::filesystem::path& path) const;
  static Checkpoint load(const std::filesystem::path& path);
};

}  // namespace vlmkit
