#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>

#include "mdml/model.hpp"

namespace mdml {

// Text checkpoint: a header, the model config and seed, then one line per
// parameter buffer with values in hexadecimal floating point so a
// write/read round trip is bit-exact.
struct CheckpointInfo {
  std::string config_digest;
};

void write_checkpoint(std::ostream& out, const ModelState& state, const CheckpointInfo& info = {});
void write_checkpoint(const std::filesystem::path& path, const ModelState& state,
                      const CheckpointInfo& info = {});

ModelState read_checkpoint(std::istream& in, CheckpointInfo* info = nullptr);
ModelState read_checkpoint(const std::filesystem::path& path, CheckpointInfo* info = nullptr);

}  // namespace mdml
