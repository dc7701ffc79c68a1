#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "refrag/autograd.hpp"
#include "refrag/model.hpp"

namespace refrag::ckpt {

// Self-describing parameter archive: magic + version, a JSON header with the
// config snapshot and a named-array index, then raw little-endian doubles.
struct ArchiveMeta {
    std::string kind;      // "model" | "policy"
    std::string stage;     // training stage label
    int64_t step = 0;
    uint64_t seed = 0;
    int64_t opt_t = 0;     // AdamW timestep
    std::string config_json; // serialized config snapshot
};

void save_archive(const std::string& path, const ArchiveMeta& meta,
                  const std::vector<const ag::Param*>& params, bool with_opt_state = true);

// Reads the header only (to construct the right model before loading).
ArchiveMeta peek_meta(const std::string& path);

// Fills `params` (matched by name; shapes must agree). Returns the meta.
// Optimizer moments are restored when present in the archive.
ArchiveMeta load_archive(const std::string& path, const std::vector<ag::Param*>& params);

// Convenience wrappers for the full model.
void save_model(const std::string& path, model::RefragModel& m, const ArchiveMeta& meta,
                bool with_opt_state = true);
ArchiveMeta load_model(const std::string& path, model::RefragModel& out);

std::string config_to_json(const model::ModelConfig& cfg);
model::ModelConfig config_from_json(const std::string& json_text);

} // namespace refrag::ckpt
