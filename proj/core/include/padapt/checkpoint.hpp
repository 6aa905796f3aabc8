#pragma once

#include "padapt/adapter.hpp"
#include "padapt/backbone.hpp"

#include <string>

namespace padapt {

// Container layout: magic "PADAPT01", u64 little-endian header length, UTF-8
// JSON header {format_version, section, config, tensors:[{name, shape,
// dtype:"f32", byte_offset}]}, then the raw little-endian float32 payload.
inline constexpr char checkpoint_magic[9] = "PADAPT01";
inline constexpr int checkpoint_format_version = 1;

void save_backbone(const BackboneWeights& w, const std::string& path);
BackboneWeights load_backbone(const std::string& path);

void save_adapter(const AdapterState& a, const BackboneConfig& backbone_cfg,
                  const std::string& path);
// Reconstructs the state against the given backbone; fails on any config or
// format mismatch.
AdapterState load_adapter(const std::string& path, const BackboneWeights& backbone);

}  // namespace padapt
