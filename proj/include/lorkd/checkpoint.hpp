// SPDX-License-Identifier: Apache-2.0

// Single-file checkpoint:
//   "LRKD" | u32 LE version = 1 | u64 LE meta_len | meta JSON | payload
// The metadata describes the network structure and lists every tensor as
// {name, dtype, shape, byte_offset}; offsets are relative to the payload
// start and the payload is the row-major little-endian f32 data back to back.

#pragma once

#include <string>
#include <string_view>

#include "lorkd/config.hpp"
#include "lorkd/network.hpp"

namespace lorkd {

inline constexpr std::uint32_t kCheckpointVersion = 1;

Json network_description(const Network<float>& net);
/// Zero-filled network with the described structure.
Network<float> network_skeleton(const Json& description);

std::string serialize_checkpoint(const Network<float>& net, const Json& extra = Json::object());
Network<float> deserialize_checkpoint(std::string_view bytes, Json* extra = nullptr);

void save_checkpoint(const Network<float>& net, const std::string& path, const Json& extra = Json::object());
Network<float> load_checkpoint(const std::string& path, Json* extra = nullptr);

}  // namespace lorkd
