#pragma once

#include <string>

#include <json.hpp>

#include "mgnet/nn.hpp"

namespace mgnet {

// Single-file checkpoint container: magic + format version + JSON index +
// raw little-endian float64 payload. Round-trips parameters bit for bit.
inline constexpr uint32_t kCheckpointVersion = 1;

struct Container {
    uint32_t version = kCheckpointVersion;
    nlohmann::json meta;  // config snapshot, step counter, anything json
    NamedTensors params;
    NamedTensors buffers;
    NamedTensors opt_state;
};

void save_container(const std::string& path, const Container& c);
Container load_container(const std::string& path);  // hard error on magic/version mismatch

}  // namespace mgnet
