#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "servesim/error.hpp"

namespace servesim {

/// Nominal datasheet numbers for one GPU SKU. These are editable config, not
/// measurements; configs/devices/ ships A100/H100 entries.
struct DeviceProfile {
    std::string sku_name;
    double peak_flops = 0.0;      // flop/s
    double mem_bandwidth = 0.0;   // byte/s
    double link_bandwidth = 0.0;  // byte/s, intra-node collective links
    double kernel_overhead = 0.0; // seconds per kernel launch
    double device_mem = 0.0;      // bytes
};

inline void validate(const DeviceProfile& d) {
    require(!d.sku_name.empty(), "device profile: field 'sku_name' must be non-empty");
    require(d.peak_flops > 0, "device profile: field 'peak_flops' must be positive");
    require(d.mem_bandwidth > 0, "device profile: field 'mem_bandwidth' must be positive");
    require(d.link_bandwidth > 0, "device profile: field 'link_bandwidth' must be positive");
    require(d.kernel_overhead > 0, "device profile: field 'kernel_overhead' must be positive");
    require(d.kernel_overhead < 1e-3, "device profile: field 'kernel_overhead' must be < 1e-3 s");
    require(d.device_mem > 0, "device profile: field 'device_mem' must be positive");
}

inline constexpr int kDeviceSchemaVersion = 1;

inline DeviceProfile parse_device_profile(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("device profile: invalid document: ") + e.what());
    }
    DeviceProfile d;
    try {
        auto get = [&](const char* key) -> const nlohmann::json& {
            require(j.contains(key),
                    std::string("device profile: missing required field '") + key + "'");
            return j.at(key);
        };
        require(get("schema_version").get<int>() == kDeviceSchemaVersion,
                "device profile: unsupported schema_version");
        d.sku_name = get("sku_name").get<std::string>();
        d.peak_flops = get("peak_flops").get<double>();
        d.mem_bandwidth = get("mem_bandwidth").get<double>();
        d.link_bandwidth = get("link_bandwidth").get<double>();
        d.kernel_overhead = get("kernel_overhead").get<double>();
        d.device_mem = get("device_mem").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("device profile: malformed field: ") + e.what());
    }
    validate(d);
    return d;
}

}  // namespace servesim
