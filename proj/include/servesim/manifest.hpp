#pragma once

#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <string>
#include <vector>

#include "json.hpp"
#include "servesim/csv.hpp"

namespace servesim {

inline constexpr const char* kToolVersion = "0.1.0";

/// Reproducibility sidecar written next to every command's outputs. The
/// timestamp honors SOURCE_DATE_EPOCH so identical runs can be byte-identical.
struct RunManifest {
    std::string command;
    std::vector<std::pair<std::string, std::string>> inputs;  // (role, resolved path)
    std::uint64_t seed = 0;
    std::string version = kToolVersion;

    static std::string timestamp_utc() {
        std::time_t t;
        if (const char* env = std::getenv("SOURCE_DATE_EPOCH"))
            t = static_cast<std::time_t>(std::strtoll(env, nullptr, 10));
        else
            t = std::time(nullptr);
        char buf[32];
        std::tm tm_utc{};
        gmtime_r(&t, &tm_utc);
        std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
        return buf;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["command"] = command;
        auto& in = j["inputs"] = nlohmann::ordered_json::object();
        for (const auto& [role, path] : inputs) in[role] = path;
        j["seed"] = seed;
        j["tool_version"] = version;
        j["timestamp"] = timestamp_utc();
        return j;
    }

    void write(const std::string& out_dir) const {
        write_text_file(out_dir + "/manifest.json", to_json().dump(2) + "\n");
    }
};

}  // namespace servesim
