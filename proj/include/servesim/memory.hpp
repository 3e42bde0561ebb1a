#pragma once

#include <cstdint>
#include <map>

#include "servesim/device.hpp"
#include "servesim/error.hpp"
#include "servesim/model_spec.hpp"

namespace servesim {

struct MemoryPlan {
    std::int64_t kv_capacity_tokens = 0;
    std::int64_t block_size = 0;       // tokens per block
    std::int64_t num_blocks = 0;
    std::int64_t watermark_blocks = 0; // reserve that triggers preemption before exhaustion
};

/// KV block budget of one device: what is left after weights and a fixed
/// activation reserve, divided into block_size-token blocks.
inline MemoryPlan plan_memory(const ModelSpec& spec, const ParallelismConfig& par,
                              const DeviceProfile& dev, std::int64_t block_size,
                              double watermark_fraction = 0.01,
                              double activation_reserve_fraction = 0.10) {
    require(block_size >= 1, "plan_memory: block_size must be >= 1");
    require(watermark_fraction >= 0.0 && watermark_fraction < 1.0,
            "plan_memory: watermark_fraction must be in [0, 1)");
    require(activation_reserve_fraction >= 0.0 && activation_reserve_fraction < 1.0,
            "plan_memory: activation_reserve_fraction must be in [0, 1)");
    const double param_bytes = static_cast<double>(param_bytes_per_device(spec, par));
    const double reserve = activation_reserve_fraction * dev.device_mem;
    const double free_bytes = dev.device_mem - param_bytes - reserve;
    const double kv_per_token = static_cast<double>(kv_bytes_per_token_per_device(spec, par));
    MemoryPlan plan;
    plan.block_size = block_size;
    if (free_bytes > 0)
        plan.num_blocks =
            static_cast<std::int64_t>(free_bytes / (static_cast<double>(block_size) * kv_per_token));
    require(plan.num_blocks >= 1,
            "insufficient device memory: " + spec.name + " on " + dev.sku_name + " (params " +
                std::to_string(static_cast<std::int64_t>(param_bytes)) + " B + reserve leave no room for KV blocks)");
    plan.kv_capacity_tokens = plan.num_blocks * block_size;
    plan.watermark_blocks =
        static_cast<std::int64_t>(watermark_fraction * static_cast<double>(plan.num_blocks));
    return plan;
}

/// Block accounting for one replica. In token-granular mode (LightLLM)
/// allocations are exact token counts over the same byte budget; otherwise
/// requests hold whole blocks.
class BlockManager {
public:
    BlockManager() = default;
    BlockManager(const MemoryPlan& plan, bool token_granular)
        : plan_(plan), token_granular_(token_granular) {}

    std::int64_t total_units() const {
        return token_granular_ ? plan_.kv_capacity_tokens : plan_.num_blocks;
    }
    std::int64_t free_units() const { return total_units() - allocated_; }
    std::int64_t allocated_units() const { return allocated_; }
    std::int64_t watermark_units() const {
        return token_granular_ ? plan_.watermark_blocks * plan_.block_size
                               : plan_.watermark_blocks;
    }

    std::int64_t units_for_tokens(std::int64_t tokens) const {
        return token_granular_ ? tokens : (tokens + plan_.block_size - 1) / plan_.block_size;
    }

    std::int64_t held_units(std::int64_t request_id) const {
        auto it = held_.find(request_id);
        return it == held_.end() ? 0 : it->second;
    }

    /// Units still missing for this request to cover `tokens` of context.
    std::int64_t shortfall(std::int64_t request_id, std::int64_t tokens) const {
        return std::max<std::int64_t>(0, units_for_tokens(tokens) - held_units(request_id));
    }

    /// Grows the request's holding to cover `tokens`; false if it doesn't fit.
    bool try_reserve(std::int64_t request_id, std::int64_t tokens) {
        const std::int64_t need = shortfall(request_id, tokens);
        if (need > free_units()) return false;
        held_[request_id] += need;
        allocated_ += need;
        internal_check(allocated_ <= total_units(), "BlockManager: oversubscribed");
        return true;
    }

    void release(std::int64_t request_id) {
        auto it = held_.find(request_id);
        if (it == held_.end()) return;
        allocated_ -= it->second;
        held_.erase(it);
        internal_check(allocated_ >= 0, "BlockManager: negative allocation");
    }

private:
    MemoryPlan plan_;
    bool token_granular_ = false;
    std::int64_t allocated_ = 0;
    std::map<std::int64_t, std::int64_t> held_;
};

}  // namespace servesim
