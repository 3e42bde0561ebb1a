#pragma once

#include <cstdint>

#include "servesim/error.hpp"
#include "servesim/model_spec.hpp"

namespace servesim {

/// Analytical per-execution work of one operator instance on one device.
/// Feeds both the synthetic profiling oracle (roofline evaluation) and the
/// MFU accounting, so kernel time and utilization use the same flop counts.
struct OpCost {
    double flops = 0.0;
    double bytes = 0.0;       // HBM traffic: weights + activations + KV reads/writes
    double wire_bytes = 0.0;  // link traffic (communication ops only)
    std::int64_t hops = 0;    // per-hop latency charges (communication ops only)
};

/// Work of a token-level op at `num_tokens` current tokens.
inline OpCost token_level_cost(const OperatorDescriptor& d, double num_tokens) {
    OpCost c;
    const double e = static_cast<double>(d.elem_bytes);
    const double in = static_cast<double>(d.in_dim);
    const double out = static_cast<double>(d.out_dim);
    switch (d.op) {
        case OpName::QkvProj:
        case OpName::AttnOutProj:
        case OpName::MlpUpProj:
        case OpName::MlpDownProj:
            c.flops = 2.0 * num_tokens * in * out;
            // weights stream only when the kernel actually runs
            c.bytes = num_tokens > 0 ? e * (in * out + num_tokens * (in + out)) : 0.0;
            break;
        case OpName::ActFn:
            c.flops = num_tokens * in;
            c.bytes = 2.0 * e * num_tokens * in;
            break;
        case OpName::AddNorm:
            // two residual adds + two norms per block, ~4 flop/element each
            c.flops = 8.0 * num_tokens * in;
            c.bytes = 6.0 * e * num_tokens * in;
            break;
        default:
            throw InternalError("token_level_cost: not a token-level op");
    }
    return c;
}

/// Work of one block's attention kernel. `kv_read_bytes` is the KV volume
/// fetched by this block on this device (0 for a fresh, unchunked prefill).
inline OpCost attention_cost(const OperatorDescriptor& d, double num_tokens,
                             double kv_read_bytes) {
    OpCost c;
    const double e = static_cast<double>(d.elem_bytes);
    const double hq = static_cast<double>(d.q_heads_per_device * d.head_dim);
    const double hkv = static_cast<double>(d.kv_heads_per_device * d.head_dim);
    const double kv_bytes_per_token = 2.0 * e * hkv;
    const double ctx_tokens = kv_read_bytes / kv_bytes_per_token;
    if (d.op == OpName::AttnPrefill) {
        // n new tokens attend over themselves plus ctx prior tokens
        c.flops = 4.0 * num_tokens * (num_tokens + ctx_tokens) * hq;
        c.bytes = kv_read_bytes + e * num_tokens * (2.0 * hq + 2.0 * hkv);
    } else if (d.op == OpName::AttnDecode) {
        // decode cost is driven by the KV volume fetched, not by how the
        // context splits across requests (kernels handle batch skew)
        c.flops = 4.0 * ctx_tokens * hq;
        c.bytes = kv_read_bytes;
    } else {
        throw InternalError("attention_cost: not an attention op");
    }
    return c;
}

/// Work of a collective/p2p op at `payload_bytes` logical payload.
/// Ring collectives move 2(t-1)/t (all-reduce) or (t-1)/t (all-gather) of the
/// payload per link; send/recv moves it once.
inline OpCost communication_cost(const OperatorDescriptor& d, double payload_bytes) {
    OpCost c;
    const double t = static_cast<double>(d.tp_degree);
    switch (d.op) {
        case OpName::AllReduce:
            c.wire_bytes = payload_bytes * 2.0 * (t - 1.0) / t;
            c.hops = d.tp_degree - 1;
            break;
        case OpName::AllGather:
            c.wire_bytes = payload_bytes * (t - 1.0) / t;
            c.hops = d.tp_degree - 1;
            break;
        case OpName::SendRecv:
            c.wire_bytes = payload_bytes;
            c.hops = 1;
            break;
        default:
            throw InternalError("communication_cost: not a communication op");
    }
    return c;
}

}  // namespace servesim
