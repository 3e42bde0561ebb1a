#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "servesim/error.hpp"
#include "servesim/model_spec.hpp"
#include "servesim/profiler.hpp"
#include "servesim/regressor.hpp"

namespace servesim {

/// Current-iteration token makeup of one batch, the estimator's unit of work.
struct BatchComposition {
    std::vector<std::int64_t> prefill_lengths;         // chunk sizes scheduled this iteration
    std::vector<std::int64_t> prefill_prior_context;   // per prefill entry, tokens already in KV
    std::vector<std::int64_t> decode_context_lengths;  // per decode entry, processed context

    std::int64_t num_decode_tokens() const {
        return static_cast<std::int64_t>(decode_context_lengths.size());
    }
    std::int64_t total_current_tokens() const {
        std::int64_t t = num_decode_tokens();
        for (auto p : prefill_lengths) t += p;
        return t;
    }
};

/// Runtime of a batch of prefills equals that of a single prefill of the
/// root-sum-square length, rounded to whole tokens.
inline std::int64_t equivalent_prefill_length(const std::vector<std::int64_t>& prefill_lengths) {
    require(!prefill_lengths.empty(), "equivalent_prefill_length: empty prefill set");
    double sq = 0.0;
    for (auto p : prefill_lengths) {
        require(p > 0, "equivalent_prefill_length: lengths must be positive");
        sq += static_cast<double>(p) * static_cast<double>(p);
    }
    return static_cast<std::int64_t>(std::llround(std::sqrt(sq)));
}

/// Decode attention cares only about the total KV volume fetched, not how
/// context lengths split across requests.
inline FeatureMap decode_features(const BatchComposition& batch, const ModelSpec& spec,
                                  const ParallelismConfig& par) {
    require(batch.num_decode_tokens() >= 1, "decode_features: batch has no decode entries");
    const double per_token = static_cast<double>(kv_bytes_per_token_per_device(spec, par));
    double ctx_total = 0.0;
    for (auto c : batch.decode_context_lengths) {
        require(c >= 0, "decode_features: negative context length");
        ctx_total += static_cast<double>(c);
    }
    return {{kFeatNumTokens, static_cast<double>(batch.num_decode_tokens())},
            {kFeatKvReadBytes, ctx_total * per_token}};
}

// The default regressor is the exact log-space grid interpolator: simulation
// consumes lookup tables, and synthetic profiles always form full grids. The
// tree ensemble handles scattered (externally measured) profile data and is
// selected with regressor = "forest".
struct TrainConfig {
    std::size_t min_points_per_op = 8;
    ForestConfig forest;
    std::uint64_t seed = 0;
    std::string regressor = "interp";  // "interp" | "forest"
};

struct OpModelKey {
    OpName op;
    std::int64_t tp_degree;
    auto operator<=>(const OpModelKey&) const = default;
};

inline std::string to_string(const OpModelKey& k) {
    return std::string(to_string(k.op)) + "@tp" + std::to_string(k.tp_degree);
}

inline constexpr int kEstimatorSchemaVersion = 1;

/// Trained per-operator runtime predictors plus the guard rails around them:
/// queries more than `extrapolation_margin` outside the training bounding box
/// (per feature, relative to the box extent) are hard errors, never silently
/// extrapolated.
class EstimatorModel {
public:
    struct PerOpModel {
        std::vector<std::string> schema;          // feature order fed to the regressor
        std::vector<double> bbox_lo, bbox_hi;     // raw feature bounds seen in training
        std::vector<std::vector<double>> levels;  // sorted unique raw levels per feature
        std::unique_ptr<Regressor> regressor;     // over log1p(features) -> log(runtime)
        double holdout_mape = 0.0;
        std::size_t n_points = 0;
    };

    static constexpr double kExtrapolationMargin = 0.10;

    bool has(OpName op, std::int64_t tp) const { return models_.count({op, tp}) > 0; }

    double predict(OpName op, std::int64_t tp, const FeatureMap& features) const {
        const PerOpModel& m = find(op, tp);
        std::vector<double> x(m.schema.size());
        for (std::size_t f = 0; f < m.schema.size(); ++f) {
            auto it = features.find(m.schema[f]);
            require(it != features.end(), "estimator: query for " + to_string(OpModelKey{op, tp}) +
                                              " missing feature " + m.schema[f]);
            const double v = it->second;
            const double extent = m.bbox_hi[f] - m.bbox_lo[f];
            const double margin = kExtrapolationMargin * extent;
            require(v >= m.bbox_lo[f] - margin && v <= m.bbox_hi[f] + margin,
                    "estimator: feature " + m.schema[f] + "=" + std::to_string(v) + " for " +
                        to_string(OpModelKey{op, tp}) + " outside extrapolation margin [" +
                        std::to_string(m.bbox_lo[f] - margin) + ", " +
                        std::to_string(m.bbox_hi[f] + margin) + "]");
            x[f] = std::log1p(v);
        }
        return std::exp(m.regressor->predict(x));
    }

    const PerOpModel& find(OpName op, std::int64_t tp) const {
        auto it = models_.find({op, tp});
        require(it != models_.end(), "estimator: no trained model for op " +
                                         to_string(OpModelKey{op, tp}) +
                                         " (profile and train must cover the config's operators)");
        return it->second;
    }

    const std::map<OpModelKey, PerOpModel>& models() const { return models_; }

    void insert(const OpModelKey& key, PerOpModel m) { models_[key] = std::move(m); }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["schema_version"] = kEstimatorSchemaVersion;
        j["kind"] = "estimator";
        auto& ops = j["ops"] = nlohmann::json::object();
        for (const auto& [key, m] : models_) {
            nlohmann::json mj;
            mj["op"] = to_string(key.op);
            mj["tp_degree"] = key.tp_degree;
            mj["schema"] = m.schema;
            mj["bbox_lo"] = m.bbox_lo;
            mj["bbox_hi"] = m.bbox_hi;
            mj["levels"] = m.levels;
            mj["holdout_mape"] = m.holdout_mape;
            mj["n_points"] = m.n_points;
            mj["regressor"] = m.regressor->to_json();
            ops[to_string(key)] = std::move(mj);
        }
        return j;
    }

    static EstimatorModel from_json(const nlohmann::json& j) {
        require(j.value("kind", "") == "estimator", "estimator file: wrong kind");
        require(j.at("schema_version").get<int>() == kEstimatorSchemaVersion,
                "estimator file: unsupported schema_version");
        EstimatorModel e;
        for (const auto& [unused_key, mj] : j.at("ops").items()) {
            OpModelKey key{op_name_from_string(mj.at("op").get<std::string>()),
                           mj.at("tp_degree").get<std::int64_t>()};
            PerOpModel m;
            m.schema = mj.at("schema").get<std::vector<std::string>>();
            m.bbox_lo = mj.at("bbox_lo").get<std::vector<double>>();
            m.bbox_hi = mj.at("bbox_hi").get<std::vector<double>>();
            m.levels = mj.at("levels").get<std::vector<std::vector<double>>>();
            m.holdout_mape = mj.at("holdout_mape").get<double>();
            m.n_points = mj.at("n_points").get<std::size_t>();
            m.regressor = regressor_from_json(mj.at("regressor"));
            e.models_[key] = std::move(m);
        }
        return e;
    }

private:
    std::map<OpModelKey, PerOpModel> models_;
};

namespace detail {

inline std::unique_ptr<Regressor> fit_regressor(const std::string& kind,
                                                const std::vector<std::vector<double>>& x,
                                                const std::vector<double>& y, ForestConfig fc) {
    if (kind == "forest")
        return std::make_unique<ForestRegressor>(ForestRegressor::train(x, y, fc));
    if (kind == "interp")
        return std::make_unique<GridInterpolator>(GridInterpolator::fit(x, y));
    throw Error("train: unknown regressor kind '" + kind + "'");
}

}  // namespace detail

/// Trains one predictor per (operator, tp_degree) group of records.
/// Deterministic for a fixed config seed: per-op seeds derive from the group's
/// position in key order. Held-out MAPE (every 5th point) goes to metadata;
/// the final model is refit on all points.
inline EstimatorModel train(const std::vector<ProfileRecord>& records, const TrainConfig& cfg) {
    std::map<OpModelKey, std::vector<const ProfileRecord*>> groups;
    for (const auto& r : records) {
        auto tp_it = r.features.find(kFeatTpDegree);
        require(tp_it != r.features.end(), "train: record missing tp_degree feature");
        groups[{r.op, static_cast<std::int64_t>(tp_it->second)}].push_back(&r);
    }
    require(!groups.empty(), "train: no records");

    EstimatorModel model;
    std::uint64_t group_index = 0;
    for (const auto& [key, recs] : groups) {
        require(recs.size() >= cfg.min_points_per_op,
                "train: op " + to_string(key) + " has only " + std::to_string(recs.size()) +
                    " points (need " + std::to_string(cfg.min_points_per_op) + ")");
        EstimatorModel::PerOpModel m;
        m.schema = feature_schema(triage(key.op));
        m.n_points = recs.size();
        const std::size_t nf = m.schema.size();
        m.bbox_lo.assign(nf, 0.0);
        m.bbox_hi.assign(nf, 0.0);
        m.levels.assign(nf, {});

        std::vector<std::vector<double>> x;
        std::vector<double> y;
        for (const auto* r : recs) {
            std::vector<double> row(nf);
            for (std::size_t f = 0; f < nf; ++f) {
                auto it = r->features.find(m.schema[f]);
                require(it != r->features.end(), "train: op " + to_string(key) +
                                                     " record missing feature " + m.schema[f]);
                row[f] = std::log1p(it->second);
                m.levels[f].push_back(it->second);
            }
            x.push_back(std::move(row));
            y.push_back(std::log(r->runtime));
        }
        for (std::size_t f = 0; f < nf; ++f) {
            auto& lv = m.levels[f];
            std::sort(lv.begin(), lv.end());
            lv.erase(std::unique(lv.begin(), lv.end()), lv.end());
            m.bbox_lo[f] = lv.front();
            m.bbox_hi[f] = lv.back();
        }

        ForestConfig fc = cfg.forest;
        fc.seed = cfg.seed * 1000003ULL + group_index++;

        // held-out fidelity estimate, then refit on everything
        std::vector<std::vector<double>> xt;
        std::vector<double> yt;
        std::vector<std::size_t> held;
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (x.size() >= 2 * cfg.min_points_per_op && i % 5 == 2)
                held.push_back(i);
            else {
                xt.push_back(x[i]);
                yt.push_back(y[i]);
            }
        }
        if (!held.empty() && cfg.regressor == "forest") {
            auto probe = detail::fit_regressor(cfg.regressor, xt, yt, fc);
            double ape = 0.0;
            for (auto i : held) {
                double pred = std::exp(probe->predict(x[i]));
                double truth = std::exp(y[i]);
                ape += std::fabs(pred - truth) / truth;
            }
            m.holdout_mape = ape / static_cast<double>(held.size());
        }
        m.regressor = detail::fit_regressor(cfg.regressor, x, y, fc);
        model.insert(key, std::move(m));
    }
    return model;
}

/// Per-op point counts and held-out error, as a human-readable table.
inline std::string training_report(const EstimatorModel& model) {
    std::ostringstream out;
    out << "op                        points  holdout_mape\n";
    for (const auto& [key, m] : model.models()) {
        std::string name = to_string(key);
        out << name << std::string(name.size() < 26 ? 26 - name.size() : 1, ' ')
            << m.n_points << "  " << fmt_double(m.holdout_mape) << "\n";
    }
    return out.str();
}

/// Sums per-operator predictions over a batch: token-level ops at the total
/// current token count, prefill attention at the equivalent prefill length,
/// decode attention at the batch KV read volume, collectives at their payload.
/// Attention features are per transformer block; `count` scales each op to
/// the stage.
inline double predict_batch(const EstimatorModel& model,
                            const std::vector<OperatorDescriptor>& ops,
                            const BatchComposition& batch) {
    require(batch.prefill_prior_context.empty() ||
                batch.prefill_prior_context.size() == batch.prefill_lengths.size(),
            "predict_batch: prefill_prior_context size mismatch");
    const double total_tokens = static_cast<double>(batch.total_current_tokens());
    require(total_tokens > 0, "predict_batch: empty batch");

    double seconds = 0.0;
    for (const auto& d : ops) {
        const double count = static_cast<double>(d.count);
        switch (d.op_class) {
            case OpClass::TokenLevel:
                seconds += count * model.predict(d.op, d.tp_degree,
                                                 {{kFeatNumTokens, total_tokens}});
                break;
            case OpClass::SequenceLevel: {
                const double kv_block_bytes =
                    2.0 * static_cast<double>(d.elem_bytes) *
                    static_cast<double>(d.kv_heads_per_device * d.head_dim);
                if (d.op == OpName::AttnPrefill) {
                    if (batch.prefill_lengths.empty()) break;
                    double n_eq =
                        static_cast<double>(equivalent_prefill_length(batch.prefill_lengths));
                    double prior = 0.0;
                    for (auto c : batch.prefill_prior_context) prior += static_cast<double>(c);
                    seconds += count * model.predict(
                                           d.op, d.tp_degree,
                                           {{kFeatNumTokens, n_eq},
                                            {kFeatKvReadBytes, prior * kv_block_bytes}});
                } else {
                    if (batch.decode_context_lengths.empty()) break;
                    double ctx = 0.0;
                    for (auto c : batch.decode_context_lengths) ctx += static_cast<double>(c);
                    seconds += count * model.predict(
                                           d.op, d.tp_degree,
                                           {{kFeatNumTokens,
                                             static_cast<double>(batch.num_decode_tokens())},
                                            {kFeatKvReadBytes, ctx * kv_block_bytes}});
                }
                break;
            }
            case OpClass::Communication: {
                const double payload =
                    total_tokens * static_cast<double>(d.payload_bytes_per_token);
                seconds += count * model.predict(d.op, d.tp_degree,
                                                 {{kFeatPayloadBytes, payload}});
                break;
            }
        }
    }
    internal_check(seconds > 0.0, "predict_batch: non-positive prediction");
    return seconds;
}

/// Model flops one device executes for this batch (per pipeline stage).
/// Mirrors predict_batch's feature plumbing but sums analytical flop counts;
/// communication ops contribute none.
inline double batch_device_flops(const std::vector<OperatorDescriptor>& ops,
                                 const BatchComposition& batch) {
    const double total_tokens = static_cast<double>(batch.total_current_tokens());
    double flops = 0.0;
    for (const auto& d : ops) {
        const double count = static_cast<double>(d.count);
        if (d.op_class == OpClass::TokenLevel) {
            flops += count * token_level_cost(d, total_tokens).flops;
        } else if (d.op_class == OpClass::SequenceLevel) {
            const double kv_block_bytes = 2.0 * static_cast<double>(d.elem_bytes) *
                                          static_cast<double>(d.kv_heads_per_device * d.head_dim);
            if (d.op == OpName::AttnPrefill && !batch.prefill_lengths.empty()) {
                double n_eq = static_cast<double>(equivalent_prefill_length(batch.prefill_lengths));
                double prior = 0.0;
                for (auto c : batch.prefill_prior_context) prior += static_cast<double>(c);
                flops += count * attention_cost(d, n_eq, prior * kv_block_bytes).flops;
            } else if (d.op == OpName::AttnDecode && !batch.decode_context_lengths.empty()) {
                double ctx = 0.0;
                for (auto c : batch.decode_context_lengths) ctx += static_cast<double>(c);
                flops += count *
                         attention_cost(d, static_cast<double>(batch.num_decode_tokens()),
                                        ctx * kv_block_bytes)
                             .flops;
            }
        }
    }
    return flops;
}

/// Densifies each op's training grid (extra geometric levels per gap) and
/// freezes model predictions into a pure interpolation table.
inline EstimatorModel build_lookup_table(const EstimatorModel& model, int subdivisions = 3) {
    require(subdivisions >= 1, "build_lookup_table: subdivisions must be >= 1");
    EstimatorModel table;
    for (const auto& [key, m] : model.models()) {
        EstimatorModel::PerOpModel t;
        t.schema = m.schema;
        t.bbox_lo = m.bbox_lo;
        t.bbox_hi = m.bbox_hi;
        t.holdout_mape = m.holdout_mape;

        std::vector<std::vector<double>> axes(m.schema.size());
        for (std::size_t f = 0; f < m.schema.size(); ++f) {
            const auto& lv = m.levels[f];
            auto& ax = axes[f];
            for (std::size_t i = 0; i + 1 < lv.size(); ++i) {
                const double a = std::log1p(lv[i]), b = std::log1p(lv[i + 1]);
                for (int s = 0; s < subdivisions; ++s)
                    ax.push_back(std::expm1(a + (b - a) * s / subdivisions));
            }
            ax.push_back(lv.back());
        }
        t.levels = axes;

        std::vector<std::vector<double>> x;
        std::vector<double> y;
        std::size_t cells = 1;
        for (auto& ax : axes) cells *= ax.size();
        for (std::size_t c = 0; c < cells; ++c) {
            FeatureMap q;
            std::vector<double> row(axes.size());
            std::size_t rem = c;
            for (std::size_t f = axes.size(); f-- > 0;) {
                std::size_t i = rem % axes[f].size();
                rem /= axes[f].size();
                q[m.schema[f]] = axes[f][i];
                row[f] = std::log1p(axes[f][i]);
            }
            x.push_back(std::move(row));
            y.push_back(std::log(model.predict(key.op, key.tp_degree, q)));
        }
        t.n_points = x.size();
        t.regressor = std::make_unique<GridInterpolator>(GridInterpolator::fit(x, y));
        table.insert(key, std::move(t));
    }
    return table;
}

}  // namespace servesim
