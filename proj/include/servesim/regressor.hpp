#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "servesim/error.hpp"

namespace servesim {

/// Prediction backend for one operator. Trained on transformed feature rows
/// (the estimator handles log transforms and extrapolation guards).
class Regressor {
public:
    virtual ~Regressor() = default;
    virtual double predict(std::span<const double> x) const = 0;
    virtual nlohmann::json to_json() const = 0;
};

struct ForestConfig {
    int num_trees = 48;
    int max_depth = 16;
    int min_samples_leaf = 0;  // 0 = auto: 2 for one feature, else features + 2
    int threshold_draws = 8;   // random split candidates per feature per node
    std::uint64_t seed = 0;

    int leaf_floor(std::size_t num_features) const {
        if (min_samples_leaf > 0) return min_samples_leaf;
        return num_features <= 1 ? 2 : static_cast<int>(num_features) + 2;
    }
};

namespace detail {

/// Solves (A + ridge*I) w = b in place, n <= 8. Returns false if singular.
inline bool solve_linear(std::vector<double> a, std::vector<double> b, std::size_t n,
                         std::vector<double>& w) {
    for (std::size_t i = 0; i < n; ++i) a[i * n + i] += 1e-9;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::fabs(a[r * n + col]) > std::fabs(a[pivot * n + col])) pivot = r;
        if (std::fabs(a[pivot * n + col]) < 1e-30) return false;
        if (pivot != col) {
            for (std::size_t c = 0; c < n; ++c) std::swap(a[pivot * n + c], a[col * n + c]);
            std::swap(b[pivot], b[col]);
        }
        for (std::size_t r = col + 1; r < n; ++r) {
            double f = a[r * n + col] / a[col * n + col];
            for (std::size_t c = col; c < n; ++c) a[r * n + c] -= f * a[col * n + c];
            b[r] -= f * b[col];
        }
    }
    w.assign(n, 0.0);
    for (std::size_t i = n; i-- > 0;) {
        double s = b[i];
        for (std::size_t c = i + 1; c < n; ++c) s -= a[i * n + c] * w[c];
        w[i] = s / a[i * n + i];
    }
    return true;
}

}  // namespace detail

/// Randomized regression-tree ensemble with linear leaf models, extra-trees
/// style: every tree sees the full sample and randomness comes from the split
/// thresholds. Constant leaves cannot track runtimes between the sparse
/// geometric grid levels (adjacent profiled points sit a factor of two
/// apart), so each leaf fits a least-squares plane over its samples; on
/// log-scale features this interpolates power-law runtime curves almost
/// exactly, and averaging trees with jittered split points smooths the seams.
class ForestRegressor : public Regressor {
public:
    ForestRegressor() = default;

    static ForestRegressor train(const std::vector<std::vector<double>>& x,
                                 const std::vector<double>& y, const ForestConfig& cfg) {
        require(!x.empty() && x.size() == y.size(), "forest train: empty or mismatched data");
        ForestRegressor f;
        f.num_features_ = x.front().size();
        f.y_lo_ = *std::min_element(y.begin(), y.end());
        f.y_hi_ = *std::max_element(y.begin(), y.end());
        const double pad = 0.1 * (f.y_hi_ - f.y_lo_);
        f.y_lo_ -= pad;
        f.y_hi_ += pad;
        std::vector<std::size_t> idx(x.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        for (int t = 0; t < cfg.num_trees; ++t) {
            std::mt19937_64 rng(cfg.seed * 0x9e3779b97f4a7c15ULL + t + 1);
            Tree tree;
            f.build_node(tree, x, y, idx, 0, cfg, rng);
            f.trees_.push_back(std::move(tree));
        }
        return f;
    }

    double predict(std::span<const double> x) const override {
        internal_check(x.size() == num_features_, "forest predict: feature count mismatch");
        double sum = 0.0;
        for (const auto& t : trees_) sum += std::clamp(predict_tree(t, x), y_lo_, y_hi_);
        return sum / static_cast<double>(trees_.size());
    }

    nlohmann::json to_json() const override {
        nlohmann::json j;
        j["type"] = "forest";
        j["num_features"] = num_features_;
        j["y_lo"] = y_lo_;
        j["y_hi"] = y_hi_;
        auto& trees = j["trees"] = nlohmann::json::array();
        for (const auto& t : trees_) {
            nlohmann::json tj;
            tj["feature"] = t.feature;
            tj["threshold"] = t.threshold;
            tj["left"] = t.left;
            tj["right"] = t.right;
            tj["leaf_weights"] = t.leaf_weights;
            trees.push_back(std::move(tj));
        }
        return j;
    }

    static ForestRegressor from_json(const nlohmann::json& j) {
        ForestRegressor f;
        f.num_features_ = j.at("num_features").get<std::size_t>();
        f.y_lo_ = j.at("y_lo").get<double>();
        f.y_hi_ = j.at("y_hi").get<double>();
        for (const auto& tj : j.at("trees")) {
            Tree t;
            t.feature = tj.at("feature").get<std::vector<int>>();
            t.threshold = tj.at("threshold").get<std::vector<double>>();
            t.left = tj.at("left").get<std::vector<int>>();
            t.right = tj.at("right").get<std::vector<int>>();
            t.leaf_weights = tj.at("leaf_weights").get<std::vector<std::vector<double>>>();
            f.trees_.push_back(std::move(t));
        }
        require(!f.trees_.empty(), "forest model: no trees");
        return f;
    }

private:
    // Flat tree arrays; node i is a leaf iff feature[i] < 0, in which case
    // -feature[i]-1 indexes leaf_weights (intercept followed by slopes).
    struct Tree {
        std::vector<int> feature;
        std::vector<double> threshold;
        std::vector<int> left;
        std::vector<int> right;
        std::vector<std::vector<double>> leaf_weights;
    };

    int build_node(Tree& t, const std::vector<std::vector<double>>& x,
                   const std::vector<double>& y, const std::vector<std::size_t>& idx, int depth,
                   const ForestConfig& cfg, std::mt19937_64& rng) {
        int node = static_cast<int>(t.feature.size());
        t.feature.push_back(0);
        t.threshold.push_back(0.0);
        t.left.push_back(-1);
        t.right.push_back(-1);

        int split_feature = -1;
        double split_threshold = 0.0;
        if (depth < cfg.max_depth &&
            idx.size() >= 2 * static_cast<std::size_t>(cfg.leaf_floor(num_features_)))
            find_random_split(x, y, idx, cfg, rng, split_feature, split_threshold);

        if (split_feature < 0) {
            t.feature[node] = -static_cast<int>(t.leaf_weights.size()) - 1;
            t.leaf_weights.push_back(fit_leaf(x, y, idx));
            return node;
        }
        std::vector<std::size_t> li, ri;
        for (auto i : idx)
            (x[i][split_feature] <= split_threshold ? li : ri).push_back(i);
        t.feature[node] = split_feature;
        t.threshold[node] = split_threshold;
        int l = build_node(t, x, y, li, depth + 1, cfg, rng);
        t.left[node] = l;
        int r = build_node(t, x, y, ri, depth + 1, cfg, rng);
        t.right[node] = r;
        return node;
    }

    /// Draws candidate thresholds uniformly inside each feature's node range
    /// and keeps the best-scoring valid one (variance-reduction surrogate).
    /// Random cut points are what de-correlates the trees.
    void find_random_split(const std::vector<std::vector<double>>& x,
                           const std::vector<double>& y, const std::vector<std::size_t>& idx,
                           const ForestConfig& cfg, std::mt19937_64& rng, int& best_feature,
                           double& best_threshold) const {
        double best_score = -1.0;
        const std::size_t n = idx.size();
        const std::size_t min_leaf = static_cast<std::size_t>(cfg.leaf_floor(num_features_));
        double total = 0.0;
        for (auto i : idx) total += y[i];
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        for (std::size_t f = 0; f < num_features_; ++f) {
            double lo = x[idx[0]][f], hi = lo;
            for (auto i : idx) {
                lo = std::min(lo, x[i][f]);
                hi = std::max(hi, x[i][f]);
            }
            if (lo == hi) continue;
            for (int draw = 0; draw < cfg.threshold_draws; ++draw) {
                const double th = lo + (hi - lo) * unit(rng);
                std::size_t nl = 0;
                double left_sum = 0.0;
                for (auto i : idx) {
                    if (x[i][f] <= th) {
                        ++nl;
                        left_sum += y[i];
                    }
                }
                const std::size_t nr = n - nl;
                if (nl < min_leaf || nr < min_leaf) continue;
                const double score = left_sum * left_sum / static_cast<double>(nl) +
                                     (total - left_sum) * (total - left_sum) /
                                         static_cast<double>(nr);
                if (score > best_score + 1e-15) {
                    best_score = score;
                    best_feature = static_cast<int>(f);
                    best_threshold = th;
                }
            }
        }
    }

    std::vector<double> fit_leaf(const std::vector<std::vector<double>>& x,
                                 const std::vector<double>& y,
                                 const std::vector<std::size_t>& idx) const {
        const std::size_t dim = num_features_ + 1;
        std::vector<double> a(dim * dim, 0.0), b(dim, 0.0), w;
        for (auto i : idx) {
            std::vector<double> row(dim, 1.0);
            for (std::size_t f = 0; f < num_features_; ++f) row[f + 1] = x[i][f];
            for (std::size_t r = 0; r < dim; ++r) {
                b[r] += row[r] * y[i];
                for (std::size_t c = 0; c < dim; ++c) a[r * dim + c] += row[r] * row[c];
            }
        }
        if (!detail::solve_linear(std::move(a), std::move(b), dim, w)) {
            double m = 0.0;
            for (auto i : idx) m += y[i];
            w.assign(dim, 0.0);
            w[0] = m / static_cast<double>(idx.size());
        }
        return w;
    }

    double predict_tree(const Tree& t, std::span<const double> x) const {
        int node = 0;
        while (t.feature[node] >= 0)
            node = x[t.feature[node]] <= t.threshold[node] ? t.left[node] : t.right[node];
        const auto& w = t.leaf_weights[-t.feature[node] - 1];
        double v = w[0];
        for (std::size_t f = 0; f < num_features_; ++f) v += w[f + 1] * x[f];
        return v;
    }

    std::size_t num_features_ = 0;
    double y_lo_ = 0.0, y_hi_ = 0.0;
    std::vector<Tree> trees_;
};

/// Multilinear interpolation over a full tensor-product grid. Used both as
/// the swappable alternative to the forest and as the lookup-table backend.
class GridInterpolator : public Regressor {
public:
    GridInterpolator() = default;

    /// `x` must cover a complete tensor grid (every axis-value combination).
    static GridInterpolator fit(const std::vector<std::vector<double>>& x,
                                const std::vector<double>& y) {
        require(!x.empty() && x.size() == y.size(), "interp fit: empty or mismatched data");
        GridInterpolator g;
        const std::size_t nf = x.front().size();
        g.axes_.resize(nf);
        for (std::size_t f = 0; f < nf; ++f) {
            std::vector<double> vals;
            for (const auto& row : x) vals.push_back(row[f]);
            std::sort(vals.begin(), vals.end());
            vals.erase(std::unique(vals.begin(), vals.end()), vals.end());
            g.axes_[f] = std::move(vals);
        }
        std::size_t cells = 1;
        for (auto& ax : g.axes_) cells *= ax.size();
        require(cells == x.size(),
                "interp fit: training points do not form a full grid (" +
                    std::to_string(x.size()) + " points vs " + std::to_string(cells) +
                    " cells); train scattered data with the forest regressor");
        g.values_.assign(cells, 0.0);
        std::vector<bool> seen(cells, false);
        for (std::size_t i = 0; i < x.size(); ++i) {
            std::size_t flat = g.flat_index(x[i]);
            require(!seen[flat], "interp fit: duplicate grid point");
            seen[flat] = true;
            g.values_[flat] = y[i];
        }
        return g;
    }

    double predict(std::span<const double> x) const override {
        internal_check(x.size() == axes_.size(), "interp predict: feature count mismatch");
        // locate the cell per axis; clamp outside the grid (the estimator's
        // extrapolation margin bounds how far outside a query can be)
        std::vector<std::size_t> lo(axes_.size());
        std::vector<double> frac(axes_.size());
        for (std::size_t f = 0; f < axes_.size(); ++f) {
            const auto& ax = axes_[f];
            if (ax.size() == 1) {
                lo[f] = 0;
                frac[f] = 0.0;
                continue;
            }
            auto it = std::upper_bound(ax.begin(), ax.end(), x[f]);
            std::size_t hi = std::clamp<std::size_t>(it - ax.begin(), 1, ax.size() - 1);
            lo[f] = hi - 1;
            frac[f] = std::clamp((x[f] - ax[lo[f]]) / (ax[hi] - ax[lo[f]]), 0.0, 1.0);
        }
        double acc = 0.0;
        const std::size_t corners = std::size_t(1) << axes_.size();
        for (std::size_t mask = 0; mask < corners; ++mask) {
            double weight = 1.0;
            std::size_t flat = 0, stride = 1;
            for (std::size_t f = axes_.size(); f-- > 0;) {
                bool high = (mask >> f) & 1;
                if (axes_[f].size() == 1) high = false;
                weight *= high ? frac[f] : 1.0 - frac[f];
                flat += (lo[f] + (high ? 1 : 0)) * stride;
                stride *= axes_[f].size();
            }
            acc += weight * values_[flat];
        }
        return acc;
    }

    nlohmann::json to_json() const override {
        nlohmann::json j;
        j["type"] = "interp";
        j["axes"] = axes_;
        j["values"] = values_;
        return j;
    }

    static GridInterpolator from_json(const nlohmann::json& j) {
        GridInterpolator g;
        g.axes_ = j.at("axes").get<std::vector<std::vector<double>>>();
        g.values_ = j.at("values").get<std::vector<double>>();
        std::size_t cells = 1;
        for (auto& ax : g.axes_) cells *= ax.size();
        require(cells == g.values_.size(), "interp model: axes/value size mismatch");
        return g;
    }

    const std::vector<std::vector<double>>& axes() const { return axes_; }

private:
    std::size_t flat_index(const std::vector<double>& row) const {
        std::size_t flat = 0, stride = 1;
        for (std::size_t f = axes_.size(); f-- > 0;) {
            auto it = std::lower_bound(axes_[f].begin(), axes_[f].end(), row[f]);
            internal_check(it != axes_[f].end() && *it == row[f], "interp fit: off-axis point");
            flat += static_cast<std::size_t>(it - axes_[f].begin()) * stride;
            stride *= axes_[f].size();
        }
        return flat;
    }

    std::vector<std::vector<double>> axes_;   // sorted unique levels per feature
    std::vector<double> values_;              // row-major over axes
};

inline std::unique_ptr<Regressor> regressor_from_json(const nlohmann::json& j) {
    const std::string type = j.at("type").get<std::string>();
    if (type == "forest")
        return std::make_unique<ForestRegressor>(ForestRegressor::from_json(j));
    if (type == "interp")
        return std::make_unique<GridInterpolator>(GridInterpolator::from_json(j));
    throw Error("unknown regressor type '" + type + "'");
}

}  // namespace servesim
