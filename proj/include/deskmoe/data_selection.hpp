// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// Data curation: exact-match dedup and decontamination, a hashed n-gram
// embedder, PCA, DBSCAN, cluster-balanced multilingual selection, selective
// resampling and the rollout pass-rate filter.

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <istream>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "deskmoe/errors.hpp"
#include "deskmoe/rng.hpp"

namespace deskmoe {

struct EmbeddedSample {
    std::string id;
    std::string question;
    std::string answer;
    std::string language;
    double quality = 1.0;
    std::size_t occurrence = 1;
    std::vector<double> vector;

    bool operator==(const EmbeddedSample&) const = default;
};

// Trim, collapse whitespace runs to one space, ASCII case-fold.
inline std::string canonicalize(std::string_view s) {
    std::string out;
    bool pending_space = false;
    for (unsigned char c : s) {
        if (std::isspace(c)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out += ' ';
        pending_space = false;
        out += static_cast<char>(std::tolower(c));
    }
    return out;
}

struct Removal {
    EmbeddedSample sample;
    std::string reason;   // "duplicate" or "contaminated"
    std::string matched;  // id of the kept copy, or the eval set name
};

struct DedupResult {
    std::vector<EmbeddedSample> retained;
    std::vector<Removal> removed;
};

// Keeps the first sample for each canonical question and drops every sample
// whose canonical question appears in an eval set.
inline DedupResult dedup_and_decontaminate(const std::vector<EmbeddedSample>& samples,
                                           const std::map<std::string, std::vector<std::string>>& eval_sets = {}) {
    std::unordered_map<std::string, std::string> eval_index;
    for (const auto& [name, questions] : eval_sets)
        for (const auto& q : questions) eval_index.emplace(canonicalize(q), name);
    DedupResult r;
    std::unordered_map<std::string, std::string> seen;
    for (const auto& s : samples) {
        const auto key = canonicalize(s.question);
        if (auto it = eval_index.find(key); it != eval_index.end()) {
            r.removed.push_back({s, "contaminated", it->second});
        } else if (auto jt = seen.find(key); jt != seen.end()) {
            r.removed.push_back({s, "duplicate", jt->second});
        } else {
            seen.emplace(key, s.id);
            r.retained.push_back(s);
        }
    }
    return r;
}

using Embedder = std::function<std::vector<double>(std::string_view)>;

// Signed feature hashing of byte n-grams, L2-normalised. Pure and seedable.
class HashedNgramEmbedder {
   public:
    explicit HashedNgramEmbedder(std::size_t dim = 64, std::size_t n = 3, std::uint64_t seed = 0)
        : dim_(dim), n_(n), seed_(seed) {
        if (dim == 0 || n == 0) throw ConfigError("embedder dim and n must be positive");
    }

    std::size_t dim() const { return dim_; }

    std::vector<double> operator()(std::string_view text) const {
        std::vector<double> v(dim_, 0.0);
        const std::string padded = " " + canonicalize(text) + " ";
        for (std::size_t len = 1; len <= n_; ++len) {
            for (std::size_t i = 0; i + len <= padded.size(); ++i) {
                std::uint64_t h = 1469598103934665603ULL ^ (seed_ * 0x9E3779B97F4A7C15ULL) ^ len;
                for (std::size_t j = i; j < i + len; ++j) {
                    h ^= static_cast<unsigned char>(padded[j]);
                    h *= 1099511628211ULL;
                }
                v[h % dim_] += (h >> 63) ? -1.0 : 1.0;
            }
        }
        double norm = 0;
        for (double x : v) norm += x * x;
        if (norm > 0)
            for (double& x : v) x /= std::sqrt(norm);
        return v;
    }

   private:
    std::size_t dim_, n_;
    std::uint64_t seed_;
};

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw DimensionError("cosine of vectors with different lengths");
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0 || bb == 0) return 0.0;
    return ab / std::sqrt(aa * bb);
}

struct PcaResult {
    std::vector<double> mean;                    // d
    std::vector<std::vector<double>> components;  // k rows of length d
    std::vector<double> eigenvalues;             // k, decreasing
    std::vector<double> explained_ratio;         // k
    std::vector<std::vector<double>> projected;  // n rows of length k
};

// Mean-centred projection onto the top-k covariance eigenvectors. Each
// component's largest-magnitude entry is made positive.
inline PcaResult pca_reduce(const std::vector<std::vector<double>>& vectors, std::size_t k) {
    if (vectors.size() < 2) throw InputError("PCA needs at least two vectors");
    const std::size_t n = vectors.size(), d = vectors.front().size();
    if (k > d) throw ConfigError(detail::cat("PCA k=", k, " exceeds dimension ", d));
    Eigen::MatrixXd x(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        if (vectors[i].size() != d) throw DimensionError(detail::cat("vector ", i, " has length ", vectors[i].size()));
        for (std::size_t j = 0; j < d; ++j) {
            if (!std::isfinite(vectors[i][j])) throw NumericError(detail::cat("vector ", i, " is not finite"));
            x(i, j) = vectors[i][j];
        }
    }
    const Eigen::RowVectorXd mu = x.colwise().mean();
    x.rowwise() -= mu;
    const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    const Eigen::VectorXd vals = eig.eigenvalues().reverse();
    Eigen::MatrixXd vecs = eig.eigenvectors().rowwise().reverse();
    const double total = vals.cwiseMax(0.0).sum();

    PcaResult r;
    r.mean.assign(mu.data(), mu.data() + d);
    for (std::size_t c = 0; c < k; ++c) {
        Eigen::Index arg = 0;
        vecs.col(static_cast<Eigen::Index>(c)).cwiseAbs().maxCoeff(&arg);
        if (vecs(arg, static_cast<Eigen::Index>(c)) < 0) vecs.col(static_cast<Eigen::Index>(c)) *= -1.0;
        const double lambda = std::max(0.0, vals(static_cast<Eigen::Index>(c)));
        r.eigenvalues.push_back(lambda);
        r.explained_ratio.push_back(total > 0 ? lambda / total : 0.0);
        const auto col = vecs.col(static_cast<Eigen::Index>(c));
        r.components.emplace_back(col.data(), col.data() + d);
    }
    const Eigen::MatrixXd proj = x * vecs.leftCols(static_cast<Eigen::Index>(k));
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> row(k);
        for (std::size_t c = 0; c < k; ++c) row[c] = proj(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
        r.projected.push_back(std::move(row));
    }
    return r;
}

// Maps projected rows back to the input space.
inline std::vector<std::vector<double>> pca_reconstruct(const PcaResult& r) {
    std::vector<std::vector<double>> out;
    for (const auto& p : r.projected) {
        std::vector<double> v = r.mean;
        for (std::size_t c = 0; c < p.size(); ++c)
            for (std::size_t j = 0; j < v.size(); ++j) v[j] += p[c] * r.components[c][j];
        out.push_back(std::move(v));
    }
    return out;
}

constexpr int kNoise = -1;

// Standard DBSCAN. A point is core when at least min_pts points (itself
// included) lie within eps. Clusters are seeded in index order and grown
// breadth-first, so a border point joins the first cluster that reaches it.
inline std::vector<int> dbscan_cluster(const std::vector<std::vector<double>>& points, double eps,
                                       std::size_t min_pts) {
    if (!(eps > 0)) throw ConfigError("dbscan eps must be positive");
    if (min_pts < 1) throw ConfigError("dbscan min_pts must be >= 1");
    const std::size_t n = points.size();
    auto neighbours = [&](std::size_t i) {
        std::vector<std::size_t> out;
        for (std::size_t j = 0; j < n; ++j) {
            double d2 = 0;
            for (std::size_t t = 0; t < points[i].size(); ++t) {
                const double diff = points[i][t] - points[j][t];
                d2 += diff * diff;
            }
            if (d2 <= eps * eps) out.push_back(j);
        }
        return out;
    };
    constexpr int unvisited = -2;
    std::vector<int> label(n, unvisited);
    int next = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (label[i] != unvisited) continue;
        auto nb = neighbours(i);
        if (nb.size() < min_pts) {
            label[i] = kNoise;
            continue;
        }
        const int c = next++;
        label[i] = c;
        std::deque<std::size_t> frontier(nb.begin(), nb.end());
        while (!frontier.empty()) {
            const std::size_t j = frontier.front();
            frontier.pop_front();
            if (label[j] == kNoise) label[j] = c;
            if (label[j] != unvisited) continue;
            label[j] = c;
            auto nj = neighbours(j);
            if (nj.size() >= min_pts) frontier.insert(frontier.end(), nj.begin(), nj.end());
        }
    }
    return label;
}

// Splits `budget` across groups in proportion to their sizes; leftover units
// go to the largest fractional parts, earlier groups first on ties.
inline std::vector<std::size_t> allocate_budget(const std::vector<std::size_t>& sizes, std::size_t budget) {
    const std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
    if (budget > total) throw ConfigError(detail::cat("budget ", budget, " exceeds ", total, " samples"));
    std::vector<std::size_t> alloc(sizes.size(), 0);
    if (total == 0) return alloc;
    std::vector<std::pair<std::size_t, std::size_t>> rem;  // (remainder numerator, group)
    std::size_t given = 0;
    for (std::size_t g = 0; g < sizes.size(); ++g) {
        alloc[g] = budget * sizes[g] / total;
        given += alloc[g];
        rem.emplace_back(budget * sizes[g] % total, g);
    }
    std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; given < budget; ++i, ++given) ++alloc[rem[i].second];
    return alloc;
}

// Efraimidis-Spirakis weighted sampling without replacement: key u^(1/w),
// keep the m largest. Zero-weight items sort last, in index order.
inline std::vector<std::size_t> weighted_sample(const std::vector<double>& weights, std::size_t m, Rng& rng) {
    std::vector<std::pair<double, std::size_t>> keys;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double u = rng.uniform();
        if (!(weights[i] >= 0) || !std::isfinite(weights[i])) {
            throw NumericError(detail::cat("sampling weight ", i, " is ", weights[i]));
        }
        const double key = weights[i] > 0 ? std::log(std::max(u, 1e-300)) / weights[i]
                                          : -std::numeric_limits<double>::infinity();
        keys.emplace_back(key, i);
    }
    m = std::min(m, keys.size());
    std::stable_sort(keys.begin(), keys.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < m; ++i) out.push_back(keys[i].second);
    std::sort(out.begin(), out.end());
    return out;
}

struct SelectionConfig {
    std::size_t pca_k = 8;
    double eps = 0.5;
    std::size_t min_pts = 3;
    std::uint64_t seed = 0;
};

struct SelectionResult {
    std::vector<std::size_t> selected;  // indices into the input, increasing
    std::vector<int> labels;            // cluster per input sample, kNoise for noise
    std::vector<double> qa_similarity;
};

// Draws per-cluster quotas from labelled samples, weighting each sample by
// 1 - qa_similarity. Noise points are pooled into one extra group.
inline std::vector<std::size_t> select_from_clusters(const std::vector<int>& labels,
                                                     const std::vector<double>& qa_similarity, std::size_t budget,
                                                     Rng& rng) {
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
    std::vector<std::size_t> sizes;
    for (const auto& [_, members] : groups) sizes.push_back(members.size());
    const auto quota = allocate_budget(sizes, budget);
    std::vector<std::size_t> out;
    std::size_t g = 0;
    for (const auto& [_, members] : groups) {
        std::vector<double> w;
        for (auto i : members) w.push_back(std::max(0.0, 1.0 - qa_similarity[i]));
        for (auto local : weighted_sample(w, quota[g], rng)) out.push_back(members[local]);
        ++g;
    }
    std::sort(out.begin(), out.end());
    return out;
}

inline SelectionResult select_multilingual(const std::vector<EmbeddedSample>& samples, std::size_t budget,
                                           const Embedder& embed, const SelectionConfig& cfg = {}) {
    if (budget > samples.size()) {
        throw ConfigError(detail::cat("budget ", budget, " exceeds ", samples.size(), " samples"));
    }
    SelectionResult r;
    if (budget == 0 || samples.empty()) return r;
    std::vector<std::vector<double>> q_vecs;
    for (const auto& s : samples) {
        auto q = embed(s.question);
        r.qa_similarity.push_back(cosine_similarity(q, embed(s.answer)));
        q_vecs.push_back(std::move(q));
    }
    if (samples.size() >= 2) {
        const auto pca = pca_reduce(q_vecs, std::min(cfg.pca_k, q_vecs.front().size()));
        r.labels = dbscan_cluster(pca.projected, cfg.eps, cfg.min_pts);
    } else {
        r.labels.assign(samples.size(), kNoise);
    }
    Rng rng(cfg.seed);
    r.selected = select_from_clusters(r.labels, r.qa_similarity, budget, rng);
    return r;
}

// Samples without replacement with weight occurrence * quality^gamma. Returns
// increasing indices; fewer than target when too few weights are positive.
inline std::vector<std::size_t> selective_resample(const std::vector<EmbeddedSample>& samples,
                                                   std::size_t target_size, double gamma, std::uint64_t seed) {
    if (target_size < 1) throw ConfigError("resample target must be >= 1");
    std::vector<double> w;
    std::size_t positive = 0;
    for (const auto& s : samples) {
        if (s.occurrence < 1) throw InputError("sample " + s.id + " has occurrence 0");
        const double q = gamma == 0 ? 1.0 : std::pow(s.quality, gamma);
        w.push_back(static_cast<double>(s.occurrence) * q);
        if (w.back() > 0) ++positive;
    }
    if (positive == 0) throw SelectionError("every resampling weight is zero");
    Rng rng(seed);
    return weighted_sample(w, std::min(target_size, positive), rng);
}

struct PromptRollouts {
    std::string id;
    std::vector<bool> correct;
};

struct PassRateResult {
    std::vector<std::string> retained;
    std::vector<std::string> warnings;
};

// Keeps prompts whose pass rate lies in [lo, hi]. Prompts without rollouts
// are skipped with a warning.
inline PassRateResult pass_rate_filter(const std::vector<PromptRollouts>& prompts, double lo, double hi) {
    if (!(0 <= lo && lo <= hi && hi <= 1)) throw ConfigError(detail::cat("bad pass-rate interval [", lo, ", ", hi, "]"));
    PassRateResult r;
    for (const auto& p : prompts) {
        if (p.correct.empty()) {
            r.warnings.push_back("prompt " + p.id + " has no rollouts, skipped");
            continue;
        }
        const auto ok = static_cast<double>(std::count(p.correct.begin(), p.correct.end(), true));
        const double rate = ok / static_cast<double>(p.correct.size());
        if (lo <= rate && rate <= hi) r.retained.push_back(p.id);
    }
    return r;
}

inline nlohmann::json to_json(const EmbeddedSample& s) {
    return {{"id", s.id},           {"question", s.question}, {"answer", s.answer},
            {"language", s.language}, {"quality", s.quality},   {"occurrence", s.occurrence}};
}

inline EmbeddedSample sample_from_json(const nlohmann::json& j) {
    EmbeddedSample s;
    try {
        s.id = j.at("id").get<std::string>();
        s.question = j.at("question").get<std::string>();
        s.answer = j.value("answer", "");
        s.language = j.value("language", "");
        s.quality = j.value("quality", 1.0);
        s.occurrence = j.value("occurrence", std::size_t{1});
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad sample record: ") + e.what());
    }
    if (s.quality < 0 || s.quality > 1) throw InputError("sample " + s.id + " quality outside [0,1]");
    if (s.occurrence < 1) throw InputError("sample " + s.id + " has occurrence 0");
    return s;
}

inline std::vector<EmbeddedSample> read_samples(std::istream& in) {
    std::vector<EmbeddedSample> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(detail::cat("line ", n, ": ", e.what()));
        }
        out.push_back(sample_from_json(j));
    }
    return out;
}

inline void write_samples(std::ostream& out, const std::vector<EmbeddedSample>& samples) {
    for (const auto& s : samples) out << to_json(s).dump() << '\n';
}

inline void write_removal_log(std::ostream& out, const std::vector<Removal>& removed) {
    for (const auto& r : removed) {
        auto j = to_json(r.sample);
        j["reason"] = r.reason;
        j["matched"] = r.matched;
        out << j.dump() << '\n';
    }
}

}  // namespace deskmoe
