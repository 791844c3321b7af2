// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// Sample packing into fixed-capacity sequences, distributed dynamic padding
// across simulated data-parallel ranks, and the padding-efficiency comparison.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "deskmoe/attention_spec.hpp"
#include "deskmoe/errors.hpp"

namespace deskmoe {

// One training sequence. targets and weights align with tokens; a weight of
// zero marks a token that carries no loss (prompt tokens in SFT).
struct PackSample {
    std::size_t id = 0;
    std::vector<std::int32_t> tokens;
    std::vector<std::int32_t> targets;
    std::vector<double> weights;

    std::size_t size() const { return tokens.size(); }
    bool operator==(const PackSample&) const = default;
};

struct PackedBatch {
    std::size_t capacity = 0;
    std::vector<std::int32_t> tokens;     // capacity entries, pad_len trailing pads
    std::vector<std::int32_t> targets;
    std::vector<double> weights;          // 0 on pads
    std::vector<int> sample_ids;          // slot within the pack, -1 on pads
    std::vector<std::size_t> positions;   // restart at 0 at every boundary
    std::vector<std::size_t> boundaries;  // start offset of each sample
    std::vector<std::size_t> members;     // input ids, in slot order
    std::size_t pad_len = 0;
    std::size_t rank = 0;
    std::size_t step = 0;

    std::size_t real_tokens() const { return capacity - pad_len; }

    // [begin, end) of slot `s`.
    std::pair<std::size_t, std::size_t> extent(std::size_t s) const {
        const std::size_t end = s + 1 < boundaries.size() ? boundaries[s + 1] : capacity - pad_len;
        return {boundaries.at(s), end};
    }
};

enum class PackPolicy {
    first_fit_decreasing,
    first_fit,  // input order, no sorting
};

struct PackReport {
    std::size_t real_tokens = 0;
    std::size_t packs = 0;
    std::size_t capacity = 0;

    double ratio() const {
        return packs ? static_cast<double>(real_tokens) / static_cast<double>(packs * capacity) : 0.0;
    }
};

struct PackResult {
    std::vector<PackedBatch> packs;
    PackReport report;
};

// Assigns sample indices to bins of `capacity`. Ties in length keep input
// order, so identical inputs always give identical packs.
inline std::vector<std::vector<std::size_t>> plan_bins(const std::vector<std::size_t>& lengths, std::size_t capacity,
                                                      PackPolicy policy = PackPolicy::first_fit_decreasing) {
    if (capacity == 0) throw ConfigError("pack capacity must be positive");
    std::vector<std::size_t> order(lengths.size());
    std::iota(order.begin(), order.end(), 0);
    if (policy == PackPolicy::first_fit_decreasing) {
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return lengths[a] > lengths[b]; });
    }
    std::vector<std::vector<std::size_t>> bins;
    std::vector<std::size_t> room;
    for (auto i : order) {
        if (lengths[i] > capacity) {
            throw OversizeError(detail::cat("sample ", i, " has ", lengths[i], " tokens, capacity is ", capacity));
        }
        if (lengths[i] == 0) throw InputError(detail::cat("sample ", i, " is empty"));
        std::size_t b = 0;
        while (b < bins.size() && room[b] < lengths[i]) ++b;
        if (b == bins.size()) {
            bins.emplace_back();
            room.push_back(capacity);
        }
        bins[b].push_back(i);
        room[b] -= lengths[i];
    }
    return bins;
}

inline PackResult pack_samples(const std::vector<PackSample>& samples, std::size_t capacity,
                               PackPolicy policy = PackPolicy::first_fit_decreasing, std::int32_t pad_token = 0) {
    std::vector<std::size_t> lengths;
    lengths.reserve(samples.size());
    for (const auto& s : samples) {
        if (s.targets.size() != s.size() || s.weights.size() != s.size()) {
            throw DimensionError(detail::cat("sample ", s.id, ": tokens, targets and weights differ in length"));
        }
        lengths.push_back(s.size());
    }
    std::vector<std::vector<std::size_t>> bins;
    try {
        bins = plan_bins(lengths, capacity, policy);
    } catch (const OversizeError&) {
        for (const auto& s : samples)
            if (s.size() > capacity)
                throw OversizeError(detail::cat("sample ", s.id, " has ", s.size(), " tokens, capacity is ", capacity));
        throw;
    }
    PackResult result;
    result.report.capacity = capacity;
    for (const auto& bin : bins) {
        PackedBatch p;
        p.capacity = capacity;
        int slot = 0;
        for (auto i : bin) {
            const auto& s = samples[i];
            p.boundaries.push_back(p.tokens.size());
            p.members.push_back(s.id);
            p.tokens.insert(p.tokens.end(), s.tokens.begin(), s.tokens.end());
            p.targets.insert(p.targets.end(), s.targets.begin(), s.targets.end());
            p.weights.insert(p.weights.end(), s.weights.begin(), s.weights.end());
            for (std::size_t t = 0; t < s.size(); ++t) {
                p.sample_ids.push_back(slot);
                p.positions.push_back(t);
            }
            ++slot;
        }
        p.pad_len = capacity - p.tokens.size();
        p.tokens.resize(capacity, pad_token);
        p.targets.resize(capacity, pad_token);
        p.weights.resize(capacity, 0.0);
        p.sample_ids.resize(capacity, -1);
        p.positions.resize(capacity, 0);
        result.report.real_tokens += p.real_tokens();
        result.packs.push_back(std::move(p));
    }
    result.report.packs = result.packs.size();
    return result;
}

inline AttentionSpec packed_attention_spec(const PackedBatch& pack) { return AttentionSpec(pack.sample_ids); }

// Recovers the packed samples, in pack then slot order.
inline std::vector<PackSample> unpack(const std::vector<PackedBatch>& packs) {
    std::vector<PackSample> out;
    for (const auto& p : packs) {
        for (std::size_t s = 0; s < p.boundaries.size(); ++s) {
            const auto [b, e] = p.extent(s);
            PackSample x;
            x.id = p.members[s];
            x.tokens.assign(p.tokens.begin() + b, p.tokens.begin() + e);
            x.targets.assign(p.targets.begin() + b, p.targets.begin() + e);
            x.weights.assign(p.weights.begin() + b, p.weights.begin() + e);
            out.push_back(std::move(x));
        }
    }
    return out;
}

struct DdpStep {
    std::size_t padded_len = 0;           // group max this step
    std::vector<std::size_t> real;        // per rank
    double ratio() const {
        const auto r = std::accumulate(real.begin(), real.end(), std::size_t{0});
        return padded_len ? static_cast<double>(r) / static_cast<double>(padded_len * real.size()) : 0.0;
    }
};

struct DdpGroup {
    std::vector<DdpStep> steps;
    std::size_t real_tokens = 0;
    std::size_t padded_tokens = 0;
    double ratio() const {
        return padded_tokens ? static_cast<double>(real_tokens) / static_cast<double>(padded_tokens) : 0.0;
    }
};

// per_rank[r][s] is the input length rank r feeds at step s. Every rank is
// padded to the largest length in the group at that step, so shapes agree
// within a step and vary from step to step.
inline DdpGroup ddp_group_pad(const std::vector<std::vector<std::size_t>>& per_rank) {
    if (per_rank.empty()) throw AssignmentError("no ranks in the data-parallel group");
    const std::size_t n_steps = per_rank.front().size();
    for (std::size_t r = 0; r < per_rank.size(); ++r) {
        if (per_rank[r].empty()) throw AssignmentError(detail::cat("rank ", r, " has no inputs"));
        if (per_rank[r].size() != n_steps) {
            throw AssignmentError(detail::cat("rank ", r, " has ", per_rank[r].size(), " steps, rank 0 has ", n_steps));
        }
    }
    DdpGroup g;
    for (std::size_t s = 0; s < n_steps; ++s) {
        DdpStep st;
        for (const auto& rank : per_rank) {
            st.real.push_back(rank[s]);
            st.padded_len = std::max(st.padded_len, rank[s]);
        }
        g.real_tokens += std::accumulate(st.real.begin(), st.real.end(), std::size_t{0});
        g.padded_tokens += st.padded_len * per_rank.size();
        g.steps.push_back(std::move(st));
    }
    return g;
}

// Effective-token ratios of four ways to batch the same workload. Samples are
// taken in order: micro_batch per rank, ranks * micro_batch per step.
struct PaddingComparison {
    double fixed = 0;     // every sample padded to capacity
    double dynamic = 0;   // each micro-batch padded to its own longest sample
    double ddp = 0;       // each step padded to the longest sample in the whole group
    double packing = 0;   // first-fit-decreasing packs of capacity
};

inline PaddingComparison compare_padding(const std::vector<std::size_t>& lengths, std::size_t capacity,
                                         std::size_t micro_batch, std::size_t ranks) {
    if (lengths.empty()) throw EmptyBatchError("padding comparison needs at least one sample");
    if (micro_batch == 0 || ranks == 0) throw ConfigError("micro_batch and ranks must be positive");
    const double real = static_cast<double>(std::accumulate(lengths.begin(), lengths.end(), std::size_t{0}));
    PaddingComparison c;
    c.fixed = real / static_cast<double>(lengths.size() * capacity);

    double dyn_total = 0;
    for (std::size_t i = 0; i < lengths.size(); i += micro_batch) {
        const std::size_t end = std::min(lengths.size(), i + micro_batch);
        const std::size_t mx = *std::max_element(lengths.begin() + i, lengths.begin() + end);
        dyn_total += static_cast<double>(mx * (end - i));
    }
    c.dynamic = real / dyn_total;

    double ddp_total = 0;
    const std::size_t per_step = micro_batch * ranks;
    for (std::size_t i = 0; i < lengths.size(); i += per_step) {
        const std::size_t end = std::min(lengths.size(), i + per_step);
        const std::size_t mx = *std::max_element(lengths.begin() + i, lengths.begin() + end);
        ddp_total += static_cast<double>(mx * (end - i));
    }
    c.ddp = real / ddp_total;

    c.packing = static_cast<double>(real) /
                static_cast<double>(plan_bins(lengths, capacity).size() * capacity);
    return c;
}

// One JSON line per pack: rank, step, boundaries, pad_len, capacity.
inline void write_pack_manifest(std::ostream& out, const std::vector<PackedBatch>& packs) {
    for (const auto& p : packs) {
        nlohmann::json j{{"rank", p.rank},
                         {"step", p.step},
                         {"boundaries", p.boundaries},
                         {"pad_len", p.pad_len},
                         {"capacity", p.capacity},
                         {"members", p.members}};
        out << j.dump() << '\n';
    }
}

}  // namespace deskmoe
