// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "deskmoe/model.hpp"
#include "deskmoe/packing.hpp"

using namespace deskmoe;

namespace {

PackSample make_sample(std::size_t id, std::size_t len, Rng& rng, std::size_t vocab = 16) {
    PackSample s;
    s.id = id;
    for (std::size_t i = 0; i < len; ++i) {
        s.tokens.push_back(static_cast<std::int32_t>(rng.below(vocab)));
        s.targets.push_back(static_cast<std::int32_t>(rng.below(vocab)));
        s.weights.push_back(rng.below(3) == 0 ? 0.0 : 1.0);
    }
    return s;
}

std::vector<PackSample> samples_of(const std::vector<std::size_t>& lengths, Rng& rng) {
    std::vector<PackSample> out;
    for (std::size_t i = 0; i < lengths.size(); ++i) out.push_back(make_sample(i, lengths[i], rng));
    return out;
}

std::vector<std::size_t> pack_lengths(const PackedBatch& p) {
    std::vector<std::size_t> out;
    for (std::size_t s = 0; s < p.boundaries.size(); ++s) {
        auto [b, e] = p.extent(s);
        out.push_back(e - b);
    }
    return out;
}

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 2;
    c.n_heads = 4;
    c.n_kv_heads = 2;
    c.head_dim = 4;
    c.hidden_dim = 8;
    c.vocab_size = 16;
    c.expert_intermediate_size = 4;
    c.n_specialized_experts = 4;
    c.top_k = 2;
    return c;
}

}  // namespace

TEST(Packing, FirstFitDecreasingHandTrace) {
    Rng rng(1);
    auto res = pack_samples(samples_of({5, 3, 4, 2}, rng), 8);
    ASSERT_EQ(res.packs.size(), 2u);
    EXPECT_EQ(pack_lengths(res.packs[0]), (std::vector<std::size_t>{5, 3}));
    EXPECT_EQ(pack_lengths(res.packs[1]), (std::vector<std::size_t>{4, 2}));
    EXPECT_DOUBLE_EQ(res.report.ratio(), 14.0 / 16.0);
}

TEST(Packing, ExactFit) {
    Rng rng(2);
    auto res = pack_samples(samples_of({8}, rng), 8);
    ASSERT_EQ(res.packs.size(), 1u);
    EXPECT_EQ(res.packs[0].pad_len, 0u);
    EXPECT_DOUBLE_EQ(res.report.ratio(), 1.0);
}

TEST(Packing, OversizeSampleIsNamed) {
    Rng rng(3);
    auto s = samples_of({2, 9}, rng);
    s[1].id = 77;
    try {
        pack_samples(s, 8);
        FAIL() << "expected OversizeError";
    } catch (const OversizeError& e) {
        EXPECT_NE(std::string(e.what()).find("77"), std::string::npos);
    }
}

TEST(Packing, LayoutInvariants) {
    Rng rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t cap = 4 + rng.below(30);
        std::vector<std::size_t> lengths(1 + rng.below(20));
        for (auto& l : lengths) l = 1 + rng.below(cap);
        auto res = pack_samples(samples_of(lengths, rng), cap);
        for (const auto& p : res.packs) {
            ASSERT_EQ(p.tokens.size(), cap);
            std::size_t used = 0;
            for (std::size_t s = 0; s < p.boundaries.size(); ++s) {
                if (s) {
                    EXPECT_LT(p.boundaries[s - 1], p.boundaries[s]);
                }
                auto [b, e] = p.extent(s);
                used += e - b;
                for (std::size_t t = b; t < e; ++t) {
                    EXPECT_EQ(p.positions[t], t - b);
                    EXPECT_EQ(p.sample_ids[t], static_cast<int>(s));
                }
            }
            EXPECT_EQ(used + p.pad_len, cap);
            for (std::size_t t = used; t < cap; ++t) {
                EXPECT_EQ(p.weights[t], 0.0);
                EXPECT_EQ(p.sample_ids[t], -1);
            }
        }
    }
}

TEST(Packing, RoundTripIsLossless) {
    Rng rng(5);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<std::size_t> lengths(1 + rng.below(25));
        for (auto& l : lengths) l = 1 + rng.below(16);
        auto samples = samples_of(lengths, rng);
        auto back = unpack(pack_samples(samples, 16).packs);
        auto by_id = [](const PackSample& a, const PackSample& b) { return a.id < b.id; };
        std::sort(back.begin(), back.end(), by_id);
        EXPECT_EQ(back, samples);
    }
}

TEST(Packing, Deterministic) {
    Rng a(6), b(6);
    std::vector<std::size_t> lengths{3, 3, 5, 1, 3, 7, 2, 2};
    auto pa = pack_samples(samples_of(lengths, a), 8);
    auto pb = pack_samples(samples_of(lengths, b), 8);
    ASSERT_EQ(pa.packs.size(), pb.packs.size());
    for (std::size_t i = 0; i < pa.packs.size(); ++i) {
        EXPECT_EQ(pa.packs[i].members, pb.packs[i].members);
        EXPECT_EQ(pa.packs[i].tokens, pb.packs[i].tokens);
    }
    // Equal lengths keep input order.
    EXPECT_EQ(pa.packs[0].members.front(), 5u);
}

TEST(PackedAttention, SingleSampleIsPlainCausal) {
    Rng rng(7);
    auto res = pack_samples(samples_of({6}, rng), 6);
    auto spec = packed_attention_spec(res.packs[0]);
    auto causal = AttentionSpec::causal(6);
    for (std::size_t q = 0; q < 6; ++q)
        for (std::size_t k = 0; k < 6; ++k) EXPECT_EQ(spec.allowed(q, k), causal.allowed(q, k));
}

TEST(PackedAttention, PadsAreIsolated) {
    Rng rng(8);
    auto res = pack_samples(samples_of({3, 2}, rng), 8);
    auto spec = packed_attention_spec(res.packs[0]);
    for (std::size_t q = 0; q < 8; ++q)
        for (std::size_t k = 0; k < 8; ++k) {
            if (q >= 5 || k >= 5) {
                EXPECT_FALSE(spec.allowed(q, k));
            }
        }
    EXPECT_FALSE(spec.allowed(3, 2));
    EXPECT_TRUE(spec.allowed(4, 3));
}

TEST(PackedAttention, PackedLogitsAndLossMatchUnpackedForward) {
    auto cfg = tiny_config();
    auto params = init_params<double>(cfg, 9);
    Rng rng(9);
    for (int trial = 0; trial < 10; ++trial) {
        std::vector<std::size_t> lengths(2 + rng.below(4));
        for (auto& l : lengths) l = 1 + rng.below(8);
        auto samples = samples_of(lengths, rng);
        auto res = pack_samples(samples, 16);
        for (const auto& p : res.packs) {
            auto out = decoder_forward(std::span<const std::int32_t>(p.tokens), p.positions, cfg, params,
                                       packed_attention_spec(p));
            double packed_loss = 0;
            if (auto l = lm_cross_entropy(out.logits, p.targets, p.weights)) packed_loss = l->sum.item();
            double sep_loss = 0;
            for (std::size_t s = 0; s < p.boundaries.size(); ++s) {
                const auto& sample = samples[p.members[s]];
                auto alone = decoder_forward(std::span<const std::int32_t>(sample.tokens), cfg, params);
                auto [b, e] = p.extent(s);
                for (std::size_t t = b; t < e; ++t)
                    for (std::size_t v = 0; v < cfg.vocab_size; ++v)
                        EXPECT_NEAR(out.logits[t * cfg.vocab_size + v], alone.logits[(t - b) * cfg.vocab_size + v],
                                    1e-10);
                if (auto l = lm_cross_entropy(alone.logits, sample.targets, sample.weights)) sep_loss += l->sum.item();
            }
            EXPECT_NEAR(packed_loss, sep_loss, 1e-10);
        }
    }
}

TEST(Ddp, PadsToGroupMax) {
    auto g = ddp_group_pad({{7}, {8}});
    ASSERT_EQ(g.steps.size(), 1u);
    EXPECT_EQ(g.steps[0].padded_len, 8u);
    EXPECT_DOUBLE_EQ(g.ratio(), 15.0 / 16.0);
}

TEST(Ddp, EqualRanksNeedNoPadding) {
    auto g = ddp_group_pad({{5, 6}, {5, 6}, {5, 6}});
    EXPECT_EQ(g.padded_tokens, g.real_tokens);
    EXPECT_DOUBLE_EQ(g.ratio(), 1.0);
}

TEST(Ddp, ShapesVaryAcrossSteps) {
    auto g = ddp_group_pad({{8, 3, 2}, {5, 6, 8}});
    std::vector<std::size_t> shapes;
    for (const auto& s : g.steps) shapes.push_back(s.padded_len);
    EXPECT_EQ(shapes, (std::vector<std::size_t>{8, 6, 8}));
    const double fixed = static_cast<double>(g.real_tokens) / (6.0 * 8.0);
    EXPECT_GT(g.ratio(), fixed);
}

TEST(Ddp, EmptyRankIsAssignmentError) {
    EXPECT_THROW(ddp_group_pad({{3}, {}}), AssignmentError);
    EXPECT_THROW(ddp_group_pad({}), AssignmentError);
    EXPECT_THROW(ddp_group_pad({{3, 4}, {2}}), AssignmentError);
}

TEST(PaddingComparison, OrderingOnRandomWorkloads) {
    Rng rng(10);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t cap = 64 + rng.below(448);
        std::vector<std::size_t> lengths(32 + rng.below(200));
        for (auto& l : lengths) l = 1 + rng.below(cap);
        auto c = compare_padding(lengths, cap, 4, 2);
        EXPECT_GE(c.packing, c.dynamic) << trial;
        EXPECT_GE(c.dynamic, c.ddp) << trial;
        EXPECT_GE(c.ddp, c.fixed) << trial;
    }
}

TEST(PaddingComparison, ManifestHasOneLinePerPack) {
    Rng rng(11);
    auto res = pack_samples(samples_of({5, 3, 4, 2}, rng), 8);
    std::ostringstream out;
    write_pack_manifest(out, res.packs);
    std::istringstream in(out.str());
    std::string line;
    int n = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line);
        EXPECT_TRUE(j.contains("boundaries"));
        EXPECT_TRUE(j.contains("pad_len"));
        EXPECT_TRUE(j.contains("rank"));
        ++n;
    }
    EXPECT_EQ(n, 2);
}

TEST(PaddingComparison, PackingFallsToFixedWhenNoTwoSamplesFit) {
    // Every length is above capacity / 2, so each pack holds one sample and
    // dynamic padding of similar lengths wins.
    auto c = compare_padding({40, 41, 42, 43, 44, 45, 46, 47}, 64, 4, 1);
    EXPECT_DOUBLE_EQ(c.packing, c.fixed);
    EXPECT_GT(c.dynamic, c.packing);
}
