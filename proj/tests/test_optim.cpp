// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "deskmoe/model.hpp"
#include "deskmoe/optim.hpp"

using namespace deskmoe;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 2;
    c.n_kv_heads = 1;
    c.head_dim = 4;
    c.hidden_dim = 8;
    c.vocab_size = 12;
    c.expert_intermediate_size = 4;
    c.n_shared_experts = 1;
    c.n_specialized_experts = 3;
    c.top_k = 2;
    return c;
}

struct Sample {
    std::vector<std::int32_t> tokens;
    std::vector<std::int32_t> targets;
    std::vector<double> weights;
};

std::vector<Sample> make_samples(const std::vector<std::size_t>& lengths, std::size_t vocab, Rng& rng) {
    std::vector<Sample> out;
    for (auto n : lengths) {
        Sample s;
        for (std::size_t i = 0; i < n; ++i) {
            s.tokens.push_back(static_cast<std::int32_t>(rng.below(vocab)));
            s.targets.push_back(static_cast<std::int32_t>(rng.below(vocab)));
            s.weights.push_back(i == 0 ? 0.0 : 1.0);
        }
        out.push_back(std::move(s));
    }
    return out;
}

MicroLoss<double> sample_loss(const Sample& s, const ModelConfig& cfg, const ParamSet<double>& params) {
    auto out = decoder_forward(std::span<const std::int32_t>(s.tokens), cfg, params);
    auto l = lm_cross_entropy(out.logits, s.targets, s.weights);
    return {l->sum, l->count, 1.0};
}

// One tape over the whole batch, loss divided by its own token count: the
// large-batch step that accumulation has to reproduce.
std::map<std::string, std::vector<double>> big_batch_delta(const std::vector<Sample>& batch, const ModelConfig& cfg,
                                                           ParamSet<double> params) {
    auto before = clone_params(params);
    AdamW<double> opt;
    zero_grads(params);
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor<double> total;
        double tokens = 0;
        for (const auto& s : batch) {
            auto ml = sample_loss(s, cfg, params);
            total = total.defined() ? add(total, ml.loss_sum) : ml.loss_sum;
            tokens += ml.tokens;
        }
        tape.backward(scale(total, 1.0 / tokens));
    }
    opt.step(params, 1e-3);
    std::map<std::string, std::vector<double>> delta;
    for (auto& [name, p] : params) {
        std::vector<double> d(p.numel());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = p[i] - before.at(name)[i];
        delta[name] = d;
    }
    return delta;
}

std::map<std::string, std::vector<double>> accumulated_delta(const std::vector<Sample>& batch, const ModelConfig& cfg,
                                                             ParamSet<double> params, Normalization norm) {
    auto before = clone_params(params);
    AdamW<double> opt;
    std::vector<std::function<MicroLoss<double>()>> micro;
    for (const auto& s : batch) micro.push_back([&, s] { return sample_loss(s, cfg, params); });
    accumulated_step(micro, params, opt, 1e-3, norm);
    std::map<std::string, std::vector<double>> delta;
    for (auto& [name, p] : params) {
        std::vector<double> d(p.numel());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = p[i] - before.at(name)[i];
        delta[name] = d;
    }
    return delta;
}

double max_abs_diff(const std::map<std::string, std::vector<double>>& a,
                    const std::map<std::string, std::vector<double>>& b) {
    double m = 0;
    for (const auto& [name, v] : a)
        for (std::size_t i = 0; i < v.size(); ++i) m = std::max(m, std::abs(v[i] - b.at(name)[i]));
    return m;
}

}  // namespace

TEST(Schedule, ReferenceStageOneEndpoints) {
    const auto plan = StagePlan::reference_pretraining();
    const auto& s1 = plan.stages[0];
    EXPECT_EQ(s1.warmup_steps, 3000u);
    EXPECT_DOUBLE_EQ(lr_at_step(plan, 0, 3000), 3.0e-4);
    EXPECT_NEAR(lr_at_step(plan, 0, s1.total_steps - 1), 3.0e-5, 1e-18);
    EXPECT_DOUBLE_EQ(lr_at_step(plan, 0, 0), 0.0);
}

TEST(Schedule, CosineMidpoint) {
    Stage s;
    s.total_steps = 1001;
    s.warmup_steps = 0;
    s.lr_max = 3.0e-4;
    s.lr_min = 3.0e-5;
    EXPECT_NEAR(lr_at_step(s, 500), 1.65e-4, 1e-15);
}

TEST(Schedule, OutOfRangeIsScheduleError) {
    Stage s;
    s.total_steps = 10;
    EXPECT_THROW(lr_at_step(s, 10), ScheduleError);
    EXPECT_THROW(lr_at_step(StagePlan::reference_pretraining(), 3, 0), ScheduleError);
}

TEST(Schedule, ContinuousAtJunctionAndMonotoneAfter) {
    for (const auto& s : StagePlan::reference_pretraining().stages) {
        if (s.warmup_steps > 0) {
            const double before = lr_at_step(s, s.warmup_steps - 1);
            const double at = lr_at_step(s, s.warmup_steps);
            EXPECT_NEAR(at - before, s.lr_max / static_cast<double>(s.warmup_steps), 1e-15) << s.name;
        }
        double prev = lr_at_step(s, s.warmup_steps);
        for (std::size_t t = s.warmup_steps + 1; t < s.total_steps; t += 97) {
            const double lr = lr_at_step(s, t);
            EXPECT_LE(lr, prev + 1e-18) << s.name << " step " << t;
            prev = lr;
        }
    }
}

TEST(Schedule, SecondStageRewarmsFromZero) {
    const auto plan = StagePlan::reference_pretraining();
    EXPECT_EQ(plan.stages[1].warmup_steps, 2000u);
    EXPECT_DOUBLE_EQ(lr_at_step(plan, 1, 0), 0.0);
    EXPECT_DOUBLE_EQ(lr_at_step(plan, 1, 2000), 1.5e-4);
    EXPECT_DOUBLE_EQ(lr_at_step(plan, 2, 0), 3.0e-5);
    EXPECT_EQ(plan.stages[2].total_steps, 2200u);
    EXPECT_EQ(plan.stages[2].rope_base, 1.0e6);
}

TEST(Schedule, SftStage) {
    const auto s = StagePlan::reference_sft("sft1", 1000);
    EXPECT_EQ(s.warmup_steps, 20u);
    EXPECT_EQ(s.micro_batch, 1u);
    EXPECT_EQ(s.grad_accum_steps, 4u);
    EXPECT_DOUBLE_EQ(lr_at_step(s, 999), 0.0);
}

TEST(Schedule, InvalidStagesAreConfigErrors) {
    Stage s;
    s.total_steps = 5;
    s.warmup_steps = 6;
    EXPECT_THROW(s.validate(), ConfigError);
    s.warmup_steps = 0;
    s.lr_min = 1.0;
    EXPECT_THROW(s.validate(), ConfigError);
    s.lr_min = 0.0;
    s.grad_accum_steps = 0;
    EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Coefficients, LinearDecayOverWholePlan) {
    StagePlan plan;
    Stage a, b;
    a.total_steps = 6;
    b.total_steps = 5;
    plan.stages = {a, b};
    auto c0 = moe_coeff_at_step(plan, 0, 0);
    EXPECT_DOUBLE_EQ(c0.alpha, 0.01);
    EXPECT_DOUBLE_EQ(c0.beta, 0.001);
    auto mid = moe_coeff_at_step(plan, 0, 5);
    EXPECT_NEAR(mid.alpha, 0.005, 1e-17);
    EXPECT_NEAR(mid.beta, 0.0005, 1e-18);
    auto end = moe_coeff_at_step(plan, 1, 4);
    EXPECT_DOUBLE_EQ(end.alpha, 0.0);
    EXPECT_DOUBLE_EQ(end.beta, 0.0);
    const auto ref = StagePlan::reference_pretraining();
    EXPECT_DOUBLE_EQ(moe_coeff_at_step(ref, 0, 0).alpha, 0.01);
    EXPECT_DOUBLE_EQ(moe_coeff_at_step(ref, 0, 0).beta, 0.001);
}

TEST(AdamW, ZeroGradientsWithoutDecayLeaveParamsUnchanged) {
    ParamSet<double> p;
    p.emplace("w", Tensor<double>({3}, {1.0, -2.0, 0.5}, true));
    p.at("w").ensure_grad();
    AdamW<double> opt({0.9, 0.95, 1e-8, 0.0, 1.0});
    opt.step(p, 0.1);
    EXPECT_EQ(p.at("w").values(), (std::vector<double>{1.0, -2.0, 0.5}));
}

TEST(AdamW, FirstStepMovesByLearningRate) {
    ParamSet<double> p;
    p.emplace("w", Tensor<double>::scalar(0.0, true));
    p.at("w").grad()[0] = 1.0;
    AdamW<double> opt({0.9, 0.95, 1e-8, 0.0, 1.0});
    opt.step(p, 0.1);
    const double m_hat = 0.1 / 0.1, v_hat = 0.05 / 0.05;
    EXPECT_NEAR(p.at("w").item(), -0.1 * m_hat / (std::sqrt(v_hat) + 1e-8), 1e-15);
    EXPECT_NEAR(p.at("w").item(), -0.1, 1e-8);
}

TEST(AdamW, ClipsToUnitGlobalNorm) {
    ParamSet<double> p;
    p.emplace("a", Tensor<double>({2}, {0, 0}, true));
    p.emplace("b", Tensor<double>::scalar(0, true));
    p.at("a").grad()[0] = 3.0;
    p.at("b").grad()[0] = 4.0;
    AdamW<double> opt({0.9, 0.95, 1e-8, 0.0, 1.0});
    auto r = opt.step(p, 0.0);
    EXPECT_DOUBLE_EQ(r.grad_norm, 5.0);
    EXPECT_LE(r.clipped_norm, 1.0 + 1e-12);
    EXPECT_NEAR(opt.moments().at("a").m[0], 0.1 * 3.0 / 5.0, 1e-15);
    EXPECT_NEAR(opt.moments().at("b").m[0], 0.1 * 4.0 / 5.0, 1e-15);
}

TEST(AdamW, ClippingNeverIncreasesNorm) {
    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        ParamSet<double> p;
        p.emplace("w", Tensor<double>::zeros({7}, true));
        const double s = std::pow(10.0, rng.uniform(-3, 3));
        for (auto& g : p.at("w").grad()) g = rng.normal(0, s);
        AdamW<double> opt;
        auto r = opt.step(p, 0.0);
        EXPECT_LE(r.clipped_norm, r.grad_norm + 1e-15);
        EXPECT_LE(r.clipped_norm, 1.0 + 1e-12);
    }
}

TEST(AdamW, ZeroLearningRateKeepsParameters) {
    ParamSet<double> p;
    p.emplace("w", Tensor<double>({2}, {1.5, -0.5}, true));
    p.at("w").grad()[0] = 0.3;
    AdamW<double> opt;
    opt.step(p, 0.0);
    EXPECT_EQ(p.at("w").values(), (std::vector<double>{1.5, -0.5}));
    EXPECT_EQ(opt.steps(), 1u);
}

TEST(AdamW, NonFiniteGradientAbortsStep) {
    ParamSet<double> p;
    p.emplace("w", Tensor<double>({2}, {1.0, 2.0}, true));
    p.at("w").grad()[1] = std::nan("");
    AdamW<double> opt;
    EXPECT_THROW(opt.step(p, 0.1), NumericError);
    EXPECT_EQ(p.at("w").values(), (std::vector<double>{1.0, 2.0}));
    EXPECT_EQ(opt.steps(), 0u);
}

TEST(AdamW, FrozenParametersAreSkipped) {
    ParamSet<double> p;
    p.emplace("frozen", Tensor<double>({1}, {2.0}, false));
    p.emplace("live", Tensor<double>({1}, {2.0}, true));
    p.at("live").grad()[0] = 1.0;
    AdamW<double> opt;
    opt.step(p, 0.1);
    EXPECT_EQ(p.at("frozen").item(), 2.0);
    EXPECT_NE(p.at("live").item(), 2.0);
    EXPECT_EQ(opt.moments().count("frozen"), 0u);
}

TEST(Accumulation, FourSingleSampleMicroBatchesEqualOneBatch) {
    auto cfg = tiny_config();
    auto params = init_params<double>(cfg, 4);
    Rng rng(4);
    auto batch = make_samples({3, 7, 5, 9}, cfg.vocab_size, rng);
    auto big = big_batch_delta(batch, cfg, clone_params(params));
    auto acc = accumulated_delta(batch, cfg, clone_params(params), Normalization::global_tokens);
    EXPECT_LE(max_abs_diff(big, acc), 1e-10);
}

TEST(Accumulation, NaiveMeanOfMeansDisagreesOnUnequalCounts) {
    auto cfg = tiny_config();
    auto params = init_params<double>(cfg, 5);
    Rng rng(5);
    auto batch = make_samples({4, 6}, cfg.vocab_size, rng);
    auto big = big_batch_delta(batch, cfg, clone_params(params));
    auto fixed = accumulated_delta(batch, cfg, clone_params(params), Normalization::global_tokens);
    auto naive = accumulated_delta(batch, cfg, clone_params(params), Normalization::per_micro_mean);
    EXPECT_LE(max_abs_diff(big, fixed), 1e-10);
    EXPECT_GT(max_abs_diff(big, naive), 1e-7);
}

TEST(Accumulation, SingleMicroBatchEqualsPlainStep) {
    auto cfg = tiny_config();
    auto params = init_params<double>(cfg, 6);
    Rng rng(6);
    auto batch = make_samples({6}, cfg.vocab_size, rng);
    auto big = big_batch_delta(batch, cfg, clone_params(params));
    auto acc = accumulated_delta(batch, cfg, clone_params(params), Normalization::global_tokens);
    EXPECT_LE(max_abs_diff(big, acc), 1e-12);
}

TEST(Accumulation, SampleNormalizationDividesBySampleCount) {
    ParamSet<double> p;
    p.emplace("w", Tensor<double>::scalar(1.0, true));
    AdamW<double> opt;
    std::vector<std::function<MicroLoss<double>()>> micro;
    for (int i = 0; i < 3; ++i)
        micro.push_back([&] { return MicroLoss<double>{scale(p.at("w"), 2.0), 5.0, 1.0}; });
    auto r = accumulated_step(micro, p, opt, 0.0, Normalization::global_samples);
    EXPECT_DOUBLE_EQ(r.normalizer, 3.0);
    EXPECT_DOUBLE_EQ(p.at("w").grad()[0], 2.0);
    EXPECT_DOUBLE_EQ(r.loss, 2.0);
}

TEST(Accumulation, ZeroGlobalCountIsEmptyBatchError) {
    ParamSet<double> p;
    p.emplace("w", Tensor<double>::scalar(1.0, true));
    AdamW<double> opt;
    std::vector<std::function<MicroLoss<double>()>> micro{
        [&] { return MicroLoss<double>{scale(p.at("w"), 0.0), 0.0, 1.0}; }};
    EXPECT_THROW(accumulated_step(micro, p, opt, 0.1), EmptyBatchError);
    EXPECT_THROW(accumulated_step({}, p, opt, 0.1), EmptyBatchError);
}
