// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "deskmoe/alignment.hpp"
#include "deskmoe/optim.hpp"
#include "support/gradcheck.hpp"

using namespace deskmoe;
using deskmoe::testing::gradcheck;

namespace {

Tensor<double> vec(std::vector<double> v, bool grad = false) {
    const std::size_t n = v.size();
    return Tensor<double>({n}, std::move(v), grad);
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

Checkpoint filled(const Checkpoint& like, double v) {
    Checkpoint c = like;
    for (auto& [_, a] : c.params) std::fill(a.values.begin(), a.values.end(), v);
    return c;
}

}  // namespace

TEST(Template, LongCotCarriesInstruction) {
    const auto p = render_template(ChatMode::longcot, "How many r in word strawberry?");
    EXPECT_EQ(p,
              "<System>: Let's think step by step. Please ensure that the reasoning process are enclosed within "
              "<think> </think> tags, i.e., <think> reasoning process here </think>. And put your final answer "
              "within \\boxed{}.\n<Human>: How many r in word strawberry?\n<AI>: ");
}

TEST(Template, GeneralHasNoSystemTurn) {
    const auto p = render_template(ChatMode::general, "hi");
    EXPECT_EQ(p, "<Human>: hi\n<AI>: ");
    EXPECT_EQ(p.find("<System>"), std::string::npos);
}

TEST(Template, InjectiveAndRejectsEmpty) {
    EXPECT_NE(render_template(ChatMode::general, "a"), render_template(ChatMode::general, "b"));
    EXPECT_NE(render_template(ChatMode::longcot, "a"), render_template(ChatMode::longcot, "a "));
    EXPECT_THROW(render_template(ChatMode::general, ""), InputError);
}

TEST(Think, SplitsBlock) {
    auto s = parse_think("<think>abc</think>xyz");
    ASSERT_TRUE(s.thought);
    EXPECT_EQ(*s.thought, "abc");
    EXPECT_EQ(s.answer, "xyz");
}

TEST(Think, PlainAnswer) {
    auto s = parse_think("plain answer");
    EXPECT_FALSE(s.thought);
    EXPECT_EQ(s.answer, "plain answer");
}

TEST(Think, MalformedResponses) {
    EXPECT_THROW(parse_think("<think>abc"), MalformedResponse);
    EXPECT_THROW(parse_think("abc</think>"), MalformedResponse);
    EXPECT_THROW(parse_think("</think><think>"), MalformedResponse);
    EXPECT_THROW(parse_think("<think>a<think>b</think></think>"), MalformedResponse);
    EXPECT_THROW(parse_think("<think>a</think>b<think>c</think>"), MalformedResponse);
}

TEST(Think, RoundTripIsByteExact) {
    Rng rng(1);
    const std::string alphabet = "ab <>/\n\\{}th";
    for (int i = 0; i < 500; ++i) {
        std::string t, a;
        for (std::size_t k = rng.below(20); k > 0; --k) t += alphabet[rng.below(alphabet.size())];
        for (std::size_t k = rng.below(20); k > 0; --k) a += alphabet[rng.below(alphabet.size())];
        if (t.find("<think>") != std::string::npos || t.find("</think>") != std::string::npos) continue;
        if (a.find("<think>") != std::string::npos || a.find("</think>") != std::string::npos) continue;
        auto s = parse_think(wrap_think(t, a));
        ASSERT_TRUE(s.thought);
        EXPECT_EQ(*s.thought, t);
        EXPECT_EQ(s.answer, a);
    }
}

TEST(Verify, BoxedMatches) {
    EXPECT_TRUE(verify_boxed_answer("Thus, there are \\boxed{3} 'r's in \"strawberry\".", "3").correct);
    auto v = verify_boxed_answer("so \\boxed{ 3 }", "3");
    EXPECT_TRUE(v.correct);
    EXPECT_EQ(v.reason, "match");
}

TEST(Verify, LastBoxWins) {
    EXPECT_TRUE(verify_boxed_answer("\\boxed{4} no wait \\boxed{5}", "5").correct);
    EXPECT_FALSE(verify_boxed_answer("\\boxed{5} no wait \\boxed{4}", "5").correct);
}

TEST(Verify, WrappersAndNumbers) {
    EXPECT_TRUE(verify_boxed_answer("\\boxed{\\text{ 12 }}", "12").correct);
    EXPECT_TRUE(verify_boxed_answer("\\boxed{{x+1}}", "$x + 1$").correct == false);
    EXPECT_TRUE(verify_boxed_answer("\\boxed{{x+1}}", "$x+1$").correct);
    auto n = verify_boxed_answer("\\boxed{0.50}", "0.5");
    EXPECT_TRUE(n.correct);
    EXPECT_EQ(n.reason, "numeric_match");
    EXPECT_TRUE(verify_boxed_answer("\\boxed{\\frac{1}{2}}", "\\frac{1}{2}").correct);
}

TEST(Verify, UnparsedAndMismatch) {
    auto u = verify_boxed_answer("the answer is 3", "3");
    EXPECT_FALSE(u.correct);
    EXPECT_EQ(u.reason, "unparsed");
    EXPECT_EQ(verify_boxed_answer("\\boxed{3", "3").reason, "unparsed");
    EXPECT_EQ(verify_boxed_answer("\\boxed{4}", "3").reason, "mismatch");
    EXPECT_THROW(verify_boxed_answer("\\boxed{4}", "  "), InputError);
}

TEST(Pairs, MathRuleHandTrace) {
    const std::vector<bool> verdicts{true, false, false, true};
    auto s = select_pair({0.2, 0.9, 0.5, 0.4}, &verdicts, PreferenceKind::math);
    ASSERT_TRUE(s.indices);
    EXPECT_EQ(s.indices->first, 3u);
    EXPECT_EQ(s.indices->second, 1u);
}

TEST(Pairs, MathDiscards) {
    const std::vector<bool> none{false, false, false}, all{true, true, true};
    auto a = select_pair({0.1, 0.2, 0.3}, &none, PreferenceKind::math);
    EXPECT_FALSE(a.indices);
    EXPECT_EQ(a.reason, "all_incorrect");
    auto b = select_pair({0.1, 0.2, 0.3}, &all, PreferenceKind::math);
    EXPECT_FALSE(b.indices);
    EXPECT_EQ(b.reason, "no_incorrect");
}

TEST(Pairs, GeneralRule) {
    auto s = select_pair({0.8, 0.3}, nullptr, PreferenceKind::general);
    ASSERT_TRUE(s.indices);
    EXPECT_EQ(*s.indices, (std::pair<std::size_t, std::size_t>{0, 1}));
    EXPECT_EQ(select_pair({0.8, 0.3}, nullptr, PreferenceKind::general, 0.6).reason, "below_margin");
    EXPECT_EQ(select_pair({0.5, 0.5}, nullptr, PreferenceKind::general).reason, "no_contrast");
    EXPECT_THROW(select_pair({0.5}, nullptr, PreferenceKind::general), ConfigError);
}

TEST(Pairs, BuiltPairsAreVerified) {
    SeededScorer scorer{7};
    Rng rng(2);
    int emitted = 0;
    for (int p = 0; p < 100; ++p) {
        const std::string truth = std::to_string(rng.below(10));
        std::vector<std::string> cands;
        for (int c = 0; c < 8; ++c) cands.push_back("work " + std::to_string(c) + " \\boxed{" +
                                                    std::to_string(rng.below(4) ? rng.below(10) : 99) + "}");
        auto out = build_preference_pair("q" + std::to_string(p), cands, scorer, PreferenceKind::math, truth);
        if (!out.pair) {
            EXPECT_FALSE(out.discard_reason.empty());
            continue;
        }
        ++emitted;
        EXPECT_TRUE(verify_boxed_answer(out.pair->chosen, truth).correct);
        EXPECT_FALSE(verify_boxed_answer(out.pair->rejected, truth).correct);
    }
    EXPECT_GT(emitted, 0);
    EXPECT_THROW(build_preference_pair("q", {"a", "b"}, scorer, PreferenceKind::math), ConfigError);
}

TEST(Scorer, Deterministic) {
    SeededScorer a{3}, b{3}, c{4};
    EXPECT_EQ(a("p", "r"), b("p", "r"));
    EXPECT_NE(a("p", "r"), c("p", "r"));
    EXPECT_NE(a("p", "r"), a("pr", ""));
}

TEST(Dpo, PolicyEqualsReference) {
    auto l = dpo_loss(vec({-3.0, -7.5}), vec({-4.0, -1.0}), {-3.0, -7.5}, {-4.0, -1.0}, 0.1);
    EXPECT_NEAR(l.item(), std::log(2.0), 1e-12);
}

TEST(Dpo, ClosedForm) {
    auto l = dpo_loss(vec({1.0}), vec({-1.0}), {0.0}, {0.0}, 0.1);
    EXPECT_NEAR(l.item(), -std::log(1.0 / (1.0 + std::exp(-0.2))), 1e-12);
    EXPECT_NEAR(l.item(), 0.598139, 1e-6);
}

TEST(Dpo, ShiftInvariance) {
    Rng rng(3);
    for (int t = 0; t < 20; ++t) {
        std::vector<double> pc(4), pr(4), rc(4), rr(4);
        for (std::size_t i = 0; i < 4; ++i) {
            pc[i] = rng.uniform(-20, 0);
            pr[i] = rng.uniform(-20, 0);
            rc[i] = rng.uniform(-20, 0);
            rr[i] = rng.uniform(-20, 0);
        }
        const double base = dpo_loss(vec(pc), vec(pr), rc, rr, 0.3).item();
        auto pc2 = pc, rc2 = rc, pr2 = pr, rr2 = rr;
        for (std::size_t i = 0; i < 4; ++i) {
            const double a = rng.uniform(-5, 5), b = rng.uniform(-5, 5);
            pc2[i] += a;
            rc2[i] += a;
            pr2[i] += b;
            rr2[i] += b;
        }
        EXPECT_NEAR(dpo_loss(vec(pc2), vec(pr2), rc2, rr2, 0.3).item(), base, 1e-12);
    }
}

TEST(Dpo, GradientSigns) {
    Rng rng(4);
    for (int t = 0; t < 50; ++t) {
        auto pc = vec({rng.uniform(-30, 0)}, true), pr = vec({rng.uniform(-30, 0)}, true);
        pc.ensure_grad();
        pr.ensure_grad();
        Tape tape;
        TapeScope scope(tape);
        auto l = dpo_loss(pc, pr, {rng.uniform(-30, 0)}, {rng.uniform(-30, 0)}, rng.uniform(0.01, 2.0));
        tape.backward(l);
        EXPECT_LT(pc.grad()[0], 0.0);
        EXPECT_GT(pr.grad()[0], 0.0);
    }
}

TEST(Dpo, Gradcheck) {
    auto pc = vec({-2.0, -5.0, -1.5}), pr = vec({-3.0, -0.5, -4.0});
    auto r = gradcheck([&] { return dpo_loss(pc, pr, {-2.5, -4.0, -1.0}, {-2.0, -1.0, -3.0}, 0.7); }, {pc, pr});
    EXPECT_LE(r.max_rel_err, 1e-5) << r.worst;
}

TEST(Dpo, Errors) {
    EXPECT_THROW(dpo_loss(vec({0.0}), vec({0.0}), {0.0}, {0.0}, 0.0), ConfigError);
    EXPECT_THROW(dpo_loss(vec({NAN}), vec({0.0}), {0.0}, {0.0}, 0.1), NumericError);
    EXPECT_THROW(dpo_loss(vec({0.0}), vec({0.0}), {INFINITY}, {0.0}, 0.1), NumericError);
}

TEST(Dpo, OneStepWidensMargin) {
    auto cfg = tiny_config();
    auto params = init_params<double>(cfg, 5);
    const std::vector<std::int32_t> prompt{1, 2, 3}, chosen{4, 5}, rejected{6, 7};
    auto margin = [&] {
        NoGradScope ng;
        return sequence_logprob(prompt, chosen, cfg, params).item() -
               sequence_logprob(prompt, rejected, cfg, params).item();
    };
    const double ref_c = [&] { NoGradScope ng; return sequence_logprob(prompt, chosen, cfg, params).item(); }();
    const double ref_r = [&] { NoGradScope ng; return sequence_logprob(prompt, rejected, cfg, params).item(); }();
    const double before = margin();
    AdamW<double> opt(AdamWConfig{0.9, 0.95, 1e-8, 0.0, 1.0});
    zero_grads(params);
    {
        Tape tape;
        TapeScope scope(tape);
        auto c = stack<double>({sequence_logprob(prompt, chosen, cfg, params)});
        auto r = stack<double>({sequence_logprob(prompt, rejected, cfg, params)});
        tape.backward(dpo_loss(c, r, {ref_c}, {ref_r}, 0.1));
    }
    opt.step(params, 1e-3);
    EXPECT_GT(margin(), before);
}

TEST(Dpo, SequenceLogprobMatchesSoftmax) {
    auto cfg = tiny_config();
    auto params = init_params<double>(cfg, 6);
    const std::vector<std::int32_t> prompt{3, 1}, response{9, 2, 5};
    double expect = 0;
    {
        std::vector<std::int32_t> input{3, 1, 9, 2};
        auto out = decoder_forward(std::span<const std::int32_t>(input), cfg, params);
        for (std::size_t t = 1; t < 4; ++t) {
            double z = 0;
            for (std::size_t v = 0; v < cfg.vocab_size; ++v) z += std::exp(out.logits[t * cfg.vocab_size + v]);
            expect += out.logits[t * cfg.vocab_size + static_cast<std::size_t>(response[t - 1])] - std::log(z);
        }
    }
    EXPECT_NEAR(sequence_logprob(prompt, response, cfg, params).item(), expect, 1e-10);
}

TEST(Soup, IdenticalZerosAndTwos) {
    auto cfg = tiny_config();
    auto base = make_checkpoint(cfg, init_params<double>(cfg, 7));
    auto same = soup_average({base, base, base});
    EXPECT_EQ(same.params.size(), base.params.size());
    for (const auto& [name, a] : base.params) EXPECT_EQ(same.params.at(name).values, a.values);
    auto ones = soup_average({filled(base, 0.0), filled(base, 2.0)});
    for (const auto& [name, a] : ones.params)
        for (double v : a.values) EXPECT_EQ(v, 1.0);
}

TEST(Soup, PermutationInvariant) {
    auto cfg = tiny_config();
    std::vector<Checkpoint> cks;
    for (std::uint64_t s = 0; s < 4; ++s) cks.push_back(make_checkpoint(cfg, init_params<double>(cfg, 10 + s)));
    auto a = soup_average(cks);
    std::swap(cks[0], cks[3]);
    std::swap(cks[1], cks[2]);
    auto b = soup_average(cks);
    for (const auto& [name, arr] : a.params) EXPECT_EQ(arr.values, b.params.at(name).values);
}

TEST(Soup, MismatchIsCheckpointError) {
    auto cfg = tiny_config();
    auto base = make_checkpoint(cfg, init_params<double>(cfg, 8));
    auto bad = base;
    bad.params.begin()->second.shape = {1};
    EXPECT_THROW(soup_average({base, bad}), CheckpointError);
    auto missing = base;
    missing.params.erase(missing.params.begin());
    EXPECT_THROW(soup_average({base, missing}), CheckpointError);
    EXPECT_THROW(soup_average({}), CheckpointError);
}

TEST(PreferenceFile, RoundTrip) {
    SeededScorer scorer{1};
    auto out = build_preference_pair("q", {"\\boxed{1}", "\\boxed{2}", "\\boxed{1} again"}, scorer,
                                     PreferenceKind::math, std::string("1"));
    ASSERT_TRUE(out.pair);
    std::vector<PreferencePair> pairs{*out.pair};
    auto g = build_preference_pair("hello", {"hi there", "go away"}, scorer, PreferenceKind::general);
    if (g.pair) pairs.push_back(*g.pair);
    std::stringstream buf;
    write_preferences(buf, pairs);
    EXPECT_EQ(read_preferences(buf), pairs);
    std::istringstream bad("{\"prompt\": 1}\n");
    EXPECT_THROW(read_preferences(bad), FormatError);
}
