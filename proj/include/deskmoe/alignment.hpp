// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// Chat templates, <think> parsing, boxed-answer verification, Best-of-N
// preference pairs, the DPO loss and checkpoint weight averaging.

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "deskmoe/checkpoint.hpp"
#include "deskmoe/model.hpp"
#include "deskmoe/ops.hpp"

namespace deskmoe {

enum class ChatMode { longcot, general };

inline ChatMode parse_chat_mode(const std::string& s) {
    if (s == "longcot") return ChatMode::longcot;
    if (s == "general") return ChatMode::general;
    throw ConfigError("unknown chat mode '" + s + "'");
}

inline constexpr std::string_view kLongCotSystem =
    "Let's think step by step. Please ensure that the reasoning process are enclosed within <think> </think> "
    "tags, i.e., <think> reasoning process here </think>. And put your final answer within \\boxed{}.";

inline std::string render_template(ChatMode mode, std::string_view query) {
    if (query.empty()) throw InputError("render_template: empty query");
    std::string out;
    if (mode == ChatMode::longcot) {
        out += "<System>: ";
        out += kLongCotSystem;
        out += '\n';
    }
    out += "<Human>: ";
    out += query;
    out += "\n<AI>: ";
    return out;
}

inline constexpr std::string_view kThinkOpen = "<think>";
inline constexpr std::string_view kThinkClose = "</think>";

inline std::string wrap_think(std::string_view thought, std::string_view answer) {
    std::string out(kThinkOpen);
    out += thought;
    out += kThinkClose;
    out += answer;
    return out;
}

struct ThinkSplit {
    std::optional<std::string> thought;
    std::string answer;
};

// The answer is everything outside the block. Any tag that does not belong
// to a single well-formed block makes the response malformed.
inline ThinkSplit parse_think(std::string_view response) {
    const auto open = response.find(kThinkOpen);
    const auto close = response.find(kThinkClose);
    if (open == std::string_view::npos && close == std::string_view::npos) return {std::nullopt, std::string(response)};
    if (open == std::string_view::npos) throw MalformedResponse("closing </think> without an opening tag");
    if (close == std::string_view::npos) throw MalformedResponse("unclosed <think> block");
    if (close < open) throw MalformedResponse("</think> before <think>");
    const auto body_start = open + kThinkOpen.size();
    const auto thought = response.substr(body_start, close - body_start);
    if (thought.find(kThinkOpen) != std::string_view::npos) throw MalformedResponse("nested <think> block");
    std::string answer(response.substr(0, open));
    answer += response.substr(close + kThinkClose.size());
    if (answer.find(kThinkOpen) != std::string::npos || answer.find(kThinkClose) != std::string::npos) {
        throw MalformedResponse("more than one <think> block");
    }
    return {std::string(thought), std::move(answer)};
}

struct Verdict {
    bool correct = false;
    std::string reason;     // match, numeric_match, mismatch, unparsed
    std::string extracted;  // normalized boxed content
};

namespace detail {

inline std::string collapse_ws(std::string_view s) {
    std::string out;
    bool gap = false;
    for (unsigned char c : s) {
        if (std::isspace(c)) {
            gap = !out.empty();
            continue;
        }
        if (gap) out += ' ';
        gap = false;
        out += static_cast<char>(c);
    }
    return out;
}

// Index of the brace closing the one at `open`, or npos.
inline std::size_t matching_brace(std::string_view s, std::size_t open) {
    int depth = 0;
    for (std::size_t i = open; i < s.size(); ++i) {
        if (s[i] == '{') ++depth;
        if (s[i] == '}' && --depth == 0) return i;
    }
    return std::string_view::npos;
}

inline bool wrapped_whole(const std::string& s, std::string_view head) {
    return s.size() > head.size() && s.compare(0, head.size(), head) == 0 && s.back() == '}' &&
           matching_brace(s, head.size() - 1) == s.size() - 1;
}

inline std::optional<double> parse_number(const std::string& s) {
    if (s.empty()) return std::nullopt;
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size() || !std::isfinite(v)) return std::nullopt;
    return v;
}

}  // namespace detail

// Trim, collapse whitespace, and peel $...$, {...}, \text{...} style
// wrappers and a trailing period until nothing changes.
inline std::string normalize_answer(std::string_view raw) {
    std::string s = detail::collapse_ws(raw);
    for (bool changed = true; changed;) {
        changed = false;
        if (s.size() >= 2 && s.front() == '$' && s.back() == '$') {
            s = detail::collapse_ws(s.substr(1, s.size() - 2));
            changed = true;
            continue;
        }
        for (std::string_view head : {"{", "\\text{", "\\textbf{", "\\mathrm{", "\\mathbf{", "\\boxed{"}) {
            if (detail::wrapped_whole(s, head)) {
                s = detail::collapse_ws(s.substr(head.size(), s.size() - head.size() - 1));
                changed = true;
                break;
            }
        }
        if (!changed && !s.empty() && s.back() == '.') {
            s.pop_back();
            s = detail::collapse_ws(s);
            changed = true;
        }
    }
    return s;
}

// Content of the last \boxed{...}, or nullopt if there is none or its
// braces never close.
inline std::optional<std::string> last_boxed(std::string_view response) {
    constexpr std::string_view tag = "\\boxed{";
    const auto at = response.rfind(tag);
    if (at == std::string_view::npos) return std::nullopt;
    const auto open = at + tag.size() - 1;
    const auto close = detail::matching_brace(response, open);
    if (close == std::string_view::npos) return std::nullopt;
    return std::string(response.substr(open + 1, close - open - 1));
}

inline Verdict verify_boxed_answer(std::string_view response, std::string_view truth) {
    const auto want = normalize_answer(truth);
    if (want.empty()) throw InputError("verify_boxed_answer: empty ground truth");
    auto boxed = last_boxed(response);
    if (!boxed) return {false, "unparsed", ""};
    Verdict v;
    v.extracted = normalize_answer(*boxed);
    if (v.extracted == want) {
        v.correct = true;
        v.reason = "match";
        return v;
    }
    const auto a = detail::parse_number(v.extracted), b = detail::parse_number(want);
    if (a && b && std::abs(*a - *b) <= 1e-9) {
        v.correct = true;
        v.reason = "numeric_match";
        return v;
    }
    v.reason = "mismatch";
    return v;
}

using RewardScorer = std::function<double(const std::string& prompt, const std::string& response)>;

// Deterministic stand-in for a reward model: a hash of (seed, prompt,
// response) mapped to [0, 1).
struct SeededScorer {
    std::uint64_t seed = 0;
    double operator()(const std::string& prompt, const std::string& response) const {
        std::uint64_t h = 1469598103934665603ULL ^ (seed * 0x9E3779B97F4A7C15ULL);
        auto mix = [&h](const std::string& s) {
            for (unsigned char c : s) {
                h ^= c;
                h *= 1099511628211ULL;
            }
            h ^= 0xff;
            h *= 1099511628211ULL;
        };
        mix(prompt);
        mix(response);
        h ^= h >> 33;
        h *= 0xff51afd7ed558ccdULL;
        h ^= h >> 33;
        return static_cast<double>(h >> 11) * 0x1.0p-53;
    }
};

enum class PreferenceKind { general, math };

inline std::string to_string(PreferenceKind k) { return k == PreferenceKind::math ? "math" : "general"; }

inline PreferenceKind parse_preference_kind(const std::string& s) {
    if (s == "math") return PreferenceKind::math;
    if (s == "general") return PreferenceKind::general;
    throw FormatError("unknown preference kind '" + s + "'");
}

struct PreferencePair {
    std::string prompt;
    std::string chosen;
    std::string rejected;
    double chosen_reward = 0;
    double rejected_reward = 0;
    PreferenceKind kind = PreferenceKind::general;
    std::size_t chosen_index = 0;
    std::size_t rejected_index = 0;
    std::vector<bool> verdicts;  // math only
    std::string reason;          // selection rule that produced the pair

    bool operator==(const PreferencePair&) const = default;
};

struct PairSelection {
    std::optional<std::pair<std::size_t, std::size_t>> indices;  // chosen, rejected
    std::string reason;  // rule on success, discard code otherwise
};

// Math: top reward among verified-correct vs top reward among incorrect.
// General: max vs min reward, kept when the gap reaches `margin`. Reward
// ties go to the lower index.
inline PairSelection select_pair(const std::vector<double>& rewards, const std::vector<bool>* verdicts,
                                 PreferenceKind kind, double margin = 0.0) {
    if (rewards.size() < 2) throw ConfigError(detail::cat("need at least 2 candidates, got ", rewards.size()));
    auto best_of = [&](auto keep, bool want_max) {
        std::optional<std::size_t> best;
        for (std::size_t i = 0; i < rewards.size(); ++i) {
            if (!keep(i)) continue;
            if (!best || (want_max ? rewards[i] > rewards[*best] : rewards[i] < rewards[*best])) best = i;
        }
        return best;
    };
    if (kind == PreferenceKind::math) {
        if (!verdicts || verdicts->size() != rewards.size()) {
            throw ConfigError("math preference pairs need one verdict per candidate");
        }
        const auto& v = *verdicts;
        auto chosen = best_of([&](std::size_t i) { return bool(v[i]); }, true);
        if (!chosen) return {std::nullopt, "all_incorrect"};
        auto rejected = best_of([&](std::size_t i) { return !v[i]; }, true);
        if (!rejected) return {std::nullopt, "no_incorrect"};
        return {std::make_pair(*chosen, *rejected), "top_correct_vs_top_incorrect"};
    }
    auto all = [](std::size_t) { return true; };
    const auto hi = *best_of(all, true), lo = *best_of(all, false);
    if (rewards[hi] == rewards[lo]) return {std::nullopt, "no_contrast"};
    if (rewards[hi] - rewards[lo] < margin) return {std::nullopt, "below_margin"};
    return {std::make_pair(hi, lo), "max_vs_min_reward"};
}

struct PairOutcome {
    std::optional<PreferencePair> pair;
    std::string discard_reason;
};

inline PairOutcome build_preference_pair(const std::string& prompt, const std::vector<std::string>& candidates,
                                         const RewardScorer& scorer, PreferenceKind kind,
                                         const std::optional<std::string>& truth = std::nullopt, double margin = 0.0) {
    if (candidates.size() < 2) throw ConfigError(detail::cat("need at least 2 candidates, got ", candidates.size()));
    if (kind == PreferenceKind::math && !truth) throw ConfigError("math preference pairs need a ground truth");
    std::vector<double> rewards;
    for (const auto& c : candidates) rewards.push_back(scorer(prompt, c));
    std::vector<bool> verdicts;
    if (kind == PreferenceKind::math)
        for (const auto& c : candidates) verdicts.push_back(verify_boxed_answer(c, *truth).correct);
    auto sel = select_pair(rewards, kind == PreferenceKind::math ? &verdicts : nullptr, kind, margin);
    if (!sel.indices) return {std::nullopt, sel.reason};
    const auto [c, r] = *sel.indices;
    PreferencePair p{prompt, candidates[c], candidates[r], rewards[c], rewards[r], kind, c, r, verdicts, sel.reason};
    return {std::move(p), ""};
}

// -log sigmoid(beta * ((pi_c - ref_c) - (pi_r - ref_r))), averaged over the
// batch. Gradients reach the policy terms only.
template <typename T>
Tensor<T> dpo_loss(const Tensor<T>& chosen_logps, const Tensor<T>& rejected_logps,
                   const std::vector<double>& ref_chosen, const std::vector<double>& ref_rejected, double beta) {
    if (!(beta > 0) || !std::isfinite(beta)) throw ConfigError(detail::cat("dpo beta must be positive, got ", beta));
    detail::require_same_shape(chosen_logps, rejected_logps, "dpo_loss");
    const std::size_t n = chosen_logps.numel();
    if (n == 0) throw EmptyBatchError("dpo_loss: empty batch");
    if (ref_chosen.size() != n || ref_rejected.size() != n) {
        throw DimensionError("dpo_loss: reference log-probs must match the batch");
    }
    std::vector<T> ref(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double parts[] = {static_cast<double>(chosen_logps[i]), static_cast<double>(rejected_logps[i]),
                                ref_chosen[i], ref_rejected[i]};
        for (double x : parts)
            if (!std::isfinite(x)) throw NumericError(detail::cat("dpo_loss: non-finite log-prob in pair ", i));
        ref[i] = static_cast<T>(ref_rejected[i] - ref_chosen[i]);
    }
    auto margin = add(sub(chosen_logps, rejected_logps), Tensor<T>(chosen_logps.shape(), std::move(ref)));
    return neg(mean(log_sigmoid(scale(margin, static_cast<T>(beta)))));
}

// Summed log-probability of `response` given `prompt` under the model.
template <typename T>
Tensor<T> sequence_logprob(const std::vector<std::int32_t>& prompt, const std::vector<std::int32_t>& response,
                           const ModelConfig& cfg, const ParamSet<T>& params) {
    if (prompt.empty() || response.empty()) throw InputError("sequence_logprob: prompt and response must be nonempty");
    std::vector<std::int32_t> all(prompt);
    all.insert(all.end(), response.begin(), response.end());
    std::vector<std::int32_t> input(all.begin(), all.end() - 1), target(all.begin() + 1, all.end());
    std::vector<double> w(input.size(), 0.0);
    std::fill(w.begin() + static_cast<std::ptrdiff_t>(prompt.size() - 1), w.end(), 1.0);
    auto out = decoder_forward(std::span<const std::int32_t>(input), cfg, params);
    return neg(lm_cross_entropy(out.logits, target, w)->sum);
}

// Elementwise mean of checkpoints with identical parameter names and shapes.
// Each element is averaged over its sorted values, so input order does not
// change a single bit.
inline Checkpoint soup_average(const std::vector<Checkpoint>& cks) {
    if (cks.empty()) throw CheckpointError("soup_average: no checkpoints");
    const auto& first = cks.front();
    for (std::size_t k = 1; k < cks.size(); ++k) {
        if (cks[k].params.size() != first.params.size()) {
            throw CheckpointError(detail::cat("checkpoint ", k, " has a different parameter count"));
        }
        for (const auto& [name, a] : first.params) {
            auto it = cks[k].params.find(name);
            if (it == cks[k].params.end()) throw CheckpointError(detail::cat("checkpoint ", k, " lacks ", name));
            if (it->second.shape != a.shape) throw CheckpointError(detail::cat("checkpoint ", k, ": shape of ", name));
        }
    }
    Checkpoint out;
    out.config = first.config;
    std::vector<double> vals(cks.size());
    for (const auto& [name, a] : first.params) {
        ParamArray avg{a.shape, std::vector<double>(a.values.size())};
        for (std::size_t i = 0; i < a.values.size(); ++i) {
            for (std::size_t k = 0; k < cks.size(); ++k) vals[k] = cks[k].params.at(name).values[i];
            std::sort(vals.begin(), vals.end());
            double delta = 0;
            for (double v : vals) delta += v - vals.front();
            avg.values[i] = vals.front() + delta / static_cast<double>(vals.size());
        }
        out.params.emplace(name, std::move(avg));
    }
    return out;
}

inline nlohmann::json to_json(const PreferencePair& p) {
    return {{"prompt", p.prompt},
            {"chosen", p.chosen},
            {"rejected", p.rejected},
            {"chosen_reward", p.chosen_reward},
            {"rejected_reward", p.rejected_reward},
            {"kind", to_string(p.kind)},
            {"chosen_index", p.chosen_index},
            {"rejected_index", p.rejected_index},
            {"verdicts", p.verdicts},
            {"reason", p.reason}};
}

inline void write_preferences(std::ostream& out, const std::vector<PreferencePair>& pairs) {
    for (const auto& p : pairs) out << to_json(p).dump() << '\n';
}

inline std::vector<PreferencePair> read_preferences(std::istream& in) {
    std::vector<PreferencePair> out;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            auto j = nlohmann::json::parse(line);
            PreferencePair p;
            p.prompt = j.at("prompt").get<std::string>();
            p.chosen = j.at("chosen").get<std::string>();
            p.rejected = j.at("rejected").get<std::string>();
            p.chosen_reward = j.at("chosen_reward").get<double>();
            p.rejected_reward = j.at("rejected_reward").get<double>();
            p.kind = parse_preference_kind(j.at("kind").get<std::string>());
            p.chosen_index = j.value("chosen_index", std::size_t{0});
            p.rejected_index = j.value("rejected_index", std::size_t{0});
            p.verdicts = j.value("verdicts", std::vector<bool>{});
            p.reason = j.value("reason", "");
            out.push_back(std::move(p));
        } catch (const nlohmann::json::exception& e) {
            throw FormatError(detail::cat("preference line ", n, ": ", e.what()));
        }
    }
    return out;
}

}  // namespace deskmoe
