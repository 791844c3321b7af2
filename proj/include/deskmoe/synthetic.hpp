// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// Deterministic toy corpora: copy, reversal, modular arithmetic with boxed
// answers, language-tagged templated QA, numbered-line retrieval, and two
// instruction-style sources (shop questions, function calls).

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <iterator>
#include <string>
#include <utility>
#include <vector>

#include "deskmoe/errors.hpp"
#include "deskmoe/freeze.hpp"
#include "deskmoe/rng.hpp"

namespace deskmoe {

struct Example {
    std::string task;
    std::string prompt;
    std::string response;
    std::string truth;     // ground truth for verifiable tasks, else empty
    std::string language;  // tag for multilingual items, else "en"
};

struct SyntheticOptions {
    std::size_t min_len = 4;   // copy and reversal string lengths
    std::size_t max_len = 12;
    std::size_t lines = 40;    // retrieval document length
    std::size_t max_operand = 100;
    std::size_t max_modulus = 20;
};

inline const std::vector<std::string>& synthetic_tasks() {
    static const std::vector<std::string> tasks{"copy",      "reversal",  "modular",      "multilingual",
                                                "retrieval", "ecommerce", "function_call"};
    return tasks;
}

namespace detail {

inline std::string random_word(Rng& rng, std::size_t lo, std::size_t hi) {
    std::string s(lo + rng.below(hi - lo + 1), 'a');
    for (auto& c : s) c = static_cast<char>('a' + rng.below(26));
    return s;
}

inline std::string two_digit(std::size_t i) { return (i < 10 ? "0" : "") + std::to_string(i); }

struct LangTable {
    std::string tag;
    std::string question;  // "{o}" marks the object
    std::vector<std::pair<std::string, std::string>> facts;
};

inline const std::vector<LangTable>& lang_tables() {
    static const std::vector<LangTable> tables{
        {"en", "What colour is the {o}?",
         {{"sky", "blue"}, {"grass", "green"}, {"snow", "white"}, {"blood", "red"}, {"coal", "black"}}},
        {"id", "Apa warna {o}?",
         {{"langit", "biru"}, {"rumput", "hijau"}, {"salju", "putih"}, {"darah", "merah"}, {"arang", "hitam"}}},
        {"ms", "Apakah warna {o}?",
         {{"langit", "biru"}, {"rumput", "hijau"}, {"salji", "putih"}, {"darah", "merah"}, {"arang", "hitam"}}},
        {"vi", "{o} m\xc3\xa0u g\xc3\xac?",
         {{"b\xe1\xba\xa7u tr\xe1\xbb\x9di", "xanh"},
          {"c\xe1\xbb\x8f", "xanh l\xc3\xa1"},
          {"tuy\xe1\xba\xbft", "tr\xe1\xba\xafng"},
          {"m\xc3\xa1u", "\xc4\x91\xe1\xbb\x8f"},
          {"than", "\xc4\x91\x65n"}}},
        {"th", "{o}\xe0\xb8\xa1\xe0\xb8\xb5\xe0\xb8\xaa\xe0\xb8\xb5\xe0\xb8\xad\xe0\xb8\xb0\xe0\xb9\x84\xe0\xb8\xa3",
         {{"\xe0\xb8\x97\xe0\xb9\x89\xe0\xb8\xad\xe0\xb8\x87\xe0\xb8\x9f\xe0\xb9\x89\xe0\xb8\xb2",
           "\xe0\xb8\x9f\xe0\xb9\x89\xe0\xb8\xb2"},
          {"\xe0\xb8\xab\xe0\xb8\x8d\xe0\xb9\x89\xe0\xb8\xb2", "\xe0\xb9\x80\xe0\xb8\x82\xe0\xb8\xb5\xe0\xb8\xa2\xe0\xb8\xa7"},
          {"\xe0\xb8\xab\xe0\xb8\xb4\xe0\xb8\xa1\xe0\xb8\xb0", "\xe0\xb8\x82\xe0\xb8\xb2\xe0\xb8\xa7"},
          {"\xe0\xb9\x80\xe0\xb8\xa5\xe0\xb8\xb7\xe0\xb8\xad\xe0\xb8\x94", "\xe0\xb9\x81\xe0\xb8\x94\xe0\xb8\x87"},
          {"\xe0\xb8\x96\xe0\xb9\x88\xe0\xb8\xb2\xe0\xb8\x99", "\xe0\xb8\x94\xe0\xb8\xb3"}}},
    };
    return tables;
}

}  // namespace detail

// "a+b mod m?" with its worked answer.
inline Example modular_example(std::size_t a, std::size_t b, std::size_t m) {
    if (m < 2) throw ConfigError("modulus must be >= 2");
    const std::size_t s = a + b, r = s % m;
    Example e;
    e.task = "modular";
    e.language = "en";
    e.prompt = std::to_string(a) + "+" + std::to_string(b) + " mod " + std::to_string(m) + "?";
    e.truth = std::to_string(r);
    e.response = "<think>" + std::to_string(a) + "+" + std::to_string(b) + "=" + std::to_string(s) + ", " +
                 std::to_string(s) + " mod " + std::to_string(m) + "=" + e.truth + "</think> \\boxed{" + e.truth + "}";
    return e;
}

inline std::vector<Example> gen_synthetic_corpus(const std::string& task, std::size_t size, std::uint64_t seed,
                                                 const SyntheticOptions& opt = {}) {
    if (opt.min_len < 1 || opt.max_len < opt.min_len) throw ConfigError("bad synthetic string lengths");
    Rng rng(seed ^ std::hash<std::string>{}(task));
    std::vector<Example> out;
    out.reserve(size);
    for (std::size_t i = 0; i < size; ++i) {
        Example e;
        e.task = task;
        e.language = "en";
        if (task == "copy" || task == "reversal") {
            const auto w = detail::random_word(rng, opt.min_len, opt.max_len);
            e.prompt = task == "copy" ? "copy " + w + " =" : "reverse " + w + " =";
            e.response = " " + (task == "copy" ? w : std::string(w.rbegin(), w.rend()));
        } else if (task == "modular") {
            const auto a = rng.below(opt.max_operand), b = rng.below(opt.max_operand);
            const auto m = 2 + rng.below(opt.max_modulus - 1);
            e = modular_example(a, b, m);
        } else if (task == "multilingual") {
            const auto& t = detail::lang_tables()[rng.below(detail::lang_tables().size())];
            const auto& [obj, colour] = t.facts[rng.below(t.facts.size())];
            std::string q = t.question;
            q.replace(q.find("{o}"), 3, obj);
            e.language = t.tag;
            e.prompt = "[" + t.tag + "] " + q;
            e.response = " " + colour;
            e.truth = colour;
        } else if (task == "retrieval") {
            if (opt.lines < 1 || opt.lines > 100) throw ConfigError("retrieval lines must be in [1, 100]");
            std::vector<std::string> words;
            for (std::size_t l = 0; l < opt.lines; ++l) {
                words.push_back(detail::random_word(rng, 3, 5));
                e.prompt += "L" + detail::two_digit(l) + " " + words.back() + "\n";
            }
            const auto pick = rng.below(opt.lines);
            e.prompt += "line L" + detail::two_digit(pick) + "?";
            e.response = " " + words[pick];
            e.truth = words[pick];
        } else if (task == "ecommerce") {
            static const char* items[] = {"kettle", "lamp", "scarf", "mug", "backpack", "charger"};
            const std::string item = items[rng.below(std::size(items))];
            const auto price = 5 + rng.below(95);
            const auto qty = 1 + rng.below(4);
            e.prompt = "[shop] " + item + " costs " + std::to_string(price) + ". total for " + std::to_string(qty) + "?";
            e.truth = std::to_string(price * qty);
            e.response = " " + e.truth;
        } else if (task == "function_call") {
            static const char* cities[] = {"hanoi", "jakarta", "bangkok", "manila", "penang"};
            static const char* tools[] = {"weather", "time", "news"};
            const std::string city = cities[rng.below(std::size(cities))];
            const std::string tool = tools[rng.below(std::size(tools))];
            e.prompt = "[tool] " + tool + " in " + city;
            e.response = " {\"call\":\"" + tool + "\",\"city\":\"" + city + "\"}";
            e.truth = tool + "(" + city + ")";
        } else {
            throw ConfigError("unknown synthetic task '" + task + "'");
        }
        out.push_back(std::move(e));
    }
    return out;
}

struct MixtureEntry {
    std::string task;
    double weight = 0;
};

// "copy:0.6, reversal:0.4"
inline std::vector<MixtureEntry> parse_mixture(const std::string& text) {
    std::vector<MixtureEntry> out;
    for (const auto& part : detail::split(text, ',')) {
        if (part.empty()) continue;
        const auto colon = part.find(':');
        MixtureEntry m;
        m.task = detail::trim(part.substr(0, colon));
        try {
            m.weight = colon == std::string::npos ? 1.0 : std::stod(part.substr(colon + 1));
        } catch (const std::exception&) {
            throw ConfigError("bad mixture weight in '" + part + "'");
        }
        if (!(m.weight >= 0)) throw ConfigError("negative mixture weight in '" + part + "'");
        bool known = false;
        for (const auto& t : synthetic_tasks()) known = known || t == m.task;
        if (!known) throw ConfigError("unknown synthetic task '" + m.task + "'");
        out.push_back(m);
    }
    if (out.empty()) throw ConfigError("empty data mixture");
    return out;
}

// Draws `size` examples split across sources by weight (largest remainder),
// then interleaves them with a seeded shuffle. Modular (long-CoT style) items
// are kept with probability `longcot_keep`.
inline std::vector<Example> build_mixture(const std::vector<MixtureEntry>& mix, std::size_t size, std::uint64_t seed,
                                          const SyntheticOptions& opt = {}, double longcot_keep = 1.0) {
    double total = 0;
    for (const auto& m : mix) total += m.weight;
    if (!(total > 0)) throw ConfigError("mixture weights sum to zero");
    std::vector<std::size_t> counts(mix.size());
    std::vector<std::pair<double, std::size_t>> rem;
    std::size_t given = 0;
    for (std::size_t i = 0; i < mix.size(); ++i) {
        const double exact = static_cast<double>(size) * mix[i].weight / total;
        counts[i] = static_cast<std::size_t>(exact);
        given += counts[i];
        rem.emplace_back(exact - static_cast<double>(counts[i]), i);
    }
    std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    for (std::size_t i = 0; given < size; ++i, ++given) ++counts[rem[i % rem.size()].second];

    Rng rng(seed);
    std::vector<Example> out;
    for (std::size_t i = 0; i < mix.size(); ++i) {
        for (auto& e : gen_synthetic_corpus(mix[i].task, counts[i], seed + 7919 * (i + 1), opt)) {
            if (e.task == "modular" && longcot_keep < 1.0 && rng.uniform() >= longcot_keep) continue;
            out.push_back(std::move(e));
        }
    }
    for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng.below(i)]);
    return out;
}

}  // namespace deskmoe
