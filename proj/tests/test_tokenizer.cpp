// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "deskmoe/rng.hpp"
#include "deskmoe/tokenizer.hpp"

using namespace deskmoe;
using namespace std::string_literals;

namespace {

std::string random_bytes(Rng& rng, std::size_t max_len) {
    std::string s(rng.below(max_len + 1), '\0');
    for (auto& c : s) c = static_cast<char>(rng.below(256));
    return s;
}

std::vector<std::string> word_corpus(Rng& rng, const std::vector<std::string>& words, std::size_t docs) {
    std::vector<std::string> out;
    for (std::size_t d = 0; d < docs; ++d) {
        std::string doc;
        const std::size_t n = 3 + rng.below(10);
        for (std::size_t i = 0; i < n; ++i) {
            if (i) doc += ' ';
            doc += words[rng.below(words.size())];
        }
        out.push_back(doc);
    }
    return out;
}

std::size_t total_tokens(const std::vector<std::string>& docs, const SubwordVocab& v) {
    std::size_t n = 0;
    for (const auto& d : docs) n += encode(d, v).size();
    return n;
}

// Two-byte pieces "xy" drawn from a fixed pool, for engineered overlaps.
SubwordVocab pair_vocab(std::size_t from, std::size_t to) {
    SubwordVocab v;
    for (std::size_t i = from; i < to; ++i) {
        const std::string a(1, static_cast<char>('A' + i / 26)), b(1, static_cast<char>('a' + i % 26));
        v.add_merge(a, b);
    }
    return v;
}

}  // namespace

TEST(Bpe, SingleRepeatedByte) {
    auto v = train_bpe({"aaaa"}, 257);
    ASSERT_EQ(v.merges().size(), 1u);
    EXPECT_EQ(v.merges()[0], (MergeRule{"a", "a"}));
    EXPECT_EQ(v.size(), 257u);
    EXPECT_EQ(v.piece(256), "aa");
}

TEST(Bpe, LearnsAbThenAbab) {
    auto v = train_bpe({"abab abab"}, 259);
    ASSERT_GE(v.merges().size(), 2u);
    EXPECT_EQ(v.merges()[0], (MergeRule{"a", "b"}));
    EXPECT_EQ(v.merges()[1], (MergeRule{"ab", "ab"}));
    auto ids = encode("abab", v);
    ASSERT_EQ(ids.size(), 1u);
    EXPECT_EQ(v.piece(ids[0]), "abab");
}

TEST(Bpe, LengthCapBlocksLongPieces) {
    auto v = train_bpe({"abab abab"}, 300, 2);
    EXPECT_FALSE(v.id_of("abab").has_value());
    for (const auto& p : v.pieces()) EXPECT_LE(p.size(), 2u);
}

TEST(Bpe, PieceLengthNeverExceedsCap) {
    Rng rng(1);
    auto corpus = word_corpus(rng, {"mississippi", "banana", "abracadabra", "tatatatatata"}, 50);
    for (std::size_t cap : {1u, 3u, 5u, 16u}) {
        auto v = train_bpe(corpus, 400, cap);
        for (const auto& p : v.pieces()) EXPECT_LE(p.size(), cap);
    }
}

TEST(Bpe, TargetBelowByteFallbackIsConfigError) { EXPECT_THROW(train_bpe({"abc"}, 255), ConfigError); }

TEST(Bpe, Deterministic) {
    Rng a(2), b(2);
    auto ca = word_corpus(a, {"nasi", "goreng", "pho", "bo", "tom", "yum"}, 40);
    auto cb = word_corpus(b, {"nasi", "goreng", "pho", "bo", "tom", "yum"}, 40);
    EXPECT_EQ(train_bpe(ca, 320), train_bpe(cb, 320));
}

TEST(Bpe, TieBreakIsLexicographic) {
    // "ba" and "dc" both occur once; the smaller pair wins.
    auto v = train_bpe({"dc ba"}, 257);
    EXPECT_EQ(v.merges()[0], (MergeRule{" ", "b"}));
    auto w = train_bpe({"dcba"}, 257);
    EXPECT_EQ(w.merges()[0], (MergeRule{"b", "a"}));
}

TEST(Bpe, MergesAreMonotoneOnTrainingCorpus) {
    Rng rng(3);
    auto corpus = word_corpus(rng, {"selamat", "pagi", "terima", "kasih", "sampai", "jumpa"}, 60);
    std::size_t prev = total_tokens(corpus, SubwordVocab{});
    for (std::size_t t = 260; t <= 340; t += 8) {
        const std::size_t n = total_tokens(corpus, train_bpe(corpus, t));
        EXPECT_LE(n, prev) << t;
        prev = n;
    }
}

TEST(Encode, EmptyString) {
    auto v = train_bpe({"abab abab"}, 259);
    EXPECT_TRUE(encode("", v).empty());
    EXPECT_EQ(decode({}, v), "");
}

TEST(Encode, UnseenBytesUseFallback) {
    auto v = train_bpe({"abab abab"}, 259);
    const std::string text = "zz\xff\x00q"s;
    auto ids = encode(text, v);
    EXPECT_EQ(ids.size(), text.size());
    EXPECT_EQ(decode(ids, v), text);
}

TEST(Encode, FuzzRoundTrip) {
    Rng rng(4);
    auto corpus = word_corpus(rng, {"xin", "chao", "cam", "on", "khong", "co", "gi"}, 80);
    auto v = train_bpe(corpus, 330);
    for (int i = 0; i < 2000; ++i) {
        auto s = random_bytes(rng, 40);
        ASSERT_EQ(decode(encode(s, v), v), s);
    }
}

TEST(Encode, BadIdIsInputError) {
    SubwordVocab v;
    EXPECT_THROW(decode({256}, v), InputError);
    EXPECT_THROW(decode({-1}, v), InputError);
}

TEST(Merge, SmallUnion) {
    SubwordVocab x, y;
    x.add_merge("a", "a");
    x.add_merge("b", "b");
    x.add_merge("c", "c");
    y.add_merge("b", "b");
    y.add_merge("c", "c");
    y.add_merge("d", "d");
    auto m = merge_subtokenizers({x, y});
    EXPECT_EQ(m.size(), 256u + 4u);
    EXPECT_EQ(m.merges().size(), 4u);
    EXPECT_EQ(m.piece(259), "dd");
}

TEST(Merge, EngineeredOverlapMatchesUnion) {
    // 150 + 20 + 50 new pieces with 40 shared, the 150k+20k+50k -> 180k shape.
    auto a = pair_vocab(0, 150), b = pair_vocab(140, 160), c = pair_vocab(130, 180);
    std::set<std::string> uni;
    for (const auto* v : {&a, &b, &c}) uni.insert(v->pieces().begin(), v->pieces().end());
    auto m = merge_subtokenizers({a, b, c});
    EXPECT_EQ(m.size(), uni.size());
    EXPECT_EQ(m.size() - 256, 180u);
    EXPECT_EQ((a.size() - 256) + (b.size() - 256) + (c.size() - 256) - (m.size() - 256), 40u);
}

TEST(Merge, FirstOccurrenceKeepsItsPlace) {
    auto a = pair_vocab(0, 3), b = pair_vocab(5, 7), c = pair_vocab(1, 6);
    auto m = merge_subtokenizers({a, b, c});
    std::vector<std::string> added(m.pieces().begin() + 256, m.pieces().end());
    EXPECT_EQ(added, (std::vector<std::string>{"Aa", "Ab", "Ac", "Af", "Ag", "Ad", "Ae"}));
}

TEST(Merge, SelfMergeIsIdentity) {
    auto v = train_bpe({"abab abab", "cdcd"}, 262);
    EXPECT_EQ(merge_subtokenizers({v, v}), v);
    EXPECT_EQ(merge_subtokenizers({v}), v);
}

TEST(Merge, DisjointScriptsKeepConstituentRatios) {
    Rng rng(5);
    auto latin = word_corpus(rng, {"selamat", "pagi", "terima", "kasih"}, 40);
    auto thai = word_corpus(rng, {"\xe0\xb8\xaa\xe0\xb8\xa7\xe0\xb8\xb1\xe0\xb8\xaa\xe0\xb8\x94\xe0\xb8\xb5",
                                  "\xe0\xb8\x82\xe0\xb8\xad\xe0\xb8\x9a\xe0\xb8\x84\xe0\xb8\xb8\xe0\xb8\x93"},
                            40);
    auto vl = train_bpe(latin, 290), vt = train_bpe(thai, 290);
    auto m = merge_subtokenizers({vl, vt});
    std::map<std::string, std::vector<std::string>> texts{{"id", latin}, {"th", thai}};
    auto rm = compression_ratio(texts, m), rl = compression_ratio(texts, vl), rt = compression_ratio(texts, vt);
    EXPECT_LE(*rm["id"], std::min(*rl["id"], *rt["id"]));
    EXPECT_LE(*rm["th"], std::min(*rl["th"], *rt["th"]));
}

TEST(Compression, ByteVocabOnAsciiIsOne) {
    SubwordVocab v;
    auto r = compression_ratio({{"en", {"hello world"}}}, v);
    EXPECT_DOUBLE_EQ(*r["en"], 1.0);
}

TEST(Compression, CountsCharactersNotBytes) {
    SubwordVocab v;
    // Three 2-byte characters, byte fallback gives six tokens.
    auto r = compression_ratio({{"vi", {"\xc3\xa0\xc3\xa1\xc3\xa2"}}}, v);
    EXPECT_DOUBLE_EQ(*r["vi"], 2.0);
}

TEST(Compression, WholeStringPiece) {
    auto v = train_bpe({"hello"}, 300);
    ASSERT_TRUE(v.id_of("hello").has_value());
    auto r = compression_ratio({{"en", {"hello"}}}, v);
    EXPECT_DOUBLE_EQ(*r["en"], 1.0 / 5.0);
}

TEST(Compression, EmptyBucketIsAbsent) {
    SubwordVocab v;
    auto r = compression_ratio({{"en", {"x"}}, {"lo", {}}, {"my", {""}}}, v);
    EXPECT_TRUE(r["en"].has_value());
    EXPECT_FALSE(r["lo"].has_value());
    EXPECT_FALSE(r["my"].has_value());
}

TEST(Compression, TrainedBeatsBytes) {
    Rng rng(6);
    auto corpus = word_corpus(rng, {"makan", "minum", "tidur", "jalan", "rumah"}, 50);
    auto r_bpe = compression_ratio({{"ms", corpus}}, train_bpe(corpus, 300));
    auto r_byte = compression_ratio({{"ms", corpus}}, SubwordVocab{});
    EXPECT_LT(*r_bpe["ms"], *r_byte["ms"]);
}

TEST(VocabFile, RoundTripIsExact) {
    Rng rng(7);
    std::vector<std::string> corpus;
    for (int i = 0; i < 30; ++i) corpus.push_back(random_bytes(rng, 30) + " aa\nbb");
    auto v = train_bpe(corpus, 300, 6);
    std::stringstream buf;
    save_vocab(buf, v);
    EXPECT_EQ(load_vocab(buf), v);
}

TEST(VocabFile, RejectsCorruptFiles) {
    std::istringstream bad_magic("vocab v0\n");
    EXPECT_THROW(load_vocab(bad_magic), FormatError);
    std::stringstream buf;
    save_vocab(buf, train_bpe({"aaaa"}, 257));
    auto text = buf.str();
    std::istringstream truncated(text.substr(0, text.size() - 4));
    EXPECT_THROW(load_vocab(truncated), FormatError);
}
