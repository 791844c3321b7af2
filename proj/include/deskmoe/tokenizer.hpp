// Copyright (c) 2026, deskmoe contributors
// SPDX-License-Identifier: Apache-2.0
//
// Byte-level BPE with byte fallback: training, encoding, merging several
// sub-vocabularies into one, compression ratio, and a text vocab format.
//
// Text is split into chunks at whitespace, each whitespace run staying
// attached to the word that follows it; merges never cross a chunk boundary.

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "deskmoe/errors.hpp"

namespace deskmoe {

using MergeRule = std::pair<std::string, std::string>;

struct PairHash {
    std::size_t operator()(const MergeRule& p) const noexcept {
        const std::size_t h = std::hash<std::string>{}(p.first);
        return h ^ (std::hash<std::string>{}(p.second) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2));
    }
};

class SubwordVocab {
   public:
    explicit SubwordVocab(std::size_t max_piece_len = 16) : max_piece_len_(max_piece_len) {
        if (max_piece_len < 1) throw ConfigError("max_piece_len must be >= 1");
        for (int b = 0; b < 256; ++b) add_piece(std::string(1, static_cast<char>(b)));
    }

    std::size_t size() const { return pieces_.size(); }
    std::size_t max_piece_len() const { return max_piece_len_; }
    const std::vector<std::string>& pieces() const { return pieces_; }
    const std::vector<MergeRule>& merges() const { return merges_; }

    std::optional<std::int32_t> id_of(std::string_view piece) const {
        auto it = ids_.find(std::string(piece));
        if (it == ids_.end()) return std::nullopt;
        return it->second;
    }
    const std::string& piece(std::int32_t id) const { return pieces_.at(static_cast<std::size_t>(id)); }

    // Lower rank merges apply first; nullopt if the pair is not a rule.
    std::optional<std::size_t> rank_of(const MergeRule& m) const {
        auto it = ranks_.find(m);
        if (it == ranks_.end()) return std::nullopt;
        return it->second;
    }

    // Appends a rule and its output piece. Returns false if the rule exists.
    bool add_merge(const std::string& a, const std::string& b) {
        if (!id_of(a) || !id_of(b)) throw FormatError("merge inputs must be pieces: '" + a + "' '" + b + "'");
        if (a.size() + b.size() > max_piece_len_) {
            throw FormatError(detail::cat("merge output exceeds max_piece_len ", max_piece_len_));
        }
        MergeRule m{a, b};
        if (ranks_.count(m)) return false;
        ranks_.emplace(m, merges_.size());
        merges_.push_back(m);
        add_piece(a + b);
        return true;
    }

    bool operator==(const SubwordVocab& o) const {
        return max_piece_len_ == o.max_piece_len_ && pieces_ == o.pieces_ && merges_ == o.merges_;
    }

   private:
    void add_piece(const std::string& p) {
        if (ids_.count(p)) return;
        ids_.emplace(p, static_cast<std::int32_t>(pieces_.size()));
        pieces_.push_back(p);
    }

    std::size_t max_piece_len_;
    std::vector<std::string> pieces_;
    std::vector<MergeRule> merges_;
    std::unordered_map<std::string, std::int32_t> ids_;
    std::unordered_map<MergeRule, std::size_t, PairHash> ranks_;
};

namespace detail {

inline bool is_space(unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

inline std::vector<std::string_view> chunk_text(std::string_view text) {
    std::vector<std::string_view> out;
    std::size_t i = 0;
    while (i < text.size()) {
        const std::size_t start = i;
        while (i < text.size() && is_space(static_cast<unsigned char>(text[i]))) ++i;
        while (i < text.size() && !is_space(static_cast<unsigned char>(text[i]))) ++i;
        out.push_back(text.substr(start, i - start));
    }
    return out;
}

inline std::vector<std::string> split_bytes(std::string_view chunk) {
    std::vector<std::string> out;
    out.reserve(chunk.size());
    for (char c : chunk) out.emplace_back(1, c);
    return out;
}

inline void apply_merge(std::vector<std::string>& parts, const MergeRule& m) {
    std::vector<std::string> next;
    next.reserve(parts.size());
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i + 1 < parts.size() && parts[i] == m.first && parts[i + 1] == m.second) {
            next.push_back(m.first + m.second);
            ++i;
        } else {
            next.push_back(std::move(parts[i]));
        }
    }
    parts = std::move(next);
}

}  // namespace detail

// Merges the most frequent adjacent pair until the vocab reaches
// target_size. Frequency ties go to the lexicographically smallest pair.
// Stops early when no pair can be merged without exceeding max_piece_len.
inline SubwordVocab train_bpe(const std::vector<std::string>& corpus, std::size_t target_size,
                              std::size_t max_piece_len = 16) {
    if (target_size < 256) throw ConfigError(detail::cat("target vocab size ", target_size, " is below 256"));
    if (corpus.empty()) throw InputError("BPE corpus is empty");
    SubwordVocab vocab(max_piece_len);
    std::map<std::string, std::size_t> freq;
    for (const auto& doc : corpus)
        for (auto chunk : detail::chunk_text(doc)) ++freq[std::string(chunk)];
    std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
    for (const auto& [w, n] : freq) words.emplace_back(detail::split_bytes(w), n);

    while (vocab.size() < target_size) {
        std::unordered_map<MergeRule, std::size_t, PairHash> counts;
        for (const auto& [parts, n] : words)
            for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
                if (parts[i].size() + parts[i + 1].size() > max_piece_len) continue;
                counts[{parts[i], parts[i + 1]}] += n;
            }
        const MergeRule* best = nullptr;
        std::size_t best_n = 0;
        for (const auto& [pair, n] : counts) {
            if (n > best_n || (n == best_n && best && pair < *best)) {
                best = &pair;
                best_n = n;
            }
        }
        if (!best) break;
        const MergeRule m = *best;
        vocab.add_merge(m.first, m.second);
        for (auto& [parts, n] : words) detail::apply_merge(parts, m);
    }
    return vocab;
}

// Applies the lowest-rank applicable merge until none applies, per chunk.
inline std::vector<std::int32_t> encode(std::string_view text, const SubwordVocab& vocab) {
    std::vector<std::int32_t> ids;
    for (auto chunk : detail::chunk_text(text)) {
        auto parts = detail::split_bytes(chunk);
        while (parts.size() > 1) {
            std::optional<std::size_t> best;
            for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
                auto r = vocab.rank_of({parts[i], parts[i + 1]});
                if (r && (!best || *r < *best)) best = r;
            }
            if (!best) break;
            detail::apply_merge(parts, vocab.merges()[*best]);
        }
        for (const auto& p : parts) ids.push_back(*vocab.id_of(p));
    }
    return ids;
}

inline std::string decode(const std::vector<std::int32_t>& ids, const SubwordVocab& vocab) {
    std::string out;
    for (auto id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab.size()) {
            throw InputError(detail::cat("token id ", id, " outside vocab of ", vocab.size()));
        }
        out += vocab.piece(id);
    }
    return out;
}

// Union of pieces (first occurrence keeps its position) and concatenation of
// merge rules in vocab order with repeats dropped.
inline SubwordVocab merge_subtokenizers(const std::vector<SubwordVocab>& vocabs) {
    if (vocabs.empty()) throw ConfigError("nothing to merge");
    std::size_t max_len = 0;
    for (const auto& v : vocabs) max_len = std::max(max_len, v.max_piece_len());
    SubwordVocab out(max_len);
    for (const auto& v : vocabs)
        for (const auto& [a, b] : v.merges()) out.add_merge(a, b);
    return out;
}

// Number of Unicode code points, counting each invalid byte as one.
inline std::size_t count_chars(std::string_view s) {
    std::size_t n = 0;
    for (unsigned char c : s)
        if ((c & 0xC0) != 0x80) ++n;
    return n;
}

// Tokens per character for each language; an empty bucket maps to nullopt.
inline std::map<std::string, std::optional<double>> compression_ratio(
    const std::map<std::string, std::vector<std::string>>& texts, const SubwordVocab& vocab) {
    std::map<std::string, std::optional<double>> out;
    for (const auto& [lang, docs] : texts) {
        std::size_t tokens = 0, chars = 0;
        for (const auto& d : docs) {
            tokens += encode(d, vocab).size();
            chars += count_chars(d);
        }
        out[lang] = chars ? std::optional<double>(static_cast<double>(tokens) / static_cast<double>(chars))
                          : std::nullopt;
    }
    return out;
}

namespace detail {

inline std::string hex_encode(std::string_view s) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    for (unsigned char c : s) {
        out += digits[c >> 4];
        out += digits[c & 15];
    }
    return out;
}

inline std::string hex_decode(const std::string& s) {
    if (s.size() % 2) throw FormatError("odd-length hex field '" + s + "'");
    auto val = [&](char c) -> int {
        if (c >= '0' && c <= '9') return c - '0';
        if (c >= 'a' && c <= 'f') return c - 'a' + 10;
        throw FormatError("bad hex digit in '" + s + "'");
    };
    std::string out;
    for (std::size_t i = 0; i < s.size(); i += 2) out += static_cast<char>(val(s[i]) * 16 + val(s[i + 1]));
    return out;
}

}  // namespace detail

// deskmoe-vocab v1
// pieces <n> merges <m> max_piece_len <L>
// <n lines: hex piece>
// <m lines: hex left, space, hex right>
inline void save_vocab(std::ostream& out, const SubwordVocab& v) {
    out << "deskmoe-vocab v1\n";
    out << "pieces " << v.size() << " merges " << v.merges().size() << " max_piece_len " << v.max_piece_len() << "\n";
    for (const auto& p : v.pieces()) out << detail::hex_encode(p) << "\n";
    for (const auto& [a, b] : v.merges()) out << detail::hex_encode(a) << " " << detail::hex_encode(b) << "\n";
}

inline SubwordVocab load_vocab(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != "deskmoe-vocab v1") throw FormatError("not a deskmoe vocab file");
    std::size_t n = 0, m = 0, len = 0;
    std::string k1, k2, k3;
    if (!std::getline(in, line)) throw FormatError("missing vocab header");
    std::istringstream hdr(line);
    if (!(hdr >> k1 >> n >> k2 >> m >> k3 >> len) || k1 != "pieces" || k2 != "merges" || k3 != "max_piece_len") {
        throw FormatError("malformed vocab header: " + line);
    }
    std::vector<std::string> pieces;
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::getline(in, line)) throw FormatError("vocab file truncated in pieces");
        pieces.push_back(detail::hex_decode(line));
    }
    SubwordVocab v(len);
    for (std::size_t i = 0; i < m; ++i) {
        if (!std::getline(in, line)) throw FormatError("vocab file truncated in merges");
        const auto sp = line.find(' ');
        if (sp == std::string::npos) throw FormatError("malformed merge line: " + line);
        v.add_merge(detail::hex_decode(line.substr(0, sp)), detail::hex_decode(line.substr(sp + 1)));
    }
    if (v.pieces() != pieces) throw FormatError("piece list disagrees with merge rules");
    return v;
}

}  // namespace deskmoe
