// Corpus representation, BPE subword learning/application, vocabularies,
// and corpus statistics. All types are immutable after construction and all
// operations are pure.
#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace distillforge {

using TokenSeq = std::vector<std::string>;

// ---------------------------------------------------------------------------
// Bitext
// ---------------------------------------------------------------------------

struct Bitext {
    std::vector<std::pair<TokenSeq, TokenSeq>> pairs; // (source, target), line-aligned
    std::string name;

    size_t size() const { return pairs.size(); }
    bool empty() const { return pairs.empty(); }
};

inline TokenSeq split_tokens(const std::string& line) {
    TokenSeq out;
    std::istringstream is(line);
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

inline std::string join_tokens(const TokenSeq& toks) {
    std::string out;
    for (size_t i = 0; i < toks.size(); ++i) {
        if (i) out += ' ';
        out += toks[i];
    }
    return out;
}

inline std::vector<TokenSeq> read_token_lines(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open corpus file: " + path);
    std::vector<TokenSeq> out;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        out.push_back(split_tokens(line));
    }
    return out;
}

inline void write_token_lines(const std::string& path, const std::vector<TokenSeq>& lines) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    for (const auto& l : lines) os << join_tokens(l) << '\n';
    if (!os) throw std::runtime_error("write failed: " + path);
}

struct BitextLoad {
    Bitext bitext;
    size_t dropped = 0; // pairs over the length cap, removed at load
};

// Loads <prefix>.src / <prefix>.trg. Pairs where either side exceeds
// max_len raw tokens are dropped (BPE never shortens a sentence, so any
// pair over the cap in words is over it in subwords too).
inline BitextLoad load_bitext(const std::string& src_path, const std::string& trg_path, const std::string& name,
                              size_t max_len = 100) {
    auto src = read_token_lines(src_path);
    auto trg = read_token_lines(trg_path);
    if (src.size() != trg.size())
        throw std::runtime_error("bitext not line-aligned: " + src_path + " has " + std::to_string(src.size()) +
                                 " lines, " + trg_path + " has " + std::to_string(trg.size()));
    BitextLoad out;
    out.bitext.name = name;
    for (size_t i = 0; i < src.size(); ++i) {
        if (src[i].size() > max_len || trg[i].size() > max_len) {
            ++out.dropped;
            continue;
        }
        out.bitext.pairs.emplace_back(std::move(src[i]), std::move(trg[i]));
    }
    return out;
}

inline void save_bitext(const Bitext& bt, const std::string& prefix) {
    std::vector<TokenSeq> src, trg;
    src.reserve(bt.size());
    trg.reserve(bt.size());
    for (const auto& [s, t] : bt.pairs) {
        src.push_back(s);
        trg.push_back(t);
    }
    write_token_lines(prefix + ".src", src);
    write_token_lines(prefix + ".trg", trg);
}

// ---------------------------------------------------------------------------
// BPE
// ---------------------------------------------------------------------------

struct BpeModel {
    std::vector<std::pair<std::string, std::string>> merges; // priority = file order
    std::string marker = "@@";
};

namespace detail {

// Split a word into UTF-8 codepoint symbols.
inline std::vector<std::string> utf8_symbols(const std::string& word) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < word.size()) {
        unsigned char c = (unsigned char)word[i];
        size_t len = c < 0x80 ? 1 : c < 0xE0 ? 2 : c < 0xF0 ? 3 : 4;
        len = std::min(len, word.size() - i);
        out.push_back(word.substr(i, len));
        i += len;
    }
    return out;
}

inline std::vector<std::string> apply_merges_to_word(const std::string& word, const BpeModel& model,
                                                     const std::map<std::pair<std::string, std::string>, size_t>& rank) {
    std::vector<std::string> syms = utf8_symbols(word);
    while (syms.size() > 1) {
        size_t best_rank = SIZE_MAX;
        for (size_t i = 0; i + 1 < syms.size(); ++i) {
            auto it = rank.find({syms[i], syms[i + 1]});
            if (it != rank.end() && it->second < best_rank) best_rank = it->second;
        }
        if (best_rank == SIZE_MAX) break;
        const auto& [l, r] = model.merges[best_rank];
        std::vector<std::string> next;
        next.reserve(syms.size());
        for (size_t i = 0; i < syms.size();) {
            if (i + 1 < syms.size() && syms[i] == l && syms[i + 1] == r) {
                next.push_back(l + r);
                i += 2;
            } else {
                next.push_back(syms[i]);
                i += 1;
            }
        }
        syms = std::move(next);
    }
    return syms;
}

} // namespace detail

// Greedy highest-frequency merges, ties broken lexicographically by
// (left,right). Merges never cross word boundaries.
inline BpeModel learn_bpe(const std::vector<TokenSeq>& corpus, size_t num_merges) {
    if (corpus.empty()) throw std::runtime_error("empty corpus");
    // word type -> frequency
    std::unordered_map<std::string, size_t> word_freq;
    for (const auto& sent : corpus)
        for (const auto& w : sent) ++word_freq[w];

    std::vector<std::pair<std::vector<std::string>, size_t>> types;
    {
        std::vector<std::pair<std::string, size_t>> sorted(word_freq.begin(), word_freq.end());
        std::sort(sorted.begin(), sorted.end());
        types.reserve(sorted.size());
        for (auto& [w, f] : sorted) types.emplace_back(detail::utf8_symbols(w), f);
    }

    BpeModel model;
    for (size_t step = 0; step < num_merges; ++step) {
        std::map<std::pair<std::string, std::string>, size_t> pair_freq;
        for (const auto& [syms, f] : types)
            for (size_t i = 0; i + 1 < syms.size(); ++i) pair_freq[{syms[i], syms[i + 1]}] += f;
        if (pair_freq.empty()) break;
        // max frequency, lexicographically smallest pair among ties;
        // std::map iterates in lexicographic order already
        auto best = pair_freq.begin();
        for (auto it = pair_freq.begin(); it != pair_freq.end(); ++it)
            if (it->second > best->second) best = it;
        const auto [l, r] = best->first;
        model.merges.emplace_back(l, r);
        for (auto& [syms, f] : types) {
            std::vector<std::string> next;
            next.reserve(syms.size());
            for (size_t i = 0; i < syms.size();) {
                if (i + 1 < syms.size() && syms[i] == l && syms[i + 1] == r) {
                    next.push_back(l + r);
                    i += 2;
                } else {
                    next.push_back(syms[i]);
                    i += 1;
                }
            }
            syms = std::move(next);
        }
    }
    return model;
}

// Applies merges per word; every non-final subword of a word carries the
// continuation marker. Caches per word, so corpus-scale application is
// cheap. The cache makes instances single-threaded; use one codec per
// thread.
class BpeCodec {
public:
    explicit BpeCodec(const BpeModel& model) : model_(&model) {
        for (size_t i = 0; i < model.merges.size(); ++i) rank_[model.merges[i]] = i;
    }

    std::vector<std::string> apply_word(const std::string& word) const {
        auto it = cache_.find(word);
        if (it != cache_.end()) return it->second;
        auto syms = detail::apply_merges_to_word(word, *model_, rank_);
        for (size_t i = 0; i + 1 < syms.size(); ++i) syms[i] += model_->marker;
        cache_.emplace(word, syms);
        return syms;
    }

    TokenSeq apply(const TokenSeq& sentence) const {
        TokenSeq out;
        for (const auto& w : sentence) {
            auto sub = apply_word(w);
            out.insert(out.end(), sub.begin(), sub.end());
        }
        return out;
    }

private:
    const BpeModel* model_;
    std::map<std::pair<std::string, std::string>, size_t> rank_;
    mutable std::unordered_map<std::string, std::vector<std::string>> cache_;
};

inline TokenSeq apply_bpe(const TokenSeq& sentence, const BpeModel& model) {
    return BpeCodec(model).apply(sentence);
}

inline TokenSeq reverse_bpe(const TokenSeq& subwords, const std::string& marker = "@@") {
    TokenSeq out;
    std::string cur;
    for (const auto& s : subwords) {
        if (s.size() >= marker.size() && s.compare(s.size() - marker.size(), marker.size(), marker) == 0) {
            cur += s.substr(0, s.size() - marker.size());
        } else {
            cur += s;
            out.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(cur); // dangling continuation, keep what we have
    return out;
}

inline void save_bpe(const BpeModel& model, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << "#bpe v1 marker=" << model.marker << '\n';
    for (const auto& [l, r] : model.merges) os << l << ' ' << r << '\n';
}

inline BpeModel load_bpe(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path);
    std::string header;
    std::getline(is, header);
    BpeModel model;
    auto pos = header.find("marker=");
    if (header.rfind("#bpe v1", 0) != 0 || pos == std::string::npos)
        throw std::runtime_error("bad BPE model header in " + path + ": " + header);
    model.marker = header.substr(pos + 7);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto sp = line.find(' ');
        if (sp == std::string::npos) throw std::runtime_error("bad BPE merge line: " + line);
        model.merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    return model;
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

struct Vocabulary {
    static constexpr int32_t PAD = 0;
    static constexpr int32_t UNK = 1;
    static constexpr int32_t BOS = 2;
    static constexpr int32_t EOS = 3;

    std::vector<std::string> id_to_token;
    std::unordered_map<std::string, int32_t> token_to_id;
    size_t min_count = 1;

    size_t size() const { return id_to_token.size(); }

    int32_t encode(const std::string& tok) const {
        auto it = token_to_id.find(tok);
        return it == token_to_id.end() ? UNK : it->second;
    }

    std::vector<int32_t> encode(const TokenSeq& toks) const {
        std::vector<int32_t> out;
        out.reserve(toks.size());
        for (const auto& t : toks) out.push_back(encode(t));
        return out;
    }

    const std::string& decode(int32_t id) const { return id_to_token.at(size_t(id)); }
};

inline const std::vector<std::string>& special_tokens() {
    static const std::vector<std::string> s = {"<pad>", "<unk>", "<s>", "</s>"};
    return s;
}

// Specials first, then subwords with frequency >= min_count ordered by
// descending frequency, ties lexicographic.
inline Vocabulary build_vocab(const std::vector<TokenSeq>& corpus, size_t min_count = 1) {
    if (corpus.empty()) throw std::runtime_error("empty corpus");
    std::unordered_map<std::string, size_t> freq;
    for (const auto& sent : corpus)
        for (const auto& t : sent) ++freq[t];
    std::vector<std::pair<std::string, size_t>> items(freq.begin(), freq.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocabulary v;
    v.min_count = min_count;
    v.id_to_token = special_tokens();
    for (const auto& [tok, f] : items)
        if (f >= min_count) v.id_to_token.push_back(tok);
    for (size_t i = 0; i < v.id_to_token.size(); ++i) v.token_to_id[v.id_to_token[i]] = int32_t(i);
    return v;
}

inline void save_vocab(const Vocabulary& v, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    for (size_t i = 0; i < v.id_to_token.size(); ++i) os << v.id_to_token[i] << '\t' << i << '\n';
}

inline Vocabulary load_vocab(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open: " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto tab = line.find('\t');
        if (tab == std::string::npos) throw std::runtime_error("bad vocab line: " + line);
        std::string tok = line.substr(0, tab);
        int32_t id = int32_t(std::stol(line.substr(tab + 1)));
        if (id != int32_t(v.id_to_token.size())) throw std::runtime_error("non-contiguous vocab ids in " + path);
        v.id_to_token.push_back(tok);
        v.token_to_id[tok] = id;
    }
    if (v.id_to_token.size() < 4) throw std::runtime_error("vocab missing specials: " + path);
    return v;
}

// ---------------------------------------------------------------------------
// Corpus statistics (target side, whole pre-BPE words)
// ---------------------------------------------------------------------------

struct CorpusStats {
    size_t total_tokens = 0; // target-side token count
    size_t vocab_size = 0;   // distinct target-side words
};

inline CorpusStats corpus_stats(const Bitext& bt) {
    if (bt.empty()) throw std::runtime_error("corpus_stats: empty bitext");
    std::unordered_map<std::string, size_t> words;
    CorpusStats st;
    for (const auto& [src, trg] : bt.pairs) {
        (void)src;
        st.total_tokens += trg.size();
        for (const auto& w : trg) ++words[w];
    }
    st.vocab_size = words.size();
    return st;
}

} // namespace distillforge
