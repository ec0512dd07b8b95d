#pragma once
// Caption evaluation: CIDEr consensus scoring over TF-IDF n-gram vectors
// (n = 1..4, x10 scaling) and per-class novel-object F1 with exact
// contiguous-mention matching.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "nocrek/errors.hpp"

namespace nocrek {

using TokenSeq = std::vector<std::string>;

// Exact contiguous token-sequence containment (no stemming).
inline bool contains_contiguous(const TokenSeq& haystack, const TokenSeq& needle) {
    if (needle.empty() || needle.size() > haystack.size()) return false;
    for (std::size_t i = 0; i + needle.size() <= haystack.size(); ++i) {
        bool hit = true;
        for (std::size_t j = 0; j < needle.size(); ++j)
            if (haystack[i + j] != needle[j]) { hit = false; break; }
        if (hit) return true;
    }
    return false;
}

inline TokenSeq split_term_tokens(const std::string& term) {
    TokenSeq out;
    std::istringstream iss(term);
    std::string tok;
    while (iss >> tok) out.push_back(tok);
    return out;
}

namespace detail {

inline std::string gram_key(const TokenSeq& toks, std::size_t start, std::size_t n) {
    std::string key;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) key.push_back('\x1f');
        key += toks[start + i];
    }
    return key;
}

using GramCounts = std::unordered_map<std::string, std::size_t>;

inline GramCounts count_grams(const TokenSeq& toks, std::size_t n) {
    GramCounts counts;
    if (toks.size() >= n)
        for (std::size_t i = 0; i + n <= toks.size(); ++i) ++counts[gram_key(toks, i, n)];
    return counts;
}

} // namespace detail

// IDF statistics over a corpus of reference sets, reusable across scoring
// calls (the reward path scores one caption at a time against a corpus
// built once from the training references).
class CiderScorer {
public:
    static constexpr std::size_t kMaxN = 4;

    explicit CiderScorer(const std::vector<std::vector<TokenSeq>>& corpus_refsets)
        : corpus_size_(corpus_refsets.size()) {
        if (corpus_size_ < 2)
            throw CorpusTooSmallError("cider: corpus must contain at least 2 items");
        for (const auto& refs : corpus_refsets) {
            if (refs.empty())
                throw EmptyReferenceSetError("cider: empty reference set");
            for (std::size_t n = 1; n <= kMaxN; ++n) {
                std::set<std::string> seen;
                for (const auto& ref : refs) {
                    const auto counts = detail::count_grams(ref, n);
                    for (const auto& kv : counts) seen.insert(kv.first);
                }
                for (const auto& key : seen) ++doc_freq_[n - 1][key];
            }
        }
    }

    double idf(std::size_t n, const std::string& key) const {
        const auto& df = doc_freq_[n - 1];
        auto it = df.find(key);
        const std::size_t count = it == df.end() ? 0 : it->second;
        return std::log(static_cast<double>(corpus_size_) / (1.0 + static_cast<double>(count)));
    }

    double score(const TokenSeq& candidate, const std::vector<TokenSeq>& refs) const {
        if (refs.empty())
            throw EmptyReferenceSetError("cider: empty reference set");
        double sum_over_n = 0.0;
        for (std::size_t n = 1; n <= kMaxN; ++n) {
            const auto cand_vec = tfidf(candidate, n);
            double mean_cos = 0.0;
            for (const auto& ref : refs) mean_cos += cosine(cand_vec, tfidf(ref, n));
            mean_cos /= static_cast<double>(refs.size());
            sum_over_n += 10.0 * mean_cos;
        }
        return sum_over_n / static_cast<double>(kMaxN);
    }

private:
    using SparseVec = std::unordered_map<std::string, double>;

    SparseVec tfidf(const TokenSeq& toks, std::size_t n) const {
        SparseVec v;
        for (const auto& [key, cnt] : detail::count_grams(toks, n))
            v[key] = static_cast<double>(cnt) * idf(n, key);
        return v;
    }

    static double cosine(const SparseVec& a, const SparseVec& b) {
        double dotp = 0.0, na = 0.0, nb = 0.0;
        for (const auto& [key, va] : a) {
            na += va * va;
            auto it = b.find(key);
            if (it != b.end()) dotp += va * it->second;
        }
        for (const auto& kv : b) nb += kv.second * kv.second;
        if (na == 0.0 || nb == 0.0) return 0.0;
        return dotp / (std::sqrt(na) * std::sqrt(nb));
    }

    std::size_t corpus_size_;
    std::unordered_map<std::string, std::size_t> doc_freq_[kMaxN];
};

struct CiderResult {
    std::vector<double> per_item;
    double mean = 0.0;
};

inline CiderResult cider(const std::vector<TokenSeq>& candidates,
                         const std::vector<std::vector<TokenSeq>>& references) {
    if (candidates.size() != references.size())
        throw ShapeMismatchError("cider: candidate/reference count mismatch");
    CiderScorer scorer(references);
    CiderResult out;
    out.per_item.reserve(candidates.size());
    for (std::size_t i = 0; i < candidates.size(); ++i)
        out.per_item.push_back(scorer.score(candidates[i], references[i]));
    for (double s : out.per_item) out.mean += s;
    out.mean /= static_cast<double>(out.per_item.size());
    return out;
}

struct ClassF1 {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t tp = 0, fp = 0, fn = 0;
};

struct LabeledCaption {
    std::set<std::string> gt_classes;
    TokenSeq caption;
};

// DCC-style per-class F1: a scene is predicted positive iff the class term's
// tokens occur contiguously in the generated caption, actual positive iff
// the class is in the scene's ground-truth class set.
inline ClassF1 novel_f1(const std::vector<LabeledCaption>& scenes, const std::string& cls) {
    if (scenes.empty())
        throw EmptySceneListError("novel_f1: no scenes");
    const TokenSeq needle = split_term_tokens(cls);
    ClassF1 out;
    for (const auto& s : scenes) {
        const bool predicted = contains_contiguous(s.caption, needle);
        const bool actual = s.gt_classes.count(cls) > 0;
        if (predicted && actual) ++out.tp;
        else if (predicted && !actual) ++out.fp;
        else if (!predicted && actual) ++out.fn;
    }
    out.precision = (out.tp + out.fp) == 0 ? 0.0
                  : static_cast<double>(out.tp) / static_cast<double>(out.tp + out.fp);
    out.recall = (out.tp + out.fn) == 0 ? 0.0
               : static_cast<double>(out.tp) / static_cast<double>(out.tp + out.fn);
    out.f1 = (out.precision + out.recall) == 0.0 ? 0.0
           : 2.0 * out.precision * out.recall / (out.precision + out.recall);
    return out;
}

struct EvalReport {
    double cider_mean = 0.0;
    std::map<std::string, ClassF1> per_class_f1;
    double avg_f1 = 0.0;  // unweighted mean over evaluated classes

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["cider_mean"] = cider_mean;
        j["avg_f1"] = avg_f1;
        nlohmann::ordered_json classes = nlohmann::ordered_json::object();
        for (const auto& [term, f] : per_class_f1) {
            classes[term] = {{"tp", f.tp},           {"fp", f.fp},
                             {"fn", f.fn},           {"precision", f.precision},
                             {"recall", f.recall},   {"f1", f.f1}};
        }
        j["per_class"] = classes;
        return j;
    }

    std::string to_csv() const {
        std::ostringstream out;
        out << "term,tp,fp,fn,precision,recall,f1\n";
        for (const auto& [term, f] : per_class_f1) {
            out << term << ',' << f.tp << ',' << f.fp << ',' << f.fn << ','
                << f.precision << ',' << f.recall << ',' << f.f1 << '\n';
        }
        return out.str();
    }
};

inline EvalReport make_f1_report(const std::vector<LabeledCaption>& scenes,
                                 const std::vector<std::string>& classes) {
    EvalReport rep;
    for (const auto& cls : classes) rep.per_class_f1[cls] = novel_f1(scenes, cls);
    if (!rep.per_class_f1.empty()) {
        for (const auto& [term, f] : rep.per_class_f1) rep.avg_f1 += f.f1;
        rep.avg_f1 /= static_cast<double>(rep.per_class_f1.size());
    }
    return rep;
}

} // namespace nocrek
