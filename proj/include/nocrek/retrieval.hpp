#pragma once
// Vocabulary retrieval: cosine similarity between region features and
// definition embeddings, per-region argmax over the store, and the
// image-level top-k vocabulary used at inference.

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "nocrek/errors.hpp"
#include "nocrek/knowledge.hpp"
#include "nocrek/linalg.hpp"

namespace nocrek {

struct RegionFeature {
    Vec vector;
    std::size_t region_index = 0;
};

struct ScoredTerm {
    std::string term;
    double score = 0.0;
};

struct RetrievalResult {
    std::vector<ScoredTerm> per_region;  // one entry per region, index aligned
    std::vector<ScoredTerm> top_vocab;   // distinct terms, descending score
};

// Cosine with a fixed convention for zero vectors: sim(x, 0) = 0 so the
// all-zero no-object embedding acts as a rejection threshold at cosine 0,
// and sim(0, 0) = 1 so a zero query matches no-object exactly.
inline double cosine_sim(const Vec& a, const Vec& b) {
    if (a.size() != b.size())
        throw DimensionMismatchError("cosine_sim: dimension mismatch");
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na == 0.0 && nb == 0.0) return 1.0;
    if (na == 0.0 || nb == 0.0) return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s / (na * nb);
}

// Argmax retrieval over the store for each region feature. Ties break
// toward the lowest store index; repeated terms across regions are allowed.
inline RetrievalResult retrieve_per_region(const std::vector<RegionFeature>& features,
                                           const KnowledgeStore& store) {
    if (store.size() == 0)
        throw EmptyStoreError("retrieve_per_region: store is empty");
    RetrievalResult result;
    result.per_region.reserve(features.size());
    for (const auto& rf : features) {
        if (rf.vector.size() != store.dimension())
            throw DimensionMismatchError("retrieve_per_region: feature dimension mismatch");
        std::size_t best = 0;
        double best_score = cosine_sim(rf.vector, store.entry(0).embedding);
        for (std::size_t j = 1; j < store.size(); ++j) {
            const double s = cosine_sim(rf.vector, store.entry(j).embedding);
            if (s > best_score) {
                best_score = s;
                best = j;
            }
        }
        result.per_region.push_back({store.entry(best).term, best_score});
    }
    return result;
}

// Image-level vocabulary: pool per-region pairs, drop no-object, keep each
// term's maximum score, sort by descending score (ties lexicographic),
// truncate to k.
inline std::vector<ScoredTerm> top_k_vocab(const RetrievalResult& result, std::size_t k) {
    std::vector<ScoredTerm> pooled;
    for (const auto& st : result.per_region) {
        if (st.term == kNoObjectTerm) continue;
        auto it = std::find_if(pooled.begin(), pooled.end(),
                               [&](const ScoredTerm& p) { return p.term == st.term; });
        if (it == pooled.end())
            pooled.push_back(st);
        else
            it->score = std::max(it->score, st.score);
    }
    std::sort(pooled.begin(), pooled.end(), [](const ScoredTerm& a, const ScoredTerm& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.term < b.term;
    });
    if (pooled.size() > k) pooled.resize(k);
    return pooled;
}

// Convenience: run retrieval and fill top_vocab in one call.
inline RetrievalResult retrieve_with_vocab(const std::vector<RegionFeature>& features,
                                           const KnowledgeStore& store, std::size_t k) {
    RetrievalResult r = retrieve_per_region(features, store);
    r.top_vocab = top_k_vocab(r, k);
    return r;
}

} // namespace nocrek
