#pragma once
// Training losses: the Hungarian retrieval loss with analytic gradients to
// region features, stage-1 masked cross-entropy, and the stage-2 SCST
// reward (CIDEr plus a bonus per retrieved term appearing in the caption).
//
// The retrieval loss compares each matched region feature against the
// target term's definition embedding: the matching itself (cost matrix +
// assignment) stays word-to-word, but the log term reads the region feature
// so gradients reach the trainable encoder. Cosine is mapped to (0, 1] via
// (1 + cos) / 2 and clamped at eps before the log; no-object targets have a
// zero embedding, giving a constant 0.5 inside the log and zero gradient.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "nocrek/errors.hpp"
#include "nocrek/knowledge.hpp"
#include "nocrek/linalg.hpp"
#include "nocrek/matching.hpp"
#include "nocrek/metrics.hpp"
#include "nocrek/retrieval.hpp"

namespace nocrek {

inline constexpr double kNoObjectLossWeight = 0.1;
inline constexpr double kSimClampEps = 1e-6;

struct LossReport {
    double retrieval_loss = 0.0;
    double generation_loss = 0.0;
    double total = 0.0;
    Mat grad_region_features;
};

struct RewardBreakdown {
    double cider = 0.0;
    std::size_t vocab_hits = 0;
    double alpha = 0.0;
    double total = 0.0;
};

struct HungarianLoss {
    double loss = 0.0;
    Mat grad;  // K x D, row r = d loss / d region_feature[r]
};

inline HungarianLoss hungarian_loss(const TargetSet& targets, const Assignment& assignment,
                                    const std::vector<RegionFeature>& region_features,
                                    const KnowledgeStore& store) {
    const std::size_t K = targets.targets.size();
    if (assignment.permutation.size() != K || region_features.size() != K)
        throw InvalidAssignmentError("hungarian_loss: size mismatch");
    {
        std::vector<char> used(K, 0);
        for (std::size_t j : assignment.permutation) {
            if (j >= K || used[j])
                throw InvalidAssignmentError("hungarian_loss: permutation is not a bijection");
            used[j] = 1;
        }
    }
    const std::size_t D = store.dimension();
    HungarianLoss out;
    out.grad = Mat(K, D);

    for (std::size_t i = 0; i < K; ++i) {
        const TargetLabel& target = targets.targets[i];
        const std::size_t r_idx = assignment.permutation[i];
        const Vec& r = region_features[r_idx].vector;
        const Vec& d = target.kind == TargetKind::NoObject
                           ? store.entry(0).embedding
                           : store.embedding_of(target.term);
        const double weight = target.kind == TargetKind::NoObject ? kNoObjectLossWeight : 1.0;

        const double cos = cosine_sim(r, d);
        const double s_raw = (1.0 + cos) / 2.0;
        const double s = std::clamp(s_raw, kSimClampEps, 1.0);
        out.loss += weight * (-std::log(s));

        // d(-log s)/dr = -(1/s) * (1/2) * dcos/dr, zero when the clamp is
        // active or the target embedding is zero.
        if (s_raw <= kSimClampEps || s_raw >= 1.0 || is_zero(d) || is_zero(r)) continue;
        const double nr = l2_norm(r);
        const double nd = l2_norm(d);
        const double coeff = -weight / (2.0 * s);
        double* grow = out.grad.row(r_idx);
        for (std::size_t k = 0; k < D; ++k) {
            const double dcos_drk = d[k] / (nr * nd) - cos * r[k] / (nr * nr);
            grow[k] += coeff * dcos_drk;
        }
    }
    return out;
}

struct MaskedCeLoss {
    double loss = 0.0;
    std::vector<Vec> grad;  // per masked position, d loss / d logits
};

// Mean negative log-softmax of the ground-truth token over masked positions.
inline MaskedCeLoss masked_ce_loss(const std::vector<Vec>& position_logits,
                                   const std::vector<std::size_t>& gt_tokens) {
    if (position_logits.empty())
        throw EmptyMaskSetError("masked_ce_loss: no masked positions");
    if (position_logits.size() != gt_tokens.size())
        throw ShapeMismatchError("masked_ce_loss: logits/targets count mismatch");
    MaskedCeLoss out;
    const double inv_n = 1.0 / static_cast<double>(position_logits.size());
    for (std::size_t p = 0; p < position_logits.size(); ++p) {
        const Vec& logits = position_logits[p];
        const std::size_t gt = gt_tokens[p];
        if (gt >= logits.size())
            throw ShapeMismatchError("masked_ce_loss: target id out of range");
        const double max_logit = *std::max_element(logits.begin(), logits.end());
        double sum_exp = 0.0;
        for (double l : logits) sum_exp += std::exp(l - max_logit);
        // -log softmax(gt) = logsumexp - logit_gt. When gt holds the max the
        // log1p form keeps precision for saturated logits; otherwise the
        // shifted form avoids overflow.
        if (logits[gt] == max_logit) {
            double rest = 0.0;
            for (std::size_t w = 0; w < logits.size(); ++w)
                if (w != gt) rest += std::exp(logits[w] - logits[gt]);
            out.loss += std::log1p(rest) * inv_n;
        } else {
            out.loss += (max_logit + std::log(sum_exp) - logits[gt]) * inv_n;
        }

        Vec g(logits.size());
        for (std::size_t w = 0; w < logits.size(); ++w)
            g[w] = std::exp(logits[w] - max_logit) / sum_exp * inv_n;
        g[gt] -= inv_n;
        out.grad.push_back(std::move(g));
    }
    return out;
}

// Count of distinct retrieved terms whose token sequences appear
// contiguously in the caption.
inline std::size_t count_vocab_hits(const TokenSeq& caption,
                                    const std::vector<std::string>& retrieved_vocab) {
    std::size_t hits = 0;
    std::vector<std::string> counted;
    for (const auto& term : retrieved_vocab) {
        if (std::find(counted.begin(), counted.end(), term) != counted.end()) continue;
        if (contains_contiguous(caption, split_term_tokens(term))) {
            ++hits;
            counted.push_back(term);
        }
    }
    return hits;
}

inline RewardBreakdown scst_reward(const TokenSeq& caption,
                                   const std::vector<TokenSeq>& references,
                                   const std::vector<std::string>& retrieved_vocab,
                                   double alpha, const CiderScorer& idf_corpus) {
    if (caption.empty())
        throw EmptyCaptionError("scst_reward: empty caption");
    RewardBreakdown out;
    out.cider = idf_corpus.score(caption, references);
    out.vocab_hits = count_vocab_hits(caption, retrieved_vocab);
    out.alpha = alpha;
    out.total = out.cider + alpha * static_cast<double>(out.vocab_hits);
    return out;
}

// Self-critical REINFORCE: the sampled sequence's log-probability gradient
// is scaled by -(sample_reward - baseline_reward); minimizing the resulting
// loss ascends reward.
inline double scst_gradient(double sample_reward, double baseline_reward) {
    return -(sample_reward - baseline_reward);
}

} // namespace nocrek
