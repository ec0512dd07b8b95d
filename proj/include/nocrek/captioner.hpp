#pragma once
// Caption generation by sequential mask filling. Step 1 runs the retrieval
// forward pass on pseudo-mask inputs to obtain the image-level vocabulary;
// Step 2 decodes left to right, filling one masked word slot per step from
// the generation pass.
//
// The constrained search groups beams by which tracked retrieved terms the
// hypothesis already contains (one pool of beam_size states per satisfied
// subset, at most 2^3 groups) and returns the best finished beam among
// groups satisfying at least min_constraints, falling back to the best
// overall. With min_constraints = 0 a single group is used, which is
// exactly standard beam search.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "nocrek/errors.hpp"
#include "nocrek/knowledge.hpp"
#include "nocrek/linalg.hpp"
#include "nocrek/metrics.hpp"
#include "nocrek/model.hpp"
#include "nocrek/retrieval.hpp"
#include "nocrek/rng.hpp"

namespace nocrek {

struct DecodeConfig {
    std::size_t beam_size = 5;
    std::size_t k_vocab = 5;
    std::size_t min_constraints = 1;
    std::size_t max_len = 20;
    std::size_t pseudo_tags = 0;  // 0 means k_vocab mask slots in step 1
    double temperature = 1.0;     // sampling only

    std::size_t pseudo_tag_count() const { return pseudo_tags == 0 ? k_vocab : pseudo_tags; }
};

struct BeamState {
    std::vector<std::size_t> tokens;  // chosen ids, stop token excluded
    std::vector<double> step_logprobs;
    double logprob = 0.0;
    std::uint32_t constraint_mask = 0;
    bool finished = false;
};

struct GenerateResult {
    TokenSeq caption;
    std::vector<std::size_t> caption_ids;
    double logprob = 0.0;
    std::vector<double> step_logprobs;
    RetrievalResult retrieval;
    std::vector<std::string> constraints;  // tracked terms, strongest first
    std::uint32_t satisfied_mask = 0;
    bool fallback = false;  // no finished beam met min_constraints
};

namespace detail {

inline std::vector<WordSlot> decode_words(const std::vector<std::size_t>& prefix,
                                          std::size_t max_len) {
    std::vector<WordSlot> words(max_len, WordSlot{true, 0});
    for (std::size_t i = 0; i < prefix.size() && i < max_len; ++i)
        words[i] = {false, prefix[i]};
    return words;
}

inline std::vector<TagSlot> pseudo_tag_slots(std::size_t n) {
    return std::vector<TagSlot>(n, TagSlot{true, {}});
}

inline Vec log_softmax(const Vec& logits) {
    Vec out(logits.size());
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
    return out;
}

// Logits for the next position given the already-chosen prefix.
inline Vec next_position_logits(const ModelParams& params, const Vocabulary& vocab,
                                const std::vector<std::size_t>& prefix,
                                const std::vector<std::string>& vocab_terms,
                                const std::vector<RoiVector>& rois, const KnowledgeStore& store,
                                std::size_t max_len, ForwardResult* keep_trace = nullptr) {
    const auto words = decode_words(prefix, max_len);
    auto out = forward_generation(params, vocab, words, vocab_terms, rois, store,
                                  keep_trace != nullptr);
    // Masked positions are sorted ascending, so row 0 is the fill position.
    Vec logits = out.masked_logits.at(0);
    if (keep_trace) *keep_trace = std::move(out);
    return logits;
}

inline bool term_tokens_known(const Vocabulary& vocab, const TokenSeq& toks) {
    for (const auto& t : toks)
        if (!vocab.has(t)) return false;
    return true;
}

inline std::uint32_t constraint_mask_for(const std::vector<std::size_t>& tokens,
                                         const std::vector<std::vector<std::size_t>>& patterns) {
    std::uint32_t mask = 0;
    for (std::size_t c = 0; c < patterns.size(); ++c) {
        const auto& pat = patterns[c];
        if (pat.empty() || pat.size() > tokens.size()) continue;
        for (std::size_t i = 0; i + pat.size() <= tokens.size(); ++i) {
            bool hit = true;
            for (std::size_t j = 0; j < pat.size(); ++j)
                if (tokens[i + j] != pat[j]) { hit = false; break; }
            if (hit) {
                mask |= (1u << c);
                break;
            }
        }
    }
    return mask;
}

inline bool beam_before(const BeamState& a, const BeamState& b) {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    return a.tokens < b.tokens;  // deterministic tie order
}

} // namespace detail

// Step-1 retrieval on pseudo-mask inputs, shared by all decoding paths.
inline RetrievalResult inference_retrieval(const ModelParams& params, const Vocabulary& vocab,
                                           const std::vector<RoiVector>& rois,
                                           const KnowledgeStore& store, const DecodeConfig& cfg) {
    if (store.size() == 0)
        throw EmptyStoreError("generate: knowledge store is empty");
    const auto words = detail::decode_words({}, cfg.max_len);
    const auto tags = detail::pseudo_tag_slots(cfg.pseudo_tag_count());
    const auto out = forward_pass(params, vocab, words, tags, rois, store, false);
    std::vector<RegionFeature> feats;
    for (std::size_t i = 0; i < out.region_features.rows; ++i)
        feats.push_back({Vec(out.region_features.row(i),
                             out.region_features.row(i) + out.region_features.cols),
                         i});
    return retrieve_with_vocab(feats, store, cfg.k_vocab);
}

inline GenerateResult generate(const ModelParams& params, const Vocabulary& vocab,
                               const std::vector<RoiVector>& rois, const KnowledgeStore& store,
                               const DecodeConfig& cfg) {
    if (cfg.beam_size < 1 || cfg.max_len < 1)
        throw ConfigInvalidError("generate: beam_size and max_len must be positive");
    GenerateResult result;
    result.retrieval = inference_retrieval(params, vocab, rois, store, cfg);

    std::vector<std::string> vocab_terms;
    for (const auto& st : result.retrieval.top_vocab) vocab_terms.push_back(st.term);

    // Track up to three constraints whose tokens the decoder can emit.
    std::vector<std::vector<std::size_t>> patterns;
    for (const auto& term : vocab_terms) {
        if (result.constraints.size() == 3) break;
        const TokenSeq toks = split_term_tokens(term);
        if (!detail::term_tokens_known(vocab, toks)) continue;
        std::vector<std::size_t> pat;
        for (const auto& t : toks) pat.push_back(vocab.id(t));
        result.constraints.push_back(term);
        patterns.push_back(std::move(pat));
    }
    const bool grouped = cfg.min_constraints > 0 && !patterns.empty();

    // group key -> beam pool; key 0 holds everything when ungrouped
    std::vector<std::vector<BeamState>> groups(grouped ? (1u << patterns.size()) : 1);
    groups[0].push_back({});

    for (std::size_t t = 0; t < cfg.max_len; ++t) {
        bool any_live = false;
        std::vector<std::vector<BeamState>> next(groups.size());
        for (const auto& pool : groups) {
            for (const auto& beam : pool) {
                if (beam.finished) {
                    next[grouped ? beam.constraint_mask : 0].push_back(beam);
                    continue;
                }
                any_live = true;
                const Vec logits = detail::next_position_logits(
                    params, vocab, beam.tokens, vocab_terms, rois, store, cfg.max_len);
                const Vec logp = detail::log_softmax(logits);
                for (std::size_t w = 0; w < logp.size(); ++w) {
                    BeamState cand = beam;
                    cand.logprob += logp[w];
                    cand.step_logprobs.push_back(logp[w]);
                    if (w == vocab.stop_id) {
                        cand.finished = true;
                    } else {
                        cand.tokens.push_back(w);
                        cand.constraint_mask =
                            detail::constraint_mask_for(cand.tokens, patterns);
                    }
                    next[grouped ? cand.constraint_mask : 0].push_back(std::move(cand));
                }
            }
        }
        if (!any_live) break;
        for (auto& pool : next) {
            std::sort(pool.begin(), pool.end(), detail::beam_before);
            if (pool.size() > cfg.beam_size) pool.resize(cfg.beam_size);
        }
        groups = std::move(next);
    }

    // Everything still unfinished ran into the length cap.
    const BeamState* best_ok = nullptr;
    const BeamState* best_any = nullptr;
    for (const auto& pool : groups) {
        for (const auto& beam : pool) {
            if (!best_any || detail::beam_before(beam, *best_any)) best_any = &beam;
            const std::uint32_t effective_mask =
                grouped ? beam.constraint_mask
                        : detail::constraint_mask_for(beam.tokens, patterns);
            if (std::popcount(effective_mask) >= static_cast<int>(cfg.min_constraints)) {
                if (!best_ok || detail::beam_before(beam, *best_ok)) best_ok = &beam;
            }
        }
    }
    const BeamState* winner = best_ok ? best_ok : best_any;
    result.fallback = best_ok == nullptr;
    if (winner) {
        result.caption_ids = winner->tokens;
        result.logprob = winner->logprob;
        result.step_logprobs = winner->step_logprobs;
        result.satisfied_mask = detail::constraint_mask_for(winner->tokens, patterns);
        for (std::size_t id : winner->tokens) result.caption.push_back(vocab.tokens[id]);
    }
    return result;
}

// One sampled caption plus everything stage 2 needs to differentiate its
// log-probability: a recorded trace, the chosen id and the softmax
// distribution for every step.
struct SampleOutput {
    TokenSeq caption;
    std::vector<std::size_t> caption_ids;
    double logprob = 0.0;
    RetrievalResult retrieval;
    struct Step {
        ForwardResult forward;   // trace present when recording
        std::size_t chosen = 0;
        Vec probs;               // softmax at the sampling temperature
    };
    std::vector<Step> steps;
};

inline SampleOutput sample_caption_full(const ModelParams& params, const Vocabulary& vocab,
                                        const std::vector<RoiVector>& rois,
                                        const KnowledgeStore& store, const DecodeConfig& cfg,
                                        Rng& rng, bool record_traces) {
    if (cfg.temperature <= 0.0)
        throw ConfigInvalidError("sample_caption: temperature must be positive");
    SampleOutput out;
    out.retrieval = inference_retrieval(params, vocab, rois, store, cfg);
    std::vector<std::string> vocab_terms;
    for (const auto& st : out.retrieval.top_vocab) vocab_terms.push_back(st.term);

    for (std::size_t t = 0; t < cfg.max_len; ++t) {
        SampleOutput::Step step;
        ForwardResult kept;
        Vec logits = detail::next_position_logits(params, vocab, out.caption_ids, vocab_terms,
                                                  rois, store, cfg.max_len,
                                                  record_traces ? &kept : nullptr);
        Vec scaled(logits.size());
        for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] / cfg.temperature;
        const Vec logp = detail::log_softmax(scaled);
        step.probs.resize(logp.size());
        for (std::size_t i = 0; i < logp.size(); ++i) step.probs[i] = std::exp(logp[i]);

        // Inverse-CDF draw in fixed index order.
        const double u = rng.uniform();
        double acc = 0.0;
        std::size_t chosen = step.probs.size() - 1;
        for (std::size_t i = 0; i < step.probs.size(); ++i) {
            acc += step.probs[i];
            if (u < acc) {
                chosen = i;
                break;
            }
        }
        step.chosen = chosen;
        out.logprob += logp[chosen];
        if (record_traces) step.forward = std::move(kept);
        out.steps.push_back(std::move(step));
        if (chosen == vocab.stop_id) break;
        out.caption_ids.push_back(chosen);
    }
    for (std::size_t id : out.caption_ids) out.caption.push_back(vocab.tokens[id]);
    return out;
}

inline std::pair<TokenSeq, double> sample_caption(const ModelParams& params,
                                                  const Vocabulary& vocab,
                                                  const std::vector<RoiVector>& rois,
                                                  const KnowledgeStore& store,
                                                  const DecodeConfig& cfg, Rng& rng) {
    const auto out = sample_caption_full(params, vocab, rois, store, cfg, rng, false);
    return {out.caption, out.logprob};
}

// Greedy argmax decode (ties toward the lowest id); the self-critical
// baseline for stage 2.
inline GenerateResult greedy_caption(const ModelParams& params, const Vocabulary& vocab,
                                     const std::vector<RoiVector>& rois,
                                     const KnowledgeStore& store, const DecodeConfig& cfg) {
    GenerateResult result;
    result.retrieval = inference_retrieval(params, vocab, rois, store, cfg);
    std::vector<std::string> vocab_terms;
    for (const auto& st : result.retrieval.top_vocab) vocab_terms.push_back(st.term);

    for (std::size_t t = 0; t < cfg.max_len; ++t) {
        const Vec logits = detail::next_position_logits(params, vocab, result.caption_ids,
                                                        vocab_terms, rois, store, cfg.max_len);
        const Vec logp = detail::log_softmax(logits);
        std::size_t best = 0;
        for (std::size_t i = 1; i < logp.size(); ++i)
            if (logp[i] > logp[best]) best = i;
        result.logprob += logp[best];
        result.step_logprobs.push_back(logp[best]);
        if (best == vocab.stop_id) break;
        result.caption_ids.push_back(best);
    }
    for (std::size_t id : result.caption_ids) result.caption.push_back(vocab.tokens[id]);
    return result;
}

} // namespace nocrek
