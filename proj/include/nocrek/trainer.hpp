#pragma once
// Two-stage end-to-end training over the synthetic dataset.
//
// Stage 1, per scene: mask a reference caption, run the retrieval pass with
// ground-truth tags, expand targets, match via the Hungarian assignment and
// apply the retrieval loss to the matched region features; then run the
// generation pass with the retrieved top-k vocabulary in the tag slots and
// apply masked cross-entropy. Both losses backpropagate into the one shared
// parameter set.
//
// Stage 2 keeps the retrieval loss and swaps the generation objective for
// self-critical sequence training: one sampled caption against the greedy
// baseline, rewarded by CIDEr plus a bonus per retrieved term appearing in
// the caption.
//
// Everything runs in fixed scene order with per-(stage, epoch, scene)
// derived RNG streams, so a seed determines the run byte for byte.

#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "nocrek/captioner.hpp"
#include "nocrek/eval.hpp"
#include "nocrek/knowledge.hpp"
#include "nocrek/losses.hpp"
#include "nocrek/matching.hpp"
#include "nocrek/model.hpp"
#include "nocrek/retrieval.hpp"
#include "nocrek/synthgen.hpp"

namespace nocrek {

struct StageHypers {
    double lr = 1e-3;
    std::size_t batch = 16;
    std::size_t epochs = 40;
    double weight_decay = 0.0;
    double grad_clip = 5.0;   // global-norm cap, 0 disables
    double alpha = 0.3;       // stage 2 vocabulary bonus
    double temperature = 1.0; // stage 2 sampling
    // Fraction of retrieval passes run on inference-style all-mask inputs.
    // Inference sees only pseudo-mask words and tags, so the retrieval head
    // must be trained to tolerate them; the generation pass always keeps the
    // real masked words.
    double pseudo_input_rate = 0.5;

    nlohmann::ordered_json to_json() const {
        return {{"lr", lr},
                {"batch", batch},
                {"epochs", epochs},
                {"weight_decay", weight_decay},
                {"grad_clip", grad_clip},
                {"alpha", alpha},
                {"temperature", temperature},
                {"pseudo_input_rate", pseudo_input_rate}};
    }

    static StageHypers from_json(const nlohmann::json& j) {
        StageHypers h;
        h.lr = j.value("lr", h.lr);
        h.batch = j.value("batch", h.batch);
        h.epochs = j.value("epochs", h.epochs);
        h.weight_decay = j.value("weight_decay", h.weight_decay);
        h.grad_clip = j.value("grad_clip", h.grad_clip);
        h.alpha = j.value("alpha", h.alpha);
        h.temperature = j.value("temperature", h.temperature);
        h.pseudo_input_rate = j.value("pseudo_input_rate", h.pseudo_input_rate);
        return h;
    }
};

// The full-scale schedule, kept as a named profile for runs that ingest
// real precomputed features.
inline StageHypers paper_stage1_hypers() { return {3e-5, 128, 30, 0.01, 0.0, 0.3, 1.0}; }
inline StageHypers paper_stage2_hypers() { return {8e-7, 6, 25, 0.01, 0.0, 0.3, 1.0}; }

struct StepLog {
    int stage = 1;
    std::size_t epoch = 0;
    std::size_t step = 0;
    double loss_h = 0.0;
    double loss_g = 0.0;
    double reward = 0.0;
    bool has_reward = false;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j{{"stage", stage}, {"epoch", epoch},     {"step", step},
                                 {"loss_h", loss_h}, {"loss_g", loss_g}};
        if (has_reward) j["reward"] = reward;
        return j;
    }
};

struct TrainRun {
    Checkpoint checkpoint;
    std::vector<StepLog> log;

    void write_log(const std::string& path) const {
        std::ofstream out(path, std::ios::trunc);
        if (!out)
            throw IoFailureError("write_log: cannot open " + path);
        for (const auto& entry : log) out << entry.to_json().dump() << "\n";
    }
};

namespace detail {

inline void guard_finite(double loss, const char* what) {
    if (!std::isfinite(loss))
        throw TrainingDivergedError(std::string("training diverged: non-finite ") + what);
}

// Words for one training example: a reference caption (rotated by epoch)
// with the stop token appended, truncated to the model's window.
inline std::vector<std::size_t> training_word_ids(const Scene& scene, const Vocabulary& vocab,
                                                  std::size_t epoch, std::size_t max_words) {
    const TokenSeq& ref = scene.references[epoch % scene.references.size()];
    std::vector<std::size_t> ids;
    for (const auto& tok : ref) ids.push_back(vocab.id(tok));
    ids.push_back(vocab.stop_id);
    if (ids.size() > max_words) ids.resize(max_words);
    return ids;
}

// Retrieval-loss part shared by both stages. Returns the loss value and
// accumulates parameter gradients.
inline double retrieval_step(const ModelParams& params, const Vocabulary& vocab,
                             const Scene& scene, const KnowledgeStore& store, Rng& rng,
                             std::size_t epoch, double pseudo_input_rate,
                             ModelParams& grad_accum,
                             std::vector<std::string>* top_terms_out,
                             std::vector<std::size_t>* gt_ids_out,
                             std::vector<WordSlot>* masked_words_out) {
    const auto word_ids = training_word_ids(scene, vocab, epoch, params.config.max_words);
    auto [masked_words, masked_positions] = mask_words(word_ids, rng);

    ForwardResult fwd1;
    if (rng.uniform() < pseudo_input_rate) {
        // Inference-style pass: every word and tag slot is a mask token.
        std::vector<WordSlot> pseudo_words(word_ids.size(), WordSlot{true, 0});
        std::vector<TagSlot> pseudo_tags(std::min<std::size_t>(params.config.max_tags, 5),
                                         TagSlot{true, {}});
        fwd1 = forward_pass(params, vocab, pseudo_words, pseudo_tags, scene.rois, store);
    } else {
        fwd1 = forward_retrieval(params, vocab, masked_words, scene.tags, scene.rois, store);
    }
    std::vector<RegionFeature> feats;
    for (std::size_t i = 0; i < fwd1.region_features.rows; ++i)
        feats.push_back({Vec(fwd1.region_features.row(i),
                             fwd1.region_features.row(i) + fwd1.region_features.cols),
                         i});

    const TargetSet targets = expand_targets(scene.tags, params.config.roi_count, store, rng);
    RetrievalResult retrieved = retrieve_per_region(feats, store);
    const Mat cost = matching_cost_matrix(targets, retrieved, store);
    const Assignment assignment = hungarian(cost);
    const HungarianLoss h = hungarian_loss(targets, assignment, feats, store);
    guard_finite(h.loss, "retrieval loss");
    accumulate(grad_accum, backward(fwd1, h.grad, {}));

    if (top_terms_out) {
        const std::size_t k = std::min<std::size_t>(params.config.max_tags, 5);
        std::vector<std::string> terms;
        for (const auto& st : top_k_vocab(retrieved, k)) terms.push_back(st.term);
        *top_terms_out = std::move(terms);
    }
    if (gt_ids_out) {
        gt_ids_out->clear();
        for (std::size_t pos : masked_positions) gt_ids_out->push_back(word_ids[pos]);
    }
    if (masked_words_out) *masked_words_out = std::move(masked_words);
    return h.loss;
}

inline void scale_grads(ModelParams& grads, double factor) {
    grads.visit([&](const std::string&, Mat& m) {
        for (double& v : m.a) v *= factor;
    });
}

} // namespace detail

inline TrainRun train_stage1(const std::vector<Scene>& data, const KnowledgeStore& store,
                             const Vocabulary& vocab, const ModelConfig& model_config,
                             const StageHypers& hypers, std::uint64_t seed) {
    for (const auto& scene : data)
        for (const auto& tag : scene.tags)
            if (!store.contains(tag))
                throw UnknownTermError("train_stage1: tag not in store: " + tag);

    Rng root(seed);
    Rng init_rng = root.derive(100);
    ModelParams params = init_params(model_config, init_rng);
    AdamWState opt_state = AdamWState::init(params);
    AdamWConfig opt{hypers.lr, 0.9, 0.999, 1e-8, hypers.weight_decay};

    TrainRun run;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < hypers.epochs; ++epoch) {
        for (std::size_t start = 0; start < data.size(); start += hypers.batch) {
            const std::size_t end = std::min(data.size(), start + hypers.batch);
            ModelParams grad_accum = zeros_like(params);
            double batch_h = 0.0, batch_g = 0.0;
            for (std::size_t s = start; s < end; ++s) {
                Rng rng = root.derive(1, epoch, data[s].scene_id);
                std::vector<std::string> top_terms;
                std::vector<std::size_t> gt_ids;
                std::vector<WordSlot> masked_words;
                batch_h += detail::retrieval_step(params, vocab, data[s], store, rng, epoch,
                                                  hypers.pseudo_input_rate, grad_accum,
                                                  &top_terms, &gt_ids, &masked_words);

                auto fwd2 = forward_generation(params, vocab, masked_words, top_terms,
                                               data[s].rois, store);
                const MaskedCeLoss ce = masked_ce_loss(fwd2.masked_logits, gt_ids);
                detail::guard_finite(ce.loss, "generation loss");
                batch_g += ce.loss;
                accumulate(grad_accum, backward(fwd2, {}, ce.grad));
            }
            const double inv_n = 1.0 / static_cast<double>(end - start);
            detail::scale_grads(grad_accum, inv_n);
            clip_grad_norm(grad_accum, hypers.grad_clip);
            optimizer_step(params, grad_accum, opt_state, opt);
            run.log.push_back(StepLog{1, epoch, step++, batch_h * inv_n, batch_g * inv_n, 0.0,
                                      false});
        }
    }
    run.checkpoint = Checkpoint{std::move(params), vocab, store.revision(), std::move(opt_state)};
    return run;
}

inline TrainRun train_stage2(const Checkpoint& stage1, const std::vector<Scene>& data,
                             const KnowledgeStore& store, const StageHypers& hypers,
                             const DecodeConfig& decode, std::uint64_t seed) {
    if (stage1.params.layers.empty())
        throw ConfigInvalidError("train_stage2: stage-1 checkpoint required");
    ModelParams params = stage1.params;
    const Vocabulary& vocab = stage1.vocab;
    AdamWState opt_state = AdamWState::init(params);
    AdamWConfig opt{hypers.lr, 0.9, 0.999, 1e-8, hypers.weight_decay};

    std::vector<std::vector<TokenSeq>> corpus;
    for (const auto& scene : data) corpus.push_back(scene.references);
    const CiderScorer scorer(corpus);

    DecodeConfig sample_cfg = decode;
    sample_cfg.temperature = hypers.temperature;

    Rng root(seed);
    TrainRun run;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < hypers.epochs; ++epoch) {
        for (std::size_t start = 0; start < data.size(); start += hypers.batch) {
            const std::size_t end = std::min(data.size(), start + hypers.batch);
            ModelParams grad_accum = zeros_like(params);
            double batch_h = 0.0, batch_g = 0.0, batch_r = 0.0;
            for (std::size_t s = start; s < end; ++s) {
                const Scene& scene = data[s];
                Rng rng = root.derive(2, epoch, scene.scene_id);
                batch_h += detail::retrieval_step(params, vocab, scene, store, rng, epoch,
                                                  hypers.pseudo_input_rate, grad_accum,
                                                  nullptr, nullptr, nullptr);

                // Self-critical update on one sampled caption.
                const auto baseline = greedy_caption(params, vocab, scene.rois, store, decode);
                auto sampled = sample_caption_full(params, vocab, scene.rois, store, sample_cfg,
                                                   rng, true);
                std::vector<std::string> top_terms;
                for (const auto& t : sampled.retrieval.top_vocab) top_terms.push_back(t.term);

                auto reward_of = [&](const TokenSeq& caption) {
                    if (caption.empty()) return 0.0;
                    return scst_reward(caption, scene.references, top_terms, hypers.alpha,
                                       scorer)
                        .total;
                };
                const double r_base = reward_of(baseline.caption);
                const double r_sample = reward_of(sampled.caption);
                detail::guard_finite(r_sample, "sample reward");
                const double multiplier = scst_gradient(r_sample, r_base);
                batch_r += r_sample;
                batch_g += -multiplier;  // reward advantage of the sample

                if (multiplier != 0.0) {
                    for (auto& st : sampled.steps) {
                        const std::size_t n_rows = st.forward.masked_logits.size();
                        std::vector<Vec> grad_rows(n_rows);
                        for (std::size_t r = 0; r < n_rows; ++r)
                            grad_rows[r] = Vec(st.probs.size(), 0.0);
                        // d(-logp)/dlogits at the fill position; other masked
                        // rows do not enter the objective.
                        for (std::size_t wtok = 0; wtok < st.probs.size(); ++wtok) {
                            grad_rows[0][wtok] =
                                multiplier * ((wtok == st.chosen ? 1.0 : 0.0) - st.probs[wtok]) /
                                hypers.temperature;
                        }
                        accumulate(grad_accum, backward(st.forward, {}, grad_rows));
                    }
                }
            }
            const double inv_n = 1.0 / static_cast<double>(end - start);
            detail::scale_grads(grad_accum, inv_n);
            clip_grad_norm(grad_accum, hypers.grad_clip);
            optimizer_step(params, grad_accum, opt_state, opt);
            run.log.push_back(StepLog{2, epoch, step++, batch_h * inv_n, batch_g * inv_n,
                                      batch_r * inv_n, true});
        }
    }
    run.checkpoint = Checkpoint{std::move(params), vocab, store.revision(), std::move(opt_state)};
    return run;
}

// ----------------------------------------------------------------------
// Knowledge-update scenarios: evaluate one checkpoint under edited stores,
// never touching the parameters.

struct StoreScenario {
    std::string name;
    // Returns the edited store; the input is the full store by value.
    std::function<KnowledgeStore(KnowledgeStore)> edit;
};

inline StoreScenario scenario_baseline() {
    return {"full", [](KnowledgeStore s) { return s; }};
}

inline StoreScenario scenario_drop_percent(double percent, std::uint64_t seed) {
    return {"drop-" + std::to_string(static_cast<int>(percent)) + "pct",
            [percent, seed](KnowledgeStore s) {
                std::vector<std::string> terms;
                for (std::size_t i = 1; i < s.size(); ++i) terms.push_back(s.entry(i).term);
                Rng rng(seed);
                const std::size_t n_drop = static_cast<std::size_t>(
                    std::floor(percent / 100.0 * static_cast<double>(terms.size()) + 0.5));
                std::vector<std::string> doomed;
                for (std::size_t idx : rng.sample_without_replacement(terms.size(), n_drop))
                    doomed.push_back(terms[idx]);
                if (!doomed.empty()) s.remove_entries(doomed);
                return s;
            }};
}

inline StoreScenario scenario_drop_terms(std::string name, std::vector<std::string> terms) {
    return {std::move(name), [terms = std::move(terms)](KnowledgeStore s) {
                if (!terms.empty()) s.remove_entries(terms);
                return s;
            }};
}

struct ScenarioReport {
    std::string name;
    std::uint64_t store_revision = 0;
    std::size_t store_size = 0;
    RunReport report;
};

inline std::vector<ScenarioReport> run_knowledge_scenarios(
    const Checkpoint& checkpoint, const KnowledgeStore& full_store,
    const std::vector<StoreScenario>& scenarios, const std::vector<Scene>& eval_scenes,
    const DecodeConfig& decode, const std::vector<std::string>& classes) {
    std::vector<ScenarioReport> out;
    if (scenarios.empty()) {
        const auto base = scenario_baseline();
        KnowledgeStore edited = base.edit(full_store);
        out.push_back({base.name, edited.revision(), edited.size(),
                       evaluate_scenes(checkpoint.params, checkpoint.vocab, eval_scenes, edited,
                                       decode, classes)});
        return out;
    }
    for (const auto& sc : scenarios) {
        KnowledgeStore edited = sc.edit(full_store);
        out.push_back({sc.name, edited.revision(), edited.size(),
                       evaluate_scenes(checkpoint.params, checkpoint.vocab, eval_scenes, edited,
                                       decode, classes)});
    }
    return out;
}

} // namespace nocrek
