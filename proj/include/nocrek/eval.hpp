#pragma once
// Evaluation over a scene set: decode every scene with the constrained beam
// search, then score retrieval accuracy, recall of listed classes inside the
// top-k vocabulary, per-class mention F1, CIDEr against the references, and
// the mean number of retrieved terms appearing in captions.

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "nocrek/captioner.hpp"
#include "nocrek/losses.hpp"
#include "nocrek/metrics.hpp"
#include "nocrek/model.hpp"
#include "nocrek/synthgen.hpp"

namespace nocrek {

struct SceneEval {
    std::uint64_t scene_id = 0;
    TokenSeq caption;
    std::vector<ScoredTerm> top_vocab;
    std::size_t vocab_hits = 0;
    bool fallback = false;
};

struct RunReport {
    std::size_t n_scenes = 0;
    double cider_mean = 0.0;
    double retrieval_top1_acc = 0.0;  // over object regions
    double recall_at_k = 0.0;         // listed classes found in top-k vocab
    double mean_vocab_hits = 0.0;
    EvalReport f1;                    // per-class mention F1 over `classes`
    std::vector<SceneEval> scenes;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["n_scenes"] = n_scenes;
        j["cider_mean"] = cider_mean;
        j["retrieval_top1_acc"] = retrieval_top1_acc;
        j["recall_at_k"] = recall_at_k;
        j["mean_vocab_hits"] = mean_vocab_hits;
        j["f1"] = f1.to_json();
        nlohmann::ordered_json per_scene = nlohmann::ordered_json::array();
        for (const auto& s : scenes) {
            nlohmann::ordered_json sj;
            sj["scene_id"] = s.scene_id;
            sj["caption"] = s.caption;
            nlohmann::ordered_json tv = nlohmann::ordered_json::array();
            for (const auto& t : s.top_vocab) tv.push_back({{"term", t.term}, {"score", t.score}});
            sj["top_vocab"] = tv;
            sj["vocab_hits"] = s.vocab_hits;
            sj["fallback"] = s.fallback;
            per_scene.push_back(std::move(sj));
        }
        j["scenes"] = per_scene;
        return j;
    }
};

inline RunReport evaluate_scenes(const ModelParams& params, const Vocabulary& vocab,
                                 const std::vector<Scene>& scene_list,
                                 const KnowledgeStore& store, const DecodeConfig& decode,
                                 const std::vector<std::string>& classes) {
    if (scene_list.empty())
        throw EmptySceneListError("evaluate_scenes: no scenes");
    RunReport report;
    report.n_scenes = scene_list.size();

    std::vector<TokenSeq> candidates;
    std::vector<std::vector<TokenSeq>> references;
    std::vector<LabeledCaption> labeled;
    std::size_t object_regions = 0, object_hits = 0;
    std::size_t recall_total = 0, recall_hits = 0;
    double hits_sum = 0.0;

    for (const auto& scene : scene_list) {
        const auto gen = generate(params, vocab, scene.rois, store, decode);
        SceneEval se;
        se.scene_id = scene.scene_id;
        se.caption = gen.caption;
        se.top_vocab = gen.retrieval.top_vocab;
        se.fallback = gen.fallback;

        std::vector<std::string> top_terms;
        for (const auto& t : gen.retrieval.top_vocab) top_terms.push_back(t.term);
        se.vocab_hits = count_vocab_hits(gen.caption, top_terms);
        hits_sum += static_cast<double>(se.vocab_hits);

        for (std::size_t i = 0; i < scene.tags.size(); ++i) {
            ++object_regions;
            if (gen.retrieval.per_region[i].term == scene.tags[i]) ++object_hits;
        }
        for (const auto& cls : classes) {
            if (!scene.classes.count(cls)) continue;
            ++recall_total;
            for (const auto& t : top_terms)
                if (t == cls) {
                    ++recall_hits;
                    break;
                }
        }

        candidates.push_back(gen.caption);
        references.push_back(scene.references);
        labeled.push_back({scene.classes, gen.caption});
        report.scenes.push_back(std::move(se));
    }

    report.cider_mean = cider(candidates, references).mean;
    report.retrieval_top1_acc =
        object_regions == 0 ? 0.0
                            : static_cast<double>(object_hits) / static_cast<double>(object_regions);
    report.recall_at_k =
        recall_total == 0 ? 0.0
                          : static_cast<double>(recall_hits) / static_cast<double>(recall_total);
    report.mean_vocab_hits = hits_sum / static_cast<double>(scene_list.size());
    report.f1 = make_f1_report(labeled, classes);
    report.f1.cider_mean = report.cider_mean;
    return report;
}

} // namespace nocrek
