#include <catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "nocrek/metrics.hpp"

using namespace nocrek;

namespace {

// Independent TF-IDF/cosine recomputation, written the long way so it
// shares no code with CiderScorer.
double oracle_cider_item(const std::vector<TokenSeq>& corpus_cands,
                         const std::vector<std::vector<TokenSeq>>& corpus_refs,
                         std::size_t item) {
    const double corpus_size = static_cast<double>(corpus_refs.size());
    auto ngrams = [](const TokenSeq& toks, std::size_t n) {
        std::map<std::string, double> counts;
        for (std::size_t i = 0; i + n <= toks.size(); ++i) {
            std::string key;
            for (std::size_t j = 0; j < n; ++j) key += toks[i + j] + "|";
            counts[key] += 1.0;
        }
        return counts;
    };

    double item_score = 0.0;
    for (std::size_t n = 1; n <= 4; ++n) {
        // Document frequency over reference sets.
        std::map<std::string, double> df;
        for (const auto& refs : corpus_refs) {
            std::map<std::string, bool> seen;
            for (const auto& ref : refs)
                for (const auto& kv : ngrams(ref, n)) seen[kv.first] = true;
            for (const auto& kv : seen) df[kv.first] += 1.0;
        }
        auto idf = [&](const std::string& key) {
            const double d = df.count(key) ? df.at(key) : 0.0;
            return std::log(corpus_size / (1.0 + d));
        };
        auto weigh = [&](const std::map<std::string, double>& counts) {
            std::map<std::string, double> w;
            for (const auto& kv : counts) w[kv.first] = kv.second * idf(kv.first);
            return w;
        };
        const auto cand = weigh(ngrams(corpus_cands[item], n));
        double mean_cos = 0.0;
        for (const auto& ref_seq : corpus_refs[item]) {
            const auto ref = weigh(ngrams(ref_seq, n));
            double dot = 0.0, na = 0.0, nb = 0.0;
            for (const auto& kv : cand) {
                na += kv.second * kv.second;
                if (ref.count(kv.first)) dot += kv.second * ref.at(kv.first);
            }
            for (const auto& kv : ref) nb += kv.second * kv.second;
            mean_cos += (na == 0.0 || nb == 0.0) ? 0.0 : dot / (std::sqrt(na) * std::sqrt(nb));
        }
        mean_cos /= static_cast<double>(corpus_refs[item].size());
        item_score += 10.0 * mean_cos;
    }
    return item_score / 4.0;
}

TokenSeq toks(std::initializer_list<const char*> words) {
    TokenSeq out;
    for (const char* w : words) out.emplace_back(w);
    return out;
}

} // namespace

TEST_CASE("cider matches a hand TF-IDF oracle on a 3-item corpus") {
    const std::vector<TokenSeq> cands = {
        toks({"a", "cat", "sits", "on", "the", "mat"}),
        toks({"a", "dog", "runs", "in", "the", "park"}),
        toks({"the", "bird", "sings", "on", "a", "branch"}),
    };
    const std::vector<std::vector<TokenSeq>> refs = {
        {toks({"a", "cat", "sits", "on", "a", "mat"}),
         toks({"the", "cat", "rests", "on", "the", "mat"})},
        {toks({"a", "dog", "runs", "in", "the", "park"})},
        {toks({"a", "bird", "sings", "from", "a", "branch"}),
         toks({"the", "bird", "perches", "on", "the", "branch"})},
    };
    const auto result = cider(cands, refs);
    for (std::size_t i = 0; i < cands.size(); ++i) {
        const double expect = oracle_cider_item(cands, refs, i);
        REQUIRE(result.per_item[i] == Catch::Approx(expect).margin(1e-9));
    }
    double mean = 0.0;
    for (double s : result.per_item) mean += s;
    REQUIRE(result.mean == Catch::Approx(mean / 3.0).margin(1e-12));
}

TEST_CASE("candidate sharing no n-gram with any reference scores 0") {
    const std::vector<TokenSeq> cands = {
        toks({"zig", "zag", "zog"}),
        toks({"a", "dog", "runs"}),
    };
    const std::vector<std::vector<TokenSeq>> refs = {
        {toks({"a", "cat", "sits"})},
        {toks({"a", "dog", "runs"})},
    };
    const auto result = cider(cands, refs);
    REQUIRE(result.per_item[0] == 0.0);
    REQUIRE(result.per_item[1] > 0.0);
}

TEST_CASE("cider is invariant under item order relabeling") {
    const std::vector<TokenSeq> cands = {
        toks({"a", "cat", "sits"}),
        toks({"a", "dog", "runs"}),
        toks({"the", "bird", "sings"}),
    };
    const std::vector<std::vector<TokenSeq>> refs = {
        {toks({"a", "cat", "sits", "here"})},
        {toks({"a", "dog", "runs", "fast"})},
        {toks({"the", "bird", "sings", "loudly"})},
    };
    const auto forward = cider(cands, refs);
    const std::vector<TokenSeq> cands_r = {cands[2], cands[0], cands[1]};
    const std::vector<std::vector<TokenSeq>> refs_r = {refs[2], refs[0], refs[1]};
    const auto reversed = cider(cands_r, refs_r);
    REQUIRE(forward.per_item[0] == Catch::Approx(reversed.per_item[1]).margin(1e-12));
    REQUIRE(forward.per_item[2] == Catch::Approx(reversed.per_item[0]).margin(1e-12));
    REQUIRE(forward.mean == Catch::Approx(reversed.mean).margin(1e-12));
}

TEST_CASE("perfect candidate beats a single-token perturbation") {
    const TokenSeq good = toks({"a", "small", "kettle", "rests", "on", "the", "shelf"});
    TokenSeq bad = good;
    bad[2] = "oovtoken";
    const std::vector<std::vector<TokenSeq>> refs = {
        {good},
        {toks({"a", "dog", "runs", "in", "the", "park"})},
        {toks({"the", "bird", "sings", "on", "a", "branch"})},
    };
    const auto with_good = cider({good, refs[1][0], refs[2][0]}, refs);
    const auto with_bad = cider({bad, refs[1][0], refs[2][0]}, refs);
    REQUIRE(with_good.per_item[0] > with_bad.per_item[0]);
}

TEST_CASE("cider input validation") {
    REQUIRE_THROWS_AS(cider({toks({"a"})}, {{toks({"a"})}}), CorpusTooSmallError);
    REQUIRE_THROWS_AS(cider({toks({"a"}), toks({"b"})}, {{toks({"a"})}, {}}),
                      EmptyReferenceSetError);
}

TEST_CASE("novel_f1 perfect predictor") {
    std::vector<LabeledCaption> scenes;
    for (int i = 0; i < 5; ++i)
        scenes.push_back({{"zebra"}, toks({"a", "zebra", "stands"})});
    for (int i = 0; i < 5; ++i)
        scenes.push_back({{"kettle"}, toks({"a", "kettle", "boils"})});
    const auto f = novel_f1(scenes, "zebra");
    REQUIRE(f.f1 == 1.0);
    REQUIRE(f.tp == 5);
    REQUIRE(f.fp == 0);
    REQUIRE(f.fn == 0);
}

TEST_CASE("novel_f1 class never mentioned") {
    std::vector<LabeledCaption> scenes = {
        {{"zebra"}, toks({"an", "animal", "stands"})},
        {{"kettle"}, toks({"a", "pot", "boils"})},
    };
    const auto f = novel_f1(scenes, "zebra");
    REQUIRE(f.f1 == 0.0);
    REQUIRE(f.recall == 0.0);
}

TEST_CASE("novel_f1 matches manual confusion counts on 10 labeled scenes") {
    // Hand-labeled: predictions for class "lantern".
    std::vector<LabeledCaption> scenes = {
        {{"lantern"}, toks({"a", "lantern", "glows"})},          // TP
        {{"lantern"}, toks({"a", "light", "glows"})},            // FN
        {{"lantern"}, toks({"the", "lantern", "hangs"})},        // TP
        {{"kettle"}, toks({"a", "lantern", "by", "a", "pot"})},  // FP
        {{"kettle"}, toks({"a", "kettle", "boils"})},            // TN
        {{"gourd"}, toks({"a", "gourd", "dries"})},              // TN
        {{"lantern", "gourd"}, toks({"a", "gourd", "sits"})},    // FN
        {{"gourd"}, toks({"a", "lantern", "again"})},            // FP
        {{"lantern"}, toks({"lantern"})},                        // TP
        {{"kettle"}, toks({"nothing", "here"})},                 // TN
    };
    const auto f = novel_f1(scenes, "lantern");
    REQUIRE(f.tp == 3);
    REQUIRE(f.fp == 2);
    REQUIRE(f.fn == 2);
    REQUIRE(f.precision == Catch::Approx(3.0 / 5.0));
    REQUIRE(f.recall == Catch::Approx(3.0 / 5.0));
    REQUIRE(f.f1 == Catch::Approx(0.6));
}

TEST_CASE("multi-word terms require contiguous token match") {
    std::vector<LabeledCaption> scenes = {
        {{"tea kettle"}, toks({"a", "tea", "kettle", "boils"})},
        {{"tea kettle"}, toks({"a", "kettle", "of", "tea"})},
        {{"gourd"}, toks({"x"})},
    };
    const auto f = novel_f1(scenes, "tea kettle");
    REQUIRE(f.tp == 1);
    REQUIRE(f.fn == 1);
}

TEST_CASE("novel_f1 ratios are invariant under duplicating the scene list") {
    std::vector<LabeledCaption> scenes = {
        {{"zebra"}, toks({"a", "zebra"})},
        {{"zebra"}, toks({"an", "animal"})},
        {{"kettle"}, toks({"a", "zebra", "oddly"})},
    };
    const auto once = novel_f1(scenes, "zebra");
    std::vector<LabeledCaption> doubled = scenes;
    doubled.insert(doubled.end(), scenes.begin(), scenes.end());
    const auto twice = novel_f1(doubled, "zebra");
    REQUIRE(twice.tp == 2 * once.tp);
    REQUIRE(twice.fp == 2 * once.fp);
    REQUIRE(twice.fn == 2 * once.fn);
    REQUIRE(twice.precision == Catch::Approx(once.precision));
    REQUIRE(twice.recall == Catch::Approx(once.recall));
    REQUIRE(twice.f1 == Catch::Approx(once.f1));
}

TEST_CASE("novel_f1 requires at least one scene") {
    REQUIRE_THROWS_AS(novel_f1({}, "zebra"), EmptySceneListError);
}

TEST_CASE("report serialization carries one row per class") {
    std::vector<LabeledCaption> scenes = {
        {{"zebra"}, toks({"a", "zebra"})},
        {{"kettle"}, toks({"a", "kettle"})},
    };
    const auto rep = make_f1_report(scenes, {"zebra", "kettle"});
    REQUIRE(rep.avg_f1 == Catch::Approx(1.0));
    const auto j = rep.to_json();
    REQUIRE(j["per_class"].size() == 2);
    const std::string csv = rep.to_csv();
    REQUIRE(csv.find("term,tp,fp,fn,precision,recall,f1") == 0);
    REQUIRE(csv.find("zebra") != std::string::npos);
    REQUIRE(csv.find("kettle") != std::string::npos);
}
