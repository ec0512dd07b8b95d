#pragma once
// Deterministic synthetic world: class prototypes, definition texts, and
// scenes with ROI features, tags and reference captions, split into seen
// and held-out novel classes.
//
// Construction: a class's prototype IS the hash embedding of its definition
// text, and object ROI features are that prototype plus Gaussian noise, so
// the region encoder has to learn the identity-on-span denoising map and
// retrieval ranks are analyzable. A novel class's definition concatenates
// the marker words of two seen parents (disjoint pairs across novel
// classes) plus a couple of fresh tokens: its embedding then lies mostly
// inside the span of seen embeddings, with overlap to each parent around
// 0.6 - high enough that the trained map carries novel regions to the
// right neighborhood, low enough that the novel term itself outranks both
// parents for its own regions. Background ROIs are small isotropic noise.

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nocrek/errors.hpp"
#include "nocrek/knowledge.hpp"
#include "nocrek/metrics.hpp"
#include "nocrek/model.hpp"
#include "nocrek/retrieval.hpp"
#include "nocrek/rng.hpp"

namespace nocrek {

struct WorldConfig {
    std::size_t n_seen_classes = 12;
    std::size_t n_novel_classes = 4;
    std::size_t scenes_train = 160;
    std::size_t scenes_test = 40;   // per test split
    std::size_t objects_min = 1;
    std::size_t objects_max = 3;
    std::size_t proposals_per_object = 2;  // noisy ROI copies, detector style
    std::size_t roi_count = 8;      // K per scene
    double sigma_f = 0.03;          // per-component object feature noise
    double sigma_bg = 0.05;         // background feature scale
    std::size_t knowledge_dim = 64; // D; roi feature width equals D
    std::uint64_t seed = 1;

    std::size_t roi_dim() const { return knowledge_dim + 6; }

    void validate() const {
        if (n_seen_classes < 2 || n_novel_classes < 1)
            throw ConfigInvalidError("world config: need at least 2 seen and 1 novel class");
        if (2 * n_novel_classes > n_seen_classes)
            throw ConfigInvalidError("world config: each novel class needs a disjoint parent pair");
        if (objects_min < 1 || objects_max < objects_min ||
            proposals_per_object < 1 || objects_max * proposals_per_object > roi_count)
            throw ConfigInvalidError("world config: bad objects_per_scene range");
        if (scenes_train < 1 || scenes_test < 2)
            throw ConfigInvalidError("world config: need scenes (>= 2 test for the metric corpus)");
        if (knowledge_dim < 8)
            throw ConfigInvalidError("world config: knowledge dimension too small");
        const std::size_t max_names = kSeenNamePool().size();
        if (n_seen_classes > max_names || n_novel_classes > kNovelNamePool().size())
            throw ConfigInvalidError("world config: more classes than curated names");
    }

    static const std::vector<std::string>& kSeenNamePool() {
        static const std::vector<std::string> pool = {
            "kettle", "lantern", "tripod", "satchel",  "gourd",     "mandolin",
            "decanter", "stylus", "hammock", "easel",  "terrarium", "sundial",
            "bellows", "spigot", "trowel", "carafe",   "quiver",    "abacus"};
        return pool;
    }
    static const std::vector<std::string>& kNovelNamePool() {
        static const std::vector<std::string> pool = {
            "samovar", "theodolite", "dulcimer", "palanquin", "astrolabe", "zither"};
        return pool;
    }

    nlohmann::ordered_json to_json() const {
        return {{"n_seen_classes", n_seen_classes}, {"n_novel_classes", n_novel_classes},
                {"scenes_train", scenes_train},     {"scenes_test", scenes_test},
                {"objects_min", objects_min},       {"objects_max", objects_max},
                {"proposals_per_object", proposals_per_object},
                {"roi_count", roi_count},           {"sigma_f", sigma_f},
                {"sigma_bg", sigma_bg},             {"knowledge_dim", knowledge_dim},
                {"seed", seed}};
    }

    static WorldConfig from_json(const nlohmann::json& j) {
        WorldConfig c;
        c.n_seen_classes = j.value("n_seen_classes", c.n_seen_classes);
        c.n_novel_classes = j.value("n_novel_classes", c.n_novel_classes);
        c.scenes_train = j.value("scenes_train", c.scenes_train);
        c.scenes_test = j.value("scenes_test", c.scenes_test);
        c.objects_min = j.value("objects_min", c.objects_min);
        c.objects_max = j.value("objects_max", c.objects_max);
        c.proposals_per_object = j.value("proposals_per_object", c.proposals_per_object);
        c.roi_count = j.value("roi_count", c.roi_count);
        c.sigma_f = j.value("sigma_f", c.sigma_f);
        c.sigma_bg = j.value("sigma_bg", c.sigma_bg);
        c.knowledge_dim = j.value("knowledge_dim", c.knowledge_dim);
        c.seed = j.value("seed", c.seed);
        return c;
    }
};

struct Scene {
    std::uint64_t scene_id = 0;
    std::vector<RoiVector> rois;       // object ROIs first, in tag order
    std::vector<std::string> tags;
    std::vector<TokenSeq> references;  // 1..5
    std::set<std::string> classes;

    void validate(std::size_t expected_rois) const {
        if (rois.size() != expected_rois)
            throw SchemaMismatchError("scene: roi count mismatch");
        if (references.empty() || references.size() > 5)
            throw SchemaMismatchError("scene: need 1..5 references");
        for (const auto& r : rois) r.validate();
        for (const auto& t : tags)
            if (!classes.count(t))
                throw SchemaMismatchError("scene: tag not in class set");
        for (const auto& ref : references) {
            bool mentions = false;
            for (const auto& cls : classes)
                mentions |= contains_contiguous(ref, split_term_tokens(cls));
            if (!mentions)
                throw SchemaMismatchError("scene: reference mentions no ground-truth class");
        }
    }
};

struct World {
    WorldConfig config;
    std::vector<std::string> grammar_tokens;
    std::vector<std::string> seen_classes;
    std::vector<std::string> novel_classes;
    Vocabulary vocab;
    KnowledgeStore store_seen;
    KnowledgeStore store_full;
    std::vector<std::pair<std::string, std::string>> novel_definitions;
    std::vector<Scene> train;
    std::vector<Scene> test_seen;
    std::vector<Scene> test_novel;
};

namespace detail {

inline const std::vector<std::string>& world_adjectives() {
    static const std::vector<std::string> v = {
        "small", "large", "rusty", "shiny", "pale", "dark", "striped", "spotted",
        "wooden", "metal", "round", "narrow", "broad", "dusty", "polished", "faded",
        "bright", "heavy", "slender", "curved", "antique", "plain", "glossy", "matte",
        "crooked", "smooth", "rough", "sturdy", "fragile", "ornate", "tall", "short",
        "worn", "gilded", "lacquered", "woven", "tarnished", "painted", "cracked", "mossy"};
    return v;
}

inline const std::vector<std::string>& world_verbs() {
    static const std::vector<std::string> v = {
        "sits", "rests", "stands", "leans", "lies", "waits", "hangs", "floats",
        "tilts", "perches", "settles", "balances", "sprawls", "nestles", "looms",
        "crouches", "dangles", "teeters", "slumps", "gleams", "sways", "hides",
        "rises", "drifts"};
    return v;
}

inline const std::vector<std::string>& world_preps() {
    static const std::vector<std::string> v = {"near", "beside", "under", "above", "behind",
                                               "against", "atop", "along", "before", "past",
                                               "inside", "outside", "below", "beyond"};
    return v;
}

inline const std::vector<std::string>& world_bg_nouns() {
    static const std::vector<std::string> v = {
        "table", "floor", "shelf", "corner", "window", "bench", "doorway",
        "counter", "ledge", "mat", "rack", "stool", "cabinet", "rug", "curtain",
        "basin", "stairway", "alcove", "mantel", "pillar", "post", "sill", "hearth",
        "niche", "pedestal", "tray", "hook", "panel", "grate", "lattice", "awning",
        "banister", "parapet", "cornice", "plinth", "gable", "eave", "trellis",
        "arch", "beam", "railing", "step", "nook", "dais", "baseboard", "transom",
        "lintel", "stoop", "gantry", "balustrade"};
    return v;
}

inline const std::vector<std::string>& world_misc() {
    static const std::vector<std::string> v = {"a", "the", "there", "is", "and", "one",
                                               "with", "its"};
    return v;
}

// Nonce word of alternating consonants and vowels. Markers drawn this way
// share almost no character 3-grams across classes, which keeps unrelated
// definition embeddings near orthogonal.
inline std::string make_marker(Rng& rng) {
    static const char consonants[] = "bcdfghjklmnpqrstvwxz";
    static const char vowels[] = "aeiou";
    std::string m;
    for (int i = 0; i < 4; ++i) {
        m += consonants[rng.uniform_int(20)];
        m += vowels[rng.uniform_int(5)];
    }
    return m;
}

inline RoiVector make_roi(const Vec& feature, Rng& rng) {
    RoiVector r;
    r.feature = feature;
    const double x1 = 0.8 * rng.uniform();
    const double y1 = 0.8 * rng.uniform();
    const double w = 0.05 + (0.95 - x1 - 0.05) * rng.uniform();
    const double h = 0.05 + (0.95 - y1 - 0.05) * rng.uniform();
    const double x2 = x1 + w;
    const double y2 = y1 + h;
    r.box = {x1, y1, x2, y2, y2 - y1, x2 - x1};
    return r;
}

} // namespace detail

inline World generate_world(const WorldConfig& config) {
    config.validate();
    World world;
    world.config = config;
    Rng root(config.seed);

    // Class names and definitions. Each seen class gets six nonce marker
    // words; a novel class concatenates the markers of two disjoint seen
    // parents plus two fresh markers.
    for (std::size_t i = 0; i < config.n_seen_classes; ++i)
        world.seen_classes.push_back(WorldConfig::kSeenNamePool()[i]);
    for (std::size_t i = 0; i < config.n_novel_classes; ++i)
        world.novel_classes.push_back(WorldConfig::kNovelNamePool()[i]);

    // Definition texts are dominated by per-class nonce markers so seen
    // classes hash to near-orthogonal directions; common English glue would
    // otherwise give every pair a large baseline cosine and crowd novel
    // terms out of the top-k.
    Rng def_rng = root.derive(1);
    std::vector<std::vector<std::string>> seen_markers;
    std::vector<std::pair<std::string, std::string>> seen_defs;
    for (std::size_t i = 0; i < config.n_seen_classes; ++i) {
        std::vector<std::string> markers;
        for (int m = 0; m < 6; ++m) markers.push_back(detail::make_marker(def_rng));
        seen_markers.push_back(markers);
        std::string def = world.seen_classes[i];
        for (const auto& m : markers) def += " " + m;
        seen_defs.push_back({world.seen_classes[i], def});
    }
    // A novel definition is its name plus both parents' full marker sets.
    // The overlap with each parent must exceed roughly (1 + rho) / 2 (rho =
    // the parents' mutual cosine): the trained encoder maps a novel region
    // near the parent-pair bisector, and only above that overlap does the
    // novel term outrank its own parents there.
    for (std::size_t i = 0; i < config.n_novel_classes; ++i) {
        const std::size_t pa = 2 * i;
        const std::size_t pb = 2 * i + 1;
        std::string def = world.novel_classes[i];
        for (const auto& m : seen_markers[pa]) def += " " + m;
        for (const auto& m : seen_markers[pb]) def += " " + m;
        world.novel_definitions.push_back({world.novel_classes[i], def});
    }

    world.store_seen = KnowledgeStore(config.knowledge_dim);
    world.store_seen.add_entries(seen_defs);
    world.store_full = world.store_seen;
    world.store_full.add_entries(world.novel_definitions);

    // Word vocabulary: grammar plus every class term (novel ones included so
    // their token ids exist at training time, even though no training scene
    // ever uses them).
    for (const auto& pool : {detail::world_misc(), detail::world_adjectives(),
                             detail::world_verbs(), detail::world_preps(),
                             detail::world_bg_nouns()})
        for (const auto& tok : pool) world.grammar_tokens.push_back(tok);
    std::vector<std::string> class_terms = world.seen_classes;
    class_terms.insert(class_terms.end(), world.novel_classes.begin(),
                       world.novel_classes.end());
    world.vocab = Vocabulary::build(world.grammar_tokens, class_terms);

    // Scene synthesis.
    auto prototype = [&](const std::string& cls) -> const Vec& {
        return world.store_full.embedding_of(cls);
    };
    Vec mean_proto(config.knowledge_dim, 0.0);
    for (const auto& cls : world.seen_classes) {
        const Vec& e = prototype(cls);
        for (std::size_t c = 0; c < e.size(); ++c) mean_proto[c] += e[c];
    }
    normalize(mean_proto);
    auto pick = [](Rng& rng, const std::vector<std::string>& pool) {
        return pool[rng.uniform_int(pool.size())];
    };

    auto make_references = [&](Rng& rng, const std::vector<std::string>& classes) {
        std::vector<TokenSeq> refs;
        const std::size_t n_refs = 2 + rng.uniform_int(3);  // 2..4
        for (std::size_t r = 0; r < n_refs; ++r) {
            const std::size_t i1 = rng.uniform_int(classes.size());
            const std::string& c1 = classes[i1];
            const std::string adj = pick(rng, detail::world_adjectives());
            const std::string verb = pick(rng, detail::world_verbs());
            const std::string prep = pick(rng, detail::world_preps());
            const std::string bg = pick(rng, detail::world_bg_nouns());
            TokenSeq ref;
            switch (rng.uniform_int(4)) {
            case 0:
                ref = {"a", adj, c1, verb, prep, "the", bg};
                break;
            case 1:
                ref = {"there", "is", "a", adj, c1, prep, "the", bg};
                break;
            case 2:
                if (classes.size() >= 2) {
                    const std::size_t i2 =
                        (i1 + 1 + rng.uniform_int(classes.size() - 1)) % classes.size();
                    ref = {"a", c1, "and", "a", classes[i2], verb, prep, "the", bg};
                } else {
                    ref = {"a", c1, verb, prep, "the", bg};
                }
                break;
            default:
                ref = {"the", c1, verb, prep, "a", bg};
                break;
            }
            refs.push_back(std::move(ref));
        }
        return refs;
    };

    auto make_scene = [&](std::uint64_t id, Rng& rng,
                          const std::vector<std::string>& chosen_classes) {
        Scene scene;
        scene.scene_id = id;
        scene.tags = chosen_classes;
        scene.classes.insert(chosen_classes.begin(), chosen_classes.end());
        auto noisy_proposal = [&](const std::string& cls) {
            Vec f = prototype(cls);
            for (auto& x : f) x += config.sigma_f * rng.gaussian();
            return detail::make_roi(f, rng);
        };
        // One aligned ROI per tag first, then the remaining detector-style
        // proposals, then background fill.
        for (const auto& cls : chosen_classes) scene.rois.push_back(noisy_proposal(cls));
        for (std::size_t p = 1; p < config.proposals_per_object; ++p)
            for (const auto& cls : chosen_classes) {
                if (scene.rois.size() == config.roi_count) break;
                scene.rois.push_back(noisy_proposal(cls));
            }
        while (scene.rois.size() < config.roi_count) {
            // Background: small noise pushed away from the class span, so
            // these regions sit at negative cosine to every prototype and
            // retrieve no-object instead of an arbitrary nearest class.
            Vec f(config.knowledge_dim);
            for (auto& x : f) x = config.sigma_bg * rng.gaussian();
            for (std::size_t c = 0; c < f.size(); ++c) f[c] -= 0.3 * mean_proto[c];
            scene.rois.push_back(detail::make_roi(f, rng));
        }
        scene.references = make_references(rng, chosen_classes);
        return scene;
    };

    auto sample_classes = [&](Rng& rng, const std::vector<std::string>& pool, std::size_t n) {
        std::vector<std::string> out;
        for (std::size_t idx : rng.sample_without_replacement(pool.size(), n))
            out.push_back(pool[idx]);
        return out;
    };

    std::uint64_t next_id = 0;
    for (std::size_t s = 0; s < config.scenes_train; ++s) {
        Rng rng = root.derive(2, s);
        const std::size_t n_obj =
            config.objects_min + rng.uniform_int(config.objects_max - config.objects_min + 1);
        world.train.push_back(make_scene(next_id++, rng, sample_classes(rng, world.seen_classes, n_obj)));
    }
    for (std::size_t s = 0; s < config.scenes_test; ++s) {
        Rng rng = root.derive(3, s);
        const std::size_t n_obj =
            config.objects_min + rng.uniform_int(config.objects_max - config.objects_min + 1);
        world.test_seen.push_back(
            make_scene(next_id++, rng, sample_classes(rng, world.seen_classes, n_obj)));
    }
    for (std::size_t s = 0; s < config.scenes_test; ++s) {
        Rng rng = root.derive(4, s);
        // At least one novel object; occasionally a seen co-object.
        std::vector<std::string> chosen =
            sample_classes(rng, world.novel_classes, 1 + rng.uniform_int(2));
        if (rng.uniform() < 0.25 && chosen.size() < config.objects_max)
            chosen.push_back(world.seen_classes[rng.uniform_int(world.seen_classes.size())]);
        world.test_novel.push_back(make_scene(next_id++, rng, chosen));
    }
    return world;
}

// ----------------------------------------------------------------------
// Dataset persistence (JSON Lines, one scene per line)

inline void save_scenes(const std::vector<Scene>& scenes, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw IoFailureError("save_scenes: cannot open " + path);
    for (const auto& s : scenes) {
        nlohmann::ordered_json j;
        j["scene_id"] = s.scene_id;
        nlohmann::ordered_json rois = nlohmann::ordered_json::array();
        for (const auto& r : s.rois) {
            rois.push_back({{"feature", r.feature},
                            {"box", std::vector<double>(r.box.begin(), r.box.end())}});
        }
        j["rois"] = rois;
        j["tags"] = s.tags;
        j["references"] = s.references;
        j["classes"] = std::vector<std::string>(s.classes.begin(), s.classes.end());
        out << j.dump() << "\n";
    }
    if (!out)
        throw IoFailureError("save_scenes: write failed for " + path);
}

inline std::vector<Scene> load_scenes(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw IoFailureError("load_scenes: cannot open " + path);
    std::vector<Scene> scenes;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded())
            throw SchemaMismatchError("load_scenes: bad JSON line");
        Scene s;
        s.scene_id = j.value("scene_id", std::uint64_t{0});
        for (const auto& rj : j.at("rois")) {
            RoiVector r;
            r.feature = rj.at("feature").get<Vec>();
            const auto box = rj.at("box").get<std::vector<double>>();
            if (box.size() != 6)
                throw SchemaMismatchError("load_scenes: box must have 6 values");
            std::copy(box.begin(), box.end(), r.box.begin());
            r.validate();
            s.rois.push_back(std::move(r));
        }
        s.tags = j.at("tags").get<std::vector<std::string>>();
        for (const auto& ref : j.at("references"))
            s.references.push_back(ref.get<TokenSeq>());
        const auto classes = j.at("classes").get<std::vector<std::string>>();
        s.classes.insert(classes.begin(), classes.end());
        scenes.push_back(std::move(s));
    }
    return scenes;
}

// Definitions file without embeddings (they are recomputed at load).
inline void save_definitions(const std::vector<std::pair<std::string, std::string>>& defs,
                             std::size_t dimension, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out)
        throw IoFailureError("save_definitions: cannot open " + path);
    out << nlohmann::ordered_json{{"dimension", dimension}}.dump() << "\n";
    for (const auto& [term, def] : defs)
        out << nlohmann::ordered_json{{"term", term}, {"definition", def}}.dump() << "\n";
}

} // namespace nocrek
