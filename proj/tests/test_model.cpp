#include <catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "nocrek/model.hpp"

using namespace nocrek;

namespace {

struct Fixture {
    Vocabulary vocab;
    KnowledgeStore store{6};
    ModelConfig config;
    std::vector<RoiVector> rois;

    explicit Fixture(std::uint64_t seed = 1, bool roi_positions = true) {
        Rng rng(seed);
        vocab = Vocabulary::build({"a", "the", "sits", "near", "shelf", "wall", "small"},
                                  {"alpha", "beta"});
        store.add_entries({{"alpha", "a thing with fins and rivets"},
                           {"beta", "a woven basket of reeds"},
                           {"gamma", "a tall pole with a hook"}});
        config.d_model = 8;
        config.n_heads = 2;
        config.n_layers = 1;
        config.word_vocab_size = vocab.size();
        config.max_words = 6;
        config.max_tags = 3;
        config.roi_count = 3;
        config.roi_dim = 10;  // 4 feature values + 6 box values
        config.knowledge_dim = 6;
        config.d_ff = 16;
        config.roi_positions = roi_positions;
        for (std::size_t i = 0; i < config.roi_count; ++i) {
            RoiVector r;
            r.feature = {rng.gaussian(), rng.gaussian(), rng.gaussian(), rng.gaussian()};
            const double x1 = 0.1 * static_cast<double>(i), y1 = 0.2;
            const double x2 = x1 + 0.3, y2 = y1 + 0.4;
            r.box = {x1, y1, x2, y2, y2 - y1, x2 - x1};
            rois.push_back(r);
        }
    }

    ModelParams params(std::uint64_t seed = 7) const {
        Rng rng(seed);
        return init_params(config, rng);
    }

    std::vector<WordSlot> some_words() const {
        std::vector<WordSlot> w;
        w.push_back({false, vocab.id("a")});
        w.push_back({true, 0});
        w.push_back({false, vocab.id("alpha")});  // class-term token in a word slot
        w.push_back({false, vocab.id("sits")});
        w.push_back({true, 0});
        return w;
    }
};

double rel_err(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-4});
    return std::abs(a - b) / denom;
}

} // namespace

TEST_CASE("mask_words follows the 15% rule with cap 3 and floor 1") {
    Rng rng(3);
    SECTION("length 35 masks exactly 3") {
        std::vector<std::size_t> ids(35, 1);
        const auto [slots, positions] = mask_words(ids, rng);
        REQUIRE(positions.size() == 3);
    }
    SECTION("length 1 still masks one position") {
        const auto [slots, positions] = mask_words({4}, rng);
        REQUIRE(positions.size() == 1);
        REQUIRE(slots[0].masked);
    }
    SECTION("length 20 masks round(3.0) = 3") {
        std::vector<std::size_t> ids(20, 1);
        const auto [slots, positions] = mask_words(ids, rng);
        REQUIRE(positions.size() == 3);
    }
    SECTION("length 10 masks round(1.5) = 2") {
        std::vector<std::size_t> ids(10, 1);
        const auto [slots, positions] = mask_words(ids, rng);
        REQUIRE(positions.size() == 2);
    }
    SECTION("same seed gives identical positions") {
        std::vector<std::size_t> ids(12, 1);
        Rng a(55), b(55);
        REQUIRE(mask_words(ids, a).second == mask_words(ids, b).second);
    }
    SECTION("empty sequence rejected") {
        REQUIRE_THROWS_AS(mask_words({}, rng), EmptySequenceError);
    }
}

TEST_CASE("forward output shapes") {
    Fixture fx;
    ModelParams params = fx.params();
    const auto out = forward_retrieval(params, fx.vocab, fx.some_words(), {"alpha", "gamma"},
                                       fx.rois, fx.store);
    REQUIRE(out.region_features.rows == fx.config.roi_count);
    REQUIRE(out.region_features.cols == fx.config.knowledge_dim);
    REQUIRE(out.masked_positions.size() == 2);
    REQUIRE(out.masked_logits.size() == 2);
    for (const auto& row : out.masked_logits) REQUIRE(row.size() == fx.vocab.size());
}

TEST_CASE("forward is deterministic bit for bit") {
    Fixture fx;
    ModelParams params = fx.params();
    const auto a = forward_retrieval(params, fx.vocab, fx.some_words(), {"alpha"}, fx.rois,
                                     fx.store, false);
    const auto b = forward_retrieval(params, fx.vocab, fx.some_words(), {"alpha"}, fx.rois,
                                     fx.store, false);
    REQUIRE(a.region_features.a == b.region_features.a);
    REQUIRE(a.masked_logits == b.masked_logits);
}

TEST_CASE("generation pass with identical tag terms equals the retrieval pass") {
    Fixture fx;
    ModelParams params = fx.params();
    const std::vector<std::string> terms{"alpha", "beta"};
    const auto ret = forward_retrieval(params, fx.vocab, fx.some_words(), terms, fx.rois,
                                       fx.store, false);
    const auto gen = forward_generation(params, fx.vocab, fx.some_words(), terms, fx.rois,
                                        fx.store, false);
    REQUIRE(ret.masked_logits == gen.masked_logits);
    REQUIRE(ret.region_features.a == gen.region_features.a);
}

TEST_CASE("a parameter update is visible to both passes (shared parameters)") {
    Fixture fx;
    ModelParams params = fx.params();
    const auto before_ret = forward_retrieval(params, fx.vocab, fx.some_words(), {"alpha"},
                                              fx.rois, fx.store, false);
    params.region_head.a[0] += 0.5;
    const auto after_ret = forward_retrieval(params, fx.vocab, fx.some_words(), {"alpha"},
                                             fx.rois, fx.store, false);
    const auto after_gen = forward_generation(params, fx.vocab, fx.some_words(), {"alpha"},
                                              fx.rois, fx.store, false);
    REQUIRE(after_ret.region_features.a != before_ret.region_features.a);
    REQUIRE(after_ret.region_features.a == after_gen.region_features.a);
}

TEST_CASE("all-zero parameters give identical region features everywhere") {
    Fixture fx;
    ModelParams params = zeros_like(fx.params());
    params.config = fx.config;
    const auto out = forward_retrieval(params, fx.vocab, fx.some_words(), {"alpha"}, fx.rois,
                                       fx.store, false);
    for (std::size_t r = 1; r < out.region_features.rows; ++r)
        for (std::size_t c = 0; c < out.region_features.cols; ++c)
            REQUIRE(out.region_features(r, c) == out.region_features(0, c));
}

TEST_CASE("attention rows are probability vectors") {
    Fixture fx;
    ModelParams params = fx.params();
    const auto out = forward_retrieval(params, fx.vocab, fx.some_words(), {"alpha", "beta"},
                                       fx.rois, fx.store, false);
    REQUIRE(out.attention.size() == fx.config.n_layers * fx.config.n_heads);
    for (const Mat& attn : out.attention) {
        for (std::size_t r = 0; r < attn.rows; ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < attn.cols; ++c) {
                sum += attn(r, c);
                REQUIRE(attn(r, c) >= 0.0);
            }
            REQUIRE(std::abs(sum - 1.0) < 1e-9);
        }
    }
}

TEST_CASE("permuting ROI slots permutes region features when ROI positions are off") {
    Fixture fx(1, /*roi_positions=*/false);
    ModelParams params = fx.params();
    const auto base = forward_retrieval(params, fx.vocab, fx.some_words(), {"alpha"}, fx.rois,
                                        fx.store, false);
    std::vector<RoiVector> permuted{fx.rois[2], fx.rois[0], fx.rois[1]};
    const auto moved = forward_retrieval(params, fx.vocab, fx.some_words(), {"alpha"}, permuted,
                                         fx.store, false);
    const std::size_t D = fx.config.knowledge_dim;
    const std::size_t src[3] = {2, 0, 1};
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t c = 0; c < D; ++c)
            REQUIRE(moved.region_features(i, c) ==
                    Catch::Approx(base.region_features(src[i], c)).margin(1e-12));
}

TEST_CASE("forward validates input sizes") {
    Fixture fx;
    ModelParams params = fx.params();
    std::vector<WordSlot> too_many(fx.config.max_words + 1, WordSlot{true, 0});
    REQUIRE_THROWS_AS(
        forward_retrieval(params, fx.vocab, too_many, {}, fx.rois, fx.store, false),
        ShapeMismatchError);
    std::vector<RoiVector> wrong_count(fx.rois.begin(), fx.rois.end() - 1);
    REQUIRE_THROWS_AS(
        forward_retrieval(params, fx.vocab, fx.some_words(), {}, wrong_count, fx.store, false),
        ShapeMismatchError);
    REQUIRE_THROWS_AS(forward_retrieval(params, fx.vocab, fx.some_words(), {"missing"}, fx.rois,
                                        fx.store, false),
                      UnknownTermError);
}

TEST_CASE("full-model backward matches central finite differences") {
    Fixture fx;
    ModelParams params = fx.params(11);
    Rng rng(23);

    auto words = fx.some_words();
    const std::vector<std::string> tags{"alpha", "gamma"};

    // Linear objective over both outputs so the backward seeds are exact.
    Mat wr(fx.config.roi_count, fx.config.knowledge_dim);
    for (auto& v : wr.a) v = rng.gaussian();
    auto fwd = forward_retrieval(params, fx.vocab, words, tags, fx.rois, fx.store);
    std::vector<Vec> wl(fwd.masked_logits.size(), Vec(fx.vocab.size()));
    for (auto& row : wl)
        for (auto& v : row) v = rng.gaussian();

    auto objective = [&](const ModelParams& p) {
        const auto out = forward_retrieval(p, fx.vocab, words, tags, fx.rois, fx.store, false);
        double s = 0.0;
        for (std::size_t i = 0; i < out.region_features.size(); ++i)
            s += out.region_features.a[i] * wr.a[i];
        for (std::size_t r = 0; r < out.masked_logits.size(); ++r)
            for (std::size_t c = 0; c < out.masked_logits[r].size(); ++c)
                s += out.masked_logits[r][c] * wl[r][c];
        return s;
    };

    const ModelParams grads = backward(fwd, wr, wl);

    const double h = 1e-5;
    double max_rel = 0.0;
    std::vector<const Mat*> grad_list;
    grads.visit([&](const std::string&, const Mat& m) { grad_list.push_back(&m); });
    std::size_t tensor_idx = 0;
    params.visit([&](const std::string&, Mat& tensor) {
        const Mat& g = *grad_list[tensor_idx];
        for (std::size_t k = 0; k < tensor.size(); ++k) {
            const double keep = tensor.a[k];
            tensor.a[k] = keep + h;
            const double up = objective(params);
            tensor.a[k] = keep - h;
            const double down = objective(params);
            tensor.a[k] = keep;
            const double fd = (up - down) / (2.0 * h);
            max_rel = std::max(max_rel, rel_err(fd, g.a[k]));
        }
        ++tensor_idx;
    });
    REQUIRE(max_rel <= 1e-4);
}

TEST_CASE("gradient is zero for parameter blocks the loss does not touch") {
    Fixture fx;
    ModelParams params = fx.params();
    auto fwd = forward_retrieval(params, fx.vocab, fx.some_words(), {"alpha"}, fx.rois, fx.store);
    // Seed only the region features: the output head never participates.
    Mat wr(fx.config.roi_count, fx.config.knowledge_dim, 1.0);
    const ModelParams grads = backward(fwd, wr, {});
    for (double v : grads.out_head.a) REQUIRE(v == 0.0);
    for (double v : grads.out_bias.a) REQUIRE(v == 0.0);
    for (double v : grads.class_bias.a) REQUIRE(v == 0.0);
}

TEST_CASE("backward cannot run twice on the same trace") {
    Fixture fx;
    ModelParams params = fx.params();
    auto fwd = forward_retrieval(params, fx.vocab, fx.some_words(), {"alpha"}, fx.rois, fx.store);
    Mat wr(fx.config.roi_count, fx.config.knowledge_dim, 1.0);
    backward(fwd, wr, {});
    REQUIRE_THROWS_AS(backward(fwd, wr, {}), NoForwardRecordedError);

    const auto unrecorded = forward_retrieval(params, fx.vocab, fx.some_words(), {"alpha"},
                                              fx.rois, fx.store, false);
    REQUIRE_THROWS_AS(backward(unrecorded, wr, {}), NoForwardRecordedError);
}

TEST_CASE("optimizer fixed point with zero gradient and zero weight decay") {
    Fixture fx;
    ModelParams params = fx.params();
    const ModelParams before = params;
    AdamWState state = AdamWState::init(params);
    AdamWConfig cfg;
    cfg.lr = 1e-2;
    cfg.weight_decay = 0.0;
    optimizer_step(params, zeros_like(params), state, cfg);
    std::vector<const Mat*> ref;
    before.visit([&](const std::string&, const Mat& m) { ref.push_back(&m); });
    std::size_t i = 0;
    bool all_equal = true;
    params.visit([&](const std::string&, const Mat& m) {
        if (m.a != ref[i]->a) all_equal = false;
        ++i;
    });
    REQUIRE(all_equal);
}

TEST_CASE("optimizer applies decoupled weight decay") {
    Fixture fx;
    ModelParams params = fx.params();
    const double w0 = params.out_head.a[0];
    AdamWState state = AdamWState::init(params);
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.5;
    optimizer_step(params, zeros_like(params), state, cfg);
    REQUIRE(params.out_head.a[0] == Catch::Approx(w0 * (1.0 - 0.1 * 0.5)));
}

TEST_CASE("gradient clipping caps the global norm") {
    Fixture fx;
    ModelParams grads = zeros_like(fx.params());
    grads.out_head.a[0] = 30.0;
    grads.region_head.a[0] = 40.0;
    clip_grad_norm(grads, 5.0);
    double total = 0.0;
    grads.visit([&](const std::string&, const Mat& m) {
        for (double v : m.a) total += v * v;
    });
    REQUIRE(std::sqrt(total) == Catch::Approx(5.0));
    REQUIRE(grads.out_head.a[0] == Catch::Approx(3.0));
}

TEST_CASE("checkpoint round trip preserves everything byte for byte") {
    Fixture fx;
    Checkpoint ckpt;
    ckpt.params = fx.params(77);
    ckpt.vocab = fx.vocab;
    ckpt.knowledge_revision = 42;
    ckpt.optimizer = AdamWState::init(ckpt.params);
    ckpt.optimizer->t = 9;
    ckpt.optimizer->m.out_head.a[0] = 0.125;

    const auto dir = std::filesystem::temp_directory_path();
    const std::string p1 = (dir / "nocrek_ckpt_a.bin").string();
    const std::string p2 = (dir / "nocrek_ckpt_b.bin").string();
    save_checkpoint(ckpt, p1);
    Checkpoint loaded = load_checkpoint(p1);
    REQUIRE(loaded.knowledge_revision == 42);
    REQUIRE(loaded.vocab.tokens == fx.vocab.tokens);
    REQUIRE(loaded.optimizer.has_value());
    REQUIRE(loaded.optimizer->t == 9);
    REQUIRE(loaded.optimizer->m.out_head.a[0] == 0.125);
    REQUIRE(loaded.params.out_head.a == ckpt.params.out_head.a);

    save_checkpoint(loaded, p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(b1 == b2);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("roi box validation") {
    RoiVector bad;
    bad.feature = {0.0};
    bad.box = {0.5, 0.5, 0.2, 0.8, 0.3, -0.3};  // x2 < x1
    REQUIRE_THROWS_AS(bad.validate(), SchemaMismatchError);
    RoiVector inconsistent;
    inconsistent.feature = {0.0};
    inconsistent.box = {0.1, 0.1, 0.4, 0.5, 0.9, 0.3};  // height != y2 - y1
    REQUIRE_THROWS_AS(inconsistent.validate(), SchemaMismatchError);
    RoiVector good;
    good.feature = {0.0};
    good.box = {0.1, 0.1, 0.4, 0.5, 0.4, 0.3};
    REQUIRE_NOTHROW(good.validate());
}
