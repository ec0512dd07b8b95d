#pragma once
// The shared-parameter attention encoder. One parameter set serves both
// forward passes: Step 1 maps the concatenated sequence
// (words | SEP | tags | SEP | ROIs) to K region features for retrieval,
// Step 2 runs the identical network with the tag slots fed by retrieved
// vocabulary and reads masked-token logits for generation.
//
// Token handling: grammar tokens use the trainable embedding table and
// output-head columns. Single-word class terms that exist in the knowledge
// store instead derive both their input vector and their output logit from
// the frozen definition embedding through the trained tag projection
// (logit = <h, tag_proj(d_term)> + shared class bias). This stands in for
// the pretrained language model of the full-scale system: a term added to
// the store at inference time immediately has a usable word vector and
// logit path, without which a never-trained token id could not surface in
// a generated caption.
//
// Gradients come from a per-forward tape (autodiff.hpp); a ForwardTrace is
// consumed by exactly one backward call.

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "nocrek/autodiff.hpp"
#include "nocrek/errors.hpp"
#include "nocrek/knowledge.hpp"
#include "nocrek/linalg.hpp"
#include "nocrek/rng.hpp"

namespace nocrek {

// ----------------------------------------------------------------------
// Vocabulary

struct Vocabulary {
    static constexpr const char* kStopToken = "</s>";

    std::vector<std::string> tokens;
    std::vector<char> class_flags;  // token is a (single-word) class term
    std::unordered_map<std::string, std::size_t> index;
    std::size_t stop_id = 0;

    static Vocabulary build(const std::vector<std::string>& grammar_tokens,
                            const std::vector<std::string>& class_terms) {
        Vocabulary v;
        auto push = [&](const std::string& tok, bool is_class) {
            if (v.index.count(tok)) {
                if (is_class) v.class_flags[v.index[tok]] = 1;
                return;
            }
            v.index[tok] = v.tokens.size();
            v.tokens.push_back(tok);
            v.class_flags.push_back(is_class ? 1 : 0);
        };
        for (const auto& t : grammar_tokens) push(t, false);
        for (const auto& t : class_terms) push(t, true);
        push(kStopToken, false);
        v.stop_id = v.index[kStopToken];
        return v;
    }

    std::size_t size() const { return tokens.size(); }

    bool has(const std::string& tok) const { return index.count(tok) > 0; }

    std::size_t id(const std::string& tok) const {
        auto it = index.find(tok);
        if (it == index.end())
            throw UnknownTermError("vocabulary: unknown token: " + tok);
        return it->second;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["tokens"] = tokens;
        std::vector<int> flags(class_flags.begin(), class_flags.end());
        j["is_class_term"] = flags;
        return j;
    }

    static Vocabulary from_json(const nlohmann::json& j) {
        Vocabulary v;
        v.tokens = j.at("tokens").get<std::vector<std::string>>();
        const auto flags = j.at("is_class_term").get<std::vector<int>>();
        if (flags.size() != v.tokens.size())
            throw SchemaMismatchError("vocabulary: flag/token count mismatch");
        for (std::size_t i = 0; i < v.tokens.size(); ++i) {
            v.class_flags.push_back(static_cast<char>(flags[i]));
            v.index[v.tokens[i]] = i;
        }
        if (!v.has(kStopToken))
            throw SchemaMismatchError("vocabulary: missing stop token");
        v.stop_id = v.index.at(kStopToken);
        return v;
    }
};

// ----------------------------------------------------------------------
// Configuration and parameters

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_heads = 2;
    std::size_t n_layers = 2;
    std::size_t word_vocab_size = 0;
    std::size_t max_words = 35;   // L
    std::size_t max_tags = 20;    // N
    std::size_t roi_count = 50;   // K
    std::size_t roi_dim = 38;     // feature width + 6 box values
    std::size_t knowledge_dim = 64;
    std::size_t d_ff = 0;         // 0 means 4 * d_model
    bool roi_positions = true;

    std::size_t ff_width() const { return d_ff == 0 ? 4 * d_model : d_ff; }

    void validate() const {
        if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
            throw ConfigInvalidError("model config: d_model must divide by n_heads");
        if (roi_dim < 7)
            throw ConfigInvalidError("model config: roi_dim must be at least 7");
        if (n_layers == 0 || word_vocab_size == 0 || max_words == 0 || roi_count == 0)
            throw ConfigInvalidError("model config: zero-sized field");
    }

    nlohmann::ordered_json to_json() const {
        return {{"d_model", d_model},       {"n_heads", n_heads},
                {"n_layers", n_layers},     {"word_vocab_size", word_vocab_size},
                {"max_words", max_words},   {"max_tags", max_tags},
                {"roi_count", roi_count},   {"roi_dim", roi_dim},
                {"knowledge_dim", knowledge_dim}, {"d_ff", d_ff},
                {"roi_positions", roi_positions}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.d_model = j.value("d_model", c.d_model);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.n_layers = j.value("n_layers", c.n_layers);
        c.word_vocab_size = j.value("word_vocab_size", c.word_vocab_size);
        c.max_words = j.value("max_words", c.max_words);
        c.max_tags = j.value("max_tags", c.max_tags);
        c.roi_count = j.value("roi_count", c.roi_count);
        c.roi_dim = j.value("roi_dim", c.roi_dim);
        c.knowledge_dim = j.value("knowledge_dim", c.knowledge_dim);
        c.d_ff = j.value("d_ff", c.d_ff);
        c.roi_positions = j.value("roi_positions", c.roi_positions);
        return c;
    }
};

struct ModelParams {
    ModelConfig config;

    Mat tok_table;   // W x d
    Mat mask_emb;    // 1 x d
    Mat sep_emb;     // 1 x d
    Mat seg_emb;     // 4 x d: words, tags, rois, sep
    Mat pos_words;   // L x d
    Mat pos_tags;    // N x d
    Mat pos_rois;    // K x d
    Mat tag_proj_w;  // D x d
    Mat tag_proj_b;  // 1 x d
    Mat roi_proj_w;  // roi_dim x d
    Mat roi_proj_b;  // 1 x d

    struct Layer {
        Mat ln1_g, ln1_b;
        Mat wq, wk, wv, wo;
        Mat bq, bk, bv, bo;
        Mat ln2_g, ln2_b;
        Mat ff1_w, ff1_b;
        Mat ff2_w, ff2_b;
    };
    std::vector<Layer> layers;

    Mat lnf_g, lnf_b;
    Mat out_head;     // d x W
    Mat out_bias;     // 1 x W
    Mat class_bias;   // 1 x 1, shared by all store-backed class tokens
    Mat region_head;  // d x D
    Mat region_bias;  // 1 x D

    template <typename F>
    void visit(F&& f) {
        f("tok_table", tok_table);
        f("mask_emb", mask_emb);
        f("sep_emb", sep_emb);
        f("seg_emb", seg_emb);
        f("pos_words", pos_words);
        f("pos_tags", pos_tags);
        f("pos_rois", pos_rois);
        f("tag_proj_w", tag_proj_w);
        f("tag_proj_b", tag_proj_b);
        f("roi_proj_w", roi_proj_w);
        f("roi_proj_b", roi_proj_b);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            Layer& ly = layers[l];
            f(p + "ln1_g", ly.ln1_g);
            f(p + "ln1_b", ly.ln1_b);
            f(p + "wq", ly.wq);
            f(p + "wk", ly.wk);
            f(p + "wv", ly.wv);
            f(p + "wo", ly.wo);
            f(p + "bq", ly.bq);
            f(p + "bk", ly.bk);
            f(p + "bv", ly.bv);
            f(p + "bo", ly.bo);
            f(p + "ln2_g", ly.ln2_g);
            f(p + "ln2_b", ly.ln2_b);
            f(p + "ff1_w", ly.ff1_w);
            f(p + "ff1_b", ly.ff1_b);
            f(p + "ff2_w", ly.ff2_w);
            f(p + "ff2_b", ly.ff2_b);
        }
        f("lnf_g", lnf_g);
        f("lnf_b", lnf_b);
        f("out_head", out_head);
        f("out_bias", out_bias);
        f("class_bias", class_bias);
        f("region_head", region_head);
        f("region_bias", region_bias);
    }

    template <typename F>
    void visit(F&& f) const {
        const_cast<ModelParams*>(this)->visit(
            [&](const std::string& name, Mat& m) { f(name, const_cast<const Mat&>(m)); });
    }
};

inline ModelParams zeros_like(const ModelParams& p) {
    ModelParams z;
    z.config = p.config;
    z.layers.resize(p.layers.size());
    std::vector<const Mat*> shapes;
    p.visit([&](const std::string&, const Mat& m) { shapes.push_back(&m); });
    std::size_t i = 0;
    z.visit([&](const std::string&, Mat& m) {
        m = Mat(shapes[i]->rows, shapes[i]->cols);
        ++i;
    });
    return z;
}

inline ModelParams init_params(const ModelConfig& config, Rng& rng) {
    config.validate();
    ModelParams p;
    p.config = config;
    const std::size_t d = config.d_model;
    const std::size_t W = config.word_vocab_size;
    const std::size_t dff = config.ff_width();

    auto gauss = [&rng](Mat m, double std_dev) {
        for (auto& v : m.a) v = std_dev * rng.gaussian();
        return m;
    };
    auto linear = [&](std::size_t in, std::size_t out) {
        return gauss(Mat(in, out), 1.0 / std::sqrt(static_cast<double>(in)));
    };

    p.tok_table = gauss(Mat(W, d), 0.1);
    p.mask_emb = gauss(Mat(1, d), 0.1);
    p.sep_emb = gauss(Mat(1, d), 0.1);
    p.seg_emb = gauss(Mat(4, d), 0.1);
    p.pos_words = gauss(Mat(config.max_words, d), 0.1);
    p.pos_tags = gauss(Mat(config.max_tags, d), 0.1);
    p.pos_rois = gauss(Mat(config.roi_count, d), 0.1);
    p.tag_proj_w = linear(config.knowledge_dim, d);
    p.tag_proj_b = Mat(1, d);
    p.roi_proj_w = linear(config.roi_dim, d);
    p.roi_proj_b = Mat(1, d);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        ModelParams::Layer ly;
        ly.ln1_g = Mat(1, d, 1.0);
        ly.ln1_b = Mat(1, d);
        ly.wq = linear(d, d);
        ly.wk = linear(d, d);
        ly.wv = linear(d, d);
        ly.wo = linear(d, d);
        ly.bq = Mat(1, d);
        ly.bk = Mat(1, d);
        ly.bv = Mat(1, d);
        ly.bo = Mat(1, d);
        ly.ln2_g = Mat(1, d, 1.0);
        ly.ln2_b = Mat(1, d);
        ly.ff1_w = linear(d, dff);
        ly.ff1_b = Mat(1, dff);
        ly.ff2_w = linear(dff, d);
        ly.ff2_b = Mat(1, d);
        p.layers.push_back(std::move(ly));
    }
    p.lnf_g = Mat(1, d, 1.0);
    p.lnf_b = Mat(1, d);
    p.out_head = linear(d, W);
    p.out_bias = Mat(1, W);
    p.class_bias = Mat(1, 1);
    p.region_head = linear(d, config.knowledge_dim);
    p.region_bias = Mat(1, config.knowledge_dim);
    return p;
}

// ----------------------------------------------------------------------
// Inputs

struct RoiVector {
    Vec feature;                  // roi_dim - 6 values
    std::array<double, 6> box{};  // x1, y1, x2, y2, height, width in [0, 1]

    void validate() const {
        const double x1 = box[0], y1 = box[1], x2 = box[2], y2 = box[3];
        if (x2 < x1 || y2 < y1)
            throw SchemaMismatchError("roi: inverted box");
        if (std::abs(box[4] - (y2 - y1)) > 1e-6 || std::abs(box[5] - (x2 - x1)) > 1e-6)
            throw SchemaMismatchError("roi: height/width inconsistent with corners");
    }
};

struct WordSlot {
    bool masked = false;
    std::size_t id = 0;  // meaningful when not masked
};

struct TagSlot {
    bool masked = false;  // pseudo-tag at inference
    std::string term;     // meaningful when not masked
};

// Random 15% masking, at most 3 positions, at least 1 (short sequences would
// otherwise mask nothing and leave the CE loss without a target).
inline std::pair<std::vector<WordSlot>, std::vector<std::size_t>> mask_words(
    const std::vector<std::size_t>& word_ids, Rng& rng) {
    if (word_ids.empty())
        throw EmptySequenceError("mask_words: empty sequence");
    std::size_t n_mask = std::min<std::size_t>(
        3, static_cast<std::size_t>(std::floor(0.15 * static_cast<double>(word_ids.size()) + 0.5)));
    if (n_mask == 0) n_mask = 1;
    std::vector<std::size_t> positions = rng.sample_without_replacement(word_ids.size(), n_mask);
    std::sort(positions.begin(), positions.end());
    std::vector<WordSlot> slots;
    slots.reserve(word_ids.size());
    for (std::size_t i = 0; i < word_ids.size(); ++i) slots.push_back({false, word_ids[i]});
    for (std::size_t pos : positions) slots[pos].masked = true;
    return {std::move(slots), std::move(positions)};
}

// ----------------------------------------------------------------------
// Forward / backward

struct ForwardTrace {
    ad::Tape tape;
    ModelParams grads;  // leaf sinks point here
    ad::Var region_features_var;
    ad::Var masked_logits_var;
    bool has_logits = false;
    bool consumed = false;
};

struct ForwardResult {
    Mat region_features;                 // K x D
    std::vector<Vec> masked_logits;      // one row per masked word position
    std::vector<std::size_t> masked_positions;
    std::vector<Mat> attention;          // softmax rows per layer/head
    std::shared_ptr<ForwardTrace> trace; // present when recorded
};

namespace detail {

struct ParamLeaves {
    std::unordered_map<std::string, ad::Var> by_name;
    ad::Var operator[](const std::string& name) const { return by_name.at(name); }
};

inline ParamLeaves make_leaves(ad::Tape& tape, const ModelParams& params, ModelParams* grads) {
    ParamLeaves leaves;
    std::unordered_map<std::string, Mat*> sink_by_name;
    if (grads)
        grads->visit([&](const std::string& name, Mat& m) { sink_by_name[name] = &m; });
    params.visit([&](const std::string& name, const Mat& m) {
        leaves.by_name.emplace(name, tape.leaf(m, grads ? sink_by_name.at(name) : nullptr));
    });
    return leaves;
}

} // namespace detail

// One forward pass over the concatenated sequence. With record = false the
// tape is discarded and only values are returned (decoding paths).
inline ForwardResult forward_pass(const ModelParams& params, const Vocabulary& vocab,
                                  const std::vector<WordSlot>& words,
                                  const std::vector<TagSlot>& tags,
                                  const std::vector<RoiVector>& rois,
                                  const KnowledgeStore& store, bool record = true) {
    const ModelConfig& cfg = params.config;
    if (vocab.size() != cfg.word_vocab_size)
        throw ShapeMismatchError("forward: vocabulary size mismatch");
    if (words.size() > cfg.max_words)
        throw ShapeMismatchError("forward: too many words");
    if (tags.size() > cfg.max_tags)
        throw ShapeMismatchError("forward: too many tags");
    if (rois.size() != cfg.roi_count)
        throw ShapeMismatchError("forward: roi count mismatch");
    if (store.dimension() != cfg.knowledge_dim)
        throw ShapeMismatchError("forward: knowledge dimension mismatch");

    auto trace = std::make_shared<ForwardTrace>();
    if (record) trace->grads = zeros_like(params);
    ad::Tape& t = trace->tape;
    detail::ParamLeaves P = detail::make_leaves(t, params, record ? &trace->grads : nullptr);

    const std::size_t d = cfg.d_model;
    const std::size_t n_words = words.size();
    const std::size_t n_tags = tags.size();
    const std::size_t K = rois.size();

    // Store-backed class tokens share one semantic matrix: the frozen
    // definition embeddings pushed through the trained tag projection.
    std::vector<std::size_t> class_cols;      // token ids
    std::vector<std::size_t> class_store_row; // matching store indices
    std::vector<std::ptrdiff_t> token_to_sem(vocab.size(), -1);
    for (std::size_t tok = 0; tok < vocab.size(); ++tok) {
        if (!vocab.class_flags[tok]) continue;
        auto idx = store.find(vocab.tokens[tok]);
        if (!idx) continue;
        token_to_sem[tok] = static_cast<std::ptrdiff_t>(*idx);
        class_cols.push_back(tok);
        class_store_row.push_back(*idx);
    }
    Mat store_emb(store.size(), cfg.knowledge_dim);
    for (std::size_t i = 0; i < store.size(); ++i)
        for (std::size_t c = 0; c < cfg.knowledge_dim; ++c)
            store_emb(i, c) = store.entry(i).embedding[c];
    ad::Var tag_sem = t.add_rowvec(t.matmul(t.constant(std::move(store_emb)), P["tag_proj_w"]),
                                   P["tag_proj_b"]);

    Mat roi_mat(K, cfg.roi_dim);
    for (std::size_t i = 0; i < K; ++i) {
        if (rois[i].feature.size() + 6 != cfg.roi_dim)
            throw ShapeMismatchError("forward: roi feature width mismatch");
        for (std::size_t c = 0; c < rois[i].feature.size(); ++c) roi_mat(i, c) = rois[i].feature[c];
        for (std::size_t b = 0; b < 6; ++b) roi_mat(i, rois[i].feature.size() + b) = rois[i].box[b];
    }
    ad::Var roi_proj = t.add_rowvec(t.matmul(t.constant(std::move(roi_mat)), P["roi_proj_w"]),
                                    P["roi_proj_b"]);

    ad::Var zero_row = t.constant(Mat(1, d));

    std::vector<std::pair<ad::Var, std::size_t>> content, segs, poss;
    auto push_slot = [&](std::pair<ad::Var, std::size_t> c, std::size_t seg,
                         std::pair<ad::Var, std::size_t> pos) {
        content.push_back(c);
        segs.push_back({P["seg_emb"], seg});
        poss.push_back(pos);
    };

    std::vector<std::size_t> masked_positions;
    for (std::size_t i = 0; i < n_words; ++i) {
        if (words[i].masked) {
            masked_positions.push_back(i);
            push_slot({P["mask_emb"], 0}, 0, {P["pos_words"], i});
        } else if (words[i].id < vocab.size() && token_to_sem[words[i].id] >= 0) {
            push_slot({tag_sem, static_cast<std::size_t>(token_to_sem[words[i].id])}, 0,
                      {P["pos_words"], i});
        } else {
            if (words[i].id >= vocab.size())
                throw ShapeMismatchError("forward: word id out of range");
            push_slot({P["tok_table"], words[i].id}, 0, {P["pos_words"], i});
        }
    }
    push_slot({P["sep_emb"], 0}, 3, {zero_row, 0});
    for (std::size_t j = 0; j < n_tags; ++j) {
        if (tags[j].masked) {
            push_slot({P["mask_emb"], 0}, 1, {P["pos_tags"], j});
        } else {
            auto idx = store.find(tags[j].term);
            if (!idx)
                throw UnknownTermError("forward: tag not in store: " + tags[j].term);
            push_slot({tag_sem, *idx}, 1, {P["pos_tags"], j});
        }
    }
    push_slot({P["sep_emb"], 0}, 3, {zero_row, 0});
    for (std::size_t i = 0; i < K; ++i) {
        push_slot({roi_proj, i}, 2,
                  cfg.roi_positions ? std::pair<ad::Var, std::size_t>{P["pos_rois"], i}
                                    : std::pair<ad::Var, std::size_t>{zero_row, 0});
    }

    ad::Var x =
        t.add(t.add(t.assemble_rows(content), t.assemble_rows(segs)), t.assemble_rows(poss));

    ForwardResult result;
    const std::size_t dh = d / cfg.n_heads;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        ad::Var h = t.layernorm_rows(x, P[pre + "ln1_g"], P[pre + "ln1_b"]);
        ad::Var q = t.add_rowvec(t.matmul(h, P[pre + "wq"]), P[pre + "bq"]);
        ad::Var k = t.add_rowvec(t.matmul(h, P[pre + "wk"]), P[pre + "bk"]);
        ad::Var v = t.add_rowvec(t.matmul(h, P[pre + "wv"]), P[pre + "bv"]);
        std::vector<ad::Var> heads;
        for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
            ad::Var qh = t.slice_cols(q, hd * dh, (hd + 1) * dh);
            ad::Var kh = t.slice_cols(k, hd * dh, (hd + 1) * dh);
            ad::Var vh = t.slice_cols(v, hd * dh, (hd + 1) * dh);
            ad::Var scores =
                t.scale(t.matmul_transposed(qh, kh), 1.0 / std::sqrt(static_cast<double>(dh)));
            ad::Var attn = t.softmax_rows(scores);
            result.attention.push_back(t.val(attn));
            heads.push_back(t.matmul(attn, vh));
        }
        ad::Var attn_out =
            t.add_rowvec(t.matmul(t.concat_cols(heads), P[pre + "wo"]), P[pre + "bo"]);
        x = t.add(x, attn_out);

        ad::Var h2 = t.layernorm_rows(x, P[pre + "ln2_g"], P[pre + "ln2_b"]);
        ad::Var f1 = t.tanh_act(t.add_rowvec(t.matmul(h2, P[pre + "ff1_w"]), P[pre + "ff1_b"]));
        ad::Var f2 = t.add_rowvec(t.matmul(f1, P[pre + "ff2_w"]), P[pre + "ff2_b"]);
        x = t.add(x, f2);
    }
    ad::Var xf = t.layernorm_rows(x, P["lnf_g"], P["lnf_b"]);

    std::vector<std::size_t> roi_rows(K);
    for (std::size_t i = 0; i < K; ++i) roi_rows[i] = n_words + 1 + n_tags + 1 + i;
    ad::Var region = t.add_rowvec(t.matmul(t.gather_rows(xf, roi_rows), P["region_head"]),
                                  P["region_bias"]);
    result.region_features = t.val(region);
    trace->region_features_var = region;

    if (!masked_positions.empty()) {
        ad::Var hw = t.gather_rows(xf, masked_positions);  // word slot rows
        ad::Var logits = t.add_rowvec(t.matmul(hw, P["out_head"]), P["out_bias"]);
        if (!class_cols.empty()) {
            ad::Var sem_rows = t.gather_rows(tag_sem, class_store_row);
            ad::Var class_logits =
                t.add_scalar(t.matmul_transposed(hw, sem_rows), P["class_bias"]);
            logits = t.replace_cols(logits, class_logits, class_cols);
        }
        trace->masked_logits_var = logits;
        trace->has_logits = true;
        const Mat& lv = t.val(logits);
        for (std::size_t r = 0; r < lv.rows; ++r)
            result.masked_logits.emplace_back(lv.row(r), lv.row(r) + lv.cols);
    }

    result.masked_positions = std::move(masked_positions);
    if (record)
        result.trace = std::move(trace);
    return result;
}

// Step 1: ground-truth tags in the tag slots.
inline ForwardResult forward_retrieval(const ModelParams& params, const Vocabulary& vocab,
                                       const std::vector<WordSlot>& words,
                                       const std::vector<std::string>& tag_terms,
                                       const std::vector<RoiVector>& rois,
                                       const KnowledgeStore& store, bool record = true) {
    std::vector<TagSlot> tags;
    tags.reserve(tag_terms.size());
    for (const auto& term : tag_terms) tags.push_back({false, normalize_term(term)});
    return forward_pass(params, vocab, words, tags, rois, store, record);
}

// Step 2: retrieved vocabulary replaces the tags; same parameters.
inline ForwardResult forward_generation(const ModelParams& params, const Vocabulary& vocab,
                                        const std::vector<WordSlot>& words,
                                        const std::vector<std::string>& retrieved_vocab,
                                        const std::vector<RoiVector>& rois,
                                        const KnowledgeStore& store, bool record = true) {
    return forward_retrieval(params, vocab, words, retrieved_vocab, rois, store, record);
}

// Reverse pass over a recorded trace. Seeds are optional: pass an empty Mat
// or empty vector to skip that output. The trace is consumed.
inline ModelParams backward(const ForwardResult& fwd, const Mat& grad_region_features,
                            const std::vector<Vec>& grad_masked_logits) {
    if (!fwd.trace || fwd.trace->consumed)
        throw NoForwardRecordedError("backward: no recorded forward pass");
    ForwardTrace& trace = *fwd.trace;
    trace.consumed = true;

    if (grad_region_features.size() > 0)
        trace.tape.seed(trace.region_features_var, grad_region_features);
    if (!grad_masked_logits.empty()) {
        if (!trace.has_logits)
            throw ShapeMismatchError("backward: no masked positions in this forward");
        const Mat& lv = trace.tape.val(trace.masked_logits_var);
        if (grad_masked_logits.size() != lv.rows)
            throw ShapeMismatchError("backward: logit gradient row count mismatch");
        Mat g(lv.rows, lv.cols);
        for (std::size_t r = 0; r < lv.rows; ++r) {
            if (grad_masked_logits[r].size() != lv.cols)
                throw ShapeMismatchError("backward: logit gradient width mismatch");
            for (std::size_t c = 0; c < lv.cols; ++c) g(r, c) = grad_masked_logits[r][c];
        }
        trace.tape.seed(trace.masked_logits_var, g);
    }
    trace.tape.backward();
    return std::move(trace.grads);
}

// ----------------------------------------------------------------------
// Optimizer (decoupled weight decay Adam)

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

struct AdamWState {
    ModelParams m, v;
    std::uint64_t t = 0;

    static AdamWState init(const ModelParams& params) {
        return {zeros_like(params), zeros_like(params), 0};
    }
};

inline void optimizer_step(ModelParams& params, const ModelParams& grads, AdamWState& state,
                           const AdamWConfig& cfg) {
    ++state.t;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));

    std::vector<const Mat*> gs;
    grads.visit([&](const std::string&, const Mat& m) { gs.push_back(&m); });
    std::vector<Mat*> ms, vs;
    state.m.visit([&](const std::string&, Mat& m) { ms.push_back(&m); });
    state.v.visit([&](const std::string&, Mat& m) { vs.push_back(&m); });

    std::size_t i = 0;
    params.visit([&](const std::string& name, Mat& p) {
        const Mat& g = *gs[i];
        Mat& m = *ms[i];
        Mat& v = *vs[i];
        if (!p.same_shape(g) || !p.same_shape(m))
            throw ShapeMismatchError("optimizer_step: tensor shape mismatch at " + name);
        for (std::size_t k = 0; k < p.size(); ++k) {
            m.a[k] = cfg.beta1 * m.a[k] + (1.0 - cfg.beta1) * g.a[k];
            v.a[k] = cfg.beta2 * v.a[k] + (1.0 - cfg.beta2) * g.a[k] * g.a[k];
            const double mhat = m.a[k] / bc1;
            const double vhat = v.a[k] / bc2;
            p.a[k] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.a[k]);
        }
        ++i;
    });
}

// Optional global-norm cap; 0 disables it.
inline void clip_grad_norm(ModelParams& grads, double max_norm) {
    if (max_norm <= 0.0) return;
    double total = 0.0;
    grads.visit([&](const std::string&, const Mat& m) {
        for (double v : m.a) total += v * v;
    });
    total = std::sqrt(total);
    if (total <= max_norm) return;
    const double scale = max_norm / total;
    grads.visit([&](const std::string&, Mat& m) {
        for (double& v : m.a) v *= scale;
    });
}

inline void accumulate(ModelParams& into, const ModelParams& grads) {
    std::vector<const Mat*> src;
    grads.visit([&](const std::string&, const Mat& m) { src.push_back(&m); });
    std::size_t i = 0;
    into.visit([&](const std::string&, Mat& m) {
        if (m.size() == 0) m = Mat(src[i]->rows, src[i]->cols);
        add_inplace(m, *src[i]);
        ++i;
    });
}

// ----------------------------------------------------------------------
// Checkpoints: binary container with a JSON header followed by raw
// little-endian doubles for every tensor (params, then optimizer moments).

struct Checkpoint {
    ModelParams params;
    Vocabulary vocab;
    std::uint64_t knowledge_revision = 0;
    std::optional<AdamWState> optimizer;
};

namespace detail {

inline void write_doubles(std::ofstream& out, const Mat& m) {
    out.write(reinterpret_cast<const char*>(m.a.data()),
              static_cast<std::streamsize>(m.a.size() * sizeof(double)));
}

inline void read_doubles(std::ifstream& in, Mat& m) {
    in.read(reinterpret_cast<char*>(m.a.data()),
            static_cast<std::streamsize>(m.a.size() * sizeof(double)));
}

} // namespace detail

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    nlohmann::ordered_json header;
    header["schema_version"] = 1;
    header["config"] = ckpt.params.config.to_json();
    header["vocab"] = ckpt.vocab.to_json();
    header["knowledge_revision"] = ckpt.knowledge_revision;
    header["optimizer"] = {{"present", ckpt.optimizer.has_value()},
                           {"t", ckpt.optimizer ? ckpt.optimizer->t : 0}};
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    ckpt.params.visit([&](const std::string& name, const Mat& m) {
        tensors.push_back({{"name", name}, {"rows", m.rows}, {"cols", m.cols}});
    });
    header["tensors"] = tensors;

    const std::string head = header.dump();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw IoFailureError("save_checkpoint: cannot open " + path);
    out.write("NOCREKC1", 8);
    const std::uint64_t len = head.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof(len));
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    ckpt.params.visit([&](const std::string&, const Mat& m) { detail::write_doubles(out, m); });
    if (ckpt.optimizer) {
        ckpt.optimizer->m.visit([&](const std::string&, const Mat& m) {
            detail::write_doubles(out, m);
        });
        ckpt.optimizer->v.visit([&](const std::string&, const Mat& m) {
            detail::write_doubles(out, m);
        });
    }
    if (!out)
        throw IoFailureError("save_checkpoint: write failed for " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoFailureError("load_checkpoint: cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, "NOCREKC1", 8) != 0)
        throw SchemaMismatchError("load_checkpoint: bad magic");
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof(len));
    std::string head(len, '\0');
    in.read(head.data(), static_cast<std::streamsize>(len));
    nlohmann::json header = nlohmann::json::parse(head, nullptr, false);
    if (header.is_discarded())
        throw SchemaMismatchError("load_checkpoint: bad header");

    Checkpoint ckpt;
    ckpt.vocab = Vocabulary::from_json(header.at("vocab"));
    ckpt.knowledge_revision = header.value("knowledge_revision", std::uint64_t{0});
    const ModelConfig config = ModelConfig::from_json(header.at("config"));

    ckpt.params.config = config;
    ckpt.params.layers.resize(config.n_layers);
    std::unordered_map<std::string, std::pair<std::size_t, std::size_t>> shapes;
    for (const auto& tj : header.at("tensors"))
        shapes[tj.at("name").get<std::string>()] = {tj.at("rows").get<std::size_t>(),
                                                    tj.at("cols").get<std::size_t>()};
    ckpt.params.visit([&](const std::string& name, Mat& m) {
        auto it = shapes.find(name);
        if (it == shapes.end())
            throw SchemaMismatchError("load_checkpoint: missing tensor " + name);
        m = Mat(it->second.first, it->second.second);
        detail::read_doubles(in, m);
    });
    if (header.at("optimizer").value("present", false)) {
        AdamWState st = AdamWState::init(ckpt.params);
        st.t = header.at("optimizer").value("t", std::uint64_t{0});
        st.m.visit([&](const std::string&, Mat& m) { detail::read_doubles(in, m); });
        st.v.visit([&](const std::string&, Mat& m) { detail::read_doubles(in, m); });
        ckpt.optimizer = std::move(st);
    }
    if (!in)
        throw IoFailureError("load_checkpoint: truncated file " + path);
    return ckpt;
}

} // namespace nocrek
