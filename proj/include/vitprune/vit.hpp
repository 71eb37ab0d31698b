#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "vitprune/game.hpp"
#include "vitprune/matrix.hpp"
#include "vitprune/ops.hpp"
#include "vitprune/pruning.hpp"
#include "vitprune/tape.hpp"

namespace vitprune {

inline constexpr double kLayerNormEps = 1e-5;

struct ViTConfig {
    int image_size = 16;
    int patch_size = 4;
    int channels = 1;
    int embed_dim = 32;
    int depth = 4;
    int num_heads = 4;
    int ffn_mult = 4;
    int num_classes = 4;
    std::vector<int> prune_after = {2, 3};  // 1-based block indices, ascending

    int patches_per_side() const { return image_size / patch_size; }
    int num_patches() const { return patches_per_side() * patches_per_side(); }
    int num_tokens() const { return num_patches() + 1; }  // class token at index 0
    int head_dim() const { return embed_dim / num_heads; }
    int ffn_dim() const { return embed_dim * ffn_mult; }

    void validate() const {
        if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0) {
            throw std::invalid_argument("vit config: image_size must be divisible by patch_size");
        }
        if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0) {
            throw std::invalid_argument("vit config: embed_dim must be divisible by num_heads");
        }
        if (depth < 0 || channels <= 0 || ffn_mult <= 0 || num_classes <= 0) {
            throw std::invalid_argument("vit config: non-positive dimension");
        }
        int prev = 0;
        for (int l : prune_after) {
            if (l < 1 || l > depth) {
                throw std::invalid_argument("vit config: prune_after outside 1..depth");
            }
            if (l <= prev) {
                throw std::invalid_argument("vit config: prune_after must be ascending");
            }
            prev = l;
        }
    }
};

// Per-image token state. features covers all original token slots; under
// masked execution pruned rows keep evolving (they are isolated by the
// attention mask), under compaction they are physically gone and
// row_tokens maps current rows back to original token indices.
template <typename S>
struct TokenImage {
    Var<S> features;                 // [rows, D]
    MaskVec keep;                    // [num_tokens], keep(0) stays true
    std::vector<Index> row_tokens;   // current row -> original token index
};

template <typename S>
struct ViTBlockParams {
    Param<S> ln1_g, ln1_b;
    Param<S> wq, bq, wk, bk, wv, bv, wo, bo;
    Param<S> ln2_g, ln2_b;
    Param<S> w1, b1, w2, b2;
};

template <typename S>
struct ViTModel {
    ViTConfig cfg;
    Param<S> patch_w;    // [C*p*p, D]
    Param<S> patch_b;    // [1, D]
    Param<S> cls_token;  // [1, D]
    Param<S> pos_embed;  // [num_tokens, D]
    std::vector<ViTBlockParams<S>> blocks;
    Param<S> head_ln_g, head_ln_b;  // [1, D]
    Param<S> head_w;                // [D, num_classes]
    Param<S> head_b;                // [1, num_classes]

    static ViTModel random_init(const ViTConfig& cfg, uint64_t seed) {
        cfg.validate();
        ViTModel m;
        m.cfg = cfg;
        auto rng = make_rng(seed, "vit-init");
        const Index d = cfg.embed_dim;
        const S ws = S(0.02);
        m.patch_w = Param<S>("vit.patch.w",
                             randn<S>(rng, cfg.channels * cfg.patch_size * cfg.patch_size, d, ws));
        m.patch_b = Param<S>("vit.patch.b", Mat<S>::Zero(1, d));
        m.cls_token = Param<S>("vit.cls", randn<S>(rng, 1, d, ws));
        m.pos_embed = Param<S>("vit.pos", randn<S>(rng, cfg.num_tokens(), d, ws));
        for (int b = 0; b < cfg.depth; ++b) {
            const std::string p = "vit.blocks." + std::to_string(b) + ".";
            ViTBlockParams<S> blk;
            blk.ln1_g = Param<S>(p + "ln1.g", Mat<S>::Ones(1, d));
            blk.ln1_b = Param<S>(p + "ln1.b", Mat<S>::Zero(1, d));
            blk.wq = Param<S>(p + "attn.wq", randn<S>(rng, d, d, ws));
            blk.bq = Param<S>(p + "attn.bq", Mat<S>::Zero(1, d));
            blk.wk = Param<S>(p + "attn.wk", randn<S>(rng, d, d, ws));
            blk.bk = Param<S>(p + "attn.bk", Mat<S>::Zero(1, d));
            blk.wv = Param<S>(p + "attn.wv", randn<S>(rng, d, d, ws));
            blk.bv = Param<S>(p + "attn.bv", Mat<S>::Zero(1, d));
            blk.wo = Param<S>(p + "attn.wo", randn<S>(rng, d, d, ws));
            blk.bo = Param<S>(p + "attn.bo", Mat<S>::Zero(1, d));
            blk.ln2_g = Param<S>(p + "ln2.g", Mat<S>::Ones(1, d));
            blk.ln2_b = Param<S>(p + "ln2.b", Mat<S>::Zero(1, d));
            blk.w1 = Param<S>(p + "ffn.w1", randn<S>(rng, d, cfg.ffn_dim(), ws));
            blk.b1 = Param<S>(p + "ffn.b1", Mat<S>::Zero(1, cfg.ffn_dim()));
            blk.w2 = Param<S>(p + "ffn.w2", randn<S>(rng, cfg.ffn_dim(), d, ws));
            blk.b2 = Param<S>(p + "ffn.b2", Mat<S>::Zero(1, d));
            m.blocks.push_back(std::move(blk));
        }
        m.head_ln_g = Param<S>("vit.head.ln.g", Mat<S>::Ones(1, d));
        m.head_ln_b = Param<S>("vit.head.ln.b", Mat<S>::Zero(1, d));
        m.head_w = Param<S>("vit.head.w", randn<S>(rng, d, cfg.num_classes, ws));
        m.head_b = Param<S>("vit.head.b", Mat<S>::Zero(1, cfg.num_classes));
        return m;
    }

    NamedParams<S> named_params() {
        NamedParams<S> out;
        auto push = [&out](Param<S>& p) { out.emplace_back(p.name, &p); };
        push(patch_w);
        push(patch_b);
        push(cls_token);
        push(pos_embed);
        for (auto& b : blocks) {
            push(b.ln1_g); push(b.ln1_b);
            push(b.wq); push(b.bq); push(b.wk); push(b.bk);
            push(b.wv); push(b.bv); push(b.wo); push(b.bo);
            push(b.ln2_g); push(b.ln2_b);
            push(b.w1); push(b.b1); push(b.w2); push(b.b2);
        }
        push(head_ln_g);
        push(head_ln_b);
        push(head_w);
        push(head_b);
        return out;
    }
};

// Rearranges one [C*H*W] image row into [num_patches, C*p*p] rows, patch
// grid in row-major order, pixels within a patch channel-major.
template <typename S>
Mat<S> extract_patches(const ViTConfig& cfg, const Mat<S>& image_row) {
    const int hw = cfg.image_size * cfg.image_size;
    if (image_row.rows() != 1 || image_row.cols() != cfg.channels * hw) {
        throw std::invalid_argument("patch_embed: image size mismatch");
    }
    const int p = cfg.patch_size;
    const int side = cfg.patches_per_side();
    Mat<S> patches(cfg.num_patches(), cfg.channels * p * p);
    for (int py = 0; py < side; ++py) {
        for (int px = 0; px < side; ++px) {
            const Index row = py * side + px;
            Index k = 0;
            for (int c = 0; c < cfg.channels; ++c) {
                for (int dy = 0; dy < p; ++dy) {
                    for (int dx = 0; dx < p; ++dx) {
                        const int y = py * p + dy;
                        const int x = px * p + dx;
                        patches(row, k++) = image_row(0, c * hw + y * cfg.image_size + x);
                    }
                }
            }
        }
    }
    return patches;
}

// Linear patch projection + learned positional embedding, class token
// prepended at row 0. The keep mask starts all true.
template <typename S>
TokenImage<S> patch_embed(Tape<S>& t, ViTModel<S>& model, const Mat<S>& image_row) {
    const ViTConfig& cfg = model.cfg;
    Var<S> patches = t.leaf(extract_patches(cfg, image_row));
    Var<S> projected = add_row(matmul(patches, t.watch(model.patch_w)), t.watch(model.patch_b));
    Var<S> tokens = concat_rows(t.watch(model.cls_token), projected);
    tokens = add(tokens, t.watch(model.pos_embed));

    TokenImage<S> out;
    out.features = tokens;
    out.keep = MaskVec::Constant(cfg.num_tokens(), true);
    out.row_tokens.resize(static_cast<size_t>(cfg.num_tokens()));
    for (Index i = 0; i < cfg.num_tokens(); ++i) {
        out.row_tokens[static_cast<size_t>(i)] = i;
    }
    return out;
}

// Optional capture of attention probabilities, per head, for tests.
template <typename S>
struct AttentionProbe {
    std::vector<Mat<S>> head_probs;
};

// Pre-norm transformer block over the current rows. `additive_mask` is a
// [1, rows] row of 0 / kMaskValue entries applied to key columns of every
// attention row.
template <typename S>
Var<S> block_forward(Tape<S>& t, const ViTConfig& cfg, ViTBlockParams<S>& blk, Var<S> tokens,
                     const Mat<S>& additive_mask, AttentionProbe<S>* probe = nullptr) {
    const Index d = cfg.embed_dim;
    const Index dh = cfg.head_dim();
    const S eps = static_cast<S>(kLayerNormEps);

    Var<S> h = layer_norm_rows(tokens, t.watch(blk.ln1_g), t.watch(blk.ln1_b), eps);
    Var<S> q = add_row(matmul(h, t.watch(blk.wq)), t.watch(blk.bq));
    Var<S> k = add_row(matmul(h, t.watch(blk.wk)), t.watch(blk.bk));
    Var<S> v = add_row(matmul(h, t.watch(blk.wv)), t.watch(blk.bv));

    Var<S> mask = t.leaf(additive_mask);
    std::vector<Var<S>> heads;
    heads.reserve(static_cast<size_t>(cfg.num_heads));
    const S inv_sqrt = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
    for (int hd = 0; hd < cfg.num_heads; ++hd) {
        Var<S> qh = slice_cols(q, hd * dh, dh);
        Var<S> kh = slice_cols(k, hd * dh, dh);
        Var<S> vh = slice_cols(v, hd * dh, dh);
        Var<S> scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
        Var<S> probs = masked_softmax_rows(scores, mask);
        if (probe != nullptr) {
            probe->head_probs.push_back(probs.value());
        }
        heads.push_back(matmul(probs, vh));
    }
    Var<S> attn = cfg.num_heads == 1 ? heads[0] : concat_cols(heads);
    Var<S> proj = add_row(matmul(attn, t.watch(blk.wo)), t.watch(blk.bo));
    tokens = add(tokens, proj);

    Var<S> h2 = layer_norm_rows(tokens, t.watch(blk.ln2_g), t.watch(blk.ln2_b), eps);
    Var<S> f1 = gelu(add_row(matmul(h2, t.watch(blk.w1)), t.watch(blk.b1)));
    Var<S> f2 = add_row(matmul(f1, t.watch(blk.w2)), t.watch(blk.b2));
    (void)d;
    return add(tokens, f2);
}

// Class-token head: layer norm then linear.
template <typename S>
Var<S> classify(Tape<S>& t, ViTModel<S>& model, Var<S> tokens) {
    Var<S> cls = select_rows(tokens, std::vector<Index>{0});
    Var<S> h = layer_norm_rows(cls, t.watch(model.head_ln_g), t.watch(model.head_ln_b),
                               static_cast<S>(kLayerNormEps));
    return add_row(matmul(h, t.watch(model.head_w)), t.watch(model.head_b));
}

template <typename S>
struct ForwardOptions {
    bool collect_trajectory = false;  // record states / log-probs / values per layer
    bool compact = false;             // physically drop pruned rows after each pruning layer
};

template <typename S>
struct ForwardResult {
    Var<S> logits;                     // [1, num_classes]
    Trajectory<S> trajectory;          // layers empty when no decider ran
    std::vector<MaskVec> masks_after;  // keep mask after each pruning layer, original indexing
    MaskVec final_keep;
};

template <typename S>
Mat<S> additive_mask_for(const TokenImage<S>& ti) {
    Mat<S> m(1, ti.features.rows());
    for (Index r = 0; r < ti.features.rows(); ++r) {
        m(0, r) = ti.keep(ti.row_tokens[static_cast<size_t>(r)])
                      ? S(0)
                      : static_cast<S>(kMaskValue);
    }
    return m;
}

// Runs the blocks in order; after each block listed in prune_after consults
// the decider on the currently-kept non-class tokens, updates the keep mask
// (and compacts rows if requested), and records the step. With a null
// decider this is a plain ViT forward.
template <typename S>
ForwardResult<S> vit_forward_image(Tape<S>& t, ViTModel<S>& model, const Mat<S>& image_row,
                                   PruneDecider<S>* decider, const ForwardOptions<S>& opts = {}) {
    const ViTConfig& cfg = model.cfg;
    TokenImage<S> ti = patch_embed(t, model, image_row);
    ForwardResult<S> out;

    const int last_prune = cfg.prune_after.empty() ? -1 : cfg.prune_after.back();
    size_t prune_cursor = 0;
    for (int b = 1; b <= cfg.depth; ++b) {
        ti.features = block_forward(t, cfg, model.blocks[static_cast<size_t>(b - 1)], ti.features,
                                    additive_mask_for(ti));
        const bool prune_here = prune_cursor < cfg.prune_after.size() &&
                                cfg.prune_after[prune_cursor] == b;
        if (!prune_here || decider == nullptr) {
            if (prune_here) {
                ++prune_cursor;
            }
            continue;
        }
        ++prune_cursor;

        // kept non-class tokens entering this layer, ascending token order
        std::vector<Index> active_rows, active_tokens;
        for (Index r = 0; r < ti.features.rows(); ++r) {
            const Index tok = ti.row_tokens[static_cast<size_t>(r)];
            if (tok != 0 && ti.keep(tok)) {
                active_rows.push_back(r);
                active_tokens.push_back(tok);
            }
        }

        const Mat<S>& feats = ti.features.value();
        Mat<S> class_feat = feats.row(0);
        Mat<S> active_feats(static_cast<Index>(active_rows.size()), cfg.embed_dim);
        for (size_t i = 0; i < active_rows.size(); ++i) {
            active_feats.row(static_cast<Index>(i)) = feats.row(active_rows[i]);
        }

        LayerRecord<S> layer;
        layer.layer_index = b;
        if (active_rows.empty()) {
            layer.n_kept = 0;
            out.trajectory.layers.push_back(std::move(layer));
            out.masks_after.push_back(ti.keep);
            continue;
        }

        PruneStepResult<S> dec = decider->decide(b, active_feats, class_feat);
        layer.n_kept = apply_prune_mask(ti.keep, dec.actions, active_tokens);

        if (opts.collect_trajectory) {
            layer.states = dec.states_override.size() > 0 ? dec.states_override : active_feats;
            layer.global = class_feat;
        }
        layer.steps.resize(active_tokens.size());
        for (size_t i = 0; i < active_tokens.size(); ++i) {
            AgentStep<S>& s = layer.steps[i];
            s.layer_index = b;
            s.token_index = static_cast<int>(active_tokens[i]);
            s.action = dec.actions[i];
            s.log_prob = i < dec.log_probs.size() ? dec.log_probs[i] : S(0);
            s.value = i < dec.values.size() ? dec.values[i] : S(0);
            s.done = s.action == kActionPrune || b == last_prune;
        }
        out.trajectory.layers.push_back(std::move(layer));
        out.masks_after.push_back(ti.keep);

        if (opts.compact) {
            std::vector<Index> kept_rows;
            std::vector<Index> kept_tokens;
            for (Index r = 0; r < ti.features.rows(); ++r) {
                const Index tok = ti.row_tokens[static_cast<size_t>(r)];
                if (ti.keep(tok)) {
                    kept_rows.push_back(r);
                    kept_tokens.push_back(tok);
                }
            }
            ti.features = select_rows(ti.features, kept_rows);
            ti.row_tokens = kept_tokens;
        }
    }

    out.logits = classify(t, model, ti.features);
    out.final_keep = ti.keep;
    return out;
}

// Physically removes pruned rows, preserving order; positional embeddings
// were added at patch_embed so this is a pure gather.
template <typename S>
TokenImage<S> compact_inference(TokenImage<S> ti) {
    std::vector<Index> kept_rows, kept_tokens;
    for (Index r = 0; r < ti.features.rows(); ++r) {
        const Index tok = ti.row_tokens[static_cast<size_t>(r)];
        if (ti.keep(tok)) {
            kept_rows.push_back(r);
            kept_tokens.push_back(tok);
        }
    }
    ti.features = select_rows(ti.features, kept_rows);
    ti.row_tokens = std::move(kept_tokens);
    return ti;
}

}  // namespace vitprune
