#pragma once

// Observation tokenization: low-dim state, toy images with FiLM, point
// clouds via FPS plus two encoder choices, goal embeddings, and the fused
// condition feature. One token per modality per history step.

#include "xil/backbones.hpp"

namespace xil {

// ------------------------------------------------------------------- fps

// Greedy max-min Euclidean selection starting at start_index. Ties break
// toward the lowest index. points is [n, 3].
template <class Real>
std::vector<int64_t> farthest_point_sampling(const Tensor<Real>& points, int64_t k, int64_t start_index) {
    if (points.ndim() != 2 || points.dim(1) != 3) {
        throw ShapeError("point cloud must be [n,3], got " + shape_str(points.shape()));
    }
    const int64_t n = points.dim(0);
    if (k < 1 || k > n) {
        throw UsageError("fps k=" + std::to_string(k) + " out of range [1," + std::to_string(n) + "]");
    }
    if (start_index < 0 || start_index >= n) {
        throw UsageError("fps start_index " + std::to_string(start_index) + " out of range");
    }
    const auto* p = points.data();
    auto dist2 = [p](int64_t i, int64_t j) {
        const Real dx = p[3 * i] - p[3 * j];
        const Real dy = p[3 * i + 1] - p[3 * j + 1];
        const Real dz = p[3 * i + 2] - p[3 * j + 2];
        return dx * dx + dy * dy + dz * dz;
    };
    std::vector<int64_t> selected;
    selected.reserve(static_cast<size_t>(k));
    selected.push_back(start_index);
    std::vector<Real> min_d(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) min_d[static_cast<size_t>(i)] = dist2(i, start_index);
    while (static_cast<int64_t>(selected.size()) < k) {
        int64_t best = 0;
        Real best_d = min_d[0];
        for (int64_t i = 1; i < n; ++i) {
            if (min_d[static_cast<size_t>(i)] > best_d) {
                best_d = min_d[static_cast<size_t>(i)];
                best = i;
            }
        }
        selected.push_back(best);
        for (int64_t i = 0; i < n; ++i) {
            min_d[static_cast<size_t>(i)] = std::min(min_d[static_cast<size_t>(i)], dist2(i, best));
        }
    }
    return selected;
}

// [b, n, 3] -> [b, k, 3] by per-sample FPS
template <class Real>
Tensor<Real> fps_downsample(const Tensor<Real>& clouds, int64_t k, int64_t start_index = 0) {
    const int64_t b = clouds.dim(0), n = clouds.dim(1);
    std::vector<int64_t> idx;
    idx.reserve(static_cast<size_t>(b * k * 3));
    for (int64_t bi = 0; bi < b; ++bi) {
        auto one = Tensor<Real>::from({n, 3}, std::vector<Real>(clouds.data() + bi * n * 3,
                                                                clouds.data() + (bi + 1) * n * 3));
        auto sel = farthest_point_sampling(one, k, start_index);
        for (int64_t s : sel) {
            for (int64_t c = 0; c < 3; ++c) idx.push_back((bi * n + s) * 3 + c);
        }
    }
    return take(clouds, {b, k, 3}, idx);
}

// --------------------------------------------------- plain encoder block

// Pre-LN residual transformer block without conditioning; used inside the
// point-cloud attention encoder and the patch image encoder.
template <class Real>
struct PlainBlock {
    Attention<Real> attn;
    Mlp<Real> ff;

    static PlainBlock make(int64_t dim, int64_t heads, Rng& rng) {
        PlainBlock b;
        b.attn = Attention<Real>::make(dim, heads, /*causal=*/false, rng);
        b.ff = Mlp<Real>::make({dim, 4 * dim, dim}, rng, Activation::gelu);
        return b;
    }

    Tensor<Real> operator()(const Tensor<Real>& x) const {
        auto h = add(x, attn(layer_norm(x, -1, static_cast<Real>(kLayerNormEps))));
        return add(h, ff(layer_norm(h, -1, static_cast<Real>(kLayerNormEps))));
    }

    template <class F>
    void for_each_param(const std::string& prefix, F&& fn) {
        attn.for_each_param(prefix + ".attn", fn);
        ff.for_each_param(prefix + ".ff", fn);
    }
};

// ------------------------------------------------------ pc encoders

enum class PcEncoderKind { maxpool, attention };

inline PcEncoderKind parse_pc_encoder(const std::string& name) {
    if (name == "maxpool") return PcEncoderKind::maxpool;
    if (name == "attention") return PcEncoderKind::attention;
    throw ConfigError("unknown pc encoder '" + name + "'; valid options: {maxpool, attention}");
}

// shared per-point 3-layer MLP, channelwise max over points
template <class Real>
struct PcMaxPoolEncoder {
    Mlp<Real> mlp; // 3 -> d/8 -> d/4 -> d

    static PcMaxPoolEncoder make(int64_t dim, Rng& rng) {
        PcMaxPoolEncoder e;
        e.mlp = Mlp<Real>::make({3, std::max<int64_t>(1, dim / 8), std::max<int64_t>(1, dim / 4), dim}, rng,
                                Activation::silu);
        return e;
    }

    // [b, k, 3] -> [b, d]
    Tensor<Real> operator()(const Tensor<Real>& pts) const { return max_axis(mlp(pts), 1); }

    template <class F>
    void for_each_param(const std::string& prefix, F&& fn) {
        mlp.for_each_param(prefix + ".mlp", fn);
    }
};

// per-point lift, learned CLS token, 4 non-causal attention blocks
template <class Real>
struct PcAttentionEncoder {
    Linear<Real> lift; // 3 -> d
    Tensor<Real> cls;  // [1, 1, d]
    std::vector<PlainBlock<Real>> blocks;

    static PcAttentionEncoder make(int64_t dim, int64_t heads, Rng& rng, int64_t depth = 4) {
        PcAttentionEncoder e;
        e.lift = Linear<Real>::make(3, dim, rng);
        e.cls = Tensor<Real>::randn({1, 1, dim}, rng, Real(0.02));
        e.cls.set_requires_grad(true);
        for (int64_t i = 0; i < depth; ++i) e.blocks.push_back(PlainBlock<Real>::make(dim, heads, rng));
        return e;
    }

    // [b, k, 3] -> [b, d] (CLS output)
    Tensor<Real> operator()(const Tensor<Real>& pts) const {
        const int64_t b = pts.dim(0);
        const int64_t d = cls.dim(2);
        std::vector<int64_t> idx;
        idx.reserve(static_cast<size_t>(b * d));
        for (int64_t bi = 0; bi < b; ++bi) {
            for (int64_t c = 0; c < d; ++c) idx.push_back(c);
        }
        auto cls_b = take(cls, {b, 1, d}, idx);
        auto x = concat(std::vector<Tensor<Real>>{cls_b, lift(pts)}, 1);
        for (const auto& blk : blocks) x = blk(x);
        return reshape(slice(x, 1, 0, 1), {b, d});
    }

    template <class F>
    void for_each_param(const std::string& prefix, F&& fn) {
        lift.for_each_param(prefix + ".lift", fn);
        fn(prefix + ".cls", cls);
        for (size_t i = 0; i < blocks.size(); ++i) {
            blocks[i].for_each_param(prefix + ".block" + std::to_string(i), fn);
        }
    }
};

// ------------------------------------------------------ patch image encoder

// 8x8 patch flatten -> linear lift -> FiLM on patch features -> 2 non-causal
// attention blocks -> mean pool to a single token.
template <class Real>
struct PatchImageEncoder {
    int64_t img_h = 32, img_w = 32, patch = 8;
    Linear<Real> lift; // patch*patch*3 -> d
    Film<Real> film;
    std::vector<PlainBlock<Real>> blocks;

    static PatchImageEncoder make(int64_t dim, int64_t heads, int64_t cond_dim, Rng& rng, int64_t img_h = 32,
                                  int64_t img_w = 32, int64_t patch = 8, int64_t depth = 2) {
        if (img_h % patch != 0 || img_w % patch != 0) {
            throw ConfigError("image size " + std::to_string(img_h) + "x" + std::to_string(img_w) +
                              " not divisible by patch " + std::to_string(patch));
        }
        PatchImageEncoder e;
        e.img_h = img_h;
        e.img_w = img_w;
        e.patch = patch;
        e.lift = Linear<Real>::make(patch * patch * 3, dim, rng);
        e.film = Film<Real>::make(cond_dim, dim);
        for (int64_t i = 0; i < depth; ++i) e.blocks.push_back(PlainBlock<Real>::make(dim, heads, rng));
        return e;
    }

    // [b, H, W, 3] -> [b, P, patch*patch*3]
    Tensor<Real> patchify(const Tensor<Real>& img) const {
        const int64_t b = img.dim(0), H = img.dim(1), W = img.dim(2);
        if (H != img_h || W != img_w || img.dim(3) != 3) {
            throw ShapeError("image must be [b," + std::to_string(img_h) + "," + std::to_string(img_w) +
                             ",3], got " + shape_str(img.shape()));
        }
        const int64_t ph = H / patch, pw = W / patch;
        std::vector<int64_t> idx;
        idx.reserve(static_cast<size_t>(img.numel()));
        for (int64_t bi = 0; bi < b; ++bi) {
            for (int64_t py = 0; py < ph; ++py) {
                for (int64_t px = 0; px < pw; ++px) {
                    for (int64_t y = 0; y < patch; ++y) {
                        for (int64_t x = 0; x < patch; ++x) {
                            for (int64_t c = 0; c < 3; ++c) {
                                idx.push_back(((bi * H + py * patch + y) * W + px * patch + x) * 3 + c);
                            }
                        }
                    }
                }
            }
        }
        return take(img, {b, ph * pw, patch * patch * 3}, idx);
    }

    // img [b, H, W, 3], cond [b, cond_dim] -> [b, d]
    Tensor<Real> operator()(const Tensor<Real>& img, const Tensor<Real>& cond) const {
        auto x = film(lift(patchify(img)), cond);
        for (const auto& blk : blocks) x = blk(x);
        return mean_axis(x, 1);
    }

    template <class F>
    void for_each_param(const std::string& prefix, F&& fn) {
        lift.for_each_param(prefix + ".lift", fn);
        film.for_each_param(prefix + ".film", fn);
        for (size_t i = 0; i < blocks.size(); ++i) {
            blocks[i].for_each_param(prefix + ".block" + std::to_string(i), fn);
        }
    }
};

// ------------------------------------------------------- observation batch

template <class Real>
struct ObservationBatch {
    std::optional<Tensor<Real>> state; // [b, h, ds]
    std::optional<Tensor<Real>> image; // [b, h, H, W, 3], values in [0,1]
    std::optional<Tensor<Real>> cloud; // [b, h, n, 3]
    std::vector<int64_t> goal_ids;     // [b]

    int64_t batch() const { return static_cast<int64_t>(goal_ids.size()); }

    int64_t history() const {
        if (state) return state->dim(1);
        if (image) return image->dim(1);
        if (cloud) return cloud->dim(1);
        throw UsageError("observation batch has no modality present");
    }

    void validate() const {
        if (!state && !image && !cloud) throw UsageError("observation batch has no modality present");
        const int64_t b = batch();
        const int64_t h = history();
        auto check = [&](const std::optional<Tensor<Real>>& t, const char* name) {
            if (t && (t->dim(0) != b || t->dim(1) != h)) {
                throw ShapeError(std::string(name) + " batch/history mismatch: " + shape_str(t->shape()));
            }
        };
        check(state, "state");
        check(image, "image");
        check(cloud, "cloud");
    }
};

enum class TokenTag { goal, state, image, cloud, action };

template <class Real>
struct EncodedObservation {
    Tensor<Real> tokens; // [b, L_obs, d]
    std::vector<TokenTag> layout;
    Tensor<Real> fusion;   // [b, d]
    Tensor<Real> goal_emb; // [b, d]
};

struct EncoderConfig {
    int64_t dim = 512;
    int64_t heads = 8;
    bool use_state = true;
    bool use_image = false;
    bool use_cloud = false;
    int64_t state_dim = 2;
    int64_t goal_vocab = 4;
    int64_t fps_k = 64;
    int64_t fps_start = 0;
    PcEncoderKind pc_kind = PcEncoderKind::maxpool;
    int64_t img_h = 32, img_w = 32, patch = 8;
};

template <class Real>
struct ObservationEncoder {
    EncoderConfig cfg;
    Embedding<Real> goal;
    std::optional<Linear<Real>> state_lift;
    std::optional<PatchImageEncoder<Real>> image_enc;
    std::optional<PcMaxPoolEncoder<Real>> pc_maxpool;
    std::optional<PcAttentionEncoder<Real>> pc_attention;
    // per-modality fusion projections; the fusion vector is their sum, so a
    // missing modality contributes exactly nothing
    std::optional<Linear<Real>> fuse_state, fuse_image, fuse_cloud;

    static ObservationEncoder make(const EncoderConfig& cfg, Rng& rng) {
        ObservationEncoder e;
        e.cfg = cfg;
        e.goal = Embedding<Real>::make(cfg.goal_vocab, cfg.dim, rng);
        if (cfg.use_state) {
            e.state_lift = Linear<Real>::make(cfg.state_dim, cfg.dim, rng);
            e.fuse_state = Linear<Real>::make(cfg.dim, cfg.dim, rng);
        }
        if (cfg.use_image) {
            e.image_enc = PatchImageEncoder<Real>::make(cfg.dim, cfg.heads, cfg.dim, rng, cfg.img_h,
                                                        cfg.img_w, cfg.patch);
            e.fuse_image = Linear<Real>::make(cfg.dim, cfg.dim, rng);
        }
        if (cfg.use_cloud) {
            if (cfg.pc_kind == PcEncoderKind::maxpool) {
                e.pc_maxpool = PcMaxPoolEncoder<Real>::make(cfg.dim, rng);
            } else {
                e.pc_attention = PcAttentionEncoder<Real>::make(cfg.dim, cfg.heads, rng);
            }
            e.fuse_cloud = Linear<Real>::make(cfg.dim, cfg.dim, rng);
        }
        return e;
    }

    Tensor<Real> encode_cloud_tokens(const Tensor<Real>& pts) const {
        return pc_maxpool ? (*pc_maxpool)(pts) : (*pc_attention)(pts);
    }

    EncodedObservation<Real> encode(const ObservationBatch<Real>& obs) const {
        obs.validate();
        if (cfg.use_state && !obs.state) throw UsageError("config selects state but batch has none");
        if (cfg.use_image && !obs.image) throw UsageError("config selects image but batch has none");
        if (cfg.use_cloud && !obs.cloud) throw UsageError("config selects cloud but batch has none");

        const int64_t b = obs.batch();
        const int64_t h = obs.history();
        const int64_t d = cfg.dim;

        EncodedObservation<Real> out;
        out.goal_emb = goal(obs.goal_ids); // [b, d]

        std::vector<Tensor<Real>> tokens;
        out.layout.push_back(TokenTag::goal);
        tokens.push_back(reshape(out.goal_emb, {b, 1, d}));

        Tensor<Real> last_state_feat, last_image_feat, last_cloud_feat;
        for (int64_t t = 0; t < h; ++t) {
            if (cfg.use_state) {
                auto st = reshape(slice(*obs.state, 1, t, 1), {b, cfg.state_dim});
                last_state_feat = (*state_lift)(st);
                tokens.push_back(reshape(last_state_feat, {b, 1, d}));
                out.layout.push_back(TokenTag::state);
            }
            if (cfg.use_image) {
                auto img = reshape(slice(*obs.image, 1, t, 1), {b, cfg.img_h, cfg.img_w, 3});
                last_image_feat = (*image_enc)(img, out.goal_emb);
                tokens.push_back(reshape(last_image_feat, {b, 1, d}));
                out.layout.push_back(TokenTag::image);
            }
            if (cfg.use_cloud) {
                const int64_t n = obs.cloud->dim(2);
                auto pts = reshape(slice(*obs.cloud, 1, t, 1), {b, n, 3});
                auto sampled = fps_downsample(pts, std::min(cfg.fps_k, n), cfg.fps_start);
                last_cloud_feat = encode_cloud_tokens(sampled);
                tokens.push_back(reshape(last_cloud_feat, {b, 1, d}));
                out.layout.push_back(TokenTag::cloud);
            }
        }
        out.tokens = concat(tokens, 1);

        // fusion over the most recent history step
        out.fusion = Tensor<Real>::zeros({b, d});
        if (cfg.use_state) out.fusion = add(out.fusion, (*fuse_state)(last_state_feat));
        if (cfg.use_image) out.fusion = add(out.fusion, (*fuse_image)(last_image_feat));
        if (cfg.use_cloud) out.fusion = add(out.fusion, (*fuse_cloud)(last_cloud_feat));
        return out;
    }

    template <class F>
    void for_each_param(const std::string& prefix, F&& fn) {
        goal.for_each_param(prefix + ".goal", fn);
        if (state_lift) state_lift->for_each_param(prefix + ".state_lift", fn);
        if (image_enc) image_enc->for_each_param(prefix + ".image", fn);
        if (pc_maxpool) pc_maxpool->for_each_param(prefix + ".pc", fn);
        if (pc_attention) pc_attention->for_each_param(prefix + ".pc", fn);
        if (fuse_state) fuse_state->for_each_param(prefix + ".fuse_state", fn);
        if (fuse_image) fuse_image->for_each_param(prefix + ".fuse_image", fn);
        if (fuse_cloud) fuse_cloud->for_each_param(prefix + ".fuse_cloud", fn);
    }
};

} // namespace xil
