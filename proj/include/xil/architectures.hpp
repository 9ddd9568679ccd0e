#pragma once

// Assembles observation encoders, X-Block stacks and policy heads into the
// two architectures: decoder-only (joint observation+action sequence, causal)
// and encoder-decoder (observation encoder pooled into an AdaLN condition for
// an action-token decoder).

#include "xil/encoders.hpp"
#include "xil/policies.hpp"

namespace xil {

enum class ArchKind { decoder_only, encoder_decoder };

inline const char* arch_name(ArchKind a) {
    return a == ArchKind::decoder_only ? "decoder_only" : "encoder_decoder";
}

inline ArchKind parse_arch(const std::string& name) {
    if (name == "decoder_only") return ArchKind::decoder_only;
    if (name == "encoder_decoder") return ArchKind::encoder_decoder;
    throw ConfigError("unknown architecture '" + name +
                      "'; valid options: {decoder_only, encoder_decoder}");
}

struct ModelConfig {
    std::string arch = "decoder_only";
    std::string backbone = "xlstm";
    std::string head = "beso";
    int64_t embed_dim = 512;
    int64_t heads = 8;
    int64_t enc_blocks = 0; // 0 = paper default: 4 (transformer) / 8 (mamba, xlstm)
    int64_t dec_blocks = 0; // 0 = paper default: 6 (transformer) / 8 (mamba, xlstm)
    int64_t ff_hidden = 0;  // 0 = backbone default
    int64_t action_dim = 2;
    int64_t action_horizon = 8; // Ta
    int64_t history = 1;        // h
    int64_t sample_steps = 4;
    bool condition_on_fusion = false;
    int64_t ddpm_train_steps = 1000;
    // modalities
    bool use_state = true;
    bool use_image = false;
    bool use_cloud = false;
    int64_t state_dim = 2;
    int64_t goal_vocab = 4;
    std::string pc_encoder = "maxpool";
    int64_t fps_k = 64;
    int64_t img_h = 32, img_w = 32, patch = 8;
    // ssm knobs
    int64_t ssm_state = 16, ssm_expand = 2, ssm_conv = 4;

    int64_t modality_count() const {
        return (use_state ? 1 : 0) + (use_image ? 1 : 0) + (use_cloud ? 1 : 0);
    }

    int64_t resolved_enc_blocks(Backbone b) const {
        if (enc_blocks > 0) return enc_blocks;
        return b == Backbone::attention ? 4 : 8;
    }
    int64_t resolved_dec_blocks(Backbone b) const {
        if (dec_blocks > 0) return dec_blocks;
        return b == Backbone::attention ? 6 : 8;
    }
};

template <class Real>
struct PolicyModel {
    ModelConfig cfg;
    ArchKind arch = ArchKind::decoder_only;
    Backbone backbone = Backbone::xlstm;
    PolicyHeadConfig<Real> head;
    ObservationEncoder<Real> encoder;
    std::vector<XBlock<Real>> enc_stack; // encoder-decoder only
    std::vector<XBlock<Real>> dec_stack;
    Linear<Real> action_in;   // Da -> d
    Linear<Real> action_out;  // d -> Da, zero-init
    Linear<Real> pooled_proj; // d -> d (encoder-decoder condition path)
    std::optional<Linear<Real>> fusion_proj;
    Tensor<Real> pos_emb; // [max joint length, d], zero-init

    int64_t obs_tokens() const { return cfg.history * cfg.modality_count() + 1; }

    // predicted-action projections for the Ta trailing positions
    Tensor<Real> predict(const ObservationBatch<Real>& obs, const Tensor<Real>& noisy_actions,
                         const std::vector<Real>& tvals_in) const {
        const int64_t b = obs.batch();
        const int64_t ta = cfg.action_horizon;
        const int64_t d = cfg.embed_dim;
        if (noisy_actions.ndim() != 3 || noisy_actions.dim(1) != ta ||
            noisy_actions.dim(2) != cfg.action_dim) {
            throw ShapeError("noisy actions must be [b," + std::to_string(ta) + "," +
                             std::to_string(cfg.action_dim) + "], got " + shape_str(noisy_actions.shape()));
        }
        // BC runs the same network at a fixed zero noise level
        std::vector<Real> tvals = tvals_in;
        if (head.kind == HeadKind::bc) tvals.assign(tvals.size(), Real(0));

        auto enc = encoder.encode(obs);
        auto time_emb = sinusoidal_time_embedding_batch(tvals, d); // [b, d]

        if (arch == ArchKind::decoder_only) {
            auto cond = time_emb;
            if (fusion_proj) cond = add(cond, (*fusion_proj)(enc.fusion));
            auto act_tokens = action_in(noisy_actions); // [b, Ta, d]
            auto tokens = concat(std::vector<Tensor<Real>>{enc.tokens, act_tokens}, 1);
            const int64_t L = tokens.dim(1);
            if (L != obs_tokens() + ta) {
                throw ShapeError("token layout mismatch: got " + std::to_string(L) + " tokens, expected " +
                                 std::to_string(obs_tokens() + ta));
            }
            tokens = add(tokens, reshape(slice(pos_emb, 0, 0, L), {1, L, d}));
            for (const auto& blk : dec_stack) tokens = blk(tokens, cond);
            auto act_hidden = slice(tokens, 1, L - ta, ta);
            return action_out(act_hidden);
        }

        // encoder-decoder: observations through the encoder stack, pooled into
        // the condition; the decoder sees action tokens only
        auto h = enc.tokens;
        for (const auto& blk : enc_stack) h = blk(h, time_emb);
        auto pooled = mean_axis(h, 1); // [b, d]
        auto cond = add(time_emb, pooled_proj(pooled));
        if (fusion_proj) cond = add(cond, (*fusion_proj)(enc.fusion));
        auto dec = action_in(noisy_actions);
        dec = add(dec, reshape(slice(pos_emb, 0, 0, ta), {1, ta, d}));
        for (const auto& blk : dec_stack) dec = blk(dec, cond);
        return action_out(dec);
    }

    DenoiseFn<Real> denoise_fn(ObservationBatch<Real> obs) const {
        return [this, obs](const Tensor<Real>& acts, const std::vector<Real>& tvals) {
            return predict(obs, acts, tvals);
        };
    }

    Tensor<Real> loss(const ObservationBatch<Real>& obs, const Tensor<Real>& target_actions, Rng& rng) const {
        return head_loss(head, denoise_fn(obs), target_actions, rng);
    }

    Tensor<Real> sample(const ObservationBatch<Real>& obs, int64_t steps, Rng& rng) const {
        return head_sample(head, denoise_fn(obs), {obs.batch(), cfg.action_horizon, cfg.action_dim}, steps,
                           rng);
    }

    template <class F>
    void for_each_param(F&& fn) {
        encoder.for_each_param("encoder", fn);
        for (size_t i = 0; i < enc_stack.size(); ++i) {
            enc_stack[i].for_each_param("enc" + std::to_string(i), fn);
        }
        for (size_t i = 0; i < dec_stack.size(); ++i) {
            dec_stack[i].for_each_param("dec" + std::to_string(i), fn);
        }
        action_in.for_each_param("action_in", fn);
        action_out.for_each_param("action_out", fn);
        pooled_proj.for_each_param("pooled_proj", fn);
        if (fusion_proj) fusion_proj->for_each_param("fusion_proj", fn);
        fn("pos_emb", pos_emb);
    }

    int64_t param_count() {
        int64_t n = 0;
        for_each_param([&](const std::string&, Tensor<Real>& t) { n += t.numel(); });
        return n;
    }
};

template <class Real>
PolicyModel<Real> build_model(const ModelConfig& cfg, Rng& rng) {
    PolicyModel<Real> m;
    m.cfg = cfg;
    m.arch = parse_arch(cfg.arch);
    m.backbone = parse_backbone(cfg.backbone);
    m.head.kind = parse_head(cfg.head);
    m.head.sample_steps = cfg.sample_steps;
    m.head.ddpm = DdpmSchedule::make(cfg.ddpm_train_steps);

    if (cfg.embed_dim % 2 != 0) throw ConfigError("embed_dim must be even for the time embedding");

    EncoderConfig ec;
    ec.dim = cfg.embed_dim;
    ec.heads = cfg.heads;
    ec.use_state = cfg.use_state;
    ec.use_image = cfg.use_image;
    ec.use_cloud = cfg.use_cloud;
    ec.state_dim = cfg.state_dim;
    ec.goal_vocab = cfg.goal_vocab;
    ec.fps_k = cfg.fps_k;
    ec.pc_kind = parse_pc_encoder(cfg.pc_encoder);
    ec.img_h = cfg.img_h;
    ec.img_w = cfg.img_w;
    ec.patch = cfg.patch;
    m.encoder = ObservationEncoder<Real>::make(ec, rng);

    XBlockConfig bc;
    bc.kind = m.backbone;
    bc.dim = cfg.embed_dim;
    bc.heads = cfg.heads;
    bc.cond_dim = cfg.embed_dim;
    bc.ff_hidden = cfg.ff_hidden;
    bc.ssm_state = cfg.ssm_state;
    bc.ssm_expand = cfg.ssm_expand;
    bc.ssm_conv = cfg.ssm_conv;

    if (m.arch == ArchKind::encoder_decoder) {
        XBlockConfig enc_bc = bc;
        enc_bc.causal = false; // encoder attends over the full observation set
        const int64_t ne = cfg.resolved_enc_blocks(m.backbone);
        for (int64_t i = 0; i < ne; ++i) m.enc_stack.push_back(XBlock<Real>::make(enc_bc, rng));
    }
    const int64_t nd = cfg.resolved_dec_blocks(m.backbone);
    for (int64_t i = 0; i < nd; ++i) m.dec_stack.push_back(XBlock<Real>::make(bc, rng));

    m.action_in = Linear<Real>::make(cfg.action_dim, cfg.embed_dim, rng);
    m.action_out = Linear<Real>::make_zeros(cfg.embed_dim, cfg.action_dim);
    m.pooled_proj = Linear<Real>::make(cfg.embed_dim, cfg.embed_dim, rng);
    if (cfg.condition_on_fusion) {
        m.fusion_proj = Linear<Real>::make(cfg.embed_dim, cfg.embed_dim, rng);
    }
    const int64_t max_len = m.obs_tokens() + cfg.action_horizon;
    m.pos_emb = Tensor<Real>::zeros({max_len, cfg.embed_dim});
    m.pos_emb.set_requires_grad(true);
    return m;
}

} // namespace xil
