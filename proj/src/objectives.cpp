#include "vicha/objectives.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace vicha {

void FeatureQueue::push_rows(const Mat& rows) {
    for (Eigen::Index r = 0; r < rows.rows(); ++r) {
        entries_.push_back(rows.row(r).transpose());
        while (static_cast<int>(entries_.size()) > capacity_) entries_.pop_front();
    }
}

Mat FeatureQueue::as_matrix(Eigen::Index dim) const {
    Mat out(static_cast<Eigen::Index>(entries_.size()), dim);
    for (size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].size() != dim)
            throw std::logic_error("FeatureQueue: entry dim mismatch");
        out.row(static_cast<Eigen::Index>(i)) = entries_[i].transpose();
    }
    return out;
}

HitcState HitcState::create(const ModelConfig& cfg, double tau_init, int queue_capacity) {
    if (tau_init <= 0.0) throw ConfigError("HitcState: tau_init must be positive");
    HitcState st;
    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    const size_t pairs = cfg.aligned_layer_pairs.size();
    for (size_t i = 0; i < pairs; ++i) {
        st.g_v.emplace_back(st.params, "hitc.g_v" + std::to_string(i), cfg.hidden_dim,
                            cfg.embed_dim, rng);
        st.g_t.emplace_back(st.params, "hitc.g_t" + std::to_string(i), cfg.hidden_dim,
                            cfg.embed_dim, rng);
    }
    st.log_tau = st.params.create("hitc.log_tau", 1, 1, Init::zeros, rng);
    st.log_tau.value_mut()(0, 0) = std::log(tau_init);
    // momentum heads start as copies of the online heads
    for (size_t i = 0; i < pairs; ++i) {
        Linear mv, mt;
        mv.w = st.momentum_params.adopt("hitc.g_v" + std::to_string(i) + ".w",
                                        Tensor::constant(st.g_v[i].w.value()));
        mv.b = st.momentum_params.adopt("hitc.g_v" + std::to_string(i) + ".b",
                                        Tensor::constant(st.g_v[i].b.value()));
        mt.w = st.momentum_params.adopt("hitc.g_t" + std::to_string(i) + ".w",
                                        Tensor::constant(st.g_t[i].w.value()));
        mt.b = st.momentum_params.adopt("hitc.g_t" + std::to_string(i) + ".b",
                                        Tensor::constant(st.g_t[i].b.value()));
        st.m_g_v.push_back(mv);
        st.m_g_t.push_back(mt);
    }
    st.image_queue = FeatureQueue(queue_capacity);
    st.text_queue = FeatureQueue(queue_capacity);
    return st;
}

MomentumPair HitcState::momentum_pair(double coefficient) const {
    MomentumPair mp;
    mp.coefficient = coefficient;
    for (const auto& [name, online] : params.items()) {
        if (name == "hitc.log_tau") continue;  // temperature has no twin
        mp.pairs.emplace_back(online, momentum_params.find(name));
    }
    return mp;
}

HitcResult hitc_loss(const HitcInputs& inputs, HitcState& state, bool enqueue) {
    const size_t P = state.num_pairs();
    if (inputs.vision_cls.size() != P || inputs.text_cls.size() != P)
        throw ConfigError("hitc_loss: one class-token batch per aligned pair required");
    const Eigen::Index B = inputs.vision_cls[0].rows();

    // 1/tau as a graph node so tau receives gradient
    Tensor inv_tau = exp_t(neg(state.log_tau));

    std::vector<int> diag_targets(static_cast<size_t>(B));
    for (Eigen::Index i = 0; i < B; ++i) diag_targets[static_cast<size_t>(i)] = static_cast<int>(i);

    HitcResult res;
    Tensor total = Tensor::scalar(0.0);
    Mat enqueue_text, enqueue_image;

    for (size_t p = 0; p < P; ++p) {
        Tensor zv = normalize_rows(state.g_v[p].forward(inputs.vision_cls[p]));
        Tensor zt = normalize_rows(state.g_t[p].forward(inputs.text_cls[p]));

        Tensor sim_i2t, sim_t2i;
        if (p + 1 < P) {
            // in-batch online negatives
            sim_i2t = matmul(zv, transpose(zt));
            sim_t2i = matmul(zt, transpose(zv));
        } else {
            if (!inputs.vision_cls_momentum.defined() || !inputs.text_cls_momentum.defined())
                throw ConfigError("hitc_loss: final pair requires momentum class tokens");
            Tensor zv_m, zt_m;
            {
                NoGradGuard ng;
                zv_m = normalize_rows(state.m_g_v[p].forward(inputs.vision_cls_momentum));
                zt_m = normalize_rows(state.m_g_t[p].forward(inputs.text_cls_momentum));
            }
            const Eigen::Index e = zt_m.cols();
            Mat text_cand_m(zt_m.rows() + static_cast<Eigen::Index>(state.text_queue.size()), e);
            text_cand_m << zt_m.value(), state.text_queue.as_matrix(e);
            Mat image_cand_m(zv_m.rows() + static_cast<Eigen::Index>(state.image_queue.size()), e);
            image_cand_m << zv_m.value(), state.image_queue.as_matrix(e);
            Tensor text_cand = Tensor::constant(std::move(text_cand_m));
            Tensor image_cand = Tensor::constant(std::move(image_cand_m));
            if (B == 1 && state.text_queue.size() == 0 && state.image_queue.size() == 0)
                res.degenerate = true;
            sim_i2t = matmul(zv, transpose(text_cand));
            sim_t2i = matmul(zt, transpose(image_cand));
            enqueue_text = zt_m.value();
            enqueue_image = zv_m.value();
        }

        Tensor ce_i2t = cross_entropy_rows(mul_scalar_t(sim_i2t, inv_tau), diag_targets);
        Tensor ce_t2i = cross_entropy_rows(mul_scalar_t(sim_t2i, inv_tau), diag_targets);
        total = add(total, add(ce_i2t, ce_t2i));
    }

    if (enqueue) {
        state.text_queue.push_rows(enqueue_text);
        state.image_queue.push_rows(enqueue_image);
    }
    res.loss = total;
    return res;
}

HardNegatives mine_hard_negatives(const Mat& similarity, Rng& rng) {
    const Eigen::Index B = similarity.rows();
    if (similarity.cols() != B) throw ConfigError("mine_hard_negatives: matrix must be square");
    if (B < 2) throw TrainingStepError("mine_hard_negatives: batch of at least 2 required");

    auto sample_excluding = [&rng](const Vec& scores, Eigen::Index excluded) {
        // softmax over the off-diagonal entries, temperature 1
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < scores.size(); ++j)
            if (j != excluded) mx = std::max(mx, scores(j));
        std::vector<double> w(static_cast<size_t>(scores.size()), 0.0);
        double sum = 0.0;
        for (Eigen::Index j = 0; j < scores.size(); ++j) {
            if (j == excluded) continue;
            w[static_cast<size_t>(j)] = std::exp(scores(j) - mx);
            sum += w[static_cast<size_t>(j)];
        }
        double u = rng.uniform() * sum;
        double acc = 0.0;
        Eigen::Index last = -1;
        for (Eigen::Index j = 0; j < scores.size(); ++j) {
            if (j == excluded) continue;
            acc += w[static_cast<size_t>(j)];
            last = j;
            if (u < acc) return j;
        }
        return last;  // u landed on the last active candidate
    };

    HardNegatives out;
    out.text_for_image.resize(static_cast<size_t>(B));
    out.image_for_text.resize(static_cast<size_t>(B));
    for (Eigen::Index i = 0; i < B; ++i)
        out.text_for_image[static_cast<size_t>(i)] =
            static_cast<int>(sample_excluding(similarity.row(i).transpose(), i));
    for (Eigen::Index j = 0; j < B; ++j)
        out.image_for_text[static_cast<size_t>(j)] =
            static_cast<int>(sample_excluding(similarity.col(j), j));
    return out;
}

Tensor itm_loss(const Tensor& multimodal_cls, const std::vector<int>& labels,
                const Linear& head) {
    if (static_cast<Eigen::Index>(labels.size()) != multimodal_cls.rows())
        throw ConfigError("itm_loss: one label per class-token row required");
    return cross_entropy_rows(head.forward(multimodal_cls), labels);
}

MlmCorruption plan_mlm_mask(const std::vector<int>& token_ids, const Tokenizer& tok,
                            double ratio, const std::array<double, 3>& action_probs,
                            Rng& rng, int vocab_size) {
    if (ratio <= 0.0 || ratio >= 1.0) throw ConfigError("plan_mlm_mask: ratio must be in (0,1)");
    const double psum = action_probs[0] + action_probs[1] + action_probs[2];
    if (std::abs(psum - 1.0) > 1e-9) throw ConfigError("plan_mlm_mask: action probs must sum to 1");

    std::vector<int> maskable;
    for (size_t i = 0; i < token_ids.size(); ++i)
        if (!tok.is_special(token_ids[i])) maskable.push_back(static_cast<int>(i));

    MlmCorruption out;
    out.corrupted_ids = token_ids;
    if (maskable.empty()) return out;

    const int n_mask = static_cast<int>(std::lround(ratio * static_cast<double>(maskable.size())));
    if (n_mask == 0) return out;
    std::vector<int> chosen = rng.sample_without_replacement(static_cast<int>(maskable.size()), n_mask);

    const int n_words = vocab_size - Tokenizer::kNumSpecials;
    for (int c : chosen) {
        const int pos = maskable[static_cast<size_t>(c)];
        const double u = rng.uniform();
        MaskAction act;
        if (u < action_probs[0]) {
            act = MaskAction::mask_token;
            out.corrupted_ids[static_cast<size_t>(pos)] = Tokenizer::kMask;
        } else if (u < action_probs[0] + action_probs[1]) {
            act = MaskAction::random_token;
            out.corrupted_ids[static_cast<size_t>(pos)] =
                Tokenizer::kNumSpecials + static_cast<int>(rng.uniform_int(std::max(1, n_words)));
        } else {
            act = MaskAction::keep;
        }
        out.plan.positions.push_back(pos);
        out.plan.actions.push_back(act);
    }
    return out;
}

Tensor mlm_loss(const TokenSequence& multimodal_last, const MaskPlan& plan,
                const std::vector<int>& true_ids, const Linear& mlm_head) {
    if (plan.empty()) return Tensor::scalar(0.0);
    std::vector<int> rows;
    std::vector<int> targets;
    for (int pos : plan.positions) {
        if (pos < 0 || pos >= static_cast<int>(true_ids.size()))
            throw ConfigError("mlm_loss: plan position outside the token sequence");
        rows.push_back(1 + pos);  // row 0 is the class token
        targets.push_back(true_ids[static_cast<size_t>(pos)]);
    }
    Tensor picked = gather_rows(multimodal_last.tokens, rows);
    return cross_entropy_rows(mlm_head.forward(picked), targets);
}

std::vector<bool> ImageMaskPlan::visible_mask(int patch_count) const {
    std::vector<bool> out(static_cast<size_t>(patch_count), false);
    for (int v : visible) out[static_cast<size_t>(v)] = true;
    return out;
}

ImageMaskPlan plan_image_mask(int patch_count, double ratio, Rng& rng) {
    if (ratio < 0.0 || ratio >= 1.0) throw ConfigError("plan_image_mask: ratio must be in [0,1)");
    const int n_masked = static_cast<int>(std::lround(ratio * patch_count));
    ImageMaskPlan plan;
    plan.masked = rng.sample_without_replacement(patch_count, n_masked);
    std::vector<bool> is_masked(static_cast<size_t>(patch_count), false);
    for (int m : plan.masked) is_masked[static_cast<size_t>(m)] = true;
    for (int i = 0; i < patch_count; ++i)
        if (!is_masked[static_cast<size_t>(i)]) plan.visible.push_back(i);
    return plan;
}

namespace {

// Decoder input: class slot plus one row per patch position in grid order;
// visible positions carry their encoded tokens, masked positions the learned
// mask token, all with decoder positional embeddings added.
Tensor build_mim_decoder_input(const TokenSequence& masked_last, const ImageMaskPlan& plan,
                               const MimDecoder& decoder, int patch_count) {
    if (masked_last.length() != 1 + static_cast<Eigen::Index>(plan.visible.size()))
        throw ConfigError("mim: masked forward length does not match the mask plan");

    std::vector<Tensor> rows;
    rows.reserve(static_cast<size_t>(patch_count) + 1);
    rows.push_back(add(masked_last.cls(), slice_rows(decoder.pos_embed, 0, 1)));

    std::vector<int> visible_row_of(static_cast<size_t>(patch_count), -1);
    for (size_t i = 0; i < plan.visible.size(); ++i)
        visible_row_of[static_cast<size_t>(plan.visible[i])] = static_cast<int>(1 + i);

    for (int p = 0; p < patch_count; ++p) {
        Tensor base = visible_row_of[static_cast<size_t>(p)] >= 0
                          ? row(masked_last.tokens, visible_row_of[static_cast<size_t>(p)])
                          : decoder.mask_token;
        rows.push_back(add(base, slice_rows(decoder.pos_embed, 1 + p, 1)));
    }
    return concat_rows(rows);
}

}  // namespace

Tensor u_mim_reconstruct(const std::vector<TokenSequence>& masked_vision_layers,
                         const ImageMaskPlan& plan, const MimDecoder& decoder,
                         const ModelConfig& cfg) {
    const int M = cfg.patch_count();
    Tensor x = build_mim_decoder_input(masked_vision_layers.back(), plan, decoder, M);
    for (const auto& block : decoder.blocks) x = block.forward(x);
    return decoder.pixel_head.forward(slice_rows(x, 1, M));
}

Tensor m_mim_reconstruct(const std::vector<TokenSequence>& masked_vision_layers,
                         const ImageMaskPlan& plan, const TokenSequence& text_last,
                         const VichaModel& model) {
    const ModelConfig& cfg = model.config();
    const int M = cfg.patch_count();
    Tensor x = build_mim_decoder_input(masked_vision_layers.back(), plan, model.mim_decoder(), M);

    TokenSequence queries;
    queries.tokens = x;
    queries.kinds.assign(static_cast<size_t>(M) + 1, TokenKind::mask);
    queries.kinds[0] = TokenKind::cls;
    queries.positions.resize(static_cast<size_t>(M) + 1);
    for (int i = 0; i <= M; ++i) queries.positions[static_cast<size_t>(i)] = i - 1;
    queries.positions[0] = 0;

    MultimodalOutput out = model.multimodal_decode(queries, text_last);
    return model.mim_pixel_proj().forward(slice_rows(out.last().tokens, 1, M));
}

Tensor masked_reconstruction_mse(const Tensor& predictions, const ImageMaskPlan& plan,
                                 const Image& target, int patch_size) {
    if (plan.masked.empty()) return Tensor::scalar(0.0);
    Mat target_patches = patchify(target, patch_size);
    if (predictions.rows() != target_patches.rows() ||
        predictions.cols() != target_patches.cols())
        throw ConfigError("masked_reconstruction_mse: prediction/target shape mismatch");
    std::vector<int> mrows(plan.masked.begin(), plan.masked.end());
    Tensor pred_masked = gather_rows(predictions, mrows);
    Mat target_masked(static_cast<Eigen::Index>(mrows.size()), target_patches.cols());
    for (size_t i = 0; i < mrows.size(); ++i)
        target_masked.row(static_cast<Eigen::Index>(i)) = target_patches.row(mrows[i]);
    return mean_all(square(sub(pred_masked, Tensor::constant(target_masked))));
}

Tensor u_mim_loss(const std::vector<TokenSequence>& masked_vision_layers,
                  const ImageMaskPlan& plan, const MimDecoder& decoder,
                  const Image& target, const ModelConfig& cfg) {
    if (plan.masked.empty()) return Tensor::scalar(0.0);
    Tensor predictions = u_mim_reconstruct(masked_vision_layers, plan, decoder, cfg);
    return masked_reconstruction_mse(predictions, plan, target, cfg.patch_size);
}

Tensor m_mim_loss(const std::vector<TokenSequence>& masked_vision_layers,
                  const ImageMaskPlan& plan, const TokenSequence& text_last,
                  const VichaModel& model, const Image& target) {
    if (plan.masked.empty()) return Tensor::scalar(0.0);
    Tensor predictions = m_mim_reconstruct(masked_vision_layers, plan, text_last, model);
    return masked_reconstruction_mse(predictions, plan, target, model.config().patch_size);
}

LossBundle combine_losses(const Tensor& itm, const Tensor& mlm, const Tensor& hitc,
                          const Tensor& mim, double lambda_hitc, double lambda_mim) {
    auto check_finite = [](const Tensor& t, const char* name) {
        if (!std::isfinite(t.item()))
            throw TrainingStepError(std::string("combine_losses: non-finite ") + name + " loss");
    };
    check_finite(itm, "itm");
    check_finite(mlm, "mlm");
    check_finite(hitc, "hitc");
    check_finite(mim, "mim");

    LossBundle bundle;
    bundle.itm = itm;
    bundle.mlm = mlm;
    bundle.hitc = hitc;
    bundle.mim = mim;
    bundle.lambda_hitc = lambda_hitc;
    bundle.lambda_mim = lambda_mim;
    bundle.total =
        add(add(add(itm, mlm), scale(hitc, lambda_hitc)), scale(mim, lambda_mim));
    return bundle;
}

}  // namespace vicha

