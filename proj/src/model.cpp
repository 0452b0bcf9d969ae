#include "vicha/model.hpp"

#include <stdexcept>

namespace vicha {

void validate_token_sequence(const TokenSequence& seq, bool allow_mask_tokens) {
    const auto n = static_cast<size_t>(seq.length());
    if (seq.kinds.size() != n || seq.positions.size() != n)
        throw std::logic_error("TokenSequence: kinds/positions size mismatch");
    int cls_count = 0;
    bool seen_concept = false;
    for (size_t i = 0; i < n; ++i) {
        if (seq.kinds[i] == TokenKind::cls) {
            ++cls_count;
            if (i != 0) throw std::logic_error("TokenSequence: class token must be at index 0");
        }
        if (seq.kinds[i] == TokenKind::concept_tag) seen_concept = true;
        if (seq.kinds[i] == TokenKind::patch && seen_concept)
            throw std::logic_error("TokenSequence: patch token after concept tokens");
        if (seq.kinds[i] == TokenKind::mask && !allow_mask_tokens)
            throw std::logic_error("TokenSequence: mask tokens only valid in MIM decoder input");
    }
    if (cls_count != 1) throw std::logic_error("TokenSequence: exactly one class token required");
}

// --- encoders ----------------------------------------------------------------

VisionEncoder::VisionEncoder(ParamRegistry& reg, const std::string& prefix,
                             const ModelConfig& cfg, Rng& rng) {
    patch_proj = Linear(reg, prefix + ".patch_proj", cfg.patch_dim(), cfg.hidden_dim, rng);
    cls_token = reg.create(prefix + ".cls_token", 1, cfg.hidden_dim, Init::truncated_normal, rng);
    pos_embed = reg.create(prefix + ".pos_embed", 1 + cfg.patch_count(), cfg.hidden_dim,
                           Init::truncated_normal, rng);
    concept_type = reg.create(prefix + ".concept_type", 1, cfg.hidden_dim,
                              Init::truncated_normal, rng);
    for (int i = 0; i < cfg.vision_layers; ++i)
        blocks.emplace_back(reg, prefix + ".block" + std::to_string(i), cfg.hidden_dim,
                            cfg.num_heads, rng);
}

TextEncoder::TextEncoder(ParamRegistry& reg, const std::string& prefix,
                         const ModelConfig& cfg, int num_layers, Rng& rng) {
    token_embed = reg.create(prefix + ".token_embed", cfg.vocab_size, cfg.hidden_dim,
                             Init::truncated_normal, rng);
    pos_embed = reg.create(prefix + ".pos_embed", 1 + cfg.max_text_len, cfg.hidden_dim,
                           Init::truncated_normal, rng);
    for (int i = 0; i < num_layers; ++i)
        blocks.emplace_back(reg, prefix + ".block" + std::to_string(i), cfg.hidden_dim,
                            cfg.num_heads, rng);
}

MultimodalDecoder::MultimodalDecoder(ParamRegistry& reg, const std::string& prefix,
                                     const ModelConfig& cfg, Rng& rng) {
    for (int i = 0; i < cfg.multimodal_layers; ++i)
        blocks.emplace_back(reg, prefix + ".block" + std::to_string(i), cfg.hidden_dim,
                            cfg.num_heads, rng);
}

MimDecoder::MimDecoder(ParamRegistry& reg, const std::string& prefix,
                       const ModelConfig& cfg, Rng& rng) {
    mask_token = reg.create(prefix + ".mask_token", 1, cfg.hidden_dim,
                            Init::truncated_normal, rng);
    pos_embed = reg.create(prefix + ".pos_embed", 1 + cfg.patch_count(), cfg.hidden_dim,
                           Init::truncated_normal, rng);
    for (int i = 0; i < cfg.mim_decoder_layers; ++i)
        blocks.emplace_back(reg, prefix + ".block" + std::to_string(i), cfg.hidden_dim,
                            cfg.mim_decoder_heads, rng);
    pixel_head = Linear(reg, prefix + ".pixel_head", cfg.hidden_dim, cfg.patch_dim(), rng);
}

void momentum_update(MomentumPair& pair) {
    const double m = pair.coefficient;
    for (auto& [online, momentum] : pair.pairs) {
        if (online.rows() != momentum.rows() || online.cols() != momentum.cols())
            throw ConfigError("momentum_update: online/momentum shape mismatch");
        momentum.value_mut() = m * momentum.value() + (1.0 - m) * online.value();
    }
}

// --- VichaModel ---------------------------------------------------------------

VichaModel::VichaModel(const ModelConfig& cfg, bool with_momentum) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    vision_ = VisionEncoder(params_, "vision", cfg_, rng);
    text_ = TextEncoder(params_, "text", cfg_, cfg_.text_layers, rng);
    concept_encoder_ = TextEncoder(params_, "vc", cfg_, cfg_.vc_encoder_layers, rng);
    multimodal_ = MultimodalDecoder(params_, "multimodal", cfg_, rng);
    itm_head_ = Linear(params_, "itm_head", cfg_.hidden_dim, 2, rng);
    mlm_head_ = Linear(params_, "mlm_head", cfg_.hidden_dim, cfg_.vocab_size, rng);
    mim_decoder_ = MimDecoder(params_, "mim", cfg_, rng);
    mim_pixel_proj_ = Linear(params_, "mim_pixel_proj", cfg_.hidden_dim, cfg_.patch_dim(), rng);

    if (with_momentum) {
        has_momentum_ = true;
        // momentum twins start as exact copies of the online encoders
        for (const auto& [name, t] : params_.items()) {
            bool is_encoder = name.rfind("vision.", 0) == 0 || name.rfind("text.", 0) == 0 ||
                              name.rfind("vc.", 0) == 0;
            if (!is_encoder) continue;
            momentum_params_.adopt(name, Tensor::constant(t.value()));
        }
        auto bind_linear = [&](Linear& l, const std::string& prefix) {
            l.w = momentum_params_.find(prefix + ".w");
            l.b = momentum_params_.find(prefix + ".b");
        };
        auto bind_ln = [&](LayerNorm& l, const std::string& prefix) {
            l.gamma = momentum_params_.find(prefix + ".gamma");
            l.beta = momentum_params_.find(prefix + ".beta");
        };
        auto bind_block = [&](EncoderBlock& b, const std::string& prefix) {
            bind_ln(b.ln1, prefix + ".ln1");
            bind_ln(b.ln2, prefix + ".ln2");
            bind_linear(b.attn.wq, prefix + ".attn.wq");
            bind_linear(b.attn.wk, prefix + ".attn.wk");
            bind_linear(b.attn.wv, prefix + ".attn.wv");
            bind_linear(b.attn.wo, prefix + ".attn.wo");
            bind_linear(b.mlp.fc1, prefix + ".mlp.fc1");
            bind_linear(b.mlp.fc2, prefix + ".mlp.fc2");
        };

        m_vision_.patch_proj.w = momentum_params_.find("vision.patch_proj.w");
        m_vision_.patch_proj.b = momentum_params_.find("vision.patch_proj.b");
        m_vision_.cls_token = momentum_params_.find("vision.cls_token");
        m_vision_.pos_embed = momentum_params_.find("vision.pos_embed");
        m_vision_.concept_type = momentum_params_.find("vision.concept_type");
        m_vision_.blocks.resize(cfg_.vision_layers);
        for (int i = 0; i < cfg_.vision_layers; ++i) {
            m_vision_.blocks[i].attn.num_heads = cfg_.num_heads;
            m_vision_.blocks[i].attn.head_dim = cfg_.hidden_dim / cfg_.num_heads;
            bind_block(m_vision_.blocks[i], "vision.block" + std::to_string(i));
        }
        auto bind_text = [&](TextEncoder& enc, const std::string& prefix, int layers) {
            enc.token_embed = momentum_params_.find(prefix + ".token_embed");
            enc.pos_embed = momentum_params_.find(prefix + ".pos_embed");
            enc.blocks.resize(layers);
            for (int i = 0; i < layers; ++i) {
                enc.blocks[i].attn.num_heads = cfg_.num_heads;
                enc.blocks[i].attn.head_dim = cfg_.hidden_dim / cfg_.num_heads;
                bind_block(enc.blocks[i], prefix + ".block" + std::to_string(i));
            }
        };
        bind_text(m_text_, "text", cfg_.text_layers);
        bind_text(m_concept_encoder_, "vc", cfg_.vc_encoder_layers);
    }
}

MomentumPair VichaModel::momentum_pair(double coefficient) const {
    if (!has_momentum_) throw std::logic_error("VichaModel: built without momentum twin");
    MomentumPair mp;
    mp.coefficient = coefficient;
    for (const auto& [name, online] : params_.items()) {
        bool is_encoder = name.rfind("vision.", 0) == 0 || name.rfind("text.", 0) == 0 ||
                          name.rfind("vc.", 0) == 0;
        if (!is_encoder) continue;
        mp.pairs.emplace_back(online, momentum_params_.find(name));
    }
    return mp;
}

std::vector<TokenSequence> VichaModel::encode_image_with(
    const VisionEncoder& enc, const Image& image,
    const std::optional<TokenSequence>& concepts,
    const std::optional<std::vector<bool>>& visible_mask) const {
    if (image.c != cfg_.channels || image.h != cfg_.image_size || image.w != cfg_.image_size)
        throw ConfigError("encode_image: image dimensions do not match the config");
    if (visible_mask && concepts)
        throw ConfigError("encode_image: masked forward must not carry concept tokens");

    const int M = cfg_.patch_count();
    Mat patches = patchify(image, cfg_.patch_size);

    std::vector<int> keep;
    if (visible_mask) {
        if (static_cast<int>(visible_mask->size()) != M)
            throw ConfigError("encode_image: visible_mask length must equal patch count");
        for (int i = 0; i < M; ++i)
            if ((*visible_mask)[i]) keep.push_back(i);
        if (keep.empty()) throw std::invalid_argument("encode_image: visible_mask keeps no patches");
    } else {
        keep.resize(M);
        for (int i = 0; i < M; ++i) keep[i] = i;
    }

    Mat kept_patches(static_cast<Eigen::Index>(keep.size()), patches.cols());
    for (size_t i = 0; i < keep.size(); ++i)
        kept_patches.row(static_cast<Eigen::Index>(i)) = patches.row(keep[i]);

    Tensor patch_tok = enc.patch_proj.forward(Tensor::constant(kept_patches));
    std::vector<int> pos_idx;
    pos_idx.reserve(keep.size());
    for (int i : keep) pos_idx.push_back(1 + i);
    patch_tok = add(patch_tok, gather_rows(enc.pos_embed, pos_idx));

    Tensor cls = add(enc.cls_token, slice_rows(enc.pos_embed, 0, 1));

    std::vector<Tensor> parts = {cls, patch_tok};
    std::vector<TokenKind> kinds = {TokenKind::cls};
    std::vector<int> positions = {0};
    for (int i : keep) {
        kinds.push_back(TokenKind::patch);
        positions.push_back(i);
    }
    if (concepts && concepts->length() > 0) {
        Tensor ct = add_rowvec(concepts->tokens, enc.concept_type);
        parts.push_back(ct);
        for (Eigen::Index i = 0; i < concepts->length(); ++i) {
            kinds.push_back(TokenKind::concept_tag);
            positions.push_back(concepts->positions[static_cast<size_t>(i)]);
        }
    }

    Tensor x = concat_rows(parts);
    std::vector<TokenSequence> out;
    out.reserve(enc.blocks.size());
    for (const auto& block : enc.blocks) {
        x = block.forward(x);
        out.push_back(TokenSequence{x, kinds, positions});
    }
    return out;
}

std::vector<TokenSequence> VichaModel::encode_text_with(const TextEncoder& enc,
                                                        const std::vector<int>& ids) const {
    if (static_cast<int>(ids.size()) > cfg_.max_text_len)
        throw ConfigError("encode_text: sequence exceeds max_text_len");
    for (int id : ids)
        if (id < 0 || id >= cfg_.vocab_size)
            throw std::out_of_range("encode_text: token id outside the vocabulary");

    std::vector<int> emb_idx = {Tokenizer::kCls};
    emb_idx.insert(emb_idx.end(), ids.begin(), ids.end());
    std::vector<int> pos_idx(emb_idx.size());
    for (size_t i = 0; i < pos_idx.size(); ++i) pos_idx[i] = static_cast<int>(i);

    Tensor x = add(gather_rows(enc.token_embed, emb_idx), gather_rows(enc.pos_embed, pos_idx));

    std::vector<TokenKind> kinds(emb_idx.size(), TokenKind::text);
    kinds[0] = TokenKind::cls;
    std::vector<int> positions(emb_idx.size());
    for (size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<int>(i);

    std::vector<TokenSequence> out;
    out.reserve(enc.blocks.size());
    for (const auto& block : enc.blocks) {
        x = block.forward(x);
        out.push_back(TokenSequence{x, kinds, positions});
    }
    return out;
}

TokenSequence VichaModel::encode_concepts_with(const TextEncoder& enc,
                                               const std::vector<std::string>& concepts,
                                               const Tokenizer& tok) const {
    if (static_cast<int>(concepts.size()) > cfg_.max_concepts)
        throw ConfigError("encode_concepts: more concepts than max_concepts");
    std::vector<TokenKind> kinds(concepts.size(), TokenKind::concept_tag);
    std::vector<int> positions(concepts.size());
    for (size_t i = 0; i < concepts.size(); ++i) positions[i] = static_cast<int>(i);

    if (concepts.empty())
        return TokenSequence{Tensor::constant(Mat::Zero(0, cfg_.hidden_dim)), kinds, positions};

    // each concept is encoded separately; its class token is the summary
    std::vector<Tensor> cls_rows;
    cls_rows.reserve(concepts.size());
    for (const auto& phrase : concepts) {
        std::vector<int> ids = tok.encode(phrase);
        if (static_cast<int>(ids.size()) > cfg_.max_text_len)
            ids.resize(static_cast<size_t>(cfg_.max_text_len));
        auto layers = encode_text_with(enc, ids);
        cls_rows.push_back(layers.back().cls());
    }
    return TokenSequence{concat_rows(cls_rows), kinds, positions};
}

std::vector<TokenSequence> VichaModel::encode_image(
    const Image& image, const std::optional<TokenSequence>& concept_tokens,
    const std::optional<std::vector<bool>>& visible_mask) const {
    return encode_image_with(vision_, image, concept_tokens, visible_mask);
}

std::vector<TokenSequence> VichaModel::encode_text(const std::vector<int>& token_ids) const {
    return encode_text_with(text_, token_ids);
}

TokenSequence VichaModel::encode_concepts(const std::vector<std::string>& concepts,
                                          const Tokenizer& tok) const {
    return encode_concepts_with(concept_encoder_, concepts, tok);
}

std::vector<TokenSequence> VichaModel::encode_image_momentum(
    const Image& image, const std::optional<TokenSequence>& concept_tokens) const {
    if (!has_momentum_) throw std::logic_error("VichaModel: built without momentum twin");
    NoGradGuard ng;
    return encode_image_with(m_vision_, image, concept_tokens, {});
}

std::vector<TokenSequence> VichaModel::encode_text_momentum(
    const std::vector<int>& token_ids) const {
    if (!has_momentum_) throw std::logic_error("VichaModel: built without momentum twin");
    NoGradGuard ng;
    return encode_text_with(m_text_, token_ids);
}

TokenSequence VichaModel::encode_concepts_momentum(const std::vector<std::string>& concepts,
                                                   const Tokenizer& tok) const {
    if (!has_momentum_) throw std::logic_error("VichaModel: built without momentum twin");
    NoGradGuard ng;
    return encode_concepts_with(m_concept_encoder_, concepts, tok);
}

MultimodalOutput VichaModel::multimodal_decode(const TokenSequence& queries,
                                               const TokenSequence& keys_values,
                                               const MultimodalOptions& opts) const {
    if (queries.tokens.cols() != cfg_.hidden_dim || keys_values.tokens.cols() != cfg_.hidden_dim)
        throw ConfigError("multimodal_decode: sequence width must equal hidden_dim");
    MultimodalOutput out;
    Tensor x = queries.tokens;
    for (const auto& block : multimodal_.blocks) {
        AttentionOptions attn_opts;
        attn_opts.force_uniform = opts.force_uniform_attention;
        std::vector<Tensor> captured;
        if (opts.capture_attention) attn_opts.capture = &captured;
        x = block.forward(x, keys_values.tokens, attn_opts);
        out.layers.push_back(TokenSequence{x, queries.kinds, queries.positions});
        out.cross_attn.push_back(std::move(captured));
    }
    return out;
}

std::pair<TokenSequence, TokenSequence> PairedMultimodalDecoder::forward(
    const TokenSequence& text, const TokenSequence& image_a,
    const TokenSequence& image_b) const {
    Tensor xa = text.tokens;
    Tensor xb = text.tokens;
    for (size_t i = 0; i < branch_a.size(); ++i) {
        xa = branch_a[i].forward(xa, image_a.tokens);
        xb = branch_b[i].forward(xb, image_b.tokens);
    }
    return {TokenSequence{xa, text.kinds, text.positions},
            TokenSequence{xb, text.kinds, text.positions}};
}

PairedMultimodalDecoder replicate_multimodal_for_pair(const VichaModel& model) {
    PairedMultimodalDecoder out;
    out.branch_a = model.multimodal().blocks;
    for (size_t i = 0; i < out.branch_a.size(); ++i)
        out.branch_b.push_back(out.branch_a[i].replicate(
            out.replica_params, "multimodal_replica.block" + std::to_string(i)));
    return out;
}

}  // namespace vicha
