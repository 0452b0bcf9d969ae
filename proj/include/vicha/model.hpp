#pragma once

#include "vicha/config.hpp"
#include "vicha/image.hpp"
#include "vicha/nn.hpp"
#include "vicha/tokenizer.hpp"

#include <optional>
#include <string>
#include <vector>

namespace vicha {

enum class TokenKind { cls, patch, concept_tag, text, mask };

// Ordered embedded tokens. kinds/positions run parallel to the rows of
// `tokens`; positions hold the source index (patch grid index, concept list
// index, or text position).
struct TokenSequence {
    Tensor tokens;  // length x hidden_dim
    std::vector<TokenKind> kinds;
    std::vector<int> positions;

    Eigen::Index length() const { return tokens.rows(); }
    Tensor cls() const { return row(tokens, 0); }
};

void validate_token_sequence(const TokenSequence& seq, bool allow_mask_tokens = false);

struct VisionEncoder {
    Linear patch_proj;
    Tensor cls_token;     // 1 x hidden
    Tensor pos_embed;     // (1 + M) x hidden, row 0 is the class slot
    Tensor concept_type;  // 1 x hidden, added to every concept token
    std::vector<EncoderBlock> blocks;

    VisionEncoder() = default;
    VisionEncoder(ParamRegistry& reg, const std::string& prefix, const ModelConfig& cfg,
                  Rng& rng);
};

struct TextEncoder {
    Tensor token_embed;  // vocab x hidden
    Tensor pos_embed;    // (1 + max_text_len) x hidden
    std::vector<EncoderBlock> blocks;

    TextEncoder() = default;
    TextEncoder(ParamRegistry& reg, const std::string& prefix, const ModelConfig& cfg,
                int num_layers, Rng& rng);
};

struct MultimodalDecoder {
    std::vector<DecoderBlock> blocks;

    MultimodalDecoder() = default;
    MultimodalDecoder(ParamRegistry& reg, const std::string& prefix, const ModelConfig& cfg,
                      Rng& rng);
};

struct MultimodalOutput {
    std::vector<TokenSequence> layers;  // one per decoder block
    // cross_attn[layer][head]: query_len x key_len attention probabilities,
    // populated only when capture was requested
    std::vector<std::vector<Tensor>> cross_attn;

    const TokenSequence& last() const { return layers.back(); }
};

struct MultimodalOptions {
    bool capture_attention = false;
    bool force_uniform_attention = false;
};

// MAE-style reconstruction decoder: visible encodings plus learned mask
// tokens with positional embeddings, a small self-attention stack, and a
// pixel head back to patch space.
struct MimDecoder {
    Tensor mask_token;  // 1 x hidden
    Tensor pos_embed;   // (1 + M) x hidden (class slot + patch grid)
    std::vector<EncoderBlock> blocks;
    Linear pixel_head;  // hidden -> patch_dim

    MimDecoder() = default;
    MimDecoder(ParamRegistry& reg, const std::string& prefix, const ModelConfig& cfg,
               Rng& rng);
};

// online parameters paired with their EMA twins, one entry per tensor
struct MomentumPair {
    std::vector<std::pair<Tensor, Tensor>> pairs;  // (online, momentum)
    double coefficient = 0.995;
};

// momentum <- m * momentum + (1 - m) * online, elementwise; online untouched
void momentum_update(MomentumPair& pair);

class VichaModel {
public:
    VichaModel(const ModelConfig& cfg, bool with_momentum = true);

    const ModelConfig& config() const { return cfg_; }

    // Full or masked vision forward. visible_mask selects patches (true =
    // visible); masked forwards must not carry concept tokens.
    std::vector<TokenSequence> encode_image(
        const Image& image, const std::optional<TokenSequence>& concept_tokens = {},
        const std::optional<std::vector<bool>>& visible_mask = {}) const;

    std::vector<TokenSequence> encode_text(const std::vector<int>& token_ids) const;

    // one class-token summary per concept string, kind = concept_tag
    TokenSequence encode_concepts(const std::vector<std::string>& concepts,
                                  const Tokenizer& tok) const;

    MultimodalOutput multimodal_decode(const TokenSequence& queries,
                                       const TokenSequence& keys_values,
                                       const MultimodalOptions& opts = {}) const;

    // momentum-twin forwards (no gradient graph)
    std::vector<TokenSequence> encode_image_momentum(
        const Image& image, const std::optional<TokenSequence>& concept_tokens = {}) const;
    std::vector<TokenSequence> encode_text_momentum(const std::vector<int>& token_ids) const;
    TokenSequence encode_concepts_momentum(const std::vector<std::string>& concepts,
                                           const Tokenizer& tok) const;

    ParamRegistry& params() { return params_; }
    const ParamRegistry& params() const { return params_; }
    ParamRegistry& momentum_params() { return momentum_params_; }

    bool has_momentum() const { return has_momentum_; }
    // (online, momentum) pairing over the encoder stacks
    MomentumPair momentum_pair(double coefficient) const;

    const VisionEncoder& vision() const { return vision_; }
    const MultimodalDecoder& multimodal() const { return multimodal_; }
    const Linear& itm_head() const { return itm_head_; }
    const Linear& mlm_head() const { return mlm_head_; }
    const MimDecoder& mim_decoder() const { return mim_decoder_; }
    const Linear& mim_pixel_proj() const { return mim_pixel_proj_; }

private:
    std::vector<TokenSequence> encode_image_with(
        const VisionEncoder& enc, const Image& image,
        const std::optional<TokenSequence>& concepts,
        const std::optional<std::vector<bool>>& visible_mask) const;
    std::vector<TokenSequence> encode_text_with(const TextEncoder& enc,
                                                const std::vector<int>& ids) const;
    TokenSequence encode_concepts_with(const TextEncoder& enc,
                                       const std::vector<std::string>& concepts,
                                       const Tokenizer& tok) const;

    ModelConfig cfg_;
    ParamRegistry params_;
    ParamRegistry momentum_params_;
    bool has_momentum_ = false;

    VisionEncoder vision_;
    TextEncoder text_;
    TextEncoder concept_encoder_;
    MultimodalDecoder multimodal_;
    Linear itm_head_;       // hidden -> 2
    Linear mlm_head_;       // hidden -> vocab
    MimDecoder mim_decoder_;
    Linear mim_pixel_proj_;  // hidden -> patch_dim (projection after the shared decoder)

    VisionEncoder m_vision_;
    TextEncoder m_text_;
    TextEncoder m_concept_encoder_;
};

// Two-image multimodal decoder: branch A runs the original blocks, branch B
// replicas whose cross-attention key/value projections are shared with A.
struct PairedMultimodalDecoder {
    std::vector<DecoderBlock> branch_a;
    std::vector<DecoderBlock> branch_b;
    ParamRegistry replica_params;  // branch B parameters (shared ones adopted)

    // branch outputs before any merge
    std::pair<TokenSequence, TokenSequence> forward(const TokenSequence& text,
                                                    const TokenSequence& image_a,
                                                    const TokenSequence& image_b) const;
};

PairedMultimodalDecoder replicate_multimodal_for_pair(const VichaModel& model);

}  // namespace vicha
