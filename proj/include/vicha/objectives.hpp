#pragma once

#include "vicha/config.hpp"
#include "vicha/image.hpp"
#include "vicha/model.hpp"
#include "vicha/nn.hpp"
#include "vicha/rng.hpp"
#include "vicha/tokenizer.hpp"

#include <deque>
#include <optional>
#include <string>
#include <vector>

namespace vicha {

struct TrainingStepError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// FIFO buffer of unit-norm feature rows (oldest first).
class FeatureQueue {
public:
    explicit FeatureQueue(int capacity = 0) : capacity_(capacity) {}

    void push_rows(const Mat& rows);
    Mat as_matrix(Eigen::Index dim) const;  // size x dim; empty -> 0 x dim
    size_t size() const { return entries_.size(); }
    int capacity() const { return capacity_; }
    const std::deque<Vec>& entries() const { return entries_; }
    void assign(std::deque<Vec> entries) { entries_ = std::move(entries); }

private:
    int capacity_;
    std::deque<Vec> entries_;
};

// Projection heads, shared learned temperature, their momentum twins, and the
// last-layer feature queues for the hierarchical contrastive loss.
struct HitcState {
    std::vector<Linear> g_v;    // one per aligned pair, hidden -> embed
    std::vector<Linear> g_t;
    std::vector<Linear> m_g_v;  // momentum twins
    std::vector<Linear> m_g_t;
    Tensor log_tau;             // tau = exp(log_tau) keeps tau > 0
    FeatureQueue image_queue;
    FeatureQueue text_queue;

    ParamRegistry params;           // online heads + log_tau
    ParamRegistry momentum_params;  // momentum heads

    static HitcState create(const ModelConfig& cfg, double tau_init, int queue_capacity);

    double tau_value() const { return std::exp(log_tau.value()(0, 0)); }
    size_t num_pairs() const { return g_v.size(); }
    MomentumPair momentum_pair(double coefficient) const;
};

struct HitcInputs {
    // class tokens per aligned pair, batch rows x hidden
    std::vector<Tensor> vision_cls;
    std::vector<Tensor> text_cls;
    // momentum-encoder class tokens for the final pair
    Tensor vision_cls_momentum;
    Tensor text_cls_momentum;
};

struct HitcResult {
    Tensor loss;
    bool degenerate = false;  // batch of 1 against empty queues
};

// Eq. 1/2 hierarchical contrastive loss. Positives are positional (row i of
// the vision batch pairs with row i of the text batch). Non-final pairs use
// in-batch online features of both modalities; the final pair scores online
// features against momentum features plus the queues. Per pair the loss is
// mean cross-entropy per direction, summed over both directions, then summed
// across pairs. When enqueue is set, the final pair's momentum features are
// pushed after the loss is computed.
HitcResult hitc_loss(const HitcInputs& inputs, HitcState& state, bool enqueue = true);

struct HardNegatives {
    std::vector<int> text_for_image;  // index of the hard text for image i
    std::vector<int> image_for_text;  // index of the hard image for text j
};

// Samples, for every image, a non-matching text (and symmetrically an image
// for every text) with probability proportional to the softmax of the
// off-diagonal similarities. The diagonal (the positive) is never selected.
HardNegatives mine_hard_negatives(const Mat& similarity, Rng& rng);

// Mean 2-way cross-entropy of the matching head over multimodal class tokens.
// labels: 1 = matching pair, 0 = mined negative.
Tensor itm_loss(const Tensor& multimodal_cls, const std::vector<int>& labels,
                const Linear& head);

enum class MaskAction { mask_token, random_token, keep };

struct MaskPlan {
    std::vector<int> positions;        // indices into the content-token array
    std::vector<MaskAction> actions;   // parallel to positions

    bool empty() const { return positions.empty(); }
};

struct MlmCorruption {
    MaskPlan plan;
    std::vector<int> corrupted_ids;
};

// BERT-style corruption: round(ratio * maskable) non-special positions get an
// action drawn from action_probs = {mask, random, keep}. Random replacements
// are drawn from the non-special id range.
MlmCorruption plan_mlm_mask(const std::vector<int>& token_ids, const Tokenizer& tok,
                            double ratio, const std::array<double, 3>& action_probs,
                            Rng& rng, int vocab_size);

// Cross-entropy at masked positions only; multimodal_last rows are
// [cls, text_0, ..]. Empty plan contributes exactly 0.
Tensor mlm_loss(const TokenSequence& multimodal_last, const MaskPlan& plan,
                const std::vector<int>& true_ids, const Linear& mlm_head);

struct ImageMaskPlan {
    std::vector<int> visible;  // ascending patch indices
    std::vector<int> masked;   // ascending patch indices

    std::vector<bool> visible_mask(int patch_count) const;
};

// |masked| = round(ratio * M), uniform without replacement.
ImageMaskPlan plan_image_mask(int patch_count, double ratio, Rng& rng);

// Per-patch pixel predictions (patch_count x patch_dim) from a concept-free
// masked vision forward, MAE style: visible encodings and learned mask tokens
// with positional embeddings through the reconstruction decoder.
Tensor u_mim_reconstruct(const std::vector<TokenSequence>& masked_vision_layers,
                         const ImageMaskPlan& plan, const MimDecoder& decoder,
                         const ModelConfig& cfg);

// Multimodal variant: the same decoder input goes through the shared
// multimodal decoder as queries with text tokens as keys/values, then the
// pixel projection maps back to patch space.
Tensor m_mim_reconstruct(const std::vector<TokenSequence>& masked_vision_layers,
                         const ImageMaskPlan& plan, const TokenSequence& text_last,
                         const VichaModel& model);

// MSE between predictions and the true patch pixels, over masked patches
// only; predictions at visible patches cannot affect the result.
Tensor masked_reconstruction_mse(const Tensor& predictions, const ImageMaskPlan& plan,
                                 const Image& target, int patch_size);

Tensor u_mim_loss(const std::vector<TokenSequence>& masked_vision_layers,
                  const ImageMaskPlan& plan, const MimDecoder& decoder,
                  const Image& target, const ModelConfig& cfg);

Tensor m_mim_loss(const std::vector<TokenSequence>& masked_vision_layers,
                  const ImageMaskPlan& plan, const TokenSequence& text_last,
                  const VichaModel& model, const Image& target);

struct LossBundle {
    Tensor itm;
    Tensor mlm;
    Tensor hitc;
    Tensor mim;
    Tensor total;
    double lambda_hitc = 0.1;
    double lambda_mim = 1.0;

    double itm_value() const { return itm.item(); }
    double mlm_value() const { return mlm.item(); }
    double hitc_value() const { return hitc.item(); }
    double mim_value() const { return mim.item(); }
    double total_value() const { return total.item(); }
};

// total = itm + mlm + lambda_hitc * hitc + lambda_mim * mim, composed
// left-to-right in that order. Throws TrainingStepError naming the first
// non-finite component.
LossBundle combine_losses(const Tensor& itm, const Tensor& mlm, const Tensor& hitc,
                          const Tensor& mim, double lambda_hitc, double lambda_mim);

}  // namespace vicha
