#pragma once

#include "vicha/data.hpp"
#include "vicha/model.hpp"
#include "vicha/objectives.hpp"

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace vicha {

struct RetrievalResult {
    std::map<int, double> text_to_image;  // K -> recall@K
    std::map<int, double> image_to_text;
    double rsum = 0.0;  // sum of the six recalls x 100

    std::string to_json() const;
};

// stage-2 score for (text query, image candidate); higher ranks first
using RerankScorer = std::function<double(int text_idx, int image_idx)>;

// Two-stage retrieval over a known bijection: stage 1 ranks by the final
// aligned pair's projected cosine similarity, stage 2 reranks the top m by
// the matching head's positive-class probability (or a supplied scorer).
// Evaluation uses each image's full concept set, without VCA. m larger than
// the gallery is clamped with a warning.
RetrievalResult retrieval_eval(VichaModel& model, HitcState& state, const Tokenizer& tok,
                               const Manifest& gallery,
                               const std::vector<VisualConceptSet>& concept_sets, int m,
                               const std::optional<RerankScorer>& scorer_override = {});

// the raw stage-1 matrix (rows = images, cols = texts), eval-time concepts
Mat global_similarity_matrix(VichaModel& model, HitcState& state, const Tokenizer& tok,
                             const Manifest& gallery,
                             const std::vector<VisualConceptSet>& concept_sets);

struct PatchBox {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // inclusive patch-grid coordinates
};

struct GroundingMap {
    Mat relevance;  // patch grid (side x side), non-negative
    std::vector<std::pair<int, double>> ranking;  // (proposal index, score), descending
};

// Pure aggregation: relevance per key = mean over heads and query positions of
// relu(grad * attention), projected onto the patch grid through the key kinds
// and positions (class and concept keys are dropped).
Mat grad_cam_aggregate(const std::vector<Mat>& head_attn, const std::vector<Mat>& head_grad,
                       const std::vector<TokenKind>& key_kinds,
                       const std::vector<int>& key_positions, int grid_side);

// mean relevance inside each (inclusive) box; descending, ties by input order
std::vector<std::pair<int, double>> score_proposals(const Mat& relevance,
                                                    const std::vector<PatchBox>& proposals);

// Backpropagates the matching loss for (image, query) to the target decoder
// layer and ranks the proposals by gradient-times-attention relevance.
// Resets model gradients before and after; requires exclusive model access.
GroundingMap grad_cam_grounding(VichaModel& model, const Tokenizer& tok, const Image& image,
                                const std::vector<std::string>& concepts,
                                const std::string& query,
                                const std::vector<PatchBox>& proposals,
                                int target_layer_index);

// 3-way classification head over the multimodal class token: two fully
// connected layers with a ReLU in between, then softmax.
struct EntailmentHead {
    Linear fc1;  // hidden -> hidden
    Linear fc2;  // hidden -> 3
    ParamRegistry params;

    static EntailmentHead create(int hidden_dim, uint64_t seed);
    Tensor probabilities(const Tensor& multimodal_cls) const;
};

// Two-image classifier: replicated decoder branches (branch A shares the
// model's own blocks), a concat-then-project merge for the paired yes/no
// head, and a branch-symmetric scorer for the 3-way text-assignment head.
struct PairedClassifier {
    PairedMultimodalDecoder decoder;
    Linear merge;         // 2*hidden -> hidden
    Linear paired_head;   // hidden -> 2
    Tensor assign_branch_w;   // hidden x 1, shared by both branches
    Linear assign_neither;    // hidden -> 1, on the merged representation
    ParamRegistry params;

    bool replicated() const { return !decoder.branch_b.empty(); }
};

PairedClassifier make_paired_classifier(const VichaModel& model, uint64_t seed);

// P(sentence describes both images); 1 x 2 probabilities (no, yes)
Tensor paired_image_forward(const PairedClassifier& clf, const VichaModel& model,
                            const TokenSequence& text_last, const TokenSequence& image_a_last,
                            const TokenSequence& image_b_last);

// 1 x 3 probabilities over (A, B, neither)
Tensor text_assignment_forward(const PairedClassifier& clf, const VichaModel& model,
                               const TokenSequence& text_last,
                               const TokenSequence& image_a_last,
                               const TokenSequence& image_b_last);

}  // namespace vicha
