#include "vicha/downstream.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <iostream>
#include <numeric>

namespace vicha {

using nlohmann::json;

std::string RetrievalResult::to_json() const {
    json t2i, i2t;
    for (auto [k, v] : text_to_image) t2i["R@" + std::to_string(k)] = v;
    for (auto [k, v] : image_to_text) i2t["R@" + std::to_string(k)] = v;
    return json{{"text_to_image", t2i}, {"image_to_text", i2t}, {"rsum", rsum}}.dump();
}

namespace {

struct EncodedGallery {
    std::vector<TokenSequence> vision_last;  // per pair, with full concepts
    std::vector<TokenSequence> text_last;
    Mat image_features;  // projected + normalized, rows = images
    Mat text_features;
};

EncodedGallery encode_gallery(VichaModel& model, HitcState& state, const Tokenizer& tok,
                              const Manifest& gallery,
                              const std::vector<VisualConceptSet>& concept_sets) {
    NoGradGuard ng;
    EncodedGallery out;
    const int n = static_cast<int>(gallery.pairs.size());
    const auto& cfg = model.config();
    out.image_features = Mat(n, cfg.embed_dim);
    out.text_features = Mat(n, cfg.embed_dim);

    auto concepts_of = [&](const std::string& id) -> const VisualConceptSet* {
        for (const auto& s : concept_sets)
            if (s.image_id == id) return &s;
        return nullptr;
    };

    const size_t last_pair = state.num_pairs() - 1;
    for (int i = 0; i < n; ++i) {
        const auto& pair = gallery.pairs[static_cast<size_t>(i)];
        std::optional<TokenSequence> concept_tokens;
        if (const VisualConceptSet* cs = concepts_of(pair.image_id); cs && cs->size() > 0) {
            std::vector<std::string> names = cs->concepts;  // full set: no VCA at eval
            if (static_cast<int>(names.size()) > cfg.max_concepts)
                names.resize(static_cast<size_t>(cfg.max_concepts));
            concept_tokens = model.encode_concepts(names, tok);
        }
        auto vision_layers = model.encode_image(pair.image, concept_tokens);
        std::vector<int> ids = tok.encode(pair.caption);
        if (static_cast<int>(ids.size()) > cfg.max_text_len)
            ids.resize(static_cast<size_t>(cfg.max_text_len));
        auto text_layers = model.encode_text(ids);

        Tensor zv = normalize_rows(state.g_v[last_pair].forward(vision_layers.back().cls()));
        Tensor zt = normalize_rows(state.g_t[last_pair].forward(text_layers.back().cls()));
        out.image_features.row(i) = zv.value().row(0);
        out.text_features.row(i) = zt.value().row(0);
        out.vision_last.push_back(vision_layers.back());
        out.text_last.push_back(text_layers.back());
    }
    return out;
}

double itm_positive_probability(VichaModel& model, const TokenSequence& text,
                                const TokenSequence& vision) {
    NoGradGuard ng;
    auto out = model.multimodal_decode(text, vision);
    Tensor logits = model.itm_head().forward(out.last().cls());
    Tensor p = softmax_rows(logits);
    return p.value()(0, 1);
}

// final ranking: reranked top-m block, then the stage-1 tail
std::vector<int> rerank(const std::vector<int>& stage1, int m,
                        const std::function<double(int)>& score) {
    std::vector<int> top(stage1.begin(), stage1.begin() + m);
    std::vector<double> scores;
    scores.reserve(top.size());
    for (int cand : top) scores.push_back(score(cand));
    std::vector<int> order(top.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)]; });
    std::vector<int> final_ranking;
    for (int o : order) final_ranking.push_back(top[static_cast<size_t>(o)]);
    final_ranking.insert(final_ranking.end(), stage1.begin() + m, stage1.end());
    return final_ranking;
}

}  // namespace

Mat global_similarity_matrix(VichaModel& model, HitcState& state, const Tokenizer& tok,
                             const Manifest& gallery,
                             const std::vector<VisualConceptSet>& concept_sets) {
    EncodedGallery g = encode_gallery(model, state, tok, gallery, concept_sets);
    return g.image_features * g.text_features.transpose();
}

RetrievalResult retrieval_eval(VichaModel& model, HitcState& state, const Tokenizer& tok,
                               const Manifest& gallery,
                               const std::vector<VisualConceptSet>& concept_sets, int m,
                               const std::optional<RerankScorer>& scorer_override) {
    const int n = static_cast<int>(gallery.pairs.size());
    if (n == 0) throw ConfigError("retrieval_eval: empty gallery");
    if (m > n) {
        std::cerr << "[retrieval] warning: rerank depth " << m << " clamped to gallery size "
                  << n << "\n";
        m = n;
    }
    m = std::max(1, m);

    EncodedGallery g = encode_gallery(model, state, tok, gallery, concept_sets);
    Mat sim = g.image_features * g.text_features.transpose();  // rows images, cols texts

    RerankScorer scorer;
    if (scorer_override) {
        scorer = *scorer_override;
    } else {
        scorer = [&](int text_idx, int image_idx) {
            return itm_positive_probability(model, g.text_last[static_cast<size_t>(text_idx)],
                                            g.vision_last[static_cast<size_t>(image_idx)]);
        };
    }

    const std::vector<int> ks = {1, 5, 10};
    RetrievalResult result;
    std::vector<int> hits_t2i(ks.size(), 0), hits_i2t(ks.size(), 0);

    for (int q = 0; q < n; ++q) {
        // text -> image: rank images by column q
        std::vector<int> order(static_cast<size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return sim(a, q) > sim(b, q); });
        std::vector<int> final_t2i =
            rerank(order, m, [&](int image_idx) { return scorer(q, image_idx); });
        for (size_t ki = 0; ki < ks.size(); ++ki) {
            int K = std::min(ks[ki], n);
            if (std::find(final_t2i.begin(), final_t2i.begin() + K, q) != final_t2i.begin() + K)
                ++hits_t2i[ki];
        }

        // image -> text: rank texts by row q
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return sim(q, a) > sim(q, b); });
        std::vector<int> final_i2t =
            rerank(order, m, [&](int text_idx) { return scorer(text_idx, q); });
        for (size_t ki = 0; ki < ks.size(); ++ki) {
            int K = std::min(ks[ki], n);
            if (std::find(final_i2t.begin(), final_i2t.begin() + K, q) != final_i2t.begin() + K)
                ++hits_i2t[ki];
        }
    }

    for (size_t ki = 0; ki < ks.size(); ++ki) {
        result.text_to_image[ks[ki]] = static_cast<double>(hits_t2i[ki]) / n;
        result.image_to_text[ks[ki]] = static_cast<double>(hits_i2t[ki]) / n;
    }
    result.rsum = 0.0;
    for (auto [k, v] : result.text_to_image) result.rsum += 100.0 * v;
    for (auto [k, v] : result.image_to_text) result.rsum += 100.0 * v;
    return result;
}

// --- grounding ---------------------------------------------------------------------

Mat grad_cam_aggregate(const std::vector<Mat>& head_attn, const std::vector<Mat>& head_grad,
                       const std::vector<TokenKind>& key_kinds,
                       const std::vector<int>& key_positions, int grid_side) {
    if (head_attn.empty() || head_attn.size() != head_grad.size())
        throw ConfigError("grad_cam_aggregate: attention/gradient head count mismatch");
    const Eigen::Index Q = head_attn[0].rows();
    const Eigen::Index K = head_attn[0].cols();
    if (static_cast<size_t>(K) != key_kinds.size() || key_kinds.size() != key_positions.size())
        throw ConfigError("grad_cam_aggregate: key metadata does not match attention width");

    // mean over heads and query positions of relu(grad * attention)
    Vec key_relevance = Vec::Zero(K);
    for (size_t h = 0; h < head_attn.size(); ++h) {
        if (head_attn[h].rows() != Q || head_attn[h].cols() != K ||
            head_grad[h].rows() != Q || head_grad[h].cols() != K)
            throw ConfigError("grad_cam_aggregate: inconsistent head shapes");
        for (Eigen::Index q = 0; q < Q; ++q)
            for (Eigen::Index k = 0; k < K; ++k)
                key_relevance(k) += std::max(0.0, head_grad[h](q, k) * head_attn[h](q, k));
    }
    key_relevance /= static_cast<double>(head_attn.size()) * static_cast<double>(Q);

    Mat grid = Mat::Zero(grid_side, grid_side);
    for (Eigen::Index k = 0; k < K; ++k) {
        if (key_kinds[static_cast<size_t>(k)] != TokenKind::patch) continue;
        int p = key_positions[static_cast<size_t>(k)];
        grid(p / grid_side, p % grid_side) = key_relevance(k);
    }
    return grid;
}

std::vector<std::pair<int, double>> score_proposals(const Mat& relevance,
                                                    const std::vector<PatchBox>& proposals) {
    std::vector<std::pair<int, double>> scored;
    for (size_t i = 0; i < proposals.size(); ++i) {
        const PatchBox& b = proposals[i];
        if (b.x0 < 0 || b.y0 < 0 || b.x1 >= relevance.cols() || b.y1 >= relevance.rows() ||
            b.x1 < b.x0 || b.y1 < b.y0)
            throw ConfigError("score_proposals: box outside the patch grid");
        double sum = 0.0;
        int count = 0;
        for (int y = b.y0; y <= b.y1; ++y)
            for (int x = b.x0; x <= b.x1; ++x) {
                sum += relevance(y, x);
                ++count;
            }
        scored.emplace_back(static_cast<int>(i), sum / count);
    }
    std::stable_sort(scored.begin(), scored.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    return scored;
}

GroundingMap grad_cam_grounding(VichaModel& model, const Tokenizer& tok, const Image& image,
                                const std::vector<std::string>& concepts,
                                const std::string& query,
                                const std::vector<PatchBox>& proposals,
                                int target_layer_index) {
    const auto& cfg = model.config();
    if (target_layer_index < 0 || target_layer_index >= cfg.multimodal_layers)
        throw ConfigError("grad_cam_grounding: target layer outside the decoder");

    model.params().zero_grad();

    std::optional<TokenSequence> concept_tokens;
    if (!concepts.empty()) {
        std::vector<std::string> names = concepts;
        if (static_cast<int>(names.size()) > cfg.max_concepts)
            names.resize(static_cast<size_t>(cfg.max_concepts));
        concept_tokens = model.encode_concepts(names, tok);
    }
    auto vision_layers = model.encode_image(image, concept_tokens);
    std::vector<int> ids = tok.encode(query);
    if (static_cast<int>(ids.size()) > cfg.max_text_len)
        ids.resize(static_cast<size_t>(cfg.max_text_len));
    auto text_layers = model.encode_text(ids);

    MultimodalOptions opts;
    opts.capture_attention = true;
    MultimodalOutput out = model.multimodal_decode(text_layers.back(), vision_layers.back(), opts);

    // matching loss for the positive pair, backpropagated to the attention maps
    Tensor loss = itm_loss(out.last().cls(), {1}, model.itm_head());
    loss.backward();

    const auto& heads = out.cross_attn[static_cast<size_t>(target_layer_index)];
    std::vector<Mat> attn, grad;
    for (const auto& h : heads) {
        attn.push_back(h.value());
        grad.push_back(h.grad());
    }
    const TokenSequence& keys = vision_layers.back();

    GroundingMap result;
    result.relevance = grad_cam_aggregate(attn, grad, keys.kinds, keys.positions,
                                          cfg.patches_per_side());
    result.ranking = score_proposals(result.relevance, proposals);
    model.params().zero_grad();
    return result;
}

// --- heads ----------------------------------------------------------------------

EntailmentHead EntailmentHead::create(int hidden_dim, uint64_t seed) {
    EntailmentHead head;
    Rng rng(seed);
    head.fc1 = Linear(head.params, "entailment.fc1", hidden_dim, hidden_dim, rng);
    head.fc2 = Linear(head.params, "entailment.fc2", hidden_dim, 3, rng);
    return head;
}

Tensor EntailmentHead::probabilities(const Tensor& multimodal_cls) const {
    return softmax_rows(fc2.forward(relu(fc1.forward(multimodal_cls))));
}

PairedClassifier make_paired_classifier(const VichaModel& model, uint64_t seed) {
    PairedClassifier clf;
    clf.decoder = replicate_multimodal_for_pair(model);
    Rng rng(seed);
    const int hidden = model.config().hidden_dim;
    clf.merge = Linear(clf.params, "paired.merge", 2 * hidden, hidden, rng);
    clf.paired_head = Linear(clf.params, "paired.head", hidden, 2, rng);
    clf.assign_branch_w = clf.params.create("paired.assign_branch_w", hidden, 1,
                                            Init::truncated_normal, rng);
    clf.assign_neither = Linear(clf.params, "paired.assign_neither", hidden, 1, rng);
    return clf;
}

namespace {

struct PairedBranches {
    Tensor cls_a;    // 1 x hidden
    Tensor cls_b;
    Tensor merged;   // 1 x hidden
};

PairedBranches run_branches(const PairedClassifier& clf, const TokenSequence& text_last,
                            const TokenSequence& image_a_last,
                            const TokenSequence& image_b_last) {
    if (!clf.replicated())
        throw std::logic_error("paired classifier: decoder has not been replicated");
    auto [out_a, out_b] = clf.decoder.forward(text_last, image_a_last, image_b_last);
    PairedBranches pb;
    pb.cls_a = out_a.cls();
    pb.cls_b = out_b.cls();
    pb.merged = clf.merge.forward(concat_cols({pb.cls_a, pb.cls_b}));
    return pb;
}

}  // namespace

Tensor paired_image_forward(const PairedClassifier& clf, const VichaModel&,
                            const TokenSequence& text_last, const TokenSequence& image_a_last,
                            const TokenSequence& image_b_last) {
    PairedBranches pb = run_branches(clf, text_last, image_a_last, image_b_last);
    return softmax_rows(clf.paired_head.forward(pb.merged));
}

Tensor text_assignment_forward(const PairedClassifier& clf, const VichaModel&,
                               const TokenSequence& text_last,
                               const TokenSequence& image_a_last,
                               const TokenSequence& image_b_last) {
    PairedBranches pb = run_branches(clf, text_last, image_a_last, image_b_last);
    // branch logits share one scorer, so swapping identical branches is a no-op
    Tensor logit_a = matmul(pb.cls_a, clf.assign_branch_w);
    Tensor logit_b = matmul(pb.cls_b, clf.assign_branch_w);
    Tensor logit_neither = clf.assign_neither.forward(pb.merged);
    return softmax_rows(concat_cols({logit_a, logit_b, logit_neither}));
}

}  // namespace vicha
