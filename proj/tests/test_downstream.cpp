#include <doctest.h>

#include "gradcheck.hpp"
#include "test_helpers.hpp"
#include "vicha/downstream.hpp"
#include "vicha/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

using namespace vicha;
using namespace vicha::testutil;

namespace {

ModelConfig eval_config() {
    ModelConfig cfg = desk_model_config();
    cfg.hidden_dim = 32;
    cfg.num_heads = 4;
    cfg.vision_layers = 2;
    cfg.text_layers = 2;
    cfg.multimodal_layers = 3;
    cfg.aligned_layer_pairs = {{0, 0}, {1, 1}};
    return cfg;
}

struct EvalFixture {
    Manifest manifest;
    std::vector<VisualConceptSet> concepts;
    Tokenizer tok;
};

EvalFixture make_fixture(int n, uint64_t seed) {
    EvalFixture f;
    Rng rng(seed);
    f.manifest = generate_synthetic_dataset(n, rng);
    std::vector<std::string> captions;
    for (const auto& p : f.manifest.pairs) captions.push_back(p.caption);
    f.tok = Tokenizer::from_captions(captions);

    ConceptCorpus corpus = build_corpus(captions, default_concept_extractor(), "synthetic");
    MockProvider provider(16, seed);
    Mat emb(static_cast<Eigen::Index>(corpus.concepts.size()), 16);
    for (size_t i = 0; i < corpus.concepts.size(); ++i)
        emb.row(static_cast<Eigen::Index>(i)) = provider.embed_text(corpus.concepts[i]).transpose();
    for (const auto& p : f.manifest.pairs)
        f.concepts.push_back(
            select_top_k(provider.embed_image(p.image), corpus, emb, 8, p.image_id));
    return f;
}

}  // namespace

TEST_CASE("retrieval: gallery of one gives perfect recall everywhere") {
    ModelConfig cfg = eval_config();
    VichaModel model(cfg, false);
    HitcState state = HitcState::create(cfg, 0.07, 8);
    EvalFixture f = make_fixture(2, 70);
    Manifest one;
    one.pairs.push_back(f.manifest.pairs[0]);

    RetrievalResult r = retrieval_eval(model, state, f.tok, one, f.concepts, 4);
    for (auto [k, v] : r.text_to_image) CHECK(v == 1.0);
    for (auto [k, v] : r.image_to_text) CHECK(v == 1.0);
    CHECK(r.rsum == doctest::Approx(600.0));
}

TEST_CASE("retrieval: rerank with the stage-1 score is a no-op; its negation reverses") {
    ModelConfig cfg = eval_config();
    VichaModel model(cfg, false);
    HitcState state = HitcState::create(cfg, 0.07, 8);
    EvalFixture f = make_fixture(8, 71);

    Mat sim = global_similarity_matrix(model, state, f.tok, f.manifest, f.concepts);
    const int n = static_cast<int>(f.manifest.size());

    // loop oracle for recall under an arbitrary final ranking rule
    auto recalls = [&](bool reversed) {
        std::map<int, double> t2i, i2t;
        for (int K : {1, 5, 10}) {
            int hit_t = 0, hit_i = 0;
            for (int q = 0; q < n; ++q) {
                std::vector<int> order(static_cast<size_t>(n));
                std::iota(order.begin(), order.end(), 0);
                std::stable_sort(order.begin(), order.end(),
                                 [&](int a, int b) { return sim(a, q) > sim(b, q); });
                if (reversed) std::reverse(order.begin(), order.end());
                int kk = std::min(K, n);
                if (std::find(order.begin(), order.begin() + kk, q) != order.begin() + kk)
                    ++hit_t;

                std::iota(order.begin(), order.end(), 0);
                std::stable_sort(order.begin(), order.end(),
                                 [&](int a, int b) { return sim(q, a) > sim(q, b); });
                if (reversed) std::reverse(order.begin(), order.end());
                if (std::find(order.begin(), order.begin() + kk, q) != order.begin() + kk)
                    ++hit_i;
            }
            t2i[K] = static_cast<double>(hit_t) / n;
            i2t[K] = static_cast<double>(hit_i) / n;
        }
        return std::pair{t2i, i2t};
    };

    // stage-2 scorer equal to the stage-1 similarity leaves rankings unchanged
    RerankScorer same = [&](int text_idx, int image_idx) { return sim(image_idx, text_idx); };
    RetrievalResult r_same =
        retrieval_eval(model, state, f.tok, f.manifest, f.concepts, n, same);
    auto [t2i_plain, i2t_plain] = recalls(false);
    for (int K : {1, 5, 10}) {
        CHECK(r_same.text_to_image[K] == doctest::Approx(t2i_plain[K]));
        CHECK(r_same.image_to_text[K] == doctest::Approx(i2t_plain[K]));
    }

    // an adversarial scorer returning the negated stage-1 score reverses the
    // stage-1 ranking when m covers the whole gallery
    RerankScorer negated = [&](int text_idx, int image_idx) { return -sim(image_idx, text_idx); };
    RetrievalResult r_neg =
        retrieval_eval(model, state, f.tok, f.manifest, f.concepts, n, negated);
    auto [t2i_rev, i2t_rev] = recalls(true);
    for (int K : {1, 5, 10}) {
        CHECK(r_neg.text_to_image[K] == doctest::Approx(t2i_rev[K]));
        CHECK(r_neg.image_to_text[K] == doctest::Approx(i2t_rev[K]));
    }

    // recall is monotone in K and rsum sums the six values
    double total = 0.0;
    double prev = -1.0;
    for (int K : {1, 5, 10}) {
        CHECK(r_same.text_to_image[K] >= prev);
        prev = r_same.text_to_image[K];
        total += 100.0 * (r_same.text_to_image[K] + r_same.image_to_text[K]);
    }
    CHECK(r_same.rsum == doctest::Approx(total));

    // m beyond the gallery is clamped, not fatal
    CHECK_NOTHROW(retrieval_eval(model, state, f.tok, f.manifest, f.concepts, 50, same));
}

TEST_CASE("grad_cam_aggregate: uniform case, whole-grid proposal, loop oracle") {
    const int grid = 4;
    const int K = 1 + 16 + 2;  // cls + patches + two concepts
    std::vector<TokenKind> kinds(static_cast<size_t>(K), TokenKind::patch);
    kinds[0] = TokenKind::cls;
    kinds[17] = kinds[18] = TokenKind::concept_tag;
    std::vector<int> positions(static_cast<size_t>(K), 0);
    for (int i = 0; i < 16; ++i) positions[static_cast<size_t>(1 + i)] = i;

    // uniform attention with constant gradients: all patches equal, proposals tie
    std::vector<Mat> attn = {Mat::Constant(5, K, 1.0 / K), Mat::Constant(5, K, 1.0 / K)};
    std::vector<Mat> grad = {Mat::Constant(5, K, 0.3), Mat::Constant(5, K, 0.3)};
    Mat rel = grad_cam_aggregate(attn, grad, kinds, positions, grid);
    const double v0 = rel(0, 0);
    CHECK(v0 > 0.0);
    for (int y = 0; y < grid; ++y)
        for (int x = 0; x < grid; ++x) CHECK(rel(y, x) == doctest::Approx(v0).epsilon(1e-12));

    std::vector<PatchBox> proposals = {{0, 0, 1, 1}, {2, 2, 3, 3}, {0, 0, 3, 3}};
    auto ranking = score_proposals(rel, proposals);
    // all tie -> input order preserved
    CHECK(ranking[0].first == 0);
    CHECK(ranking[1].first == 1);
    CHECK(ranking[2].first == 2);
    // the whole-grid proposal scores exactly the grid mean
    CHECK(ranking[2].second == doctest::Approx(rel.mean()).epsilon(1e-12));

    // random tensors against an explicit-loop reimplementation
    Rng rng(72);
    std::vector<Mat> rattn = {random_matrix(rng, 5, K).cwiseAbs(),
                              random_matrix(rng, 5, K).cwiseAbs()};
    std::vector<Mat> rgrad = {random_matrix(rng, 5, K), random_matrix(rng, 5, K)};
    Mat got = grad_cam_aggregate(rattn, rgrad, kinds, positions, grid);

    Mat want = Mat::Zero(grid, grid);
    for (int k = 0; k < K; ++k) {
        if (kinds[static_cast<size_t>(k)] != TokenKind::patch) continue;
        double acc = 0.0;
        for (int h = 0; h < 2; ++h)
            for (int q = 0; q < 5; ++q) {
                double prod = rgrad[static_cast<size_t>(h)](q, k) * rattn[static_cast<size_t>(h)](q, k);
                acc += prod > 0.0 ? prod : 0.0;
            }
        int p = positions[static_cast<size_t>(k)];
        want(p / grid, p % grid) = acc / (2.0 * 5.0);
    }
    CHECK((got - want).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("grad_cam_grounding end to end on a frozen toy model") {
    ModelConfig cfg = eval_config();
    VichaModel model(cfg, false);
    EvalFixture f = make_fixture(4, 73);
    const auto& pair = f.manifest.pairs[0];

    std::vector<PatchBox> proposals = {{0, 0, 1, 1}, {2, 0, 3, 1}, {0, 2, 1, 3}, {2, 2, 3, 3}};
    GroundingMap g = grad_cam_grounding(model, f.tok, pair.image, f.concepts[0].concepts,
                                        pair.caption, proposals, 1);

    CHECK(g.relevance.rows() == 4);
    CHECK(g.relevance.minCoeff() >= 0.0);
    CHECK(g.ranking.size() == proposals.size());
    for (size_t i = 0; i + 1 < g.ranking.size(); ++i)
        CHECK(g.ranking[i].second >= g.ranking[i + 1].second);
    // proposal scores match the map they were cut from
    for (const auto& [idx, score] : g.ranking) {
        const PatchBox& b = proposals[static_cast<size_t>(idx)];
        double sum = 0.0;
        int cnt = 0;
        for (int y = b.y0; y <= b.y1; ++y)
            for (int x = b.x0; x <= b.x1; ++x) {
                sum += g.relevance(y, x);
                ++cnt;
            }
        CHECK(score == doctest::Approx(sum / cnt).epsilon(1e-12));
    }

    // deterministic given a frozen model
    GroundingMap g2 = grad_cam_grounding(model, f.tok, pair.image, f.concepts[0].concepts,
                                         pair.caption, proposals, 1);
    CHECK((g.relevance - g2.relevance).cwiseAbs().maxCoeff() == 0.0);

    // gradients are cleaned up afterwards
    for (const auto& [name, t] : model.params().items())
        CHECK(t.grad().cwiseAbs().maxCoeff() == 0.0);

    // no proposals -> map only
    GroundingMap empty = grad_cam_grounding(model, f.tok, pair.image, f.concepts[0].concepts,
                                            pair.caption, {}, 1);
    CHECK(empty.ranking.empty());

    CHECK_THROWS_AS(grad_cam_grounding(model, f.tok, pair.image, {}, pair.caption, proposals,
                                       cfg.multimodal_layers),
                    ConfigError);
}

TEST_CASE("entailment head: uniform at zero weights, simplex output, gradients") {
    EntailmentHead head = EntailmentHead::create(16, 80);
    Rng rng(74);

    // zero weights -> exactly uniform thirds
    EntailmentHead zero = EntailmentHead::create(16, 81);
    for (const auto& [name, t] : zero.params.items()) zero.params.find(name).value_mut().setZero();
    Mat p0 = zero.probabilities(Tensor::constant(random_matrix(rng, 1, 16))).value();
    for (int c = 0; c < 3; ++c) CHECK(p0(0, c) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

    for (int trial = 0; trial < 10; ++trial) {
        Mat p = head.probabilities(Tensor::constant(random_matrix(rng, 3, 16))).value();
        for (int r = 0; r < 3; ++r) {
            CHECK(p.row(r).sum() == doctest::Approx(1.0).epsilon(1e-9));
            for (int c = 0; c < 3; ++c) CHECK(p(r, c) > 0.0);
        }
    }

    // O(1) weights keep finite differences away from the ReLU kink
    for (const auto& [name, t] : head.params.items())
        if (name.ends_with(".w")) head.params.find(name).value_mut() *= 25.0;

    Tensor cls = Tensor::constant(random_matrix(rng, 4, 16));
    std::vector<int> labels = {0, 2, 1, 1};
    auto loss_fn = [&] {
        head.params.zero_grad();
        return cross_entropy_rows(log_t(head.probabilities(cls)), labels);
    };
    for (const auto& [name, t] : head.params.items()) {
        auto res = gradcheck(loss_fn, t, 1e-5);
        INFO("entailment parameter ", name, " worst ", res.worst_entry);
        CHECK(res.max_rel_error < 1e-4);
    }
}

TEST_CASE("paired classifier: probabilities, identical-image symmetry, usage error") {
    ModelConfig cfg = eval_config();
    VichaModel model(cfg, false);
    PairedClassifier clf = make_paired_classifier(model, 82);
    Rng rng(75);

    TokenSequence text{Tensor::constant(random_matrix(rng, 5, cfg.hidden_dim)),
                       std::vector<TokenKind>(5, TokenKind::text), std::vector<int>(5, 0)};
    text.kinds[0] = TokenKind::cls;
    TokenSequence img{Tensor::constant(random_matrix(rng, 17, cfg.hidden_dim)),
                      std::vector<TokenKind>(17, TokenKind::patch), std::vector<int>(17, 0)};
    img.kinds[0] = TokenKind::cls;
    TokenSequence img2{Tensor::constant(random_matrix(rng, 17, cfg.hidden_dim)),
                       std::vector<TokenKind>(17, TokenKind::patch), std::vector<int>(17, 0)};
    img2.kinds[0] = TokenKind::cls;

    Mat p2 = paired_image_forward(clf, model, text, img, img2).value();
    CHECK(p2.rows() == 1);
    CHECK(p2.cols() == 2);
    CHECK(p2.sum() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(p2(0, 0) > 0.0);
    CHECK(p2(0, 1) < 1.0);

    // identical images: swapping the branches is a no-op
    Mat pa = paired_image_forward(clf, model, text, img, img).value();
    Mat pb = paired_image_forward(clf, model, text, img, img).value();
    CHECK(pa == pb);

    // text assignment: identical images give P(A) = P(B) exactly
    Mat p3 = text_assignment_forward(clf, model, text, img, img).value();
    CHECK(p3.cols() == 3);
    CHECK(p3.sum() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(p3(0, 0) == doctest::Approx(p3(0, 1)).epsilon(1e-12));

    PairedClassifier unreplicated;
    CHECK_THROWS_AS(paired_image_forward(unreplicated, model, text, img, img2),
                    std::logic_error);
}

namespace {

struct PairedFixtureItem {
    Image image_a, image_b;
    std::vector<int> text_ids;
    int label;  // task-specific
};

// trains the full stack (model + replica + heads) with a small Adam loop
double train_paired_task(bool assignment_task, int steps, uint64_t seed) {
    ModelConfig cfg = desk_model_config();
    cfg.hidden_dim = 32;
    cfg.num_heads = 4;
    cfg.vision_layers = 2;
    cfg.text_layers = 2;
    cfg.multimodal_layers = 1;
    cfg.aligned_layer_pairs = {{1, 1}};
    cfg.seed = seed;
    VichaModel model(cfg, false);
    PairedClassifier clf = make_paired_classifier(model, seed + 1);

    Rng data_rng(seed + 2);
    Manifest shapes = generate_synthetic_dataset(16, data_rng);
    std::vector<std::string> shape_names;
    std::vector<std::string> captions;
    for (const auto& p : shapes.pairs) captions.push_back(p.caption);
    captions.push_back("circle and square and triangle and cross neither");
    Tokenizer tok = Tokenizer::from_captions(captions);

    auto shape_of = [](const std::string& id) { return id.substr(id.find('_') + 1, id.rfind('_') - id.find('_') - 1); };

    std::vector<PairedFixtureItem> items;
    Rng pick_rng(seed + 3);
    const int n_items = 12;
    for (int i = 0; i < n_items; ++i) {
        int a = static_cast<int>(pick_rng.uniform_int(16));
        int b = static_cast<int>(pick_rng.uniform_int(16));
        while (shape_of(shapes.pairs[static_cast<size_t>(b)].image_id) ==
               shape_of(shapes.pairs[static_cast<size_t>(a)].image_id))
            b = static_cast<int>(pick_rng.uniform_int(16));
        PairedFixtureItem item;
        item.image_a = shapes.pairs[static_cast<size_t>(a)].image;
        item.image_b = shapes.pairs[static_cast<size_t>(b)].image;
        std::string sa = shape_of(shapes.pairs[static_cast<size_t>(a)].image_id);
        std::string sb = shape_of(shapes.pairs[static_cast<size_t>(b)].image_id);
        if (assignment_task) {
            // caption names image A, image B, or neither
            item.label = static_cast<int>(pick_rng.uniform_int(3));
            std::string named = item.label == 0 ? sa : item.label == 1 ? sb : "";
            if (item.label == 2) {
                std::set<std::string> used = {sa, sb};
                for (const char* cand : {"circle", "square", "triangle", "cross"})
                    if (!used.count(cand)) named = cand;
            }
            item.text_ids = tok.encode(named);
        } else {
            // label 1 iff the caption names both shapes
            item.label = static_cast<int>(pick_rng.uniform_int(2));
            std::string sb_named = sb;
            if (item.label == 0) {
                std::set<std::string> used = {sa, sb};
                for (const char* cand : {"circle", "square", "triangle", "cross"})
                    if (!used.count(cand)) sb_named = cand;
            }
            item.text_ids = tok.encode(sa + " and " + sb_named);
        }
        items.push_back(std::move(item));
    }

    std::vector<Tensor> params;
    for (const auto& [name, t] : model.params().items()) params.push_back(t);
    for (const auto& [name, t] : clf.decoder.replica_params.items()) params.push_back(t);
    for (const auto& [name, t] : clf.params.items()) params.push_back(t);
    AdamW opt(params, 0.0, 1.0);

    auto forward_probs = [&](const PairedFixtureItem& item) {
        auto text_layers = model.encode_text(item.text_ids);
        auto va = model.encode_image(item.image_a);
        auto vb = model.encode_image(item.image_b);
        return assignment_task
                   ? text_assignment_forward(clf, model, text_layers.back(), va.back(), vb.back())
                   : paired_image_forward(clf, model, text_layers.back(), va.back(), vb.back());
    };

    for (int s = 0; s < steps; ++s) {
        model.params().zero_grad();
        clf.decoder.replica_params.zero_grad();
        clf.params.zero_grad();
        Tensor loss = Tensor::scalar(0.0);
        for (const auto& item : items) {
            Tensor probs = forward_probs(item);
            loss = add(loss, neg(log_t(pick(probs, {item.label}))));
        }
        loss = scale(loss, 1.0 / n_items);
        loss.backward();
        opt.step(3e-3);
    }

    int correct = 0;
    for (const auto& item : items) {
        NoGradGuard ng;
        Mat p = forward_probs(item).value();
        int argmax = 0;
        for (int c = 1; c < p.cols(); ++c)
            if (p(0, c) > p(0, argmax)) argmax = c;
        if (argmax == item.label) ++correct;
    }
    return static_cast<double>(correct) / n_items;
}

}  // namespace

TEST_CASE("paired-image task is learnable to 90% train accuracy in 200 steps") {
    CHECK(train_paired_task(false, 200, 900) >= 0.9);
}

TEST_CASE("text-assignment pretask is learnable to 90% train accuracy in 200 steps") {
    CHECK(train_paired_task(true, 200, 901) >= 0.9);
}
