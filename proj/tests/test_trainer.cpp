#include <doctest.h>

#include "test_helpers.hpp"
#include "vicha/downstream.hpp"
#include "vicha/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <filesystem>

using namespace vicha;
using namespace vicha::testutil;

namespace {

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

// small training setup over the synthetic fixture, files included so that
// checkpoints can be resumed
struct TrainFixture {
    RunConfig cfg;
    Manifest manifest;
    std::vector<VisualConceptSet> concepts;
    std::string manifest_path, concepts_path;

    ~TrainFixture() {
        std::remove(manifest_path.c_str());
        std::remove(concepts_path.c_str());
    }
};

TrainFixture make_train_fixture(const std::string& tag, int n_pairs, uint64_t seed) {
    TrainFixture f;
    f.cfg = desk_run_config();
    f.cfg.seed = seed;
    f.cfg.model.hidden_dim = 32;
    f.cfg.model.num_heads = 4;
    f.cfg.model.vision_layers = 2;
    f.cfg.model.text_layers = 2;
    f.cfg.model.multimodal_layers = 2;
    f.cfg.model.aligned_layer_pairs = {{0, 0}, {1, 1}};
    f.cfg.training.batch_size = 4;
    f.cfg.training.queue_size = 16;
    f.cfg.training.warmup_steps = 5;
    f.cfg.training.steps = 20;
    f.cfg.training.k = 6;

    Rng rng(seed);
    f.manifest = generate_synthetic_dataset(n_pairs, rng);

    std::vector<std::string> captions;
    for (const auto& p : f.manifest.pairs) captions.push_back(p.caption);
    ConceptCorpus corpus = build_corpus(captions, default_concept_extractor(), "synthetic");
    MockProvider provider(16, seed);
    Mat emb(static_cast<Eigen::Index>(corpus.concepts.size()), 16);
    for (size_t i = 0; i < corpus.concepts.size(); ++i)
        emb.row(static_cast<Eigen::Index>(i)) = provider.embed_text(corpus.concepts[i]).transpose();
    for (const auto& p : f.manifest.pairs)
        f.concepts.push_back(select_top_k(provider.embed_image(p.image), corpus, emb,
                                          f.cfg.training.k, p.image_id));

    f.manifest_path = temp_path("vicha_train_" + tag + "_manifest.jsonl");
    f.concepts_path = temp_path("vicha_train_" + tag + "_concepts.jsonl");
    write_manifest(f.manifest_path, f.manifest, "test");
    write_concept_sets(f.concepts_path, f.concepts);
    f.cfg.paths.manifest = f.manifest_path;
    f.cfg.paths.concepts = f.concepts_path;
    return f;
}

}  // namespace

TEST_CASE("schedule: linear warmup then cosine decay to zero") {
    TrainingConfig cfg;
    cfg.learning_rate = 1e-3;
    cfg.warmup_steps = 10;
    cfg.steps = 110;

    CHECK(schedule_lr(cfg, 0) == doctest::Approx(1e-4));
    CHECK(schedule_lr(cfg, 4) == doctest::Approx(5e-4));
    CHECK(schedule_lr(cfg, 9) == doctest::Approx(1e-3));
    double prev = schedule_lr(cfg, 10);
    for (int s = 11; s < 110; ++s) {
        double cur = schedule_lr(cfg, s);
        CHECK(cur <= prev + 1e-15);
        prev = cur;
    }
    CHECK(schedule_lr(cfg, 109) < 2e-6 + 1e-3 * 0.001);

    cfg.schedule = "constant";
    CHECK(schedule_lr(cfg, 50) == doctest::Approx(1e-3));
}

TEST_CASE("adamw drives a quadratic to its minimum; decay skips single-row params") {
    Tensor w = Tensor::param(Mat::Constant(2, 2, 4.0));
    Tensor b = Tensor::param(Mat::Constant(1, 2, 3.0));
    AdamW opt({w, b}, 0.01, 0.0);

    for (int s = 0; s < 400; ++s) {
        w.zero_grad();
        b.zero_grad();
        Tensor loss = add(mean_all(square(w)), mean_all(square(b)));
        loss.backward();
        opt.step(0.05);
    }
    CHECK(w.value().cwiseAbs().maxCoeff() < 1e-2);
    CHECK(b.value().cwiseAbs().maxCoeff() < 1e-2);

    // with zero gradient, decay still shrinks matrices but not single-row params
    Tensor w2 = Tensor::param(Mat::Constant(2, 2, 1.0));
    Tensor b2 = Tensor::param(Mat::Constant(1, 2, 1.0));
    AdamW opt2({w2, b2}, 0.5, 0.0);
    w2.zero_grad();
    b2.zero_grad();
    w2.grad();  // allocate
    b2.grad();
    opt2.step(0.1);
    CHECK(w2.value()(0, 0) < 1.0);
    CHECK(b2.value()(0, 0) == 1.0);
}

TEST_CASE("trainer runs, logs finite losses, and updates the temperature") {
    TrainFixture f = make_train_fixture("smoke", 8, 1000);
    Trainer trainer(f.cfg, f.manifest, f.concepts);

    double tau_before = trainer.hitc_state().tau_value();
    auto log = trainer.run(3);
    REQUIRE(log.size() == 3);
    for (const auto& e : log) {
        CHECK(std::isfinite(e.total));
        CHECK(e.itm >= 0.0);
        CHECK(e.mlm >= 0.0);
        CHECK(e.hitc >= 0.0);
        CHECK(e.mim >= 0.0);
        CHECK(e.total == doctest::Approx(e.itm + e.mlm + 0.1 * e.hitc + 1.0 * e.mim));
        CHECK(e.tau > 0.0);
    }
    CHECK(trainer.hitc_state().tau_value() != tau_before);
    // queues received one batch of momentum features per step
    CHECK(trainer.hitc_state().image_queue.size() == 3 * 4);

    // training log serializes to one json object per step
    CHECK(log[0].to_json().find("\"step\":0") != std::string::npos);
}

TEST_CASE("trainer determinism: identical seeds give bitwise-identical losses") {
    TrainFixture f = make_train_fixture("det", 8, 1001);
    Trainer a(f.cfg, f.manifest, f.concepts);
    Trainer b(f.cfg, f.manifest, f.concepts);
    for (int s = 0; s < 2; ++s) {
        TrainLogEntry ea = a.step();
        TrainLogEntry eb = b.step();
        CHECK(ea.total == eb.total);  // bitwise
        CHECK(ea.hitc == eb.hitc);
        CHECK(ea.mim == eb.mim);
    }
}

TEST_CASE("zero-step run: checkpoint equals initialization, log empty") {
    TrainFixture f = make_train_fixture("zero", 8, 1002);
    Trainer trainer(f.cfg, f.manifest, f.concepts);

    auto log = trainer.run(0);
    CHECK(log.empty());

    std::string ckpt = temp_path("vicha_zero.ckpt");
    trainer.save_checkpoint(ckpt);
    auto restored = Trainer::from_checkpoint(ckpt);
    CHECK(restored->steps_done() == 0);

    for (const auto& [name, t] : trainer.model().params().items()) {
        const Mat& a = t.value();
        const Mat& b = restored->model().params().find(name).value();
        CHECK(a == b);  // bitwise
    }
    std::remove(ckpt.c_str());
}

TEST_CASE("checkpoint resume reproduces training bitwise") {
    TrainFixture f = make_train_fixture("resume", 8, 1003);

    // straight run: 4 steps
    Trainer straight(f.cfg, f.manifest, f.concepts);
    straight.run(4);

    // split run: 2 steps, checkpoint, resume, 2 more
    Trainer part1(f.cfg, f.manifest, f.concepts);
    part1.run(2);
    std::string ckpt = temp_path("vicha_resume.ckpt");
    part1.save_checkpoint(ckpt);

    auto part2 = Trainer::from_checkpoint(ckpt);
    CHECK(part2->steps_done() == 2);
    TrainLogEntry e3 = part2->step();
    TrainLogEntry e4 = part2->step();

    // the resumed losses equal a second straight run's steps 3 and 4
    Trainer reference(f.cfg, f.manifest, f.concepts);
    reference.run(2);
    TrainLogEntry r3 = reference.step();
    TrainLogEntry r4 = reference.step();
    CHECK(e3.total == r3.total);
    CHECK(e4.total == r4.total);

    // parameters after 2+2 equal parameters after 4 straight steps, bitwise
    for (const auto& [name, t] : straight.model().params().items())
        CHECK(t.value() == part2->model().params().find(name).value());
    for (const auto& [name, t] : straight.hitc_state().params.items())
        CHECK(t.value() == part2->hitc_state().params.find(name).value());
    // including the queues
    CHECK(straight.hitc_state().image_queue.size() ==
          part2->hitc_state().image_queue.size());
    Mat q1 = straight.hitc_state().image_queue.as_matrix(f.cfg.model.embed_dim);
    Mat q2 = part2->hitc_state().image_queue.as_matrix(f.cfg.model.embed_dim);
    CHECK(q1 == q2);

    std::remove(ckpt.c_str());
}

TEST_CASE("non-finite loss aborts the step naming the component") {
    TrainFixture f = make_train_fixture("nan", 8, 1004);
    Trainer trainer(f.cfg, f.manifest, f.concepts);
    trainer.run(1);
    // poison one parameter: the forward now produces a non-finite loss
    trainer.model().params().find("vision.cls_token").value_mut()(0, 0) =
        std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(trainer.step(), TrainingStepError);
}

TEST_CASE("config files reproduce run configs (toml subset and json)") {
    std::string toml = temp_path("vicha_cfg.toml");
    {
        std::ofstream out(toml);
        out << "# run config\n"
               "seed = 7\n"
               "[model]\n"
               "hidden_dim = 48\n"
               "num_heads = 4\n"
               "vision_layers = 3\n"
               "text_layers = 2\n"
               "aligned_layer_pairs = [[1, 0], [2, 1]]\n"
               "[training]\n"
               "steps = 42\n"
               "learning_rate = 5e-4\n"
               "mim_variant = \"M\"\n"
               "use_concepts = false\n"
               "[paths]\n"
               "manifest = \"m.jsonl\"\n";
    }
    RunConfig cfg = load_run_config(toml);
    CHECK(cfg.seed == 7);
    CHECK(cfg.model.hidden_dim == 48);
    CHECK(cfg.model.vision_layers == 3);
    CHECK(cfg.model.aligned_layer_pairs ==
          std::vector<std::pair<int, int>>{{1, 0}, {2, 1}});
    CHECK(cfg.training.steps == 42);
    CHECK(cfg.training.learning_rate == doctest::Approx(5e-4));
    CHECK(cfg.training.mim_variant == "M");
    CHECK_FALSE(cfg.training.use_concepts);
    CHECK(cfg.paths.manifest == "m.jsonl");
    std::remove(toml.c_str());

    // json round-trip through the serializer
    RunConfig back = run_config_from_json(run_config_to_json(cfg));
    CHECK(back.model.hidden_dim == cfg.model.hidden_dim);
    CHECK(back.training.steps == cfg.training.steps);
    CHECK(back.training.mim_variant == cfg.training.mim_variant);
    CHECK(back.seed == cfg.seed);

    // full preset by name
    std::string json_path = temp_path("vicha_cfg.json");
    {
        std::ofstream out(json_path);
        out << R"({"preset": "full"})";
    }
    RunConfig full = load_run_config(json_path);
    CHECK(full.model.hidden_dim == 768);
    CHECK(full.model.vision_layers == 12);
    CHECK(full.training.queue_size == 65536);
    std::remove(json_path.c_str());
}

TEST_CASE("trainer with the M-MIM variant and without concepts also runs") {
    TrainFixture f = make_train_fixture("mmim", 6, 1005);
    f.cfg.training.mim_variant = "M";
    f.cfg.training.use_concepts = false;
    Trainer trainer(f.cfg, f.manifest, f.concepts);
    auto log = trainer.run(2);
    for (const auto& e : log) CHECK(std::isfinite(e.total));
}
