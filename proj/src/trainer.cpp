#include "vicha/trainer.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>

namespace vicha {

using nlohmann::json;

AdamW::AdamW(std::vector<Tensor> params, double weight_decay, double grad_clip)
    : params_(std::move(params)), weight_decay_(weight_decay), grad_clip_(grad_clip) {
    for (const auto& p : params_) {
        m_.push_back(Mat::Zero(p.rows(), p.cols()));
        v_.push_back(Mat::Zero(p.rows(), p.cols()));
    }
}

void AdamW::step(double lr) {
    ++t_;
    // global-norm clipping across every parameter gradient
    double sq = 0.0;
    for (const auto& p : params_) sq += p.grad().squaredNorm();
    const double norm = std::sqrt(sq);
    const double clip_scale = (grad_clip_ > 0.0 && norm > grad_clip_) ? grad_clip_ / norm : 1.0;

    const double bc1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        Mat g = p.grad() * clip_scale;
        m_[i] = kBeta1 * m_[i] + (1.0 - kBeta1) * g;
        v_[i] = kBeta2 * v_[i] + (1.0 - kBeta2) * g.cwiseProduct(g);
        Mat mhat = m_[i] / bc1;
        Mat vhat = v_[i] / bc2;
        Mat update = mhat.array() / (vhat.array().sqrt() + kEps);
        if (weight_decay_ > 0.0 && p.rows() > 1) update += weight_decay_ * p.value();
        p.value_mut() -= lr * update;
    }
}

double schedule_lr(const TrainingConfig& cfg, int step) {
    const double base = cfg.learning_rate;
    if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
        return base * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
    if (cfg.schedule == "constant") return base;
    const int total = std::max(cfg.steps, cfg.warmup_steps + 1);
    const double progress = static_cast<double>(step - cfg.warmup_steps) /
                            static_cast<double>(std::max(1, total - cfg.warmup_steps));
    return base * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
}

std::string TrainLogEntry::to_json() const {
    json j{{"step", step}, {"itm", itm},     {"mlm", mlm}, {"hitc", hitc},
           {"mim", mim},   {"total", total}, {"tau", tau}};
    return j.dump();
}

Trainer::Trainer(const RunConfig& cfg, Manifest manifest,
                 std::vector<VisualConceptSet> concept_sets)
    : Trainer(cfg, std::move(manifest), std::move(concept_sets), false) {}

Trainer::Trainer(const RunConfig& cfg, Manifest manifest,
                 std::vector<VisualConceptSet> concept_sets, bool defer_init)
    : cfg_(cfg),
      manifest_(std::move(manifest)),
      concept_sets_(std::move(concept_sets)),
      train_rng_(cfg.seed ^ 0xd1b54a32d192ed03ull),
      data_rng_(cfg.seed ^ 0x8f14e45fceea167aull) {
    validate_manifest(manifest_);

    std::vector<std::string> captions;
    for (const auto& p : manifest_.pairs) captions.push_back(p.caption);
    tokenizer_ = Tokenizer::from_captions(captions);
    cfg_.model.vocab_size = tokenizer_.vocab_size();
    cfg_.model.seed = cfg_.seed;
    cfg_.validate();

    model_ = std::make_unique<VichaModel>(cfg_.model, /*with_momentum=*/true);
    hitc_ = HitcState::create(cfg_.model, cfg_.training.tau_init, cfg_.training.queue_size);
    model_momentum_ = model_->momentum_pair(cfg_.training.momentum);
    hitc_momentum_ = hitc_.momentum_pair(cfg_.training.momentum);
    if (!defer_init) init_optimizer();
}

void Trainer::init_optimizer() {
    std::vector<Tensor> params;
    for (const auto& [name, t] : model_->params().items()) params.push_back(t);
    for (const auto& [name, t] : hitc_.params.items()) params.push_back(t);
    optimizer_ = std::make_unique<AdamW>(std::move(params), cfg_.training.weight_decay,
                                         cfg_.training.grad_clip);
}

const VisualConceptSet* Trainer::concepts_for(const std::string& image_id) const {
    for (const auto& s : concept_sets_)
        if (s.image_id == image_id) return &s;
    return nullptr;
}

Batch Trainer::next_batch() {
    if (epoch_cursor_ >= epoch_order_.size()) {
        epoch_order_.resize(manifest_.pairs.size());
        std::iota(epoch_order_.begin(), epoch_order_.end(), 0);
        data_rng_.shuffle(epoch_order_);
        epoch_cursor_ = 0;
    }
    std::unordered_map<std::string, const VisualConceptSet*> by_id;
    for (const auto& s : concept_sets_) by_id[s.image_id] = &s;

    Batch batch;
    const size_t end = std::min(epoch_order_.size(),
                                epoch_cursor_ + static_cast<size_t>(cfg_.training.batch_size));
    for (; epoch_cursor_ < end; ++epoch_cursor_) {
        int idx = epoch_order_[epoch_cursor_];
        const auto& pair = manifest_.pairs[static_cast<size_t>(idx)];
        auto it = by_id.find(pair.image_id);
        if (it == by_id.end())
            throw ConfigError("trainer: no concept record for image_id " + pair.image_id);
        batch.indices.push_back(idx);
        batch.pairs.push_back(&pair);
        batch.concepts.push_back(it->second);
    }
    return batch;
}

TrainLogEntry Trainer::step() {
    const auto& tcfg = cfg_.training;
    const auto& mcfg = cfg_.model;
    Batch batch = next_batch();
    const int B = static_cast<int>(batch.pairs.size());
    if (B == 0) throw TrainingStepError("trainer: empty batch");

    model_->params().zero_grad();
    hitc_.params.zero_grad();

    // VCA: per-step random concept subsets
    std::vector<std::vector<std::string>> vca_concepts(static_cast<size_t>(B));
    if (tcfg.use_concepts) {
        for (int i = 0; i < B; ++i) {
            VisualConceptSet sub = vca_sample(*batch.concepts[static_cast<size_t>(i)],
                                              tcfg.p_vc, train_rng_);
            vca_concepts[static_cast<size_t>(i)] = sub.concepts;
        }
    }

    // online forwards
    std::vector<std::vector<TokenSequence>> vision_layers(static_cast<size_t>(B));
    std::vector<std::vector<TokenSequence>> text_layers(static_cast<size_t>(B));
    std::vector<std::vector<int>> ids(static_cast<size_t>(B));
    for (int i = 0; i < B; ++i) {
        const auto& pair = *batch.pairs[static_cast<size_t>(i)];
        std::optional<TokenSequence> concepts;
        if (!vca_concepts[static_cast<size_t>(i)].empty())
            concepts = model_->encode_concepts(vca_concepts[static_cast<size_t>(i)], tokenizer_);
        vision_layers[static_cast<size_t>(i)] = model_->encode_image(pair.image, concepts);
        ids[static_cast<size_t>(i)] = tokenizer_.encode(pair.caption);
        if (static_cast<int>(ids[static_cast<size_t>(i)].size()) > mcfg.max_text_len)
            ids[static_cast<size_t>(i)].resize(static_cast<size_t>(mcfg.max_text_len));
        text_layers[static_cast<size_t>(i)] = model_->encode_text(ids[static_cast<size_t>(i)]);
    }

    HitcInputs hin;
    for (auto [vl, tl] : mcfg.aligned_layer_pairs) {
        std::vector<Tensor> vrows, trows;
        for (int i = 0; i < B; ++i) {
            vrows.push_back(vision_layers[static_cast<size_t>(i)][static_cast<size_t>(vl)].cls());
            trows.push_back(text_layers[static_cast<size_t>(i)][static_cast<size_t>(tl)].cls());
        }
        hin.vision_cls.push_back(concat_rows(vrows));
        hin.text_cls.push_back(concat_rows(trows));
    }

    // momentum forwards for the final aligned pair
    {
        Mat vm(B, mcfg.hidden_dim), tm(B, mcfg.hidden_dim);
        for (int i = 0; i < B; ++i) {
            const auto& pair = *batch.pairs[static_cast<size_t>(i)];
            std::optional<TokenSequence> concepts;
            if (!vca_concepts[static_cast<size_t>(i)].empty())
                concepts = model_->encode_concepts_momentum(vca_concepts[static_cast<size_t>(i)],
                                                            tokenizer_);
            auto v = model_->encode_image_momentum(pair.image, concepts);
            auto t = model_->encode_text_momentum(ids[static_cast<size_t>(i)]);
            vm.row(i) = v.back().cls().value().row(0);
            tm.row(i) = t.back().cls().value().row(0);
        }
        hin.vision_cls_momentum = Tensor::constant(std::move(vm));
        hin.text_cls_momentum = Tensor::constant(std::move(tm));
    }

    HitcResult hres = hitc_loss(hin, hitc_, /*enqueue=*/true);
    if (hres.degenerate && !warned_degenerate_) {
        std::cerr << "[trainer] warning: batch of 1 with empty queues; contrastive loss is "
                     "degenerate this step\n";
        warned_degenerate_ = true;
    }

    // ITM with mined hard negatives over the dual-encoder global similarity
    Tensor itm = Tensor::scalar(0.0);
    if (B >= 2) {
        Mat sim;
        {
            NoGradGuard ng;
            Tensor zv = normalize_rows(hitc_.g_v.back().forward(hin.vision_cls.back()));
            Tensor zt = normalize_rows(hitc_.g_t.back().forward(hin.text_cls.back()));
            sim = zv.value() * zt.value().transpose();
        }
        HardNegatives neg = mine_hard_negatives(sim, train_rng_);

        std::vector<Tensor> cls_rows;
        std::vector<int> labels;
        auto decode_cls = [&](int text_idx, int image_idx) {
            auto out = model_->multimodal_decode(
                text_layers[static_cast<size_t>(text_idx)].back(),
                vision_layers[static_cast<size_t>(image_idx)].back());
            return out.last().cls();
        };
        for (int i = 0; i < B; ++i) {
            cls_rows.push_back(decode_cls(i, i));
            labels.push_back(1);
        }
        for (int i = 0; i < B; ++i) {
            cls_rows.push_back(decode_cls(neg.text_for_image[static_cast<size_t>(i)], i));
            labels.push_back(0);
        }
        for (int j = 0; j < B; ++j) {
            cls_rows.push_back(decode_cls(j, neg.image_for_text[static_cast<size_t>(j)]));
            labels.push_back(0);
        }
        itm = itm_loss(concat_rows(cls_rows), labels, model_->itm_head());
    } else if (!warned_itm_skip_) {
        std::cerr << "[trainer] warning: batch of 1, skipping the matching loss (no negatives "
                     "to mine)\n";
        warned_itm_skip_ = true;
    }

    // MLM pooled over every masked position in the batch
    Tensor mlm_sum = Tensor::scalar(0.0);
    int total_masked = 0;
    for (int i = 0; i < B; ++i) {
        MlmCorruption corr = plan_mlm_mask(
            ids[static_cast<size_t>(i)], tokenizer_, tcfg.mlm_ratio,
            {tcfg.mlm_mask_prob, tcfg.mlm_random_prob, tcfg.mlm_keep_prob}, train_rng_,
            tokenizer_.vocab_size());
        if (corr.plan.empty()) continue;
        auto corrupted_layers = model_->encode_text(corr.corrupted_ids);
        auto mm = model_->multimodal_decode(corrupted_layers.back(),
                                            vision_layers[static_cast<size_t>(i)].back());
        const int n_i = static_cast<int>(corr.plan.positions.size());
        Tensor item =
            mlm_loss(mm.last(), corr.plan, ids[static_cast<size_t>(i)], model_->mlm_head());
        mlm_sum = add(mlm_sum, scale(item, static_cast<double>(n_i)));
        total_masked += n_i;
    }
    Tensor mlm = total_masked > 0 ? scale(mlm_sum, 1.0 / total_masked) : Tensor::scalar(0.0);

    // masked concept-free vision forward + the selected MIM variant
    Tensor mim_sum = Tensor::scalar(0.0);
    for (int i = 0; i < B; ++i) {
        const auto& pair = *batch.pairs[static_cast<size_t>(i)];
        ImageMaskPlan plan = plan_image_mask(mcfg.patch_count(), tcfg.mim_ratio, train_rng_);
        if (plan.masked.empty()) continue;
        auto masked_layers =
            model_->encode_image(pair.image, {}, plan.visible_mask(mcfg.patch_count()));
        Tensor item =
            tcfg.mim_variant == "M"
                ? m_mim_loss(masked_layers, plan, text_layers[static_cast<size_t>(i)].back(),
                             *model_, pair.image)
                : u_mim_loss(masked_layers, plan, model_->mim_decoder(), pair.image, mcfg);
        mim_sum = add(mim_sum, item);
    }
    Tensor mim = scale(mim_sum, 1.0 / B);

    LossBundle bundle =
        combine_losses(itm, mlm, hres.loss, mim, tcfg.lambda_hitc, tcfg.lambda_mim);
    bundle.total.backward();
    optimizer_->step(schedule_lr(tcfg, steps_done_));
    momentum_update(model_momentum_);
    momentum_update(hitc_momentum_);

    TrainLogEntry entry;
    entry.step = steps_done_;
    entry.itm = bundle.itm_value();
    entry.mlm = bundle.mlm_value();
    entry.hitc = bundle.hitc_value();
    entry.mim = bundle.mim_value();
    entry.total = bundle.total_value();
    entry.tau = hitc_.tau_value();
    ++steps_done_;
    return entry;
}

std::vector<TrainLogEntry> Trainer::run(int steps, const std::string& output_dir) {
    namespace fs = std::filesystem;
    std::ofstream log_file;
    if (!output_dir.empty()) {
        fs::create_directories(output_dir);
        log_file.open(fs::path(output_dir) / "train_log.jsonl", std::ios::app);
    }
    std::vector<TrainLogEntry> log;
    for (int s = 0; s < steps; ++s) {
        TrainLogEntry entry = step();
        log.push_back(entry);
        if (log_file) log_file << entry.to_json() << "\n";
        if (!output_dir.empty() && cfg_.training.checkpoint_interval > 0 &&
            (steps_done_ % cfg_.training.checkpoint_interval == 0 || s + 1 == steps)) {
            save_checkpoint((fs::path(output_dir) / "checkpoint.vicha").string());
        }
    }
    return log;
}

void Trainer::save_checkpoint(const std::string& path) const {
    ArrayArchive archive;
    for (const auto& [name, t] : model_->params().items())
        archive.arrays.emplace_back("param." + name, t.value());
    for (const auto& [name, t] : hitc_.params.items())
        archive.arrays.emplace_back("param." + name, t.value());
    for (const auto& [name, t] : model_->momentum_params().items())
        archive.arrays.emplace_back("momentum." + name, t.value());
    for (const auto& [name, t] : hitc_.momentum_params.items())
        archive.arrays.emplace_back("momentum." + name, t.value());

    const auto& opt_params = optimizer_->params();
    const auto& m1 = optimizer_->moment1();
    const auto& m2 = optimizer_->moment2();
    for (size_t i = 0; i < opt_params.size(); ++i) {
        archive.arrays.emplace_back("opt.m." + std::to_string(i), m1[i]);
        archive.arrays.emplace_back("opt.v." + std::to_string(i), m2[i]);
    }

    const Eigen::Index e = cfg_.model.embed_dim;
    archive.arrays.emplace_back("queue.image", hitc_.image_queue.as_matrix(e));
    archive.arrays.emplace_back("queue.text", hitc_.text_queue.as_matrix(e));

    json meta{{"run_config", json::parse(run_config_to_json(cfg_))},
              {"step", steps_done_},
              {"opt_steps", optimizer_->steps_taken()},
              {"train_rng", train_rng_.save_state()},
              {"data_rng", data_rng_.save_state()},
              {"vocab", tokenizer_.words()},
              {"epoch_order", epoch_order_},
              {"epoch_cursor", epoch_cursor_}};
    archive.meta_json = meta.dump();
    write_array_archive(path, archive);
}

std::unique_ptr<Trainer> Trainer::from_checkpoint(const std::string& path) {
    ArrayArchive archive = read_array_archive(path);
    json meta = json::parse(archive.meta_json);
    RunConfig cfg = run_config_from_json(meta.at("run_config").dump());

    Manifest manifest = read_manifest(cfg.paths.manifest);
    std::vector<VisualConceptSet> concept_sets = read_concept_sets(cfg.paths.concepts);

    auto trainer = std::unique_ptr<Trainer>(
        new Trainer(cfg, std::move(manifest), std::move(concept_sets), true));

    // the tokenizer must reproduce the training id space exactly
    trainer->tokenizer_ = Tokenizer::from_vocab(meta.at("vocab").get<std::vector<std::string>>());
    if (trainer->tokenizer_.vocab_size() != trainer->cfg_.model.vocab_size)
        throw ConfigError("from_checkpoint: stored vocabulary does not match the config");

    auto restore = [&](ParamRegistry& reg, const std::string& prefix) {
        for (const auto& [name, t] : reg.items()) {
            const Mat& stored = archive.find(prefix + name);
            Tensor dst = reg.find(name);
            if (stored.rows() != dst.rows() || stored.cols() != dst.cols())
                throw ConfigError("from_checkpoint: shape mismatch for " + prefix + name);
            dst.value_mut() = stored;
        }
    };
    restore(trainer->model_->params(), "param.");
    restore(trainer->hitc_.params, "param.");
    restore(trainer->model_->momentum_params(), "momentum.");
    restore(trainer->hitc_.momentum_params, "momentum.");

    trainer->init_optimizer();
    auto& m1 = trainer->optimizer_->moment1();
    auto& m2 = trainer->optimizer_->moment2();
    for (size_t i = 0; i < m1.size(); ++i) {
        m1[i] = archive.find("opt.m." + std::to_string(i));
        m2[i] = archive.find("opt.v." + std::to_string(i));
    }
    trainer->optimizer_->set_steps_taken(meta.at("opt_steps").get<int64_t>());

    auto load_queue = [&](FeatureQueue& q, const std::string& name) {
        const Mat& m = archive.find(name);
        std::deque<Vec> entries;
        for (Eigen::Index r = 0; r < m.rows(); ++r) entries.push_back(m.row(r).transpose());
        q.assign(std::move(entries));
    };
    load_queue(trainer->hitc_.image_queue, "queue.image");
    load_queue(trainer->hitc_.text_queue, "queue.text");

    trainer->train_rng_.load_state(meta.at("train_rng").get<std::string>());
    trainer->data_rng_.load_state(meta.at("data_rng").get<std::string>());
    trainer->epoch_order_ = meta.at("epoch_order").get<std::vector<int>>();
    trainer->epoch_cursor_ = meta.at("epoch_cursor").get<size_t>();
    trainer->steps_done_ = meta.at("step").get<int>();
    return trainer;
}

}  // namespace vicha
