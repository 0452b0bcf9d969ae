#pragma once

#include "vicha/checkpoint.hpp"
#include "vicha/config.hpp"
#include "vicha/data.hpp"
#include "vicha/model.hpp"
#include "vicha/objectives.hpp"

#include <memory>
#include <string>
#include <vector>

namespace vicha {

// Decoupled-weight-decay Adam with global-norm gradient clipping. Parameters
// with a single row (biases, layer norm scales, the temperature) are excluded
// from decay.
class AdamW {
public:
    AdamW(std::vector<Tensor> params, double weight_decay, double grad_clip);

    void step(double lr);
    int64_t steps_taken() const { return t_; }

    const std::vector<Tensor>& params() const { return params_; }
    std::vector<Mat>& moment1() { return m_; }
    std::vector<Mat>& moment2() { return v_; }
    const std::vector<Mat>& moment1() const { return m_; }
    const std::vector<Mat>& moment2() const { return v_; }
    void set_steps_taken(int64_t t) { t_ = t; }

    static constexpr double kBeta1 = 0.9;
    static constexpr double kBeta2 = 0.999;
    static constexpr double kEps = 1e-8;

private:
    std::vector<Tensor> params_;
    std::vector<Mat> m_, v_;
    double weight_decay_;
    double grad_clip_;
    int64_t t_ = 0;
};

// Linear warmup to the base rate, then cosine decay to zero.
double schedule_lr(const TrainingConfig& cfg, int step);

struct TrainLogEntry {
    int step = 0;
    double itm = 0, mlm = 0, hitc = 0, mim = 0, total = 0, tau = 0;

    std::string to_json() const;
};

// Pretraining driver: owns the model, the contrastive state, the optimizer
// and the data order. One step = VCA subset, full vision forward with
// concepts, text forward, H-ITC, hard-negative mining, ITM, MLM, masked
// concept-free vision forward, the selected MIM variant, combined backward,
// optimizer step, momentum update, queue push.
class Trainer {
public:
    Trainer(const RunConfig& cfg, Manifest manifest,
            std::vector<VisualConceptSet> concept_sets);

    TrainLogEntry step();
    // Runs `steps` training steps, appending to the log; checkpoints at the
    // configured interval into output_dir when it is non-empty.
    std::vector<TrainLogEntry> run(int steps, const std::string& output_dir = "");

    void save_checkpoint(const std::string& path) const;
    static std::unique_ptr<Trainer> from_checkpoint(const std::string& path);

    VichaModel& model() { return *model_; }
    HitcState& hitc_state() { return hitc_; }
    const Tokenizer& tokenizer() const { return tokenizer_; }
    const RunConfig& config() const { return cfg_; }
    const Manifest& manifest() const { return manifest_; }
    const std::vector<VisualConceptSet>& concept_sets() const { return concept_sets_; }
    int steps_done() const { return steps_done_; }

    // evaluation-time concept lookup (full set, no VCA)
    const VisualConceptSet* concepts_for(const std::string& image_id) const;

private:
    Trainer(const RunConfig& cfg, Manifest manifest,
            std::vector<VisualConceptSet> concept_sets, bool defer_init);
    void init_optimizer();
    Batch next_batch();

    RunConfig cfg_;
    Manifest manifest_;
    std::vector<VisualConceptSet> concept_sets_;
    Tokenizer tokenizer_;
    std::unique_ptr<VichaModel> model_;
    HitcState hitc_;
    std::unique_ptr<AdamW> optimizer_;
    MomentumPair model_momentum_;
    MomentumPair hitc_momentum_;

    Rng train_rng_;
    Rng data_rng_;
    std::vector<int> epoch_order_;
    size_t epoch_cursor_ = 0;
    int steps_done_ = 0;
    bool warned_degenerate_ = false;
    bool warned_itm_skip_ = false;
};

}  // namespace vicha
