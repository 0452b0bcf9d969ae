#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace vicha {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Architecture hyperparameters. aligned_layer_pairs entries are 0-based
// (vision_layer, text_layer) block indices; the list must end with the final
// layers of both encoders.
struct ModelConfig {
    int image_size = 32;
    int patch_size = 8;
    int channels = 3;
    int hidden_dim = 64;
    int embed_dim = 32;
    int vision_layers = 4;
    int text_layers = 3;
    int multimodal_layers = 3;
    int vc_encoder_layers = 1;
    int mim_decoder_layers = 2;
    int mim_decoder_heads = 4;
    int num_heads = 4;
    int vocab_size = 64;
    int max_text_len = 16;
    int max_concepts = 15;  // k
    std::vector<std::pair<int, int>> aligned_layer_pairs = {{1, 0}, {2, 1}, {3, 2}};
    uint64_t seed = 42;

    int patches_per_side() const { return image_size / patch_size; }
    int patch_count() const { return patches_per_side() * patches_per_side(); }
    int patch_dim() const { return channels * patch_size * patch_size; }

    void validate() const;
};

// Desk-scale defaults: the whole loss stack runs in seconds on a CPU.
ModelConfig desk_model_config();
// Full-scale architecture (ViT-B/16-sized towers). Kept for shape checks;
// training it is out of scope here.
ModelConfig full_model_config();

struct TrainingConfig {
    int steps = 300;
    int batch_size = 8;
    double learning_rate = 1e-3;
    int warmup_steps = 50;
    std::string schedule = "cosine";
    double weight_decay = 0.02;
    double grad_clip = 1.0;
    double lambda_hitc = 0.1;
    double lambda_mim = 1.0;
    double mlm_ratio = 0.15;
    double mlm_mask_prob = 0.8;
    double mlm_random_prob = 0.1;
    double mlm_keep_prob = 0.1;
    double mim_ratio = 0.75;
    std::string mim_variant = "U";  // "U" or "M"
    double p_vc = 0.30;
    int k = 15;
    int queue_size = 256;
    double momentum = 0.995;
    double tau_init = 0.07;
    bool use_concepts = true;
    int checkpoint_interval = 100;
};

TrainingConfig desk_training_config();
TrainingConfig full_training_config();

struct PathsConfig {
    std::string manifest;
    std::string concepts;
    std::string output_dir = "out";
};

struct RunConfig {
    ModelConfig model;
    TrainingConfig training;
    PathsConfig paths;
    uint64_t seed = 42;

    void validate() const { model.validate(); }
};

RunConfig desk_run_config();

// Loads a run config from a file. ".json" is parsed as JSON; anything else is
// parsed as the flat TOML subset documented in the README ([section] headers,
// key = value with strings, numbers, booleans and arrays of integer pairs).
// Unknown keys are an error. Fields absent from the file keep desk defaults,
// unless the file sets preset = "full".
RunConfig load_run_config(const std::string& path);

std::string run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const std::string& json_text);

}  // namespace vicha
