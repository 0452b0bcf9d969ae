#include "vicha/config.hpp"

#include "vicha/tokenizer.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>

namespace vicha {

using nlohmann::json;

void ModelConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
        throw ConfigError("ModelConfig: image_size must be a positive multiple of patch_size");
    if (hidden_dim <= 0 || num_heads <= 0 || hidden_dim % num_heads != 0)
        throw ConfigError("ModelConfig: hidden_dim must be divisible by num_heads");
    if (embed_dim <= 0) throw ConfigError("ModelConfig: embed_dim must be positive");
    if (vision_layers <= 0 || text_layers <= 0 || multimodal_layers <= 0 ||
        vc_encoder_layers <= 0 || mim_decoder_layers <= 0)
        throw ConfigError("ModelConfig: layer counts must be positive");
    if (aligned_layer_pairs.empty())
        throw ConfigError("ModelConfig: aligned_layer_pairs must be non-empty");
    for (auto [v, t] : aligned_layer_pairs) {
        if (v < 0 || v >= vision_layers || t < 0 || t >= text_layers)
            throw ConfigError("ModelConfig: aligned pair indexes an invalid layer");
    }
    bool has_final = false;
    for (auto [v, t] : aligned_layer_pairs)
        has_final = has_final || (v == vision_layers - 1 && t == text_layers - 1);
    if (!has_final)
        throw ConfigError("ModelConfig: aligned pairs must include the final layers of both encoders");
    if (vocab_size < Tokenizer::kNumSpecials)
        throw ConfigError("ModelConfig: vocab_size smaller than the special-token set");
    if (max_text_len <= 0 || max_concepts <= 0)
        throw ConfigError("ModelConfig: max_text_len and max_concepts must be positive");
}

ModelConfig desk_model_config() { return ModelConfig{}; }

ModelConfig full_model_config() {
    ModelConfig cfg;
    cfg.image_size = 256;
    cfg.patch_size = 16;
    cfg.channels = 3;
    cfg.hidden_dim = 768;
    cfg.embed_dim = 256;
    cfg.vision_layers = 12;
    cfg.text_layers = 6;
    cfg.multimodal_layers = 6;
    cfg.vc_encoder_layers = 2;
    cfg.mim_decoder_layers = 2;
    cfg.mim_decoder_heads = 16;
    cfg.num_heads = 12;
    cfg.vocab_size = 1024;  // id space is corpus-defined; towers are what this preset pins
    cfg.max_text_len = 64;
    cfg.max_concepts = 15;
    cfg.aligned_layer_pairs.clear();
    // align the last 6 vision layers with all 6 text layers
    for (int j = 0; j < 6; ++j) cfg.aligned_layer_pairs.push_back({6 + j, j});
    return cfg;
}

TrainingConfig desk_training_config() { return TrainingConfig{}; }

TrainingConfig full_training_config() {
    TrainingConfig t;
    t.batch_size = 256;
    t.learning_rate = 1e-5;
    t.warmup_steps = 2000;
    t.queue_size = 65536;
    t.momentum = 0.995;
    t.tau_init = 0.07;
    return t;
}

RunConfig desk_run_config() {
    RunConfig rc;
    rc.model = desk_model_config();
    rc.training = desk_training_config();
    return rc;
}

namespace {

json model_to_json(const ModelConfig& m) {
    json pairs = json::array();
    for (auto [v, t] : m.aligned_layer_pairs) pairs.push_back(json::array({v, t}));
    return json{{"image_size", m.image_size},
                {"patch_size", m.patch_size},
                {"channels", m.channels},
                {"hidden_dim", m.hidden_dim},
                {"embed_dim", m.embed_dim},
                {"vision_layers", m.vision_layers},
                {"text_layers", m.text_layers},
                {"multimodal_layers", m.multimodal_layers},
                {"vc_encoder_layers", m.vc_encoder_layers},
                {"mim_decoder_layers", m.mim_decoder_layers},
                {"mim_decoder_heads", m.mim_decoder_heads},
                {"num_heads", m.num_heads},
                {"vocab_size", m.vocab_size},
                {"max_text_len", m.max_text_len},
                {"max_concepts", m.max_concepts},
                {"aligned_layer_pairs", pairs},
                {"seed", m.seed}};
}

json training_to_json(const TrainingConfig& t) {
    return json{{"steps", t.steps},
                {"batch_size", t.batch_size},
                {"learning_rate", t.learning_rate},
                {"warmup_steps", t.warmup_steps},
                {"schedule", t.schedule},
                {"weight_decay", t.weight_decay},
                {"grad_clip", t.grad_clip},
                {"lambda_hitc", t.lambda_hitc},
                {"lambda_mim", t.lambda_mim},
                {"mlm_ratio", t.mlm_ratio},
                {"mlm_mask_prob", t.mlm_mask_prob},
                {"mlm_random_prob", t.mlm_random_prob},
                {"mlm_keep_prob", t.mlm_keep_prob},
                {"mim_ratio", t.mim_ratio},
                {"mim_variant", t.mim_variant},
                {"p_vc", t.p_vc},
                {"k", t.k},
                {"queue_size", t.queue_size},
                {"momentum", t.momentum},
                {"tau_init", t.tau_init},
                {"use_concepts", t.use_concepts},
                {"checkpoint_interval", t.checkpoint_interval}};
}

template <typename T>
void take(const json& j, const std::string& key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

void model_from_json(const json& j, ModelConfig& m) {
    take(j, "image_size", m.image_size);
    take(j, "patch_size", m.patch_size);
    take(j, "channels", m.channels);
    take(j, "hidden_dim", m.hidden_dim);
    take(j, "embed_dim", m.embed_dim);
    take(j, "vision_layers", m.vision_layers);
    take(j, "text_layers", m.text_layers);
    take(j, "multimodal_layers", m.multimodal_layers);
    take(j, "vc_encoder_layers", m.vc_encoder_layers);
    take(j, "mim_decoder_layers", m.mim_decoder_layers);
    take(j, "mim_decoder_heads", m.mim_decoder_heads);
    take(j, "num_heads", m.num_heads);
    take(j, "vocab_size", m.vocab_size);
    take(j, "max_text_len", m.max_text_len);
    take(j, "max_concepts", m.max_concepts);
    take(j, "seed", m.seed);
    if (j.contains("aligned_layer_pairs")) {
        m.aligned_layer_pairs.clear();
        for (const auto& p : j.at("aligned_layer_pairs"))
            m.aligned_layer_pairs.push_back({p.at(0).get<int>(), p.at(1).get<int>()});
    }
}

void training_from_json(const json& j, TrainingConfig& t) {
    take(j, "steps", t.steps);
    take(j, "batch_size", t.batch_size);
    take(j, "learning_rate", t.learning_rate);
    take(j, "warmup_steps", t.warmup_steps);
    take(j, "schedule", t.schedule);
    take(j, "weight_decay", t.weight_decay);
    take(j, "grad_clip", t.grad_clip);
    take(j, "lambda_hitc", t.lambda_hitc);
    take(j, "lambda_mim", t.lambda_mim);
    take(j, "mlm_ratio", t.mlm_ratio);
    take(j, "mlm_mask_prob", t.mlm_mask_prob);
    take(j, "mlm_random_prob", t.mlm_random_prob);
    take(j, "mlm_keep_prob", t.mlm_keep_prob);
    take(j, "mim_ratio", t.mim_ratio);
    take(j, "mim_variant", t.mim_variant);
    take(j, "p_vc", t.p_vc);
    take(j, "k", t.k);
    take(j, "queue_size", t.queue_size);
    take(j, "momentum", t.momentum);
    take(j, "tau_init", t.tau_init);
    take(j, "use_concepts", t.use_concepts);
    take(j, "checkpoint_interval", t.checkpoint_interval);
}

RunConfig run_from_json_obj(const json& j) {
    RunConfig rc = desk_run_config();
    if (j.contains("preset")) {
        std::string p = j.at("preset").get<std::string>();
        if (p == "full") {
            rc.model = full_model_config();
            rc.training = full_training_config();
        } else if (p != "desk") {
            throw ConfigError("run config: unknown preset '" + p + "'");
        }
    }
    if (j.contains("model")) model_from_json(j.at("model"), rc.model);
    if (j.contains("training")) training_from_json(j.at("training"), rc.training);
    if (j.contains("paths")) {
        const auto& p = j.at("paths");
        take(p, "manifest", rc.paths.manifest);
        take(p, "concepts", rc.paths.concepts);
        take(p, "output_dir", rc.paths.output_dir);
    }
    take(j, "seed", rc.seed);
    rc.model.seed = rc.seed;
    rc.validate();
    return rc;
}

// --- minimal TOML subset ------------------------------------------------------
// Supports: [section] headers, key = value lines, # comments, strings,
// integers, floats, booleans, and (nested) arrays of numbers. Enough for run
// configs; not a general TOML implementation.

struct TomlCursor {
    const std::string& s;
    size_t i = 0;
    void skip_ws() {
        while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    }
};

json parse_toml_value(TomlCursor& c);

json parse_toml_array(TomlCursor& c) {
    json arr = json::array();
    ++c.i;  // '['
    for (;;) {
        c.skip_ws();
        if (c.i >= c.s.size()) throw ConfigError("toml: unterminated array");
        if (c.s[c.i] == ']') {
            ++c.i;
            return arr;
        }
        arr.push_back(parse_toml_value(c));
        c.skip_ws();
        if (c.i < c.s.size() && c.s[c.i] == ',') ++c.i;
    }
}

json parse_toml_value(TomlCursor& c) {
    c.skip_ws();
    if (c.i >= c.s.size()) throw ConfigError("toml: missing value");
    char ch = c.s[c.i];
    if (ch == '[') return parse_toml_array(c);
    if (ch == '"') {
        std::string out;
        ++c.i;
        while (c.i < c.s.size() && c.s[c.i] != '"') out.push_back(c.s[c.i++]);
        if (c.i >= c.s.size()) throw ConfigError("toml: unterminated string");
        ++c.i;
        return json(out);
    }
    size_t start = c.i;
    while (c.i < c.s.size() && c.s[c.i] != ',' && c.s[c.i] != ']' && c.s[c.i] != '#') ++c.i;
    std::string tok = c.s.substr(start, c.i - start);
    while (!tok.empty() && (tok.back() == ' ' || tok.back() == '\t')) tok.pop_back();
    if (tok == "true") return json(true);
    if (tok == "false") return json(false);
    if (tok.find_first_of(".eE") != std::string::npos &&
        tok.find_first_not_of("+-0123456789.eE") == std::string::npos)
        return json(std::stod(tok));
    try {
        size_t used = 0;
        long long v = std::stoll(tok, &used);
        if (used == tok.size()) return json(v);
    } catch (...) {
    }
    throw ConfigError("toml: cannot parse value '" + tok + "'");
}

json parse_toml_subset(const std::string& text) {
    json root = json::object();
    json* section = &root;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        size_t first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos) continue;
        if (line[first] == '#') continue;
        if (line[first] == '[') {
            size_t close = line.find(']', first);
            if (close == std::string::npos)
                throw ConfigError("toml line " + std::to_string(lineno) + ": bad section header");
            std::string name = line.substr(first + 1, close - first - 1);
            root[name] = json::object();
            section = &root[name];
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("toml line " + std::to_string(lineno) + ": expected key = value");
        std::string key = line.substr(first, eq - first);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        std::string rest = line.substr(eq + 1);
        TomlCursor c{rest, 0};
        (*section)[key] = parse_toml_value(c);
    }
    return root;
}

}  // namespace

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("run config: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    std::string text = buf.str();
    json j;
    if (path.size() >= 5 && path.substr(path.size() - 5) == ".json") {
        j = json::parse(text);
    } else {
        j = parse_toml_subset(text);
    }
    return run_from_json_obj(j);
}

std::string run_config_to_json(const RunConfig& cfg) {
    json j{{"model", model_to_json(cfg.model)},
           {"training", training_to_json(cfg.training)},
           {"paths",
            json{{"manifest", cfg.paths.manifest},
                 {"concepts", cfg.paths.concepts},
                 {"output_dir", cfg.paths.output_dir}}},
           {"seed", cfg.seed}};
    return j.dump();
}

RunConfig run_config_from_json(const std::string& json_text) {
    return run_from_json_obj(json::parse(json_text));
}

}  // namespace vicha
