#include "vicha/data.hpp"

#include "vicha/config.hpp"
#include "vicha/tokenizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <unordered_map>

namespace vicha {

using nlohmann::json;

void validate_manifest(const Manifest& m) {
    std::set<std::string> ids;
    for (const auto& p : m.pairs) {
        if (!ids.insert(p.image_id).second)
            throw ConfigError("manifest: duplicate image_id " + p.image_id);
        std::string trimmed = p.caption;
        trimmed.erase(0, trimmed.find_first_not_of(" \t\r\n"));
        if (trimmed.empty()) throw ConfigError("manifest: empty caption for " + p.image_id);
    }
}

std::vector<std::string> score_pairs(Manifest& manifest, EmbeddingProvider& provider) {
    std::vector<std::string> failures;
    for (auto& pair : manifest.pairs) {
        try {
            Vec vi = provider.embed_image(pair.image);
            Vec vt = provider.embed_text(pair.caption);
            if (std::abs(vi.norm() - 1.0) > 1e-5 || std::abs(vt.norm() - 1.0) > 1e-5)
                throw std::runtime_error("provider returned a non-unit vector");
            pair.similarity = vi.dot(vt);
        } catch (const std::exception& e) {
            pair.similarity.reset();
            failures.push_back(pair.image_id + ": " + e.what());
        }
    }
    manifest.provenance.push_back("score_pairs n=" + std::to_string(manifest.pairs.size()) +
                                  " failed=" + std::to_string(failures.size()));
    return failures;
}

Manifest filter_top_p(const Manifest& manifest, double p) {
    if (p <= 0.0 || p > 1.0) throw ConfigError("filter_top_p: p must be in (0,1]");
    for (const auto& pair : manifest.pairs)
        if (!pair.similarity)
            throw ConfigError("filter_top_p: unscored pair " + pair.image_id);

    const int n = static_cast<int>(manifest.pairs.size());
    // The keep count is a fraction of the original scored dataset, carried in
    // provenance across filter steps; re-filtering with the same p is then a
    // no-op rather than shrinking the set a second time.
    int base = n;
    for (const auto& entry : manifest.provenance) {
        size_t at = entry.find("base=");
        if (entry.rfind("filter_top_p ", 0) == 0 && at != std::string::npos)
            base = std::atoi(entry.c_str() + at + 5);
    }
    const int keep = std::min(n, static_cast<int>(std::ceil(p * base)));

    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        double sa = *manifest.pairs[static_cast<size_t>(a)].similarity;
        double sb = *manifest.pairs[static_cast<size_t>(b)].similarity;
        if (sa != sb) return sa > sb;
        return a < b;  // ties keep the earlier pair
    });

    std::vector<bool> selected(static_cast<size_t>(n), false);
    for (int i = 0; i < keep && i < n; ++i) selected[static_cast<size_t>(order[i])] = true;

    Manifest out;
    out.provenance = manifest.provenance;
    char buf[96];
    std::snprintf(buf, sizeof(buf), "filter_top_p p=%.6g base=%d kept=%d of %d", p, base, keep, n);
    out.provenance.push_back(buf);
    for (int i = 0; i < n; ++i)
        if (selected[static_cast<size_t>(i)]) out.pairs.push_back(manifest.pairs[static_cast<size_t>(i)]);
    return out;
}

std::vector<Batch> make_batches(const Manifest& manifest,
                                const std::vector<VisualConceptSet>& concept_sets,
                                int batch_size, Rng& rng) {
    if (batch_size < 1) throw ConfigError("make_batches: batch_size must be positive");
    std::unordered_map<std::string, const VisualConceptSet*> by_id;
    for (const auto& s : concept_sets) by_id[s.image_id] = &s;

    std::vector<int> order(manifest.pairs.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);

    std::vector<Batch> batches;
    for (size_t at = 0; at < order.size(); at += static_cast<size_t>(batch_size)) {
        Batch b;
        const size_t end = std::min(order.size(), at + static_cast<size_t>(batch_size));
        for (size_t i = at; i < end; ++i) {
            const auto& pair = manifest.pairs[static_cast<size_t>(order[i])];
            auto it = by_id.find(pair.image_id);
            if (it == by_id.end())
                throw ConfigError("make_batches: no concept record for image_id " +
                                  pair.image_id);
            b.indices.push_back(order[i]);
            b.pairs.push_back(&pair);
            b.concepts.push_back(it->second);
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

// --- synthetic shapes ------------------------------------------------------------

namespace {

struct ShapeSpec {
    const char* color_name;
    double rgb[3];
};

const ShapeSpec kColors[] = {{"red", {0.9, 0.1, 0.1}},
                             {"green", {0.1, 0.8, 0.15}},
                             {"blue", {0.15, 0.2, 0.9}},
                             {"yellow", {0.9, 0.85, 0.1}}};
const char* kShapes[] = {"circle", "square", "triangle", "cross"};
const char* kPositions[] = {"left", "right", "top", "bottom"};

void draw_shape(Image& img, int shape, int color, int position) {
    const double* rgb = kColors[color].rgb;
    // shape center per position on a 32x32 canvas
    int cx = 16, cy = 16;
    switch (position) {
        case 0: cx = 8; break;   // left
        case 1: cx = 24; break;  // right
        case 2: cy = 8; break;   // top
        case 3: cy = 24; break;  // bottom
    }
    const int r = 6;
    auto inside = [&](int x, int y) {
        int dx = x - cx, dy = y - cy;
        switch (shape) {
            case 0: return dx * dx + dy * dy <= r * r;                    // circle
            case 1: return std::abs(dx) <= r - 1 && std::abs(dy) <= r - 1;  // square
            case 2: return dy >= -r + 2 && dy <= r - 2 &&                 // triangle
                           std::abs(dx) <= (dy + r - 2) / 2;
            case 3: return (std::abs(dx) <= 1 && std::abs(dy) <= r) ||    // cross
                           (std::abs(dy) <= 1 && std::abs(dx) <= r);
        }
        return false;
    };
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            bool in = inside(x, y);
            for (int ch = 0; ch < 3; ++ch)
                img.at(ch, y, x) = in ? rgb[ch] : 0.05;
        }
}

}  // namespace

Manifest generate_synthetic_dataset(int n, Rng& rng) {
    if (n < 2) throw ConfigError("generate_synthetic_dataset: need at least 2 pairs");
    const int total = 4 * 4 * 4;
    if (n > total)
        throw ConfigError("generate_synthetic_dataset: only " + std::to_string(total) +
                          " distinct combinations exist");

    std::vector<int> combos(total);
    std::iota(combos.begin(), combos.end(), 0);
    rng.shuffle(combos);
    combos.resize(static_cast<size_t>(n));

    Manifest m;
    m.provenance.push_back("generate_synthetic_dataset n=" + std::to_string(n));
    for (int combo : combos) {
        int color = combo % 4;
        int shape = (combo / 4) % 4;
        int position = combo / 16;

        ImageTextPair pair;
        pair.image = Image(3, 32, 32);
        draw_shape(pair.image, shape, color, position);
        pair.caption = std::string("a ") + kColors[color].color_name + " " + kShapes[shape] +
                       " on the " + kPositions[position];
        pair.image_id = std::string(kColors[color].color_name) + "_" + kShapes[shape] + "_" +
                        kPositions[position];
        pair.source = "synthetic";
        m.pairs.push_back(std::move(pair));
    }
    return m;
}

ShapesOracleProvider::ShapesOracleProvider(int dim, uint64_t seed)
    : dim_(dim), seed_(seed) {}

Vec ShapesOracleProvider::word_vector(const std::string& word) const {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : word) {
        h ^= c;
        h *= 1099511628211ull;
    }
    Rng rng(h ^ seed_);
    Vec v(dim_);
    for (int i = 0; i < dim_; ++i) v(i) = rng.normal();
    return v / v.norm();
}

Vec ShapesOracleProvider::embed_text(const std::string& text) {
    Vec sum = Vec::Zero(dim_);
    for (const auto& w : Tokenizer::split_lower(text)) sum += word_vector(w);
    double n = sum.norm();
    if (n == 0.0) {
        sum(0) = 1.0;
        n = 1.0;
    }
    return sum / n;
}

Vec ShapesOracleProvider::embed_image(const Image& image) {
    // recover the attributes by exact re-rendering of the 64 combinations
    for (int color = 0; color < 4; ++color)
        for (int shape = 0; shape < 4; ++shape)
            for (int position = 0; position < 4; ++position) {
                Image candidate(3, 32, 32);
                draw_shape(candidate, shape, color, position);
                if (candidate == image) {
                    Vec sum = word_vector(kColors[color].color_name) +
                              word_vector(kShapes[shape]) + word_vector(kPositions[position]);
                    return sum / sum.norm();
                }
            }
    throw std::runtime_error("ShapesOracleProvider: image is not from the synthetic domain");
}

// --- IO ---------------------------------------------------------------------------

namespace {

json image_to_json(const Image& img) {
    return json{{"c", img.c}, {"h", img.h}, {"w", img.w}, {"data", img.data}};
}

Image image_from_json(const json& j) {
    Image img(j.at("c").get<int>(), j.at("h").get<int>(), j.at("w").get<int>());
    img.data = j.at("data").get<std::vector<double>>();
    if (img.data.size() != static_cast<size_t>(img.c) * img.h * img.w)
        throw ConfigError("image payload size mismatch");
    return img;
}

}  // namespace

void write_manifest(const std::string& path, const Manifest& manifest,
                    const std::string& tool_tag) {
    std::ofstream out(path);
    if (!out) throw ConfigError("write_manifest: cannot open " + path);
    json header{{"_header", {{"tool", tool_tag}, {"provenance", manifest.provenance}}}};
    out << header.dump() << "\n";
    for (const auto& p : manifest.pairs) {
        json j{{"image_id", p.image_id},
               {"image", image_to_json(p.image)},
               {"caption", p.caption},
               {"source", p.source},
               {"similarity", p.similarity ? json(*p.similarity) : json(nullptr)}};
        out << j.dump() << "\n";
    }
}

Manifest read_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("read_manifest: cannot open " + path);
    Manifest m;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        if (j.contains("_header")) {
            const auto& h = j.at("_header");
            if (h.contains("provenance"))
                m.provenance = h.at("provenance").get<std::vector<std::string>>();
            continue;
        }
        ImageTextPair p;
        p.image_id = j.at("image_id").get<std::string>();
        const auto& img = j.at("image");
        p.image = img.is_string() ? read_image_json(img.get<std::string>())
                                  : image_from_json(img);
        p.caption = j.at("caption").get<std::string>();
        p.source = j.value("source", std::string{});
        if (j.contains("similarity") && !j.at("similarity").is_null())
            p.similarity = j.at("similarity").get<double>();
        m.pairs.push_back(std::move(p));
    }
    validate_manifest(m);
    return m;
}

void write_image_json(const std::string& path, const Image& image) {
    std::ofstream out(path);
    if (!out) throw ConfigError("write_image_json: cannot open " + path);
    out << image_to_json(image).dump() << "\n";
}

Image read_image_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("read_image_json: cannot open " + path);
    json j;
    in >> j;
    return image_from_json(j);
}

}  // namespace vicha
