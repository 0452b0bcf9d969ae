#pragma once

#include "vicha/config.hpp"
#include "vicha/image.hpp"
#include "vicha/rng.hpp"
#include "vicha/visual_concepts.hpp"

#include <optional>
#include <string>
#include <vector>

namespace vicha {

struct ImageTextPair {
    std::string image_id;
    Image image;
    std::string caption;
    std::string source;
    std::optional<double> similarity;
};

struct Manifest {
    std::vector<ImageTextPair> pairs;
    std::vector<std::string> provenance;  // one entry per pipeline step, oldest first

    size_t size() const { return pairs.size(); }
};

void validate_manifest(const Manifest& m);  // unique ids, non-empty captions

// Fills pair.similarity with dot(embed_image, embed_text) on unit vectors.
// Per-item provider failures flag the pair (similarity left empty) and are
// reported in the returned list; the run continues.
std::vector<std::string> score_pairs(Manifest& manifest, EmbeddingProvider& provider);

// Keeps the ceil(p*N) highest-similarity pairs; ties break toward the lower
// original index; survivor order matches the input order. Every pair must be
// scored. Provenance gains a "filter_top_p p=<p>" entry.
Manifest filter_top_p(const Manifest& manifest, double p);

struct Batch {
    std::vector<int> indices;  // into Manifest.pairs; positive of item i is i
    std::vector<const ImageTextPair*> pairs;
    std::vector<const VisualConceptSet*> concepts;  // aligned with pairs
};

// Seeded shuffle of the whole manifest cut into batches; the short final
// batch is kept. Every image_id must have a concept record.
std::vector<Batch> make_batches(const Manifest& manifest,
                                const std::vector<VisualConceptSet>& concept_sets,
                                int batch_size, Rng& rng);

// Synthetic shapes-and-captions fixture: a colored shape at a grid position,
// captioned "a <color> <shape> on the <position>". Combination choice and
// rendering are deterministic per seed; captions are unique per combination.
Manifest generate_synthetic_dataset(int n, Rng& rng);

// Desk-scale stand-in for the out-of-scope pretrained CLIP, valid on the
// synthetic shapes domain only: a text embedding is the normalized sum of
// per-word seeded unit vectors, and an image embedding is the normalized sum
// of its true attribute words' vectors (recovered by exact re-rendering).
// Texts and images about the same attributes therefore score high cosine.
class ShapesOracleProvider : public EmbeddingProvider {
public:
    explicit ShapesOracleProvider(int dim = 16, uint64_t seed = 0);
    Vec embed_text(const std::string& text) override;
    Vec embed_image(const Image& image) override;  // throws off-domain
    int dim() const override { return dim_; }

private:
    Vec word_vector(const std::string& word) const;
    int dim_;
    uint64_t seed_;
};

// manifest JSON-lines IO; image payloads are written inline
void write_manifest(const std::string& path, const Manifest& manifest,
                    const std::string& tool_tag = "");
Manifest read_manifest(const std::string& path);

void write_image_json(const std::string& path, const Image& image);
Image read_image_json(const std::string& path);

}  // namespace vicha
