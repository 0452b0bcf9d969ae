#pragma once

#include "vicha/config.hpp"
#include "vicha/image.hpp"
#include "vicha/rng.hpp"
#include "vicha/tensor.hpp"

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace vicha {

struct ConceptCorpus {
    std::vector<std::string> concepts;  // lowercase, sorted, unique
    std::vector<int64_t> counts;        // aligned with concepts, every count >= 2
    std::string source;
};

// caption -> candidate concept phrases (the scene-graph-parser stand-in)
using ConceptExtractor = std::function<std::vector<std::string>(const std::string&)>;

// Lowercases, strips punctuation, drops stop words, and emits the remaining
// content words plus bigrams of originally-adjacent content words.
ConceptExtractor default_concept_extractor();

// Aggregates extractor output over all captions and keeps phrases whose total
// occurrence count is at least 2. Output order is lexicographic, so the corpus
// is independent of caption order.
ConceptCorpus build_corpus(const std::vector<std::string>& captions,
                           const ConceptExtractor& extractor,
                           const std::string& source = "");

class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual Vec embed_text(const std::string& text) = 0;
    virtual Vec embed_image(const Image& image) = 0;
    virtual int dim() const = 0;
};

// Seeded hash-to-unit-vector provider: pure, deterministic, unit-norm.
class MockProvider : public EmbeddingProvider {
public:
    explicit MockProvider(int dim = 16, uint64_t seed = 0) : dim_(dim), seed_(seed) {}
    Vec embed_text(const std::string& text) override;
    Vec embed_image(const Image& image) override;
    int dim() const override { return dim_; }

private:
    Vec from_hash(uint64_t h);
    int dim_;
    uint64_t seed_;
};

// Thin client for an external embedding service (POST /embed).
class RemoteProvider : public EmbeddingProvider {
public:
    RemoteProvider(const std::string& host, int port, int dim);
    ~RemoteProvider() override;
    Vec embed_text(const std::string& text) override;
    Vec embed_image(const Image& image) override;
    int dim() const override { return dim_; }

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    int dim_;
};

// Serves lookups from a previously written concept cache; embed_image keys on
// the image content hash, so it only answers for images cached beforehand.
class CacheProvider : public EmbeddingProvider {
public:
    explicit CacheProvider(const std::string& cache_path);
    Vec embed_text(const std::string& text) override;
    Vec embed_image(const Image& image) override;
    int dim() const override { return dim_; }

private:
    std::unordered_map<std::string, Vec> entries_;
    int dim_ = 0;
};

struct VisualConceptSet {
    std::string image_id;
    std::vector<std::string> concepts;  // descending similarity
    std::vector<double> scores;         // aligned, non-increasing

    size_t size() const { return concepts.size(); }
};

// Top-k concepts by dot product against a unit image embedding; ties break
// toward the lower corpus index. k larger than the corpus returns the whole
// corpus sorted.
VisualConceptSet select_top_k(const Vec& image_embedding, const ConceptCorpus& corpus,
                              const Mat& corpus_embeddings, int k,
                              const std::string& image_id = "");

// Uniform subset of size max(1, round(p_vc * n)) without replacement,
// preserving score order among survivors. p_vc = 1 returns the set unchanged.
VisualConceptSet vca_sample(const VisualConceptSet& concept_set, double p_vc, Rng& rng);

struct EmbedCorpusResult {
    Mat embeddings;  // row i = embedding of corpus.concepts[i]
    int reused_from_cache = 0;
    int freshly_embedded = 0;
};

struct ProviderFailure : std::runtime_error {
    ProviderFailure(const std::string& msg, std::vector<std::string> failed)
        : std::runtime_error(msg), failed_items(std::move(failed)) {}
    std::vector<std::string> failed_items;
};

// Embeds every corpus concept, reusing entries from cache_path when present;
// the cache is rewritten afterwards. A provider failure writes the partial
// cache for the successful items and throws ProviderFailure listing the rest.
EmbedCorpusResult embed_corpus(const ConceptCorpus& corpus, EmbeddingProvider& provider,
                               const std::string& cache_path);

// concept cache records {"concept", "count", "embedding"}
void write_concept_cache(const std::string& path, const ConceptCorpus& corpus,
                         const Mat& embeddings);
struct ConceptCache {
    ConceptCorpus corpus;
    Mat embeddings;
};
ConceptCache read_concept_cache(const std::string& path);

// per-image concept records {"image_id", "concepts", "scores"}
void write_concept_sets(const std::string& path, const std::vector<VisualConceptSet>& sets,
                        const std::string& provenance_json = "");
std::vector<VisualConceptSet> read_concept_sets(const std::string& path);

}  // namespace vicha
