#include "vicha/visual_concepts.hpp"

#include "vicha/config.hpp"

#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace vicha {

using nlohmann::json;

namespace {

const std::set<std::string>& stop_words() {
    static const std::set<std::string> words = {
        "a",     "an",    "the",   "is",    "are",   "was",  "were", "be",   "been",
        "being", "on",    "in",    "at",    "of",    "to",   "with", "and",  "or",
        "for",   "by",    "this",  "that",  "these", "those", "it",  "its",  "his",
        "her",   "their", "there", "here",  "as",    "from", "into", "over", "under",
        "up",    "down",  "out",   "off",   "than",  "then", "so",   "too",  "not",
        "no",    "some",  "any",   "each",  "every", "all",  "both", "few",  "such",
        "only",  "own",   "same",  "while", "about", "near", "they", "has",  "have",
        "had",   "he",    "she",   "we",    "you",   "i"};
    return words;
}

std::vector<std::string> content_tokens(const std::string& caption,
                                        std::vector<int>* original_index) {
    std::string lowered;
    lowered.reserve(caption.size());
    for (char ch : caption) {
        unsigned char u = static_cast<unsigned char>(ch);
        lowered.push_back(std::isalnum(u) ? static_cast<char>(std::tolower(u)) : ' ');
    }
    std::istringstream in(lowered);
    std::vector<std::string> out;
    std::string tok;
    int idx = 0;
    while (in >> tok) {
        if (!stop_words().count(tok)) {
            out.push_back(tok);
            if (original_index) original_index->push_back(idx);
        }
        ++idx;
    }
    return out;
}

}  // namespace

ConceptExtractor default_concept_extractor() {
    return [](const std::string& caption) {
        std::vector<int> pos;
        std::vector<std::string> words = content_tokens(caption, &pos);
        std::vector<std::string> out = words;
        for (size_t i = 0; i + 1 < words.size(); ++i)
            if (pos[i + 1] == pos[i] + 1)  // adjacent in the original caption
                out.push_back(words[i] + " " + words[i + 1]);
        return out;
    };
}

ConceptCorpus build_corpus(const std::vector<std::string>& captions,
                           const ConceptExtractor& extractor, const std::string& source) {
    std::map<std::string, int64_t> counts;  // ordered -> lexicographic output
    for (const auto& caption : captions)
        for (auto& phrase : extractor(caption)) {
            std::string lowered;
            for (char ch : phrase)
                lowered.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
            ++counts[lowered];
        }
    ConceptCorpus corpus;
    corpus.source = source;
    for (const auto& [concept_str, count] : counts) {
        if (count >= 2) {
            corpus.concepts.push_back(concept_str);
            corpus.counts.push_back(count);
        }
    }
    return corpus;
}

Vec MockProvider::from_hash(uint64_t h) {
    Rng rng(h ^ seed_);
    Vec v(dim_);
    for (int i = 0; i < dim_; ++i) v(i) = rng.normal();
    double n = v.norm();
    if (n == 0.0) v(0) = 1.0, n = 1.0;
    return v / n;
}

Vec MockProvider::embed_text(const std::string& text) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return from_hash(h);
}

Vec MockProvider::embed_image(const Image& image) { return from_hash(image_hash(image)); }

// --- remote provider ---------------------------------------------------------

struct RemoteProvider::Impl {
    httplib::Client client;
    explicit Impl(const std::string& host, int port) : client(host, port) {
        client.set_read_timeout(10, 0);
    }
};

RemoteProvider::RemoteProvider(const std::string& host, int port, int dim)
    : impl_(std::make_unique<Impl>(host, port)), dim_(dim) {}

RemoteProvider::~RemoteProvider() = default;

namespace {

Vec parse_embedding_response(const httplib::Result& res, int expected_dim) {
    if (!res || res->status != 200)
        throw std::runtime_error("RemoteProvider: embed request failed");
    json j = json::parse(res->body);
    std::vector<double> values = j.at("embedding").get<std::vector<double>>();
    if (static_cast<int>(values.size()) != expected_dim)
        throw std::runtime_error("RemoteProvider: embedding dimension mismatch");
    Vec v(expected_dim);
    for (int i = 0; i < expected_dim; ++i) v(i) = values[static_cast<size_t>(i)];
    if (std::abs(v.norm() - 1.0) > 1e-5)
        throw std::runtime_error("RemoteProvider: embedding is not unit-norm");
    return v;
}

}  // namespace

Vec RemoteProvider::embed_text(const std::string& text) {
    json req{{"kind", "text"}, {"text", text}};
    return parse_embedding_response(
        impl_->client.Post("/embed", req.dump(), "application/json"), dim_);
}

Vec RemoteProvider::embed_image(const Image& image) {
    json req{{"kind", "image"},
             {"c", image.c},
             {"h", image.h},
             {"w", image.w},
             {"data", image.data}};
    return parse_embedding_response(
        impl_->client.Post("/embed", req.dump(), "application/json"), dim_);
}

// --- cache provider -----------------------------------------------------------

CacheProvider::CacheProvider(const std::string& cache_path) {
    std::ifstream in(cache_path);
    if (!in) throw ConfigError("CacheProvider: cannot open " + cache_path);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        if (j.contains("_header")) continue;
        std::string key = j.contains("concept") ? j.at("concept").get<std::string>()
                                                : j.at("key").get<std::string>();
        std::vector<double> values = j.at("embedding").get<std::vector<double>>();
        Vec v(static_cast<Eigen::Index>(values.size()));
        for (size_t i = 0; i < values.size(); ++i) v(static_cast<Eigen::Index>(i)) = values[i];
        dim_ = static_cast<int>(values.size());
        entries_[key] = std::move(v);
    }
}

Vec CacheProvider::embed_text(const std::string& text) {
    auto it = entries_.find(text);
    if (it == entries_.end())
        throw std::runtime_error("CacheProvider: no cached embedding for '" + text + "'");
    return it->second;
}

Vec CacheProvider::embed_image(const Image& image) {
    std::ostringstream key;
    key << "image:" << std::hex << image_hash(image);
    auto it = entries_.find(key.str());
    if (it == entries_.end())
        throw std::runtime_error("CacheProvider: no cached embedding for " + key.str());
    return it->second;
}

// --- selection and sampling ----------------------------------------------------

VisualConceptSet select_top_k(const Vec& image_embedding, const ConceptCorpus& corpus,
                              const Mat& corpus_embeddings, int k,
                              const std::string& image_id) {
    if (k < 1) throw ConfigError("select_top_k: k must be at least 1");
    const Eigen::Index n = static_cast<Eigen::Index>(corpus.concepts.size());
    if (corpus_embeddings.rows() != n)
        throw ConfigError("select_top_k: corpus/embedding row count mismatch");

    Vec scores = corpus_embeddings * image_embedding;
    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (scores(a) != scores(b)) return scores(a) > scores(b);
        return a < b;  // ties break toward the lower corpus index
    });
    const int take = std::min<int>(k, static_cast<int>(n));

    VisualConceptSet out;
    out.image_id = image_id;
    for (int i = 0; i < take; ++i) {
        out.concepts.push_back(corpus.concepts[static_cast<size_t>(order[static_cast<size_t>(i)])]);
        out.scores.push_back(scores(order[static_cast<size_t>(i)]));
    }
    return out;
}

VisualConceptSet vca_sample(const VisualConceptSet& concept_set, double p_vc, Rng& rng) {
    if (p_vc <= 0.0 || p_vc > 1.0) throw ConfigError("vca_sample: p_vc must be in (0,1]");
    VisualConceptSet out;
    out.image_id = concept_set.image_id;
    const int n = static_cast<int>(concept_set.size());
    if (n == 0) return out;

    const int take = std::max<int>(1, static_cast<int>(std::lround(p_vc * n)));
    std::vector<int> keep = rng.sample_without_replacement(n, take);  // ascending
    for (int i : keep) {
        out.concepts.push_back(concept_set.concepts[static_cast<size_t>(i)]);
        out.scores.push_back(concept_set.scores[static_cast<size_t>(i)]);
    }
    return out;
}

// --- embed + cache --------------------------------------------------------------

void write_concept_cache(const std::string& path, const ConceptCorpus& corpus,
                         const Mat& embeddings) {
    std::ofstream out(path);
    if (!out) throw ConfigError("write_concept_cache: cannot open " + path);
    for (size_t i = 0; i < corpus.concepts.size(); ++i) {
        std::vector<double> row(embeddings.cols());
        for (Eigen::Index c = 0; c < embeddings.cols(); ++c)
            row[static_cast<size_t>(c)] = embeddings(static_cast<Eigen::Index>(i), c);
        json j{{"concept", corpus.concepts[i]}, {"count", corpus.counts[i]}, {"embedding", row}};
        out << j.dump() << "\n";
    }
}

ConceptCache read_concept_cache(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("read_concept_cache: cannot open " + path);
    ConceptCache cache;
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        if (j.contains("_header")) continue;
        cache.corpus.concepts.push_back(j.at("concept").get<std::string>());
        cache.corpus.counts.push_back(j.at("count").get<int64_t>());
        rows.push_back(j.at("embedding").get<std::vector<double>>());
    }
    cache.embeddings = Mat(static_cast<Eigen::Index>(rows.size()),
                           rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
    for (size_t r = 0; r < rows.size(); ++r)
        for (size_t c = 0; c < rows[r].size(); ++c)
            cache.embeddings(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
                rows[r][c];
    return cache;
}

EmbedCorpusResult embed_corpus(const ConceptCorpus& corpus, EmbeddingProvider& provider,
                               const std::string& cache_path) {
    std::unordered_map<std::string, Vec> cached;
    {
        std::ifstream probe(cache_path);
        if (probe) {
            ConceptCache old = read_concept_cache(cache_path);
            if (old.embeddings.cols() == provider.dim()) {
                for (size_t i = 0; i < old.corpus.concepts.size(); ++i)
                    cached[old.corpus.concepts[i]] =
                        old.embeddings.row(static_cast<Eigen::Index>(i)).transpose();
            }
        }
    }

    EmbedCorpusResult result;
    result.embeddings = Mat(static_cast<Eigen::Index>(corpus.concepts.size()), provider.dim());
    std::vector<std::string> failures;
    std::vector<bool> done(corpus.concepts.size(), false);
    for (size_t i = 0; i < corpus.concepts.size(); ++i) {
        auto it = cached.find(corpus.concepts[i]);
        if (it != cached.end()) {
            result.embeddings.row(static_cast<Eigen::Index>(i)) = it->second.transpose();
            ++result.reused_from_cache;
            done[i] = true;
            continue;
        }
        try {
            Vec v = provider.embed_text(corpus.concepts[i]);
            if (std::abs(v.norm() - 1.0) > 1e-5)
                throw std::runtime_error("provider returned a non-unit vector");
            result.embeddings.row(static_cast<Eigen::Index>(i)) = v.transpose();
            ++result.freshly_embedded;
            done[i] = true;
        } catch (const std::exception& e) {
            failures.push_back(corpus.concepts[i] + ": " + e.what());
        }
    }

    if (!failures.empty()) {
        // write the partial cache for the items that succeeded, then report
        ConceptCorpus partial;
        std::vector<Eigen::Index> ok_rows;
        for (size_t i = 0; i < corpus.concepts.size(); ++i) {
            if (!done[i]) continue;
            partial.concepts.push_back(corpus.concepts[i]);
            partial.counts.push_back(corpus.counts[i]);
            ok_rows.push_back(static_cast<Eigen::Index>(i));
        }
        Mat ok(static_cast<Eigen::Index>(ok_rows.size()), provider.dim());
        for (size_t r = 0; r < ok_rows.size(); ++r)
            ok.row(static_cast<Eigen::Index>(r)) = result.embeddings.row(ok_rows[r]);
        write_concept_cache(cache_path, partial, ok);
        throw ProviderFailure("embed_corpus: " + std::to_string(failures.size()) +
                                  " concept(s) failed; partial cache written to " + cache_path,
                              failures);
    }

    write_concept_cache(cache_path, corpus, result.embeddings);
    return result;
}

void write_concept_sets(const std::string& path, const std::vector<VisualConceptSet>& sets,
                        const std::string& provenance_json) {
    std::ofstream out(path);
    if (!out) throw ConfigError("write_concept_sets: cannot open " + path);
    if (!provenance_json.empty())
        out << json{{"_header", json::parse(provenance_json)}}.dump() << "\n";
    for (const auto& s : sets) {
        json j{{"image_id", s.image_id}, {"concepts", s.concepts}, {"scores", s.scores}};
        out << j.dump() << "\n";
    }
}

std::vector<VisualConceptSet> read_concept_sets(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("read_concept_sets: cannot open " + path);
    std::vector<VisualConceptSet> sets;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        if (j.contains("_header")) continue;
        VisualConceptSet s;
        s.image_id = j.at("image_id").get<std::string>();
        s.concepts = j.at("concepts").get<std::vector<std::string>>();
        s.scores = j.at("scores").get<std::vector<double>>();
        sets.push_back(std::move(s));
    }
    return sets;
}

}  // namespace vicha
