#pragma once

// Instance-based prediction over the exemplar store. Probabilities come from
// neighbor counting; the embedding output supports three variants: the
// majority label's text embedding (MV), the plain mean of neighbor text
// embeddings (AVG), and the similarity-weighted mean (WAVG).

#include <map>
#include <vector>

#include "memprobe/core.hpp"
#include "memprobe/index.hpp"

namespace memprobe {

enum class KnnVariant { MV, AVG, WAVG };

struct KnnConfig {
    int k = 9;
    KnnVariant variant = KnnVariant::WAVG;
    double temperature = 100.0;   // logit scale for WAVG weights
};

/// Counting distribution over the labels of the k nearest exemplars:
/// p(y) = count(y) / k, with k clipped to the store size.
inline ProbabilityDistribution knn_predict_proba(const ExemplarStore& store,
                                                 const FlatIndex& index,
                                                 const EmbeddingVector& q,
                                                 const KnnConfig& cfg) {
    if (store.empty()) throw EmptyStoreError("knn_predict_proba: empty store");
    if (cfg.k < 1) throw InvalidKError("knn: k must be >= 1");
    int k = static_cast<int>(std::min<std::size_t>(cfg.k, store.size()));
    auto retrieved = index.search_topk(q, k);

    std::map<int, int> counts;   // ordered: support comes out sorted
    for (const auto& nb : retrieved.neighbors)
        counts[store.get(nb.position).label_id] += 1;

    ProbabilityDistribution dist;
    for (const auto& [label, count] : counts) {
        dist.support.push_back(label);
        dist.probs.push_back(static_cast<double>(count) / k);
    }
    return dist;
}

/// Embedding prediction from the k nearest exemplars' label text embeddings.
inline EmbeddingVector knn_predict_embedding(const ExemplarStore& store,
                                             const LabelTable& labels,
                                             const FlatIndex& index,
                                             const EmbeddingVector& q,
                                             const KnnConfig& cfg) {
    if (store.empty()) throw EmptyStoreError("knn_predict_embedding: empty store");
    if (cfg.k < 1) throw InvalidKError("knn: k must be >= 1");
    int k = static_cast<int>(std::min<std::size_t>(cfg.k, store.size()));
    auto retrieved = index.search_topk(q, k);

    if (cfg.variant == KnnVariant::MV) {
        std::map<int, int> counts;
        for (const auto& nb : retrieved.neighbors)
            counts[store.get(nb.position).label_id] += 1;
        int best_label = counts.begin()->first;
        int best_count = counts.begin()->second;
        for (const auto& [label, count] : counts) {
            if (count > best_count) {   // ties keep the smaller label id
                best_count = count;
                best_label = label;
            }
        }
        return labels.text_embedding(best_label);
    }

    std::vector<double> weights(retrieved.neighbors.size(), 1.0 / k);
    if (cfg.variant == KnnVariant::WAVG) {
        std::vector<double> logits(retrieved.neighbors.size());
        for (std::size_t j = 0; j < retrieved.neighbors.size(); ++j)
            logits[j] = cfg.temperature * retrieved.neighbors[j].similarity;
        weights = softmax(logits);
    }

    const int dim = store.dim();
    std::vector<double> blend(static_cast<std::size_t>(dim), 0.0);
    for (std::size_t j = 0; j < retrieved.neighbors.size(); ++j) {
        const auto& text = labels.text_embedding(
            store.get(retrieved.neighbors[j].position).label_id);
        if (text.dim() != dim)
            throw DimensionMismatchError("text embedding dim mismatch");
        for (int i = 0; i < dim; ++i)
            blend[static_cast<std::size_t>(i)] +=
                weights[j] * static_cast<double>(text.values[static_cast<std::size_t>(i)]);
    }
    return normalize(std::span<const double>(blend));
}

}  // namespace memprobe
