#pragma once

// Exact top-k inner-product retrieval over the exemplar store. A flat scan:
// every query computes all dot products with 64-bit accumulation, so results
// are exact and reproducible. Searches are thread-safe against each other;
// adds require exclusive access.

#include <algorithm>
#include <cstdint>
#include <vector>

#include "memprobe/core.hpp"

namespace memprobe {

struct Neighbor {
    std::int64_t position = -1;
    double similarity = 0.0;
};

/// Neighbors sorted by similarity descending, ties toward smaller position.
struct RetrievalResult {
    std::vector<Neighbor> neighbors;
};

class FlatIndex {
public:
    std::size_t size() const { return positions_.size(); }
    bool empty() const { return positions_.empty(); }
    int dim() const { return dim_; }

    void reserve(std::size_t count) {
        positions_.reserve(count);
        data_.reserve(count * static_cast<std::size_t>(dim_ > 0 ? dim_ : 1));
    }

    /// Appends one exemplar's embedding; it is retrievable immediately.
    void add(const Exemplar& e) {
        if (dim_ == 0) {
            dim_ = e.image_embedding.dim();
        } else if (e.image_embedding.dim() != dim_) {
            throw DimensionMismatchError("index expects dim " + std::to_string(dim_) +
                                         ", got " + std::to_string(e.image_embedding.dim()));
        }
        data_.insert(data_.end(), e.image_embedding.values.begin(),
                     e.image_embedding.values.end());
        positions_.push_back(e.position);
    }

    /// Exact top-k by inner product over all stored rows. k is truncated to
    /// the row count; ordering follows RetrievalResult.
    RetrievalResult search_topk(const EmbeddingVector& q, int k) const {
        if (k < 1) throw InvalidKError("search_topk: k must be >= 1");
        if (empty()) throw EmptyIndexError("search_topk: empty index");
        if (q.dim() != dim_)
            throw DimensionMismatchError("query dim " + std::to_string(q.dim()) +
                                         " vs index dim " + std::to_string(dim_));

        const std::size_t count = positions_.size();
        std::vector<double> sims(count);
        const float* base = data_.data();
        for (std::size_t row = 0; row < count; ++row) {
            const float* v = base + row * static_cast<std::size_t>(dim_);
            double acc = 0.0;
            for (int j = 0; j < dim_; ++j)
                acc += static_cast<double>(q.values[j]) * static_cast<double>(v[j]);
            sims[row] = acc;
        }

        std::vector<std::size_t> order(count);
        for (std::size_t i = 0; i < count; ++i) order[i] = i;
        auto better = [&](std::size_t a, std::size_t b) {
            if (sims[a] != sims[b]) return sims[a] > sims[b];
            return positions_[a] < positions_[b];
        };
        std::size_t take = std::min<std::size_t>(static_cast<std::size_t>(k), count);
        std::partial_sort(order.begin(), order.begin() + take, order.end(), better);

        RetrievalResult result;
        result.neighbors.reserve(take);
        for (std::size_t i = 0; i < take; ++i)
            result.neighbors.push_back({positions_[order[i]], sims[order[i]]});
        return result;
    }

private:
    int dim_ = 0;
    std::vector<float> data_;              // row-major, insertion order
    std::vector<std::int64_t> positions_;  // row -> Exemplar.position
};

}  // namespace memprobe
