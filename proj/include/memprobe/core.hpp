#pragma once

// Core domain types shared by every module: unit-norm embedding vectors,
// the label vocabulary, the append-only exemplar store, probability
// distributions over label ids, and the deterministic RNG that seeds all
// stochastic operations.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <deque>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace memprobe {

// ---------------------------------------------------------------------------
// Errors

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ZeroVectorError : Error { using Error::Error; };
struct NonFiniteError : Error { using Error::Error; };
struct EmptyDistributionError : Error { using Error::Error; };
struct DimensionMismatchError : Error { using Error::Error; };
struct EmptyIndexError : Error { using Error::Error; };
struct InvalidKError : Error { using Error::Error; };
struct EmptyStoreError : Error { using Error::Error; };
struct MissingTextEmbeddingError : Error { using Error::Error; };
struct EmptyTreeError : Error { using Error::Error; };
struct UntrainedLeafError : Error { using Error::Error; };
struct EmptyCoveredSetError : Error { using Error::Error; };
struct InvalidConfigError : Error { using Error::Error; };
struct InvalidPlanError : Error { using Error::Error; };
struct InvalidProtocolError : Error { using Error::Error; };
struct ShapeMismatchError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct DanglingLabelError : Error { using Error::Error; };
struct MalformedReportError : Error { using Error::Error; };

// ---------------------------------------------------------------------------
// EmbeddingVector

/// Fixed-dimension unit-L2-norm vector. Values are stored as 32-bit floats;
/// all reductions over them accumulate in 64-bit.
struct EmbeddingVector {
    std::vector<float> values;

    int dim() const { return static_cast<int>(values.size()); }
};

/// Inner product with 64-bit accumulation. Dimensions must match.
inline double dot(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.dim() != b.dim())
        throw DimensionMismatchError("dot: dim " + std::to_string(a.dim()) +
                                     " vs " + std::to_string(b.dim()));
    double acc = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i)
        acc += static_cast<double>(a.values[i]) * static_cast<double>(b.values[i]);
    return acc;
}

inline double l2_norm(std::span<const double> v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

inline double l2_norm(const EmbeddingVector& v) {
    double acc = 0.0;
    for (float x : v.values) acc += static_cast<double>(x) * static_cast<double>(x);
    return std::sqrt(acc);
}

/// Scales a raw vector to unit L2 norm. Throws ZeroVectorError when the
/// norm is below 1e-12. Inputs whose norm is already within 1e-7 of one are
/// copied as-is, which makes normalization bitwise idempotent.
inline EmbeddingVector normalize(std::span<const double> raw) {
    double norm = l2_norm(raw);
    if (!std::isfinite(norm)) throw NonFiniteError("normalize: non-finite input");
    if (norm < 1e-12) throw ZeroVectorError("normalize: zero vector");
    if (std::abs(norm - 1.0) <= 1e-7) norm = 1.0;
    EmbeddingVector out;
    out.values.resize(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i)
        out.values[i] = static_cast<float>(raw[i] / norm);
    return out;
}

inline EmbeddingVector normalize(std::span<const float> raw) {
    std::vector<double> widened(raw.begin(), raw.end());
    return normalize(std::span<const double>(widened));
}

inline EmbeddingVector normalize(const EmbeddingVector& v) {
    return normalize(std::span<const float>(v.values));
}

// ---------------------------------------------------------------------------
// Softmax

/// Numerically stable softmax (max-subtraction). Inputs must be finite.
inline std::vector<double> softmax(std::span<const double> logits) {
    if (logits.empty()) throw EmptyDistributionError("softmax: empty input");
    double m = logits[0];
    for (double l : logits) {
        if (!std::isfinite(l)) throw NonFiniteError("softmax: non-finite logit");
        m = std::max(m, l);
    }
    std::vector<double> out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::exp(logits[i] - m);
        sum += out[i];
    }
    for (double& p : out) p /= sum;
    return out;
}

// ---------------------------------------------------------------------------
// Probability distributions

/// Distribution over an explicit list of label ids. `partial` marks a
/// zero-extended partial distribution whose probabilities sum below one.
struct ProbabilityDistribution {
    std::vector<int> support;
    std::vector<double> probs;
    bool partial = false;

    bool empty() const { return support.empty(); }

    double sum() const {
        double s = 0.0;
        for (double p : probs) s += p;
        return s;
    }

    /// Probability of one label, zero when outside the support.
    double prob_of(int label_id) const {
        for (std::size_t i = 0; i < support.size(); ++i)
            if (support[i] == label_id) return probs[i];
        return 0.0;
    }
};

/// Label with maximum probability; ties break toward the smallest label id.
inline int argmax_label(const ProbabilityDistribution& dist) {
    if (dist.support.empty() || dist.support.size() != dist.probs.size())
        throw EmptyDistributionError("argmax_label: empty distribution");
    int best_label = dist.support[0];
    double best_p = dist.probs[0];
    for (std::size_t i = 1; i < dist.support.size(); ++i) {
        if (dist.probs[i] > best_p ||
            (dist.probs[i] == best_p && dist.support[i] < best_label)) {
            best_p = dist.probs[i];
            best_label = dist.support[i];
        }
    }
    return best_label;
}

// ---------------------------------------------------------------------------
// Label vocabulary

struct LabelEntry {
    int id = -1;
    std::string text;
    EmbeddingVector text_embedding;
};

/// Dense vocabulary: entry i carries label id i and exactly one text
/// embedding.
struct LabelTable {
    std::vector<LabelEntry> entries;

    int size() const { return static_cast<int>(entries.size()); }

    bool has(int label_id) const {
        return label_id >= 0 && label_id < size();
    }

    int add(std::string text, EmbeddingVector embedding) {
        int id = size();
        entries.push_back({id, std::move(text), std::move(embedding)});
        return id;
    }

    const EmbeddingVector& text_embedding(int label_id) const {
        if (!has(label_id))
            throw MissingTextEmbeddingError("no text embedding for label " +
                                            std::to_string(label_id));
        return entries[label_id].text_embedding;
    }

    const std::string& text(int label_id) const {
        if (!has(label_id))
            throw MissingTextEmbeddingError("unknown label " + std::to_string(label_id));
        return entries[label_id].text;
    }
};

// ---------------------------------------------------------------------------
// Exemplars

struct Exemplar {
    std::int64_t position = -1;   // insertion order within the store
    EmbeddingVector image_embedding;
    int label_id = -1;
};

/// Append-only memory of (image embedding, label) entries. Single writer,
/// many concurrent readers: an exemplar becomes visible only after it is
/// fully constructed, and entries are never moved or removed within a run.
class ExemplarStore {
public:
    /// Appends one exemplar and returns its position. Writer-only.
    std::int64_t append(EmbeddingVector embedding, int label_id) {
        if (dim_ == 0) {
            dim_ = embedding.dim();
        } else if (embedding.dim() != dim_) {
            throw DimensionMismatchError("store expects dim " + std::to_string(dim_) +
                                         ", got " + std::to_string(embedding.dim()));
        }
        auto position = static_cast<std::int64_t>(entries_.size());
        entries_.push_back({position, std::move(embedding), label_id});
        {
            std::lock_guard<std::mutex> lock(covered_mutex_);
            covered_.insert(label_id);
        }
        visible_.store(entries_.size(), std::memory_order_release);
        return position;
    }

    std::size_t size() const { return visible_.load(std::memory_order_acquire); }
    bool empty() const { return size() == 0; }
    int dim() const { return dim_; }

    const Exemplar& get(std::int64_t position) const {
        if (position < 0 || static_cast<std::size_t>(position) >= size())
            throw Error("store position out of range: " + std::to_string(position));
        return entries_[static_cast<std::size_t>(position)];
    }

    /// Union of stored labels (Y_e), sorted ascending.
    std::vector<int> covered_labels() const {
        std::lock_guard<std::mutex> lock(covered_mutex_);
        return {covered_.begin(), covered_.end()};
    }

    bool covers(int label_id) const {
        std::lock_guard<std::mutex> lock(covered_mutex_);
        return covered_.count(label_id) > 0;
    }

private:
    std::deque<Exemplar> entries_;   // stable addresses under append
    std::atomic<std::size_t> visible_{0};
    int dim_ = 0;
    mutable std::mutex covered_mutex_;
    std::set<int> covered_;
};

// ---------------------------------------------------------------------------
// Prediction output

/// Dual-form prediction: a probability distribution, an embedding, or both.
struct PredictionOutput {
    std::optional<ProbabilityDistribution> distribution;
    std::optional<EmbeddingVector> embedding;
    int argmax_label = -1;
};

// ---------------------------------------------------------------------------
// Deterministic RNG

struct RngSeed {
    std::uint64_t value = 0;
};

/// Derives an independent stream seed from a base seed and a stream id
/// (splitmix64 finalizer).
inline std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a + 0x9e3779b97f4a7c15ULL + (b << 1 | 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Seeded generator with hand-rolled uniform/gaussian/shuffle so that all
/// draws are bit-identical for identical seeds.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}
    explicit Rng(RngSeed seed) : gen_(seed.value) {}

    /// Uniform double in [0, 1).
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [0, n). n must be positive.
    std::uint64_t uniform_int(std::uint64_t n) {
        return static_cast<std::uint64_t>(
            (static_cast<unsigned __int128>(gen_()) * n) >> 64);
    }

    /// Standard normal via Box-Muller (pairs cached).
    double gaussian() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 1.0 - uniform();   // (0, 1]
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double angle = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(angle);
        has_spare_ = true;
        return r * std::cos(angle);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i)
            std::swap(v[i - 1], v[uniform_int(i)]);
    }

private:
    std::mt19937_64 gen_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// Parallelism cap

/// Upper bound for internal parallelism: MEMPROBE_THREADS when set,
/// hardware concurrency otherwise.
inline int max_threads() {
    if (const char* env = std::getenv("MEMPROBE_THREADS")) {
        int n = std::atoi(env);
        if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

}  // namespace memprobe
