#pragma once

// Zero-shot cosine classifier and the rules that combine it with an exemplar
// model: plain averaging of probabilities or embeddings, and adaptive
// instance marginalization (AIM), which weights the exemplar model by the
// zero-shot probability mass on exemplar-covered labels.

#include <optional>
#include <set>
#include <vector>

#include "memprobe/core.hpp"

namespace memprobe {

struct ZeroShotConfig {
    double temperature_tau = 100.0;
};

/// The candidate labels of one task, resolved against the vocabulary.
struct CandidateSet {
    std::vector<int> label_ids;
    const LabelTable* labels = nullptr;
};

enum class FusionMode { ZeroShotOnly, ExemplarOnly, AvgProb, AvgEmb, AimProb, AimEmb };

struct FusionConfig {
    FusionMode mode = FusionMode::AimEmb;
    double alpha = 0.5;   // blend weight for the Avg modes
    std::optional<std::set<int>> coverage_override;   // long-tailed masking
};

/// Temperature-scaled cosine logits of the query against each candidate's
/// text embedding. Unit inputs make this tau times the dot product.
inline std::vector<double> zeroshot_logits(const EmbeddingVector& q,
                                           const CandidateSet& cand,
                                           const ZeroShotConfig& cfg) {
    if (!cand.labels || cand.label_ids.empty())
        throw EmptyDistributionError("zeroshot_logits: empty candidate set");
    double qn = l2_norm(q);
    std::vector<double> logits(cand.label_ids.size());
    for (std::size_t i = 0; i < cand.label_ids.size(); ++i) {
        const auto& t = cand.labels->text_embedding(cand.label_ids[i]);
        double tn = l2_norm(t);
        logits[i] = (qn < 1e-12 || tn < 1e-12)
                        ? 0.0
                        : cfg.temperature_tau * dot(q, t) / (qn * tn);
    }
    return logits;
}

inline ProbabilityDistribution zeroshot_proba(const EmbeddingVector& q,
                                              const CandidateSet& cand,
                                              const ZeroShotConfig& cfg) {
    ProbabilityDistribution dist;
    dist.support = cand.label_ids;
    dist.probs = softmax(zeroshot_logits(q, cand, cfg));
    return dist;
}

/// Zero-shot probability that the sample's label is exemplar-covered:
/// the sum of p_z over candidates in Y_e (or in the coverage override).
inline double coverage_probability(const EmbeddingVector& q, const CandidateSet& cand,
                                   const std::set<int>& covered,
                                   const FusionConfig& fusion,
                                   const ZeroShotConfig& zs_cfg) {
    const std::set<int>& effective =
        fusion.coverage_override ? *fusion.coverage_override : covered;
    auto p_z = zeroshot_proba(q, cand, zs_cfg);
    double w = 0.0;
    for (std::size_t i = 0; i < p_z.support.size(); ++i)
        if (effective.count(p_z.support[i])) w += p_z.probs[i];
    return std::min(1.0, std::max(0.0, w));
}

/// Restricts a distribution to the given candidate labels and renormalizes.
/// Returns an empty distribution when no mass survives the restriction.
inline ProbabilityDistribution restrict_renormalize(const ProbabilityDistribution& dist,
                                                    const std::vector<int>& keep) {
    std::set<int> keep_set(keep.begin(), keep.end());
    ProbabilityDistribution out;
    double total = 0.0;
    for (std::size_t i = 0; i < dist.support.size(); ++i) {
        if (keep_set.count(dist.support[i])) {
            out.support.push_back(dist.support[i]);
            out.probs.push_back(dist.probs[i]);
            total += dist.probs[i];
        }
    }
    if (out.support.empty() || total <= 0.0) return {};
    for (double& p : out.probs) p /= total;
    return out;
}

/// Probability-space fusion. p_z ranges over the full candidate set; p_e is
/// the exemplar distribution restricted and renormalized to the covered
/// candidates. For AimProb, w is the coverage probability; uncovered labels
/// take only the zero-shot term. When the exemplar model puts no mass on any
/// covered candidate, the output falls back to p_z.
inline ProbabilityDistribution fuse_prob(const ProbabilityDistribution& p_z,
                                         const ProbabilityDistribution& p_e, double w,
                                         const FusionConfig& cfg) {
    if (cfg.mode != FusionMode::AvgProb && cfg.mode != FusionMode::AimProb)
        throw InvalidConfigError("fuse_prob: mode is not a probability fusion");
    if (p_z.support.empty()) throw EmptyDistributionError("fuse_prob: empty p_z");

    ProbabilityDistribution out;
    out.support = p_z.support;
    out.probs.resize(p_z.probs.size());

    if (cfg.mode == FusionMode::AvgProb) {
        if (p_e.support.empty()) return p_z;   // exemplar model abstains
        double a = cfg.alpha;
        for (std::size_t i = 0; i < out.support.size(); ++i)
            out.probs[i] = a * p_e.prob_of(out.support[i]) + (1.0 - a) * p_z.probs[i];
        return out;
    }

    // AimProb
    if (w <= 0.0) return p_z;
    if (p_e.support.empty())
        throw EmptyCoveredSetError("fuse_prob: positive coverage with empty covered set");
    double denom = 0.0;
    for (std::size_t i = 0; i < p_e.support.size(); ++i)
        denom += p_z.prob_of(p_e.support[i]) * p_e.probs[i];
    if (denom <= 0.0) return p_z;   // no joint mass on covered labels
    for (std::size_t i = 0; i < out.support.size(); ++i) {
        double joint = p_z.probs[i] * p_e.prob_of(out.support[i]);
        out.probs[i] = w * (joint / denom) + (1.0 - w) * p_z.probs[i];
    }
    return out;
}

/// Embedding-space fusion: v_out = alpha * v_e + (1 - alpha) * v_I, with
/// alpha fixed (AvgEmb), the coverage probability (AimEmb), one
/// (ExemplarOnly) or zero (ZeroShotOnly). The label is the argmax of the
/// temperature-scaled cosine of v_out against the candidates.
inline PredictionOutput fuse_embedding(const EmbeddingVector& v_e,
                                       const EmbeddingVector& v_image, double w,
                                       const CandidateSet& cand, const FusionConfig& cfg,
                                       const ZeroShotConfig& zs_cfg) {
    double a;
    switch (cfg.mode) {
        case FusionMode::ZeroShotOnly: a = 0.0; break;
        case FusionMode::ExemplarOnly: a = 1.0; break;
        case FusionMode::AvgEmb: a = cfg.alpha; break;
        case FusionMode::AimEmb: a = w; break;
        default:
            throw InvalidConfigError("fuse_embedding: mode is not an embedding fusion");
    }
    if (v_e.dim() != v_image.dim())
        throw DimensionMismatchError("fuse_embedding: dim mismatch");

    EmbeddingVector blend;
    blend.values.resize(v_e.values.size());
    for (std::size_t i = 0; i < blend.values.size(); ++i)
        blend.values[i] = static_cast<float>(a * static_cast<double>(v_e.values[i]) +
                                             (1.0 - a) * static_cast<double>(v_image.values[i]));

    PredictionOutput out;
    out.distribution = zeroshot_proba(blend, cand, zs_cfg);   // cosine absorbs the scale
    out.argmax_label = argmax_label(*out.distribution);
    out.embedding = l2_norm(blend) < 1e-12 ? v_image : normalize(blend);
    return out;
}

}  // namespace memprobe
