#include <doctest.h>

#include <cmath>

#include "memprobe/core.hpp"
#include "memprobe/fusion.hpp"

using namespace memprobe;

namespace {

EmbeddingVector random_unit(Rng& rng, int dim) {
    std::vector<double> v(static_cast<std::size_t>(dim));
    for (double& x : v) x = rng.gaussian();
    return normalize(std::span<const double>(v));
}

LabelTable orthonormal_labels(int count, int dim) {
    LabelTable table;
    for (int i = 0; i < count; ++i) {
        std::vector<double> v(static_cast<std::size_t>(dim), 0.0);
        v[static_cast<std::size_t>(i)] = 1.0;
        table.add("label-" + std::to_string(i), normalize(std::span<const double>(v)));
    }
    return table;
}

ProbabilityDistribution random_distribution(Rng& rng, const std::vector<int>& support) {
    ProbabilityDistribution d;
    d.support = support;
    double total = 0.0;
    for (std::size_t i = 0; i < support.size(); ++i) {
        d.probs.push_back(0.05 + rng.uniform());
        total += d.probs.back();
    }
    for (double& p : d.probs) p /= total;
    return d;
}

}  // namespace

TEST_SUITE_BEGIN("fusion");

TEST_CASE("zero-shot logits are temperature-scaled cosines") {
    auto labels = orthonormal_labels(2, 4);
    CandidateSet cand{{0, 1}, &labels};
    ZeroShotConfig cfg;

    auto logits = zeroshot_logits(labels.text_embedding(0), cand, cfg);
    CHECK(logits[0] == doctest::Approx(100.0).epsilon(1e-9));
    CHECK(logits[1] == doctest::Approx(0.0).epsilon(1e-9));

    cfg.temperature_tau = 1.0;
    std::vector<double> halfway{1.0, 1.0, 0.0, 0.0};
    auto q = normalize(std::span<const double>(halfway));
    logits = zeroshot_logits(q, cand, cfg);
    CHECK(logits[0] == doctest::Approx(std::sqrt(0.5)).epsilon(1e-6));
}

TEST_CASE("zero-shot logits match a scalar-loop oracle") {
    Rng rng(83);
    const int dim = 16;
    LabelTable labels;
    for (int i = 0; i < 5; ++i)
        labels.add("l" + std::to_string(i), random_unit(rng, dim));
    CandidateSet cand{{0, 1, 2, 3, 4}, &labels};
    ZeroShotConfig cfg;
    for (int trial = 0; trial < 20; ++trial) {
        auto q = random_unit(rng, dim);
        auto logits = zeroshot_logits(q, cand, cfg);
        for (int i = 0; i < 5; ++i) {
            const auto& t = labels.text_embedding(i);
            double expect = 0.0, qn = 0.0, tn = 0.0;
            for (int j = 0; j < dim; ++j) {
                expect += static_cast<double>(q.values[static_cast<std::size_t>(j)]) *
                          static_cast<double>(t.values[static_cast<std::size_t>(j)]);
                qn += q.values[static_cast<std::size_t>(j)] * q.values[static_cast<std::size_t>(j)];
                tn += t.values[static_cast<std::size_t>(j)] * t.values[static_cast<std::size_t>(j)];
            }
            expect = 100.0 * expect / std::sqrt(qn * tn);
            CHECK(logits[static_cast<std::size_t>(i)] == doctest::Approx(expect).epsilon(1e-6));
        }
    }
}

TEST_CASE("zero-shot probabilities behave like a softmax over candidates") {
    auto labels = orthonormal_labels(2, 4);
    CandidateSet cand{{0, 1}, &labels};
    std::vector<double> mid{1.0, 1.0, 0.0, 0.0};
    auto dist = zeroshot_proba(normalize(std::span<const double>(mid)), cand, {});
    CHECK(dist.probs[0] == doctest::Approx(0.5).epsilon(1e-9));
    CHECK(dist.probs[1] == doctest::Approx(0.5).epsilon(1e-9));

    auto dominated = zeroshot_proba(labels.text_embedding(0), cand, {});
    CHECK(dominated.probs[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(dominated.probs[1] < 1e-40);

    Rng rng(89);
    LabelTable random_labels;
    std::vector<int> ids;
    for (int i = 0; i < 10; ++i)
        ids.push_back(random_labels.add("r" + std::to_string(i), random_unit(rng, 8)));
    CandidateSet rc{ids, &random_labels};
    for (int trial = 0; trial < 20; ++trial) {
        auto q = random_unit(rng, 8);
        auto logits = zeroshot_logits(q, rc, {});
        auto p = zeroshot_proba(q, rc, {});
        std::size_t best = 0;
        for (std::size_t i = 1; i < logits.size(); ++i)
            if (logits[i] > logits[best]) best = i;
        CHECK(argmax_label(p) == ids[best]);
        CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("coverage probability sums zero-shot mass over covered labels") {
    auto labels = orthonormal_labels(2, 4);
    CandidateSet cand{{0, 1}, &labels};
    std::vector<double> mid{1.0, 1.0, 0.0, 0.0};
    auto q = normalize(std::span<const double>(mid));

    CHECK(coverage_probability(q, cand, {0, 1}, {}, {}) == 1.0);
    CHECK(coverage_probability(q, cand, {}, {}, {}) == 0.0);
    CHECK(coverage_probability(q, cand, {0}, {}, {}) == doctest::Approx(0.5).epsilon(1e-9));

    // Complement identity.
    Rng rng(97);
    for (int trial = 0; trial < 30; ++trial) {
        auto v = random_unit(rng, 4);
        double w = coverage_probability(v, cand, {0}, {}, {});
        double complement = coverage_probability(v, cand, {1}, {}, {});
        CHECK(w + complement == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("coverage override masks the real covered set") {
    auto labels = orthonormal_labels(2, 4);
    CandidateSet cand{{0, 1}, &labels};
    std::vector<double> mid{1.0, 1.0, 0.0, 0.0};
    auto q = normalize(std::span<const double>(mid));
    FusionConfig fusion;
    fusion.coverage_override = std::set<int>{};
    CHECK(coverage_probability(q, cand, {0, 1}, fusion, {}) == 0.0);
    fusion.coverage_override = std::set<int>{0, 1};
    CHECK(coverage_probability(q, cand, {}, fusion, {}) == 1.0);
}

TEST_CASE("restrict_renormalize keeps only candidate mass") {
    ProbabilityDistribution d{{1, 2, 3}, {0.2, 0.3, 0.5}, false};
    auto r = restrict_renormalize(d, {2, 3, 9});
    CHECK(r.support == std::vector<int>{2, 3});
    CHECK(r.probs[0] == doctest::Approx(0.375).epsilon(1e-12));
    CHECK(r.probs[1] == doctest::Approx(0.625).epsilon(1e-12));
    CHECK(restrict_renormalize(d, {7}).empty());
}

TEST_CASE("AimProb endpoints reduce exactly") {
    Rng rng(101);
    ProbabilityDistribution p_z = random_distribution(rng, {0, 1, 2, 3});
    ProbabilityDistribution p_e = random_distribution(rng, {1, 3});
    FusionConfig cfg;
    cfg.mode = FusionMode::AimProb;

    auto at_zero = fuse_prob(p_z, p_e, 0.0, cfg);
    CHECK(at_zero.probs == p_z.probs);

    auto at_one = fuse_prob(p_z, p_e, 1.0, cfg);
    double denom = p_z.prob_of(1) * p_e.prob_of(1) + p_z.prob_of(3) * p_e.prob_of(3);
    CHECK(at_one.prob_of(0) == 0.0);
    CHECK(at_one.prob_of(2) == 0.0);
    CHECK(at_one.prob_of(1) == doctest::Approx(p_z.prob_of(1) * p_e.prob_of(1) / denom).epsilon(1e-12));
    CHECK(at_one.prob_of(3) == doctest::Approx(p_z.prob_of(3) * p_e.prob_of(3) / denom).epsilon(1e-12));
}

TEST_CASE("AimProb with uniform zero-shot ranks like the exemplar model") {
    ProbabilityDistribution p_z{{0, 1, 2}, {1.0 / 3, 1.0 / 3, 1.0 / 3}, false};
    ProbabilityDistribution p_e{{0, 1, 2}, {0.2, 0.7, 0.1}, false};
    FusionConfig cfg;
    cfg.mode = FusionMode::AimProb;
    auto fused = fuse_prob(p_z, p_e, 1.0, cfg);
    CHECK(argmax_label(fused) == argmax_label(p_e));
    CHECK(fused.prob_of(1) == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("fused outputs are valid distributions for random draws") {
    Rng rng(103);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<int> cand;
        for (int i = 0; i < 6; ++i) cand.push_back(i);
        auto p_z = random_distribution(rng, cand);
        std::vector<int> covered;
        for (int i = 0; i < 6; ++i)
            if (rng.uniform() < 0.5) covered.push_back(i);
        if (covered.empty()) covered.push_back(static_cast<int>(rng.uniform_int(6)));
        auto p_e = random_distribution(rng, covered);
        double w = rng.uniform();

        for (auto mode : {FusionMode::AvgProb, FusionMode::AimProb}) {
            FusionConfig cfg;
            cfg.mode = mode;
            cfg.alpha = 0.5;
            auto fused = fuse_prob(p_z, p_e, w, cfg);
            CHECK(fused.sum() == doctest::Approx(1.0).epsilon(1e-9));
            for (double p : fused.probs) CHECK(p >= 0.0);
        }
    }
}

TEST_CASE("AimProb is continuous in the coverage weight") {
    Rng rng(107);
    auto p_z = random_distribution(rng, {0, 1, 2, 3, 4});
    auto p_e = random_distribution(rng, {1, 2});
    FusionConfig cfg;
    cfg.mode = FusionMode::AimProb;
    for (double w = 0.0; w < 1.0; w += 0.093) {
        auto a = fuse_prob(p_z, p_e, w, cfg);
        auto b = fuse_prob(p_z, p_e, w + 1e-7, cfg);
        for (std::size_t i = 0; i < a.probs.size(); ++i)
            CHECK(std::abs(a.probs[i] - b.probs[i]) < 1e-5);
    }
}

TEST_CASE("AvgProb zero-extends the exemplar distribution") {
    ProbabilityDistribution p_z{{0, 1}, {0.8, 0.2}, false};
    ProbabilityDistribution p_e{{1}, {1.0}, false};
    FusionConfig cfg;
    cfg.mode = FusionMode::AvgProb;
    cfg.alpha = 0.5;
    auto fused = fuse_prob(p_z, p_e, 0.3, cfg);
    CHECK(fused.prob_of(0) == doctest::Approx(0.4).epsilon(1e-12));
    CHECK(fused.prob_of(1) == doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("empty covered sets are flagged for positive coverage") {
    Rng rng(109);
    auto p_z = random_distribution(rng, {0, 1, 2});
    FusionConfig cfg;
    cfg.mode = FusionMode::AimProb;
    CHECK_THROWS_AS(fuse_prob(p_z, {}, 0.5, cfg), EmptyCoveredSetError);
    auto as_zeroshot = fuse_prob(p_z, {}, 0.0, cfg);   // w = 0 never consults p_e
    CHECK(as_zeroshot.probs == p_z.probs);
}

TEST_CASE("embedding fusion endpoints reduce to single-model predictions") {
    Rng rng(113);
    const int dim = 8;
    LabelTable labels;
    std::vector<int> ids;
    for (int i = 0; i < 5; ++i)
        ids.push_back(labels.add("l" + std::to_string(i), random_unit(rng, dim)));
    CandidateSet cand{ids, &labels};
    ZeroShotConfig zs;

    auto v_image = random_unit(rng, dim);
    auto v_e = random_unit(rng, dim);

    FusionConfig exemplar_only;
    exemplar_only.mode = FusionMode::ExemplarOnly;
    auto alone = fuse_embedding(v_e, v_image, 0.0, cand, exemplar_only, zs);
    CHECK(alone.argmax_label == argmax_label(zeroshot_proba(v_e, cand, zs)));

    FusionConfig aim;
    aim.mode = FusionMode::AimEmb;
    auto at_zero = fuse_embedding(v_e, v_image, 0.0, cand, aim, zs);
    auto zs_direct = zeroshot_proba(v_image, cand, zs);
    CHECK(at_zero.argmax_label == argmax_label(zs_direct));
    for (std::size_t i = 0; i < zs_direct.probs.size(); ++i)
        CHECK(at_zero.distribution->probs[i] == zs_direct.probs[i]);

    auto at_one = fuse_embedding(v_e, v_image, 1.0, cand, aim, zs);
    CHECK(at_one.argmax_label == alone.argmax_label);
}

TEST_CASE("collinear inputs blend to the zero-shot prediction for any alpha") {
    Rng rng(127);
    const int dim = 8;
    LabelTable labels;
    std::vector<int> ids;
    for (int i = 0; i < 4; ++i)
        ids.push_back(labels.add("l" + std::to_string(i), random_unit(rng, dim)));
    CandidateSet cand{ids, &labels};
    auto v = random_unit(rng, dim);
    int zs_label = argmax_label(zeroshot_proba(v, cand, {}));
    for (double alpha : {0.0, 0.25, 0.5, 0.9, 1.0}) {
        FusionConfig cfg;
        cfg.mode = FusionMode::AvgEmb;
        cfg.alpha = alpha;
        auto out = fuse_embedding(v, v, 0.0, cand, cfg, {});
        CHECK(out.argmax_label == zs_label);
    }
}

TEST_CASE("prob fusion rejects embedding modes and vice versa") {
    ProbabilityDistribution p{{0}, {1.0}, false};
    FusionConfig cfg;
    cfg.mode = FusionMode::AvgEmb;
    CHECK_THROWS_AS(fuse_prob(p, p, 0.5, cfg), InvalidConfigError);
    EmbeddingVector v;
    v.values = {1.0f, 0.0f};
    LabelTable labels;
    labels.add("a", v);
    CandidateSet cand{{0}, &labels};
    cfg.mode = FusionMode::AimProb;
    CHECK_THROWS_AS(fuse_embedding(v, v, 0.5, cand, cfg, {}), InvalidConfigError);
}

TEST_SUITE_END();
