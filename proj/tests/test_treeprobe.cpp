#include <doctest.h>

#include <algorithm>
#include <set>

#include "memprobe/core.hpp"
#include "memprobe/index.hpp"
#include "memprobe/linear.hpp"
#include "memprobe/treeprobe.hpp"

using namespace memprobe;

namespace {

struct Fixture {
    ExemplarStore store;
    FlatIndex index;
    LabelTable labels;
    std::optional<ClusterTree> tree;

    explicit Fixture(TreeConfig cfg = {}) { tree.emplace(cfg, &store); }

    std::int64_t add(const EmbeddingVector& e, int label) {
        auto pos = store.append(e, label);
        index.add(store.get(pos));
        tree->insert(pos);
        return pos;
    }
};

EmbeddingVector random_unit(Rng& rng, int dim) {
    std::vector<double> v(static_cast<std::size_t>(dim));
    for (double& x : v) x = rng.gaussian();
    return normalize(std::span<const double>(v));
}

EmbeddingVector around(Rng& rng, const std::vector<double>& proto, double sigma) {
    std::vector<double> v(proto.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = proto[i] + sigma * rng.gaussian();
    return normalize(std::span<const double>(v));
}

TreeConfig small_tree(std::int64_t psi, int train_iters = 200) {
    TreeConfig cfg;
    cfg.node_capacity_psi = psi;
    cfg.train_cfg.max_iterations = train_iters;
    return cfg;
}

std::vector<int> leaf_ids(const ClusterTree& tree) {
    std::vector<int> ids;
    for (const auto& node : tree.nodes())
        if (node.is_leaf) ids.push_back(node.id);
    return ids;
}

// Reference descent, written independently of ClusterTree::nearest_leaf.
int reference_descent(const ClusterTree& tree, const EmbeddingVector& v) {
    int cur = tree.root();
    while (!tree.nodes()[static_cast<std::size_t>(cur)].is_leaf) {
        const TreeNode& node = tree.nodes()[static_cast<std::size_t>(cur)];
        auto score = [&](int child) {
            auto c = tree.nodes()[static_cast<std::size_t>(child)].routing_centroid();
            bool zero = true;
            double acc = 0.0;
            for (std::size_t i = 0; i < c.size(); ++i) {
                if (c[i] != 0.0) zero = false;
                acc += c[i] * static_cast<double>(v.values[i]);
            }
            return zero ? -1.0 : acc;
        };
        cur = score(node.right) > score(node.left) ? node.right : node.left;
    }
    return cur;
}

}  // namespace

TEST_SUITE_BEGIN("treeprobe");

TEST_CASE("single-leaf trees route every query to the root") {
    Fixture f(small_tree(100));
    Rng rng(131);
    f.add(random_unit(rng, 4), 0);
    for (int i = 0; i < 10; ++i)
        CHECK(f.tree->nearest_leaf(random_unit(rng, 4)) == f.tree->root());
}

TEST_CASE("routing picks the child centroid with the larger dot product") {
    Fixture f(small_tree(2));
    std::vector<double> e1{1.0, 0.0}, e2{0.0, 1.0};
    f.add(normalize(std::span<const double>(e1)), 0);
    f.add(normalize(std::span<const double>(e2)), 1);
    std::vector<double> third{0.95, 0.05};
    f.add(normalize(std::span<const double>(third)), 0);   // forces the split

    std::vector<double> qv{0.9, 0.1};
    auto q = normalize(std::span<const double>(qv));
    int leaf = f.tree->nearest_leaf(q);
    // The chosen leaf must contain the (1,0) exemplar.
    const auto& members =
        f.tree->nodes()[static_cast<std::size_t>(leaf)].exemplar_positions;
    CHECK(std::find(members.begin(), members.end(), 0) != members.end());
}

TEST_CASE("nearest_leaf matches a reference recursive descent") {
    Fixture f(small_tree(20, 30));
    Rng rng(137);
    for (int i = 0; i < 200; ++i)
        f.add(random_unit(rng, 8), static_cast<int>(rng.uniform_int(4)));
    REQUIRE(leaf_ids(*f.tree).size() >= 8);   // depth at least 3
    for (int i = 0; i < 100; ++i) {
        auto q = random_unit(rng, 8);
        CHECK(f.tree->nearest_leaf(q) == reference_descent(*f.tree, q));
    }
}

TEST_CASE("empty trees reject routing") {
    Fixture f(small_tree(10));
    Rng rng(139);
    CHECK_THROWS_AS(f.tree->nearest_leaf(random_unit(rng, 4)), EmptyTreeError);
}

TEST_CASE("capacity overflow splits into exactly two leaves") {
    Fixture f(small_tree(4));
    Rng rng(149);
    std::vector<double> left{1.0, 0.0, 0.0}, right{0.0, 1.0, 0.0};
    f.add(around(rng, left, 0.05), 0);
    f.add(around(rng, left, 0.05), 0);
    f.add(around(rng, right, 0.05), 1);
    f.add(around(rng, right, 0.05), 1);
    f.add(around(rng, left, 0.05), 0);   // fifth exemplar triggers the split

    auto leaves = leaf_ids(*f.tree);
    CHECK(leaves.size() == 2);
    CHECK(f.tree->nodes().size() == 3);
    std::int64_t total = 0;
    for (int id : leaves) total += f.tree->nodes()[static_cast<std::size_t>(id)].leaf_size();
    CHECK(total == 5);
}

TEST_CASE("below capacity everything stays in one leaf") {
    Fixture f(small_tree(1000));
    Rng rng(151);
    for (int i = 0; i < 50; ++i) f.add(random_unit(rng, 6), static_cast<int>(rng.uniform_int(3)));
    CHECK(leaf_ids(*f.tree).size() == 1);
    CHECK(f.tree->nodes().size() == 1);
}

TEST_CASE("clustered inserts respect capacity and conservation") {
    TreeConfig cfg = small_tree(300, 20);
    Fixture f(cfg);
    Rng rng(157);
    std::vector<std::vector<double>> protos;
    for (int c = 0; c < 4; ++c) {
        std::vector<double> p(16);
        for (double& x : p) x = rng.gaussian();
        protos.push_back(p);
    }
    for (int i = 0; i < 2000; ++i) {
        int c = static_cast<int>(rng.uniform_int(4));
        f.add(around(rng, protos[static_cast<std::size_t>(c)], 0.3), c);
    }

    std::int64_t total = 0;
    std::set<std::int64_t> seen;
    for (int id : leaf_ids(*f.tree)) {
        const auto& node = f.tree->nodes()[static_cast<std::size_t>(id)];
        CHECK(node.leaf_size() <= 300);
        total += node.leaf_size();
        for (std::int64_t pos : node.exemplar_positions) {
            CHECK(seen.insert(pos).second);   // each position lives in one leaf
            CHECK(f.tree->leaf_node_of(pos) == id);
        }
    }
    CHECK(total == 2000);
    CHECK(leaf_ids(*f.tree).size() >= 7);   // pigeonhole at psi=300
}

TEST_CASE("split separates well-separated blobs like the optimal 2-partition") {
    TreeConfig cfg = small_tree(10);
    Fixture f(cfg);
    Rng rng(163);
    std::vector<double> a{1.0, 0.0, 0.0, 0.0}, b{0.0, 0.0, 0.0, 1.0};
    for (int i = 0; i < 5; ++i) f.add(around(rng, a, 0.05), 0);
    for (int i = 0; i < 5; ++i) f.add(around(rng, b, 0.05), 1);
    f.tree->split_node(f.tree->root());

    // Exhaustive oracle: best 2-partition by within-cluster sum of squares.
    const int n = 10;
    double best = 1e300;
    unsigned best_mask = 1;
    for (unsigned mask = 1; mask < (1u << n) - 1; ++mask) {
        std::vector<std::vector<double>> mean(2, std::vector<double>(4, 0.0));
        int count[2] = {0, 0};
        for (int i = 0; i < n; ++i) {
            int cluster = (mask >> i) & 1;
            count[cluster] += 1;
            for (int j = 0; j < 4; ++j)
                mean[static_cast<std::size_t>(cluster)][static_cast<std::size_t>(j)] +=
                    f.store.get(i).image_embedding.values[static_cast<std::size_t>(j)];
        }
        if (count[0] == 0 || count[1] == 0) continue;
        for (int c = 0; c < 2; ++c)
            for (int j = 0; j < 4; ++j)
                mean[static_cast<std::size_t>(c)][static_cast<std::size_t>(j)] /= count[c];
        double wcss = 0.0;
        for (int i = 0; i < n; ++i) {
            int cluster = (mask >> i) & 1;
            for (int j = 0; j < 4; ++j) {
                double diff =
                    f.store.get(i).image_embedding.values[static_cast<std::size_t>(j)] -
                    mean[static_cast<std::size_t>(cluster)][static_cast<std::size_t>(j)];
                wcss += diff * diff;
            }
        }
        if (wcss < best) {
            best = wcss;
            best_mask = mask;
        }
    }
    std::set<std::int64_t> oracle_side;
    for (int i = 0; i < n; ++i)
        if ((best_mask >> i) & 1) oracle_side.insert(i);

    auto leaves = leaf_ids(*f.tree);
    REQUIRE(leaves.size() == 2);
    std::set<std::int64_t> got(
        f.tree->nodes()[static_cast<std::size_t>(leaves[0])].exemplar_positions.begin(),
        f.tree->nodes()[static_cast<std::size_t>(leaves[0])].exemplar_positions.end());
    std::set<std::int64_t> other(
        f.tree->nodes()[static_cast<std::size_t>(leaves[1])].exemplar_positions.begin(),
        f.tree->nodes()[static_cast<std::size_t>(leaves[1])].exemplar_positions.end());
    bool matches = got == oracle_side || other == oracle_side;
    CHECK(matches);
    CHECK(got.size() == 5);
    CHECK(other.size() == 5);
}

TEST_CASE("identical points split into deterministic halves") {
    Fixture f(small_tree(6));
    EmbeddingVector v;
    v.values = {1.0f, 0.0f};
    for (int i = 0; i < 6; ++i) f.add(v, 0);
    f.tree->split_node(f.tree->root());
    auto leaves = leaf_ids(*f.tree);
    REQUIRE(leaves.size() == 2);
    std::vector<std::int64_t> sizes{
        f.tree->nodes()[static_cast<std::size_t>(leaves[0])].leaf_size(),
        f.tree->nodes()[static_cast<std::size_t>(leaves[1])].leaf_size()};
    std::sort(sizes.begin(), sizes.end());
    CHECK(sizes == std::vector<std::int64_t>{3, 3});
}

TEST_CASE("splits never produce an empty child") {
    Rng rng(167);
    for (int trial = 0; trial < 10; ++trial) {
        Fixture f(small_tree(8));
        EmbeddingVector common = random_unit(rng, 4);
        for (int i = 0; i < 7; ++i) f.add(common, 0);   // near-degenerate
        f.add(random_unit(rng, 4), 0);
        f.tree->split_node(f.tree->root());
        for (int id : leaf_ids(*f.tree))
            CHECK(f.tree->nodes()[static_cast<std::size_t>(id)].leaf_size() >= 1);
    }
}

TEST_CASE("retrain_dirty trains exactly the stale leaves") {
    Fixture f(small_tree(100));
    Rng rng(173);
    for (int i = 0; i < 30; ++i)
        f.add(random_unit(rng, 6), 2 * static_cast<int>(rng.uniform_int(3)));
    f.tree->retrain_dirty();

    const auto& leaf = f.tree->nodes()[static_cast<std::size_t>(f.tree->root())];
    REQUIRE(leaf.classifier.has_value());
    CHECK_FALSE(leaf.dirty);
    CHECK(leaf.classifier->class_labels == std::vector<int>{0, 2, 4});

    // No dirty leaves: retraining again is a no-op.
    auto weights = leaf.classifier->weights;
    f.tree->retrain_dirty();
    CHECK(f.tree->nodes()[static_cast<std::size_t>(f.tree->root())].classifier->weights ==
          weights);
}

TEST_CASE("batch and per-sample retraining converge to identical classifiers") {
    Rng rng(179);
    std::vector<std::pair<EmbeddingVector, int>> rows;
    std::vector<double> protoA(8, 0.0), protoB(8, 0.0);
    protoA[0] = 1.0;
    protoB[3] = 1.0;
    for (int i = 0; i < 500; ++i) {
        bool left = rng.uniform() < 0.5;
        rows.emplace_back(around(rng, left ? protoA : protoB, 0.4),
                          static_cast<int>(rng.uniform_int(3)));
    }

    TreeConfig cfg = small_tree(60, 40);
    Fixture batch(cfg), stepwise(cfg);
    for (const auto& [e, label] : rows) batch.add(e, label);
    batch.tree->retrain_dirty();
    for (const auto& [e, label] : rows) {
        stepwise.add(e, label);
        stepwise.tree->retrain_dirty();
    }

    REQUIRE(batch.tree->nodes().size() == stepwise.tree->nodes().size());
    for (std::size_t i = 0; i < batch.tree->nodes().size(); ++i) {
        const auto& a = batch.tree->nodes()[i];
        const auto& b = stepwise.tree->nodes()[i];
        CHECK(a.is_leaf == b.is_leaf);
        CHECK(a.exemplar_positions == b.exemplar_positions);
        if (a.is_leaf) {
            REQUIRE(a.classifier.has_value());
            REQUIRE(b.classifier.has_value());
            REQUIRE(a.classifier->weights.size() == b.classifier->weights.size());
            for (std::size_t j = 0; j < a.classifier->weights.size(); ++j)
                CHECK(a.classifier->weights[j] ==
                      doctest::Approx(b.classifier->weights[j]).epsilon(1e-9));
        }
    }
}

TEST_CASE("identical seeds and insertion order give identical trees") {
    Rng rng(181);
    std::vector<std::pair<EmbeddingVector, int>> rows;
    for (int i = 0; i < 300; ++i)
        rows.emplace_back(random_unit(rng, 8), static_cast<int>(rng.uniform_int(4)));

    TreeConfig cfg = small_tree(40, 30);
    cfg.seed = {12345};
    Fixture a(cfg), b(cfg);
    for (const auto& [e, label] : rows) {
        a.add(e, label);
        b.add(e, label);
    }
    a.tree->retrain_dirty();
    b.tree->retrain_dirty();

    REQUIRE(a.tree->nodes().size() == b.tree->nodes().size());
    for (std::size_t i = 0; i < a.tree->nodes().size(); ++i) {
        const auto& na = a.tree->nodes()[i];
        const auto& nb = b.tree->nodes()[i];
        CHECK(na.is_leaf == nb.is_leaf);
        CHECK(na.left == nb.left);
        CHECK(na.exemplar_positions == nb.exemplar_positions);
        if (na.classifier) CHECK(na.classifier->weights == nb.classifier->weights);
    }
}

TEST_CASE("single-leaf prediction equals the leaf classifier") {
    Fixture f(small_tree(10000));
    Rng rng(191);
    LabelTable labels;
    for (int l = 0; l < 3; ++l) labels.add("l" + std::to_string(l), random_unit(rng, 8));
    for (int i = 0; i < 60; ++i)
        f.add(random_unit(rng, 8), static_cast<int>(rng.uniform_int(3)));
    f.tree->retrain_dirty();

    const auto& clf = *f.tree->nodes()[static_cast<std::size_t>(f.tree->root())].classifier;
    for (int trial = 0; trial < 20; ++trial) {
        auto q = random_unit(rng, 8);
        auto out = f.tree->predict(labels, f.index, q);
        auto direct = clf.predict_proba(q);
        REQUIRE(out.distribution->support == direct.support);
        for (std::size_t i = 0; i < direct.probs.size(); ++i)
            CHECK(out.distribution->probs[i] ==
                  doctest::Approx(direct.probs[i]).epsilon(1e-12));
        CHECK(out.argmax_label == argmax_label(direct));
    }
}

TEST_CASE("agreeing neighbor classifiers produce that label's text embedding") {
    // Two tight blobs with distinct labels; queries near blob A retrieve only
    // blob-A neighbors whose leaf classifiers all argmax label 0.
    TreeConfig cfg = small_tree(12, 100);
    cfg.k = 5;
    Fixture f(cfg);
    Rng rng(193);
    LabelTable labels;
    labels.add("a", random_unit(rng, 8));
    labels.add("b", random_unit(rng, 8));
    std::vector<double> protoA(8, 0.0), protoB(8, 0.0);
    protoA[0] = 1.0;
    protoB[4] = 1.0;
    for (int i = 0; i < 10; ++i) f.add(around(rng, protoA, 0.05), 0);
    for (int i = 0; i < 10; ++i) f.add(around(rng, protoB, 0.05), 1);
    f.tree->retrain_dirty();

    auto q = around(rng, protoA, 0.01);
    auto out = f.tree->predict(labels, f.index, q);
    const auto& expect = labels.text_embedding(0);
    for (int i = 0; i < 8; ++i)
        CHECK(out.embedding->values[static_cast<std::size_t>(i)] ==
              doctest::Approx(expect.values[static_cast<std::size_t>(i)]).epsilon(1e-6));
}

TEST_CASE("oversized capacity makes the tree equivalent to one linear probe") {
    TreeConfig cfg = small_tree(1000000, 500);
    Fixture f(cfg);
    Rng rng(197);
    LabelTable labels;
    for (int l = 0; l < 4; ++l) labels.add("l" + std::to_string(l), random_unit(rng, 10));
    std::vector<TrainSample> samples;
    for (int i = 0; i < 200; ++i) {
        auto e = random_unit(rng, 10);
        int label = static_cast<int>(rng.uniform_int(4));
        samples.emplace_back(e, label);
        f.add(e, label);
    }
    f.tree->retrain_dirty();
    auto global = train_linear(samples, cfg.train_cfg);

    for (int trial = 0; trial < 50; ++trial) {
        auto q = random_unit(rng, 10);
        auto tree_out = f.tree->predict(labels, f.index, q);
        auto lin_out = global.predict_proba(q);
        REQUIRE(tree_out.distribution->support == lin_out.support);
        for (std::size_t i = 0; i < lin_out.probs.size(); ++i)
            CHECK(tree_out.distribution->probs[i] ==
                  doctest::Approx(lin_out.probs[i]).epsilon(1e-9));
    }
}

TEST_CASE("multi-leaf ensembles stay accurate on separable data") {
    TreeConfig cfg = small_tree(120, 300);
    cfg.k = 9;
    Fixture f(cfg);
    Rng rng(223);
    const int dim = 32, classes = 8;
    LabelTable labels;
    std::vector<std::vector<double>> protos;
    for (int c = 0; c < classes; ++c) {
        std::vector<double> p(dim);
        for (double& x : p) x = rng.gaussian();
        protos.push_back(p);
        labels.add("c" + std::to_string(c), around(rng, p, 0.05));
    }
    for (int i = 0; i < 800; ++i) {
        int c = static_cast<int>(rng.uniform_int(classes));
        f.add(around(rng, protos[static_cast<std::size_t>(c)], 0.12), c);
    }
    f.tree->retrain_dirty();
    REQUIRE(leaf_ids(*f.tree).size() >= 4);

    std::int64_t dist_ok = 0, emb_ok = 0;
    const int queries = 200;
    for (int i = 0; i < queries; ++i) {
        int c = static_cast<int>(rng.uniform_int(classes));
        auto q = around(rng, protos[static_cast<std::size_t>(c)], 0.12);
        auto out = f.tree->predict(labels, f.index, q);
        dist_ok += out.argmax_label == c;
        // The embedding output should align with the true label's text vector.
        double best = -2.0;
        int best_label = -1;
        for (int l = 0; l < classes; ++l) {
            double cosine = dot(*out.embedding, labels.text_embedding(l));
            if (cosine > best) {
                best = cosine;
                best_label = l;
            }
        }
        emb_ok += best_label == c;
    }
    CHECK(dist_ok >= queries * 9 / 10);
    CHECK(emb_ok >= queries * 9 / 10);
}

TEST_CASE("predicting against stale leaves is an error") {
    Fixture f(small_tree(100));
    Rng rng(199);
    LabelTable labels;
    labels.add("a", random_unit(rng, 4));
    f.add(random_unit(rng, 4), 0);
    CHECK_THROWS_AS(f.tree->predict(labels, f.index, random_unit(rng, 4)),
                    UntrainedLeafError);
}

TEST_CASE("the thread cap honors MEMPROBE_THREADS and keeps training deterministic") {
    Rng rng(227);
    std::vector<std::pair<EmbeddingVector, int>> rows;
    for (int i = 0; i < 120; ++i)
        rows.emplace_back(random_unit(rng, 6), static_cast<int>(rng.uniform_int(3)));

    auto run_with = [&](const char* threads) {
        if (threads)
            ::setenv("MEMPROBE_THREADS", threads, 1);
        else
            ::unsetenv("MEMPROBE_THREADS");
        TreeConfig cfg = small_tree(20, 40);
        Fixture f(cfg);
        for (const auto& [e, label] : rows) f.add(e, label);
        f.tree->retrain_dirty();
        std::vector<std::vector<double>> weights;
        for (const auto& node : f.tree->nodes())
            if (node.is_leaf) weights.push_back(node.classifier->weights);
        return weights;
    };

    ::setenv("MEMPROBE_THREADS", "1", 1);
    CHECK(max_threads() == 1);
    auto serial = run_with("1");
    auto parallel = run_with("4");
    ::unsetenv("MEMPROBE_THREADS");
    CHECK(serial == parallel);
}

TEST_CASE("dimension mismatches are rejected on insert") {
    Fixture f(small_tree(10));
    Rng rng(211);
    f.add(random_unit(rng, 4), 0);
    auto pos = f.store.append(random_unit(rng, 4), 0);
    (void)pos;
    ExemplarStore other;
    auto bad = other.append(random_unit(rng, 5), 0);
    ClusterTree tree(small_tree(10), &other);
    tree.insert(bad);
    CHECK_THROWS_AS([&] {
        ExemplarStore mixed_store;
        ClusterTree mixed(small_tree(10), &mixed_store);
        auto p4 = mixed_store.append(random_unit(rng, 4), 0);
        mixed.insert(p4);
        // Store rejects the mixed dim before the tree ever sees it.
        auto p5 = mixed_store.append(random_unit(rng, 5), 0);
        mixed.insert(p5);
    }(), DimensionMismatchError);
}

TEST_SUITE_END();
