#pragma once

// Incremental clustering tree with one linear classifier per leaf. New
// exemplars route to the nearest leaf by centroid similarity; a leaf that
// reaches capacity splits into two children by seeded 2-means. Only
// classifiers of leaves touched by an insert need retraining, so the cost of
// incorporating one exemplar is bounded by the leaf capacity and tree depth,
// not the store size. Inference ensembles the classifiers of the k nearest
// exemplars' leaves.

#include <atomic>
#include <cstdint>
#include <optional>
#include <thread>
#include <unordered_map>
#include <vector>

#include "memprobe/core.hpp"
#include "memprobe/index.hpp"
#include "memprobe/linear.hpp"

namespace memprobe {

struct TreeConfig {
    std::int64_t node_capacity_psi = 50000;
    int k = 9;
    int kmeans_max_iters = 100;
    double kmeans_tolerance = 1e-6;   // max centroid movement
    RngSeed seed = {};
    TrainConfig train_cfg = {};
};

struct TreeNode {
    int id = -1;
    int parent = -1;
    bool is_leaf = true;
    int left = -1, right = -1;                       // internal nodes
    std::vector<double> centroid_sum;                // running sum over the subtree
    std::int64_t subtree_count = 0;
    std::vector<std::int64_t> exemplar_positions;    // leaves
    std::optional<LinearClassifier> classifier;      // leaves
    bool dirty = false;                              // classifier stale

    /// Unit-normalized subtree mean, as used for routing.
    std::vector<double> routing_centroid() const {
        double norm = l2_norm(std::span<const double>(centroid_sum));
        std::vector<double> c(centroid_sum.size(), 0.0);
        if (norm >= 1e-12)
            for (std::size_t i = 0; i < c.size(); ++i) c[i] = centroid_sum[i] / norm;
        return c;
    }

    std::int64_t leaf_size() const {
        return static_cast<std::int64_t>(exemplar_positions.size());
    }
};

/// Raw tree state as carried by snapshot files.
struct TreeSnapshot {
    int root = -1;
    int dim = 0;
    std::int64_t inserted = 0;
    std::vector<TreeNode> nodes;
};

class ClusterTree {
public:
    ClusterTree(TreeConfig config, const ExemplarStore* store)
        : config_(std::move(config)), store_(store) {
        if (config_.node_capacity_psi < 2 || config_.k < 1)
            throw InvalidConfigError("tree: psi must be >= 2 and k >= 1");
    }

    /// Rebuilds a tree from snapshot state; the leaf map is derived from the
    /// leaves' membership lists.
    static ClusterTree restore(TreeConfig config, const ExemplarStore* store,
                               TreeSnapshot snapshot) {
        ClusterTree tree(std::move(config), store);
        tree.root_ = snapshot.root;
        tree.dim_ = snapshot.dim;
        tree.inserted_count_ = snapshot.inserted;
        tree.nodes_ = std::move(snapshot.nodes);
        for (const auto& node : tree.nodes_)
            if (node.is_leaf)
                for (std::int64_t pos : node.exemplar_positions)
                    tree.leaf_of_[pos] = node.id;
        return tree;
    }

    const TreeConfig& config() const { return config_; }
    const std::vector<TreeNode>& nodes() const { return nodes_; }
    int root() const { return root_; }
    bool empty() const { return nodes_.empty(); }
    std::int64_t inserted_count() const { return inserted_count_; }

    int leaf_node_of(std::int64_t position) const {
        auto it = leaf_of_.find(position);
        if (it == leaf_of_.end())
            throw Error("position not in tree: " + std::to_string(position));
        return it->second;
    }

    /// Descends from the root, at each internal node picking the child whose
    /// centroid has the larger dot product with v (ties go left).
    int nearest_leaf(const EmbeddingVector& v) const {
        if (nodes_.empty()) throw EmptyTreeError("nearest_leaf: empty tree");
        return descend(root_, v);
    }

    /// Inserts the exemplar stored at `position`. Splits the target leaf
    /// first when it is at capacity. The touched leaf is marked dirty.
    void insert(std::int64_t position) {
        const Exemplar& e = store_->get(position);
        if (dim_ == 0) dim_ = e.image_embedding.dim();
        if (e.image_embedding.dim() != dim_)
            throw DimensionMismatchError("tree dim " + std::to_string(dim_) + ", exemplar dim " +
                                         std::to_string(e.image_embedding.dim()));

        if (nodes_.empty()) {
            root_ = new_node(-1);
            attach(root_, position);
            return;
        }
        int leaf = descend(root_, e.image_embedding);
        if (nodes_[static_cast<std::size_t>(leaf)].leaf_size() >= config_.node_capacity_psi) {
            split_node(leaf);
            leaf = descend(leaf, e.image_embedding);
        }
        attach(leaf, position);
    }

    /// Splits a full leaf into two children by 2-means (k-means++ seeding
    /// from the tree seed mixed with the node id). Identical points split
    /// into halves; an empty cluster is repaired by reassigning the point
    /// farthest from the non-empty centroid. Both children end non-empty.
    void split_node(int leaf_id) {
        TreeNode& leaf = nodes_.at(static_cast<std::size_t>(leaf_id));
        if (!leaf.is_leaf) throw Error("split_node: not a leaf");
        const auto positions = leaf.exemplar_positions;
        const std::size_t n = positions.size();
        if (n < 2) throw Error("split_node: needs at least two exemplars");

        std::vector<const float*> rows(n);
        for (std::size_t i = 0; i < n; ++i)
            rows[i] = store_->get(positions[i]).image_embedding.values.data();
        const int d = dim_;

        std::vector<int> assign(n, 0);
        bool identical = true;
        for (std::size_t i = 1; i < n && identical; ++i)
            identical = std::equal(rows[i], rows[i] + d, rows[0]);
        if (identical) {
            std::size_t half = (n + 1) / 2;
            for (std::size_t i = half; i < n; ++i) assign[i] = 1;
        } else {
            assign = two_means(rows, d, leaf_id);
        }

        int left = new_node(leaf_id);
        int right = new_node(leaf_id);
        TreeNode& parent = nodes_[static_cast<std::size_t>(leaf_id)];
        parent.is_leaf = false;
        parent.left = left;
        parent.right = right;
        parent.exemplar_positions.clear();
        parent.classifier.reset();
        parent.dirty = false;

        for (std::size_t i = 0; i < n; ++i) {
            int child = assign[i] == 0 ? left : right;
            TreeNode& node = nodes_[static_cast<std::size_t>(child)];
            node.exemplar_positions.push_back(positions[i]);
            node.subtree_count += 1;
            for (int j = 0; j < d; ++j)
                node.centroid_sum[static_cast<std::size_t>(j)] +=
                    static_cast<double>(rows[i][j]);
            leaf_of_[positions[i]] = child;
        }
        nodes_[static_cast<std::size_t>(left)].dirty = true;
        nodes_[static_cast<std::size_t>(right)].dirty = true;
    }

    /// Trains a classifier for every dirty leaf on exactly its current
    /// exemplars, in parallel up to the thread cap. No dirty leaves, no work.
    void retrain_dirty() {
        std::vector<int> dirty;
        for (const auto& node : nodes_)
            if (node.is_leaf && node.dirty && !node.exemplar_positions.empty())
                dirty.push_back(node.id);
        if (dirty.empty()) return;

        int threads = std::min<int>(max_threads(), static_cast<int>(dirty.size()));
        std::atomic<std::size_t> next{0};
        std::vector<std::pair<int, std::string>> failures(dirty.size(), {-1, {}});
        auto worker = [&] {
            for (std::size_t i = next.fetch_add(1); i < dirty.size();
                 i = next.fetch_add(1)) {
                int id = dirty[i];
                try {
                    train_leaf(id);
                } catch (const std::exception& e) {
                    failures[i] = {id, e.what()};
                }
            }
        };
        if (threads <= 1) {
            worker();
        } else {
            std::vector<std::thread> pool;
            for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
            for (auto& t : pool) t.join();
        }
        for (const auto& [id, what] : failures)
            if (id >= 0)
                throw Error("retrain_dirty: leaf " + std::to_string(id) + ": " + what);
    }

    /// Ensembles the leaf classifiers of the k nearest exemplars: the mean of
    /// their distributions zero-extended to the union of exemplar labels, and
    /// the similarity-weighted blend of their argmax labels' text embeddings.
    PredictionOutput predict(const LabelTable& labels, const FlatIndex& index,
                             const EmbeddingVector& q, double temperature = 100.0) const {
        if (nodes_.empty() || inserted_count_ == 0)
            throw EmptyTreeError("tree_predict: empty tree");
        int k = static_cast<int>(
            std::min<std::int64_t>(config_.k, inserted_count_));
        auto retrieved = index.search_topk(q, k);

        std::vector<int> support = store_->covered_labels();
        std::unordered_map<int, std::size_t> slot;
        for (std::size_t i = 0; i < support.size(); ++i) slot[support[i]] = i;
        std::vector<double> acc(support.size(), 0.0);

        std::vector<double> logits(retrieved.neighbors.size());
        std::vector<int> top_labels(retrieved.neighbors.size());
        for (std::size_t j = 0; j < retrieved.neighbors.size(); ++j) {
            const auto& nb = retrieved.neighbors[j];
            const TreeNode& leaf = nodes_.at(static_cast<std::size_t>(leaf_node_of(nb.position)));
            if (leaf.dirty || !leaf.classifier)
                throw UntrainedLeafError("tree_predict: leaf " + std::to_string(leaf.id) +
                                         " has a stale classifier");
            auto dist = leaf.classifier->predict_proba(q);
            for (std::size_t i = 0; i < dist.support.size(); ++i)
                acc[slot.at(dist.support[i])] += dist.probs[i];
            top_labels[j] = argmax_label(dist);
            logits[j] = temperature * nb.similarity;
        }

        double total = 0.0;
        for (double& p : acc) {
            p /= static_cast<double>(retrieved.neighbors.size());
            total += p;
        }
        for (double& p : acc) p /= total;

        auto betas = softmax(logits);
        std::vector<double> blend(static_cast<std::size_t>(dim_), 0.0);
        for (std::size_t j = 0; j < top_labels.size(); ++j) {
            const auto& text = labels.text_embedding(top_labels[j]);
            for (int i = 0; i < dim_; ++i)
                blend[static_cast<std::size_t>(i)] +=
                    betas[j] * static_cast<double>(text.values[static_cast<std::size_t>(i)]);
        }

        PredictionOutput out;
        out.distribution = ProbabilityDistribution{std::move(support), std::move(acc), false};
        out.embedding = normalize(std::span<const double>(blend));
        out.argmax_label = argmax_label(*out.distribution);
        return out;
    }

private:
    int new_node(int parent) {
        TreeNode node;
        node.id = static_cast<int>(nodes_.size());
        node.parent = parent;
        node.centroid_sum.assign(static_cast<std::size_t>(dim_), 0.0);
        nodes_.push_back(std::move(node));
        return nodes_.back().id;
    }

    int descend(int from, const EmbeddingVector& v) const {
        int cur = from;
        while (!nodes_[static_cast<std::size_t>(cur)].is_leaf) {
            const TreeNode& node = nodes_[static_cast<std::size_t>(cur)];
            double left_score = routing_score(node.left, v);
            double right_score = routing_score(node.right, v);
            cur = right_score > left_score ? node.right : node.left;
        }
        return cur;
    }

    double routing_score(int node_id, const EmbeddingVector& v) const {
        const TreeNode& node = nodes_[static_cast<std::size_t>(node_id)];
        double norm = l2_norm(std::span<const double>(node.centroid_sum));
        if (norm < 1e-12) return -1.0;
        double acc = 0.0;
        for (std::size_t i = 0; i < node.centroid_sum.size(); ++i)
            acc += node.centroid_sum[i] * static_cast<double>(v.values[i]);
        return acc / norm;
    }

    void attach(int leaf_id, std::int64_t position) {
        const EmbeddingVector& v = store_->get(position).image_embedding;
        TreeNode& leaf = nodes_[static_cast<std::size_t>(leaf_id)];
        leaf.exemplar_positions.push_back(position);
        leaf.dirty = true;
        leaf_of_[position] = leaf_id;
        for (int cur = leaf_id; cur != -1; cur = nodes_[static_cast<std::size_t>(cur)].parent) {
            TreeNode& node = nodes_[static_cast<std::size_t>(cur)];
            node.subtree_count += 1;
            for (int j = 0; j < dim_; ++j)
                node.centroid_sum[static_cast<std::size_t>(j)] +=
                    static_cast<double>(v.values[static_cast<std::size_t>(j)]);
        }
        inserted_count_ += 1;
    }

    void train_leaf(int leaf_id) {
        TreeNode& leaf = nodes_[static_cast<std::size_t>(leaf_id)];
        std::vector<TrainSample> samples;
        samples.reserve(leaf.exemplar_positions.size());
        for (std::int64_t pos : leaf.exemplar_positions) {
            const Exemplar& e = store_->get(pos);
            samples.emplace_back(e.image_embedding, e.label_id);
        }
        leaf.classifier = train_linear(samples, config_.train_cfg);
        leaf.dirty = false;
    }

    /// Lloyd's algorithm with k-means++ seeding, two clusters, squared
    /// euclidean distance. Deterministic given the tree seed and node id.
    std::vector<int> two_means(const std::vector<const float*>& rows, int d,
                               int node_id) const {
        const std::size_t n = rows.size();
        Rng rng(mix64(config_.seed.value, static_cast<std::uint64_t>(node_id)));

        auto sqdist = [d](const float* a, const double* c) {
            double acc = 0.0;
            for (int j = 0; j < d; ++j) {
                double diff = static_cast<double>(a[j]) - c[j];
                acc += diff * diff;
            }
            return acc;
        };

        // k-means++: first center uniform, second by squared-distance weight.
        std::vector<double> c0(static_cast<std::size_t>(d)), c1(static_cast<std::size_t>(d));
        std::size_t first = rng.uniform_int(n);
        for (int j = 0; j < d; ++j) c0[static_cast<std::size_t>(j)] = rows[first][j];
        std::vector<double> weight(n);
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            weight[i] = sqdist(rows[i], c0.data());
            total += weight[i];
        }
        double pick = rng.uniform() * total;
        std::size_t second = n - 1;
        double running = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            running += weight[i];
            if (pick < running) {
                second = i;
                break;
            }
        }
        for (int j = 0; j < d; ++j) c1[static_cast<std::size_t>(j)] = rows[second][j];

        std::vector<int> assign(n, 0);
        for (int iter = 0; iter < config_.kmeans_max_iters; ++iter) {
            std::vector<std::size_t> counts(2, 0);
            for (std::size_t i = 0; i < n; ++i) {
                double d0 = sqdist(rows[i], c0.data());
                double d1 = sqdist(rows[i], c1.data());
                assign[i] = d1 < d0 ? 1 : 0;
                counts[static_cast<std::size_t>(assign[i])] += 1;
            }
            for (int cluster = 0; cluster < 2; ++cluster) {
                if (counts[static_cast<std::size_t>(cluster)] > 0) continue;
                const double* other = cluster == 0 ? c1.data() : c0.data();
                std::size_t farthest = 0;
                double best = -1.0;
                for (std::size_t i = 0; i < n; ++i) {
                    double dist = sqdist(rows[i], other);
                    if (dist > best) {
                        best = dist;
                        farthest = i;
                    }
                }
                assign[farthest] = cluster;
                counts[static_cast<std::size_t>(cluster)] = 1;
                counts[static_cast<std::size_t>(1 - cluster)] -= 1;
            }

            std::vector<double> m0(static_cast<std::size_t>(d), 0.0);
            std::vector<double> m1(static_cast<std::size_t>(d), 0.0);
            std::size_t n0 = 0, n1 = 0;
            for (std::size_t i = 0; i < n; ++i) {
                double* m = assign[i] == 0 ? m0.data() : m1.data();
                (assign[i] == 0 ? n0 : n1) += 1;
                for (int j = 0; j < d; ++j) m[j] += static_cast<double>(rows[i][j]);
            }
            for (int j = 0; j < d; ++j) {
                m0[static_cast<std::size_t>(j)] /= static_cast<double>(n0);
                m1[static_cast<std::size_t>(j)] /= static_cast<double>(n1);
            }
            double shift0 = 0.0, shift1 = 0.0;
            for (int j = 0; j < d; ++j) {
                double u0 = m0[static_cast<std::size_t>(j)] - c0[static_cast<std::size_t>(j)];
                double u1 = m1[static_cast<std::size_t>(j)] - c1[static_cast<std::size_t>(j)];
                shift0 += u0 * u0;
                shift1 += u1 * u1;
            }
            c0.swap(m0);
            c1.swap(m1);
            if (std::max(std::sqrt(shift0), std::sqrt(shift1)) < config_.kmeans_tolerance)
                break;
        }
        return assign;
    }

    TreeConfig config_;
    const ExemplarStore* store_ = nullptr;
    std::vector<TreeNode> nodes_;
    int root_ = -1;
    int dim_ = 0;
    std::int64_t inserted_count_ = 0;
    std::unordered_map<std::int64_t, int> leaf_of_;
};

}  // namespace memprobe
