#pragma once

// Continual-learning harness: synthetic embedding generation, the three
// incremental scenarios (data / class / task), flexible-inference protocols,
// the Transfer/Avg/Last metrics, and the single-exemplar insertion-latency
// benchmark. All sampling flows from one run seed, so identical seeds give
// identical plans and reports apart from wall-clock fields.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "memprobe/core.hpp"
#include "memprobe/fusion.hpp"
#include "memprobe/index.hpp"
#include "memprobe/knn.hpp"
#include "memprobe/linear.hpp"
#include "memprobe/treeprobe.hpp"

namespace memprobe {

// ---------------------------------------------------------------------------
// Tasks and scenario plans

struct TaskDataset {
    std::string name;
    std::vector<int> label_ids;        // candidate labels, global ids
    std::vector<Exemplar> train;       // empty for zero-shot tasks
    std::vector<Exemplar> test;
};

/// A run's full data: one dense vocabulary shared by all tasks.
struct TaskBundle {
    LabelTable labels;
    std::vector<TaskDataset> targets;
    std::vector<TaskDataset> zeroshot;
};

/// Moves src's tasks into dst, remapping label ids into dst's vocabulary.
inline void append_bundle(TaskBundle& dst, TaskBundle src, bool as_zeroshot) {
    const int offset = dst.labels.size();
    for (auto& entry : src.labels.entries)
        dst.labels.add(std::move(entry.text), std::move(entry.text_embedding));
    auto remap = [offset](TaskDataset& task) {
        for (int& id : task.label_ids) id += offset;
        for (auto& e : task.train) e.label_id += offset;
        for (auto& e : task.test) e.label_id += offset;
    };
    for (auto& task : src.targets) {
        remap(task);
        (as_zeroshot ? dst.zeroshot : dst.targets).push_back(std::move(task));
    }
    for (auto& task : src.zeroshot) {
        remap(task);
        dst.zeroshot.push_back(std::move(task));
    }
}

enum class ScenarioKind { DataIncremental, ClassIncremental, TaskIncremental };
enum class Method { ZeroShot, Knn, LinProbe, TreeProbe };

struct StageArrival {
    int task = 0;             // index into bundle.targets
    std::int64_t row = 0;     // index into that task's train split
};

struct StageSpec {
    std::vector<StageArrival> arrivals;   // new exemplars for this stage
};

/// Stages are deltas; the cumulative training set of stage i is the
/// concatenation of arrivals 0..i, so stage sets are nested by construction.
struct ScenarioPlan {
    ScenarioKind kind = ScenarioKind::DataIncremental;
    std::vector<StageSpec> stages;
    RngSeed seed = {};
};

inline constexpr double kDataIncrementalFractions[7] = {0.02, 0.04, 0.08,
                                                        0.16, 0.32, 0.64, 1.00};
inline constexpr int kClassIncrementalStages = 5;

/// Builds the arrival schedule for one scenario. Data-incremental stages take
/// growing random fractions of each task's training data (no class
/// balancing); class-incremental stages add 20% of each task's classes at a
/// time; task-incremental stages add whole tasks in order.
inline ScenarioPlan plan_scenario(const TaskBundle& bundle, ScenarioKind kind,
                                  RngSeed seed) {
    if (bundle.targets.empty())
        throw InvalidPlanError("plan_scenario: at least one target task required");

    ScenarioPlan plan;
    plan.kind = kind;
    plan.seed = seed;

    switch (kind) {
        case ScenarioKind::DataIncremental: {
            plan.stages.resize(7);
            for (std::size_t t = 0; t < bundle.targets.size(); ++t) {
                const auto n =
                    static_cast<std::int64_t>(bundle.targets[t].train.size());
                if (n == 0) continue;
                std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
                std::iota(perm.begin(), perm.end(), 0);
                Rng rng(mix64(seed.value, 0x0d00 + t));
                rng.shuffle(perm);
                std::int64_t prev = 0;
                for (int s = 0; s < 7; ++s) {
                    auto size = static_cast<std::int64_t>(
                        std::llround(kDataIncrementalFractions[s] * static_cast<double>(n)));
                    size = std::clamp<std::int64_t>(size, std::min<std::int64_t>(1, n), n);
                    if (s == 6) size = n;
                    size = std::max(size, prev);
                    for (std::int64_t i = prev; i < size; ++i)
                        plan.stages[static_cast<std::size_t>(s)].arrivals.push_back(
                            {static_cast<int>(t), perm[static_cast<std::size_t>(i)]});
                    prev = size;
                }
            }
            break;
        }
        case ScenarioKind::ClassIncremental: {
            plan.stages.resize(kClassIncrementalStages);
            for (std::size_t t = 0; t < bundle.targets.size(); ++t) {
                const auto& task = bundle.targets[t];
                std::vector<int> order = task.label_ids;
                Rng rng(mix64(seed.value, 0x0c00 + t));
                rng.shuffle(order);
                const auto c = static_cast<std::int64_t>(order.size());
                std::int64_t prev = 0;
                for (int s = 0; s < kClassIncrementalStages; ++s) {
                    std::int64_t upto = c * (s + 1) / kClassIncrementalStages;
                    std::set<int> stage_classes(order.begin() + prev, order.begin() + upto);
                    prev = upto;
                    for (std::size_t row = 0; row < task.train.size(); ++row)
                        if (stage_classes.count(task.train[row].label_id))
                            plan.stages[static_cast<std::size_t>(s)].arrivals.push_back(
                                {static_cast<int>(t), static_cast<std::int64_t>(row)});
                }
            }
            break;
        }
        case ScenarioKind::TaskIncremental: {
            if (bundle.targets.size() < 2)
                throw InvalidPlanError("task-incremental needs at least two tasks");
            plan.stages.resize(bundle.targets.size());
            for (std::size_t t = 0; t < bundle.targets.size(); ++t)
                for (std::size_t row = 0; row < bundle.targets[t].train.size(); ++row)
                    plan.stages[t].arrivals.push_back(
                        {static_cast<int>(t), static_cast<std::int64_t>(row)});
            break;
        }
    }
    return plan;
}

// ---------------------------------------------------------------------------
// Synthetic data

/// Desk-scale stand-in for real embedding dumps: class prototypes drawn
/// uniformly on the unit sphere, image embeddings as noisy prototypes, text
/// embeddings as differently-noised prototypes (the modality gap).
struct SynthConfig {
    int dim = 64;
    int classes = 20;
    int per_class_train = 100;
    int per_class_test = 20;
    double intra_class_sigma = 0.35;
    double text_offset_sigma = 0.10;
    RngSeed seed = {};
};

inline TaskBundle gen_synthetic(const SynthConfig& cfg, const std::string& name = "synth") {
    if (cfg.dim <= 0 || cfg.classes <= 0 || cfg.per_class_train < 0 ||
        cfg.per_class_test < 0 || cfg.intra_class_sigma < 0.0 ||
        cfg.text_offset_sigma < 0.0)
        throw InvalidConfigError("gen_synthetic: invalid config");

    const auto d = static_cast<std::size_t>(cfg.dim);
    std::vector<std::vector<double>> protos(static_cast<std::size_t>(cfg.classes));
    Rng proto_rng(mix64(cfg.seed.value, 1));
    for (auto& p : protos) {
        p.resize(d);
        for (double& x : p) x = proto_rng.gaussian();
        double norm = l2_norm(std::span<const double>(p));
        if (norm < 1e-12) { p[0] = 1.0; norm = 1.0; }
        for (double& x : p) x /= norm;
    }

    auto noisy = [&](const std::vector<double>& proto, double sigma, Rng& rng) {
        std::vector<double> v(d);
        for (std::size_t i = 0; i < d; ++i) v[i] = proto[i] + sigma * rng.gaussian();
        return normalize(std::span<const double>(v));
    };

    TaskBundle bundle;
    TaskDataset task;
    task.name = name;

    Rng text_rng(mix64(cfg.seed.value, 2));
    for (int c = 0; c < cfg.classes; ++c) {
        int id = bundle.labels.add(name + "/class-" + std::to_string(c),
                                   noisy(protos[static_cast<std::size_t>(c)],
                                         cfg.text_offset_sigma, text_rng));
        task.label_ids.push_back(id);
    }

    Rng train_rng(mix64(cfg.seed.value, 3));
    for (int c = 0; c < cfg.classes; ++c)
        for (int i = 0; i < cfg.per_class_train; ++i)
            task.train.push_back({static_cast<std::int64_t>(task.train.size()),
                                  noisy(protos[static_cast<std::size_t>(c)],
                                        cfg.intra_class_sigma, train_rng),
                                  c});
    Rng test_rng(mix64(cfg.seed.value, 4));
    for (int c = 0; c < cfg.classes; ++c)
        for (int i = 0; i < cfg.per_class_test; ++i)
            task.test.push_back({static_cast<std::int64_t>(task.test.size()),
                                 noisy(protos[static_cast<std::size_t>(c)],
                                       cfg.intra_class_sigma, test_rng),
                                 c});

    bundle.targets.push_back(std::move(task));
    return bundle;
}

// ---------------------------------------------------------------------------
// Learner: one exemplar model behind a uniform ingest/train/predict surface

struct RunParams {
    Method method = Method::TreeProbe;
    FusionConfig fusion = {};
    KnnConfig knn = {};
    TrainConfig train = {};
    ZeroShotConfig zeroshot = {};
    std::int64_t psi = 50000;
    int k = 9;
    int kmeans_max_iters = 100;
    double kmeans_tolerance = 1e-6;
    RngSeed seed = {};
};

class Learner {
public:
    explicit Learner(const RunParams& params)
        : params_(params), store_(std::make_unique<ExemplarStore>()) {
        if (params_.method == Method::TreeProbe)
            tree_.emplace(tree_config(params_), store_.get());
    }

    /// Rebuilds a learner from snapshot state. The index is derived from the
    /// store; tree state, when present, is restored verbatim.
    static Learner restore(const RunParams& params, std::vector<Exemplar> exemplars,
                           std::optional<LinearClassifier> global,
                           std::optional<TreeSnapshot> tree_snapshot) {
        Learner learner(params);
        learner.tree_.reset();
        for (auto& e : exemplars) {
            auto position = learner.store_->append(std::move(e.image_embedding), e.label_id);
            learner.index_.add(learner.store_->get(position));
        }
        learner.global_ = std::move(global);
        if (tree_snapshot)
            learner.tree_ = ClusterTree::restore(tree_config(params), learner.store_.get(),
                                                 std::move(*tree_snapshot));
        return learner;
    }

    const RunParams& params() const { return params_; }
    const ExemplarStore& store() const { return *store_; }
    const FlatIndex& index() const { return index_; }
    const ClusterTree* tree() const { return tree_ ? &*tree_ : nullptr; }
    const LinearClassifier* global_classifier() const {
        return global_ ? &*global_ : nullptr;
    }

    void reserve(std::size_t n) { index_.reserve(n); }

    /// Stores one exemplar (no retraining). ZeroShot discards it.
    void ingest(const EmbeddingVector& embedding, int label_id) {
        if (params_.method == Method::ZeroShot) return;
        auto position = store_->append(embedding, label_id);
        index_.add(store_->get(position));
        if (tree_) tree_->insert(position);
    }

    /// Brings classifiers up to date with the store: LinProbe retrains on all
    /// accumulated exemplars, TreeProbe retrains dirty leaves only.
    void train() {
        if (params_.method == Method::LinProbe && !store_->empty()) {
            std::vector<TrainSample> samples;
            samples.reserve(store_->size());
            for (std::size_t i = 0; i < store_->size(); ++i) {
                const Exemplar& e = store_->get(static_cast<std::int64_t>(i));
                samples.emplace_back(e.image_embedding, e.label_id);
            }
            global_ = train_linear(samples, params_.train);
        } else if (tree_) {
            tree_->retrain_dirty();
        }
    }

    /// Exemplar-model outputs over its own label space (empty for ZeroShot).
    PredictionOutput exemplar_predict(const LabelTable& labels,
                                      const EmbeddingVector& q) const {
        PredictionOutput out;
        switch (params_.method) {
            case Method::ZeroShot:
                break;
            case Method::Knn: {
                KnnConfig cfg = params_.knn;
                cfg.k = params_.k;
                out.distribution = knn_predict_proba(*store_, index_, q, cfg);
                out.embedding = knn_predict_embedding(*store_, labels, index_, q, cfg);
                out.argmax_label = argmax_label(*out.distribution);
                break;
            }
            case Method::LinProbe: {
                if (!global_) throw Error("LinProbe classifier not trained");
                out.distribution = global_->predict_proba(q);
                out.argmax_label = argmax_label(*out.distribution);
                out.embedding = labels.text_embedding(out.argmax_label);
                break;
            }
            case Method::TreeProbe:
                if (!tree_) throw EmptyTreeError("TreeProbe learner has no tree state");
                out = tree_->predict(labels, index_, q, params_.knn.temperature);
                break;
        }
        return out;
    }

private:
    static TreeConfig tree_config(const RunParams& params) {
        TreeConfig cfg;
        cfg.node_capacity_psi = params.psi;
        cfg.k = params.k;
        cfg.kmeans_max_iters = params.kmeans_max_iters;
        cfg.kmeans_tolerance = params.kmeans_tolerance;
        cfg.seed = params.seed;
        cfg.train_cfg = params.train;
        return cfg;
    }

    RunParams params_;
    std::unique_ptr<ExemplarStore> store_;   // stable address across moves
    FlatIndex index_;
    std::optional<ClusterTree> tree_;
    std::optional<LinearClassifier> global_;
};

// ---------------------------------------------------------------------------
// Evaluation

/// Final label for one query under the configured fusion rule. Before any
/// exemplar arrives (or for the ZeroShot method) this is the zero-shot
/// prediction.
inline int classify_sample(const LabelTable& labels, const Learner& learner,
                           const EmbeddingVector& q, const CandidateSet& cand,
                           const std::set<int>& covered) {
    const RunParams& params = learner.params();
    FusionMode mode = params.method == Method::ZeroShot ? FusionMode::ZeroShotOnly
                                                        : params.fusion.mode;
    if (mode == FusionMode::ZeroShotOnly || learner.store().empty())
        return argmax_label(zeroshot_proba(q, cand, params.zeroshot));

    PredictionOutput exemplar = learner.exemplar_predict(labels, q);
    FusionConfig fusion = params.fusion;
    fusion.mode = mode;

    switch (mode) {
        case FusionMode::ExemplarOnly:
        case FusionMode::AvgEmb:
        case FusionMode::AimEmb: {
            double w = mode == FusionMode::AimEmb
                           ? coverage_probability(q, cand, covered, fusion, params.zeroshot)
                           : 0.0;
            return fuse_embedding(*exemplar.embedding, q, w, cand, fusion,
                                  params.zeroshot)
                .argmax_label;
        }
        case FusionMode::AvgProb:
        case FusionMode::AimProb: {
            auto p_z = zeroshot_proba(q, cand, params.zeroshot);
            auto p_e = restrict_renormalize(*exemplar.distribution, cand.label_ids);
            if (p_e.empty()) return argmax_label(p_z);   // exemplar model abstains
            double w = mode == FusionMode::AimProb
                           ? coverage_probability(q, cand, covered, fusion, params.zeroshot)
                           : 0.0;
            return argmax_label(fuse_prob(p_z, p_e, w, fusion));
        }
        default:
            throw InvalidConfigError("classify_sample: unsupported fusion mode");
    }
}

struct TaskResult {
    std::string name;
    bool zeroshot_task = false;
    double accuracy = 0.0;
    double covered_fraction = 0.0;
    std::optional<double> seen_accuracy;     // class-incremental targets
    std::optional<double> unseen_accuracy;
};

struct StageReport {
    int stage_index = 0;
    std::vector<TaskResult> tasks;
    double target_avg = 0.0;
    std::optional<double> zeroshot_avg;
    std::optional<double> seen_acc;
    std::optional<double> unseen_acc;
    double insert_ms = 0.0;
    double train_ms = 0.0;
};

namespace detail {

inline TaskResult evaluate_task(const LabelTable& labels, const Learner& learner,
                                const TaskDataset& task, bool zeroshot_task,
                                const std::set<int>& covered, bool split_seen_unseen) {
    TaskResult result;
    result.name = task.name;
    result.zeroshot_task = zeroshot_task;

    CandidateSet cand{task.label_ids, &labels};
    std::int64_t correct = 0, seen_correct = 0, seen_total = 0;
    std::int64_t unseen_correct = 0, unseen_total = 0;
    for (const Exemplar& sample : task.test) {
        int predicted =
            classify_sample(labels, learner, sample.image_embedding, cand, covered);
        bool hit = predicted == sample.label_id;
        correct += hit;
        if (covered.count(sample.label_id)) {
            seen_total += 1;
            seen_correct += hit;
        } else {
            unseen_total += 1;
            unseen_correct += hit;
        }
    }
    if (!task.test.empty())
        result.accuracy = static_cast<double>(correct) /
                          static_cast<double>(task.test.size());
    std::size_t covered_candidates = 0;
    for (int id : task.label_ids) covered_candidates += covered.count(id);
    if (!task.label_ids.empty())
        result.covered_fraction = static_cast<double>(covered_candidates) /
                                  static_cast<double>(task.label_ids.size());
    if (split_seen_unseen && !zeroshot_task) {
        if (seen_total > 0)
            result.seen_accuracy =
                static_cast<double>(seen_correct) / static_cast<double>(seen_total);
        if (unseen_total > 0)
            result.unseen_accuracy =
                static_cast<double>(unseen_correct) / static_cast<double>(unseen_total);
    }
    return result;
}

}  // namespace detail

/// Runs one scenario end to end, appending StageReports as stages finish so a
/// failing stage leaves the completed prefix intact. Pass `keep` to receive
/// the trained learner (for flexible-inference evaluation).
inline void run_scenario(const TaskBundle& bundle, const ScenarioPlan& plan,
                         const RunParams& params, std::vector<StageReport>& reports,
                         Learner* keep = nullptr) {
    using clock = std::chrono::steady_clock;
    Learner learner(params);

    for (std::size_t s = 0; s < plan.stages.size(); ++s) {
        auto t0 = clock::now();
        for (const StageArrival& a : plan.stages[s].arrivals) {
            const Exemplar& e =
                bundle.targets.at(static_cast<std::size_t>(a.task))
                    .train.at(static_cast<std::size_t>(a.row));
            learner.ingest(e.image_embedding, e.label_id);
        }
        auto t1 = clock::now();
        learner.train();
        auto t2 = clock::now();

        auto covered_vec = learner.store().covered_labels();
        std::set<int> covered(covered_vec.begin(), covered_vec.end());
        bool split = plan.kind == ScenarioKind::ClassIncremental;

        StageReport report;
        report.stage_index = static_cast<int>(s);
        report.insert_ms =
            std::chrono::duration<double, std::milli>(t1 - t0).count();
        report.train_ms = std::chrono::duration<double, std::milli>(t2 - t1).count();

        double target_sum = 0.0, zs_sum = 0.0, seen_sum = 0.0, unseen_sum = 0.0;
        int seen_n = 0, unseen_n = 0;
        for (const auto& task : bundle.targets) {
            auto r = detail::evaluate_task(bundle.labels, learner, task, false, covered, split);
            target_sum += r.accuracy;
            if (r.seen_accuracy) { seen_sum += *r.seen_accuracy; seen_n += 1; }
            if (r.unseen_accuracy) { unseen_sum += *r.unseen_accuracy; unseen_n += 1; }
            report.tasks.push_back(std::move(r));
        }
        for (const auto& task : bundle.zeroshot) {
            auto r = detail::evaluate_task(bundle.labels, learner, task, true, covered, false);
            zs_sum += r.accuracy;
            report.tasks.push_back(std::move(r));
        }
        report.target_avg = target_sum / static_cast<double>(bundle.targets.size());
        if (!bundle.zeroshot.empty())
            report.zeroshot_avg = zs_sum / static_cast<double>(bundle.zeroshot.size());
        if (seen_n > 0) report.seen_acc = seen_sum / seen_n;
        if (unseen_n > 0) report.unseen_acc = unseen_sum / unseen_n;
        reports.push_back(std::move(report));
    }
    if (keep) *keep = std::move(learner);
}

// ---------------------------------------------------------------------------
// Flexible inference

enum class FlexProtocol { ZeroShot, UnionZeroShot, MixZeroShot };

struct FlexReport {
    FlexProtocol protocol = FlexProtocol::ZeroShot;
    double accuracy = 0.0;
    std::optional<double> target_accuracy;
    std::optional<double> zeroshot_accuracy;
    std::vector<double> split_accuracies;   // MixZeroShot
    int candidate_count = 0;
};

namespace detail {

inline std::vector<int> union_of_labels(const std::vector<TaskDataset>& tasks) {
    std::set<int> ids;
    for (const auto& t : tasks) ids.insert(t.label_ids.begin(), t.label_ids.end());
    return {ids.begin(), ids.end()};
}

/// Deterministic sample of up to `want` labels; smaller pools are used whole.
inline std::vector<int> sample_labels(std::vector<int> pool, std::size_t want, Rng& rng) {
    rng.shuffle(pool);
    if (pool.size() > want) pool.resize(want);
    std::sort(pool.begin(), pool.end());
    return pool;
}

}  // namespace detail

/// Evaluates a trained learner under one flexible-inference protocol.
inline FlexReport flexible_inference_eval(const TaskBundle& bundle,
                                          const Learner& learner,
                                          FlexProtocol protocol, RngSeed seed) {
    FlexReport report;
    report.protocol = protocol;
    auto covered_vec = learner.store().covered_labels();
    std::set<int> covered(covered_vec.begin(), covered_vec.end());

    auto task_accuracy = [&](const TaskDataset& task, const std::vector<int>& cand_ids,
                             const std::set<int>& eligible,
                             std::int64_t per_class_cap) -> std::optional<double> {
        CandidateSet cand{cand_ids, &bundle.labels};
        std::map<int, std::int64_t> used;
        std::int64_t correct = 0, total = 0;
        for (const Exemplar& sample : task.test) {
            if (!eligible.count(sample.label_id)) continue;
            if (per_class_cap > 0 && used[sample.label_id] >= per_class_cap) continue;
            used[sample.label_id] += 1;
            total += 1;
            correct += classify_sample(bundle.labels, learner, sample.image_embedding,
                                       cand, covered) == sample.label_id;
        }
        if (total == 0) return std::nullopt;
        return static_cast<double>(correct) / static_cast<double>(total);
    };

    switch (protocol) {
        case FlexProtocol::ZeroShot: {
            if (bundle.zeroshot.empty())
                throw InvalidProtocolError("flexible inference: no zero-shot tasks");
            double sum = 0.0;
            for (const auto& task : bundle.zeroshot) {
                std::set<int> all(task.label_ids.begin(), task.label_ids.end());
                sum += task_accuracy(task, task.label_ids, all, 0).value_or(0.0);
            }
            report.accuracy = sum / static_cast<double>(bundle.zeroshot.size());
            break;
        }
        case FlexProtocol::UnionZeroShot: {
            if (bundle.zeroshot.empty())
                throw InvalidProtocolError("union+zero-shot: no zero-shot tasks");
            auto target_union = detail::union_of_labels(bundle.targets);
            auto pool = detail::union_of_labels(bundle.zeroshot);
            Rng rng(mix64(seed.value, 0x555a));
            auto sampled = detail::sample_labels(pool, 100, rng);
            std::set<int> cand_set(target_union.begin(), target_union.end());
            cand_set.insert(sampled.begin(), sampled.end());
            std::vector<int> cand_ids(cand_set.begin(), cand_set.end());
            report.candidate_count = static_cast<int>(cand_ids.size());

            double target_sum = 0.0;
            for (const auto& task : bundle.targets) {
                std::set<int> all(task.label_ids.begin(), task.label_ids.end());
                target_sum += task_accuracy(task, cand_ids, all, 0).value_or(0.0);
            }
            report.target_accuracy = target_sum / static_cast<double>(bundle.targets.size());

            std::set<int> sampled_set(sampled.begin(), sampled.end());
            double zs_sum = 0.0;
            int zs_n = 0;
            for (const auto& task : bundle.zeroshot) {
                if (auto acc = task_accuracy(task, cand_ids, sampled_set, 0)) {
                    zs_sum += *acc;
                    zs_n += 1;
                }
            }
            report.zeroshot_accuracy = zs_n > 0 ? zs_sum / zs_n : 0.0;
            report.accuracy = (*report.target_accuracy + *report.zeroshot_accuracy) / 2.0;
            break;
        }
        case FlexProtocol::MixZeroShot: {
            auto target_union = detail::union_of_labels(bundle.targets);
            auto pool = detail::union_of_labels(bundle.zeroshot);
            Rng split_rng(mix64(seed.value, 0x4d5a));
            split_rng.shuffle(target_union);
            const auto l = static_cast<std::int64_t>(target_union.size());
            std::int64_t prev = 0;
            for (int part = 0; part < 5; ++part) {
                std::int64_t upto = l * (part + 1) / 5;
                std::vector<int> split(target_union.begin() + prev,
                                       target_union.begin() + upto);
                prev = upto;
                Rng zs_rng(mix64(seed.value, 0x7000 + static_cast<std::uint64_t>(part)));
                auto sampled = detail::sample_labels(pool, 100, zs_rng);
                std::set<int> cand_set(split.begin(), split.end());
                cand_set.insert(sampled.begin(), sampled.end());
                std::vector<int> cand_ids(cand_set.begin(), cand_set.end());

                std::set<int> split_set(split.begin(), split.end());
                std::set<int> sampled_set(sampled.begin(), sampled.end());
                std::int64_t correct = 0, total = 0;
                auto tally = [&](const TaskDataset& task, const std::set<int>& eligible) {
                    CandidateSet cand{cand_ids, &bundle.labels};
                    std::map<int, std::int64_t> used;
                    for (const Exemplar& sample : task.test) {
                        if (!eligible.count(sample.label_id)) continue;
                        if (used[sample.label_id] >= 100) continue;
                        used[sample.label_id] += 1;
                        total += 1;
                        correct += classify_sample(bundle.labels, learner,
                                                   sample.image_embedding, cand,
                                                   covered) == sample.label_id;
                    }
                };
                for (const auto& task : bundle.targets) tally(task, split_set);
                for (const auto& task : bundle.zeroshot) tally(task, sampled_set);
                report.split_accuracies.push_back(
                    total > 0 ? static_cast<double>(correct) / static_cast<double>(total)
                              : 0.0);
            }
            double sum = 0.0;
            for (double a : report.split_accuracies) sum += a;
            report.accuracy = sum / static_cast<double>(report.split_accuracies.size());
            break;
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Transfer / Avg / Last

struct Metrics {
    double transfer = 0.0;
    double avg = 0.0;
    double last = 0.0;
};

/// Task-incremental metrics over the stage-by-task accuracy matrix. Transfer
/// averages each task's accuracy at the stages before it is trained (the
/// first task, having none, is excluded); Avg takes per-task column means;
/// Last is the final stage's mean over tasks.
inline Metrics transfer_avg_last(const std::vector<StageReport>& reports,
                                 const std::vector<std::string>& task_order) {
    const std::size_t t_count = task_order.size();
    if (t_count < 2 || reports.size() != t_count)
        throw ShapeMismatchError("transfer_avg_last: need a square stage/task matrix");

    std::vector<std::vector<double>> acc(reports.size(),
                                         std::vector<double>(t_count, 0.0));
    for (std::size_t s = 0; s < reports.size(); ++s) {
        for (std::size_t t = 0; t < t_count; ++t) {
            bool found = false;
            for (const auto& task : reports[s].tasks) {
                if (!task.zeroshot_task && task.name == task_order[t]) {
                    acc[s][t] = task.accuracy;
                    found = true;
                    break;
                }
            }
            if (!found)
                throw ShapeMismatchError("transfer_avg_last: missing task '" +
                                         task_order[t] + "' in stage " + std::to_string(s));
        }
    }

    Metrics m;
    double transfer_sum = 0.0;
    for (std::size_t t = 1; t < t_count; ++t) {
        double col = 0.0;
        for (std::size_t s = 0; s < t; ++s) col += acc[s][t];
        transfer_sum += col / static_cast<double>(t);
    }
    m.transfer = transfer_sum / static_cast<double>(t_count - 1);

    double avg_sum = 0.0;
    for (std::size_t t = 0; t < t_count; ++t) {
        double col = 0.0;
        for (std::size_t s = 0; s < reports.size(); ++s) col += acc[s][t];
        avg_sum += col / static_cast<double>(reports.size());
    }
    m.avg = avg_sum / static_cast<double>(t_count);

    double last_sum = 0.0;
    for (std::size_t t = 0; t < t_count; ++t) last_sum += acc.back()[t];
    m.last = last_sum / static_cast<double>(t_count);
    return m;
}

// ---------------------------------------------------------------------------
// Insertion-latency benchmark

struct BenchConfig {
    Method method = Method::TreeProbe;
    std::vector<std::int64_t> sizes;
    std::int64_t psi = 1000;
    int repeats = 5;                // timing rounds per size
    int samples_per_repeat = 5;     // sampled exemplars per round
    int dim = 64;
    int classes = 20;
    double intra_class_sigma = 0.35;
    int k = 9;
    // Fixed-work training budget so measured cost reflects data size, not
    // convergence luck: tolerance zero means exactly max_iterations steps.
    TrainConfig train{0.316, 100, 0.0, {}};
    RngSeed seed = {};
};

struct BenchPoint {
    std::string method;
    std::int64_t psi = 0;
    std::int64_t n = 0;
    double median_us = 0.0;
    double mean_us = 0.0;
    int trials = 0;
};

inline const char* method_name(Method m) {
    switch (m) {
        case Method::ZeroShot: return "zs";
        case Method::Knn: return "knn";
        case Method::LinProbe: return "linprobe";
        case Method::TreeProbe: return "treeprobe";
    }
    return "?";
}

/// Measures the wall time to incorporate one exemplar (insert plus retraining
/// of the affected classifier state) at each store size. Per size:
/// repeats x samples_per_repeat timed incorporations of exemplars sampled
/// from the store, after one discarded warm-up.
inline std::vector<BenchPoint> bench_insert_latency(const BenchConfig& cfg) {
    using clock = std::chrono::steady_clock;
    if (cfg.sizes.empty()) throw InvalidConfigError("bench: no sizes given");
    if (cfg.method == Method::ZeroShot)
        throw InvalidConfigError("bench: zero-shot model has no insertion path");

    std::vector<BenchPoint> table;
    for (std::int64_t n : cfg.sizes) {
        if (n < 1) throw InvalidConfigError("bench: sizes must be positive");
        SynthConfig synth;
        synth.dim = cfg.dim;
        synth.classes = cfg.classes;
        synth.per_class_train =
            static_cast<int>((n + cfg.classes - 1) / cfg.classes);
        synth.per_class_test = 1;
        synth.intra_class_sigma = cfg.intra_class_sigma;
        synth.seed = {mix64(cfg.seed.value, static_cast<std::uint64_t>(n))};
        TaskBundle bundle = gen_synthetic(synth);
        auto& rows = bundle.targets[0].train;
        Rng order_rng(mix64(cfg.seed.value, 0xb000 + static_cast<std::uint64_t>(n)));
        order_rng.shuffle(rows);

        RunParams params;
        params.method = cfg.method;
        params.psi = cfg.psi;
        params.k = cfg.k;
        params.train = cfg.train;
        params.seed = cfg.seed;
        Learner learner(params);
        learner.reserve(static_cast<std::size_t>(n) + 64);
        for (std::int64_t i = 0; i < n; ++i)
            learner.ingest(rows[static_cast<std::size_t>(i)].image_embedding,
                           rows[static_cast<std::size_t>(i)].label_id);
        if (cfg.method == Method::TreeProbe) learner.train();

        Rng pick_rng(mix64(cfg.seed.value, 0xc000 + static_cast<std::uint64_t>(n)));
        auto sample_exemplar = [&]() {
            const Exemplar& e = learner.store().get(static_cast<std::int64_t>(
                pick_rng.uniform_int(learner.store().size())));
            return std::pair<EmbeddingVector, int>(e.image_embedding, e.label_id);
        };
        {   // warm-up, discarded
            auto [emb, label] = sample_exemplar();
            learner.ingest(emb, label);
            learner.train();
        }

        std::vector<double> micros;
        micros.reserve(static_cast<std::size_t>(cfg.repeats) * cfg.samples_per_repeat);
        for (int r = 0; r < cfg.repeats; ++r) {
            for (int s = 0; s < cfg.samples_per_repeat; ++s) {
                auto [emb, label] = sample_exemplar();
                auto t0 = clock::now();
                learner.ingest(emb, label);
                learner.train();
                auto t1 = clock::now();
                micros.push_back(
                    std::chrono::duration<double, std::micro>(t1 - t0).count());
            }
        }
        std::sort(micros.begin(), micros.end());
        double median = micros[micros.size() / 2];
        if (micros.size() % 2 == 0)
            median = 0.5 * (median + micros[micros.size() / 2 - 1]);
        double mean = std::accumulate(micros.begin(), micros.end(), 0.0) /
                      static_cast<double>(micros.size());
        table.push_back({method_name(cfg.method), cfg.psi, n, median, mean,
                         static_cast<int>(micros.size())});
    }
    return table;
}

}  // namespace memprobe
