#pragma once

// File formats and report plumbing: the binary embedding container, raw
// little-endian label files, the dataset manifest (JSON), versioned model
// snapshots, run reports, and the long-format CSV export.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "memprobe/core.hpp"
#include "memprobe/harness.hpp"

namespace memprobe {

static_assert(std::endian::native == std::endian::little,
              "file formats are defined little-endian");

// ---------------------------------------------------------------------------
// Embedding files
//
// Layout: "EMBD" | u32 version=1 | u64 count | u32 dim | u8 dtype=1 |
// count*dim float32, row-major, little-endian.

namespace detail {

template <class T>
void write_pod(std::ostream& out, const T& value) {
    out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <class T>
T read_pod(std::istream& in, const char* what) {
    T value{};
    in.read(reinterpret_cast<char*>(&value), sizeof(T));
    if (!in) throw IoError(std::string("truncated read: ") + what);
    return value;
}

}  // namespace detail

inline void write_embedding_file(const std::string& path,
                                 const std::vector<EmbeddingVector>& rows) {
    std::uint32_t dim = rows.empty() ? 0 : static_cast<std::uint32_t>(rows[0].dim());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + path);
    out.write("EMBD", 4);
    detail::write_pod<std::uint32_t>(out, 1);
    detail::write_pod<std::uint64_t>(out, rows.size());
    detail::write_pod<std::uint32_t>(out, dim);
    detail::write_pod<std::uint8_t>(out, 1);
    for (const auto& row : rows) {
        if (static_cast<std::uint32_t>(row.dim()) != dim)
            throw DimensionMismatchError("embedding file rows disagree on dim");
        for (float v : row.values)
            if (!std::isfinite(v)) throw NonFiniteError("embedding file: non-finite value");
        out.write(reinterpret_cast<const char*>(row.values.data()),
                  static_cast<std::streamsize>(sizeof(float) * row.values.size()));
    }
    if (!out) throw IoError("write failed: " + path);
}

inline std::vector<EmbeddingVector> read_embedding_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "EMBD", 4) != 0)
        throw IoError("bad magic in " + path);
    auto version = detail::read_pod<std::uint32_t>(in, "version");
    if (version != 1) throw IoError("unsupported embedding file version");
    auto count = detail::read_pod<std::uint64_t>(in, "count");
    auto dim = detail::read_pod<std::uint32_t>(in, "dim");
    auto dtype = detail::read_pod<std::uint8_t>(in, "dtype");
    if (dtype != 1) throw IoError("unsupported dtype in " + path);

    std::vector<EmbeddingVector> rows(count);
    for (auto& row : rows) {
        row.values.resize(dim);
        in.read(reinterpret_cast<char*>(row.values.data()),
                static_cast<std::streamsize>(sizeof(float) * dim));
        if (!in) throw IoError("truncated payload in " + path);
        for (float v : row.values)
            if (!std::isfinite(v))
                throw NonFiniteError("non-finite value in " + path);
    }
    return rows;
}

// Label files are bare little-endian u32 arrays aligned with embedding rows.

inline void write_labels_file(const std::string& path,
                              const std::vector<std::uint32_t>& labels) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + path);
    out.write(reinterpret_cast<const char*>(labels.data()),
              static_cast<std::streamsize>(sizeof(std::uint32_t) * labels.size()));
    if (!out) throw IoError("write failed: " + path);
}

inline std::vector<std::uint32_t> read_labels_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary | std::ios::ate);
    if (!in) throw IoError("cannot open: " + path);
    auto bytes = static_cast<std::size_t>(in.tellg());
    if (bytes % sizeof(std::uint32_t) != 0)
        throw IoError("label file size not a multiple of 4: " + path);
    std::vector<std::uint32_t> labels(bytes / sizeof(std::uint32_t));
    in.seekg(0);
    in.read(reinterpret_cast<char*>(labels.data()), static_cast<std::streamsize>(bytes));
    if (!in) throw IoError("read failed: " + path);
    return labels;
}

// ---------------------------------------------------------------------------
// Dataset manifests

/// Writes a single-task bundle as a dataset directory: manifest.json plus
/// binary embedding/label files. Overwrites existing files, so regenerating
/// with the same seed is byte-idempotent.
inline std::string save_task(const std::string& dir, const TaskBundle& bundle) {
    if (bundle.targets.size() != 1)
        throw InvalidConfigError("save_task: expected exactly one task");
    const TaskDataset& task = bundle.targets[0];
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    std::vector<EmbeddingVector> text_rows;
    nlohmann::json labels_json = nlohmann::json::array();
    for (const auto& entry : bundle.labels.entries) {
        text_rows.push_back(entry.text_embedding);
        labels_json.push_back({{"id", entry.id}, {"text", entry.text}});
    }
    write_embedding_file((fs::path(dir) / "text.embd").string(), text_rows);

    auto dump_split = [&](const std::vector<Exemplar>& rows, const std::string& stem) {
        std::vector<EmbeddingVector> embs;
        std::vector<std::uint32_t> labels;
        for (const auto& e : rows) {
            embs.push_back(e.image_embedding);
            labels.push_back(static_cast<std::uint32_t>(e.label_id));
        }
        write_embedding_file((fs::path(dir) / (stem + ".embd")).string(), embs);
        write_labels_file((fs::path(dir) / (stem + ".labels")).string(), labels);
    };
    dump_split(task.train, "train");
    dump_split(task.test, "test");

    nlohmann::json manifest = {
        {"name", task.name},
        {"dim", text_rows.empty() ? 0 : text_rows[0].dim()},
        {"labels", labels_json},
        {"text_embeddings", "text.embd"},
        {"splits",
         {{"train", {{"embeddings", "train.embd"}, {"labels", "train.labels"}}},
          {"test", {{"embeddings", "test.embd"}, {"labels", "test.labels"}}}}},
    };
    auto manifest_path = (fs::path(dir) / "manifest.json").string();
    std::ofstream out(manifest_path, std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + manifest_path);
    out << manifest.dump(2) << "\n";
    return manifest_path;
}

/// Loads a dataset directory into a single-task bundle. Embeddings are
/// re-normalized at ingestion. Dimension disagreements and label ids without
/// a vocabulary entry are rejected with distinct errors.
inline TaskBundle load_task(const std::string& manifest_path) {
    namespace fs = std::filesystem;
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open: " + manifest_path);
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad manifest json: " + std::string(e.what()));
    }

    TaskBundle bundle;
    TaskDataset task;
    try {
        task.name = manifest.at("name").get<std::string>();
        const int dim = manifest.at("dim").get<int>();
        const auto base = fs::path(manifest_path).parent_path();

        const auto& labels_json = manifest.at("labels");
        for (std::size_t i = 0; i < labels_json.size(); ++i) {
            int id = labels_json[i].at("id").get<int>();
            if (id != static_cast<int>(i))
                throw DanglingLabelError("label ids must be dense 0..L-1 in " +
                                         manifest_path);
        }
        auto text_rows = read_embedding_file(
            (base / manifest.at("text_embeddings").get<std::string>()).string());
        if (text_rows.size() != labels_json.size())
            throw DanglingLabelError("text embedding count does not match label count");
        for (std::size_t i = 0; i < text_rows.size(); ++i) {
            if (text_rows[i].dim() != dim)
                throw DimensionMismatchError("text embeddings disagree with manifest dim");
            int id = bundle.labels.add(labels_json[i].at("text").get<std::string>(),
                                       normalize(text_rows[i]));
            task.label_ids.push_back(id);
        }

        auto load_split = [&](const char* split) {
            std::vector<Exemplar> rows;
            const auto& split_json = manifest.at("splits").at(split);
            auto embs = read_embedding_file(
                (base / split_json.at("embeddings").get<std::string>()).string());
            auto labels = read_labels_file(
                (base / split_json.at("labels").get<std::string>()).string());
            if (embs.size() != labels.size())
                throw IoError(std::string(split) + ": embedding/label row counts differ");
            for (std::size_t i = 0; i < embs.size(); ++i) {
                if (embs[i].dim() != dim)
                    throw DimensionMismatchError(std::string(split) +
                                                 " embeddings disagree with manifest dim");
                auto label = static_cast<int>(labels[i]);
                if (!bundle.labels.has(label))
                    throw DanglingLabelError(std::string(split) + " row " +
                                             std::to_string(i) + ": label " +
                                             std::to_string(label) + " not in vocabulary");
                rows.push_back({static_cast<std::int64_t>(i), normalize(embs[i]), label});
            }
            return rows;
        };
        task.train = load_split("train");
        task.test = load_split("test");
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad manifest structure: " + std::string(e.what()));
    }
    bundle.targets.push_back(std::move(task));
    return bundle;
}

// ---------------------------------------------------------------------------
// Snapshots
//
// Versioned container for trained model state: the exemplar store, and the
// global classifier (LinProbe) or cluster tree (TreeProbe). Classifier
// weights are stored as 32-bit reals, row-major; tree centroid state keeps
// its 64-bit running sums so restored trees route identically. The flat
// index is rebuilt from the store on load (rows are insertion order).

namespace detail {

inline void write_classifier(std::ostream& out, const LinearClassifier& clf) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(clf.class_labels.size()));
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(clf.dim));
    for (int label : clf.class_labels) write_pod<std::int32_t>(out, label);
    for (double w : clf.weights) write_pod<float>(out, static_cast<float>(w));
    for (double b : clf.bias) write_pod<float>(out, static_cast<float>(b));
    write_pod<std::int64_t>(out, clf.trained_on_count);
}

inline LinearClassifier read_classifier(std::istream& in) {
    LinearClassifier clf;
    auto k = read_pod<std::uint32_t>(in, "classifier classes");
    clf.dim = static_cast<int>(read_pod<std::uint32_t>(in, "classifier dim"));
    clf.class_labels.resize(k);
    for (auto& label : clf.class_labels)
        label = read_pod<std::int32_t>(in, "classifier label");
    clf.weights.resize(static_cast<std::size_t>(k) * clf.dim);
    for (auto& w : clf.weights) w = read_pod<float>(in, "classifier weight");
    clf.bias.resize(k);
    for (auto& b : clf.bias) b = read_pod<float>(in, "classifier bias");
    clf.trained_on_count = read_pod<std::int64_t>(in, "classifier count");
    return clf;
}

}  // namespace detail

inline void save_snapshot(const std::string& path, const Learner& learner) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for write: " + path);
    out.write("MPSS", 4);
    detail::write_pod<std::uint32_t>(out, 1);

    const ExemplarStore& store = learner.store();
    detail::write_pod<std::uint64_t>(out, store.size());
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(store.dim()));
    for (std::size_t i = 0; i < store.size(); ++i) {
        const Exemplar& e = store.get(static_cast<std::int64_t>(i));
        detail::write_pod<std::int64_t>(out, e.position);
        detail::write_pod<std::int32_t>(out, e.label_id);
        out.write(reinterpret_cast<const char*>(e.image_embedding.values.data()),
                  static_cast<std::streamsize>(sizeof(float) *
                                               e.image_embedding.values.size()));
    }

    detail::write_pod<std::uint8_t>(out, learner.global_classifier() ? 1 : 0);
    if (learner.global_classifier())
        detail::write_classifier(out, *learner.global_classifier());

    const ClusterTree* tree = learner.tree();
    detail::write_pod<std::uint8_t>(out, tree ? 1 : 0);
    if (tree) {
        detail::write_pod<std::int32_t>(out, tree->root());
        detail::write_pod<std::int64_t>(out, tree->inserted_count());
        detail::write_pod<std::uint64_t>(out, tree->nodes().size());
        for (const TreeNode& node : tree->nodes()) {
            detail::write_pod<std::int32_t>(out, node.id);
            detail::write_pod<std::int32_t>(out, node.parent);
            detail::write_pod<std::uint8_t>(out, node.is_leaf ? 1 : 0);
            detail::write_pod<std::int32_t>(out, node.left);
            detail::write_pod<std::int32_t>(out, node.right);
            detail::write_pod<std::int64_t>(out, node.subtree_count);
            detail::write_pod<std::uint32_t>(out,
                                             static_cast<std::uint32_t>(node.centroid_sum.size()));
            for (double c : node.centroid_sum) detail::write_pod<double>(out, c);
            detail::write_pod<std::uint64_t>(out, node.exemplar_positions.size());
            for (std::int64_t p : node.exemplar_positions)
                detail::write_pod<std::int64_t>(out, p);
            detail::write_pod<std::uint8_t>(out, node.classifier ? 1 : 0);
            if (node.classifier) detail::write_classifier(out, *node.classifier);
            detail::write_pod<std::uint8_t>(out, node.dirty ? 1 : 0);
        }
    }
    if (!out) throw IoError("write failed: " + path);
}

struct SnapshotData {
    std::vector<Exemplar> exemplars;
    std::optional<LinearClassifier> global_classifier;
    std::optional<TreeSnapshot> tree;
};

inline SnapshotData load_snapshot(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, "MPSS", 4) != 0) throw IoError("bad snapshot magic");
    if (detail::read_pod<std::uint32_t>(in, "version") != 1)
        throw IoError("unsupported snapshot version");

    SnapshotData snap;
    auto count = detail::read_pod<std::uint64_t>(in, "store count");
    auto dim = detail::read_pod<std::uint32_t>(in, "store dim");
    snap.exemplars.resize(count);
    for (auto& e : snap.exemplars) {
        e.position = detail::read_pod<std::int64_t>(in, "position");
        e.label_id = detail::read_pod<std::int32_t>(in, "label");
        e.image_embedding.values.resize(dim);
        in.read(reinterpret_cast<char*>(e.image_embedding.values.data()),
                static_cast<std::streamsize>(sizeof(float) * dim));
        if (!in) throw IoError("truncated snapshot store");
    }
    if (detail::read_pod<std::uint8_t>(in, "classifier flag"))
        snap.global_classifier = detail::read_classifier(in);
    if (detail::read_pod<std::uint8_t>(in, "tree flag")) {
        TreeSnapshot tree;
        tree.dim = static_cast<int>(dim);
        tree.root = detail::read_pod<std::int32_t>(in, "tree root");
        tree.inserted = detail::read_pod<std::int64_t>(in, "tree inserted");
        auto node_count = detail::read_pod<std::uint64_t>(in, "node count");
        tree.nodes.resize(node_count);
        for (auto& node : tree.nodes) {
            node.id = detail::read_pod<std::int32_t>(in, "node id");
            node.parent = detail::read_pod<std::int32_t>(in, "node parent");
            node.is_leaf = detail::read_pod<std::uint8_t>(in, "node kind") != 0;
            node.left = detail::read_pod<std::int32_t>(in, "node left");
            node.right = detail::read_pod<std::int32_t>(in, "node right");
            node.subtree_count = detail::read_pod<std::int64_t>(in, "subtree count");
            auto cdim = detail::read_pod<std::uint32_t>(in, "centroid dim");
            node.centroid_sum.resize(cdim);
            for (auto& c : node.centroid_sum) c = detail::read_pod<double>(in, "centroid");
            auto members = detail::read_pod<std::uint64_t>(in, "member count");
            node.exemplar_positions.resize(members);
            for (auto& p : node.exemplar_positions)
                p = detail::read_pod<std::int64_t>(in, "member");
            if (detail::read_pod<std::uint8_t>(in, "leaf classifier flag"))
                node.classifier = detail::read_classifier(in);
            node.dirty = detail::read_pod<std::uint8_t>(in, "dirty") != 0;
        }
        snap.tree = std::move(tree);
    }
    return snap;
}

// ---------------------------------------------------------------------------
// Run reports

struct RunConfigEcho {
    std::string scenario;
    std::string method;
    std::string fusion;
    int k = 9;
    std::int64_t psi = 50000;
    double regularization_c = 0.316;
    int max_iterations = 5000;
    double tau = 100.0;
    double alpha = 0.5;
    std::uint64_t seed = 0;
    std::vector<std::string> tasks;
    std::vector<std::string> zeroshot_tasks;
};

inline nlohmann::json report_json(const RunConfigEcho& echo,
                                  const std::vector<StageReport>& stages,
                                  const std::optional<Metrics>& metrics) {
    nlohmann::json j;
    j["config"] = {{"scenario", echo.scenario},
                   {"method", echo.method},
                   {"fusion", echo.fusion},
                   {"k", echo.k},
                   {"psi", echo.psi},
                   {"regularization_c", echo.regularization_c},
                   {"max_iterations", echo.max_iterations},
                   {"tau", echo.tau},
                   {"alpha", echo.alpha},
                   {"seed", echo.seed},
                   {"tasks", echo.tasks},
                   {"zeroshot_tasks", echo.zeroshot_tasks}};
    j["stages"] = nlohmann::json::array();
    for (const auto& stage : stages) {
        nlohmann::json s;
        s["stage"] = stage.stage_index;
        s["tasks"] = nlohmann::json::array();
        for (const auto& task : stage.tasks) {
            nlohmann::json t = {{"name", task.name},
                                {"kind", task.zeroshot_task ? "zeroshot" : "target"},
                                {"accuracy", task.accuracy},
                                {"covered_fraction", task.covered_fraction}};
            if (task.seen_accuracy) t["seen_accuracy"] = *task.seen_accuracy;
            if (task.unseen_accuracy) t["unseen_accuracy"] = *task.unseen_accuracy;
            s["tasks"].push_back(std::move(t));
        }
        s["target_avg"] = stage.target_avg;
        if (stage.zeroshot_avg) s["zeroshot_avg"] = *stage.zeroshot_avg;
        if (stage.seen_acc) s["seen_acc"] = *stage.seen_acc;
        if (stage.unseen_acc) s["unseen_acc"] = *stage.unseen_acc;
        s["insert_ms"] = stage.insert_ms;
        s["train_ms"] = stage.train_ms;
        j["stages"].push_back(std::move(s));
    }
    if (metrics)
        j["transfer_avg_last"] = {{"transfer", metrics->transfer},
                                  {"avg", metrics->avg},
                                  {"last", metrics->last}};
    return j;
}

/// Long-format CSV (stage, task, metric, value) of a run report's per-task
/// curves. Timing fields are not exported.
inline std::string export_report_csv(const nlohmann::json& report) {
    if (!report.contains("stages") || !report["stages"].is_array() ||
        report["stages"].empty())
        throw MalformedReportError("report has no stages");
    std::ostringstream csv;
    csv << "stage,task,metric,value\n";
    for (const auto& stage : report["stages"]) {
        if (!stage.contains("stage") || !stage.contains("tasks"))
            throw MalformedReportError("stage entry missing fields");
        for (const auto& task : stage["tasks"]) {
            if (!task.contains("name") || !task.contains("accuracy"))
                throw MalformedReportError("task entry missing fields");
            auto emit = [&](const char* metric, double value) {
                csv << stage["stage"].get<int>() << "," << task["name"].get<std::string>()
                    << "," << metric << "," << value << "\n";
            };
            emit("accuracy", task["accuracy"].get<double>());
            if (task.contains("covered_fraction"))
                emit("covered_fraction", task["covered_fraction"].get<double>());
            if (task.contains("seen_accuracy"))
                emit("seen_accuracy", task["seen_accuracy"].get<double>());
            if (task.contains("unseen_accuracy"))
                emit("unseen_accuracy", task["unseen_accuracy"].get<double>());
        }
    }
    return csv.str();
}

/// Write-temp-then-rename so observers never see a half-written report.
inline void write_text_atomic(const std::string& path, const std::string& content) {
    namespace fs = std::filesystem;
    auto parent = fs::path(path).parent_path();
    if (!parent.empty()) fs::create_directories(parent);
    std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for write: " + tmp);
        out << content;
        if (!out) throw IoError("write failed: " + tmp);
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) throw IoError("rename failed: " + path + ": " + ec.message());
}

}  // namespace memprobe
