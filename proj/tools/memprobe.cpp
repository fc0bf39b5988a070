// memprobe: continual-learning engine over fixed embedding vectors.
//
// Subcommands:
//   gen-synth  write a synthetic dataset directory (manifest + binary files)
//   run        execute a continual-learning scenario and write a JSON report
//   bench      measure single-exemplar incorporation latency, emit CSV
//   export     flatten a run report into long-format CSV curves
//
// Exit codes: 0 success, 2 configuration error, 3 data error.

#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "memprobe/io.hpp"

namespace {

using namespace memprobe;

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const InvalidConfigError*>(&e) ||
        dynamic_cast<const InvalidPlanError*>(&e) ||
        dynamic_cast<const InvalidProtocolError*>(&e) ||
        dynamic_cast<const InvalidKError*>(&e))
        return 2;
    return 3;
}

ScenarioKind parse_scenario(const std::string& name) {
    if (name == "data") return ScenarioKind::DataIncremental;
    if (name == "class") return ScenarioKind::ClassIncremental;
    if (name == "task") return ScenarioKind::TaskIncremental;
    throw InvalidConfigError("unknown scenario: " + name);
}

Method parse_method(const std::string& name) {
    if (name == "zs") return Method::ZeroShot;
    if (name == "knn") return Method::Knn;
    if (name == "linprobe") return Method::LinProbe;
    if (name == "treeprobe") return Method::TreeProbe;
    throw InvalidConfigError("unknown method: " + name);
}

FusionMode parse_fusion(const std::string& name) {
    if (name == "zs-only") return FusionMode::ZeroShotOnly;
    if (name == "exemplar-only") return FusionMode::ExemplarOnly;
    if (name == "avg-prob") return FusionMode::AvgProb;
    if (name == "avg-emb") return FusionMode::AvgEmb;
    if (name == "aim-prob") return FusionMode::AimProb;
    if (name == "aim-emb") return FusionMode::AimEmb;
    throw InvalidConfigError("unknown fusion mode: " + name);
}

struct GenSynthArgs {
    int classes = 20;
    int dim = 64;
    int per_class = 100;
    int per_class_test = 20;
    double sigma = 0.35;
    double text_sigma = 0.10;
    std::uint64_t seed = 0;
    std::string name = "synth";
    std::string out = "synth";
};

int cmd_gen_synth(const GenSynthArgs& args) {
    SynthConfig cfg;
    cfg.dim = args.dim;
    cfg.classes = args.classes;
    cfg.per_class_train = args.per_class;
    cfg.per_class_test = args.per_class_test;
    cfg.intra_class_sigma = args.sigma;
    cfg.text_offset_sigma = args.text_sigma;
    cfg.seed = {args.seed};
    auto bundle = gen_synthetic(cfg, args.name);
    auto manifest = save_task(args.out, bundle);
    std::cout << manifest << "\n";
    return 0;
}

struct RunArgs {
    std::string scenario = "task";
    std::string method = "treeprobe";
    std::string fusion = "aim-emb";
    std::vector<std::string> tasks;
    std::vector<std::string> zs;
    int k = 9;
    std::int64_t psi = 50000;
    double reg_c = 0.316;
    int max_iter = 5000;
    double tau = 100.0;
    std::uint64_t seed = 0;
    std::string out;
};

int cmd_run(const RunArgs& args) {
    ScenarioKind kind = parse_scenario(args.scenario);

    TaskBundle bundle;
    for (const auto& path : args.tasks) append_bundle(bundle, load_task(path), false);
    for (const auto& path : args.zs) append_bundle(bundle, load_task(path), true);

    RunParams params;
    params.method = parse_method(args.method);
    params.fusion.mode = parse_fusion(args.fusion);
    params.k = args.k;
    params.psi = args.psi;
    params.train.regularization_c = args.reg_c;
    params.train.max_iterations = args.max_iter;
    params.zeroshot.temperature_tau = args.tau;
    params.knn.temperature = args.tau;
    params.seed = {args.seed};

    auto plan = plan_scenario(bundle, kind, params.seed);

    RunConfigEcho echo;
    echo.scenario = args.scenario;
    echo.method = args.method;
    echo.fusion = args.fusion;
    echo.k = args.k;
    echo.psi = args.psi;
    echo.regularization_c = args.reg_c;
    echo.max_iterations = args.max_iter;
    echo.tau = args.tau;
    echo.alpha = params.fusion.alpha;
    echo.seed = args.seed;
    for (const auto& task : bundle.targets) echo.tasks.push_back(task.name);
    for (const auto& task : bundle.zeroshot) echo.zeroshot_tasks.push_back(task.name);

    std::vector<StageReport> reports;
    try {
        run_scenario(bundle, plan, params, reports);
    } catch (const std::exception& e) {
        // Flush the completed stages before propagating the failure.
        auto partial = report_json(echo, reports, std::nullopt);
        partial["error"] = e.what();
        write_text_atomic(args.out, partial.dump(2) + "\n");
        std::cerr << "memprobe: stage failed: " << e.what() << "\n";
        return exit_code_for(e);
    }

    std::optional<Metrics> metrics;
    if (kind == ScenarioKind::TaskIncremental)
        metrics = transfer_avg_last(reports, echo.tasks);

    write_text_atomic(args.out, report_json(echo, reports, metrics).dump(2) + "\n");
    std::cout << args.out << "\n";
    return 0;
}

struct BenchArgs {
    std::string method;
    std::vector<std::int64_t> sizes;
    std::int64_t psi = 1000;
    int trials = 25;
    int dim = 64;
    int classes = 20;
    double sigma = 0.35;
    int k = 9;
    int train_iters = 100;
    std::uint64_t seed = 0;
    std::string out;
};

int cmd_bench(const BenchArgs& args) {
    BenchConfig cfg;
    cfg.method = parse_method(args.method);
    cfg.sizes = args.sizes;
    cfg.psi = args.psi;
    cfg.samples_per_repeat = 5;
    cfg.repeats = std::max(1, args.trials / cfg.samples_per_repeat);
    cfg.dim = args.dim;
    cfg.classes = args.classes;
    cfg.intra_class_sigma = args.sigma;
    cfg.k = args.k;
    cfg.train.max_iterations = args.train_iters;
    cfg.seed = {args.seed};

    auto table = bench_insert_latency(cfg);
    std::ostringstream csv;
    csv << "method,psi,n,median_us,mean_us,trials\n";
    for (const auto& point : table)
        csv << point.method << "," << point.psi << "," << point.n << ","
            << point.median_us << "," << point.mean_us << "," << point.trials << "\n";
    if (args.out.empty())
        std::cout << csv.str();
    else
        write_text_atomic(args.out, csv.str());
    return 0;
}

struct ExportArgs {
    std::string report;
    std::string out;
};

int cmd_export(const ExportArgs& args) {
    std::ifstream in(args.report);
    if (!in) throw IoError("cannot open report: " + args.report);
    nlohmann::json report;
    try {
        in >> report;
    } catch (const nlohmann::json::exception& e) {
        throw MalformedReportError("report is not valid json: " + std::string(e.what()));
    }
    auto csv = export_report_csv(report);
    if (args.out.empty())
        std::cout << csv;
    else
        write_text_atomic(args.out, csv);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"continual learning over fixed embeddings"};
    app.require_subcommand(1);

    GenSynthArgs gen;
    auto* gen_cmd = app.add_subcommand("gen-synth", "generate a synthetic dataset");
    gen_cmd->add_option("--classes", gen.classes, "number of classes");
    gen_cmd->add_option("--dim", gen.dim, "embedding dimension");
    gen_cmd->add_option("--per-class", gen.per_class, "training rows per class");
    gen_cmd->add_option("--per-class-test", gen.per_class_test, "test rows per class");
    gen_cmd->add_option("--sigma", gen.sigma, "intra-class noise");
    gen_cmd->add_option("--text-sigma", gen.text_sigma, "text prototype offset noise");
    gen_cmd->add_option("--seed", gen.seed, "rng seed");
    gen_cmd->add_option("--name", gen.name, "task name");
    gen_cmd->add_option("--out", gen.out, "output directory");

    RunArgs run;
    auto* run_cmd = app.add_subcommand("run", "run a continual-learning scenario");
    run_cmd->add_option("--scenario", run.scenario, "data | class | task");
    run_cmd->add_option("--method", run.method, "zs | knn | linprobe | treeprobe");
    run_cmd->add_option("--fusion", run.fusion,
                        "zs-only | exemplar-only | avg-prob | avg-emb | aim-prob | aim-emb");
    run_cmd->add_option("--tasks", run.tasks, "target task manifests")
        ->required()
        ->delimiter(',');
    run_cmd->add_option("--zs", run.zs, "zero-shot task manifests")->delimiter(',');
    run_cmd->add_option("--k", run.k, "neighbor / ensemble size");
    run_cmd->add_option("--psi", run.psi, "tree leaf capacity");
    run_cmd->add_option("--reg-c", run.reg_c, "logistic regularization strength");
    run_cmd->add_option("--max-iter", run.max_iter, "optimizer iteration cap");
    run_cmd->add_option("--tau", run.tau, "softmax temperature");
    run_cmd->add_option("--seed", run.seed, "rng seed");
    run_cmd->add_option("--out", run.out, "report path")->required();

    BenchArgs bench;
    auto* bench_cmd = app.add_subcommand("bench", "insertion-latency benchmark");
    bench_cmd->add_option("--method", bench.method, "knn | linprobe | treeprobe")
        ->required();
    bench_cmd->add_option("--sizes", bench.sizes, "store sizes to probe")
        ->required()
        ->delimiter(',');
    bench_cmd->add_option("--psi", bench.psi, "tree leaf capacity");
    bench_cmd->add_option("--trials", bench.trials,
                          "timed incorporations per size (multiple of 5)");
    bench_cmd->add_option("--dim", bench.dim, "embedding dimension");
    bench_cmd->add_option("--classes", bench.classes, "synthetic class count");
    bench_cmd->add_option("--sigma", bench.sigma, "intra-class noise");
    bench_cmd->add_option("--k", bench.k, "neighbor / ensemble size");
    bench_cmd->add_option("--train-iters", bench.train_iters,
                          "fixed optimizer iterations per retrain");
    bench_cmd->add_option("--seed", bench.seed, "rng seed");
    bench_cmd->add_option("--out", bench.out, "csv path (stdout when omitted)");

    ExportArgs exp;
    auto* export_cmd = app.add_subcommand("export", "report JSON to CSV curves");
    export_cmd->add_option("--report", exp.report, "run report path")->required();
    export_cmd->add_option("--out", exp.out, "csv path (stdout when omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "memprobe: " << e.what() << "\n";
        return 2;
    }

    try {
        if (gen_cmd->parsed()) return cmd_gen_synth(gen);
        if (run_cmd->parsed()) return cmd_run(run);
        if (bench_cmd->parsed()) return cmd_bench(bench);
        if (export_cmd->parsed()) return cmd_export(exp);
    } catch (const std::exception& e) {
        std::cerr << "memprobe: " << e.what() << "\n";
        return exit_code_for(e);
    }
    return 2;
}
