// cobalt: two-stage concept discovery + concept-balanced classifier training
// on synthetic spurious-correlation datasets.
//
// Subcommands: gen, discover, assign, balance, train, eval, report.
// Exit codes: 0 success, 2 invalid config, 3 collapse abort, 4 missing artifacts.

#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "cobalt/pipeline.hpp"
#include "cobalt/report.hpp"

namespace fs = std::filesystem;
using namespace cobalt;

namespace {

struct GlobalOpts {
    std::string config_path;
    std::string out_dir = "run";
    std::string data_dir; // defaults to <out>/dataset
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::string sampler_flag, strategy_flag;

    fs::path dataset_dir() const {
        return data_dir.empty() ? fs::path(out_dir) / "dataset" : fs::path(data_dir);
    }

    TrainConfig load() const {
        TrainConfig cfg;
        if (!config_path.empty()) cfg = load_config(config_path);
        if (seed_set) {
            cfg.seed = seed;
            cfg.dataset.seed = seed;
        }
        if (!sampler_flag.empty()) cfg.stage2.sampler = sampler_flag;
        if (!strategy_flag.empty()) cfg.stage2.early_stop = strategy_flag;
        validate(cfg);
        return cfg;
    }
};

int run_gen(const GlobalOpts& g) {
    auto cfg = g.load();
    auto ds = generate_dataset(cfg.dataset);
    save_dataset(g.dataset_dir(), ds);
    std::cout << "dataset: " << ds.train.size() << " train / " << ds.val.size() << " val / "
              << ds.test.size() << " test -> " << g.dataset_dir().string() << "\n";
    return 0;
}

int run_discover(const GlobalOpts& g) {
    auto cfg = g.load();
    auto ds = load_dataset(g.dataset_dir());
    auto res = train_stage1(cfg, ds, g.out_dir);
    std::cout << "stage1: " << res.epoch_metrics.size() << " epochs, codes in use "
              << res.final_codes_in_use << ", assignments for " << res.train_records.size()
              << " train / " << res.val_records.size() << " val samples\n";
    return 0;
}

int run_assign(const GlobalOpts& g, const std::string& split) {
    auto cfg = g.load();
    auto ds = load_dataset(g.dataset_dir());
    auto model = load_stage1_model(cfg, g.out_dir);
    const auto* samples = split == "train" ? &ds.train : split == "val" ? &ds.val : &ds.test;
    auto records = assignment_pass(model, *samples, ds.spec.patch_size);
    save_assignments(paths::assignments(g.out_dir, split), records);
    std::cout << "assign: wrote " << records.size() << " records for split " << split << "\n";
    return 0;
}

int run_balance(const GlobalOpts& g) {
    auto cfg = g.load();
    auto ds = load_dataset(g.dataset_dir());
    const auto assign_path = paths::assignments(g.out_dir, "train");
    if (!fs::exists(assign_path))
        throw ArtifactError(strcat("balance: missing ", assign_path.string(), "; run discover first"));
    auto records = load_assignments(assign_path);
    auto table = build_cluster_table(records);
    auto model = load_stage1_model(cfg, g.out_dir);
    auto choice = silhouette_lambda(model, ds.train, ds.spec.patch_size, cfg.stage1.silhouette_max_points);
    const double lambda = cfg.stage2.lambda.value_or(choice.lambda);
    auto summary = cluster_summary_json(table, lambda, choice.score);
    summary["silhouette_points"] = choice.n_points;
    summary["silhouette_clusters"] = choice.n_clusters;
    {
        std::ofstream os(paths::cluster_summary(g.out_dir));
        os << summary.dump(2) << "\n";
    }
    std::cout << "balance: " << table.clusters.size() << " active clusters, silhouette "
              << choice.score << (choice.degenerate ? " (degenerate)" : "") << ", lambda " << lambda
              << "\n";
    return 0;
}

int run_train(const GlobalOpts& g) {
    auto cfg = g.load();
    auto ds = load_dataset(g.dataset_dir());
    auto res = train_stage2(cfg, ds, g.out_dir);
    std::cout << "stage2 (" << cfg.stage2.sampler << ", " << cfg.stage2.early_stop << "): best epoch "
              << res.best_epoch << ", criterion " << res.best_criterion;
    if (cfg.stage2.sampler == "cobalt") std::cout << ", lambda " << res.lambda_used;
    std::cout << "\n";
    return 0;
}

int run_eval(const GlobalOpts& g, const std::string& split, const std::string& grouping) {
    auto cfg = g.load();
    auto ds = load_dataset(g.dataset_dir());
    const auto dir = paths::stage2_dir(g.out_dir, cfg.stage2.sampler, cfg.stage2.early_stop);
    auto classifier = load_classifier(dir / "classifier.cbsn");
    const auto* samples = split == "train" ? &ds.train : split == "val" ? &ds.val : &ds.test;

    GroupAssignment groups;
    if (grouping == "ground_truth") {
        groups = ground_truth_grouping(*samples);
    } else {
        const auto rec_path = paths::assignments(g.out_dir, split);
        if (!fs::exists(rec_path))
            throw ArtifactError(strcat("eval: inferred grouping needs ", rec_path.string(),
                                       "; run `assign --split ", split, "` first"));
        groups = inferred_grouping(load_assignments(rec_path), *samples);
    }
    auto res = evaluate_split(classifier, *samples, groups, cfg.stage2.min_group_size);

    nlohmann::json j;
    j["split"] = split;
    j["grouping"] = grouping;
    j["average"] = res.average;
    j["worst_group"] = res.worst;
    auto gj = nlohmann::json::array();
    for (const auto& stat : res.table) {
        nlohmann::json row;
        row["class"] = stat.class_label;
        row["attribute"] = stat.attribute;
        row["size"] = stat.size;
        row["correct"] = stat.correct;
        row["accuracy"] = stat.accuracy;
        row["considered"] = stat.considered;
        gj.push_back(std::move(row));
    }
    j["groups"] = std::move(gj);
    {
        std::ofstream os(dir / strcat("eval_", split, "_", grouping, ".json"));
        os << j.dump(2) << "\n";
    }
    {
        std::ofstream os(dir / strcat("predictions_", split, ".ndjson"));
        for (std::size_t i = 0; i < samples->size(); ++i) {
            nlohmann::json row;
            row["sample_id"] = (*samples)[i].sample_id;
            row["y"] = (*samples)[i].class_label;
            row["pred"] = res.predictions[i];
            os << row.dump() << "\n";
        }
    }
    std::cout << "eval (" << split << ", " << grouping << "): average " << res.average
              << ", worst group " << res.worst << "\n";
    return 0;
}

int run_report(const GlobalOpts& g) {
    auto summary = report_run(g.out_dir);
    std::cout << "report: " << (fs::path(g.out_dir) / "report" / "summary.md").string() << " ("
              << summary["runs"].size() << " classifier runs)\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"concept discovery and concept-balanced classifier training"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--config", g.config_path, "JSON config file")->check(CLI::ExistingFile);
    app.add_option("--out", g.out_dir, "run directory (default: run)");
    app.add_option("--data", g.data_dir, "dataset directory (default: <out>/dataset)");
    auto* seed_opt = app.add_option("--seed", g.seed, "override the config seed");

    app.add_subcommand("gen", "generate the synthetic dataset");
    app.add_subcommand("discover", "stage 1: train concept discovery");

    auto* assign_cmd = app.add_subcommand("assign", "export assignment records for a split");
    std::string assign_split = "train";
    assign_cmd->add_option("--split", assign_split, "train|val|test")
        ->check(CLI::IsMember({"train", "val", "test"}));

    app.add_subcommand("balance", "build the cluster table and pick lambda");

    auto* train_cmd = app.add_subcommand("train", "stage 2: train the classifier");
    train_cmd->add_option("--sampler", g.sampler_flag, "cobalt|iid")
        ->check(CLI::IsMember({"cobalt", "iid"}));
    train_cmd->add_option("--early-stop", g.strategy_flag, "hg|ig|avg")
        ->check(CLI::IsMember({"hg", "ig", "avg"}));

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a trained classifier");
    std::string eval_split = "test", eval_grouping = "ground_truth";
    eval_cmd->add_option("--split", eval_split, "train|val|test")
        ->check(CLI::IsMember({"train", "val", "test"}));
    eval_cmd->add_option("--grouping", eval_grouping, "ground_truth|inferred")
        ->check(CLI::IsMember({"ground_truth", "inferred"}));
    eval_cmd->add_option("--sampler", g.sampler_flag, "cobalt|iid (locates the run)")
        ->check(CLI::IsMember({"cobalt", "iid"}));
    eval_cmd->add_option("--early-stop", g.strategy_flag, "hg|ig|avg (locates the run)")
        ->check(CLI::IsMember({"hg", "ig", "avg"}));

    app.add_subcommand("report", "summarize a finished run");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e); // --help and friends
        app.exit(e);
        return 2;
    }
    g.seed_set = seed_opt->count() > 0;

    try {
        if (app.got_subcommand("gen")) return run_gen(g);
        if (app.got_subcommand("discover")) return run_discover(g);
        if (app.got_subcommand("assign")) return run_assign(g, assign_split);
        if (app.got_subcommand("balance")) return run_balance(g);
        if (app.got_subcommand("train")) return run_train(g);
        if (app.got_subcommand("eval")) return run_eval(g, eval_split, eval_grouping);
        if (app.got_subcommand("report")) return run_report(g);
        std::cerr << "no subcommand\n";
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const CollapseError& e) {
        std::cerr << "collapse: " << e.what() << "\n";
        return 3;
    } catch (const ArtifactError& e) {
        std::cerr << "artifact error: " << e.what() << "\n";
        return 4;
    } catch (const std::invalid_argument& e) {
        std::cerr << "invalid input: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
