// Command-line entry point. Every task is a subcommand taking a JSON config.
#include "stfbnn/checkpoint.hpp"
#include "stfbnn/errors.hpp"
#include "stfbnn/experiment.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using namespace stfbnn;

namespace {

constexpr int kUsage = 2;
constexpr int kIo = 3;
constexpr int kInput = 4;
constexpr int kTraining = 5;

struct TaskArgs {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
};

void add_run_options(CLI::App* sub, TaskArgs& a, bool config_required)
{
    auto* c = sub->add_option("--config", a.config, "experiment config (JSON)");
    if (config_required) {
        c->required();
    }
    sub->add_option("--seed", a.seed, "run this seed only");
    sub->add_option("--out", a.out, "output directory");
}

int run_task(Task task, const TaskArgs& a, const fs::path& output_root, const fs::path& data_root)
{
    ExperimentConfig cfg = a.config.empty() ? demo_config() : load_config(a.config);
    if (cfg.task != task) {
        throw UsageError(std::string("task: config says '") + to_string(cfg.task) + "' but the subcommand is '" +
                         to_string(task) + "'");
    }
    RunOptions opts;
    opts.output_root = output_root;
    opts.data_root = data_root;
    opts.seed = a.seed;
    if (a.out) {
        opts.out = fs::path(*a.out);
    }
    for (const ExperimentReport& r : run_experiment(cfg, opts)) {
        std::cout << to_string(r.task) << " config_hash=" << r.config_hash << " -> " << r.directory.string() << '\n';
    }
    return 0;
}

int run_merge(const std::vector<std::string>& inputs, const std::string& out)
{
    std::vector<fs::path> paths(inputs.begin(), inputs.end());
    const MergedReport m = merge_report_files(paths);
    const fs::path dir(out);
    fs::create_directories(dir);
    write_json(dir / "merged.json", merged_to_json(m));
    write_merged_csv(dir / "merged.csv", m);
    std::cout << "merged " << m.seeds.size() << " seed(s), config_hash=" << m.config_hash << " -> " << dir.string()
              << '\n';
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"stfbnn: spatial-temporal-fusion Bayesian neural network experiments"};
    app.require_subcommand(1);

    fs::path output_root;
    if (const char* env = std::getenv("STFBNN_OUTPUT_ROOT")) {
        output_root = env;
    }
    std::string data_root = STFBNN_DATA_DIR;
    app.add_option("--data-root", data_root, "directory holding dataset files")->capture_default_str();

    std::vector<std::pair<Task, CLI::App*>> subs;
    std::vector<TaskArgs> args(all_tasks().size());
    for (std::size_t i = 0; i < all_tasks().size(); ++i) {
        const Task t = all_tasks()[i];
        auto* sub = app.add_subcommand(to_string(t), t == Task::demo ? "full pipeline smoke run" : "");
        add_run_options(sub, args[i], t != Task::demo);
        subs.emplace_back(t, sub);
    }

    std::vector<std::string> merge_inputs;
    std::string merge_out = "merged";
    auto* merge = app.add_subcommand("merge", "aggregate report.json files across seeds");
    merge->add_option("reports", merge_inputs, "report.json files")->required();
    merge->add_option("--out", merge_out, "output directory")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kUsage;
    }

    try {
        if (merge->parsed()) {
            return run_merge(merge_inputs, merge_out);
        }
        for (std::size_t i = 0; i < subs.size(); ++i) {
            if (subs[i].second->parsed()) {
                return run_task(subs[i].first, args[i], output_root, data_root);
            }
        }
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return kUsage;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << '\n';
        return kIo;
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << '\n';
        return kInput;
    } catch (const TrainingError& e) {
        std::cerr << "training error: " << e.what() << '\n';
        return kTraining;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
