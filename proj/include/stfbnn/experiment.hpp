#pragma once

#include "stfbnn/attacks.hpp"
#include "stfbnn/bounds.hpp"
#include "stfbnn/stability.hpp"
#include "stfbnn/uncertainty.hpp"

#include <filesystem>

namespace stfbnn {

enum class Task {
    pretrain,
    stf_train,
    stability,
    ablation,
    evaluate,
    corruption_grid,
    threshold_curve,
    bound,
    scale_sweep,
    attack,
    adv_train,
    mi,
    demo
};

const char* to_string(Task t);
Task task_from_string(const std::string& s);
const std::vector<Task>& all_tasks();

struct DatasetSpec {
    std::string name = "moons"; // moons | blobs | fashion_mnist
    std::uint64_t seed = 0;     // data generation and corruption draws; shared by all run seeds
    std::size_t train_size = 2000;
    std::size_t test_size = 500;
    double noise = 0.1;
    // blobs: center i sits at spacing * (+-1) * e_(i mod dim)
    int num_centers = 4;
    int dim = 10;
    double spacing = 4.0;
    double blob_std = 1.0;
    // fashion_mnist: IDX directory, relative paths resolve against the data root
    std::string path = "fashion_mnist_subset";
    std::size_t train_per_class = 600;
    std::size_t test_per_class = 100;
    bool normalize = false;
};

struct EvalSpec {
    int mc_samples = 100;
    int ece_bins = 15;
    EceNormalization ece_normalization = EceNormalization::sample_count;
    std::vector<double> thresholds{0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99};
};

struct BoundSpec {
    int window_epochs = 5;
    double delta_conf = 0.05;
    int risk_samples = 100;
};

struct ScaleSweepSpec {
    int directions = 100;
    std::vector<double> deltas{1.0, 10.0, 100.0, 1e3, 1e4, 1e5, 1e6};
};

struct AttackSpec {
    std::vector<double> radii{0.0, 0.05, 0.1, 0.2};
    int steps = 10;
    std::optional<double> step_size;
    bool random_start = true;
    GradientMode gradient_mode = GradientMode::posterior_mean;
    double train_radius = 0.1; // adv_train only
};

struct MiSpec {
    MiScore score = MiScore::true_class;
};

struct ExperimentConfig {
    static constexpr int kSchemaVersion = 1;

    Task task = Task::pretrain;
    std::vector<std::uint64_t> seeds{0};
    std::string output_dir = "runs";
    DatasetSpec dataset;
    std::vector<Eigen::Index> hidden{32, 32};
    TrainConfig train;
    std::size_t bayes_layer = 1; // 1-based
    ElboConfig elbo;
    TrainConfig retrain; // stability
    EvalSpec eval;
    BoundSpec bound;
    ScaleSweepSpec scale_sweep;
    AttackSpec attack;
    MiSpec mi;

    ExperimentConfig();
    void validate() const;
};

/// Strict parse: unknown fields, wrong types and bad values raise UsageError
/// naming the offending field path.
ExperimentConfig config_from_json(const Json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Every field, defaults included.
Json config_to_json(const ExperimentConfig& cfg);
/// Digest of the canonical config without seeds and output_dir.
std::string config_hash(const ExperimentConfig& cfg);

/// Settings for the `demo` pipeline: small moons, binary logit, fast stages.
ExperimentConfig demo_config();

struct RunOptions {
    std::filesystem::path output_root;        // prefixes a relative output directory
    std::optional<std::filesystem::path> out; // replaces the configured output directory
    std::optional<std::uint64_t> seed;        // replaces the configured seeds
    std::filesystem::path data_root = ".";    // base for relative dataset paths
};

struct ExperimentReport {
    Task task = Task::pretrain;
    std::string config_hash;
    std::vector<std::uint64_t> seeds; // one entry except for multi-seed tasks
    Json metrics = Json::object();
    std::vector<std::string> artifacts; // file names inside `directory`
    std::filesystem::path directory;
    double wall_seconds = 0.0;
};

Json report_to_json(const ExperimentReport& r);

/// Runs every seed of the task, writing report.json (metrics), timing.json
/// (wall clock) and the task's artifacts under <out>/<task>/seed_<s>/.
/// Stability is a single multi-seed run written under <out>/stability/.
std::vector<ExperimentReport> run_experiment(const ExperimentConfig& cfg, const RunOptions& options);

struct TrainedData {
    Dataset train;
    Dataset test;
};

TrainedData load_datasets(const DatasetSpec& spec, const std::filesystem::path& data_root);
std::vector<Eigen::Index> model_dims(const ExperimentConfig& cfg, const Dataset& train);

struct MergedMetric {
    double mean = 0.0;
    double std = 0.0; // population std over reports
    std::size_t count = 0;
};

struct MergedReport {
    Task task = Task::pretrain;
    std::string config_hash;
    std::vector<std::uint64_t> seeds;
    std::map<std::string, MergedMetric> metrics; // numeric leaves, nested keys joined by '.'
};

/// Aggregates per-seed reports of one config; mixed hashes or tasks raise InputError.
MergedReport merge_reports(const std::vector<Json>& reports);
MergedReport merge_report_files(const std::vector<std::filesystem::path>& paths);
Json merged_to_json(const MergedReport& m);
void write_merged_csv(const std::filesystem::path& path, const MergedReport& m);

} // namespace stfbnn
