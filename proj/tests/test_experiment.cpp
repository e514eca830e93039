#include "stfbnn/checkpoint.hpp"
#include "stfbnn/errors.hpp"
#include "stfbnn/experiment.hpp"

#include <doctest.h>

#include <fstream>
#include <sstream>

using namespace stfbnn;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::stringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path scratch(const std::string& name)
{
    const fs::path p = fs::temp_directory_path() / ("stfbnn_test_experiment_" + name);
    fs::remove_all(p);
    return p;
}

std::string usage_message(const Json& j)
{
    try {
        config_from_json(j);
    } catch (const UsageError& e) {
        return e.what();
    }
    return "";
}

Json fake_report(const std::string& hash, std::uint64_t seed, double acc)
{
    return Json{{"format", "stfbnn-report"},
                {"version", 1},
                {"task", "evaluate"},
                {"config_hash", hash},
                {"seed", seed},
                {"metrics", {{"test", {{"accuracy", acc}}}, {"flag", true}}},
                {"artifacts", Json::array()}};
}

ExperimentConfig tiny(Task task)
{
    ExperimentConfig c = demo_config();
    c.task = task;
    c.dataset.train_size = 200;
    c.dataset.test_size = 100;
    c.hidden = {8, 8};
    c.train.epochs = 8;
    c.train.sgd.schedule = {};
    c.elbo.epochs = 4;
    c.elbo.sgd.schedule = {};
    c.retrain.epochs = 4;
    c.eval.mc_samples = 10;
    c.scale_sweep.directions = 5;
    c.bound.window_epochs = 2;
    c.bound.risk_samples = 10;
    return c;
}

} // namespace

TEST_CASE("config round-trips and validates strictly")
{
    const ExperimentConfig c = demo_config();
    const Json j = config_to_json(c);
    CHECK(config_to_json(config_from_json(j)) == j);
    CHECK(config_hash(config_from_json(j)) == config_hash(c));

    SUBCASE("unknown fields carry their path")
    {
        Json bad = j;
        bad["train"]["lerning_rate"] = 0.1;
        CHECK(usage_message(bad).find("train.lerning_rate: unknown field") != std::string::npos);
        bad = j;
        bad["colour"] = "red";
        CHECK(usage_message(bad).find("colour: unknown field") != std::string::npos);
    }
    SUBCASE("type errors carry their path")
    {
        Json bad = j;
        bad["stf"]["epochs"] = "ten";
        CHECK(usage_message(bad).find("stf.epochs") != std::string::npos);
        bad = j;
        bad["task"] = "train_everything";
        CHECK(usage_message(bad).find("train_everything") != std::string::npos);
    }
    SUBCASE("schema version is checked")
    {
        Json bad = j;
        bad["schema_version"] = 99;
        CHECK(usage_message(bad).find("schema_version") != std::string::npos);
    }
    SUBCASE("bad json file is a usage error, a missing one is an i/o error")
    {
        const fs::path dir = scratch("bad_json");
        fs::create_directories(dir);
        std::ofstream(dir / "c.json") << "{ not json";
        CHECK_THROWS_AS(load_config(dir / "c.json"), UsageError);
        CHECK_THROWS_AS(load_config(dir / "missing.json"), IoError);
        fs::remove_all(dir);
    }
}

TEST_CASE("config hash ignores seeds and output directory only")
{
    ExperimentConfig a = demo_config();
    ExperimentConfig b = a;
    b.seeds = {7, 8, 9};
    b.output_dir = "elsewhere";
    CHECK(config_hash(a) == config_hash(b));
    b.train.sgd.learning_rate *= 2.0;
    CHECK(config_hash(a) != config_hash(b));
    b = a;
    b.dataset.seed = 1;
    CHECK(config_hash(a) != config_hash(b));
}

TEST_CASE("shipped configs parse")
{
    int count = 0;
    for (const auto& entry : fs::directory_iterator(fs::path(STFBNN_SOURCE_DIR) / "configs")) {
        CAPTURE(entry.path().string());
        const ExperimentConfig c = load_config(entry.path());
        const std::string stem = entry.path().stem().string();
        CHECK(stem.rfind(to_string(c.task), 0) == 0);
        ++count;
    }
    CHECK(count >= 10);
}

TEST_CASE("merge")
{
    SUBCASE("one report gives mean = value and std = 0")
    {
        const MergedReport m = merge_reports({fake_report("abc", 0, 0.7)});
        CHECK(m.metrics.at("test.accuracy").mean == 0.7);
        CHECK(m.metrics.at("test.accuracy").std == 0.0);
        CHECK(m.metrics.at("flag").mean == 1.0);
    }
    SUBCASE("two reports average")
    {
        const MergedReport m = merge_reports({fake_report("abc", 0, 0.2), fake_report("abc", 1, 0.4)});
        CHECK(m.metrics.at("test.accuracy").mean == doctest::Approx(0.3).epsilon(1e-15));
        CHECK(m.metrics.at("test.accuracy").std == doctest::Approx(0.1).epsilon(1e-12));
        CHECK(m.metrics.at("test.accuracy").count == 2);
        CHECK(m.seeds == std::vector<std::uint64_t>{0, 1});
    }
    SUBCASE("mixed hashes or tasks are rejected")
    {
        CHECK_THROWS_AS(merge_reports({fake_report("abc", 0, 0.2), fake_report("abd", 1, 0.4)}), InputError);
        Json other = fake_report("abc", 1, 0.4);
        other["task"] = "attack";
        CHECK_THROWS_AS(merge_reports({fake_report("abc", 0, 0.2), other}), InputError);
        CHECK_THROWS_AS(merge_reports({}), InputError);
        CHECK_THROWS_AS(merge_reports({Json{{"x", 1}}}), InputError);
    }
    SUBCASE("csv names the hash and seeds")
    {
        const fs::path dir = scratch("merge_csv");
        write_merged_csv(dir / "m.csv", merge_reports({fake_report("abc", 3, 0.2), fake_report("abc", 5, 0.4)}));
        const std::string csv = slurp(dir / "m.csv");
        CHECK(csv.rfind("# config_hash=abc seed=3,5\nmetric,mean,std,count\n", 0) == 0);
        fs::remove_all(dir);
    }
}

TEST_CASE("dataset loading")
{
    DatasetSpec s;
    s.name = "blobs";
    s.train_size = 120;
    s.test_size = 40;
    const TrainedData d = load_datasets(s, STFBNN_DATA_DIR);
    CHECK(d.train.size() == 120);
    CHECK(d.test.size() == 40);
    CHECK(d.train.dim() == 10);
    CHECK(d.train.num_classes == 4);

    s.name = "fashion_mnist";
    s.path = "no_such_dir";
    CHECK_THROWS_AS(load_datasets(s, STFBNN_DATA_DIR), IoError);
    s.name = "mnist";
    CHECK_THROWS_AS(load_datasets(s, STFBNN_DATA_DIR), UsageError);

    ExperimentConfig c = demo_config();
    c.hidden = {5, 6};
    CHECK(model_dims(c, d.train) == std::vector<Eigen::Index>{10, 5, 6, 4});
}

TEST_CASE("demo run is deterministic and stamps every output")
{
    const ExperimentConfig cfg = tiny(Task::demo);
    const std::string hash = config_hash(cfg);
    std::vector<fs::path> dirs;
    for (const char* name : {"demo_a", "demo_b"}) {
        RunOptions o;
        o.out = scratch(name);
        o.seed = 3;
        const auto reports = run_experiment(cfg, o);
        REQUIRE(reports.size() == 1);
        CHECK(reports[0].directory == *o.out / "demo" / "seed_3");
        dirs.push_back(reports[0].directory);
    }
    int files = 0;
    for (const auto& entry : fs::directory_iterator(dirs[0])) {
        const std::string name = entry.path().filename().string();
        CAPTURE(name);
        const std::string a = slurp(entry.path());
        if (name != "timing.json") {
            CHECK(a == slurp(dirs[1] / name));
        }
        if (entry.path().extension() == ".csv") {
            CHECK(a.rfind("# config_hash=" + hash + " seed=3\n", 0) == 0);
        } else if (name == "stf.json") {
            CHECK(read_json(entry.path()).at("config_hash") == hash);
        } else if (name != "model.json") {
            const Json j = read_json(entry.path());
            CHECK(j.at("config_hash") == hash);
            CHECK(j.at("seed") == 3);
        }
        ++files;
    }
    CHECK(files >= 10);
    for (const auto& d : dirs) {
        fs::remove_all(d.parent_path().parent_path());
    }
}

TEST_CASE("per-seed tasks")
{
    for (Task t : {Task::pretrain, Task::stf_train, Task::evaluate, Task::ablation, Task::threshold_curve, Task::bound,
                   Task::scale_sweep, Task::attack, Task::adv_train, Task::mi}) {
        CAPTURE(to_string(t));
        ExperimentConfig cfg = tiny(t);
        cfg.seeds = {0, 1};
        RunOptions o;
        o.out = scratch(to_string(t));
        const auto reports = run_experiment(cfg, o);
        REQUIRE(reports.size() == 2);
        const Json j = read_json(reports[1].directory / "report.json");
        CHECK(j.at("seed") == 1);
        CHECK(j.at("task") == to_string(t));
        CHECK(j.at("metrics").is_object());
        for (const auto& a : j.at("artifacts")) {
            CHECK(fs::exists(reports[1].directory / a.get<std::string>()));
        }
        if (t == Task::ablation) {
            CHECK(j["metrics"]["layers"].size() == 3);
        }
        const MergedReport m = merge_report_files({reports[0].directory / "report.json",
                                                   reports[1].directory / "report.json"});
        CHECK(m.seeds.size() == 2);
        fs::remove_all(*o.out);
    }
}

TEST_CASE("corruption grid covers every cell")
{
    ExperimentConfig cfg = tiny(Task::corruption_grid);
    cfg.dataset.name = "blobs";
    RunOptions o;
    o.out = scratch("grid");
    const auto reports = run_experiment(cfg, o);
    const Json j = read_json(reports[0].directory / "report.json");
    CHECK(j["metrics"]["cells"].size() == 20);
    fs::remove_all(*o.out);
}

TEST_CASE("stability task writes a seeds-by-layers matrix")
{
    ExperimentConfig cfg = tiny(Task::stability);
    cfg.dataset.name = "blobs";
    cfg.hidden = {8, 8, 8, 8, 8};
    cfg.seeds = {0, 1, 2, 3, 4};
    RunOptions o;
    o.out = scratch("stability");
    const auto reports = run_experiment(cfg, o);
    REQUIRE(reports.size() == 1);
    const Json j = read_json(reports[0].directory / "stability_report.json");
    REQUIRE(j["per_seed"].size() == 5);
    CHECK(j["per_seed"][0].size() == 6);
    CHECK(j.at("config_hash") == config_hash(cfg));

    cfg.seeds = {0};
    CHECK_THROWS_AS(run_experiment(cfg, o), UsageError);
    fs::remove_all(*o.out);
}

TEST_CASE("scale sweep needs a binary model with the first layer variational")
{
    ExperimentConfig cfg = tiny(Task::scale_sweep);
    cfg.dataset.name = "blobs";
    RunOptions o;
    o.out = scratch("sweep");
    CHECK_THROWS_AS(run_experiment(cfg, o), UsageError);
    fs::remove_all(*o.out);
}
