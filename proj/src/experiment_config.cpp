#include "stfbnn/experiment.hpp"

#include "stfbnn/checkpoint.hpp"

#include <set>

namespace stfbnn {

namespace {

constexpr std::array kTaskNames{"pretrain", "stf_train",  "stability",   "ablation", "evaluate",
                                "corruption_grid", "threshold_curve", "bound", "scale_sweep", "attack",
                                "adv_train", "mi",         "demo"};

// Walks one JSON object, remembering which keys were read so that anything
// left over can be rejected with its full path.
class Reader {
public:
    Reader(const Json& j, std::string path) : j_(j), path_(std::move(path))
    {
        if (!j_.is_object()) {
            throw UsageError(where() + ": expected an object");
        }
    }

    template <typename T>
    void get(const char* key, T& out)
    {
        if (!j_.contains(key)) {
            return;
        }
        seen_.insert(key);
        out = convert<T>(j_.at(key), field(key));
    }

    template <typename T>
    void get(const char* key, std::optional<T>& out)
    {
        if (!j_.contains(key)) {
            return;
        }
        seen_.insert(key);
        if (j_.at(key).is_null()) {
            out.reset();
        } else {
            out = convert<T>(j_.at(key), field(key));
        }
    }

    bool has(const char* key) const { return j_.contains(key); }

    Reader child(const char* key)
    {
        seen_.insert(key);
        return Reader(j_.at(key), field(key));
    }

    void finish() const
    {
        for (const auto& [k, v] : j_.items()) {
            if (!seen_.contains(k)) {
                throw UsageError(field(k.c_str()) + ": unknown field");
            }
        }
    }

    std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }
    std::string where() const { return path_.empty() ? "config" : path_; }

private:
    template <typename T>
    static T convert(const Json& v, const std::string& path)
    {
        try {
            if constexpr (std::is_same_v<T, bool>) {
                if (!v.is_boolean()) {
                    throw UsageError(path + ": expected a boolean");
                }
            } else if constexpr (std::is_integral_v<T>) {
                if (!v.is_number_integer()) {
                    throw UsageError(path + ": expected an integer");
                }
                if (std::is_unsigned_v<T> && v.get<long long>() < 0 && !v.is_number_unsigned()) {
                    throw UsageError(path + ": expected a nonnegative integer");
                }
            } else if constexpr (std::is_floating_point_v<T>) {
                if (!v.is_number()) {
                    throw UsageError(path + ": expected a number");
                }
            } else if constexpr (std::is_same_v<T, std::string>) {
                if (!v.is_string()) {
                    throw UsageError(path + ": expected a string");
                }
            }
            return v.get<T>();
        } catch (const Json::exception&) {
            throw UsageError(path + ": wrong type");
        }
    }

    const Json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

template <typename F>
void with_child(Reader& r, const char* key, F&& f)
{
    if (r.has(key)) {
        Reader c = r.child(key);
        f(c);
        c.finish();
    }
}

void read_schedule(Reader& r, std::vector<std::pair<int, double>>& out)
{
    Json raw;
    r.get("schedule", raw);
    if (raw.is_null()) {
        return;
    }
    const std::string path = r.field("schedule");
    if (!raw.is_array()) {
        throw UsageError(path + ": expected an array of [epoch, factor] pairs");
    }
    out.clear();
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const Json& e = raw[i];
        if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() || !e[1].is_number()) {
            throw UsageError(path + "[" + std::to_string(i) + "]: expected [epoch, factor]");
        }
        out.emplace_back(e[0].get<int>(), e[1].get<double>());
    }
}

void read_sgd(Reader& r, SgdConfig& sgd)
{
    r.get("learning_rate", sgd.learning_rate);
    r.get("momentum", sgd.momentum);
    r.get("weight_decay", sgd.weight_decay);
    read_schedule(r, sgd.schedule);
}

void read_train(Reader& r, TrainConfig& t)
{
    r.get("epochs", t.epochs);
    r.get("batch_size", t.batch_size);
    read_sgd(r, t.sgd);
    r.get("patience", t.patience);
    r.get("min_improvement", t.min_improvement);
}

Json schedule_json(const std::vector<std::pair<int, double>>& s)
{
    Json a = Json::array();
    for (const auto& [e, f] : s) {
        a.push_back(Json::array({e, f}));
    }
    return a;
}

Json train_json(const TrainConfig& t)
{
    return Json{{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"learning_rate", t.sgd.learning_rate},
                {"momentum", t.sgd.momentum},
                {"weight_decay", t.sgd.weight_decay},
                {"schedule", schedule_json(t.sgd.schedule)},
                {"patience", t.patience},
                {"min_improvement", t.min_improvement}};
}

template <typename Enum, typename Parse>
void read_enum(Reader& r, const char* key, Enum& out, Parse parse)
{
    std::string s;
    r.get(key, s);
    if (s.empty()) {
        return;
    }
    try {
        out = parse(s);
    } catch (const Error& e) {
        throw UsageError(r.field(key) + ": " + e.what());
    }
}

void check(bool ok, const std::string& what)
{
    if (!ok) {
        throw UsageError(what);
    }
}

} // namespace

const char* to_string(Task t)
{
    return kTaskNames[static_cast<std::size_t>(t)];
}

Task task_from_string(const std::string& s)
{
    for (std::size_t i = 0; i < kTaskNames.size(); ++i) {
        if (s == kTaskNames[i]) {
            return static_cast<Task>(i);
        }
    }
    throw UsageError("unknown task '" + s + "'");
}

const std::vector<Task>& all_tasks()
{
    static const std::vector<Task> tasks = [] {
        std::vector<Task> t;
        for (std::size_t i = 0; i < kTaskNames.size(); ++i) {
            t.push_back(static_cast<Task>(i));
        }
        return t;
    }();
    return tasks;
}

ExperimentConfig::ExperimentConfig()
{
    train.epochs = 60;
    train.batch_size = 32;
    train.sgd.learning_rate = 0.05;
    train.sgd.schedule = {{40, 0.2}};
    elbo.batch_size = 32;
    retrain = train;
    retrain.patience = 5;
    retrain.min_improvement = 1e-4;
}

void ExperimentConfig::validate() const
{
    check(!seeds.empty(), "seeds: at least one seed is required");
    check(!output_dir.empty(), "output_dir: must not be empty");
    const auto& d = dataset;
    check(d.name == "moons" || d.name == "blobs" || d.name == "fashion_mnist",
          "dataset.name: expected moons, blobs or fashion_mnist");
    if (d.name != "fashion_mnist") {
        check(d.train_size > 0, "dataset.train_size: must be positive");
        check(d.test_size > 0, "dataset.test_size: must be positive");
    } else {
        check(d.train_per_class > 0, "dataset.train_per_class: must be positive");
        check(d.test_per_class > 0, "dataset.test_per_class: must be positive");
    }
    check(d.noise >= 0.0, "dataset.noise: must be nonnegative");
    check(d.num_centers >= 2, "dataset.num_centers: need at least two classes");
    check(d.dim >= 1, "dataset.dim: must be positive");
    check(d.blob_std >= 0.0, "dataset.blob_std: must be nonnegative");
    for (auto h : hidden) {
        check(h > 0, "model.hidden: widths must be positive");
    }
    check(bayes_layer >= 1 && bayes_layer <= hidden.size() + 1, "stf.bayes_layer: must lie in 1..depth");
    try {
        train.validate();
    } catch (const Error& e) {
        throw UsageError(std::string("train: ") + e.what());
    }
    try {
        retrain.validate();
    } catch (const Error& e) {
        throw UsageError(std::string("stability.retrain: ") + e.what());
    }
    try {
        elbo.validate();
    } catch (const Error& e) {
        throw UsageError(std::string("stf: ") + e.what());
    }
    check(eval.mc_samples >= 1, "eval.mc_samples: must be at least 1");
    check(eval.ece_bins >= 1, "eval.ece_bins: must be at least 1");
    check(bound.window_epochs >= 1 && bound.window_epochs <= train.epochs,
          "bound.window_epochs: must lie in 1..train.epochs");
    check(bound.delta_conf > 0.0 && bound.delta_conf < 1.0, "bound.delta_conf: must lie in (0, 1)");
    check(bound.risk_samples >= 1, "bound.risk_samples: must be at least 1");
    check(scale_sweep.directions >= 1, "scale_sweep.directions: must be at least 1");
    check(!scale_sweep.deltas.empty(), "scale_sweep.deltas: must not be empty");
    for (std::size_t i = 0; i < scale_sweep.deltas.size(); ++i) {
        check(scale_sweep.deltas[i] > 0.0 && (i == 0 || scale_sweep.deltas[i] > scale_sweep.deltas[i - 1]),
              "scale_sweep.deltas: must be positive and increasing");
    }
    for (double r : attack.radii) {
        check(r >= 0.0, "attack.radii: must be nonnegative");
    }
    check(attack.steps >= 1, "attack.steps: must be at least 1");
    check(!attack.step_size || *attack.step_size > 0.0, "attack.step_size: must be positive");
    check(attack.train_radius >= 0.0, "attack.train_radius: must be nonnegative");
}

ExperimentConfig config_from_json(const Json& j)
{
    ExperimentConfig c;
    Reader r(j, "");
    int version = 0;
    r.get("schema_version", version);
    if (version != ExperimentConfig::kSchemaVersion) {
        throw UsageError("schema_version: expected " + std::to_string(ExperimentConfig::kSchemaVersion));
    }
    read_enum(r, "task", c.task, task_from_string);
    r.get("seeds", c.seeds);
    r.get("output_dir", c.output_dir);
    with_child(r, "dataset", [&](Reader& d) {
        auto& s = c.dataset;
        d.get("name", s.name);
        d.get("seed", s.seed);
        d.get("train_size", s.train_size);
        d.get("test_size", s.test_size);
        d.get("noise", s.noise);
        d.get("num_centers", s.num_centers);
        d.get("dim", s.dim);
        d.get("spacing", s.spacing);
        d.get("blob_std", s.blob_std);
        d.get("path", s.path);
        d.get("train_per_class", s.train_per_class);
        d.get("test_per_class", s.test_per_class);
        d.get("normalize", s.normalize);
    });
    with_child(r, "model", [&](Reader& m) { m.get("hidden", c.hidden); });
    with_child(r, "train", [&](Reader& t) { read_train(t, c.train); });
    with_child(r, "stf", [&](Reader& s) {
        s.get("bayes_layer", c.bayes_layer);
        s.get("epochs", c.elbo.epochs);
        s.get("batch_size", c.elbo.batch_size);
        read_sgd(s, c.elbo.sgd);
        read_enum(s, "kl_weight", c.elbo.kl_weight_mode, kl_weight_mode_from_string);
        s.get("mc_samples_per_step", c.elbo.mc_samples_per_step);
        with_child(s, "init", [&](Reader& i) {
            i.get("mu_std", c.elbo.init.mu_std);
            i.get("rho_mean", c.elbo.init.rho_mean);
            i.get("rho_std", c.elbo.init.rho_std);
        });
    });
    with_child(r, "stability", [&](Reader& s) { with_child(s, "retrain", [&](Reader& t) { read_train(t, c.retrain); }); });
    with_child(r, "eval", [&](Reader& e) {
        e.get("mc_samples", c.eval.mc_samples);
        e.get("ece_bins", c.eval.ece_bins);
        read_enum(e, "ece_normalization", c.eval.ece_normalization, ece_normalization_from_string);
        e.get("thresholds", c.eval.thresholds);
    });
    with_child(r, "bound", [&](Reader& b) {
        b.get("window_epochs", c.bound.window_epochs);
        b.get("delta_conf", c.bound.delta_conf);
        b.get("risk_samples", c.bound.risk_samples);
    });
    with_child(r, "scale_sweep", [&](Reader& s) {
        s.get("directions", c.scale_sweep.directions);
        s.get("deltas", c.scale_sweep.deltas);
    });
    with_child(r, "attack", [&](Reader& a) {
        a.get("radii", c.attack.radii);
        a.get("steps", c.attack.steps);
        a.get("step_size", c.attack.step_size);
        a.get("random_start", c.attack.random_start);
        read_enum(a, "gradient_mode", c.attack.gradient_mode, gradient_mode_from_string);
        a.get("train_radius", c.attack.train_radius);
    });
    with_child(r, "mi", [&](Reader& m) { read_enum(m, "score", c.mi.score, mi_score_from_string); });
    r.finish();
    c.validate();
    return c;
}

ExperimentConfig load_config(const std::filesystem::path& path)
{
    Json j;
    try {
        j = read_json(path);
    } catch (const FormatError& e) {
        throw UsageError(path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

Json config_to_json(const ExperimentConfig& c)
{
    const auto& d = c.dataset;
    Json j{{"schema_version", ExperimentConfig::kSchemaVersion},
           {"task", to_string(c.task)},
           {"seeds", c.seeds},
           {"output_dir", c.output_dir}};
    j["dataset"] = Json{{"name", d.name},
                        {"seed", d.seed},
                        {"train_size", d.train_size},
                        {"test_size", d.test_size},
                        {"noise", d.noise},
                        {"num_centers", d.num_centers},
                        {"dim", d.dim},
                        {"spacing", d.spacing},
                        {"blob_std", d.blob_std},
                        {"path", d.path},
                        {"train_per_class", d.train_per_class},
                        {"test_per_class", d.test_per_class},
                        {"normalize", d.normalize}};
    j["model"] = Json{{"hidden", c.hidden}};
    j["train"] = train_json(c.train);
    j["stf"] = Json{{"bayes_layer", c.bayes_layer},
                    {"epochs", c.elbo.epochs},
                    {"batch_size", c.elbo.batch_size},
                    {"learning_rate", c.elbo.sgd.learning_rate},
                    {"momentum", c.elbo.sgd.momentum},
                    {"weight_decay", c.elbo.sgd.weight_decay},
                    {"schedule", schedule_json(c.elbo.sgd.schedule)},
                    {"kl_weight", to_string(c.elbo.kl_weight_mode)},
                    {"mc_samples_per_step", c.elbo.mc_samples_per_step},
                    {"init",
                     {{"mu_std", c.elbo.init.mu_std},
                      {"rho_mean", c.elbo.init.rho_mean},
                      {"rho_std", c.elbo.init.rho_std}}}};
    j["stability"] = Json{{"retrain", train_json(c.retrain)}};
    j["eval"] = Json{{"mc_samples", c.eval.mc_samples},
                     {"ece_bins", c.eval.ece_bins},
                     {"ece_normalization", to_string(c.eval.ece_normalization)},
                     {"thresholds", c.eval.thresholds}};
    j["bound"] = Json{{"window_epochs", c.bound.window_epochs},
                      {"delta_conf", c.bound.delta_conf},
                      {"risk_samples", c.bound.risk_samples}};
    j["scale_sweep"] = Json{{"directions", c.scale_sweep.directions}, {"deltas", c.scale_sweep.deltas}};
    j["attack"] = Json{{"radii", c.attack.radii},
                       {"steps", c.attack.steps},
                       {"step_size", c.attack.step_size ? Json(*c.attack.step_size) : Json(nullptr)},
                       {"random_start", c.attack.random_start},
                       {"gradient_mode", to_string(c.attack.gradient_mode)},
                       {"train_radius", c.attack.train_radius}};
    j["mi"] = Json{{"score", to_string(c.mi.score)}};
    return j;
}

std::string config_hash(const ExperimentConfig& cfg)
{
    Json j = config_to_json(cfg);
    j.erase("seeds");
    j.erase("output_dir");
    return json_digest(j);
}

ExperimentConfig demo_config()
{
    ExperimentConfig c;
    c.task = Task::demo;
    c.output_dir = "runs/demo";
    c.dataset.train_size = 600;
    c.dataset.test_size = 300;
    c.hidden = {16, 16};
    c.train.epochs = 30;
    c.train.sgd.schedule = {{20, 0.2}};
    c.elbo.epochs = 10;
    c.elbo.sgd.schedule = {{6, 0.2}};
    c.retrain.epochs = 20;
    c.retrain.batch_size = 32;
    c.retrain.sgd.learning_rate = 0.05;
    c.eval.mc_samples = 50;
    c.bound.window_epochs = 3;
    c.bound.risk_samples = 50;
    c.scale_sweep.directions = 20;
    return c;
}

} // namespace stfbnn
