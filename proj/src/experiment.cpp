#include "stfbnn/experiment.hpp"

#include "stfbnn/checkpoint.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

namespace stfbnn {

namespace fs = std::filesystem;

namespace {

// Prepends a provenance comment so every CSV names its config and seed.
void stamp_csv(const fs::path& path, const std::string& hash, const std::string& seed)
{
    std::stringstream body;
    {
        std::ifstream in(path);
        body << in.rdbuf();
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out << "# config_hash=" << hash << " seed=" << seed << '\n' << body.str();
}

struct Context {
    const ExperimentConfig& cfg;
    const TrainedData& data;
    std::string hash;
    std::uint64_t seed = 0;
    fs::path dir;
    Prng root;
    ExperimentReport report;

    Context(const ExperimentConfig& c, const TrainedData& d, std::string h, std::uint64_t s, fs::path out)
        : cfg(c), data(d), hash(std::move(h)), seed(s), dir(std::move(out)), root(s)
    {
    }

    Prng stream(const char* name) const { return root.derive(name); }

    void json(const std::string& name, Json body)
    {
        body["config_hash"] = hash;
        body["seed"] = seed;
        write_json(dir / name, body);
        report.artifacts.push_back(name);
    }

    void csv(const std::string& name)
    {
        stamp_csv(dir / name, hash, std::to_string(seed));
        report.artifacts.push_back(name);
    }
};

struct Phase1 {
    Mlp model;
    TrainResult result;
};

Phase1 pretrain(Context& ctx, const TrainHooks& hooks = {})
{
    Prng init = ctx.stream("init");
    Prng train = ctx.stream("train");
    const auto dims = model_dims(ctx.cfg, ctx.data.train);
    Mlp m = Mlp::he_init(dims, init);
    TrainResult r = train_deterministic(m, ctx.data.train.features, ctx.data.train.labels, ctx.cfg.train, train, hooks);
    return {r.model, r};
}

StfTrainResult phase2(Context& ctx, const Mlp& pretrained, std::size_t bayes_layer)
{
    Prng p = ctx.stream("stf").derive(bayes_layer);
    return stf_train(pretrained, bayes_layer, ctx.data.train, ctx.cfg.elbo, p);
}

struct Scored {
    PredictiveSummary summary;
    EceReport ece;
};

Scored score(const ExperimentConfig& cfg, const PredictiveSummary& s, const Labels& y)
{
    return {s, ece(s, y, cfg.eval.ece_bins, cfg.eval.ece_normalization)};
}

Json score_json(const Scored& s, const Labels& y)
{
    return Json{{"accuracy", s.summary.accuracy(y)}, {"ece", s.ece.ece}};
}

Json curve_json(const std::vector<double>& v)
{
    return Json(v);
}

void save_models(Context& ctx, const Mlp& base, const StfModel* stf)
{
    Json m = mlp_to_json(base);
    ctx.json("model.json", m);
    if (stf) {
        ctx.json("stf.json", stf_to_json(*stf, ctx.hash));
    }
}

// ------------------------------------------------------------------ tasks

void run_pretrain(Context& ctx)
{
    const Phase1 p = pretrain(ctx);
    const auto& d = ctx.data;
    const Scored test = score(ctx.cfg, predict_deterministic(p.model, d.test.features), d.test.labels);
    ctx.report.metrics = Json{{"train_accuracy", accuracy(p.model, d.train.features, d.train.labels)},
                              {"test_accuracy", test.summary.accuracy(d.test.labels)},
                              {"test_ece", test.ece.ece},
                              {"epochs_run", p.result.epochs_run},
                              {"final_train_loss", p.result.loss_curve.back()},
                              {"loss_curve", curve_json(p.result.loss_curve)}};
    save_models(ctx, p.model, nullptr);
}

struct BothModels {
    Mlp base;
    StfTrainResult stf;
};

BothModels pretrain_and_stf(Context& ctx)
{
    const Phase1 p = pretrain(ctx);
    return {p.model, phase2(ctx, p.model, ctx.cfg.bayes_layer)};
}

Json compare_on(Context& ctx, const BothModels& m, const Dataset& d, Prng& prng, Scored* base_out = nullptr,
                Scored* stf_out = nullptr)
{
    const Scored b = score(ctx.cfg, predict_deterministic(m.base, d.features), d.labels);
    const Scored s = score(ctx.cfg, mc_predict(m.stf.model, d.features, ctx.cfg.eval.mc_samples, prng), d.labels);
    if (base_out) {
        *base_out = b;
    }
    if (stf_out) {
        *stf_out = s;
    }
    return Json{{"baseline", score_json(b, d.labels)}, {"stf", score_json(s, d.labels)}};
}

Json stf_summary(const StfTrainResult& r)
{
    const VariationalLayer& v = r.model.bayes();
    return Json{{"bayes_layer", r.model.bayes_index() + 1},
                {"final_loss", r.loss_curve.back()},
                {"final_nll", r.nll_curve.back()},
                {"final_kl", r.kl_curve.back()},
                {"sigma_w_mean", v.sigma_w().mean()},
                {"loss_curve", curve_json(r.loss_curve)}};
}

void run_stf_train(Context& ctx)
{
    const BothModels m = pretrain_and_stf(ctx);
    Prng p = ctx.stream("eval");
    Json cmp = compare_on(ctx, m, ctx.data.test, p);
    ctx.report.metrics = Json{{"test", cmp},
                              {"accuracy_gap", cmp["stf"]["accuracy"].get<double>() -
                                                   cmp["baseline"]["accuracy"].get<double>()},
                              {"stf", stf_summary(m.stf)}};
    save_models(ctx, m.base, &m.stf.model);
}

void run_evaluate(Context& ctx)
{
    const BothModels m = pretrain_and_stf(ctx);
    Prng p = ctx.stream("eval");
    Scored b;
    Scored s;
    ctx.report.metrics = Json{{"test", compare_on(ctx, m, ctx.data.test, p, &b, &s)}, {"stf", stf_summary(m.stf)}};
    write_ece_csv(ctx.dir / "baseline_ece_bins.csv", b.ece);
    ctx.csv("baseline_ece_bins.csv");
    write_ece_csv(ctx.dir / "stf_ece_bins.csv", s.ece);
    ctx.csv("stf_ece_bins.csv");
    ctx.json("reliability.json", Json{{"baseline", ece_to_json(b.ece)}, {"stf", ece_to_json(s.ece)}});
    save_models(ctx, m.base, &m.stf.model);
}

void run_ablation(Context& ctx)
{
    const Phase1 p = pretrain(ctx);
    Prng ep = ctx.stream("eval");
    const auto& test = ctx.data.test;
    const Scored base = score(ctx.cfg, predict_deterministic(p.model, test.features), test.labels);
    Json rows = Json::array();
    const fs::path csv = ctx.dir / "ablation.csv";
    std::ofstream out(csv);
    if (!out) {
        throw IoError("cannot write " + csv.string());
    }
    out.precision(17);
    out << "bayes_layer,accuracy,ece\n";
    for (std::size_t layer = 1; layer <= p.model.depth(); ++layer) {
        const StfTrainResult r = phase2(ctx, p.model, layer);
        Prng lp = ep.derive(layer);
        const Scored s = score(ctx.cfg, mc_predict(r.model, test.features, ctx.cfg.eval.mc_samples, lp), test.labels);
        const double acc = s.summary.accuracy(test.labels);
        rows.push_back(Json{{"bayes_layer", layer}, {"accuracy", acc}, {"ece", s.ece.ece}});
        out << layer << ',' << acc << ',' << s.ece.ece << '\n';
    }
    out.close();
    ctx.csv("ablation.csv");
    ctx.report.metrics = Json{{"baseline", score_json(base, test.labels)}, {"layers", rows}};
}

Json highest_shared_threshold(const std::vector<ThresholdPoint>& b, const std::vector<ThresholdPoint>& s)
{
    for (std::size_t i = b.size(); i-- > 0;) {
        if (b[i].retained > 0 && s[i].retained > 0) {
            return Json{{"threshold", b[i].threshold},
                        {"baseline_accuracy", *b[i].accuracy},
                        {"stf_accuracy", *s[i].accuracy},
                        {"baseline_coverage", b[i].coverage},
                        {"stf_coverage", s[i].coverage}};
        }
    }
    return Json(nullptr);
}

void run_corruption_grid(Context& ctx)
{
    const BothModels m = pretrain_and_stf(ctx);
    Prng ep = ctx.stream("eval");
    Scored clean_b;
    Scored clean_s;
    Json clean = compare_on(ctx, m, ctx.data.test, ep, &clean_b, &clean_s);
    const auto bc = accuracy_at_threshold(clean_b.summary, ctx.data.test.labels, ctx.cfg.eval.thresholds);
    const auto sc = accuracy_at_threshold(clean_s.summary, ctx.data.test.labels, ctx.cfg.eval.thresholds);
    write_threshold_csv(ctx.dir / "baseline_threshold_curve.csv", bc);
    ctx.csv("baseline_threshold_curve.csv");
    write_threshold_csv(ctx.dir / "stf_threshold_curve.csv", sc);
    ctx.csv("stf_threshold_curve.csv");
    Json cells = Json::array();
    const fs::path csv = ctx.dir / "corruption_grid.csv";
    std::ofstream out(csv);
    if (!out) {
        throw IoError("cannot write " + csv.string());
    }
    out.precision(17);
    out << "corruption,severity,baseline_accuracy,baseline_ece,stf_accuracy,stf_ece\n";
    // corruption draws depend on the data seed only, so every run seed sees the same cells
    const Prng corrupt_root = Prng(ctx.cfg.dataset.seed).derive("corruption");
    int stf_better = 0;
    const auto grid = corruption_grid();
    for (const CorruptionSpec& spec : grid) {
        Prng cp = corrupt_root.derive(spec.name());
        const Dataset shifted = corrupt(ctx.data.test, spec, cp);
        Prng mp = ep.derive(spec.name());
        Json c = compare_on(ctx, m, shifted, mp);
        const double be = c["baseline"]["ece"];
        const double se = c["stf"]["ece"];
        stf_better += se <= be;
        out << to_string(spec.kind) << ',' << spec.severity << ',' << c["baseline"]["accuracy"].get<double>() << ','
            << be << ',' << c["stf"]["accuracy"].get<double>() << ',' << se << '\n';
        c["corruption"] = to_string(spec.kind);
        c["severity"] = spec.severity;
        cells.push_back(c);
    }
    out.close();
    ctx.csv("corruption_grid.csv");
    ctx.report.metrics = Json{{"clean", clean},
                              {"highest_shared", highest_shared_threshold(bc, sc)},
                              {"cells", cells},
                              {"stf_ece_not_worse_fraction",
                               static_cast<double>(stf_better) / static_cast<double>(grid.size())}};
}

void run_threshold_curve(Context& ctx)
{
    const BothModels m = pretrain_and_stf(ctx);
    Prng ep = ctx.stream("eval");
    const auto& test = ctx.data.test;
    const PredictiveSummary bs = predict_deterministic(m.base, test.features);
    const PredictiveSummary ss = mc_predict(m.stf.model, test.features, ctx.cfg.eval.mc_samples, ep);
    const auto bc = accuracy_at_threshold(bs, test.labels, ctx.cfg.eval.thresholds);
    const auto sc = accuracy_at_threshold(ss, test.labels, ctx.cfg.eval.thresholds);
    write_threshold_csv(ctx.dir / "baseline_threshold_curve.csv", bc);
    ctx.csv("baseline_threshold_curve.csv");
    write_threshold_csv(ctx.dir / "stf_threshold_curve.csv", sc);
    ctx.csv("stf_threshold_curve.csv");
    ctx.report.metrics = Json{{"baseline", threshold_curve_to_json(bc)},
                              {"stf", threshold_curve_to_json(sc)},
                              {"highest_shared", highest_shared_threshold(bc, sc)}};
}

BoundReport bound_for(Context& ctx, const Phase1& p, const StfTrainResult& r, const Sigma2Estimate& s2)
{
    const auto& d = ctx.data;
    Prng rp = ctx.stream("risk");
    const double r_hat = empirical_risk_mc(r.model, d.train.features, d.train.labels, ctx.cfg.bound.risk_samples, rp);
    const double test_risk =
        empirical_risk_mc(r.model, d.test.features, d.test.labels, ctx.cfg.bound.risk_samples, rp);
    BoundReport b = pac_bayes_bound(delta_term(r.model.bayes(), s2), d.train.size(), ctx.cfg.bound.delta_conf, r_hat,
                                    test_risk);
    b.sigma2_iterates = s2.iterates;
    (void)p;
    return b;
}

Phase1 pretrain_with_sigma2(Context& ctx, Sigma2Estimate& s2)
{
    IterateVariance acc(ctx.cfg.train.epochs, ctx.cfg.bound.window_epochs, ctx.cfg.bayes_layer - 1);
    TrainHooks hooks;
    hooks.after_step = acc.hook();
    Phase1 p = pretrain(ctx, hooks);
    if (p.result.epochs_run < ctx.cfg.train.epochs) {
        throw UsageError("bound: early stopping ended training before the iterate window");
    }
    s2 = acc.finish();
    return p;
}

Json sigma2_summary(const Sigma2Estimate& s)
{
    const double floor_hits = static_cast<double>((s.variance.array() <= s.floor).count());
    return Json{{"iterates", s.iterates},
                {"window_epochs", s.window_epochs},
                {"scalars", s.variance.size()},
                {"min", s.variance.minCoeff()},
                {"mean", s.variance.mean()},
                {"max", s.variance.maxCoeff()},
                {"floored_fraction", floor_hits / static_cast<double>(s.variance.size())}};
}

void run_bound(Context& ctx)
{
    Sigma2Estimate s2;
    const Phase1 p = pretrain_with_sigma2(ctx, s2);
    const StfTrainResult r = phase2(ctx, p.model, ctx.cfg.bayes_layer);
    const BoundReport b = bound_for(ctx, p, r, s2);
    Json j = bound_to_json(b);
    j["sigma2"] = sigma2_summary(s2);
    ctx.json("bound_report.json", j);
    ctx.report.metrics = j;
}

Json sweep_metrics(const ScaleSweep& sweep)
{
    double worst = -std::numeric_limits<double>::infinity();
    for (const auto& row : sweep.rows) {
        worst = std::max(worst, row.confidence - row.bound);
    }
    Json bounds = Json::array();
    double max_sdiff = 0.0;
    for (const auto& b : sweep.bounds) {
        bounds.push_back(Json{{"delta_star", b.delta_star},
                              {"bound_logit", b.bound_logit},
                              {"bound_confidence", b.bound_confidence},
                              {"limit_abs_logit", b.limit_abs_logit},
                              {"s_min_reduced", b.s_min_reduced},
                              {"s_min_direct", std::isnan(b.s_min_direct) ? Json(nullptr) : Json(b.s_min_direct)}});
        if (!std::isnan(b.s_min_direct)) {
            max_sdiff = std::max(max_sdiff, std::abs(b.s_min_direct - b.s_min_reduced));
        }
    }
    return Json{{"directions", sweep.bounds.size()},
                {"max_confidence_minus_bound", worst},
                {"max_s_min_difference", max_sdiff},
                {"bounds", bounds}};
}

ScaleSweep sweep_for(Context& ctx, const StfModel& stf)
{
    if (!stf.binary_logit() || stf.bayes_index() != 0) {
        throw UsageError("scale_sweep: needs a two-class dataset and stf.bayes_layer = 1");
    }
    Prng dp = ctx.stream("directions");
    const Matrix dirs = sample_gaussian(dp, 0.0, 1.0, ctx.cfg.scale_sweep.directions, stf.base().input_dim());
    return scale_sweep(stf, dirs, ctx.cfg.scale_sweep.deltas);
}

void run_scale_sweep(Context& ctx)
{
    const BothModels m = pretrain_and_stf(ctx);
    const ScaleSweep sweep = sweep_for(ctx, m.stf.model);
    write_scale_sweep_csv(ctx.dir / "scale_sweep.csv", sweep);
    ctx.csv("scale_sweep.csv");
    ctx.report.metrics = sweep_metrics(sweep);
}

AttackConfig attack_base(const ExperimentConfig& cfg, const Dataset& d)
{
    AttackConfig a;
    a.steps = cfg.attack.steps;
    a.step_size = cfg.attack.step_size;
    a.random_start = cfg.attack.random_start;
    a.clip = d.range;
    return a;
}

void run_attack(Context& ctx)
{
    const BothModels m = pretrain_and_stf(ctx);
    Prng ap = ctx.stream("attack");
    const AttackConfig base = attack_base(ctx.cfg, ctx.data.test);
    const AttackReport rb = attack_sweep(m.base, ctx.data.test, base, ctx.cfg.attack.radii, ap);
    const AttackReport rs = attack_sweep(m.stf.model, ctx.data.test, base, ctx.cfg.attack.radii, ap,
                                         ctx.cfg.eval.mc_samples, ctx.cfg.attack.gradient_mode);
    const Json j{{"baseline", attack_report_to_json(rb)}, {"stf", attack_report_to_json(rs)}};
    ctx.json("attack_report.json", j);
    ctx.report.metrics = j;
}

void run_adv_train(Context& ctx)
{
    const Phase1 plain = pretrain(ctx);
    Prng init = ctx.stream("init");
    Prng train = ctx.stream("train");
    AttackConfig trainer = attack_base(ctx.cfg, ctx.data.train);
    trainer.radius = ctx.cfg.attack.train_radius;
    const Mlp start = Mlp::he_init(model_dims(ctx.cfg, ctx.data.train), init);
    const Mlp robust = adversarial_train(start, ctx.data.train, ctx.cfg.train, trainer, train).model;
    const StfTrainResult robust_stf = phase2(ctx, robust, ctx.cfg.bayes_layer);

    Prng ap = ctx.stream("attack");
    const AttackConfig base = attack_base(ctx.cfg, ctx.data.test);
    const auto& radii = ctx.cfg.attack.radii;
    const AttackReport a = attack_sweep(plain.model, ctx.data.test, base, radii, ap);
    const AttackReport b = attack_sweep(robust, ctx.data.test, base, radii, ap);
    const AttackReport c = attack_sweep(robust_stf.model, ctx.data.test, base, radii, ap, ctx.cfg.eval.mc_samples,
                                        ctx.cfg.attack.gradient_mode);
    const Json j{{"train_radius", trainer.radius},
                 {"undefended", attack_report_to_json(a)},
                 {"adversarial", attack_report_to_json(b)},
                 {"adversarial_stf", attack_report_to_json(c)}};
    ctx.json("attack_report.json", j);
    ctx.report.metrics = j;
    save_models(ctx, robust, &robust_stf.model);
}

void run_mi(Context& ctx)
{
    const BothModels m = pretrain_and_stf(ctx);
    Prng p = ctx.stream("eval");
    const MiReport b = mi_attack(m.base, ctx.data.train, ctx.data.test, ctx.cfg.mi.score);
    const MiReport s = mi_attack(m.stf.model, ctx.data.train, ctx.data.test, ctx.cfg.eval.mc_samples, p, ctx.cfg.mi.score);
    ctx.json("mi_report.json", Json{{"baseline", mi_report_to_json(b)}, {"stf", mi_report_to_json(s)}});
    ctx.report.metrics = Json{{"baseline_acc_optim", b.acc_optim},
                              {"baseline_zeta_optim", b.zeta_optim},
                              {"stf_acc_optim", s.acc_optim},
                              {"stf_zeta_optim", s.zeta_optim}};
}

StabilityConfig stability_config(const ExperimentConfig& cfg)
{
    StabilityConfig s;
    s.pretrain = cfg.train;
    s.retrain = cfg.retrain;
    return s;
}

Json stability_json(const StabilityReport& r)
{
    Json per_seed = Json::array();
    for (Eigen::Index i = 0; i < r.per_seed.rows(); ++i) {
        std::vector<double> row(r.per_seed.row(i).begin(), r.per_seed.row(i).end());
        per_seed.push_back(row);
    }
    return Json{{"seeds", r.seeds},
                {"layers", r.layers()},
                {"per_seed", per_seed},
                {"mean", std::vector<double>(r.mean.begin(), r.mean.end())},
                {"std", std::vector<double>(r.std.begin(), r.std.end())},
                {"pretrain_test_accuracy", r.pretrain_test_accuracy}};
}

void write_stability(const fs::path& dir, const StabilityReport& r)
{
    const fs::path csv = dir / "stability.csv";
    std::ofstream out(csv);
    if (!out) {
        throw IoError("cannot write " + csv.string());
    }
    out.precision(17);
    out << "layer_index,mean,std\n";
    for (std::size_t k = 0; k < r.layers(); ++k) {
        out << k + 1 << ',' << r.mean(static_cast<Eigen::Index>(k)) << ',' << r.std(static_cast<Eigen::Index>(k))
            << '\n';
    }
}

std::string seeds_label(const std::vector<std::uint64_t>& seeds)
{
    std::string s;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        s += (i ? "," : "") + std::to_string(seeds[i]);
    }
    return s;
}

StabilityReport stability_run(const ExperimentConfig& cfg, const TrainedData& data,
                              const std::vector<std::uint64_t>& seeds, const std::string& hash)
{
    const auto dims = model_dims(cfg, data.train);
    StabilityReport r = stability_profile(dims, data.train, data.test, seeds, stability_config(cfg));
    r.config_hash = hash;
    return r;
}

void run_demo(Context& ctx)
{
    // pretrain -> stability -> stf -> evaluate -> bound -> scale sweep
    Sigma2Estimate s2;
    const Phase1 p = pretrain_with_sigma2(ctx, s2);
    const std::vector<std::uint64_t> pair{ctx.seed, ctx.seed + 1};
    const StabilityReport st = stability_run(ctx.cfg, ctx.data, pair, ctx.hash);
    Json sj = stability_json(st);
    ctx.json("stability_report.json", sj);
    write_stability(ctx.dir, st);
    ctx.csv("stability.csv");

    const StfTrainResult r = phase2(ctx, p.model, ctx.cfg.bayes_layer);
    const BothModels m{p.model, r};
    Prng ep = ctx.stream("eval");
    Scored b;
    Scored s;
    const Json test = compare_on(ctx, m, ctx.data.test, ep, &b, &s);
    write_ece_csv(ctx.dir / "baseline_ece_bins.csv", b.ece);
    ctx.csv("baseline_ece_bins.csv");
    write_ece_csv(ctx.dir / "stf_ece_bins.csv", s.ece);
    ctx.csv("stf_ece_bins.csv");

    const BoundReport bound = bound_for(ctx, p, r, s2);
    Json bj = bound_to_json(bound);
    bj["sigma2"] = sigma2_summary(s2);
    ctx.json("bound_report.json", bj);

    const ScaleSweep sweep = sweep_for(ctx, r.model);
    write_scale_sweep_csv(ctx.dir / "scale_sweep.csv", sweep);
    ctx.csv("scale_sweep.csv");
    save_models(ctx, p.model, &r.model);

    const Json sweep_j = sweep_metrics(sweep);
    ctx.report.metrics = Json{{"pretrain_test_accuracy", b.summary.accuracy(ctx.data.test.labels)},
                              {"stability_mean", sj["mean"]},
                              {"test", test},
                              {"stf", stf_summary(r)},
                              {"bound", bj},
                              {"scale_sweep",
                               {{"directions", sweep_j["directions"]},
                                {"max_confidence_minus_bound", sweep_j["max_confidence_minus_bound"]},
                                {"max_s_min_difference", sweep_j["max_s_min_difference"]}}}};
}

void dispatch(Context& ctx)
{
    switch (ctx.cfg.task) {
    case Task::pretrain: return run_pretrain(ctx);
    case Task::stf_train: return run_stf_train(ctx);
    case Task::evaluate: return run_evaluate(ctx);
    case Task::ablation: return run_ablation(ctx);
    case Task::corruption_grid: return run_corruption_grid(ctx);
    case Task::threshold_curve: return run_threshold_curve(ctx);
    case Task::bound: return run_bound(ctx);
    case Task::scale_sweep: return run_scale_sweep(ctx);
    case Task::attack: return run_attack(ctx);
    case Task::adv_train: return run_adv_train(ctx);
    case Task::mi: return run_mi(ctx);
    case Task::demo: return run_demo(ctx);
    case Task::stability: break;
    }
    throw UsageError("dispatch: stability is a multi-seed task");
}

void write_report_files(const ExperimentReport& r)
{
    Json timing{{"config_hash", r.config_hash}, {"wall_seconds", r.wall_seconds}};
    if (r.seeds.size() == 1) {
        timing["seed"] = r.seeds.front();
    } else {
        timing["seeds"] = r.seeds;
    }
    write_json(r.directory / "report.json", report_to_json(r));
    write_json(r.directory / "timing.json", timing);
}

double seconds_since(std::chrono::steady_clock::time_point t0)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void flatten(const Json& j, const std::string& prefix, std::map<std::string, double>& out)
{
    if (j.is_number()) {
        out[prefix] = j.get<double>();
    } else if (j.is_boolean()) {
        out[prefix] = j.get<bool>() ? 1.0 : 0.0;
    } else if (j.is_object()) {
        for (const auto& [k, v] : j.items()) {
            flatten(v, prefix.empty() ? k : prefix + "." + k, out);
        }
    } else if (j.is_array()) {
        for (std::size_t i = 0; i < j.size(); ++i) {
            flatten(j[i], prefix + "[" + std::to_string(i) + "]", out);
        }
    }
}

} // namespace

std::vector<Eigen::Index> model_dims(const ExperimentConfig& cfg, const Dataset& train)
{
    std::vector<Eigen::Index> dims{train.dim()};
    dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
    dims.push_back(train.num_classes == 2 ? 1 : train.num_classes);
    return dims;
}

TrainedData load_datasets(const DatasetSpec& spec, const fs::path& data_root)
{
    Prng p(spec.seed);
    TrainedData d;
    if (spec.name == "moons") {
        d.train = make_two_moons(spec.train_size, spec.noise, p);
        d.test = make_two_moons(spec.test_size, spec.noise, p);
        d.test.split = Split::test;
    } else if (spec.name == "blobs") {
        Matrix centers = Matrix::Zero(spec.num_centers, spec.dim);
        for (int i = 0; i < spec.num_centers; ++i) {
            const double sign = (i / spec.dim) % 2 == 0 ? 1.0 : -1.0;
            centers(i, i % spec.dim) = sign * spec.spacing;
        }
        const Dataset pool = make_blobs(spec.train_size + spec.test_size, centers, spec.blob_std, p);
        std::tie(d.train, d.test) = train_test_split(pool, spec.test_size, p);
    } else if (spec.name == "fashion_mnist") {
        const fs::path dir = fs::path(spec.path).is_absolute() ? fs::path(spec.path) : data_root / spec.path;
        d.train = balanced_subset(load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte"),
                                  spec.train_per_class);
        d.test = balanced_subset(load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte"),
                                 spec.test_per_class);
        d.test.split = Split::test;
    } else {
        throw UsageError("dataset.name: unknown dataset '" + spec.name + "'");
    }
    if (spec.normalize) {
        const Normalization n = fit_normalization(d.train);
        d.train = apply_normalization(d.train, n);
        d.test = apply_normalization(d.test, n);
    }
    return d;
}

Json report_to_json(const ExperimentReport& r)
{
    Json j{{"format", "stfbnn-report"},
           {"version", 1},
           {"task", to_string(r.task)},
           {"config_hash", r.config_hash},
           {"metrics", r.metrics},
           {"artifacts", r.artifacts}};
    if (r.seeds.size() == 1) {
        j["seed"] = r.seeds.front();
    } else {
        j["seeds"] = r.seeds;
    }
    return j;
}

std::vector<ExperimentReport> run_experiment(const ExperimentConfig& cfg, const RunOptions& options)
{
    cfg.validate();
    const std::string hash = config_hash(cfg);
    fs::path base = options.out ? *options.out : fs::path(cfg.output_dir);
    if (base.is_relative() && !options.output_root.empty()) {
        base = options.output_root / base;
    }
    base /= to_string(cfg.task);
    const std::vector<std::uint64_t> seeds = options.seed ? std::vector<std::uint64_t>{*options.seed} : cfg.seeds;
    const TrainedData data = load_datasets(cfg.dataset, options.data_root);

    std::vector<ExperimentReport> reports;
    if (cfg.task == Task::stability) {
        if (seeds.size() < 2) {
            throw UsageError("stability: needs at least two seeds");
        }
        const auto t0 = std::chrono::steady_clock::now();
        fs::create_directories(base);
        const StabilityReport st = stability_run(cfg, data, seeds, hash);
        ExperimentReport r;
        r.task = cfg.task;
        r.config_hash = hash;
        r.seeds = seeds;
        r.directory = base;
        Json sj = stability_json(st);
        sj["config_hash"] = hash;
        write_json(base / "stability_report.json", sj);
        write_stability(base, st);
        stamp_csv(base / "stability.csv", hash, seeds_label(seeds));
        r.artifacts = {"stability_report.json", "stability.csv"};
        r.metrics = Json{{"mean", sj["mean"]}, {"std", sj["std"]}, {"pretrain_test_accuracy", sj["pretrain_test_accuracy"]}};
        r.wall_seconds = seconds_since(t0);
        write_report_files(r);
        reports.push_back(std::move(r));
        return reports;
    }

    for (std::uint64_t seed : seeds) {
        const auto t0 = std::chrono::steady_clock::now();
        const fs::path dir = base / ("seed_" + std::to_string(seed));
        fs::create_directories(dir);
        Context ctx(cfg, data, hash, seed, dir);
        ctx.report.task = cfg.task;
        ctx.report.config_hash = hash;
        ctx.report.seeds = {seed};
        ctx.report.directory = dir;
        dispatch(ctx);
        ctx.report.wall_seconds = seconds_since(t0);
        write_report_files(ctx.report);
        reports.push_back(std::move(ctx.report));
    }
    return reports;
}

MergedReport merge_reports(const std::vector<Json>& reports)
{
    if (reports.empty()) {
        throw InputError("merge: no reports given");
    }
    MergedReport m;
    std::map<std::string, std::vector<double>> values;
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const Json& r = reports[i];
        if (!r.is_object() || r.value("format", "") != "stfbnn-report") {
            throw InputError("merge: input " + std::to_string(i) + " is not a report");
        }
        const std::string hash = r.at("config_hash");
        const Task task = task_from_string(r.at("task"));
        if (i == 0) {
            m.config_hash = hash;
            m.task = task;
        } else if (hash != m.config_hash) {
            throw InputError("merge: mixed config hashes " + m.config_hash + " and " + hash);
        } else if (task != m.task) {
            throw InputError("merge: mixed tasks");
        }
        if (r.contains("seed")) {
            m.seeds.push_back(r["seed"].get<std::uint64_t>());
        } else {
            for (const auto& s : r.at("seeds")) {
                m.seeds.push_back(s.get<std::uint64_t>());
            }
        }
        std::map<std::string, double> flat;
        flatten(r.at("metrics"), "", flat);
        for (const auto& [k, v] : flat) {
            values[k].push_back(v);
        }
    }
    for (const auto& [k, v] : values) {
        MergedMetric mm;
        mm.count = v.size();
        for (double x : v) {
            mm.mean += x;
        }
        mm.mean /= static_cast<double>(v.size());
        for (double x : v) {
            mm.std += (x - mm.mean) * (x - mm.mean);
        }
        mm.std = std::sqrt(mm.std / static_cast<double>(v.size()));
        m.metrics[k] = mm;
    }
    return m;
}

MergedReport merge_report_files(const std::vector<fs::path>& paths)
{
    std::vector<Json> reports;
    for (const auto& p : paths) {
        reports.push_back(read_json(p));
    }
    return merge_reports(reports);
}

Json merged_to_json(const MergedReport& m)
{
    Json metrics = Json::object();
    for (const auto& [k, v] : m.metrics) {
        metrics[k] = Json{{"mean", v.mean}, {"std", v.std}, {"count", v.count}};
    }
    return Json{{"format", "stfbnn-merged"},
                {"task", to_string(m.task)},
                {"config_hash", m.config_hash},
                {"seeds", m.seeds},
                {"metrics", metrics}};
}

void write_merged_csv(const fs::path& path, const MergedReport& m)
{
    if (path.has_parent_path()) {
        fs::create_directories(path.parent_path());
    }
    std::ofstream out(path);
    if (!out) {
        throw IoError("cannot write " + path.string());
    }
    out.precision(17);
    out << "# config_hash=" << m.config_hash << " seed=" << seeds_label(m.seeds) << '\n';
    out << "metric,mean,std,count\n";
    for (const auto& [k, v] : m.metrics) {
        out << k << ',' << v.mean << ',' << v.std << ',' << v.count << '\n';
    }
}

} // namespace stfbnn
