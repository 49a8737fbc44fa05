#include "cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>

#include "lipcert/certify.hpp"
#include "lipcert/crmtrain.hpp"
#include "lipcert/errors.hpp"
#include "lipcert/liplt.hpp"
#include "lipcert/netgraph.hpp"
#include "lipcert/parallel.hpp"
#include "lipcert/rng.hpp"

namespace lipcert::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

/// Usage errors detected after flag parsing (exit code 2).
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct Common {
    std::string model;
    std::string data;
    std::string split = "test";
    std::string classes;
    std::size_t limit = 0;
    double eps = 0.0;
    double t = 10.0;
    std::string method = "liplt";
    std::string mode = "direct";
    std::string out;
    std::string format;
    std::uint64_t seed = 0;
    int workers = 0;
    int power_iters = PowerIterConfig::certification().max_iters;
    double power_tol = PowerIterConfig::certification().rel_tol;
    bool timing = false;
};

struct TrainOpts {
    double lambda = 0.0;
    int epochs = 1;
    double lr = 0.05;
    std::string g = "hinge";
    double rbar = -1.0;  // < 0: 2 * eps
    double g_scale = 1.0;
    int batch = 64;
    std::string arch;
    std::string init;
    std::string val;
    std::string metrics;
};

struct AttackOpts {
    int steps = 50;
    int restarts = 10;
    double step_size = 0.0;
    std::string box;
};

PowerIterConfig power_config(const Common& c) {
    PowerIterConfig p{c.power_iters, c.power_tol, sub_seed(c.seed, "power"), 1e-6};
    p.validate();
    return p;
}

std::set<int> parse_int_set(const std::string& s) {
    std::set<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.insert(std::stoi(item));
    return out;
}

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(std::stoi(item));
    return out;
}

/// "moons:n=400,noise=0.1,seed=3" or an IDX directory.
Dataset load_data(const std::string& spec, const std::string& split, const std::string& classes,
                  std::size_t limit) {
    if (spec.rfind("moons", 0) == 0) {
        int n = 400;
        double noise = 0.1;
        std::uint64_t seed = 0;
        const auto colon = spec.find(':');
        if (colon != std::string::npos) {
            std::stringstream ss(spec.substr(colon + 1));
            std::string kv;
            while (std::getline(ss, kv, ',')) {
                const auto eq = kv.find('=');
                if (eq == std::string::npos) throw UsageError("bad moons parameter \"" + kv + "\"");
                const std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
                if (k == "n") n = std::stoi(v);
                else if (k == "noise") noise = std::stod(v);
                else if (k == "seed") seed = std::stoull(v);
                else throw UsageError("unknown moons parameter \"" + k + "\"");
            }
        }
        return gen_two_moons(n, noise, seed);
    }
    const std::string prefix = split == "train" ? "train" : "t10k";
    if (split != "train" && split != "test") throw UsageError("--split must be train or test");
    const fs::path dir(spec);
    return load_idx(dir / (prefix + "-images-idx3-ubyte"), dir / (prefix + "-labels-idx1-ubyte"),
                    limit ? std::optional<std::size_t>(limit) : std::nullopt, parse_int_set(classes));
}

std::string resolve_format(const Common& c) {
    if (!c.format.empty()) return c.format;
    return fs::path(c.out).extension() == ".csv" ? "csv" : "json";
}

void write_file(const std::string& path, const std::string& content) {
    const fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream f(p, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path);
    f << content;
    if (!f) throw std::runtime_error("write failed for " + path);
}

json common_config(const std::string& sub, const Common& c) {
    json j;
    j["subcommand"] = sub;
    j["model"] = c.model;
    j["data"] = c.data;
    j["split"] = c.split;
    j["classes"] = c.classes;
    j["limit"] = c.limit;
    j["eps"] = c.eps;
    j["t"] = c.t;
    j["method"] = c.method;
    j["mode"] = c.mode;
    j["seed"] = c.seed;
    j["workers"] = worker_count();
    j["power_iters"] = c.power_iters;
    j["power_tol"] = c.power_tol;
    j["power_seed"] = sub_seed(c.seed, "power");
    return j;
}

json matrix_json(const Matrix& m) {
    json rows = json::array();
    for (Index i = 0; i < m.rows(); ++i) {
        json row = json::array();
        for (Index k = 0; k < m.cols(); ++k) row.push_back(m(i, k));
        rows.push_back(row);
    }
    return rows;
}

json report_json(const BoundReport& r, bool timing) {
    json j;
    j["method"] = to_string(r.method);
    j["mode"] = to_string(r.mode);
    j["L"] = r.L;
    j["mean_pairwise"] = r.mean_pairwise();
    j["per_class"] = r.per_class;
    j["pairwise"] = matrix_json(r.pairwise);
    if (timing) j["wall_time"] = r.wall_time;
    return j;
}

// ---------------------------------------------------------------------------

int run_bound(const Common& c) {
    const ResidualChain chain = parse_model(c.model);
    const BoundReport r = pairwise_lipschitz(chain, parse_pairwise_mode(c.mode), parse_bound_method(c.method),
                                             power_config(c));
    if (resolve_format(c) == "csv") {
        std::string s = "i,j,L_ij\n";
        for (Index i = 0; i < r.pairwise.rows(); ++i)
            for (Index k = i + 1; k < r.pairwise.cols(); ++k)
                s += std::to_string(i) + "," + std::to_string(k) + "," + num(r.pairwise(i, k)) + "\n";
        write_file(c.out, s);
    } else {
        json j;
        j["config"] = common_config("bound", c);
        j["result"] = report_json(r, c.timing);
        j["L"] = r.L;
        write_file(c.out, j.dump(2) + "\n");
    }
    return 0;
}

json summary_json(const CertSummary& s) {
    json j;
    j["count"] = s.count;
    j["eps"] = s.eps;
    j["clean_accuracy"] = s.clean_accuracy;
    j["certified_accuracy"] = s.certified_accuracy;
    j["mean_radius"] = s.mean_radius;
    j["quantile_levels"] = s.quantile_levels;
    j["radius_quantiles"] = s.radius_quantiles;
    return j;
}

std::string records_csv(const std::vector<CertRecord>& records) {
    std::string s = "index,label,pred,margin,radius_lower,soft_radius,verified\n";
    for (const auto& r : records)
        s += std::to_string(r.index) + "," + std::to_string(r.label) + "," + std::to_string(r.prediction) + "," +
             num(r.margin) + "," + num(r.radius_lower) + "," + num(r.soft_radius) + "," +
             (r.verified ? "1" : "0") + "\n";
    return s;
}

int run_certify(const Common& c, const std::string& summary_path) {
    const ResidualChain chain = parse_model(c.model);
    const Dataset data = load_data(c.data, c.split, c.classes, c.limit);
    const CertificationResult res = certify_dataset(chain, data, c.eps, c.t, parse_pairwise_mode(c.mode),
                                                    parse_bound_method(c.method), power_config(c));
    json j;
    j["config"] = common_config("certify", c);
    j["summary"] = summary_json(res.summary);
    j["bounds"] = report_json(res.bounds, c.timing);
    j["boundary_samples"] = std::count_if(res.records.begin(), res.records.end(),
                                          [](const CertRecord& r) { return r.on_boundary; });
    if (resolve_format(c) == "csv") {
        write_file(c.out, records_csv(res.records));
        if (!summary_path.empty()) write_file(summary_path, j.dump(2) + "\n");
    } else {
        write_file(c.out, j.dump(2) + "\n");
    }
    return 0;
}

int run_train(const Common& c, const TrainOpts& o) {
    if (o.arch.empty() == o.init.empty()) throw UsageError("train needs exactly one of --arch and --init");
    ResidualChain init;
    if (!o.arch.empty()) init = make_mlp(parse_int_list(o.arch), c.seed);
    else init = parse_model(o.init);

    Dataset train_data = load_data(c.data, "train", c.classes, c.limit);
    Dataset val;
    if (!o.val.empty()) val = load_data(o.val, "test", c.classes, 0);
    else if (c.data.rfind("moons", 0) == 0) val = train_data;
    else val = load_data(c.data, "test", c.classes, 0);
    if (init.num_classes != train_data.num_classes)
        throw std::invalid_argument("model has " + std::to_string(init.num_classes) + " classes, data has " +
                                    std::to_string(train_data.num_classes));

    CrmConfig cfg;
    cfg.lambda = o.lambda;
    cfg.t = c.t;
    cfg.g = parse_g_kind(o.g);
    cfg.rbar = o.rbar > 0.0 ? o.rbar : 2.0 * c.eps;
    cfg.g_scale = o.g_scale;
    cfg.lr = o.lr;
    cfg.epochs = o.epochs;
    cfg.batch_size = o.batch;
    cfg.mode = parse_pairwise_mode(c.mode);
    cfg.method = parse_bound_method(c.method);
    cfg.cert_power = power_config(c);
    cfg.eps = c.eps;
    cfg.seed = c.seed;
    if (cfg.lambda > 0.0 && cfg.g == GKind::hinge && !(cfg.rbar > 0.0))
        throw UsageError("hinge g needs --rbar > 0 or --eps > 0");

    std::string csv = "epoch,loss,ce,reg,clean_acc,mean_radius,cert_acc\n";
    const auto t0 = std::chrono::steady_clock::now();
    const TrainResult res = train(init, train_data, val, cfg, [&](const EpochMetrics& m) {
        csv += std::to_string(m.epoch) + "," + num(m.loss) + "," + num(m.ce) + "," + num(m.reg) + "," +
               num(m.clean_acc) + "," + num(m.mean_radius) + "," + num(m.cert_acc) + "\n";
    });
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    save_model(res.chain, c.out);
    write_file(o.metrics.empty() ? (fs::path(c.out) / "metrics.csv").string() : o.metrics, csv);

    json j;
    j["config"] = common_config("train", c);
    j["config"]["lambda"] = cfg.lambda;
    j["config"]["epochs"] = cfg.epochs;
    j["config"]["lr"] = cfg.lr;
    j["config"]["momentum"] = cfg.momentum;
    j["config"]["cosine"] = cfg.cosine;
    j["config"]["batch_size"] = cfg.batch_size;
    j["config"]["g"] = to_string(cfg.g);
    j["config"]["rbar"] = cfg.rbar;
    j["config"]["g_scale"] = cfg.g_scale;
    j["config"]["arch"] = o.arch;
    j["config"]["init"] = o.init;
    j["config"]["val"] = o.val;
    j["config"]["train_power_iters"] = cfg.train_power.max_iters;
    j["config"]["norm_refresh_steps"] = cfg.norm_refresh_steps;
    j["config"]["train_samples"] = train_data.size();
    j["config"]["val_samples"] = val.size();
    json hist = json::array();
    for (const auto& m : res.history)
        hist.push_back({{"epoch", m.epoch}, {"loss", m.loss}, {"ce", m.ce}, {"reg", m.reg},
                        {"clean_acc", m.clean_acc}, {"mean_radius", m.mean_radius}, {"cert_acc", m.cert_acc}});
    j["history"] = hist;
    if (c.timing) j["wall_time"] = seconds;
    write_file((fs::path(c.out) / "train.json").string(), j.dump(2) + "\n");
    return 0;
}

int run_attack(const Common& c, const AttackOpts& a) {
    if (!(c.eps > 0.0)) throw UsageError("attack needs --eps > 0");
    const ResidualChain chain = parse_model(c.model);
    const Dataset data = load_data(c.data, c.split, c.classes, c.limit);
    const CertificationResult cert = certify_dataset(chain, data, c.eps, c.t, parse_pairwise_mode(c.mode),
                                                     parse_bound_method(c.method), power_config(c));
    PgdConfig pgd;
    pgd.steps = a.steps;
    pgd.restarts = a.restarts;
    pgd.step_size = a.step_size;
    pgd.seed = sub_seed(c.seed, "pgd");
    if (!a.box.empty()) {
        const auto comma = a.box.find(',');
        if (comma == std::string::npos) throw UsageError("--box expects LO,HI");
        pgd.box = std::make_pair(std::stod(a.box.substr(0, comma)), std::stod(a.box.substr(comma + 1)));
    }

    std::vector<AttackResult> results(std::size_t(data.size()));
    parallel_for(results.size(), [&](std::size_t s) {
        PgdConfig own = pgd;
        own.seed = sub_seed(pgd.seed, std::to_string(s));
        results[s] = pgd_attack(chain, data.inputs.col(Index(s)), data.labels[s], c.eps, own);
    });

    std::string csv = "index,label,success,distance,restart,step,radius_lower,verified\n";
    Index successes = 0, violations = 0;
    for (std::size_t s = 0; s < results.size(); ++s) {
        const auto& r = results[s];
        const auto& rec = cert.records[s];
        successes += r.success;
        violations += r.success && rec.verified;
        csv += std::to_string(s) + "," + std::to_string(rec.label) + "," + (r.success ? "1" : "0") + "," +
               num(r.distance) + "," + std::to_string(r.restart) + "," + std::to_string(r.step) + "," +
               num(rec.radius_lower) + "," + (rec.verified ? "1" : "0") + "\n";
    }
    json j;
    j["config"] = common_config("attack", c);
    j["config"]["steps"] = pgd.steps;
    j["config"]["restarts"] = pgd.restarts;
    j["config"]["step_size"] = pgd.resolved_step(c.eps);
    j["config"]["box"] = a.box;
    j["count"] = data.size();
    j["attack_success_rate"] = double(successes) / double(std::max<Index>(1, data.size()));
    j["empirical_robust_accuracy"] = 1.0 - double(successes) / double(std::max<Index>(1, data.size()));
    j["certified_accuracy"] = cert.summary.certified_accuracy;
    j["certified_but_attacked"] = violations;
    write_file(c.out, resolve_format(c) == "csv" ? csv : j.dump(2) + "\n");
    return 0;
}

int run_compare(const Common& c) {
    const ResidualChain chain = parse_model(c.model);
    const PowerIterConfig p = power_config(c);
    const std::vector<PairwiseMode> modes{PairwiseMode::direct, PairwiseMode::class_sum, PairwiseMode::sqrt2};
    const std::vector<BoundMethod> methods{BoundMethod::naive(), BoundMethod::liplt()};
    Matrix grid(2, 3);
    for (std::size_t m = 0; m < methods.size(); ++m)
        for (std::size_t k = 0; k < modes.size(); ++k)
            grid(Index(m), Index(k)) = pairwise_lipschitz(chain, modes[k], methods[m], p).mean_pairwise();
    if (resolve_format(c) == "csv") {
        std::string s = "method,direct,class_sum,sqrt2\n";
        for (std::size_t m = 0; m < methods.size(); ++m)
            s += to_string(methods[m]) + "," + num(grid(Index(m), 0)) + "," + num(grid(Index(m), 1)) + "," +
                 num(grid(Index(m), 2)) + "\n";
        write_file(c.out, s);
    } else {
        json j;
        j["config"] = common_config("compare", c);
        json rows;
        for (std::size_t m = 0; m < methods.size(); ++m)
            rows[to_string(methods[m])] = {{"direct", grid(Index(m), 0)},
                                          {"class_sum", grid(Index(m), 1)},
                                          {"sqrt2", grid(Index(m), 2)}};
        j["grid"] = rows;
        write_file(c.out, j.dump(2) + "\n");
    }
    return 0;
}

void add_common(CLI::App* sub, Common& c, bool needs_model, bool needs_data) {
    sub->add_option("--model", c.model, "model directory")->required(needs_model);
    sub->add_option("--data", c.data, "IDX directory or moons:n=N,noise=F,seed=S")->required(needs_data);
    sub->add_option("--split", c.split, "train|test")->check(CLI::IsMember({"train", "test"}));
    sub->add_option("--classes", c.classes, "comma-separated class filter, e.g. 0,1");
    sub->add_option("--limit", c.limit, "keep at most N samples");
    sub->add_option("--eps", c.eps, "l2 budget")->check(CLI::NonNegativeNumber);
    sub->add_option("--t", c.t, "soft-min temperature")->check(CLI::PositiveNumber);
    sub->add_option("--method", c.method, "naive|liplt|refined:sn|refined:aol|refined:sll")
        ->check(CLI::IsMember({"naive", "liplt", "refined:sn", "refined:aol", "refined:sll"}));
    sub->add_option("--mode", c.mode, "direct|class_sum|sqrt2")
        ->check(CLI::IsMember({"direct", "class_sum", "sqrt2"}));
    sub->add_option("--out", c.out, "output path")->required();
    sub->add_option("--format", c.format, "json|csv")->check(CLI::IsMember({"json", "csv"}));
    sub->add_option("--seed", c.seed, "top-level seed");
    sub->add_option("--workers", c.workers, "worker threads")->check(CLI::PositiveNumber);
    sub->add_option("--power-iters", c.power_iters, "power-iteration budget")->check(CLI::PositiveNumber);
    sub->add_option("--power-tol", c.power_tol, "power-iteration relative tolerance")
        ->check(CLI::NonNegativeNumber);
    sub->add_flag("--timing", c.timing, "record wall-clock times (breaks bit-reproducibility)");
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"lipcert: Lipschitz bounds, certified radii and CRM training"};
    app.require_subcommand(1);

    Common c;
    TrainOpts tr;
    AttackOpts at;
    std::string summary_path;

    auto* bound = app.add_subcommand("bound", "network and pairwise Lipschitz bounds");
    add_common(bound, c, true, false);
    auto* certify = app.add_subcommand("certify", "certified radii of a dataset");
    add_common(certify, c, true, true);
    certify->add_option("--summary", summary_path, "summary JSON path when --out is CSV");
    auto* trn = app.add_subcommand("train", "CRM training of a dense chain");
    add_common(trn, c, false, true);
    trn->add_option("--lambda", tr.lambda, "regularizer weight")->check(CLI::NonNegativeNumber);
    trn->add_option("--epochs", tr.epochs, "epochs")->check(CLI::NonNegativeNumber);
    trn->add_option("--lr", tr.lr, "learning rate")->check(CLI::PositiveNumber);
    trn->add_option("--g", tr.g, "hinge|exp")->check(CLI::IsMember({"hinge", "exp"}));
    trn->add_option("--rbar", tr.rbar, "hinge target radius (default 2*eps)");
    trn->add_option("--g-scale", tr.g_scale, "exp decay scale")->check(CLI::PositiveNumber);
    trn->add_option("--batch", tr.batch, "batch size")->check(CLI::PositiveNumber);
    trn->add_option("--arch", tr.arch, "MLP widths, e.g. 784,64,64,2");
    trn->add_option("--init", tr.init, "initial model directory");
    trn->add_option("--val", tr.val, "validation data (default: test split / training moons)");
    trn->add_option("--metrics", tr.metrics, "per-epoch metrics CSV (default OUT/metrics.csv)");
    auto* attack = app.add_subcommand("attack", "l2 PGD attack cross-checked against certificates");
    add_common(attack, c, true, true);
    attack->add_option("--steps", at.steps, "PGD steps")->check(CLI::PositiveNumber);
    attack->add_option("--restarts", at.restarts, "PGD restarts")->check(CLI::PositiveNumber);
    attack->add_option("--step-size", at.step_size, "PGD step (default 2.5*eps/steps)");
    attack->add_option("--box", at.box, "clip range LO,HI");
    auto* compare = app.add_subcommand("compare", "mean pairwise bounds, {naive, liplt} x modes");
    add_common(compare, c, true, false);

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (c.workers > 0) set_worker_count(c.workers);
        if (bound->parsed()) return run_bound(c);
        if (certify->parsed()) return run_certify(c, summary_path);
        if (trn->parsed()) return run_train(c, tr);
        if (attack->parsed()) return run_attack(c, at);
        if (compare->parsed()) return run_compare(c);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

int dispatch(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return dispatch(args, std::cout, std::cerr);
}

}  // namespace lipcert::cli
