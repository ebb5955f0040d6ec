#pragma once

// Command-line dispatch. Lives in a header so tests can drive it in-process;
// tools/tfpca_cli.cpp is a thin main().

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "tfpca/covariance.hpp"
#include "tfpca/dataset.hpp"
#include "tfpca/errors.hpp"
#include "tfpca/gflm.hpp"
#include "tfpca/io.hpp"
#include "tfpca/mean_variance.hpp"
#include "tfpca/scores.hpp"
#include "tfpca/simulation.hpp"

namespace tfpca::cli {

inline constexpr const char* kVersion = "1.0.0";

enum ExitCode : int { kOk = 0, kValidation = 1, kNumerical = 2, kUsage = 64, kMissingInput = 66 };

class UsageError : public Error {
public:
    using Error::Error;
};

class MissingInputError : public Error {
public:
    using Error::Error;
};

inline std::string sha256_hex(const std::string& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw Error("sha256: digest failed");
    std::ostringstream out;
    for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return out.str();
}

/// Published reference values used by `reproduce` for its comparison file.
struct ReferenceCell {
    int case_id;
    const char* metric;
    double proposed, naive, pace;
    const char* best;  ///< method(s) marked best, '|' separated
};

inline const std::vector<ReferenceCell>& reference_surfaces() {
    static const std::vector<ReferenceCell> cells = {
        {1, "mean_sse", 0.11, 0.61, 0.67, "proposed"},  {2, "mean_sse", 0.14, 0.65, 0.71, "proposed"},
        {3, "mean_sse", 0.11, 0.63, 0.69, "proposed"},  {4, "mean_sse", 0.15, 0.65, 0.71, "proposed"},
        {5, "mean_sse", 0.04, 0.13, 0.19, "proposed"},  {1, "cov_sse", 2.25, 2.24, 3.79, "naive"},
        {2, "cov_sse", 1.68, 8.83, 8.00, "proposed"},   {3, "cov_sse", 1.80, 4.08, 4.75, "proposed"},
        {4, "cov_sse", 1.74, 8.74, 8.00, "proposed"},   {5, "cov_sse", 0.16, 0.44, 0.24, "proposed"},
        {1, "noise_sse", 2.59, 0.31, 0.57, "naive"},    {2, "noise_sse", 0.05, 0.02, 0.00, "naive"},
        {3, "noise_sse", 0.40, 0.10, 0.12, "naive"},    {4, "noise_sse", 0.05, 0.02, 0.01, "pace"},
        {5, "noise_sse", 0.01, 0.01, 0.00, "pace"},     {1, "snr_sse", 7.08, 4.70, 13.02, "naive"},
        {2, "snr_sse", 0.12, 0.30, 0.34, "proposed"},   {3, "snr_sse", 1.17, 1.91, 3.84, "proposed"},
        {4, "snr_sse", 0.13, 0.31, 0.36, "proposed"},   {5, "snr_sse", 0.25, 0.36, 0.67, "proposed"},
    };
    return cells;
}

inline const std::vector<ReferenceCell>& reference_gflm() {
    static const std::vector<ReferenceCell> cells = {
        {5, "mse_heldout", 0.89, 0.89, 0.96, "proposed|naive"},
        {5, "mse_insample", 0.89, 0.89, 0.96, "proposed|naive"},
        {5, "acc_heldout", 0.8044, 0.8251, 0.7951, "naive"},
        {5, "acc_insample", 0.8044, 0.8251, 0.7951, "naive"},
    };
    return cells;
}

namespace detail {

using nlohmann::json;

struct OptSpec {
    std::string key;
    json def;
    std::string help;
    bool input = false;  ///< path that must exist when set
};

inline std::string flag_name(const std::string& key) {
    std::string f = key;
    for (auto& c : f)
        if (c == '_') c = '-';
    return "--" + f;
}

inline std::vector<OptSpec> common_data_opts() {
    return {
        {"data", "", "long-format CSV: unit_id,time,value[,flag]", true},
        {"lower", nullptr, "truncation lower bound a (default: none)"},
        {"upper", nullptr, "truncation upper bound b (default: none)"},
        {"flag_mode", "infer", "infer | explicit"},
        {"rescale_times", false, "min-max rescale observation times onto [0,1]"},
        {"grid_size", 15, "number of equally spaced gridpoints"},
    };
}

inline std::vector<OptSpec> pgd_opts() {
    return {
        {"cov_bandwidths", json::array(), "covariance bandwidth candidates (default: the stage-1 bandwidth)"},
        {"pgd_seed", 1, "seed of the element visiting order"},
        {"tolerance", 1e-6, "stop when every element moves less than this"},
        {"max_sweeps", 500, "sweep limit"},
        {"init_step", 0.0, "initial step size (0: automatic)"},
        {"shrink_threshold", 0.90, "shrink the step when the mean feasible fraction falls below this"},
        {"backtrack_decrement", 1e-4, "grid spacing of the feasibility search"},
        {"mixed", "exact", "conditioning for one-sided truncated pairs: exact | interval"},
    };
}

struct Command {
    std::string name;
    std::string help;
    std::vector<OptSpec> opts;
};

inline std::vector<Command> commands() {
    std::vector<Command> cmds;
    cmds.push_back({"simulate",
                    "generate a simulated dataset with its truth",
                    {{"case", 1, "simulation case 1..5"},
                     {"n", 100, "number of units"},
                     {"g", 15, "grid size"},
                     {"seed", 1, "random seed"},
                     {"lower", -1.0, "truncation lower bound"},
                     {"upper", 1.0, "truncation upper bound"}}});

    auto mean_opts = common_data_opts();
    mean_opts.push_back({"bandwidths", json::array(), "mean bandwidth candidates (default: automatic)"});
    cmds.push_back({"fit-mean", "stage 1: truncation-aware mean and variance", mean_opts});

    auto cov_opts = mean_opts;
    cov_opts.push_back({"mean", "", "stage-1 JSON from fit-mean (default: refit)", true});
    for (auto& o : pgd_opts()) cov_opts.push_back(o);
    cmds.push_back({"fit-cov", "stage 2: PSD covariance, noise variance and eigenfunctions", cov_opts});

    auto score_opts = common_data_opts();
    score_opts.push_back({"mean", "", "stage-1 JSON", true});
    score_opts.push_back({"cov", "", "covariance JSON from fit-cov", true});
    score_opts.push_back({"K", 0, "number of components (0: by FVE)"});
    score_opts.push_back({"fve", 0.95, "FVE threshold used when K is 0"});
    score_opts.push_back({"m", 100, "Monte Carlo draws per unit"});
    score_opts.push_back({"seed", 1, "sampler seed"});
    score_opts.push_back({"burn_in", 50, "Gibbs burn-in sweeps"});
    score_opts.push_back({"ignore_flags", false, "treat recorded values as exact (naive scores)"});
    cmds.push_back({"scores", "stage 3: FPC score prediction", score_opts});

    cmds.push_back({"gflm",
                    "regress an outcome on scores and covariates",
                    {{"scores", "", "scores CSV from the scores command", true},
                     {"covariates", "", "CSV keyed by unit_id; column y is the outcome", true},
                     {"link", "identity", "identity | logit"},
                     {"K", 0, "number of score columns (0: all)"},
                     {"score_column", "mc", "mc | nontrunc"}}});

    cmds.push_back({"reproduce",
                    "rerun the simulation tables",
                    {{"table", "1", "1 | 2 | gflm | all"},
                     {"fast", false, "25 replicates with n=60"},
                     {"replicates", 0, "replicates per case (0: 100, or 25 with --fast)"},
                     {"n", 0, "units per dataset (0: 100, or 60 with --fast)"},
                     {"g", 15, "grid size"},
                     {"seed", 1, "master seed"},
                     {"gflm_case", 5, "case used by the regression experiment"},
                     {"cov_bandwidth_factors", json::array({1.0}), "covariance bandwidths as multiples of the stage-1 one"},
                     {"fve", 0.95, "FVE threshold"},
                     {"m", 100, "Monte Carlo draws per unit"}}});

    cmds.push_back({"validate", "check dataset invariants", common_data_opts()});

    for (auto& c : cmds) {
        c.opts.push_back({"threads", nullptr, "worker threads (fallback: TRUNC_FPCA_THREADS, then 1)"});
        if (c.name != "validate") c.opts.push_back({"out", "", "output directory"});
        else c.opts.push_back({"out", "", "optional output directory for the report"});
    }
    return cmds;
}

inline std::vector<double> parse_number_list(const std::string& s, const std::string& key) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        auto v = tfpca::detail::parse_double(item);
        if (!v) throw ValidationError("--" + key + ": '" + item + "' is not a number");
        out.push_back(*v);
    }
    return out;
}

/// Converts a command-line string to the JSON type of the option default.
inline json coerce(const OptSpec& o, const std::string& raw) {
    auto number = [&]() {
        auto v = tfpca::detail::parse_double(raw);
        if (!v) throw ValidationError(flag_name(o.key) + ": '" + raw + "' is not a number");
        return *v;
    };
    if (o.def.is_number_integer()) {
        const double v = number();
        if (v != std::floor(v)) throw ValidationError(flag_name(o.key) + ": expected an integer");
        return static_cast<long long>(v);
    }
    if (o.def.is_number() || o.def.is_null()) return number();
    if (o.def.is_array()) return parse_number_list(raw, o.key);
    return raw;
}

inline void check_type(const OptSpec& o, const json& v) {
    bool ok = true;
    if (o.def.is_boolean()) ok = v.is_boolean();
    else if (o.def.is_number_integer()) ok = v.is_number_integer() || (v.is_number() && v.get<double>() == std::floor(v.get<double>()));
    else if (o.def.is_number()) ok = v.is_number();
    else if (o.def.is_null()) ok = v.is_number() || v.is_null();
    else if (o.def.is_array()) {
        ok = v.is_array();
        if (ok)
            for (const auto& e : v) ok = ok && e.is_number();
    } else if (o.def.is_string()) ok = v.is_string();
    if (!ok) throw ValidationError("config: '" + o.key + "' has the wrong type");
}

/// Accessors on the effective configuration.
struct Config {
    json values;

    double num(const std::string& k) const { return values.at(k).get<double>(); }
    long long integer(const std::string& k) const { return values.at(k).get<long long>(); }
    std::string str(const std::string& k) const { return values.at(k).get<std::string>(); }
    bool flag(const std::string& k) const { return values.at(k).get<bool>(); }
    std::vector<double> list(const std::string& k) const { return values.at(k).get<std::vector<double>>(); }
    std::optional<double> maybe(const std::string& k) const {
        if (values.at(k).is_null()) return std::nullopt;
        return values.at(k).get<double>();
    }
    int positive_int(const std::string& k, long long lo = 1) const {
        const auto v = integer(k);
        if (v < lo || v > 100000000) throw ValidationError(flag_name(k) + " must be at least " + std::to_string(lo));
        return static_cast<int>(v);
    }
};

/// Files produced by a command, written together once everything succeeded.
struct Artifacts {
    std::vector<std::pair<std::string, std::string>> files;
    json inputs = json::object();
    json seeds = json::object();
    json extra = json::object();

    void add(std::string name, std::string content) { files.emplace_back(std::move(name), std::move(content)); }
};

inline std::string read_input(const std::string& path, Artifacts& art, const std::string& key) {
    if (!std::filesystem::exists(path)) throw MissingInputError("missing input file '" + path + "'");
    std::string bytes = read_file(path);
    art.inputs[key] = {{"path", path}, {"sha256", sha256_hex(bytes)}};
    return bytes;
}

inline Bounds bounds_of(const Config& c) {
    Bounds b;
    if (auto lo = c.maybe("lower")) b.lower = *lo;
    if (auto hi = c.maybe("upper")) b.upper = *hi;
    if (!b.valid()) throw ValidationError("--lower must be less than --upper");
    return b;
}

inline FunctionalDataset load_data(const Config& c, Artifacts& art) {
    const auto path = c.str("data");
    if (path.empty()) throw UsageError("--data is required");
    const std::string bytes = read_input(path, art, "data");
    LoadOptions lo;
    const auto mode = c.str("flag_mode");
    if (mode == "infer") lo.flag_mode = FlagMode::infer;
    else if (mode == "explicit") lo.flag_mode = FlagMode::explicit_flags;
    else throw ValidationError("--flag-mode must be infer or explicit");
    lo.rescale_times = c.flag("rescale_times");
    std::istringstream in(bytes);
    return parse_csv(in, bounds_of(c), lo);
}

inline std::vector<double> grid_of(const Config& c) {
    return uniform_grid(static_cast<std::size_t>(c.positive_int("grid_size", 3)));
}

inline std::string bandwidth_table_csv(const std::vector<BandwidthScore>& t, const char* score_name) {
    std::ostringstream out;
    out << "bandwidth," << score_name << '\n';
    for (const auto& r : t)
        out << tfpca::detail::format_double(r.bandwidth) << ',' << tfpca::detail::format_double(r.score) << '\n';
    return out.str();
}

inline std::pair<MeanVarianceEstimate, json> fit_stage1(const FunctionalDataset& ds, const std::vector<double>& grid,
                                                         const Config& c) {
    auto cands = c.list("bandwidths");
    if (cands.empty()) cands = default_bandwidth_candidates(grid);
    for (double h : cands)
        if (!(h > 0.0)) throw ValidationError("--bandwidths: candidates must be positive");
    const auto sel = select_mean_bandwidth(ds, cands, grid);
    auto mv = fit_mean_variance_curve(ds, grid, KernelSpec{sel.bandwidth});
    json j = to_json(mv);
    json table = json::array();
    for (const auto& r : sel.table) table.push_back({{"bandwidth", r.bandwidth}, {"cv", r.score}});
    j["bandwidth_table"] = table;
    j["warnings"] = sel.warnings;
    return {std::move(mv), std::move(j)};
}

inline std::string noise_csv(const CovarianceModel& m) {
    std::ostringstream out;
    out << "t,noise_var,snr\n";
    const VectorXd snr = m.snr();
    for (std::size_t i = 0; i < m.grid.size(); ++i)
        out << tfpca::detail::format_double(m.grid[i]) << ','
            << tfpca::detail::format_double(m.noise_var(static_cast<Eigen::Index>(i))) << ','
            << tfpca::detail::format_double(snr(static_cast<Eigen::Index>(i))) << '\n';
    return out.str();
}

// --- subcommands -----------------------------------------------------------

inline void cmd_simulate(const Config& c, Artifacts& art) {
    SimCase sc;
    sc.case_id = c.positive_int("case");
    sc.n = c.positive_int("n", 2);
    sc.g = c.positive_int("g", 3);
    sc.seed = static_cast<std::uint64_t>(c.integer("seed"));
    sc.bounds = bounds_of(c);
    art.seeds["seed"] = sc.seed;
    art.seeds["basis_seed"] = sc.basis_seed;
    auto [ds, truth] = generate_case(sc);
    std::ostringstream data;
    write_csv(data, ds);
    art.add("data.csv", data.str());
    art.add("truth.json", to_json(truth).dump(2) + "\n");
    auto responses = [&](const VectorXd& y) {
        std::ostringstream out;
        out << "unit_id,y\n";
        for (std::size_t i = 0; i < ds.size(); ++i)
            out << ds.trajectories[i].unit_id << ',' << tfpca::detail::format_double(y(static_cast<Eigen::Index>(i)))
                << '\n';
        return out.str();
    };
    art.add("responses_identity.csv", responses(truth.y_identity));
    art.add("responses_logit.csv", responses(truth.y_logit));
    art.extra["truncated_fraction"] = ds.truncated_fraction();
}

inline void cmd_fit_mean(const Config& c, Artifacts& art) {
    const auto ds = load_data(c, art);
    const auto grid = grid_of(c);
    auto [mv, j] = fit_stage1(ds, grid, c);
    art.add("mean_variance.json", j.dump(2) + "\n");
    art.add("mean_variance.csv", curve_csv(mv));
    std::vector<BandwidthScore> table;
    for (const auto& r : j["bandwidth_table"]) table.push_back({r["bandwidth"].get<double>(), r["cv"].get<double>()});
    art.add("bandwidth_cv.csv", bandwidth_table_csv(table, "cv"));
}

inline PgdConfig pgd_of(const Config& c) {
    PgdConfig p;
    p.seed = static_cast<std::uint64_t>(c.integer("pgd_seed"));
    p.tolerance = c.num("tolerance");
    p.max_sweeps = c.positive_int("max_sweeps");
    p.init_step = c.num("init_step");
    p.shrink_threshold = c.num("shrink_threshold");
    p.backtrack_decrement = c.num("backtrack_decrement");
    const auto mixed = c.str("mixed");
    if (mixed == "exact") p.mixed = MixedConditioning::exact_value;
    else if (mixed == "interval") p.mixed = MixedConditioning::interval;
    else throw ValidationError("--mixed must be exact or interval");
    p.validate();
    return p;
}

inline MeanVarianceEstimate load_mean(const std::string& path, Artifacts& art) {
    return mean_variance_from_json(json::parse(read_input(path, art, "mean")));
}

inline void cmd_fit_cov(const Config& c, Artifacts& art) {
    const auto ds = load_data(c, art);
    const auto pgd = pgd_of(c);
    art.seeds["pgd_seed"] = pgd.seed;
    MeanVarianceEstimate mv;
    if (!c.str("mean").empty()) {
        mv = load_mean(c.str("mean"), art);
    } else {
        json j;
        std::tie(mv, j) = fit_stage1(ds, grid_of(c), c);
        art.add("mean_variance.json", j.dump(2) + "\n");
    }
    auto cands = c.list("cov_bandwidths");
    if (cands.empty()) cands.push_back(mv.bandwidth);
    for (double h : cands)
        if (!(h > 0.0)) throw ValidationError("--cov-bandwidths: candidates must be positive");
    const auto model = cands.size() == 1
                           ? build_covariance_model(ds, mv, mv.grid, KernelSpec{cands.front()}, pgd)
                           : build_covariance_model(ds, mv, mv.grid, std::span<const double>(cands), pgd);
    art.add("covariance.json", to_json(model).dump(2) + "\n");
    art.add("sigma_tilde.csv", matrix_csv(model.grid, model.sigma_tilde));
    art.add("sigma.csv", matrix_csv(model.grid, model.sigma));
    art.add("noise.csv", noise_csv(model));
    art.add("eigenfunctions.csv", eigen_csv(model.eigen, static_cast<int>(model.eigen.positive_count())));
    art.add("fve.csv", fve_csv(model.eigen));
    art.extra["sweeps"] = model.sweeps;
    art.extra["converged"] = model.converged;
    art.extra["warnings"] = model.warnings;
}

inline void cmd_scores(const Config& c, Artifacts& art) {
    auto ds = load_data(c, art);
    if (c.str("mean").empty() || c.str("cov").empty()) throw UsageError("--mean and --cov are required");
    const auto mv = load_mean(c.str("mean"), art);
    const auto model = covariance_model_from_json(json::parse(read_input(c.str("cov"), art, "cov")));
    if (model.grid != mv.grid) throw ValidationError("mean and covariance were fitted on different grids");
    ScoreOptions so;
    so.m = c.positive_int("m");
    so.seed = static_cast<std::uint64_t>(c.integer("seed"));
    so.gibbs.burn_in = c.positive_int("burn_in", 0);
    art.seeds["seed"] = so.seed;
    int K = static_cast<int>(c.integer("K"));
    if (K < 0) throw ValidationError("--K must be non-negative");
    if (K == 0) K = std::min(select_K_fve(model.eigen, c.num("fve")), static_cast<int>(model.eigen.positive_count()));
    if (c.flag("ignore_flags")) ds = ds.without_truncation();
    const auto s = predict_scores_mc(ds, model, mv, K, so);
    art.add("scores.csv", scores_csv(s));
    art.extra["K"] = K;
}

inline void cmd_gflm(const Config& c, Artifacts& art) {
    if (c.str("scores").empty() || c.str("covariates").empty())
        throw UsageError("--scores and --covariates are required");
    std::istringstream sin(read_input(c.str("scores"), art, "scores"));
    ScoreSet s = scores_from_csv(sin);
    const auto column = c.str("score_column");
    if (column == "nontrunc") s.scores = s.scores_nontrunc;
    else if (column != "mc") throw ValidationError("--score-column must be mc or nontrunc");

    FunctionalDataset keyed;
    for (const auto& id : s.unit_ids) keyed.trajectories.push_back({id, {}});
    std::istringstream cin_(read_input(c.str("covariates"), art, "covariates"));
    keyed = attach_covariates(std::move(keyed), cin_);
    if (!keyed.outcomes) throw ValidationError("covariate file has no y column");

    const Link link = parse_link(c.str("link"));
    int K = static_cast<int>(c.integer("K"));
    if (K < 0) throw ValidationError("--K must be non-negative");
    if (K == 0) K = s.K;
    std::optional<MatrixXd> X;
    if (keyed.covariates && keyed.covariates->cols() > 0) X = keyed.covariates;
    const auto fit = fit_gflm(s, X, *keyed.outcomes, link, K, keyed.covariate_names);
    const VectorXd pred = predict_gflm(fit, s, X);
    art.add("fit.json", to_json(fit).dump(2) + "\n");
    std::ostringstream out;
    out << "unit_id,y,fitted" << (link == Link::logit ? ",class" : "") << '\n';
    for (std::size_t i = 0; i < s.unit_ids.size(); ++i) {
        const auto ii = static_cast<Eigen::Index>(i);
        out << s.unit_ids[i] << ',' << tfpca::detail::format_double((*keyed.outcomes)(ii)) << ','
            << tfpca::detail::format_double(pred(ii));
        if (link == Link::logit) out << ',' << (pred(ii) >= 0.5 ? 1 : 0);
        out << '\n';
    }
    art.add("predictions.csv", out.str());
}

inline std::string join_best(const std::vector<std::string>& v) {
    std::string s;
    for (const auto& x : v) s += (s.empty() ? "" : "|") + x;
    return s;
}

inline std::set<std::string> split_best(const std::string& s) {
    std::set<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, '|')) out.insert(item);
    return out;
}

/// Comparison rows for one (case, metric): desk value against the reference
/// per method, plus whether the best method and the proposed-vs-naive order
/// agree.
inline void compare_rows(std::ostringstream& out, const std::string& table, const ReferenceCell& ref,
                         const ExperimentResult& res, bool higher_is_better) {
    const MethodId methods[3] = {MethodId::proposed, MethodId::naive, MethodId::pace};
    const double refs[3] = {ref.proposed, ref.naive, ref.pace};
    double desk[3];
    for (int m = 0; m < 3; ++m) desk[m] = res.find(methods[m], ref.metric).mean;
    double best_val = desk[0];
    for (double d : desk) best_val = higher_is_better ? std::max(best_val, d) : std::min(best_val, d);
    std::vector<std::string> desk_best;
    for (int m = 0; m < 3; ++m)
        if (desk[m] == best_val) desk_best.push_back(to_string(methods[m]));
    const auto ref_best = split_best(ref.best);
    bool best_match = false;
    for (const auto& d : desk_best) best_match = best_match || ref_best.count(d) > 0;
    auto sign = [](double v) { return (v > 0) - (v < 0); };
    const bool pn_match = sign(refs[0] - refs[1]) == 0 || sign(refs[0] - refs[1]) == sign(desk[0] - desk[1]);
    for (int m = 0; m < 3; ++m) {
        const double ratio = refs[m] != 0.0 ? desk[m] / refs[m] : std::numeric_limits<double>::quiet_NaN();
        const bool within = refs[m] != 0.0 && ratio >= 0.5 && ratio <= 1.5;
        out << table << ',' << ref.case_id << ',' << ref.metric << ',' << to_string(methods[m]) << ','
            << tfpca::detail::format_double(refs[m]) << ',' << tfpca::detail::format_double(desk[m]) << ','
            << (refs[m] != 0.0 ? tfpca::detail::format_double(ratio) : "") << ',' << (within ? 1 : 0) << ','
            << ref.best << ',' << join_best(desk_best) << ',' << (best_match ? 1 : 0) << ',' << (pn_match ? 1 : 0)
            << '\n';
    }
}

inline const char* kComparisonHeader =
    "table,case,metric,method,reference,desk,ratio,within_50pct,reference_best,desk_best,best_match,"
    "proposed_vs_naive_match\n";

inline std::string table_csv(const std::vector<std::pair<int, const ExperimentResult*>>& runs,
                             const std::vector<std::string>& metrics) {
    std::ostringstream out;
    out << "case,method";
    for (const auto& m : metrics) out << ',' << m << ',' << m << "_se";
    out << ",failures\n";
    for (const auto& [c, res] : runs)
        for (MethodId mid : res->config.methods) {
            out << c << ',' << to_string(mid);
            int failures = 0;
            for (const auto& m : metrics) {
                const auto& s = res->find(mid, m);
                out << ',' << tfpca::detail::format_double(s.mean) << ',' << tfpca::detail::format_double(s.se);
                failures = s.failures;
            }
            out << ',' << failures << '\n';
        }
    return out.str();
}

/// Replicate 0 of each case refitted by every method, for overlay plots.
inline void overlay_plots(const ExperimentConfig& base, Artifacts& art) {
    std::ostringstream means, eig;
    means << "case,t,truth,proposed,naive,pace\n";
    eig << "t,truth,proposed,naive,pace\n";
    for (int c = 1; c <= 5; ++c) {
        SimCase sc;
        sc.case_id = c;
        sc.n = base.n;
        sc.g = base.g;
        sc.seed = replicate_seed(base.seed, c, 0);
        auto [ds, truth] = generate_case(sc);
        std::vector<MethodResult> fits;
        for (MethodId m : {MethodId::proposed, MethodId::naive, MethodId::pace}) {
            MethodOptions mo = base.method;
            mo.pgd.seed = mix_seed(sc.seed, 3);
            mo.compute_scores = false;
            fits.push_back(run_method(m, ds, truth.grid, mo));
        }
        const VectorXd w = trapezoid_weights(truth.grid);
        for (std::size_t i = 0; i < truth.grid.size(); ++i) {
            const auto ii = static_cast<Eigen::Index>(i);
            means << c << ',' << tfpca::detail::format_double(truth.grid[i]) << ','
                  << tfpca::detail::format_double(truth.mu(ii));
            for (const auto& f : fits) means << ',' << tfpca::detail::format_double(f.mv.mu_at(truth.grid[i]));
            means << '\n';
        }
        if (c == 5) {
            const VectorXd phi = truth.eigen.eigenvectors.col(0);
            std::vector<VectorXd> est;
            for (const auto& f : fits) {
                VectorXd e = f.cov.eigen.eigenvectors.col(0);
                if (e.cwiseProduct(w).dot(phi) < 0) e = -e;
                est.push_back(e);
            }
            for (std::size_t i = 0; i < truth.grid.size(); ++i) {
                const auto ii = static_cast<Eigen::Index>(i);
                eig << tfpca::detail::format_double(truth.grid[i]) << ',' << tfpca::detail::format_double(phi(ii));
                for (const auto& e : est) eig << ',' << tfpca::detail::format_double(e(ii));
                eig << '\n';
            }
            art.add("covariance_case5_truth.csv", matrix_csv(truth.grid, truth.sigma));
            const char* names[3] = {"proposed", "naive", "pace"};
            for (int m = 0; m < 3; ++m)
                art.add(std::string("covariance_case5_") + names[m] + ".csv",
                        matrix_csv(truth.grid, fits[static_cast<std::size_t>(m)].cov.sigma));
        }
    }
    art.add("mean_overlay.csv", means.str());
    art.add("eigenfunction_overlay.csv", eig.str());
}

inline void cmd_reproduce(const Config& c, Artifacts& art, int threads, std::ostream& log) {
    const auto table = c.str("table");
    if (table != "1" && table != "2" && table != "gflm" && table != "all")
        throw ValidationError("--table must be 1, 2, gflm or all");
    const bool fast = c.flag("fast");
    ExperimentConfig base;
    base.replicates = c.integer("replicates") > 0 ? c.positive_int("replicates") : (fast ? 25 : 100);
    base.n = c.integer("n") > 0 ? c.positive_int("n", 2) : (fast ? 60 : 100);
    base.g = c.positive_int("g", 3);
    base.seed = static_cast<std::uint64_t>(c.integer("seed"));
    base.threads = threads;
    base.method.cov_bandwidth_factors = c.list("cov_bandwidth_factors");
    if (base.method.cov_bandwidth_factors.empty()) throw ValidationError("--cov-bandwidth-factors must not be empty");
    base.method.fve_threshold = c.num("fve");
    base.method.scores.m = c.positive_int("m");
    art.seeds["seed"] = base.seed;
    art.extra["replicates"] = base.replicates;
    art.extra["n"] = base.n;

    std::vector<std::pair<int, ReplicateRecord>> records;
    std::vector<std::pair<int, MetricSummary>> summary;
    std::ostringstream comparison;
    comparison << kComparisonHeader;

    if (table != "gflm") {
        std::vector<ExperimentResult> results;
        for (int cs = 1; cs <= 5; ++cs) {
            ExperimentConfig cfg = base;
            cfg.case_id = cs;
            cfg.scenario = Scenario::surfaces;
            log << "case " << cs << ": " << cfg.replicates << " replicates\n" << std::flush;
            results.push_back(run_experiment(cfg));
        }
        std::vector<std::pair<int, const ExperimentResult*>> runs;
        for (int cs = 1; cs <= 5; ++cs) {
            const auto& res = results[static_cast<std::size_t>(cs - 1)];
            runs.emplace_back(cs, &res);
            for (const auto& r : res.records) records.emplace_back(cs, r);
            for (const auto& s : res.summary) summary.emplace_back(cs, s);
        }
        const bool t1 = table == "1" || table == "all", t2 = table == "2" || table == "all";
        if (t1) art.add("table1.csv", table_csv(runs, {"mean_sse", "cov_sse"}));
        if (t2) art.add("table2.csv", table_csv(runs, {"noise_sse", "snr_sse", "eigen_alignment"}));
        for (const auto& ref : reference_surfaces()) {
            const std::string m = ref.metric;
            const bool in1 = m == "mean_sse" || m == "cov_sse";
            if ((in1 && t1) || (!in1 && t2))
                compare_rows(comparison, in1 ? "1" : "2", ref, results[static_cast<std::size_t>(ref.case_id - 1)], false);
        }
        overlay_plots(base, art);
    }
    if (table == "gflm" || table == "all") {
        ExperimentConfig cfg = base;
        cfg.case_id = c.positive_int("gflm_case");
        cfg.scenario = Scenario::gflm;
        log << "gflm (case " << cfg.case_id << "): " << cfg.replicates << " replicates\n" << std::flush;
        const auto res = run_experiment(cfg);
        art.add("table_gflm.csv", table_csv({{cfg.case_id, &res}}, metric_names(Scenario::gflm)));
        std::ostringstream grec;
        std::vector<std::pair<int, ReplicateRecord>> gr;
        std::vector<std::pair<int, MetricSummary>> gs;
        for (const auto& r : res.records) gr.emplace_back(cfg.case_id, r);
        for (const auto& s : res.summary) gs.emplace_back(cfg.case_id, s);
        art.add("records_gflm.csv", records_csv(gr, Scenario::gflm));
        art.add("summary_gflm.csv", summary_csv(gs));
        for (auto ref : reference_gflm()) {
            ref.case_id = cfg.case_id;
            compare_rows(comparison, "gflm", ref, res, std::string(ref.metric).rfind("acc", 0) == 0);
        }
    }
    if (!records.empty()) {
        art.add("records.csv", records_csv(records, Scenario::surfaces));
        art.add("summary.csv", summary_csv(summary));
    }
    art.add("comparison.csv", comparison.str());
}

inline int cmd_validate(const Config& c, Artifacts& art, std::ostream& out) {
    const auto ds = load_data(c, art);
    const auto report = validate(ds);
    std::ostringstream text;
    for (const auto& e : report.entries) {
        text << (e.passed ? "PASS " : "FAIL ") << e.invariant << '\n';
        for (const auto& f : e.failures) text << "  " << f << '\n';
    }
    text << "units=" << ds.size() << " points=" << ds.total_points()
         << " truncated_fraction=" << tfpca::detail::format_double(ds.truncated_fraction()) << '\n';
    out << text.str();
    art.add("validation.txt", text.str());
    return report.ok() ? kOk : kValidation;
}

inline json versions() {
    return {{"tfpca", kVersion},
            {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                          std::to_string(EIGEN_MINOR_VERSION)},
            {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                  std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
            {"cli11", CLI11_VERSION},
            {"openssl", OPENSSL_VERSION_TEXT},
            {"compiler", __VERSION__}};
}

inline void write_run(const std::string& out_dir, const std::string& command, const json& config,
                      const Artifacts& art) {
    const std::filesystem::path dir(out_dir);
    json outputs = json::object();
    for (const auto& [name, content] : art.files) outputs[name] = sha256_hex(content);
    const std::string config_text = config.dump(2) + "\n";
    outputs["config.json"] = sha256_hex(config_text);
    json manifest = {{"command", command}, {"config", config},    {"seeds", art.seeds},
                     {"inputs", art.inputs}, {"outputs", outputs}, {"versions", versions()}};
    if (!art.extra.empty()) manifest["run"] = art.extra;
    for (const auto& [name, content] : art.files) atomic_write(dir / name, content);
    atomic_write(dir / "config.json", config_text);
    atomic_write(dir / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace detail

/// Runs one command line. Never throws; returns the process exit status.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    using detail::json;
    CLI::App app{"Functional principal components for truncated functional data"};
    app.require_subcommand(1);
    app.set_version_flag("--version", kVersion);

    const auto cmds = detail::commands();
    struct Bound {
        CLI::App* sub;
        std::string config_path;
        std::map<std::string, std::string> text;
        std::map<std::string, bool> flags;
        std::map<std::string, CLI::Option*> opts;
    };
    std::vector<Bound> bound(cmds.size());
    for (std::size_t i = 0; i < cmds.size(); ++i) {
        auto& b = bound[i];
        b.sub = app.add_subcommand(cmds[i].name, cmds[i].help);
        b.sub->add_option("--config", b.config_path, "JSON run configuration; command-line flags take precedence");
        for (const auto& o : cmds[i].opts) {
            const auto name = detail::flag_name(o.key);
            if (o.def.is_boolean()) b.opts[o.key] = b.sub->add_flag(name, b.flags[o.key], o.help);
            else b.opts[o.key] = b.sub->add_option(name, b.text[o.key], o.help);
        }
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return kUsage;
    }

    std::size_t which = 0;
    for (; which < cmds.size(); ++which)
        if (bound[which].sub->parsed()) break;
    const auto& cmd = cmds[which];
    auto& b = bound[which];

    try {
        json cfg = json::object();
        for (const auto& o : cmd.opts) cfg[o.key] = o.def;
        if (!b.config_path.empty()) {
            if (!std::filesystem::exists(b.config_path))
                throw MissingInputError("missing config file '" + b.config_path + "'");
            json file;
            try {
                file = json::parse(read_file(b.config_path));
            } catch (const json::parse_error& e) {
                throw ValidationError(std::string("config: ") + e.what());
            }
            if (!file.is_object()) throw ValidationError("config: expected a JSON object");
            if (file.contains(cmd.name) && file[cmd.name].is_object()) file = file[cmd.name];
            for (auto it = file.begin(); it != file.end(); ++it) {
                auto spec = std::find_if(cmd.opts.begin(), cmd.opts.end(), [&](const auto& o) { return o.key == it.key(); });
                if (spec == cmd.opts.end()) throw ValidationError("config: unknown key '" + it.key() + "'");
                detail::check_type(*spec, it.value());
                cfg[it.key()] = it.value();
            }
        }
        for (const auto& o : cmd.opts) {
            if (b.opts[o.key]->count() == 0) continue;
            cfg[o.key] = o.def.is_boolean() ? json(b.flags[o.key]) : detail::coerce(o, b.text[o.key]);
        }

        int threads = 1;
        if (!cfg["threads"].is_null()) {
            threads = static_cast<int>(cfg["threads"].get<double>());
        } else if (const char* env = std::getenv("TRUNC_FPCA_THREADS")) {
            const auto v = tfpca::detail::parse_double(env);
            if (!v) throw ValidationError("TRUNC_FPCA_THREADS is not a number");
            threads = static_cast<int>(*v);
        }
        if (threads < 1) throw ValidationError("--threads must be at least 1");

        for (const auto& o : cmd.opts)
            if (o.input && !cfg[o.key].get<std::string>().empty() &&
                !std::filesystem::exists(cfg[o.key].get<std::string>()))
                throw MissingInputError("missing input file '" + cfg[o.key].get<std::string>() + "'");

        const std::string out_dir = cfg["out"].get<std::string>();
        if (out_dir.empty() && cmd.name != "validate") throw UsageError("--out is required");

        detail::Config c{cfg};
        detail::Artifacts art;
        int status = kOk;
        if (cmd.name == "simulate") detail::cmd_simulate(c, art);
        else if (cmd.name == "fit-mean") detail::cmd_fit_mean(c, art);
        else if (cmd.name == "fit-cov") detail::cmd_fit_cov(c, art);
        else if (cmd.name == "scores") detail::cmd_scores(c, art);
        else if (cmd.name == "gflm") detail::cmd_gflm(c, art);
        else if (cmd.name == "reproduce") detail::cmd_reproduce(c, art, threads, err);
        else status = detail::cmd_validate(c, art, out);

        if (!out_dir.empty()) {
            json recorded = cfg;
            recorded.erase("out");
            detail::write_run(out_dir, cmd.name, recorded, art);
            out << "wrote " << art.files.size() + 2 << " files to " << out_dir << '\n';
        }
        return status;
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n' << b.sub->help();
        return kUsage;
    } catch (const MissingInputError& e) {
        err << "error: " << e.what() << '\n';
        return kMissingInput;
    } catch (const NumericalError& e) {
        err << "numerical failure: " << e.what() << '\n';
        return kNumerical;
    } catch (const CollinearityError& e) {
        err << "validation error: " << e.what() << '\n';
        return kValidation;
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const nlohmann::json::exception& e) {
        err << "error: malformed JSON input: " << e.what() << '\n';
        return kValidation;
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << '\n';
        return kValidation;
    } catch (const std::exception& e) {
        err << "numerical failure: " << e.what() << '\n';
        return kNumerical;
    }
}

}  // namespace tfpca::cli
