#pragma once

// JSON and CSV serialization of estimates, models, scores and fits, plus
// atomic file output.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "tfpca/covariance.hpp"
#include "tfpca/dataset.hpp"
#include "tfpca/errors.hpp"
#include "tfpca/gflm.hpp"
#include "tfpca/mean_variance.hpp"
#include "tfpca/scores.hpp"
#include "tfpca/simulation.hpp"

namespace tfpca {

using nlohmann::json;

/// Writes `content` next to `path` and renames it into place, so readers
/// never observe a partial file.
inline void atomic_write(const std::filesystem::path& path, const std::string& content) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open '" + tmp.string() + "' for writing");
        out << content;
        out.flush();
        if (!out) throw Error("write to '" + tmp.string() + "' failed");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp);
        throw Error("cannot move output into '" + path.string() + "': " + ec.message());
    }
}

inline std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw LookupError("cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

namespace detail {

inline json to_json_vec(const VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline json to_json_mat(const MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        std::vector<double> row(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
        rows.push_back(row);
    }
    return rows;
}

inline VectorXd vec_from_json(const json& j) {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline MatrixXd mat_from_json(const json& j) {
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = rows > 0 ? static_cast<Eigen::Index>(j[0].size()) : 0;
    MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        if (static_cast<Eigen::Index>(j[static_cast<std::size_t>(r)].size()) != cols)
            throw ParseError("ragged matrix in JSON", 0);
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = j[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)].get<double>();
    }
    return m;
}

}  // namespace detail

inline json to_json(const MeanVarianceEstimate& mv) {
    return {{"grid", mv.grid},
            {"mu_hat", detail::to_json_vec(mv.mu_hat)},
            {"sigma_tilde_sq_hat", detail::to_json_vec(mv.sigma_tilde_sq_hat)},
            {"bandwidth", mv.bandwidth}};
}

inline MeanVarianceEstimate mean_variance_from_json(const json& j) {
    MeanVarianceEstimate mv;
    mv.grid = j.at("grid").get<std::vector<double>>();
    mv.mu_hat = detail::vec_from_json(j.at("mu_hat"));
    mv.sigma_tilde_sq_hat = detail::vec_from_json(j.at("sigma_tilde_sq_hat"));
    mv.bandwidth = j.at("bandwidth").get<double>();
    const auto g = static_cast<Eigen::Index>(mv.grid.size());
    if (mv.mu_hat.size() != g || mv.sigma_tilde_sq_hat.size() != g)
        throw ParseError("mean/variance JSON: vector lengths differ from the grid", 0);
    return mv;
}

inline json to_json(const EigenSystem& e) {
    return {{"eigenvalues", detail::to_json_vec(e.eigenvalues)},
            {"eigenfunctions", detail::to_json_mat(e.eigenvectors.transpose())},
            {"fve", detail::to_json_vec(e.fve)}};
}

inline json to_json(const CovarianceModel& m) {
    json table = json::array();
    for (const auto& row : m.bandwidth_table) table.push_back({{"bandwidth", row.bandwidth}, {"score", row.score}});
    return {{"grid", m.grid},
            {"sigma_tilde", detail::to_json_mat(m.sigma_tilde)},
            {"sigma", detail::to_json_mat(m.sigma)},
            {"noise_var", detail::to_json_vec(m.noise_var)},
            {"noise_fraction", detail::to_json_vec(m.snr())},
            {"eigen", to_json(m.eigen)},
            {"bandwidth", m.bandwidth},
            {"bandwidth_table", table},
            {"sweeps", m.sweeps},
            {"converged", m.converged},
            {"warnings", m.warnings}};
}

/// Rebuilds a model; the eigensystem is recomputed from Σ̂.
inline CovarianceModel covariance_model_from_json(const json& j) {
    CovarianceModel m;
    m.grid = j.at("grid").get<std::vector<double>>();
    m.sigma_tilde = detail::mat_from_json(j.at("sigma_tilde"));
    m.sigma = detail::mat_from_json(j.at("sigma"));
    m.noise_var = detail::vec_from_json(j.at("noise_var"));
    m.bandwidth = j.at("bandwidth").get<double>();
    m.sweeps = j.value("sweeps", 0);
    m.converged = j.value("converged", true);
    const auto g = static_cast<Eigen::Index>(m.grid.size());
    if (m.sigma.rows() != g || m.sigma.cols() != g || m.sigma_tilde.rows() != g || m.sigma_tilde.cols() != g ||
        m.noise_var.size() != g)
        throw ParseError("covariance JSON: dimensions differ from the grid", 0);
    m.eigen = eigen_decompose_psd(m.sigma, m.grid);
    return m;
}

inline json to_json(const GflmFit& f) {
    return {{"link", to_string(f.link)},
            {"K", f.K},
            {"columns", f.column_names},
            {"coefficients", detail::to_json_vec(f.coefficients())},
            {"std_errors", detail::to_json_vec(f.std_errors)},
            {"residual_variance", f.residual_variance},
            {"loglik", f.info.loglik},
            {"iterations", f.info.iterations},
            {"converged", f.info.converged},
            {"separation", f.info.separation},
            {"gradient_norm", f.info.gradient_norm}};
}

inline GflmFit gflm_from_json(const json& j) {
    GflmFit f;
    f.link = parse_link(j.at("link").get<std::string>());
    f.K = j.at("K").get<int>();
    f.column_names = j.at("columns").get<std::vector<std::string>>();
    const VectorXd c = detail::vec_from_json(j.at("coefficients"));
    const auto p = c.size() - 1 - f.K;
    if (p < 0) throw ParseError("GFLM JSON: coefficient count below K + 1", 0);
    f.intercept = c(0);
    f.covariate_coeffs = c.segment(1, p);
    f.score_coeffs = c.tail(f.K);
    f.std_errors = detail::vec_from_json(j.at("std_errors"));
    f.residual_variance = j.value("residual_variance", 0.0);
    f.info.loglik = j.value("loglik", 0.0);
    f.info.iterations = j.value("iterations", 0);
    f.info.converged = j.value("converged", false);
    f.info.separation = j.value("separation", false);
    f.info.gradient_norm = j.value("gradient_norm", 0.0);
    return f;
}

inline json to_json(const SimTruth& t) {
    return {{"grid", t.grid},
            {"mu", detail::to_json_vec(t.mu)},
            {"sigma", detail::to_json_mat(t.sigma)},
            {"noise", detail::to_json_vec(t.noise)},
            {"eigen", to_json(t.eigen)},
            {"latent", detail::to_json_mat(t.latent)},
            {"scores", detail::to_json_mat(t.scores)},
            {"signal", detail::to_json_vec(t.signal)},
            {"y_identity", detail::to_json_vec(t.y_identity)},
            {"y_logit", detail::to_json_vec(t.y_logit)}};
}

// CSV writers. Numbers use the shortest round-trip representation so the
// same values always produce the same bytes.

inline std::string curve_csv(const MeanVarianceEstimate& mv) {
    std::ostringstream out;
    out << "grid,mu_hat,sigma_tilde_sq_hat\n";
    for (std::size_t i = 0; i < mv.grid.size(); ++i)
        out << detail::format_double(mv.grid[i]) << ',' << detail::format_double(mv.mu_hat(static_cast<Eigen::Index>(i)))
            << ',' << detail::format_double(mv.sigma_tilde_sq_hat(static_cast<Eigen::Index>(i))) << '\n';
    return out.str();
}

/// Square matrix with the grid as header row and first column.
inline std::string matrix_csv(const std::vector<double>& grid, const MatrixXd& m) {
    std::ostringstream out;
    out << "t";
    for (double t : grid) out << ',' << detail::format_double(t);
    out << '\n';
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        out << detail::format_double(grid[static_cast<std::size_t>(r)]);
        for (Eigen::Index c = 0; c < m.cols(); ++c) out << ',' << detail::format_double(m(r, c));
        out << '\n';
    }
    return out.str();
}

inline std::string scores_csv(const ScoreSet& s) {
    std::ostringstream out;
    out << "unit_id,k,score_mc,score_nontrunc,flags\n";
    for (std::size_t i = 0; i < s.unit_ids.size(); ++i)
        for (int k = 0; k < s.K; ++k)
            out << s.unit_ids[i] << ',' << (k + 1) << ','
                << detail::format_double(s.scores(static_cast<Eigen::Index>(i), k)) << ','
                << detail::format_double(s.scores_nontrunc(static_cast<Eigen::Index>(i), k)) << ','
                << (i < s.flags.size() ? s.flags[i] : "") << '\n';
    return out.str();
}

inline ScoreSet scores_from_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw ParseError("empty scores file", 1);
    if (detail::trim(line) != "unit_id,k,score_mc,score_nontrunc,flags")
        throw ParseError("unexpected scores header", 1);
    std::vector<std::string> ids;
    std::vector<std::vector<double>> mc, nt;
    std::vector<std::string> flags;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        auto f = detail::split_csv_line(line);
        if (f.size() != 5) throw ParseError("wrong number of fields", line_no);
        const std::string id(detail::trim(f[0]));
        const auto k = detail::parse_double(f[1]);
        const auto a = detail::parse_double(f[2]);
        const auto b = detail::parse_double(f[3]);
        if (!k || !a || !b) throw ParseError("malformed numeric field", line_no);
        if (ids.empty() || ids.back() != id) {
            ids.push_back(id);
            mc.emplace_back();
            nt.emplace_back();
            flags.emplace_back(detail::trim(f[4]));
        }
        if (static_cast<std::size_t>(*k) != mc.back().size() + 1) throw ParseError("score index out of order", line_no);
        mc.back().push_back(*a);
        nt.back().push_back(*b);
    }
    ScoreSet s;
    s.unit_ids = ids;
    s.flags = flags;
    s.K = ids.empty() ? 0 : static_cast<int>(mc.front().size());
    s.scores.resize(static_cast<Eigen::Index>(ids.size()), s.K);
    s.scores_nontrunc.resize(static_cast<Eigen::Index>(ids.size()), s.K);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (static_cast<int>(mc[i].size()) != s.K) throw ParseError("units have differing K", 0);
        for (int k = 0; k < s.K; ++k) {
            s.scores(static_cast<Eigen::Index>(i), k) = mc[i][static_cast<std::size_t>(k)];
            s.scores_nontrunc(static_cast<Eigen::Index>(i), k) = nt[i][static_cast<std::size_t>(k)];
        }
    }
    return s;
}

inline std::string eigen_csv(const EigenSystem& e, int count) {
    std::ostringstream out;
    out << "t";
    for (int k = 0; k < count; ++k) out << ",phi" << (k + 1);
    out << '\n';
    for (Eigen::Index i = 0; i < e.grid.size(); ++i) {
        out << detail::format_double(e.grid(i));
        for (int k = 0; k < count; ++k) out << ',' << detail::format_double(e.eigenvectors(i, k));
        out << '\n';
    }
    return out.str();
}

inline std::string fve_csv(const EigenSystem& e) {
    std::ostringstream out;
    out << "k,eigenvalue,fve\n";
    for (Eigen::Index k = 0; k < e.eigenvalues.size(); ++k)
        out << (k + 1) << ',' << detail::format_double(e.eigenvalues(k)) << ',' << detail::format_double(e.fve(k))
            << '\n';
    return out.str();
}

inline std::string summary_csv(const std::vector<std::pair<int, MetricSummary>>& rows) {
    std::ostringstream out;
    out << "case,method,metric,mean,se,count,failures\n";
    for (const auto& [c, s] : rows)
        out << c << ',' << to_string(s.method) << ',' << s.metric << ',' << detail::format_double(s.mean) << ','
            << detail::format_double(s.se) << ',' << s.count << ',' << s.failures << '\n';
    return out.str();
}

inline std::string records_csv(const std::vector<std::pair<int, ReplicateRecord>>& rows, Scenario scenario) {
    std::ostringstream out;
    const auto names = metric_names(scenario);
    out << "case,replicate,method,seed,ok";
    for (const auto& n : names) out << ',' << n;
    out << ",error\n";
    for (const auto& [c, r] : rows) {
        out << c << ',' << r.replicate << ',' << to_string(r.method) << ',' << r.seed << ',' << (r.ok ? 1 : 0);
        for (const auto& n : names) out << ',' << detail::format_double(metric_value(r, n));
        std::string err = r.error;
        for (auto& ch : err)
            if (ch == ',' || ch == '\n') ch = ';';
        out << ',' << err << '\n';
    }
    return out.str();
}

}  // namespace tfpca
