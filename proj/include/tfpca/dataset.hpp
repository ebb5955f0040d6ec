#pragma once

// Truncated functional observations: data model, CSV ingestion and validation.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <system_error>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "tfpca/errors.hpp"

namespace tfpca {

enum class Flag { below, none, above };

inline std::string_view to_string(Flag f) {
    switch (f) {
        case Flag::below: return "below";
        case Flag::above: return "above";
        case Flag::none: break;
    }
    return "none";
}

struct Bounds {
    double lower = -std::numeric_limits<double>::infinity();
    double upper = std::numeric_limits<double>::infinity();

    bool valid() const { return lower < upper; }
    bool contains_open(double v) const { return lower < v && v < upper; }
};

struct ObservationPoint {
    double time = 0.0;
    double value = 0.0;
    Flag flag = Flag::none;
};

struct Trajectory {
    std::string unit_id;
    std::vector<ObservationPoint> points;

    std::size_t size() const { return points.size(); }
};

/// n irregularly observed trajectories recorded on [a, b], plus optional
/// baseline covariates (rows aligned with `trajectories`) and outcomes.
struct FunctionalDataset {
    std::vector<Trajectory> trajectories;
    Bounds bounds;
    std::optional<Eigen::MatrixXd> covariates;
    std::vector<std::string> covariate_names;
    std::optional<Eigen::VectorXd> outcomes;

    std::size_t size() const { return trajectories.size(); }

    std::size_t total_points() const {
        std::size_t total = 0;
        for (const auto& tr : trajectories) total += tr.size();
        return total;
    }

    std::optional<std::size_t> index_of(std::string_view unit_id) const {
        for (std::size_t i = 0; i < trajectories.size(); ++i)
            if (trajectories[i].unit_id == unit_id) return i;
        return std::nullopt;
    }

    double truncated_fraction() const {
        std::size_t total = 0, cut = 0;
        for (const auto& tr : trajectories)
            for (const auto& p : tr.points) {
                ++total;
                if (p.flag != Flag::none) ++cut;
            }
        return total == 0 ? 0.0 : static_cast<double>(cut) / static_cast<double>(total);
    }

    /// Same values with every flag forced to NONE and the bounds widened to
    /// the real line, i.e. the data read as if nothing had been truncated.
    FunctionalDataset without_truncation() const {
        FunctionalDataset out = *this;
        out.bounds = Bounds{};
        for (auto& tr : out.trajectories)
            for (auto& p : tr.points) p.flag = Flag::none;
        return out;
    }
};

enum class FlagMode { explicit_flags, infer };

namespace detail {

inline std::vector<std::string_view> split_csv_line(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        auto pos = line.find(',', start);
        if (pos == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return fields;
}

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::optional<double> parse_double(std::string_view s) {
    s = trim(s);
    if (s.empty()) return std::nullopt;
    if (s.front() == '+') s.remove_prefix(1);
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

inline std::optional<Flag> parse_flag(std::string_view s) {
    s = trim(s);
    std::string lower(s);
    std::transform(lower.begin(), lower.end(), lower.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    if (lower == "below") return Flag::below;
    if (lower == "none") return Flag::none;
    if (lower == "above") return Flag::above;
    return std::nullopt;
}

/// Shortest decimal string that parses back to the identical double.
inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

}  // namespace detail

/// Clamp each latent value into [a, b]. Values on or beyond a bound are
/// flagged as truncated on that side.
inline Trajectory apply_truncation(const Trajectory& latent, const Bounds& bounds) {
    Trajectory out = latent;
    for (auto& p : out.points) {
        if (p.value <= bounds.lower) {
            p.value = bounds.lower;
            p.flag = Flag::below;
        } else if (p.value >= bounds.upper) {
            p.value = bounds.upper;
            p.flag = Flag::above;
        } else {
            p.flag = Flag::none;
        }
    }
    return out;
}

struct LoadOptions {
    FlagMode flag_mode = FlagMode::infer;
    /// Global min-max rescaling of all observation times onto [0, 1].
    bool rescale_times = false;
};

/// Parse long-format `unit_id,time,value[,flag]` CSV text.
inline FunctionalDataset parse_csv(std::istream& in, const Bounds& bounds, const LoadOptions& opts = {}) {
    if (!bounds.valid()) throw DomainError("bounds must satisfy a < b");

    struct Row {
        std::string unit;
        double time;
        double value;
        std::optional<Flag> flag;
        std::size_t line;
    };

    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line)) throw ParseError("empty file", 1);
    ++line_no;
    auto header = detail::split_csv_line(line);
    for (auto& h : header) h = detail::trim(h);
    if (header.size() < 3 || header.size() > 4 || header[0] != "unit_id" || header[1] != "time" ||
        header[2] != "value" || (header.size() == 4 && header[3] != "flag"))
        throw ParseError("expected header unit_id,time,value[,flag]", line_no);
    const bool has_flag = header.size() == 4;
    if (opts.flag_mode == FlagMode::explicit_flags && !has_flag)
        throw ParseError("explicit flag mode requires a flag column", line_no);

    std::vector<Row> rows;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        auto fields = detail::split_csv_line(line);
        if (fields.size() != header.size()) throw ParseError("wrong number of fields", line_no);
        Row row;
        row.unit = std::string(detail::trim(fields[0]));
        if (row.unit.empty()) throw ParseError("empty unit_id", line_no);
        auto t = detail::parse_double(fields[1]);
        auto v = detail::parse_double(fields[2]);
        if (!t || !v || !std::isfinite(*t) || !std::isfinite(*v))
            throw ParseError("malformed numeric field", line_no);
        row.time = *t;
        row.value = *v;
        row.line = line_no;
        if (has_flag && !detail::trim(fields[3]).empty()) {
            auto f = detail::parse_flag(fields[3]);
            if (!f) throw ParseError("flag must be one of below,none,above", line_no);
            row.flag = f;
        } else if (opts.flag_mode == FlagMode::explicit_flags) {
            throw ParseError("missing flag", line_no);
        }
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw ParseError("no data rows", line_no);

    if (opts.rescale_times) {
        double lo = rows.front().time, hi = rows.front().time;
        for (const auto& r : rows) {
            lo = std::min(lo, r.time);
            hi = std::max(hi, r.time);
        }
        const double span = hi - lo;
        for (auto& r : rows) r.time = span > 0.0 ? (r.time - lo) / span : 0.0;
    }

    FunctionalDataset ds;
    ds.bounds = bounds;
    std::unordered_map<std::string, std::size_t> index;
    for (const auto& r : rows) {
        if (r.time < 0.0 || r.time > 1.0)
            throw DomainError("line " + std::to_string(r.line) + ": time " + detail::format_double(r.time) +
                              " outside [0,1]");
        ObservationPoint p{r.time, r.value, Flag::none};
        if (r.flag) {
            p.flag = *r.flag;
            if (p.flag == Flag::below && p.value < bounds.lower) p.value = bounds.lower;
            if (p.flag == Flag::above && p.value > bounds.upper) p.value = bounds.upper;
        } else {
            if (r.value <= bounds.lower) {
                p.value = bounds.lower;
                p.flag = Flag::below;
            } else if (r.value >= bounds.upper) {
                p.value = bounds.upper;
                p.flag = Flag::above;
            }
        }
        auto [it, inserted] = index.try_emplace(r.unit, ds.trajectories.size());
        if (inserted) ds.trajectories.push_back(Trajectory{r.unit, {}});
        ds.trajectories[it->second].points.push_back(p);
    }
    for (auto& tr : ds.trajectories) {
        std::stable_sort(tr.points.begin(), tr.points.end(),
                         [](const auto& x, const auto& y) { return x.time < y.time; });
        for (std::size_t j = 1; j < tr.points.size(); ++j)
            if (tr.points[j].time == tr.points[j - 1].time)
                throw DuplicateError("duplicate observation for unit '" + tr.unit_id + "' at time " +
                                     detail::format_double(tr.points[j].time));
    }
    return ds;
}

inline FunctionalDataset load_csv(const std::string& path, const Bounds& bounds, const LoadOptions& opts = {}) {
    std::ifstream in(path);
    if (!in) throw LookupError("cannot open '" + path + "'");
    return parse_csv(in, bounds, opts);
}

inline void write_csv(std::ostream& out, const FunctionalDataset& ds) {
    out << "unit_id,time,value,flag\n";
    for (const auto& tr : ds.trajectories)
        for (const auto& p : tr.points)
            out << tr.unit_id << ',' << detail::format_double(p.time) << ',' << detail::format_double(p.value)
                << ',' << to_string(p.flag) << '\n';
}

/// Attach covariates/outcomes from a CSV keyed by unit_id. A column named
/// `y` holds the outcome; every other column is a covariate.
inline FunctionalDataset attach_covariates(FunctionalDataset ds, std::istream& in) {
    std::string line;
    std::size_t line_no = 1;
    if (!std::getline(in, line)) throw ParseError("empty covariate file", 1);
    auto header = detail::split_csv_line(line);
    for (auto& h : header) h = detail::trim(h);
    if (header.empty() || header[0] != "unit_id") throw ParseError("expected unit_id as first column", 1);
    std::optional<std::size_t> y_col;
    std::vector<std::size_t> x_cols;
    std::vector<std::string> names;
    for (std::size_t c = 1; c < header.size(); ++c) {
        if (header[c] == "y") y_col = c;
        else {
            x_cols.push_back(c);
            names.emplace_back(header[c]);
        }
    }
    std::map<std::string, std::vector<double>> rows;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        auto fields = detail::split_csv_line(line);
        if (fields.size() != header.size()) throw ParseError("wrong number of fields", line_no);
        std::vector<double> vals;
        for (std::size_t c = 1; c < fields.size(); ++c) {
            auto v = detail::parse_double(fields[c]);
            if (!v) throw ParseError("malformed numeric field", line_no);
            vals.push_back(*v);
        }
        std::string unit(detail::trim(fields[0]));
        if (!rows.emplace(unit, std::move(vals)).second)
            throw DuplicateError("duplicate covariate row for unit '" + unit + "'");
    }
    const auto n = static_cast<Eigen::Index>(ds.size());
    Eigen::MatrixXd x(n, static_cast<Eigen::Index>(x_cols.size()));
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        auto it = rows.find(ds.trajectories[static_cast<std::size_t>(i)].unit_id);
        if (it == rows.end())
            throw LookupError("no covariate row for unit '" + ds.trajectories[static_cast<std::size_t>(i)].unit_id +
                              "'");
        for (std::size_t c = 0; c < x_cols.size(); ++c)
            x(i, static_cast<Eigen::Index>(c)) = it->second[x_cols[c] - 1];
        if (y_col) y(i) = it->second[*y_col - 1];
    }
    if (!x_cols.empty()) {
        ds.covariates = std::move(x);
        ds.covariate_names = std::move(names);
    } else {
        ds.covariates = Eigen::MatrixXd(n, 0);
    }
    if (y_col) ds.outcomes = std::move(y);
    return ds;
}

inline void write_covariates_csv(std::ostream& out, const FunctionalDataset& ds) {
    out << "unit_id";
    const Eigen::Index p = ds.covariates ? ds.covariates->cols() : 0;
    for (Eigen::Index c = 0; c < p; ++c) {
        auto idx = static_cast<std::size_t>(c);
        out << ',' << (idx < ds.covariate_names.size() ? ds.covariate_names[idx] : "x" + std::to_string(c + 1));
    }
    if (ds.outcomes) out << ",y";
    out << '\n';
    for (std::size_t i = 0; i < ds.size(); ++i) {
        out << ds.trajectories[i].unit_id;
        for (Eigen::Index c = 0; c < p; ++c)
            out << ',' << detail::format_double((*ds.covariates)(static_cast<Eigen::Index>(i), c));
        if (ds.outcomes) out << ',' << detail::format_double((*ds.outcomes)(static_cast<Eigen::Index>(i)));
        out << '\n';
    }
}

struct ValidationReport {
    struct Entry {
        std::string invariant;
        bool passed = true;
        std::vector<std::string> failures;
    };
    std::vector<Entry> entries;

    bool ok() const {
        return std::all_of(entries.begin(), entries.end(), [](const Entry& e) { return e.passed; });
    }
};

/// Check every dataset invariant; never throws and never mutates.
inline ValidationReport validate(const FunctionalDataset& ds) {
    ValidationReport report;
    auto add = [&](std::string name) -> ValidationReport::Entry& {
        report.entries.push_back({std::move(name), true, {}});
        return report.entries.back();
    };
    auto fail = [](ValidationReport::Entry& e, std::string msg) {
        e.passed = false;
        e.failures.push_back(std::move(msg));
    };
    auto where = [](const Trajectory& tr, const ObservationPoint& p) {
        return "unit '" + tr.unit_id + "' at time " + detail::format_double(p.time);
    };
    const auto& b = ds.bounds;

    auto& bounds_entry = add("bounds_ordered");
    if (!(b.lower < b.upper)) fail(bounds_entry, "a must be strictly less than b");

    auto& nonempty = add("trajectory_nonempty");
    auto& increasing = add("times_strictly_increasing");
    auto& unit_interval = add("times_in_unit_interval");
    auto& in_bounds = add("values_within_bounds");
    auto& flags = add("flag_value_consistency");
    for (const auto& tr : ds.trajectories) {
        if (tr.points.empty()) fail(nonempty, "unit '" + tr.unit_id + "' has no observations");
        for (std::size_t j = 0; j < tr.points.size(); ++j) {
            const auto& p = tr.points[j];
            if (j > 0 && !(p.time > tr.points[j - 1].time)) fail(increasing, where(tr, p));
            if (!(p.time >= 0.0 && p.time <= 1.0)) fail(unit_interval, where(tr, p));
            if (!(p.value >= b.lower && p.value <= b.upper)) fail(in_bounds, where(tr, p));
            bool consistent = true;
            switch (p.flag) {
                case Flag::below: consistent = p.value == b.lower; break;
                case Flag::above: consistent = p.value == b.upper; break;
                case Flag::none: consistent = b.lower < p.value && p.value < b.upper; break;
            }
            if (!consistent)
                fail(flags, where(tr, p) + ": flag " + std::string(to_string(p.flag)) + " with value " +
                                detail::format_double(p.value));
        }
    }

    auto& cov_align = add("covariate_alignment");
    if (ds.covariates && static_cast<std::size_t>(ds.covariates->rows()) != ds.size())
        fail(cov_align, "covariate matrix has " + std::to_string(ds.covariates->rows()) + " rows for " +
                            std::to_string(ds.size()) + " trajectories");
    auto& out_align = add("outcome_alignment");
    if (ds.outcomes && static_cast<std::size_t>(ds.outcomes->size()) != ds.size())
        fail(out_align, "outcome vector has " + std::to_string(ds.outcomes->size()) + " entries for " +
                            std::to_string(ds.size()) + " trajectories");
    return report;
}

}  // namespace tfpca
