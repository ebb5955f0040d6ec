#include <sstream>

#include <gtest/gtest.h>

#include "tfpca/dataset.hpp"

using namespace tfpca;

namespace {

FunctionalDataset parse(const std::string& text, Bounds b, FlagMode mode = FlagMode::infer) {
    std::istringstream in(text);
    LoadOptions lo;
    lo.flag_mode = mode;
    return parse_csv(in, b, lo);
}

}  // namespace

TEST(LoadCsv, InferClampsAndFlags) {
    const auto ds = parse("unit_id,time,value\nu,0.1,-2\nu,0.5,0\nu,0.9,2\n", {-1, 1});
    ASSERT_EQ(ds.size(), 1u);
    const auto& p = ds.trajectories[0].points;
    ASSERT_EQ(p.size(), 3u);
    EXPECT_EQ(p[0].flag, Flag::below);
    EXPECT_EQ(p[1].flag, Flag::none);
    EXPECT_EQ(p[2].flag, Flag::above);
    EXPECT_DOUBLE_EQ(p[0].value, -1.0);
    EXPECT_DOUBLE_EQ(p[1].value, 0.0);
    EXPECT_DOUBLE_EQ(p[2].value, 1.0);
}

TEST(LoadCsv, EmptyFileIsParseError) {
    EXPECT_THROW(parse("", {-1, 1}), ParseError);
    EXPECT_THROW(parse("unit_id,time,value\n", {-1, 1}), ParseError);
}

TEST(LoadCsv, GlucoseStyleExplicitFlags) {
    // Sensor readings capped at 40 and 400 mg/dL.
    const std::string text =
        "unit_id,time,value,flag\n"
        "p1,0.0,40,below\n"
        "p1,0.25,120.5,none\n"
        "p1,0.5,400,above\n"
        "p2,0.1,233,none\n"
        "p2,0.9,400,above\n";
    const auto ds = parse(text, {40, 400}, FlagMode::explicit_flags);
    ASSERT_EQ(ds.size(), 2u);
    EXPECT_EQ(ds.trajectories[0].points[2].flag, Flag::above);
    EXPECT_DOUBLE_EQ(ds.trajectories[0].points[2].value, 400.0);
    EXPECT_EQ(ds.trajectories[0].points[0].flag, Flag::below);
    EXPECT_TRUE(validate(ds).ok());
    EXPECT_NEAR(ds.truncated_fraction(), 3.0 / 5.0, 1e-15);
}

TEST(LoadCsv, ExplicitModeNeedsFlagColumn) {
    EXPECT_THROW(parse("unit_id,time,value\nu,0.1,0\n", {-1, 1}, FlagMode::explicit_flags), ParseError);
}

TEST(LoadCsv, RejectsMalformedRowsAndDuplicates) {
    EXPECT_THROW(parse("unit_id,time,value\nu,abc,0\n", {-1, 1}), ParseError);
    EXPECT_THROW(parse("unit_id,time,value\nu,0.1\n", {-1, 1}), ParseError);
    EXPECT_THROW(parse("unit_id,time,value\nu,0.1,0\nu,0.1,0.2\n", {-1, 1}), DuplicateError);
    EXPECT_THROW(parse("unit_id,time,value\nu,1.5,0\n", {-1, 1}), DomainError);
    EXPECT_THROW(parse("unit_id,time,value\nu,0.5,0\n", {1, -1}), DomainError);
}

TEST(LoadCsv, SortsTimesAndRescales) {
    std::istringstream in("unit_id,time,value\nu,30,0.1\nu,10,0.2\nv,20,0.3\n");
    LoadOptions lo;
    lo.rescale_times = true;
    const auto ds = parse_csv(in, {-1, 1}, lo);
    const auto& p = ds.trajectories[0].points;
    EXPECT_DOUBLE_EQ(p[0].time, 0.0);
    EXPECT_DOUBLE_EQ(p[1].time, 1.0);
    EXPECT_DOUBLE_EQ(ds.trajectories[1].points[0].time, 0.5);
}

TEST(LoadCsv, WriteParseRoundTrip) {
    const auto ds = parse("unit_id,time,value\na,0.1,-3\na,0.2,0.123456789\nb,0.7,5\n", {-1, 1});
    std::ostringstream out;
    write_csv(out, ds);
    const auto back = parse(out.str(), {-1, 1}, FlagMode::explicit_flags);
    ASSERT_EQ(back.size(), ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i)
        for (std::size_t j = 0; j < ds.trajectories[i].size(); ++j) {
            EXPECT_EQ(back.trajectories[i].points[j].value, ds.trajectories[i].points[j].value);
            EXPECT_EQ(back.trajectories[i].points[j].flag, ds.trajectories[i].points[j].flag);
        }
}

TEST(ApplyTruncation, Definition) {
    Trajectory tr{"u", {{0.1, -5, Flag::none}, {0.2, 0.2, Flag::none}, {0.3, 7, Flag::none}}};
    const auto out = apply_truncation(tr, {-1, 1});
    EXPECT_DOUBLE_EQ(out.points[0].value, -1);
    EXPECT_DOUBLE_EQ(out.points[1].value, 0.2);
    EXPECT_DOUBLE_EQ(out.points[2].value, 1);
    EXPECT_EQ(out.points[0].flag, Flag::below);
    EXPECT_EQ(out.points[1].flag, Flag::none);
    EXPECT_EQ(out.points[2].flag, Flag::above);
}

TEST(ApplyTruncation, InteriorValuesUnchanged) {
    Trajectory tr{"u", {{0.1, -0.5, Flag::none}, {0.2, 0.9, Flag::none}}};
    const auto out = apply_truncation(tr, {-1, 1});
    for (std::size_t j = 0; j < tr.size(); ++j) {
        EXPECT_EQ(out.points[j].value, tr.points[j].value);
        EXPECT_EQ(out.points[j].flag, Flag::none);
    }
}

TEST(ApplyTruncation, BoundaryBelongsToTruncatedSet) {
    Trajectory tr{"u", {{0.1, -1.0, Flag::none}, {0.2, 1.0, Flag::none}}};
    const auto out = apply_truncation(tr, {-1, 1});
    EXPECT_EQ(out.points[0].flag, Flag::below);
    EXPECT_EQ(out.points[1].flag, Flag::above);
}

TEST(ApplyTruncation, Idempotent) {
    Trajectory tr{"u", {{0.1, -5, Flag::none}, {0.2, 0.3, Flag::none}, {0.4, 2, Flag::none}}};
    const auto once = apply_truncation(tr, {-1, 1});
    const auto twice = apply_truncation(once, {-1, 1});
    for (std::size_t j = 0; j < tr.size(); ++j) {
        EXPECT_EQ(once.points[j].value, twice.points[j].value);
        EXPECT_EQ(once.points[j].flag, twice.points[j].flag);
    }
}

TEST(Validate, ConsistentDatasetPasses) {
    const auto ds = parse("unit_id,time,value\nu,0.1,-2\nu,0.5,0\nv,0.9,2\n", {-1, 1});
    const auto r = validate(ds);
    EXPECT_TRUE(r.ok());
    for (const auto& e : r.entries) EXPECT_TRUE(e.passed) << e.invariant;
}

TEST(Validate, NoneFlagAtBoundNamesUnitAndTime) {
    FunctionalDataset ds;
    ds.bounds = {-1, 1};
    ds.trajectories.push_back({"unit7", {{0.25, 1.0, Flag::none}}});
    const auto r = validate(ds);
    EXPECT_FALSE(r.ok());
    bool found = false;
    for (const auto& e : r.entries)
        if (e.invariant == "flag_value_consistency") {
            ASSERT_FALSE(e.passed);
            ASSERT_EQ(e.failures.size(), 1u);
            EXPECT_NE(e.failures[0].find("unit7"), std::string::npos);
            EXPECT_NE(e.failures[0].find("0.25"), std::string::npos);
            found = true;
        }
    EXPECT_TRUE(found);
}

TEST(Validate, CovariateRowMismatch) {
    FunctionalDataset ds;
    ds.bounds = {-1, 1};
    ds.trajectories.push_back({"a", {{0.25, 0.0, Flag::none}}});
    ds.trajectories.push_back({"b", {{0.25, 0.0, Flag::none}}});
    ds.covariates = Eigen::MatrixXd::Zero(3, 1);
    const auto r = validate(ds);
    EXPECT_FALSE(r.ok());
    for (const auto& e : r.entries)
        if (e.invariant == "covariate_alignment") EXPECT_FALSE(e.passed);
}

TEST(Validate, DoesNotMutate) {
    FunctionalDataset ds;
    ds.bounds = {-1, 1};
    ds.trajectories.push_back({"a", {{0.5, 0.2, Flag::none}, {0.4, 3.0, Flag::none}}});
    const auto before = ds.trajectories[0].points;
    (void)validate(ds);
    EXPECT_EQ(ds.trajectories[0].points[1].value, before[1].value);
    EXPECT_EQ(ds.trajectories[0].points[0].time, before[0].time);
}

TEST(Covariates, AttachByUnitId) {
    auto ds = parse("unit_id,time,value\na,0.1,0\nb,0.2,0\n", {-1, 1});
    std::istringstream cov("unit_id,age,y\nb,40,1\na,30,0\n");
    ds = attach_covariates(ds, cov);
    ASSERT_TRUE(ds.covariates);
    EXPECT_DOUBLE_EQ((*ds.covariates)(0, 0), 30);
    EXPECT_DOUBLE_EQ((*ds.covariates)(1, 0), 40);
    EXPECT_DOUBLE_EQ((*ds.outcomes)(1), 1);
    EXPECT_EQ(ds.covariate_names, std::vector<std::string>{"age"});
}

TEST(Covariates, MissingUnitIsLookupError) {
    auto ds = parse("unit_id,time,value\na,0.1,0\nb,0.2,0\n", {-1, 1});
    std::istringstream cov("unit_id,age\na,30\n");
    EXPECT_THROW(attach_covariates(ds, cov), LookupError);
}

TEST(Dataset, WithoutTruncationClearsFlags) {
    const auto ds = parse("unit_id,time,value\nu,0.1,-2\nu,0.5,0\n", {-1, 1});
    const auto flat = ds.without_truncation();
    for (const auto& p : flat.trajectories[0].points) EXPECT_EQ(p.flag, Flag::none);
    EXPECT_EQ(flat.trajectories[0].points[0].value, -1.0);
    EXPECT_DOUBLE_EQ(ds.truncated_fraction(), 0.5);
}
