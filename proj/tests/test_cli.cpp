#include "readers.hpp"
#include "geobeam/validate.hpp"

#include <gtest/gtest.h>

using namespace geobeam;
using namespace geobeam::cli;

namespace {

std::string error_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const ConfigError& e) {
        return e.what();
    }
    return "";
}

} // namespace

TEST(FlatConfig, ParsesTypedValues) {
    auto c = FlatConfig::parse("# header\nmetric.id = hyperbolic  # trailing\ngrid.n=48\nbeam.lambdas = 10, 20,40\n"
                               "beam.start = -0.5, 0.25\nbeam.cross = false\n",
                               "a.cfg");
    EXPECT_EQ(c.str("metric.id", ""), "hyperbolic");
    EXPECT_EQ(c.integer("grid.n", 0), 48);
    EXPECT_EQ(c.list("beam.lambdas", {}), (std::vector<double>{10, 20, 40}));
    EXPECT_EQ(c.vec2("beam.start", Vec2::Zero()), Vec2(-0.5, 0.25));
    EXPECT_FALSE(c.flag("beam.cross", true));
    EXPECT_EQ(c.num("metric.rho", 0.6), 0.6);
    EXPECT_NO_THROW(c.reject_unknown());
}

TEST(FlatConfig, ErrorsNameFileLineAndField) {
    EXPECT_NE(error_of([] { FlatConfig::parse("a = 1\nb\n", "x.cfg"); }).find("x.cfg:2"), std::string::npos);
    EXPECT_NE(error_of([] { FlatConfig::parse("a = 1\na = 2\n", "x.cfg"); }).find("duplicate key 'a'"),
              std::string::npos);

    auto c = FlatConfig::parse("\ngrid.n = 4x\n", "x.cfg");
    const auto bad = error_of([&] { c.integer("grid.n", 0); });
    EXPECT_NE(bad.find("x.cfg:2"), std::string::npos);
    EXPECT_NE(bad.find("'grid.n'"), std::string::npos);

    auto d = FlatConfig::parse("grid.n = 4\n\n\ngird.m = 3\n", "y.cfg");
    d.integer("grid.n", 0);
    const auto unk = error_of([&] { d.reject_unknown(); });
    EXPECT_NE(unk.find("y.cfg:4: unknown key 'gird.m'"), std::string::npos);
    EXPECT_NE(unk.find("grid.n"), std::string::npos);

    auto e = FlatConfig::parse("grid.n = 4\n", "z.cfg");
    EXPECT_NE(error_of([&] { read_metric(e, "", false); }).find("missing required field 'metric.id'"),
              std::string::npos);
}

TEST(FlatConfig, MetricOverrideAndDefaults) {
    auto c = FlatConfig::parse("metric.id = euclidean\n", "m.cfg");
    EXPECT_EQ(read_metric(c, "hyperbolic", false).id(), "hyperbolic");
    EXPECT_DOUBLE_EQ(read_metric(c, "hyperbolic", false).rho(), 0.6);
    auto empty = FlatConfig::parse("", "<defaults>");
    EXPECT_EQ(read_metric(empty, "", true).id(), "euclidean");
    auto bad = FlatConfig::parse("metric.id = sphere\n", "m.cfg");
    EXPECT_NE(error_of([&] { read_metric(bad, "", false); }).find("m.cfg:1"), std::string::npos);
}

TEST(FlatConfig, ExponentOutsideIntervalQuotesIt) {
    for (const char* v : {"0.3333", "0.5", "0.6"}) {
        auto c = FlatConfig::parse(std::string("beam.a = ") + v + "\n", "b.cfg");
        const auto msg = error_of([&] { read_exponent(c, "beam.a"); });
        EXPECT_NE(msg.find("(1/3, 1/2)"), std::string::npos) << v;
        EXPECT_NE(msg.find("b.cfg:1"), std::string::npos);
    }
    auto ok = FlatConfig::parse("beam.a = 0.45\n", "b.cfg");
    EXPECT_EQ(read_exponent(ok, "beam.a"), 0.45);
}

TEST(ExperimentFile, PairAndDifferenceFormsAgree) {
    auto a = FlatConfig::parse("metric.id = euclidean\npair.q1 = bump(0,0,0.5,1)+bump(0.2,0,0.3,0.5)\n"
                               "pair.q2 = bump(0,0,0.5,1)\nrecover.lambdas = 20, 30\n",
                               "a.cfg");
    auto b = FlatConfig::parse("metric.id = euclidean\npotential.q = bump(0,0,0.5,1)\n"
                               "potential.p = bump(0.2,0,0.3,0.5)\nrecover.lambdas = 20, 30\n",
                               "b.cfg");
    const auto ea = read_experiment(a), eb = read_experiment(b);
    EXPECT_EQ(ea.q.text(), eb.q.text());
    EXPECT_EQ(ea.p.text(), eb.p.text());
    EXPECT_EQ(ea.to_json().dump(), eb.to_json().dump());

    auto both = FlatConfig::parse("metric.id = euclidean\npair.q1 = 0\npotential.p = 0\n", "c.cfg");
    EXPECT_THROW(read_experiment(both), ConfigError);
    auto extra = FlatConfig::parse("metric.id = euclidean\nsobolev.b = 3\n", "d.cfg");
    EXPECT_NE(error_of([&] { read_experiment(extra); }).find("unknown key 'sobolev.b'"), std::string::npos);
}

TEST(Validate, SuiteGreenAndInjectedFaultCaught) {
    const auto good = run_validation();
    ASSERT_EQ(good.size(), 8u);
    for (const auto& r : good) EXPECT_TRUE(r.ok) << r.name << ": " << r.value << " " << r.detail;

    ValidateOptions o;
    o.inject_mu_sign = true;
    const auto bad = run_validation(o);
    EXPECT_FALSE(bad.front().ok);
    EXPECT_EQ(bad.front().name, "santalo");
    // flipped mu reverses the sign of the fan side only
    EXPECT_NEAR(bad.front().value, 2.0, 1e-6);
}

TEST(Validate, ExceptionsBecomeFailures) {
    const auto r = detail::timed("boom", []() -> CheckResult { throw Error("broken"); });
    EXPECT_FALSE(r.ok);
    EXPECT_EQ(r.name, "boom");
    EXPECT_NE(r.detail.find("broken"), std::string::npos);
}

TEST(BeamSweep, DiameterRowsConsistent) {
    const auto m = euclidean_metric();
    GeodesicPath g;
    g.t = {0};
    g.x = {Vec2(-m.rho1(), 0)};
    g.v = {Vec2(1, 0)};
    BeamSweepOptions o;
    const auto rows = beam_sweep(m, g, {25, 50}, o);
    ASSERT_EQ(rows.size(), 2u);
    for (const auto& r : rows) {
        EXPECT_NEAR(r.delta, 16 * std::pow(r.lambda, -0.4), 1e-12);
        // mass is normalized by the diameter length 2
        EXPECT_NEAR(r.mass, 1 + r.gap / 2, 1e-12);
        EXPECT_LT(std::abs(r.gap), 0.05);
        EXPECT_TRUE(std::isfinite(r.cross));
    }
    EXPECT_LT(rows[1].residual, rows[0].residual);
    EXPECT_LT(std::abs(rows[1].gap), std::abs(rows[0].gap));
    const auto j = sweep_json(rows);
    EXPECT_EQ(j.size(), 2u);
    EXPECT_TRUE(j[0].contains("cross"));
}
