#include "geobeam/reconstruct.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

using namespace geobeam;

namespace {

ScalarField gaussian(Vec2 c, double sigma, double amp) {
    return [=](const Vec2& x) { return amp * std::exp(-(x - c).squaredNorm() / (2 * sigma * sigma)); };
}

// full-line integral of the Gaussian along x0 + t w (|w| = 1)
double gaussian_line(Vec2 c, double sigma, double amp, Vec2 x0, Vec2 w) {
    const Vec2 r = c - x0;
    const double d2 = r.squaredNorm() - std::pow(r.dot(w), 2);
    return amp * sigma * std::sqrt(2 * kPi) * std::exp(-d2 / (2 * sigma * sigma));
}

// a hand-made fan of chords entering the disk of radius R at angle phi,
// direction turned by theta from the inward normal
std::shared_ptr<const InfluxGrid> chords(double R, const std::vector<std::pair<double, double>>& pt) {
    auto g = std::make_shared<InfluxGrid>();
    g->n_s = static_cast<int>(pt.size());
    g->n_theta = 1;
    g->radius = R;
    for (auto [phi, theta] : pt) {
        const Vec2 x = R * Vec2(std::cos(phi), std::sin(phi));
        const Vec2 n = -x / R;
        const Vec2 v(std::cos(theta) * n[0] - std::sin(theta) * n[1], std::sin(theta) * n[0] + std::cos(theta) * n[1]);
        g->nodes.push_back({R * phi, phi, theta, std::cos(theta), 1.0, x, v});
    }
    return g;
}

struct Setup {
    MetricField m = euclidean_metric();
    Mesh mesh;
    DNMatrix dq, dqp;
};

Setup setup(double lambda, const ScalarField& q, const ScalarField& qp, double kh = 0.6) {
    Setup s;
    s.mesh = mesh_for(s.m, lambda, kh);
    std::tie(s.dq, s.dqp) = dn_pair(s.m, s.mesh, q, qp, lambda);
    return s;
}

const Vec2 kC(0.2, 0.1);
constexpr double kSigma = 0.15, kAmp = 0.3;

} // namespace

// --- potentials and gates --------------------------------------------------

TEST(Potential, ParseRoundTrip) {
    const auto p = PotentialSpec::parse(" bump(0.1, -0.2, 0.3, 0.5) + bump(0,0,0.25,-1)");
    ASSERT_EQ(p.bumps.size(), 2u);
    EXPECT_DOUBLE_EQ(p.bumps[1].amplitude, -1);
    EXPECT_EQ(PotentialSpec::parse(p.text()).text(), p.text());
    EXPECT_DOUBLE_EQ(p(Vec2(0.1, -0.2)), 0.5 - std::exp(1 - 1 / (1 - 0.05 / 0.0625)));
    EXPECT_TRUE(PotentialSpec::parse("0").is_zero());
    EXPECT_THROW(PotentialSpec::parse("bump(1,2,3)"), ArgumentError);
    EXPECT_THROW(PotentialSpec::parse("gauss(0,0,1,1)"), ArgumentError);
    EXPECT_THROW(PotentialSpec::parse("bump(0,0,-1,1)"), ArgumentError);
}

TEST(Potential, PairDifferenceCancels) {
    const auto q = PotentialSpec::parse("bump(0,0,0.5,0.5)");
    const auto p = PotentialSpec::parse("bump(0.3,0.1,0.3,0.3)");
    PotentialSpec qp = q;
    qp.bumps.push_back(p.bumps[0]);
    EXPECT_EQ(difference(qp, q).text(), p.text());
    EXPECT_TRUE(difference(q, q).is_zero());
    EXPECT_DOUBLE_EQ(difference(q, qp)(Vec2(0.3, 0.1)), -0.3);
}

TEST(Gates, SupportMarginRefused) {
    ExperimentConfig c;
    c.p = PotentialSpec::parse("bump(0.7,0,0.28,0.3)");
    const auto m = c.make_metric();
    EXPECT_NEAR(support_margin(m, c.p), 0.02, 1e-9);
    try {
        check_admissible(c, m);
        FAIL() << "expected refusal";
    } catch (const AdmissibilityError& e) {
        EXPECT_NE(std::string(e.what()).find("0.02"), std::string::npos) << e.what();
    }
}

TEST(Gates, SupportDistanceUsesMetric) {
    // hyperbolic distance from chart radius r to rho
    const auto m = hyperbolic_metric(0.6);
    const double r = 0.3;
    EXPECT_NEAR(boundary_distance(m, r), 2 * (std::atanh(0.6) - std::atanh(0.3)), 1e-10);
}

TEST(Gates, FrequencyBoundRefused) {
    ExperimentConfig c;
    c.p = PotentialSpec::parse("bump(0.1,0,0.3,0.3)");
    c.bound_B = 10;
    EXPECT_THROW(check_admissible(c, c.make_metric()), AdmissibilityError);
    c.bound_B = 1e4;
    EXPECT_NO_THROW(check_admissible(c, c.make_metric()));
}

TEST(Gates, ExponentInterval) {
    ExperimentConfig c;
    c.a = 0.5;
    try {
        c.validate();
        FAIL();
    } catch (const ArgumentError& e) {
        EXPECT_NE(std::string(e.what()).find("(1/3, 1/2)"), std::string::npos);
    }
}

// --- frequency function ----------------------------------------------------

TEST(FrequencyFunction, ZeroAndOrderZero) {
    const auto m = euclidean_metric();
    EXPECT_EQ(frequency_function(GridFunction::zeros(m, 32), 2, 1.0), 0.0);
    const auto p = GridFunction::sample(m, 32, gaussian(kC, 0.2, 1));
    EXPECT_NEAR(frequency_function(p, 0, 1.0), 1.0, 1e-14);
}

TEST(FrequencyFunction, GaussianClosedForm) {
    // |F|^2 ~ exp(-sigma^2 |xi|^2) in 2D: N_2^2 = 1 + 2/sigma^2 + 2/sigma^4
    const auto m = euclidean_metric();
    const double s2 = 0.04, exact = std::sqrt(1 + 2 / s2 + 2 / (s2 * s2));
    const double n128 = frequency_function(GridFunction::sample(m, 128, gaussian(kC * 0.5, 0.2, 1)), 2, 1.0);
    const double n256 = frequency_function(GridFunction::sample(m, 256, gaussian(kC * 0.5, 0.2, 1)), 2, 1.0);
    EXPECT_NEAR(n128 / exact, 1, 0.01);
    EXPECT_NEAR(n128 / n256, 1, 0.01);
}

TEST(FrequencyFunction, Monotone) {
    const auto m = euclidean_metric();
    const auto p = GridFunction::sample(m, 64, gaussian(kC, 0.2, 1));
    EXPECT_LT(frequency_function(p, 1, 1.0), frequency_function(p, 2, 1.0));
    const auto narrow = GridFunction::sample(m, 64, gaussian(kC, 0.1, 1));
    EXPECT_LT(frequency_function(p, 2, 1.0), frequency_function(narrow, 2, 1.0));
}

// --- interior identity ------------------------------------------------------

TEST(IntegralIdentity, ZeroPotentialAndPairing) {
    const auto m = euclidean_metric();
    const Mesh mesh = mesh_for(m, 30, 0.6);
    GeodesicPath g;
    g.t = {0};
    g.x = {Vec2(-m.rho1(), 0)};
    g.v = {Vec2(1, 0)};
    const auto v = assemble_quasimode(m, g, 30, mesh);
    const InteriorField u{v.values, 30, mesh.hash};
    EXPECT_EQ(integral_identity_check(m, mesh, u, u, {}), cplx(0));
    EXPECT_EQ(integral_identity_check(m, mesh, u, u, [](const Vec2&) { return 0.0; }), cplx(0));
    InteriorField w = u;
    w.lambda = 31;
    EXPECT_THROW(integral_identity_check(m, mesh, u, w, gaussian(kC, kSigma, kAmp)), PairingError);
    w = u;
    w.mesh_hash = "other";
    EXPECT_THROW(integral_identity_check(m, mesh, u, w, gaussian(kC, kSigma, kAmp)), PairingError);
}

TEST(IntegralIdentity, SameQuasimodeGivesRayTransform) {
    // |v|^2 concentrates on the geodesic; the Gaussian beam width biases the
    // value by O(1/lambda)
    const auto m = euclidean_metric();
    GeodesicPath g;
    g.t = {0};
    g.x = {Vec2(-std::sqrt(m.rho1() * m.rho1() - 0.0225), 0.15)};
    g.v = {Vec2(1, 0)};
    const double ip = gaussian_line(kC, kSigma, kAmp, g.x[0], g.v[0]);
    std::vector<double> lams{30, 60}, gap;
    for (double lam : lams) {
        const Mesh mesh = mesh_for(m, lam, 0.6);
        const auto v = assemble_quasimode(m, g, lam, mesh);
        const InteriorField u{v.values, lam, mesh.hash};
        const cplx I = integral_identity_check(m, mesh, u, u, gaussian(kC, kSigma, kAmp));
        EXPECT_NEAR(I.imag(), 0, 1e-12);
        gap.push_back(std::abs(I.real() / ip - 1));
    }
    EXPECT_LT(gap.back(), 0.25);
    EXPECT_LE(loglog_slope(lams, gap), -0.5);
}

// --- boundary pairing and extraction ---------------------------------------

TEST(Extraction, ZeroPerturbationIsExactlyZero) {
    const auto q = PotentialSpec::parse("bump(-0.1,0.05,0.6,0.5)").field();
    auto s = setup(30, q, q);
    const auto fan = chords(1.0, {{kPi, 0}, {0.3, 0.4}, {2.0, -0.9}});
    ExtractDiagnostics dg;
    const RayData d = extract_ray_data(s.m, s.mesh, s.dq, s.dqp, fan, {}, &dg);
    EXPECT_EQ(d.values.lpNorm<Eigen::Infinity>(), 0.0);
    EXPECT_GT(dg.floor.values.minCoeff(), 0.0);
}

TEST(Extraction, MismatchedMapsRefused) {
    const auto m = euclidean_metric();
    const Mesh mesh = mesh_for(m, 30, 0.6);
    const auto a = dn_map(m, mesh, {}, 30);
    const auto b = dn_map(m, mesh, {}, 29.5);
    EXPECT_THROW(BoundaryPairing(m, mesh, a, b), PairingError);
    const Mesh other = mesh_for(m, 31, 0.6);
    EXPECT_THROW(BoundaryPairing(m, other, a, a), PairingError);
}

TEST(Extraction, MatchesLineIntegralsWithDecay) {
    // diameter through the bump, an oblique chord through it and one missing it
    const ScalarField p = gaussian(kC, kSigma, kAmp);
    const auto fan = chords(1.0, {{kPi + 0.1, -0.1}, {-1.2, 0.5}, {kPi / 2, 1.1}});
    std::vector<double> lams{40, 80}, gap, miss, ip;
    for (size_t k = 0; k < fan->size(); ++k)
        ip.push_back(gaussian_line(kC, kSigma, kAmp, fan->nodes[k].x, fan->nodes[k].v));
    ASSERT_GT(ip[0], 0.03);
    ASSERT_LT(ip[2], 1e-5);
    for (double lam : lams) {
        auto s = setup(lam, {}, p);
        const RayData d = extract_ray_data(s.m, s.mesh, s.dq, s.dqp, fan);
        gap.push_back(std::hypot(d.values[0] - ip[0], d.values[1] - ip[1]) / std::hypot(ip[0], ip[1]));
        miss.push_back(std::abs(d.values[2]) / ip[0]);
    }
    EXPECT_LT(gap.back(), 0.1);
    EXPECT_LE(loglog_slope(lams, gap), -1.0 / 3);
    EXPECT_LT(miss.back(), 0.02);
    EXPECT_LT(miss.back(), miss.front());
}

TEST(Extraction, AgreesWithInteriorIdentityOfSolutions) {
    // the boundary pairing is the discrete interior identity of the matched solutions
    const auto m = euclidean_metric();
    const double lam = 30;
    const ScalarField p = gaussian(kC, kSigma, kAmp);
    auto s = setup(lam, {}, p);
    const auto fan = chords(1.0, {{kPi + 0.05, 0}});
    const RayData d = extract_ray_data(s.m, s.mesh, s.dq, s.dqp, fan);
    const double ip = gaussian_line(kC, kSigma, kAmp, fan->nodes[0].x, fan->nodes[0].v);
    EXPECT_NEAR(d.values[0] / ip, 1, 0.25);
    EXPECT_GT(d.values[0], 0);
}

// --- geometrical optics -----------------------------------------------------

namespace {

// int Ip(y, theta) dtheta over the inward fan from y = rho1 (cos phi, sin phi)
double go_oracle(double R, double phi, int n = 512) {
    const Vec2 y = R * Vec2(std::cos(phi), std::sin(phi));
    const Vec2 n0 = -y / R;
    double s = 0;
    for (int k = 0; k <= n; ++k) {
        const double th = -kPi / 2 + kPi * k / n;
        const Vec2 w(std::cos(th) * n0[0] - std::sin(th) * n0[1], std::sin(th) * n0[0] + std::cos(th) * n0[1]);
        s += (k == 0 || k == n ? 0.5 : 1.0) * gaussian_line(kC, kSigma, kAmp, y, w);
    }
    return s * kPi / n;
}

} // namespace

TEST(GeometricalOptics, ZeroPotential) {
    auto s = setup(30, {}, {});
    const BoundaryPairing P(s.m, s.mesh, s.dq, s.dqp);
    const auto t = go_mode_extract(P, {0.0, 1.0, 2.5});
    for (double v : t.value) EXPECT_EQ(v, 0.0);
}

TEST(GeometricalOptics, FanProjectionWithDecay) {
    const ScalarField p = gaussian(kC, kSigma, kAmp);
    const std::vector<double> centers{0.0, 2.0, 4.0};
    // finer mesh: at lambda h = 0.6 the FEM phase error overtakes the O(1/lambda) remainder
    std::vector<double> lams{10, 20}, gap;
    double ref = 0;
    for (size_t k = 0; k < centers.size(); ++k) ref = std::max(ref, go_oracle(1.2, centers[k]));
    for (double lam : lams) {
        auto s = setup(lam, {}, p, 0.3);
        const BoundaryPairing P(s.m, s.mesh, s.dq, s.dqp);
        const auto t = go_mode_extract(P, centers);
        double e = 0;
        for (size_t k = 0; k < centers.size(); ++k) e = std::max(e, std::abs(t.value[k] - go_oracle(1.2, centers[k])));
        gap.push_back(e / ref);
    }
    EXPECT_LT(gap.back(), 0.01);
    EXPECT_LE(loglog_slope(lams, gap), -0.5);
}

// --- end to end -------------------------------------------------------------

namespace {

ExperimentConfig small_config() {
    ExperimentConfig c;
    c.q = PotentialSpec::parse("bump(-0.1,0.05,0.6,0.5)");
    c.p = PotentialSpec::parse("bump(0.25,0.1,0.4,0.3)");
    c.lambdas = {20, 30};
    c.fan_s = 16;
    c.fan_theta = 16;
    c.grid_n = 16;
    return c;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), {}};
}

} // namespace

TEST(Recovery, ReportPersistedAndRelabelInvariant) {
    const auto c = small_config();
    const auto R = recover_potential(c);
    ASSERT_EQ(R.stages.size(), 2u);
    for (const auto& s : R.stages) {
        EXPECT_TRUE(std::isfinite(s.rel_l2));
        EXPECT_LT(s.data_rel_error, 1.0);
        EXPECT_LT(s.imag_ratio, 0.1);
        EXPECT_GT(s.cg_iterations, 0);
    }
    ASSERT_TRUE(R.control.has_value());
    EXPECT_TRUE(R.control->at_floor);

    const auto dir = std::filesystem::temp_directory_path() / "geobeam_report_test";
    std::filesystem::remove_all(dir);
    R.write(dir);
    for (const char* f : {"config.json", "summary.json", "timings.json", "lambda_20/ray_extracted.csv",
                          "lambda_30/recovered.csv", "lambda_30/ray_true.csv"})
        EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;

    // (q1, q2) = (q + p, q) describes the same experiment
    ExperimentConfig swapped = c;
    PotentialSpec q1 = c.q;
    q1.bumps.push_back(c.p.bumps[0]);
    swapped.q = PotentialSpec::parse("0");
    swapped.p = PotentialSpec::parse("0");
    swapped.set_pair(q1, c.q);
    const auto R2 = recover_potential(swapped);
    const auto dir2 = dir.string() + "_pair";
    std::filesystem::remove_all(dir2);
    R2.write(dir2);
    EXPECT_EQ(slurp(dir / "summary.json"), slurp(std::filesystem::path(dir2) / "summary.json"));
    EXPECT_EQ(slurp(dir / "lambda_30/recovered.csv"), slurp(std::filesystem::path(dir2) / "lambda_30/recovered.csv"));
    std::filesystem::remove_all(dir);
    std::filesystem::remove_all(dir2);
}

TEST(Recovery, StageAttribution) {
    auto c = small_config();
    c.lambdas = {20};
    c.lambda_h = 0.6;
    c.max_iter = 0; // inversion cannot start
    try {
        recover_potential(c);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("stage 'invert'"), std::string::npos) << e.what();
    }
}
