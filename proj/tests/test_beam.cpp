#include "geobeam/beam.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace geobeam;

namespace {

GeodesicPath start(const Vec2& x, const Vec2& v) {
    GeodesicPath g;
    g.t = {0};
    g.x = {x};
    g.v = {v};
    return g;
}

GeodesicPath diameter(const MetricField& m, double angle = 0) {
    const Vec2 d(std::cos(angle), std::sin(angle));
    return start(-m.rho1() * d, d);
}

// chord of the Poincare disk that avoids the center
GeodesicPath hyperbolic_chord(const MetricField& m) {
    const Vec2 x(-m.rho1() * 0.8, -m.rho1() * 0.6);
    return start(x, m.normalize(x, Vec2(0.8, 0.75)));
}

std::vector<double> grid(double a, double b, size_t n) {
    std::vector<double> t(n);
    for (size_t k = 0; k < n; ++k) t[k] = a + (b - a) * k / (n - 1);
    return t;
}

// round sphere of radius r, stereographic chart
MetricField small_sphere(double r) {
    return general_metric("sphere", [r](const Vec2& x) {
        const double s = 2 * r * r / (r * r + x.squaredNorm());
        return Mat2(s * s * Mat2::Identity());
    });
}

double poincare_distance(const Vec2& x, const Vec2& y) {
    return std::acosh(1 + 2 * (x - y).squaredNorm() / ((1 - x.squaredNorm()) * (1 - y.squaredNorm())));
}

double slope(double x0, double y0, double x1, double y1) { return std::log(y1 / y0) / std::log(x1 / x0); }

} // namespace

// --- Riccati and amplitude ------------------------------------------------

TEST(Riccati, FlatClosedForm) {
    const auto t = grid(0, 3, 3001);
    auto R = riccati_solve<1>([](double) { return RMatN<1>::Zero(); }, CMatN<1>::Constant(cplx(0, 1)), t, 0);
    double err = 0;
    for (size_t k = 0; k < t.size(); ++k)
        err = std::max(err, std::abs(R.H[k](0, 0) - cplx(t[k], 1) / (1 + t[k] * t[k])));
    EXPECT_LT(err, 1e-8);
}

TEST(Riccati, ConstantCurvatureClosedForm) {
    // H' + H^2 = 1: H = (tanh s + i) / (1 + i tanh s)
    const auto t = grid(-1.5, 1.5, 3001);
    auto R = riccati_solve<1>([](double) { return RMatN<1>::Constant(1.0); }, CMatN<1>::Constant(cplx(0, 1)), t, 1500);
    double err = 0;
    for (size_t k = 0; k < t.size(); ++k) {
        const double th = std::tanh(t[k]);
        err = std::max(err, std::abs(R.H[k](0, 0) - (th + cplx(0, 1)) / (1.0 + cplx(0, th))));
    }
    EXPECT_LT(err, 1e-8);
    EXPECT_LT(det_identity_defect(R), 1e-6);
}

TEST(Riccati, MatrixDeterminantIdentity) {
    const auto t = grid(0, 2, 2001);
    auto F = [](double s) {
        RMatN<2> f;
        f << std::sin(s), 0.3, 0.3, -0.5 * s;
        return f;
    };
    CMatN<2> H0;
    H0 << cplx(0.2, 1.0), cplx(0.1, 0.2), cplx(0.1, 0.2), cplx(-0.3, 0.7);
    auto R = riccati_solve<2>(F, H0, t, 1000);
    EXPECT_LT(det_identity_defect(R), 1e-6);
    for (const auto& H : R.H) EXPECT_LT((H - H.transpose()).norm(), 1e-12);
    auto A = amplitude_solve(R);
    EXPECT_EQ(A.n, 3);
    EXPECT_LT(weight_identity_defect(R, A), 1e-8);
}

TEST(Riccati, RejectsBadSeed) {
    const auto t = grid(0, 1, 11);
    auto F = [](double) { return RMatN<1>::Zero(); };
    EXPECT_THROW(riccati_solve<1>(F, CMatN<1>::Constant(cplx(1, 0)), t, 0), ArgumentError);
    EXPECT_THROW(riccati_solve<1>(F, CMatN<1>::Constant(cplx(1, -1)), t, 0), ArgumentError);
}

TEST(Riccati, BlowUpIsReported) {
    // F = -25 focuses a real-axis-heavy seed within the interval
    const auto t = grid(0, 2, 2001);
    EXPECT_THROW(riccati_solve<1>([](double) { return RMatN<1>::Constant(-25.0); },
                                  CMatN<1>::Constant(cplx(0, 1e-3)), t, 0),
                 BlowUpError);
}

TEST(Amplitude, FlatClosedForm) {
    const auto t = grid(0, 2, 2001);
    auto R = riccati_solve<1>([](double) { return RMatN<1>::Zero(); }, CMatN<1>::Constant(cplx(0, 1)), t, 0);
    auto A = amplitude_solve(R);
    const double c2 = std::pow(2 * kPi, -0.25);
    EXPECT_NEAR(A.c2, c2, 1e-14);
    double err = 0;
    for (size_t k = 0; k < t.size(); ++k)
        err = std::max(err, std::abs(A.a00[k] - c2 / std::sqrt(cplx(1, t[k]))));
    EXPECT_LT(err, 1e-9);
    EXPECT_LT(weight_identity_defect(R, A), 1e-8);
}

// --- curvature forcing ----------------------------------------------------

TEST(Forcing, EuclideanAndHyperbolic) {
    const std::vector<Vec2> pts{Vec2(0, 0), Vec2(0.3, -0.2), Vec2(-0.5, 0.1)};
    for (double f : curvature_forcing(euclidean_metric(), pts)) EXPECT_EQ(f, 0.0);
    for (double f : curvature_forcing(hyperbolic_metric(), pts)) EXPECT_NEAR(f, 1.0, 1e-8);
}

TEST(Forcing, ConformalMatchesDifferencedFactor) {
    // K = -e^{-2 phi} Delta phi with phi differenced directly
    const auto m = conformal_metric(gaussian_conformal_factor());
    auto phi = [](const Vec2& x) { return -x.squaredNorm() / 8; };
    const std::vector<Vec2> pts{Vec2(0, 0), Vec2(0.4, 0.3), Vec2(-0.7, 0.2)};
    const auto F = curvature_forcing(m, pts);
    const double h = 1e-3;
    for (size_t k = 0; k < pts.size(); ++k) {
        const Vec2& x = pts[k];
        const double lap = (phi(x + Vec2(h, 0)) + phi(x - Vec2(h, 0)) + phi(x + Vec2(0, h)) + phi(x - Vec2(0, h)) -
                            4 * phi(x)) /
                           (h * h);
        EXPECT_NEAR(F[k], std::exp(-2 * phi(x)) * lap, 1e-5);
    }
}

// --- tracks and charts ----------------------------------------------------

TEST(Charts, SingleChartOnChord) {
    const auto m = euclidean_metric();
    auto charts = fermi_chart_cover(m, diameter(m), 0.3);
    ASSERT_EQ(charts.size(), 1u);
    for (size_t k = 0; k < charts[0].E1.size(); ++k) {
        EXPECT_LT((charts[0].E1[k] - Vec2(1, 0)).norm(), 1e-12);
        EXPECT_LT((charts[0].E2[k] - Vec2(0, 1)).norm(), 1e-12);
    }
    EXPECT_EQ(charts[0].eta(1.0), 1.0);
}

TEST(Charts, ForcedSplitOverlapsAgree) {
    const auto m = hyperbolic_metric();
    auto track = std::make_shared<BeamTrack>(m, hyperbolic_chord(m).x[0], hyperbolic_chord(m).v[0]);
    track->set_fermi_extent(0.2);
    ChartOptions opt;
    opt.split_times = {track->t_mid()};
    opt.y_extent = 0.15;
    auto charts = fermi_chart_cover(track, 0.3, opt);
    ASSERT_EQ(charts.size(), 2u);
    EXPECT_LT(charts[1].t_lo, charts[0].t_hi);
    double eta_err = 0, map_err = 0;
    for (int k = 0; k <= 200; ++k) {
        const double t = track->t_end() * k / 200;
        eta_err = std::max(eta_err, std::abs(std::pow(charts[0].eta(t), 2) + std::pow(charts[1].eta(t), 2) - 1));
    }
    for (double t = charts[1].t_lo; t <= charts[0].t_hi; t += 0.01)
        for (double y : {-0.1, 0.0, 0.1}) {
            const Vec2 x = charts[0].map(t, y);
            map_err = std::max(map_err, (x - charts[1].map(t, y)).norm());
            auto a = charts[0].coords(x), b = charts[1].coords(x);
            ASSERT_TRUE(a && b);
            map_err = std::max({map_err, std::abs(a->first - b->first), std::abs(a->second - b->second)});
        }
    EXPECT_LT(eta_err, 1e-12);
    EXPECT_LT(map_err, 1e-8);
}

TEST(Charts, FermiFrameIsOrthonormalOnAxis) {
    const auto m = hyperbolic_metric();
    BeamTrack tr(m, hyperbolic_chord(m).x[0], hyperbolic_chord(m).v[0]);
    tr.set_fermi_extent(0.1);
    for (double f : {0.2, 0.5, 0.8}) {
        const double t = tr.t_end() * f;
        Vec2 Ft, Fy;
        const Vec2 x = tr.fermi_eval(t, 0, Ft, Fy);
        const Mat2 g = m.g(x);
        EXPECT_NEAR(Ft.dot(g * Ft), 1, 1e-8);
        EXPECT_NEAR(Fy.dot(g * Fy), 1, 1e-8);
        EXPECT_NEAR(Ft.dot(g * Fy), 0, 1e-8);
        // off-axis the table agrees with direct shooting
        EXPECT_LT((tr.fermi_map(t, 0.05) - tr.fermi_exp(t, 0.05)).norm(), 1e-9);
    }
}

TEST(Charts, FocusingMetricIsRejected) {
    // normals to a meridian of a sphere of radius 0.5 focus at g-distance 0.785
    const auto m = small_sphere(0.5);
    ChartOptions opt;
    opt.y_extent = 1.0;
    try {
        fermi_chart_cover(m, diameter(m), 2.0, opt);
        FAIL() << "expected InjectivityError";
    } catch (const InjectivityError& e) {
        EXPECT_NE(std::string(e.what()).find("delta too large"), std::string::npos);
    }
}

// --- quasimode ------------------------------------------------------------

TEST(Quasimode, RejectsDecayOutsideInterval) {
    const auto m = euclidean_metric();
    BeamOptions o;
    o.a = 0.5;
    try {
        Quasimode q(m, diameter(m), 50, o);
        FAIL() << "expected ArgumentError";
    } catch (const ArgumentError& e) {
        EXPECT_NE(std::string(e.what()).find("(1/3, 1/2)"), std::string::npos);
    }
    o.a = 0.3;
    EXPECT_THROW(Quasimode(m, diameter(m), 50, o), ArgumentError);
}

TEST(Quasimode, SupportedInTube) {
    const auto m = euclidean_metric();
    BeamOptions o;
    o.c_delta = 4;
    Quasimode q(m, diameter(m), 100, o);
    const double half = q.delta() / 2;
    ASSERT_LT(half, q.y_limit());
    for (double x : {-0.5, 0.0, 0.7}) {
        EXPECT_EQ(q(Vec2(x, half * 1.001)), cplx(0));
        EXPECT_EQ(q(Vec2(x, -half * 1.05)), cplx(0));
        EXPECT_GT(std::abs(q(Vec2(x, 0))), 0.5);
    }
}

TEST(Quasimode, CrossSectionMassNearOne) {
    const auto m = euclidean_metric();
    Quasimode q(m, diameter(m), 100);
    for (double t : {q.track().t_in(), q.track().t_mid(), q.track().t_out()})
        EXPECT_NEAR(q.cross_section_mass(t), 1.0, 5e-3);
}

TEST(Quasimode, EuclideanCorrectionsVanish) {
    // on a flat chord the leading Gaussian is an exact solution
    const auto m = euclidean_metric();
    Quasimode q(m, diameter(m), 80);
    for (int j = 1; j <= 2; ++j)
        for (double z : {0.0, 1.0, 2.5}) EXPECT_LT(std::abs(q.correction(j, q.track().t_mid(), z)), 1e-8);
}

TEST(Quasimode, EikonalDefectIsHigherOrder) {
    const auto m = hyperbolic_metric();
    Quasimode q(m, hyperbolic_chord(m), 40);
    const double t = q.track().t_mid();
    const double d1 = q.eikonal_defect(t, 0.01), d2 = q.eikonal_defect(t, 0.02);
    EXPECT_LT(q.eikonal_defect(t, 0.0), 1e-8);
    // the Riccati equation cancels the y^2 term
    EXPECT_GT(d2 / d1, 7.0);
    EXPECT_LT(d2, 0.02 * 0.02);
}

TEST(Quasimode, CorrectionsReduceResidual) {
    const auto m = euclidean_metric();
    const Mesh mesh = build_mesh(m, 0.6 / 50);
    std::vector<double> r;
    for (int N : {0, 2}) {
        BeamOptions o;
        o.q_terms = N;
        Quasimode q(m, diameter(m), 50, o);
        r.push_back(pde_residual(m, ScalarField{}, q, mesh).l2);
    }
    EXPECT_GT(r[0], 0.5);
    EXPECT_LT(r[1], 0.02);
}

TEST(Quasimode, ResidualDecaysWithCorrections) {
    const auto m = euclidean_metric();
    std::vector<double> lam{40, 80}, r;
    for (double l : lam) {
        const Mesh mesh = build_mesh(m, 0.6 / l);
        Quasimode q(m, diameter(m), l);
        r.push_back(pde_residual(m, ScalarField{}, q, mesh).l2);
    }
    EXPECT_LT(slope(lam[0], r[0], lam[1], r[1]), -1.5);
}

TEST(Quasimode, ResidualRejectsCoarseMesh) {
    const auto m = euclidean_metric();
    Quasimode q(m, diameter(m), 100);
    EXPECT_THROW(pde_residual(m, ScalarField{}, q, build_mesh(m, 0.05)), ResolutionError);
}

TEST(Quasimode, MeshExportAndHash) {
    const auto m = euclidean_metric();
    const Mesh mesh = build_mesh(m, 0.6 / 30);
    auto mq = assemble_quasimode(m, diameter(m), 30, 0.4, 1, mesh);
    ASSERT_EQ(mq.values.size(), static_cast<Eigen::Index>(mesh.n_vertices()));
    std::ostringstream os;
    mq.write_csv(os);
    std::istringstream is(os.str());
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "vertex,re,im");
    size_t rows = 0;
    while (std::getline(is, line)) ++rows;
    EXPECT_EQ(rows, mesh.n_vertices());
    const auto h = mq.header();
    EXPECT_EQ(h["mesh_hash"], mesh.hash);
    EXPECT_EQ(h["q_terms"], 1);
    EXPECT_DOUBLE_EQ(h["lambda"].get<double>(), 30.0);
    const Mesh other = build_mesh(m, 0.6 / 31);
    EXPECT_THROW(pde_residual(m, ScalarField{}, mq, other), ArgumentError);
    EXPECT_LT(pde_residual(m, ScalarField{}, mq, mesh).l2, 0.2);
}

// --- concentration and cross terms ---------------------------------------

TEST(Concentration, ConstantAndOddWeights) {
    const auto m = euclidean_metric();
    const Mesh mesh = build_mesh(m, 0.6 / 100);
    Quasimode q(m, diameter(m), 100);
    auto one = concentration_test(m, q, [](const Vec2&) { return 1.0; }, mesh);
    EXPECT_NEAR(one.line, 2.0, 1e-12);
    EXPECT_NEAR(one.integral, 2.0, 0.02);
    auto odd = concentration_test(m, q, [](const Vec2& x) { return x[0]; }, mesh);
    EXPECT_NEAR(odd.line, 0.0, 1e-12);
    EXPECT_NEAR(odd.integral, 0.0, 1e-3);
    auto away = concentration_test(m, q, [](const Vec2& x) { return std::abs(x[1]) > 0.4 ? 1.0 : 0.0; }, mesh);
    EXPECT_EQ(away.line, 0.0);
    EXPECT_LT(std::abs(away.integral), 1e-5);
}

TEST(Concentration, GapShrinksWithLambda) {
    const auto m = hyperbolic_metric();
    std::vector<double> lam{20, 40}, gap;
    auto phi = [](const Vec2& x) { return 1 + x[0]; };
    for (double l : lam) {
        Quasimode q(m, hyperbolic_chord(m), l);
        gap.push_back(std::abs(concentration_test(m, q, phi, build_mesh(m, 0.6 * m.rho() / l / 2)).gap));
    }
    EXPECT_LT(gap[1], 0.7 * gap[0]);
}

TEST(CrossTerm, PerpendicularDiametersDecay) {
    const auto m = euclidean_metric();
    auto phi = [](const Vec2& x) { return std::exp(-x.squaredNorm()); };
    std::vector<double> lam{50, 100}, val;
    for (double l : lam) {
        const Mesh mesh = build_mesh(m, 0.6 / l);
        Quasimode a(m, diameter(m, 0), l), b(m, diameter(m, kPi / 2), l);
        auto r = cross_term_test(m, a, b, phi, mesh);
        EXPECT_NEAR(r.angle_deg, 90, 1e-6);
        EXPECT_FALSE(r.warned);
        val.push_back(std::abs(r.value));
    }
    EXPECT_LE(slope(lam[0], val[0], lam[1], val[1]), -1.0 / 3);
}

TEST(CrossTerm, RefusesSameGeodesic) {
    const auto m = euclidean_metric();
    const Mesh mesh = build_mesh(m, 0.6 / 40);
    Quasimode a(m, diameter(m), 40), b(m, start(Vec2(m.rho1(), 0), Vec2(-1, 0)), 40);
    try {
        cross_term_test(m, a, a, [](const Vec2&) { return 1.0; }, mesh);
        FAIL() << "expected ArgumentError";
    } catch (const ArgumentError& e) {
        EXPECT_NE(std::string(e.what()).find("not a cross term"), std::string::npos);
    }
    EXPECT_THROW(cross_term_test(m, a, b, [](const Vec2&) { return 1.0; }, mesh), ArgumentError);
}

TEST(CrossTerm, DisjointTubesAndShallowAngle) {
    const auto m = euclidean_metric();
    const Mesh mesh = build_mesh(m, 0.6 / 60);
    BeamOptions o;
    o.c_delta = 4;
    Quasimode a(m, start(Vec2(-m.rho1() * 0.9, -0.5), Vec2(1, 0)), 60, o);
    Quasimode b(m, start(Vec2(-m.rho1() * 0.9, 0.5), Vec2(1, 0)), 60, o);
    auto r = cross_term_test(m, a, b, [](const Vec2&) { return 1.0; }, mesh);
    EXPECT_EQ(r.value, cplx(0));
    EXPECT_TRUE(std::isnan(r.angle_deg));

    const double ang = 5 * kPi / 180;
    Quasimode c(m, diameter(m, ang), 60, o);
    std::ostringstream log;
    auto s = cross_term_test(m, Quasimode(m, diameter(m), 60, o), c, [](const Vec2&) { return 1.0; }, mesh, &log);
    EXPECT_NEAR(s.angle_deg, 5, 1e-3);
    EXPECT_TRUE(s.warned);
    EXPECT_NE(log.str().find("warning"), std::string::npos);
}

TEST(Sweep, JsonRows) {
    std::vector<BeamSweepRow> rows(2);
    rows[0].lambda = 50;
    rows[1].lambda = 100;
    rows[1].cross = 1e-3;
    const auto j = sweep_json(rows);
    ASSERT_EQ(j.size(), 2u);
    EXPECT_FALSE(j[0].contains("cross"));
    EXPECT_DOUBLE_EQ(j[1]["cross"].get<double>(), 1e-3);
}

// --- geometrical optics ---------------------------------------------------

TEST(GeometricalOptics, EuclideanClosedForm) {
    const auto m = euclidean_metric();
    auto b = [](double th) { return std::cos(th); };
    auto u = build_go_solution(m, 0.0, b, 30.0);
    const Vec2 y(m.rho1(), 0);
    for (const Vec2& x : {Vec2(0, 0), Vec2(0.3, 0.4), Vec2(-0.5, -0.2)}) {
        const Vec2 d = x - y;
        const double r = d.norm(), th = std::atan2(-d[1], -d[0]); // CCW from the inward normal (-1, 0)
        EXPECT_LT(std::abs(u(x) - std::exp(cplx(0, 30 * r)) * std::cos(th) / std::sqrt(r)), 1e-10);
        EXPECT_LT(std::abs(eikonal_residual(u, x)), 1e-6);
        EXPECT_LT(std::abs(transport_residual(u, x)), 1e-4);
    }
    auto v = build_go_solution(m, 0.0, b, 30.0, -1);
    EXPECT_LT(std::abs(v(Vec2(0, 0)) - std::conj(u(Vec2(0, 0)))), 1e-12);
}

TEST(GeometricalOptics, HyperbolicDistanceAndJacobiField) {
    const auto m = hyperbolic_metric();
    auto u = build_go_solution(m, 0.7, [](double th) { return 1 + 0.5 * std::sin(th); }, 20.0);
    for (const Vec2& x : {Vec2(0, 0), Vec2(0.2, -0.3), Vec2(-0.4, 0.1)}) {
        const auto p = u.polar(x);
        const double r = poincare_distance(x, u.center());
        EXPECT_NEAR(p.r, r, 1e-9);
        EXPECT_NEAR(p.J, std::sinh(r), 1e-7);
        EXPECT_LT(std::abs(eikonal_residual(u, x)), 1e-6);
        EXPECT_LT(std::abs(transport_residual(u, x)), 1e-4);
    }
}

TEST(GeometricalOptics, ConformalTransport) {
    const auto m = conformal_metric(gaussian_conformal_factor());
    auto u = build_go_solution(m, 2.0, [](double th) { return std::cos(th); }, 20.0);
    for (const Vec2& x : {Vec2(0, 0), Vec2(0.2, 0.5)}) {
        EXPECT_LT(std::abs(eikonal_residual(u, x)), 1e-6);
        EXPECT_LT(std::abs(transport_residual(u, x)), 1e-4);
    }
}

TEST(GeometricalOptics, CenterMustBeOnBoundary) {
    const auto m = euclidean_metric();
    EXPECT_THROW(build_go_solution(m, Vec2(0.5, 0), [](double) { return 1.0; }, 10), ArgumentError);
    EXPECT_THROW(build_go_solution(m, 0.0, [](double) { return 1.0; }, 10, 0), ArgumentError);
}

TEST(GeometricalOptics, NonSimpleMetricIsReported) {
    // conjugate point of y on a small sphere
    const double r = 0.5;
    const auto m = small_sphere(r);
    auto u = build_go_solution(m, 0.0, [](double) { return 1.0; }, 10);
    const Vec2 anti = -r * r / m.rho1() * Vec2(1, 0);
    EXPECT_THROW(u.polar(anti), NonSimpleError);
}
