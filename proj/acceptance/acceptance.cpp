// Acceptance runner: one PASS/FAIL line per criterion, tolerances pinned here.
//
//   geobeam_acceptance [--cli PATH] [--demo PATH] [criterion ...]

#include "readers.hpp"
#include "geobeam/validate.hpp"

#include <cstdio>
#include <iostream>
#include <set>
#include <sys/wait.h>

using namespace geobeam;

namespace {

struct Line {
    int id;
    std::string name;
    bool ok;
    std::string text;
};

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string f(double v, int prec = 4) {
    std::ostringstream os;
    os << std::setprecision(prec) << v;
    return os.str();
}

std::string series(const std::vector<double>& v) {
    std::string s;
    for (double x : v) s += (s.empty() ? "" : " ") + f(x, 3);
    return "[" + s + "]";
}

Line c1() {
    const auto r = check_santalo(64, 5e-3);
    return {1, "santalo", r.ok && r.seconds <= 30,
            "rel err " + f(r.value) + " <= 5e-3, " + f(r.seconds, 3) + " s <= 30 s (" + r.detail + ")"};
}

Line c2() {
    const auto r = check_adjoint(euclidean_metric(), 7, 10, 64, 1e-3);
    return {2, "adjoint", r.ok && r.seconds <= 60,
            "worst rel err " + f(r.value) + " < 1e-3 over 10 pairs, " + f(r.seconds, 3) + " s <= 60 s"};
}

Line c3() {
    const auto m = euclidean_metric();
    const int n = 64;
    RayTransform T(m, grid_for(m, n), std::make_shared<const InfluxGrid>(sample_influx(m, n, n)));
    const ScalarField g = [](const Vec2& x) { return std::exp(-(x - Vec2(0.1, -0.05)).squaredNorm() / 0.08); };
    const GridFunction truth = GridFunction::sample(m, n, g);
    InversionOptions io;
    io.tol = 1e-5;
    io.max_iter = 500;
    const auto r = invert_ray(m, T, T.forward_exact(g), io);
    const GridFunction e = truth.like(r.f.values - truth.values);
    const double rel = std::sqrt(grid_inner(m, e, e) / grid_inner(m, truth, truth));
    const bool conv = r.rel_residual <= io.tol && r.iterations <= 500;
    return {3, "ray_inversion", rel <= 0.05 && conv,
            "rel L2 err " + f(rel) + " <= 0.05, CG reached rel residual " + f(r.rel_residual, 3) + " <= 1e-5 in " +
                std::to_string(r.iterations) + " <= 500 iterations"};
}

Line c4() {
    const auto a = check_riccati_closed_form(1e-8);
    const auto b = check_det_identity(1e-6);
    return {4, "riccati", a.ok && b.ok,
            "closed form sup err " + f(a.value, 3) + " <= 1e-8; det Im H identity " + f(b.value, 3) +
                " <= 1e-6 (" + b.detail + ")"};
}

Line c5() {
    const auto r = check_weight_identity(1e-8);
    return {5, "weight_identity", r.ok, "max rel drift " + f(r.value, 3) + " <= 1e-8 (" + r.detail + ")"};
}

// Diameter sweep shared by the concentration, residual and cross-term lines.
struct Sweep {
    std::vector<BeamSweepRow> rows;
    double seconds = 0;
};

const Sweep& diameter_sweep() {
    static const Sweep s = [] {
        const auto m = euclidean_metric();
        GeodesicPath g;
        g.t = {0};
        g.x = {Vec2(-m.rho1(), 0)};
        g.v = {Vec2(1, 0)};
        BeamSweepOptions o; // a = 0.4, c_delta = 16, N = 2, lambda h <= 0.6
        o.beam.a = 0.4;
        o.beam.q_terms = 2;
        o.cross = true;
        o.cross_angle = kPi / 2;
        Sweep r;
        const auto t0 = Clock::now();
        r.rows = beam_sweep(m, g, {50, 100, 200, 400}, o);
        r.seconds = since(t0);
        return r;
    }();
    return s;
}

std::vector<double> col(const std::vector<BeamSweepRow>& rows, double BeamSweepRow::*p, bool absval = false) {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(absval ? std::abs(r.*p) : r.*p);
    return v;
}

Line c6() {
    const auto& s = diameter_sweep();
    const auto L = col(s.rows, &BeamSweepRow::lambda);
    // gap = int |v|^2 - I1(gamma), and I1 of a diameter is 2
    const auto dev = col(s.rows, &BeamSweepRow::gap, true);
    const double slope = loglog_slope(L, dev);
    return {6, "concentration", slope <= -1.0 / 3 && s.seconds <= 600,
            "|int |v|^2 - 2| " + series(dev) + ", slope " + f(slope) + " <= -1/3, sweep " + f(s.seconds, 3) +
                " s <= 600 s"};
}

Line c7() {
    const auto& s = diameter_sweep();
    const auto res = col(s.rows, &BeamSweepRow::residual);
    bool strict = true;
    for (size_t k = 1; k < res.size(); ++k) strict = strict && res[k] < res[k - 1];
    return {7, "residual", strict,
            "||L v|| " + series(res) + " strictly decreasing (delta = 16 lambda^-0.4, N = 2)"};
}

Line c8() {
    const auto m = euclidean_metric();
    const ProbeSource src = [](const Vec2& x, double l) {
        const double r2 = (x - Vec2(0.1, 0.05)).squaredNorm() / 0.09;
        return (r2 < 1 ? std::exp(-1 / (1 - r2)) : 0.0) * std::exp(cplx(0, l * x[0]));
    };
    std::vector<double> ratio;
    for (double lam = 20; lam <= 200; lam += 20) {
        const Mesh mesh = build_mesh(m, std::min(0.01, 0.59 / lam), m.rho1());
        const auto rows = resolvent_probe(m, mesh, nullptr, {lam}, src, ProbeBoundary::extension);
        ratio.push_back(rows.at(0).ratio);
    }
    const double q = *std::max_element(ratio.begin(), ratio.end()) / *std::min_element(ratio.begin(), ratio.end());
    return {8, "resolvent", q < 3, "lambda ||u|| / ||f|| over lambda 20..200 " + series(ratio) + ", max/min " + f(q) + " < 3"};
}

Line c9() {
    const auto a = check_dn_symbol(0.02, 0.02);
    const auto b = check_dn_symmetry();
    const auto c = check_frequency_shift();
    return {9, "dn_map", a.ok && b.ok && c.ok,
            "symbol rel err " + f(a.value, 3) + " <= 0.02 (" + a.detail + "); symmetry " + f(b.value, 3) +
                " <= 5 h = " + f(b.limit, 3) + "; frequency shift max diff " + f(c.value, 3) + " == 0"};
}

Line c10(const std::string& demo) {
    auto fc = cli::FlatConfig::load(demo);
    const ExperimentConfig cfg = cli::read_experiment(fc);
    const RecoveryReport R = recover_potential(cfg, &std::cerr);
    std::vector<double> err;
    for (const auto& s : R.stages) err.push_back(s.rel_l2);
    const bool ctrl = R.control && R.control->at_floor;
    const bool ok = R.errors_non_increasing && err.back() <= 0.20 && R.data_slope <= -1.0 / 3 && ctrl;
    std::string t = "rel L2 err " + series(err) + " non-increasing " + (R.errors_non_increasing ? "yes" : "no") +
                    ", final " + f(err.back(), 3) + " <= 0.20, data slope " + f(R.data_slope) + " <= -1/3, control ";
    t += R.control ? "|p_hat| " + f(R.control->p_hat_norm, 3) + " vs floor " + f(R.control->p_hat_floor, 3) : "missing";
    return {10, "end_to_end", ok, t};
}

Line c11() {
    const auto& s = diameter_sweep();
    const auto L = col(s.rows, &BeamSweepRow::lambda);
    const auto cr = col(s.rows, &BeamSweepRow::cross, true);
    const double slope = loglog_slope(L, cr);
    return {11, "cross_term", slope <= -1.0 / 3,
            "perpendicular diameters |<phi v1, v2>| " + series(cr) + ", slope " + f(slope) + " <= -1/3"};
}

Line c12(const std::string& cli) {
    const auto t0 = Clock::now();
    bool ok;
    std::string how;
    if (!cli.empty()) {
        const int st = std::system((cli + " validate > /dev/null").c_str());
        ok = st != -1 && WIFEXITED(st) && WEXITSTATUS(st) == 0;
        how = "exit " + std::to_string(WIFEXITED(st) ? WEXITSTATUS(st) : -1);
    } else {
        ok = true;
        for (const auto& r : run_validation()) ok = ok && r.ok;
        how = "in-process";
    }
    const double t = since(t0);
    return {12, "validate", ok && t <= 120, std::string(ok ? "green" : "red") + " (" + how + "), " + f(t, 3) + " s <= 120 s"};
}

} // namespace

int main(int argc, char** argv) {
    std::string cli, demo = GEOBEAM_DEMO_CONFIG;
    std::set<int> only;
    for (int k = 1; k < argc; ++k) {
        const std::string a = argv[k];
        if (a == "--cli" && k + 1 < argc)
            cli = argv[++k];
        else if (a == "--demo" && k + 1 < argc)
            demo = argv[++k];
        else
            only.insert(std::stoi(a));
    }
    const std::vector<std::pair<int, std::function<Line()>>> all = {
        {1, c1}, {2, c2}, {3, c3}, {4, c4}, {5, c5}, {6, c6}, {7, c7}, {8, c8}, {9, c9},
        {10, [&] { return c10(demo); }}, {11, c11}, {12, [&] { return c12(cli); }}};
    int failed = 0;
    for (const auto& [id, fn] : all) {
        if (!only.empty() && !only.count(id)) continue;
        const auto t0 = Clock::now();
        Line l;
        try {
            l = fn();
        } catch (const std::exception& e) {
            l = {id, "criterion", false, std::string("exception: ") + e.what()};
        }
        failed += !l.ok;
        std::cout << (l.ok ? "PASS" : "FAIL") << " " << std::setw(2) << id << " " << std::left << std::setw(16)
                  << l.name << std::right << l.text << " [" << f(since(t0), 3) << " s]" << std::endl;
    }
    std::cout << (failed ? std::to_string(failed) + " criteria failed" : "all criteria passed") << std::endl;
    return failed ? 1 : 0;
}
