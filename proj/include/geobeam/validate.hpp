#ifndef GEOBEAM_VALIDATE_HPP
#define GEOBEAM_VALIDATE_HPP

#include "geobeam/beam.hpp"
#include "geobeam/helmholtz.hpp"
#include "geobeam/ray.hpp"

#include <chrono>
#include <random>

namespace geobeam {

// Fast invariant suite shared by the `validate` subcommand and the acceptance
// runner.

struct CheckResult {
    std::string name;
    bool ok = false;
    double value = 0; // measured defect
    double limit = 0; // pass threshold on value
    double seconds = 0;
    std::string detail;

    nlohmann::json to_json() const {
        return {{"name", name}, {"ok", ok}, {"value", value}, {"limit", limit}, {"seconds", seconds}, {"detail", detail}};
    }
};

struct ValidateOptions {
    uint64_t seed = 7;
    bool inject_mu_sign = false; // fault injection: flip mu on the influx grid
};

namespace detail {

template <class Fn>
CheckResult timed(const std::string& name, Fn&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    CheckResult r;
    try {
        r = fn();
    } catch (const std::exception& e) {
        r.ok = false;
        r.detail = std::string("exception: ") + e.what();
    }
    r.name = name;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

inline std::string fmt(double v) {
    std::ostringstream os;
    os << std::setprecision(6) << v;
    return os.str();
}

// smooth random influx data with low modes in (phi, theta)
inline RayData random_influx_data(std::shared_ptr<const InfluxGrid> G, std::mt19937_64& rng) {
    std::normal_distribution<double> N(0, 1);
    const double a0 = N(rng), a1 = N(rng), a2 = N(rng), b1 = N(rng), b2 = N(rng);
    RayData h{G, "", Eigen::VectorXd(G->size())};
    for (size_t k = 0; k < G->size(); ++k) {
        const auto& nd = G->nodes[k];
        h.values[k] = a0 + a1 * std::cos(nd.phi) + a2 * std::sin(nd.phi) + b1 * std::sin(nd.theta) +
                      b2 * std::cos(nd.theta) * std::cos(nd.phi);
    }
    return h;
}

// bump of radius 0.5 at a random center, modulated by a random affine factor
inline GridFunction random_bump_field(const MetricField& m, int n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> U(-0.4, 0.4);
    std::normal_distribution<double> N(0, 1);
    const Vec2 c(U(rng), U(rng));
    const double a = N(rng), b = N(rng);
    return GridFunction::sample(m, n, [&](const Vec2& x) {
        const double r2 = (x - c).squaredNorm() / 0.25;
        return r2 < 1 ? (1 + a * x[0] + b * x[1]) * std::exp(1 - 1 / (1 - r2)) : 0.0;
    });
}

} // namespace detail

// F = 1 on the Euclidean unit disk: both sides of the Santalo identity equal
// 2 pi^2.
inline CheckResult check_santalo(int n = 64, double tol = 5e-3, bool flip_mu = false) {
    return detail::timed("santalo", [&] {
        const auto m = euclidean_metric();
        InfluxGrid G = sample_influx(m, n, n);
        if (flip_mu)
            for (auto& nd : G.nodes) nd.mu = -nd.mu;
        const auto s = santalo_check(m, [](const Vec2&, const Vec2&) { return 1.0; }, G);
        const double ref = 2 * kPi * kPi;
        CheckResult r;
        r.value = std::max(std::abs(s.lhs - ref), std::abs(s.rhs - ref)) / ref;
        r.limit = tol;
        r.ok = r.value <= tol;
        r.detail = "lhs " + detail::fmt(s.lhs) + ", rhs " + detail::fmt(s.rhs) + ", 2 pi^2 " + detail::fmt(ref);
        return r;
    });
}

// <I f, h>_mu = <f, I* h>_g for randomized smooth pairs (pixel-driven adjoint).
inline CheckResult check_adjoint(const MetricField& m, uint64_t seed, int pairs = 10, int n = 64,
                                 double tol = 1e-3) {
    return detail::timed("adjoint", [&] {
        RayTransform T(m, grid_for(m, n), std::make_shared<const InfluxGrid>(sample_influx(m, n, n)));
        std::mt19937_64 rng(seed);
        double worst = 0;
        for (int k = 0; k < pairs; ++k) {
            const GridFunction f = detail::random_bump_field(m, n, rng);
            const RayData h = detail::random_influx_data(T.fan_ptr(), rng);
            const double lhs = ray_inner(T.forward(f), h), rhs = grid_inner(m, f, T.adjoint(h));
            worst = std::max(worst, std::abs(lhs - rhs) / std::abs(lhs));
        }
        CheckResult r;
        r.value = worst;
        r.limit = tol;
        r.ok = worst < tol;
        r.detail = m.id() + ", " + std::to_string(pairs) + " pairs, seed " + std::to_string(seed);
        return r;
    });
}

// Flat Riccati closed form H = (t + i) / (1 + t^2) on [0, 3].
inline CheckResult check_riccati_closed_form(double tol = 1e-8) {
    return detail::timed("riccati_closed_form", [&] {
        std::vector<double> t(3001);
        for (size_t k = 0; k < t.size(); ++k) t[k] = 3.0 * k / (t.size() - 1);
        const auto R = riccati_solve<1>([](double) { return RMatN<1>::Zero(); }, CMatN<1>::Constant(cplx(0, 1)), t, 0);
        double err = 0;
        for (size_t k = 0; k < t.size(); ++k)
            err = std::max(err, std::abs(R.H[k](0, 0) - cplx(t[k], 1) / (1 + t[k] * t[k])));
        CheckResult r;
        r.value = err;
        r.limit = tol;
        r.ok = err <= tol;
        r.detail = "sup over [0, 3]";
        return r;
    });
}

namespace detail {

// Riccati solution carried by a quasimode on a chord of each shipped metric
inline std::vector<std::pair<std::string, Quasimode>> identity_tracks() {
    std::vector<std::pair<std::string, Quasimode>> out;
    const auto e = euclidean_metric();
    GeodesicPath g;
    g.t = {0};
    g.x = {Vec2(-e.rho1(), 0)};
    g.v = {Vec2(1, 0)};
    out.emplace_back("euclidean", Quasimode(e, g, 50));
    const auto h = hyperbolic_metric();
    g.x = {Vec2(-0.8 * h.rho1(), -0.6 * h.rho1())};
    g.v = {h.normalize(g.x[0], Vec2(0.8, 0.75))};
    out.emplace_back("hyperbolic", Quasimode(h, g, 50));
    return out;
}

} // namespace detail

// det Im H(t) = det Im H(t0) exp(-2 int tr Re H) along beams.
inline CheckResult check_det_identity(double tol = 1e-6) {
    return detail::timed("riccati_det_identity", [&] {
        CheckResult r;
        r.limit = tol;
        for (const auto& [id, q] : detail::identity_tracks()) {
            const double d = det_identity_defect(q.riccati());
            r.value = std::max(r.value, d);
            r.detail += (r.detail.empty() ? "" : ", ") + id + " " + detail::fmt(d);
        }
        r.ok = r.value <= tol;
        return r;
    });
}

// |a00|^2 |det Im H|^{-1/2} constant along beams.
inline CheckResult check_weight_identity(double tol = 1e-8) {
    return detail::timed("weight_identity", [&] {
        CheckResult r;
        r.limit = tol;
        for (const auto& [id, q] : detail::identity_tracks()) {
            const double d = weight_identity_defect(q.riccati(), q.amplitude());
            r.value = std::max(r.value, d);
            r.detail += (r.detail.empty() ? "" : ", ") + id + " " + detail::fmt(d);
        }
        r.ok = r.value <= tol;
        return r;
    });
}

// Euclidean lambda = 0 disk: Rayleigh quotient of cos(k phi) against |k|.
inline CheckResult check_dn_symbol(double h = 0.02, double tol = 0.02) {
    return detail::timed("dn_symbol", [&] {
        const auto m = euclidean_metric();
        const Mesh mesh = build_mesh(m, h);
        const DNMatrix d = dn_map(m, mesh, nullptr, 0.0, "zero");
        CheckResult r;
        r.limit = tol;
        for (int k = 1; k <= 3; ++k) {
            Eigen::VectorXd f(mesh.boundary.size());
            for (size_t j = 0; j < mesh.boundary.size(); ++j) {
                const Vec2 x = mesh.vertices[mesh.boundary[j]];
                f[j] = std::cos(k * std::atan2(x[1], x[0]));
            }
            const double rq = f.dot(d.flux * f) / f.dot(d.bmass * f);
            r.value = std::max(r.value, std::abs(rq - k) / k);
            r.detail += (k > 1 ? ", " : "") + ("k=" + std::to_string(k) + " " + detail::fmt(rq));
        }
        r.ok = r.value <= tol;
        return r;
    });
}

// Symmetry of Lambda = Mb^{-1} S in the boundary L2 pairing, against 5 h_mesh.
inline CheckResult check_dn_symmetry() {
    return detail::timed("dn_symmetry", [&] {
        const auto m = metric_by_id("conformal", 1.0);
        const Mesh mesh = build_mesh(m, 0.05);
        const ScalarField q = [](const Vec2& x) { return 3.0 * std::exp(-4 * x.squaredNorm()); };
        const DNMatrix d = dn_map(m, mesh, q, 6.0, "bump");
        CheckResult r;
        r.value = d.symmetry_defect();
        r.limit = 5 * mesh.h_mesh;
        r.ok = r.value <= r.limit;
        r.detail = "conformal metric, lambda 6, h " + detail::fmt(mesh.h_mesh);
        return r;
    });
}

// Lambda_q^lambda and Lambda_{q - lambda^2}^0 agree bit for bit.
inline CheckResult check_frequency_shift() {
    return detail::timed("dn_frequency_shift", [&] {
        const auto m = metric_by_id("conformal", 1.0);
        const Mesh mesh = build_mesh(m, 0.05);
        const double lam = 5.5;
        const ScalarField q = [](const Vec2& x) { return 2.0 * x[0] * x[1] + 1.0; };
        const ScalarField qs = [&](const Vec2& x) { return q(x) - lam * lam; };
        const DNMatrix a = dn_map(m, mesh, q, lam), b = dn_map(m, mesh, qs, 0.0);
        CheckResult r;
        r.value = (a.flux - b.flux).cwiseAbs().maxCoeff();
        r.limit = 0;
        r.ok = r.value == 0.0;
        r.detail = "max |difference| of flux matrices";
        return r;
    });
}

inline std::vector<CheckResult> run_validation(const ValidateOptions& opt = {}) {
    return {check_santalo(64, 5e-3, opt.inject_mu_sign),
            check_adjoint(euclidean_metric(), opt.seed),
            check_riccati_closed_form(),
            check_det_identity(),
            check_weight_identity(),
            check_dn_symbol(),
            check_dn_symmetry(),
            check_frequency_shift()};
}

} // namespace geobeam

#endif // GEOBEAM_VALIDATE_HPP
