#ifndef GEOBEAM_METRIC_HPP
#define GEOBEAM_METRIC_HPP

#include "geobeam/common.hpp"

#include <memory>

namespace geobeam {

// Christoffel symbols Gamma^i_{jk}, stored as G[i](j,k).
using Christoffel = std::array<Mat2, 2>;

// First partials of g: D[k] = d g / d x^k.
using MetricDerivs = std::array<Mat2, 2>;

// Smooth SPD metric on a disk chart of radius rho. The extended manifold M1 is
// the concentric disk of radius rho * (1 + eps_ext). Queries are accepted on a
// small guard band beyond M1 so integrator stages can straddle its boundary.
class MetricField {
public:
    struct Closures {
        std::function<Mat2(const Vec2&)> g;
        std::function<MetricDerivs(const Vec2&)> dg;  // optional
        std::function<double(const Vec2&)> curvature; // optional
        std::function<double(const Vec2&)> conformal; // optional: g = e^{2 phi} I, returns phi
    };

    MetricField(std::string id, double rho, Closures c, double eps_ext = 0.2, bool flat = false)
        : id_(std::move(id)), rho_(rho), eps_(eps_ext), flat_(flat), c_(std::move(c)) {
        if (!(rho_ > 0)) throw ArgumentError("MetricField: rho must be positive");
        if (!(eps_ > 0)) throw ArgumentError("MetricField: eps_ext must be positive");
        if (!c_.g) throw ArgumentError("MetricField: metric closure missing");
    }

    const std::string& id() const { return id_; }
    double rho() const { return rho_; }
    double rho1() const { return rho_ * (1 + eps_); }
    double eps_ext() const { return eps_; }
    bool is_flat() const { return flat_; }
    bool has_analytic_derivatives() const { return static_cast<bool>(c_.dg); }
    double domain_radius() const { return rho1() * kGuard; }
    bool in_domain(const Vec2& x) const { return x.norm() <= domain_radius(); }

    Mat2 g(const Vec2& x) const {
        check(x);
        return c_.g(x);
    }
    Mat2 ginv(const Vec2& x) const { return g(x).inverse(); }
    double detg(const Vec2& x) const { return g(x).determinant(); }
    double sqrt_detg(const Vec2& x) const { return std::sqrt(detg(x)); }

    MetricDerivs dg(const Vec2& x) const {
        check(x);
        if (c_.dg) return c_.dg(x);
        return fd_dg(x);
    }

    // 4th-order central differences of g with step 1e-4 rho.
    MetricDerivs fd_dg(const Vec2& x) const {
        const double h = 1e-4 * rho_;
        MetricDerivs d;
        for (int k = 0; k < 2; ++k) {
            Vec2 e = Vec2::Zero();
            e[k] = h;
            d[k] = (-c_.g(x + 2 * e) + 8 * c_.g(x + e) - 8 * c_.g(x - e) + c_.g(x - 2 * e)) / (12 * h);
        }
        return d;
    }

    Christoffel christoffel(const Vec2& x) const {
        const Mat2 gi = ginv(x);
        const MetricDerivs d = dg(x);
        Christoffel G;
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j)
                for (int k = 0; k < 2; ++k) {
                    double s = 0;
                    for (int l = 0; l < 2; ++l) s += gi(i, l) * (d[j](l, k) + d[k](l, j) - d[l](j, k));
                    G[i](j, k) = 0.5 * s;
                }
        return G;
    }

    // Gaussian curvature; analytic when available, otherwise from the Riemann
    // tensor with centred differences of the Christoffel symbols.
    double curvature(const Vec2& x) const {
        check(x);
        if (c_.curvature) return c_.curvature(x);
        return riemann_curvature(x);
    }

    double riemann_curvature(const Vec2& x) const {
        const double h = 1e-3 * rho_;
        std::array<Christoffel, 2> dG;
        for (int k = 0; k < 2; ++k) {
            Vec2 e = Vec2::Zero();
            e[k] = h;
            const Christoffel a = christoffel(x + e), b = christoffel(x - e);
            const Christoffel a2 = christoffel(x + 2 * e), b2 = christoffel(x - 2 * e);
            for (int i = 0; i < 2; ++i) dG[k][i] = (-a2[i] + 8 * a[i] - 8 * b[i] + b2[i]) / (12 * h);
        }
        const Christoffel G = christoffel(x);
        // R^i_{jkl} = d_k G^i_{lj} - d_l G^i_{kj} + G^i_{km} G^m_{lj} - G^i_{lm} G^m_{kj}
        auto R = [&](int i, int j, int k, int l) {
            double r = dG[k][i](l, j) - dG[l][i](k, j);
            for (int m = 0; m < 2; ++m) r += G[i](k, m) * G[m](l, j) - G[i](l, m) * G[m](k, j);
            return r;
        };
        const Mat2 gx = g(x);
        const double R1212 = gx(0, 0) * R(0, 1, 0, 1) + gx(0, 1) * R(1, 1, 0, 1);
        return R1212 / gx.determinant();
    }

    double inner(const Vec2& x, const Vec2& u, const Vec2& v) const { return u.dot(g(x) * v); }
    double norm(const Vec2& x, const Vec2& v) const { return std::sqrt(inner(x, v, v)); }
    Vec2 normalize(const Vec2& x, const Vec2& v) const { return v / norm(x, v); }

    // g-orthonormal frame at x: e1 along chart direction `dir`, e2 its positive
    // rotation.
    std::pair<Vec2, Vec2> frame(const Vec2& x, const Vec2& dir) const {
        const Mat2 gx = g(x);
        const Vec2 e1 = dir / std::sqrt(dir.dot(gx * dir));
        Vec2 w(-e1[1], e1[0]);
        w -= e1 * e1.dot(gx * w);
        return {e1, w / std::sqrt(w.dot(gx * w))};
    }

    // Outward g-unit normal to the circle |x| = |x0|.
    Vec2 outward_normal(const Vec2& x) const {
        const Mat2 gi = ginv(x);
        const Vec2 dr = x / x.norm();
        const Vec2 nu = gi * dr;
        return nu / std::sqrt(dr.dot(gi * dr));
    }

    // Hash identifying the metric; samples g on a fixed stencil.
    std::string fingerprint() const {
        Hasher h;
        h.add(id_);
        h.add(rho_);
        h.add(eps_);
        for (int i = -3; i <= 3; ++i)
            for (int j = -3; j <= 3; ++j) {
                const Vec2 x(i * rho_ / 4, j * rho_ / 4);
                if (x.norm() > rho1()) continue;
                const Mat2 gx = c_.g(x);
                h.add(gx(0, 0));
                h.add(gx(0, 1));
                h.add(gx(1, 1));
            }
        return h.hex();
    }

    bool is_conformal() const { return static_cast<bool>(c_.conformal); }
    double conformal_phi(const Vec2& x) const { return c_.conformal(x); }

private:
    static constexpr double kGuard = 1.05;

    void check(const Vec2& x) const {
        if (!std::isfinite(x[0]) || !std::isfinite(x[1]) || x.norm() > domain_radius()) {
            std::ostringstream os;
            os << "point (" << x[0] << ", " << x[1] << ") outside metric domain of radius " << domain_radius();
            throw DomainError(os.str());
        }
    }

    std::string id_;
    double rho_, eps_;
    bool flat_;
    Closures c_;
};

// Conformal factor phi with gradient and Laplacian, for g = e^{2 phi} I.
struct ConformalFactor {
    std::function<double(const Vec2&)> phi;
    std::function<Vec2(const Vec2&)> grad;
    std::function<double(const Vec2&)> lap;
};

inline MetricField euclidean_metric(double rho = 1.0, double eps_ext = 0.2) {
    MetricField::Closures c;
    c.g = [](const Vec2&) { return Mat2::Identity(); };
    c.dg = [](const Vec2&) { return MetricDerivs{Mat2::Zero(), Mat2::Zero()}; };
    c.curvature = [](const Vec2&) { return 0.0; };
    c.conformal = [](const Vec2&) { return 0.0; };
    return MetricField("euclidean", rho, std::move(c), eps_ext, true);
}

inline MetricField conformal_metric(ConformalFactor f, double rho = 1.0, double eps_ext = 0.2,
                                    std::string id = "conformal") {
    MetricField::Closures c;
    c.g = [f](const Vec2& x) { return Mat2(std::exp(2 * f.phi(x)) * Mat2::Identity()); };
    c.dg = [f](const Vec2& x) {
        const double e = std::exp(2 * f.phi(x));
        const Vec2 gr = f.grad(x);
        return MetricDerivs{Mat2(2 * gr[0] * e * Mat2::Identity()), Mat2(2 * gr[1] * e * Mat2::Identity())};
    };
    c.curvature = [f](const Vec2& x) { return -std::exp(-2 * f.phi(x)) * f.lap(x); };
    c.conformal = f.phi;
    return MetricField(std::move(id), rho, std::move(c), eps_ext, false);
}

// Shipped conformal example, phi = -|x|^2 / 8.
inline ConformalFactor gaussian_conformal_factor() {
    return {[](const Vec2& x) { return -x.squaredNorm() / 8; }, [](const Vec2& x) { return Vec2(-x / 4); },
            [](const Vec2&) { return -0.5; }};
}

// Poincare disk metric 4 (1 - |x|^2)^{-2} I restricted to the chart disk of
// radius rho; requires rho1 < 1.
inline MetricField hyperbolic_metric(double rho = 0.6, double eps_ext = 0.2) {
    if (rho * (1 + eps_ext) * 1.05 >= 1.0)
        throw ArgumentError("hyperbolic metric: extended radius must stay inside the unit disk");
    ConformalFactor f{[](const Vec2& x) { return std::log(2.0) - std::log(1 - x.squaredNorm()); },
                      [](const Vec2& x) { return Vec2(2 * x / (1 - x.squaredNorm())); },
                      [](const Vec2& x) {
                          const double s = 1 - x.squaredNorm();
                          return 4 / (s * s);
                      }};
    MetricField::Closures c;
    c.g = [](const Vec2& x) {
        const double s = 1 - x.squaredNorm();
        return Mat2(4 / (s * s) * Mat2::Identity());
    };
    c.dg = [](const Vec2& x) {
        const double s = 1 - x.squaredNorm();
        const double k = 16 / (s * s * s);
        return MetricDerivs{Mat2(k * x[0] * Mat2::Identity()), Mat2(k * x[1] * Mat2::Identity())};
    };
    c.curvature = [](const Vec2&) { return -1.0; };
    c.conformal = f.phi;
    return MetricField("hyperbolic", rho, std::move(c), eps_ext, false);
}

// Metric supplied as a bare closure; derivatives and curvature by differences.
inline MetricField general_metric(std::string id, std::function<Mat2(const Vec2&)> g, double rho = 1.0,
                                  double eps_ext = 0.2) {
    MetricField::Closures c;
    c.g = std::move(g);
    return MetricField(std::move(id), rho, std::move(c), eps_ext, false);
}

inline MetricField metric_by_id(const std::string& id, double rho, double eps_ext = 0.2) {
    if (id == "euclidean") return euclidean_metric(rho, eps_ext);
    if (id == "conformal") return conformal_metric(gaussian_conformal_factor(), rho, eps_ext);
    if (id == "hyperbolic") return hyperbolic_metric(rho, eps_ext);
    throw ArgumentError("unknown metric id '" + id + "' (expected euclidean, conformal or hyperbolic)");
}

} // namespace geobeam

#endif // GEOBEAM_METRIC_HPP
