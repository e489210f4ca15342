#ifndef GEOBEAM_GEODESIC_HPP
#define GEOBEAM_GEODESIC_HPP

#include "geobeam/metric.hpp"

#include <algorithm>
#include <optional>
#include <ostream>

namespace geobeam {

struct GeodesicState {
    Vec2 x, v;
};

struct SelfIntersection {
    double ti, tj;
    Vec2 point;
};

struct GeodesicPath {
    std::vector<double> t;
    std::vector<Vec2> x, v;
    double tau = 0;
    double boundary_radius = 0;
    std::vector<SelfIntersection> self_intersections;

    size_t size() const { return t.size(); }

    // Cubic Hermite interpolation of position and velocity (x' = v).
    GeodesicState at(double s) const {
        if (t.size() == 1) return {x[0], v[0]};
        s = std::clamp(s, t.front(), t.back());
        size_t k = std::upper_bound(t.begin(), t.end(), s) - t.begin();
        k = std::clamp<size_t>(k, 1, t.size() - 1);
        const double h = t[k] - t[k - 1];
        if (h <= 0) return {x[k], v[k]};
        const double u = (s - t[k - 1]) / h;
        const double h00 = 2 * u * u * u - 3 * u * u + 1, h10 = u * u * u - 2 * u * u + u;
        const double h01 = -2 * u * u * u + 3 * u * u, h11 = u * u * u - u * u;
        const Vec2 p = h00 * x[k - 1] + h10 * h * v[k - 1] + h01 * x[k] + h11 * h * v[k];
        const double d00 = 6 * u * u - 6 * u, d10 = 3 * u * u - 4 * u + 1;
        const double d01 = -6 * u * u + 6 * u, d11 = 3 * u * u - 2 * u;
        const Vec2 dp = (d00 * x[k - 1] + d01 * x[k]) / h + d10 * v[k - 1] + d11 * v[k];
        return {p, dp};
    }

    void write_csv(std::ostream& os) const {
        os << "t,x1,x2,v1,v2\n" << std::setprecision(17);
        for (size_t i = 0; i < t.size(); ++i)
            os << t[i] << ',' << x[i][0] << ',' << x[i][1] << ',' << v[i][0] << ',' << v[i][1] << '\n';
    }
};

inline Christoffel christoffel(const MetricField& m, const Vec2& x) { return m.christoffel(x); }

namespace detail {

inline Vec2 geodesic_accel(const MetricField& m, const Vec2& x, const Vec2& v) {
    const Christoffel G = m.christoffel(x);
    return Vec2(-v.dot(G[0] * v), -v.dot(G[1] * v));
}

inline GeodesicState rk4_step(const MetricField& m, const GeodesicState& s, double h) {
    if (m.is_flat()) return {s.x + h * s.v, s.v};
    const Vec2 k1x = s.v, k1v = geodesic_accel(m, s.x, s.v);
    const Vec2 x2 = s.x + 0.5 * h * k1x, v2 = s.v + 0.5 * h * k1v;
    const Vec2 k2x = v2, k2v = geodesic_accel(m, x2, v2);
    const Vec2 x3 = s.x + 0.5 * h * k2x, v3 = s.v + 0.5 * h * k2v;
    const Vec2 k3x = v3, k3v = geodesic_accel(m, x3, v3);
    const Vec2 x4 = s.x + h * k3x, v4 = s.v + h * k3v;
    const Vec2 k4x = v4, k4v = geodesic_accel(m, x4, v4);
    return {s.x + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x), s.v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)};
}

} // namespace detail

struct FlowOptions {
    double step = 0;            // 0 selects rho / 400
    double boundary_radius = 0; // 0 selects rho (the boundary of M)
    double t_max = 0;           // 0 selects 50 * diameter estimate
    double stop_time = -1;      // >= 0 stops early at this time
    bool detect_self_intersections = false;
};

// Unit-speed geodesic from (x0, v0) until it leaves the disk |x| <= R. The
// crossing is located by bisection on the sub-step length.
inline GeodesicPath geodesic_flow(const MetricField& m, const Vec2& x0, const Vec2& v0, FlowOptions opt = {}) {
    const double h = opt.step == 0 ? m.rho() / 400 : opt.step;
    if (!(h > 0)) throw ArgumentError("geodesic_flow: step must be positive");
    const double R = opt.boundary_radius == 0 ? m.rho() : opt.boundary_radius;
    const double tmax = opt.t_max == 0 ? 50 * 2 * R : opt.t_max;
    const double bt = 1e-12 * R;
    const double speed = m.norm(x0, v0);
    if (std::abs(speed - 1) > 1e-10)
        throw ArgumentError("geodesic_flow: initial velocity must have unit g-norm");
    if (x0.norm() > R * (1 + 1e-9)) throw DomainError("geodesic_flow: start point outside the boundary disk");

    GeodesicPath path;
    path.boundary_radius = R;
    GeodesicState s{x0, v0};
    double t = 0;
    path.t.push_back(0);
    path.x.push_back(x0);
    path.v.push_back(v0);
    const bool on_boundary = x0.norm() > R * (1 - 1e-9);
    if (on_boundary && x0.dot(v0) >= 0) {
        path.tau = 0;
        return path;
    }
    auto f = [&](const GeodesicState& st) { return st.x.norm() - R; };

    if (m.is_flat() && opt.stop_time < 0) {
        // Straight chord: exit time in closed form, samples on the same step grid.
        const double b = x0.dot(v0), c = x0.squaredNorm() - R * R;
        const double disc = std::max(0.0, b * b - c);
        const double tau = std::max(0.0, -b + std::sqrt(disc));
        const int n = static_cast<int>(std::ceil(tau / h - 1e-12));
        for (int k = 1; k < n; ++k) {
            path.t.push_back(k * h);
            path.x.push_back(x0 + k * h * v0);
            path.v.push_back(v0);
        }
        if (tau > 0) {
            Vec2 xe = x0 + tau * v0;
            xe *= R / xe.norm();
            path.t.push_back(tau);
            path.x.push_back(xe);
            path.v.push_back(v0);
        }
        path.tau = tau;
    } else {
        while (true) {
            double hh = h;
            if (opt.stop_time >= 0 && t + hh >= opt.stop_time) hh = opt.stop_time - t;
            if (hh <= 0) break;
            GeodesicState nxt = detail::rk4_step(m, s, hh);
            if (f(nxt) > 0) {
                // Bracket the exit; from a boundary start the root at 0 is excluded.
                double lo = 0, hi = hh;
                if (f(s) >= -bt) {
                    double probe = hh;
                    bool found = false;
                    for (int k = 0; k < 60; ++k) {
                        probe *= 0.5;
                        if (f(detail::rk4_step(m, s, probe)) < 0) {
                            found = true;
                            break;
                        }
                    }
                    if (!found) {
                        path.tau = t;
                        break;
                    }
                    lo = probe;
                }
                for (int it = 0; it < 200 && hi - lo > 1e-14 * R; ++it) {
                    const double mid = 0.5 * (lo + hi);
                    if (f(detail::rk4_step(m, s, mid)) > 0)
                        hi = mid;
                    else
                        lo = mid;
                }
                nxt = detail::rk4_step(m, s, hi);
                nxt.x *= R / nxt.x.norm();
                t += hi;
                path.t.push_back(t);
                path.x.push_back(nxt.x);
                path.v.push_back(nxt.v);
                path.tau = t;
                break;
            }
            s = nxt;
            t += hh;
            path.t.push_back(t);
            path.x.push_back(s.x);
            path.v.push_back(s.v);
            if (opt.stop_time >= 0 && t >= opt.stop_time) {
                path.tau = t;
                break;
            }
            if (t > tmax) {
                std::ostringstream os;
                os << "geodesic_flow: trapping cap exceeded (t > " << tmax << "), nontrapping assumption violated";
                throw NontrappingError(os.str());
            }
        }
    }

    if (opt.detect_self_intersections) {
        const double tol = 1e-3 * m.rho();
        const size_t n = path.size();
        const size_t gap = static_cast<size_t>(std::ceil(4 * tol / h)) + 2;
        for (size_t i = 0; i < n; ++i)
            for (size_t j = i + gap; j < n; ++j) {
                if ((path.x[i] - path.x[j]).norm() >= tol) continue;
                // transversal crossings only: tangential re-approach is not a self-intersection
                const double c = std::abs(path.v[i].normalized().dot(path.v[j].normalized()));
                if (c > 0.999) continue;
                bool local_min = true;
                const double d = (path.x[i] - path.x[j]).norm();
                if (j + 1 < n && (path.x[i] - path.x[j + 1]).norm() < d) local_min = false;
                if (j > 0 && (path.x[i] - path.x[j - 1]).norm() < d) local_min = false;
                if (local_min) path.self_intersections.push_back({path.t[i], path.t[j], path.x[i]});
            }
    }
    return path;
}

// Flow for exactly time r inside the disk of radius R; nullopt if it exits first.
inline std::optional<GeodesicState> flow_for(const MetricField& m, const Vec2& x0, const Vec2& v0, double r,
                                             double R, double step = 0) {
    if (r == 0) return GeodesicState{x0, v0};
    if (m.is_flat()) {
        const Vec2 x = x0 + r * v0;
        if (x.norm() > R * (1 + 1e-12)) return std::nullopt;
        // The straight segment lies in the disk iff both ends do.
        return GeodesicState{x, v0};
    }
    FlowOptions o;
    o.step = step;
    o.boundary_radius = R * (1 + 1e-12);
    o.stop_time = r;
    const GeodesicPath p = geodesic_flow(m, x0, v0, o);
    if (p.t.back() < r * (1 - 1e-12)) return std::nullopt;
    return GeodesicState{p.x.back(), p.v.back()};
}

inline Vec2 direction_from_angle(const MetricField& m, const Vec2& y, double theta) {
    return m.normalize(y, Vec2(std::cos(theta), std::sin(theta)));
}

// exp_y(r theta) on the extended manifold M1; theta is the chart angle of the
// initial direction.
inline Vec2 exp_map(const MetricField& m, const Vec2& y, double r, double theta) {
    if (r < 0) throw ArgumentError("exp_map: r must be non-negative");
    const Vec2 v = direction_from_angle(m, y, theta);
    auto s = flow_for(m, y, v, r, m.rho1());
    if (!s) {
        std::ostringstream os;
        os << "exp_map: geodesic leaves M1 before time " << r;
        throw RangeError(os.str());
    }
    return s->x;
}

// Polar normal coordinates (r, theta) of x about y, by Newton on exp_map.
inline std::pair<double, double> polar_coords(const MetricField& m, const Vec2& y, const Vec2& x) {
    const Vec2 d = x - y;
    if (d.norm() < 1e-14) return {0.0, 0.0};
    double theta = std::atan2(d[1], d[0]);
    double r = m.is_flat() ? d.norm() : std::sqrt(d.dot(m.g(0.5 * (x + y)) * d));
    if (m.is_flat()) return {r, theta};
    const double R = m.rho1() * 1.02;
    const double dth = 1e-6;
    for (int it = 0; it < 50; ++it) {
        const Vec2 v = direction_from_angle(m, y, theta);
        auto s = flow_for(m, y, v, r, R);
        if (!s) {
            r *= 0.7;
            continue;
        }
        const Vec2 res = s->x - x;
        if (res.norm() < 1e-11 * m.rho()) return {r, theta};
        auto sp = flow_for(m, y, direction_from_angle(m, y, theta + dth), r, R);
        auto sm = flow_for(m, y, direction_from_angle(m, y, theta - dth), r, R);
        if (!sp || !sm) {
            r *= 0.99;
            continue;
        }
        Mat2 J;
        J.col(0) = s->v;
        J.col(1) = (sp->x - sm->x) / (2 * dth);
        Vec2 delta = J.fullPivLu().solve(-res);
        const double lim = 0.25 * m.rho();
        if (delta.norm() > lim) delta *= lim / delta.norm();
        r += delta[0];
        theta += delta[1];
        if (r < 0) r = 1e-6;
    }
    std::ostringstream os;
    os << "polar_coords: Newton failed to converge in 50 iterations (metric not simple near x = (" << x[0] << ", "
       << x[1] << "))";
    throw NonSimpleError(os.str());
}

// ---------------------------------------------------------------------------
// Influx boundary sampling.

struct InfluxNode {
    double s;      // g-arclength parameter along the boundary circle
    double phi;    // chart polar angle of the boundary point
    double theta;  // direction angle from the inward normal, in [-pi/2, pi/2]
    double mu;     // -<v, nu>
    double weight; // product quadrature weight (arclength x angle)
    Vec2 x, v;
};

struct InfluxGrid {
    int n_s = 0, n_theta = 0;
    double radius = 0;   // chart radius of the boundary circle
    double perimeter = 0; // g-length of the boundary
    std::vector<InfluxNode> nodes; // index = i_s * n_theta + i_theta
    std::vector<double> s_values, theta_values, ds_dphi;

    const InfluxNode& node(int is, int it) const { return nodes[static_cast<size_t>(is) * n_theta + it]; }
    size_t size() const { return nodes.size(); }
};

namespace detail {

inline double boundary_speed(const MetricField& m, double R, double phi) {
    const Vec2 x(R * std::cos(phi), R * std::sin(phi));
    const Vec2 dx(-R * std::sin(phi), R * std::cos(phi));
    return m.norm(x, dx);
}

inline Vec2 inward_direction(const MetricField& m, const Vec2& x, double theta) {
    const Vec2 nin = -m.outward_normal(x);
    auto [e1, e2] = m.frame(x, nin);
    return std::cos(theta) * e1 + std::sin(theta) * e2;
}

} // namespace detail

// Tensor grid on the inward boundary sphere bundle of the disk of radius R
// (default rho). Boundary points are uniform in polar angle; directions use
// the closed trapezoid rule on [-pi/2, pi/2], so tangential nodes are kept
// with mu = 0.
inline InfluxGrid sample_influx(const MetricField& m, int n_s, int n_theta, double R = 0) {
    if (n_s < 4 || n_theta < 4) throw ArgumentError("sample_influx: n_s and n_theta must be >= 4");
    if (R == 0) R = m.rho();
    InfluxGrid G;
    G.n_s = n_s;
    G.n_theta = n_theta;
    G.radius = R;
    const double dphi = 2 * kPi / n_s;
    const double dth = kPi / (n_theta - 1);
    // cumulative g-arclength by composite Simpson on each panel
    std::vector<double> s(n_s + 1, 0.0);
    for (int i = 0; i < n_s; ++i) {
        double acc = 0;
        const int sub = 8;
        for (int k = 0; k < sub; ++k) {
            const double a = i * dphi + k * dphi / sub, b = a + dphi / sub;
            acc += (b - a) / 6 *
                   (detail::boundary_speed(m, R, a) + 4 * detail::boundary_speed(m, R, 0.5 * (a + b)) +
                    detail::boundary_speed(m, R, b));
        }
        s[i + 1] = s[i] + acc;
    }
    G.perimeter = s[n_s];
    for (int i = 0; i < n_s; ++i) {
        const double phi = i * dphi;
        const Vec2 x(R * std::cos(phi), R * std::sin(phi));
        const double sp = detail::boundary_speed(m, R, phi);
        G.s_values.push_back(s[i]);
        G.ds_dphi.push_back(sp);
        for (int j = 0; j < n_theta; ++j) {
            const double th = -kPi / 2 + j * dth;
            const double wth = (j == 0 || j == n_theta - 1) ? 0.5 * dth : dth;
            InfluxNode nd;
            nd.s = s[i];
            nd.phi = phi;
            nd.theta = th;
            nd.x = x;
            nd.v = detail::inward_direction(m, x, th);
            nd.mu = std::max(0.0, -m.inner(x, nd.v, m.outward_normal(x)));
            if (j == 0 || j == n_theta - 1) nd.mu = 0.0;
            nd.weight = sp * dphi * wth;
            G.nodes.push_back(nd);
        }
    }
    for (int j = 0; j < n_theta; ++j) G.theta_values.push_back(-kPi / 2 + j * dth);
    return G;
}

using PhaseFunction = std::function<double(const Vec2& x, const Vec2& v)>;

struct SantaloResult {
    double lhs, rhs, rel_err;
};

// Trapezoid integral of F along a sampled path.
inline double integrate_along(const GeodesicPath& p, const PhaseFunction& F) {
    double acc = 0;
    for (size_t k = 1; k < p.size(); ++k)
        acc += 0.5 * (p.t[k] - p.t[k - 1]) * (F(p.x[k - 1], p.v[k - 1]) + F(p.x[k], p.v[k]));
    return acc;
}

// Volume integral of F over SM against the fan integral with mu weights.
inline SantaloResult santalo_check(const MetricField& m, const PhaseFunction& F, const InfluxGrid& grid,
                                   int n_r = 64, int n_phi = 128, int n_alpha = 64) {
    const double R = grid.radius;
    std::vector<double> gx, gw;
    gauss_legendre(n_r, gx, gw);
    double lhs = 0;
    for (int i = 0; i < n_r; ++i) {
        const double r = 0.5 * R * (gx[i] + 1), wr = 0.5 * R * gw[i];
        for (int j = 0; j < n_phi; ++j) {
            const double ph = 2 * kPi * j / n_phi;
            const Vec2 x(r * std::cos(ph), r * std::sin(ph));
            auto [e1, e2] = m.frame(x, Vec2(1, 0));
            double inner = 0;
            for (int k = 0; k < n_alpha; ++k) {
                const double a = 2 * kPi * k / n_alpha;
                inner += F(x, std::cos(a) * e1 + std::sin(a) * e2);
            }
            lhs += wr * r * (2 * kPi / n_phi) * m.sqrt_detg(x) * inner * (2 * kPi / n_alpha);
        }
    }
    double rhs = 0;
    FlowOptions o;
    o.boundary_radius = R;
    for (const auto& nd : grid.nodes) {
        if (nd.weight == 0 || nd.mu == 0) continue;
        const GeodesicPath p = geodesic_flow(m, nd.x, nd.v, o);
        rhs += nd.weight * nd.mu * integrate_along(p, F);
    }
    const double scale = std::max(std::abs(lhs), std::abs(rhs));
    return {lhs, rhs, scale == 0 ? 0.0 : std::abs(lhs - rhs) / scale};
}

} // namespace geobeam

#endif // GEOBEAM_GEODESIC_HPP
