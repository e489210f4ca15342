#ifndef GEOBEAM_BEAM_HPP
#define GEOBEAM_BEAM_HPP

#include "geobeam/geodesic.hpp"
#include "geobeam/mesh.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <nlohmann/json.hpp>

namespace geobeam {

template <int N>
using RMatN = Eigen::Matrix<double, N, N>;
template <int N>
using CMatN = Eigen::Matrix<cplx, N, N>;

// ---------------------------------------------------------------------------
// Cutoffs.

// C2 quintic ramp from 0 (u <= 0) to 1 (u >= 1).
inline double smoothstep(double u) {
    if (u <= 0) return 0;
    if (u >= 1) return 1;
    return u * u * u * (10 + u * (-15 + 6 * u));
}

// 1 on [0, 1/4], 0 beyond 1/2.
inline double chi(double s) {
    s = std::abs(s);
    return 1 - smoothstep((s - 0.25) / 0.25);
}

// 1 on [1/4, 1/2], 0 outside [1/5, 2/3].
inline double chi1(double s) {
    s = std::abs(s);
    return smoothstep((s - 0.2) / 0.05) * (1 - smoothstep((s - 0.5) / (2.0 / 3 - 0.5)));
}

namespace detail {

// Cumulative integral from sample i0 on a uniform grid; 4th order per cell.
template <class T>
std::vector<T> cumulative(const std::vector<T>& f, double h, size_t i0) {
    const size_t n = f.size();
    if (n < 4) throw ArgumentError("cumulative quadrature needs at least 4 samples");
    auto cell = [&](size_t k) -> T {
        if (k == 0) return h * (9.0 * f[0] + 19.0 * f[1] - 5.0 * f[2] + f[3]) / 24.0;
        if (k == n - 2) return h * (f[n - 4] - 5.0 * f[n - 3] + 19.0 * f[n - 2] + 9.0 * f[n - 1]) / 24.0;
        return h * (-f[k - 1] + 13.0 * f[k] + 13.0 * f[k + 1] - f[k + 2]) / 24.0;
    };
    std::vector<T> F(n, T{});
    for (size_t k = i0; k + 1 < n; ++k) F[k + 1] = F[k] + cell(k);
    for (size_t k = i0; k > 0; --k) F[k - 1] = F[k] - cell(k - 1);
    return F;
}

// 4th-order derivative of uniform samples, one-sided at the ends.
template <class T>
std::vector<T> derivative(const std::vector<T>& f, double h) {
    const size_t n = f.size();
    if (n < 5) throw ArgumentError("derivative needs at least 5 samples");
    std::vector<T> d(n);
    for (size_t k = 2; k + 2 < n; ++k) d[k] = (f[k - 2] - 8.0 * f[k - 1] + 8.0 * f[k + 1] - f[k + 2]) / (12 * h);
    d[0] = (-25.0 * f[0] + 48.0 * f[1] - 36.0 * f[2] + 16.0 * f[3] - 3.0 * f[4]) / (12 * h);
    d[1] = (-3.0 * f[0] - 10.0 * f[1] + 18.0 * f[2] - 6.0 * f[3] + f[4]) / (12 * h);
    d[n - 1] = (25.0 * f[n - 1] - 48.0 * f[n - 2] + 36.0 * f[n - 3] - 16.0 * f[n - 4] + 3.0 * f[n - 5]) / (12 * h);
    d[n - 2] = (3.0 * f[n - 1] + 10.0 * f[n - 2] - 18.0 * f[n - 3] + 6.0 * f[n - 4] - f[n - 5]) / (12 * h);
    return d;
}

// Cubic Hermite weights on a uniform grid t = t0 + k h.
struct Hermite {
    size_t k = 0;
    double w0 = 0, d0 = 0, w1 = 0, d1 = 0;

    Hermite(double t0, double h, size_t n, double s) {
        double u = (s - t0) / h;
        const double kf = std::clamp(std::floor(u), 0.0, static_cast<double>(n - 2));
        k = static_cast<size_t>(kf);
        u -= kf;
        w0 = 2 * u * u * u - 3 * u * u + 1;
        d0 = h * (u * u * u - 2 * u * u + u);
        w1 = -2 * u * u * u + 3 * u * u;
        d1 = h * (u * u * u - u * u);
    }
    template <class T>
    T operator()(const std::vector<T>& f, const std::vector<T>& df) const {
        return w0 * f[k] + d0 * df[k] + w1 * f[k + 1] + d1 * df[k + 1];
    }
};

inline bool uniform_grid(const std::vector<double>& t) {
    if (t.size() < 2) return false;
    const double h = (t.back() - t.front()) / (t.size() - 1);
    for (size_t k = 0; k < t.size(); ++k)
        if (std::abs(t[k] - (t.front() + k * h)) > 1e-9 * std::abs(h)) return false;
    return h > 0;
}

template <int N>
double min_im_eig(const CMatN<N>& H) {
    const RMatN<N> im = H.imag();
    Eigen::SelfAdjointEigenSolver<RMatN<N>> es(0.5 * (im + im.transpose()), Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

} // namespace detail

// ---------------------------------------------------------------------------
// Riccati equation H' + H^2 = F along a geodesic.

template <int N>
struct RiccatiSolution {
    std::vector<double> t;
    size_t i0 = 0;
    std::vector<CMatN<N>> H;
    std::vector<RMatN<N>> F;

    size_t size() const { return t.size(); }
    double det_im(size_t k) const { return RMatN<N>(H[k].imag()).determinant(); }
    CMatN<N> dH(size_t k) const { return F[k].template cast<cplx>() - H[k] * H[k]; }
    double min_im() const {
        double m = std::numeric_limits<double>::infinity();
        for (const auto& h : H) m = std::min(m, detail::min_im_eig<N>(h));
        return m;
    }
};

// RK4 from t[i0] in both directions. F is callable as F(s) -> RMatN<N>.
template <int N, class Forcing>
RiccatiSolution<N> riccati_solve(Forcing&& F, const CMatN<N>& H0, const std::vector<double>& t, size_t i0) {
    if (t.size() < 2 || i0 >= t.size()) throw ArgumentError("riccati_solve: need a grid of >= 2 points containing t0");
    for (size_t k = 1; k < t.size(); ++k)
        if (!(t[k] > t[k - 1])) throw ArgumentError("riccati_solve: t-grid must be strictly increasing");
    if ((H0 - H0.transpose()).norm() > 1e-12 * (1 + H0.norm())) throw ArgumentError("riccati_solve: H0 must be symmetric");
    if (!(detail::min_im_eig<N>(H0) > 0)) throw ArgumentError("riccati_solve: Im H0 must be positive definite");

    RiccatiSolution<N> out;
    out.t = t;
    out.i0 = i0;
    out.H.resize(t.size());
    out.F.resize(t.size());
    for (size_t k = 0; k < t.size(); ++k) out.F[k] = F(t[k]);
    out.H[i0] = H0;
    auto rhs = [&](double s, const CMatN<N>& H) -> CMatN<N> { return RMatN<N>(F(s)).template cast<cplx>() - H * H; };
    auto step = [&](size_t from, size_t to) {
        const double s = t[from], h = t[to] - t[from];
        const CMatN<N>& H = out.H[from];
        const CMatN<N> k1 = rhs(s, H);
        const CMatN<N> k2 = rhs(s + h / 2, H + (h / 2) * k1);
        const CMatN<N> k3 = rhs(s + h / 2, H + (h / 2) * k2);
        const CMatN<N> k4 = rhs(s + h, H + h * k3);
        CMatN<N> Hn = H + (h / 6) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        Hn = 0.5 * (Hn + Hn.transpose()).eval();
        if (!(detail::min_im_eig<N>(Hn) > 0) || !Hn.allFinite()) {
            std::ostringstream os;
            os << "riccati_solve: Im H lost positivity at t = " << t[to] << " (blow-up; check H0 or the step)";
            throw BlowUpError(os.str());
        }
        out.H[to] = Hn;
    };
    for (size_t k = i0; k + 1 < t.size(); ++k) step(k, k + 1);
    for (size_t k = i0; k > 0; --k) step(k, k - 1);
    return out;
}

// Sampled forcing on a uniform grid; cubic interpolation at RK4 midpoints.
template <int N>
RiccatiSolution<N> riccati_solve(const std::vector<RMatN<N>>& Fs, const CMatN<N>& H0, const std::vector<double>& t,
                                 size_t i0) {
    if (Fs.size() != t.size()) throw ArgumentError("riccati_solve: forcing samples must match the t-grid");
    if (!detail::uniform_grid(t) || t.size() < 4) throw ArgumentError("riccati_solve: sampled forcing needs a uniform grid");
    const double h = t[1] - t[0];
    const size_t n = t.size();
    auto F = [&](double s) -> RMatN<N> {
        const double u = (s - t[0]) / h;
        const double r = std::round(u);
        if (std::abs(u - r) < 1e-6) return Fs[std::clamp<size_t>(static_cast<size_t>(r), 0, n - 1)];
        const size_t k = std::clamp<size_t>(static_cast<size_t>(std::floor(u)), 0, n - 2);
        if (k == 0) return (5 * Fs[0] + 15 * Fs[1] - 5 * Fs[2] + Fs[3]) / 16;
        if (k == n - 2) return (5 * Fs[n - 1] + 15 * Fs[n - 2] - 5 * Fs[n - 3] + Fs[n - 4]) / 16;
        return (-Fs[k - 1] + 9 * Fs[k] + 9 * Fs[k + 1] - Fs[k + 2]) / 16;
    };
    return riccati_solve<N>(F, H0, t, i0);
}

// max_t |det Im H(t) - det Im H(t0) exp(-2 int tr Re H)| / rhs.
template <int N>
double det_identity_defect(const RiccatiSolution<N>& R) {
    if (!detail::uniform_grid(R.t)) throw ArgumentError("det_identity_defect: uniform grid required");
    std::vector<double> tr(R.size());
    for (size_t k = 0; k < R.size(); ++k) tr[k] = R.H[k].real().trace();
    const auto I = detail::cumulative(tr, R.t[1] - R.t[0], R.i0);
    const double d0 = R.det_im(R.i0);
    double worst = 0;
    for (size_t k = 0; k < R.size(); ++k) {
        const double rhs = d0 * std::exp(-2 * I[k]);
        worst = std::max(worst, std::abs(R.det_im(k) - rhs) / rhs);
    }
    return worst;
}

// Leading amplitude a00(t) = c2 exp(-1/2 int_{t0}^t tr H), n = N + 1.
struct AmplitudeSolution {
    std::vector<cplx> a00;
    double c2 = 0;
    int n = 2;
};

template <int N>
AmplitudeSolution amplitude_solve(const RiccatiSolution<N>& R) {
    if (!detail::uniform_grid(R.t)) throw ArgumentError("amplitude_solve: uniform grid required");
    AmplitudeSolution A;
    A.n = N + 1;
    A.c2 = std::pow(2 * kPi, (1.0 - A.n) / 4) * std::pow(std::abs(R.det_im(R.i0)), 0.25);
    std::vector<cplx> tr(R.size());
    for (size_t k = 0; k < R.size(); ++k) tr[k] = R.H[k].trace();
    const auto I = detail::cumulative(tr, R.t[1] - R.t[0], R.i0);
    A.a00.resize(R.size());
    for (size_t k = 0; k < R.size(); ++k) A.a00[k] = A.c2 * std::exp(-0.5 * I[k]);
    return A;
}

// max_t relative deviation of |a00|^2 |det Im H|^{-1/2} from (2 pi)^{(1-n)/2}.
template <int N>
double weight_identity_defect(const RiccatiSolution<N>& R, const AmplitudeSolution& A) {
    const double ref = std::pow(2 * kPi, (1.0 - A.n) / 2);
    double worst = 0;
    for (size_t k = 0; k < R.size(); ++k) {
        const double w = std::norm(A.a00[k]) / std::sqrt(std::abs(R.det_im(k)));
        worst = std::max(worst, std::abs(w - ref) / ref);
    }
    return worst;
}

// F = -K along the sampled points (n = 2 Jacobi reduction).
inline std::vector<double> curvature_forcing(const MetricField& m, const std::vector<Vec2>& pts) {
    std::vector<double> F(pts.size());
    for (size_t k = 0; k < pts.size(); ++k) F[k] = m.is_flat() ? 0.0 : -m.curvature(pts[k]);
    return F;
}

inline std::vector<double> curvature_forcing(const MetricField& m, const GeodesicPath& g) {
    return curvature_forcing(m, g.x);
}

// ---------------------------------------------------------------------------
// Geodesic track on M1 with a parallel-transported normal.

class BeamTrack {
public:
    BeamTrack(const MetricField& m, const Vec2& x, const Vec2& v, int samples = 4096)
        : m_(std::make_shared<MetricField>(m)) {
        if (samples < 16) throw ArgumentError("BeamTrack: need at least 16 samples");
        const double R1 = m.rho1();
        const Vec2 u = m.normalize(x, v);
        // Back to the boundary of M1, then across.
        FlowOptions fo;
        fo.boundary_radius = R1;
        Vec2 xs = x, vs = u;
        if (x.norm() < R1 * (1 - 1e-12)) {
            const GeodesicPath back = geodesic_flow(m, x, -u, fo);
            xs = back.x.back();
            vs = -back.v.back();
        }
        const GeodesicPath fwd = geodesic_flow(m, xs, vs, fo);
        if (!(fwd.tau > 0)) throw ArgumentError("BeamTrack: geodesic does not enter M1");
        h_ = fwd.tau / samples;
        const int n = samples + 1;
        x_.resize(n);
        v_.resize(n);
        e_.resize(n);
        dv_.resize(n);
        de_.resize(n);
        x_[0] = xs;
        v_[0] = vs;
        e_[0] = m.frame(xs, vs).second;
        if (m.is_flat()) {
            for (int k = 1; k < n; ++k) {
                x_[k] = xs + k * h_ * vs;
                v_[k] = vs;
                e_[k] = e_[0];
            }
        } else {
            for (int k = 1; k < n; ++k) step(x_[k - 1], v_[k - 1], e_[k - 1], h_, x_[k], v_[k], e_[k]);
        }
        for (int k = 0; k < n; ++k) rates(x_[k], v_[k], e_[k], dv_[k], de_[k]);
        // Part inside M.
        const double R = m.rho();
        int first = -1, last = -1;
        for (int k = 0; k < n; ++k)
            if (x_[k].norm() <= R) {
                if (first < 0) first = k;
                last = k;
            }
        if (first < 0) throw ArgumentError("BeamTrack: geodesic misses M");
        t_in_ = crossing(first - 1, first, R);
        t_out_ = crossing(last, last + 1, R);
    }

    const MetricField& metric() const { return *m_; }
    size_t size() const { return x_.size(); }
    double h() const { return h_; }
    double t(size_t k) const { return h_ * k; }
    double t_end() const { return h_ * (x_.size() - 1); }
    double t_in() const { return t_in_; }
    double t_out() const { return t_out_; }
    double t_mid() const { return 0.5 * (t_in_ + t_out_); }
    const std::vector<Vec2>& points() const { return x_; }
    const Vec2& x(size_t k) const { return x_[k]; }
    const Vec2& v(size_t k) const { return v_[k]; }
    const Vec2& e(size_t k) const { return e_[k]; }

    std::vector<double> times() const {
        std::vector<double> t(size());
        for (size_t k = 0; k < t.size(); ++k) t[k] = this->t(k);
        return t;
    }

    Vec2 position(double s) const { return detail::Hermite(0, h_, size(), s)(x_, v_); }
    Vec2 tangent(double s) const { return detail::Hermite(0, h_, size(), s)(v_, dv_); }
    Vec2 normal(double s) const { return detail::Hermite(0, h_, size(), s)(e_, de_); }

    // Half-width (g-length) of the tabulated Fermi chart; 0 selects the
    // whole domain. Must be set before the first curved-metric lookup.
    void set_fermi_extent(double Y) { fermi_extent_ = Y; }

    // exp_{gamma(t)}(y E2(t)). Flat metrics in closed form; otherwise a bicubic
    // Hermite table of normal geodesics (values and y-velocities exact, t
    // derivatives by 4th-order differences).
    Vec2 fermi_map(double t, double y) const {
        if (m_->is_flat()) {
            const detail::Hermite w(0, h_, size(), t);
            return w(x_, v_) + y * w(e_, de_);
        }
        Vec2 a, b;
        return fermi_eval(t, y, a, b);
    }

    // Map with its partial derivatives.
    Vec2 fermi_eval(double t, double y, Vec2& Ft, Vec2& Fy) const {
        if (m_->is_flat()) {
            const detail::Hermite w(0, h_, size(), t);
            const Vec2 e = w(e_, de_);
            Ft = w(v_, dv_);
            Fy = e;
            return w(x_, v_) + y * e;
        }
        std::call_once(grid_once_, [this] { build_grid(); });
        const FermiGrid& G = grid_;
        const double u = t / G.ht, w = (y + G.Y) / G.hy;
        if (!(u >= 0 && u <= G.nt) || !(w >= 0 && w <= 2 * G.ny))
            throw DomainError("fermi_map: (t, y) outside the tabulated chart");
        const int i = std::min(static_cast<int>(u), G.nt - 1), j = std::min(static_cast<int>(w), 2 * G.ny - 1);
        if (j < G.lo[i] || j + 1 > G.hi[i] || j < G.lo[i + 1] || j + 1 > G.hi[i + 1])
            throw DomainError("fermi_map: normal geodesic leaves the metric domain");
        const double a = u - i, b = w - j;
        auto A = [](int k, double s) { return k == 0 ? 2 * s * s * s - 3 * s * s + 1 : -2 * s * s * s + 3 * s * s; };
        auto B = [](int k, double s) { return k == 0 ? s * s * s - 2 * s * s + s : s * s * s - s * s; };
        auto dA = [](int k, double s) { return k == 0 ? 6 * s * s - 6 * s : -6 * s * s + 6 * s; };
        auto dB = [](int k, double s) { return k == 0 ? 3 * s * s - 4 * s + 1 : 3 * s * s - 2 * s; };
        Vec2 F = Vec2::Zero();
        Ft.setZero();
        Fy.setZero();
        for (int p = 0; p < 2; ++p)
            for (int q = 0; q < 2; ++q) {
                const size_t k = G.at(i + p, j + q);
                const Vec2 c0 = G.F[k], ct = G.Ft[k] * G.ht, cy = G.Fy[k] * G.hy, cty = G.Fty[k] * G.ht * G.hy;
                F += A(p, a) * A(q, b) * c0 + B(p, a) * A(q, b) * ct + A(p, a) * B(q, b) * cy + B(p, a) * B(q, b) * cty;
                Ft += (dA(p, a) * A(q, b) * c0 + dB(p, a) * A(q, b) * ct + dA(p, a) * B(q, b) * cy +
                       dB(p, a) * B(q, b) * cty) /
                      G.ht;
                Fy += (A(p, a) * dA(q, b) * c0 + B(p, a) * dA(q, b) * ct + A(p, a) * dB(q, b) * cy +
                       B(p, a) * dB(q, b) * cty) /
                      G.hy;
            }
        return F;
    }

    // exp_{gamma(t)}(y E2(t)) by direct RK4 shooting (reference for the table).
    Vec2 fermi_exp(double t, double y, int steps = 256) const {
        const detail::Hermite w(0, h_, size(), t);
        GeodesicState s{w(x_, v_), y * w(e_, de_)};
        for (int k = 0; k < steps; ++k) s = detail::rk4_step(*m_, s, 1.0 / steps);
        return s.x;
    }

    // Fermi coordinates (t, y) of x with t in [lo, hi]; Newton from the
    // nearest sample or from a supplied guess.
    std::optional<std::pair<double, double>> fermi_coords(const Vec2& x, double lo, double hi,
                                                          const std::pair<double, double>* guess = nullptr) const {
        if (m_->is_flat()) {
            const double t = m_->inner(x_[0], x - x_[0], v_[0]);
            const double y = m_->inner(x_[0], x - x_[0], e_[0]);
            if (t < lo || t > hi) return std::nullopt;
            return std::make_pair(t, y);
        }
        double t, y;
        if (guess) {
            t = guess->first;
            y = guess->second;
        } else {
            const size_t klo = static_cast<size_t>(std::max(0.0, std::floor(lo / h_)));
            const size_t khi = std::min(size() - 1, static_cast<size_t>(std::ceil(hi / h_)));
            if (klo > khi) return std::nullopt;
            const size_t stride = std::max<size_t>(1, size() / 256);
            size_t best = klo;
            double bd = std::numeric_limits<double>::infinity();
            for (size_t k = klo; k <= khi; k += stride) {
                const double d = (x_[k] - x).squaredNorm();
                if (d < bd) bd = d, best = k;
            }
            const size_t a = best > stride ? best - stride : 0, b = std::min(khi, best + stride);
            for (size_t k = std::max(a, klo); k <= b; ++k) {
                const double d = (x_[k] - x).squaredNorm();
                if (d < bd) bd = d, best = k;
            }
            try {
                t = this->t(best) + m_->inner(x_[best], x - x_[best], v_[best]);
                y = m_->inner(x_[best], x - x_[best], e_[best]);
            } catch (const DomainError&) {
                return std::nullopt;
            }
        }
        const double tol = 1e-13 * m_->rho();
        try {
            for (int it = 0; it < 40; ++it) {
                Mat2 J;
                Vec2 Ft, Fy;
                const Vec2 r = x - fermi_eval(std::clamp(t, 0.0, t_end()), y, Ft, Fy);
                if (r.norm() < tol) {
                    if (t < lo || t > hi) return std::nullopt;
                    return std::make_pair(t, y);
                }
                J.col(0) = Ft;
                J.col(1) = Fy;
                Vec2 d = J.fullPivLu().solve(r);
                const double lim = 0.25 * m_->rho();
                if (d.norm() > lim) d *= lim / d.norm();
                t = std::clamp(t + d[0], 0.0, t_end());
                y += d[1];
                if (d.norm() < 1e-15 * m_->rho()) {
                    if ((x - fermi_map(t, y)).norm() < 1e3 * tol && t >= lo && t <= hi) return std::make_pair(t, y);
                    return std::nullopt;
                }
            }
        } catch (const DomainError&) {
            return std::nullopt;
        }
        return std::nullopt;
    }

    // Self-intersection times of the sampled track (transversal crossings).
    std::vector<SelfIntersection> self_intersections() const {
        std::vector<SelfIntersection> out;
        const double tol = 1e-3 * m_->rho();
        const size_t n = size(), gap = static_cast<size_t>(std::ceil(4 * tol / h_)) + 2;
        const size_t stride = std::max<size_t>(1, static_cast<size_t>(tol / h_));
        for (size_t i = 0; i < n; i += stride)
            for (size_t j = i + gap; j < n; j += stride) {
                if ((x_[i] - x_[j]).norm() >= 2 * tol + 2 * h_ * stride) continue;
                // refine locally
                size_t bi = i, bj = j;
                double bd = (x_[i] - x_[j]).norm();
                for (size_t a = (i > stride ? i - stride : 0); a < std::min(n, i + stride); ++a)
                    for (size_t b = (j > stride ? j - stride : 0); b < std::min(n, j + stride); ++b) {
                        if (b < a + gap) continue;
                        const double d = (x_[a] - x_[b]).norm();
                        if (d < bd) bd = d, bi = a, bj = b;
                    }
                if (bd >= tol) continue;
                if (std::abs(v_[bi].normalized().dot(v_[bj].normalized())) > 0.999) continue;
                bool dup = false;
                for (const auto& s : out)
                    if (std::abs(s.ti - t(bi)) < 4 * tol && std::abs(s.tj - t(bj)) < 4 * tol) dup = true;
                if (!dup) out.push_back({t(bi), t(bj), x_[bi]});
            }
        return out;
    }

private:
    void rates(const Vec2& x, const Vec2& v, const Vec2& e, Vec2& dv, Vec2& de) const {
        if (m_->is_flat()) {
            dv.setZero();
            de.setZero();
            return;
        }
        const Christoffel G = m_->christoffel(x);
        dv = Vec2(-v.dot(G[0] * v), -v.dot(G[1] * v));
        de = Vec2(-v.dot(G[0] * e), -v.dot(G[1] * e));
    }

    // RK4 on (x, v, e) with e parallel along the geodesic.
    void step(const Vec2& x, const Vec2& v, const Vec2& e, double h, Vec2& xo, Vec2& vo, Vec2& eo) const {
        Vec2 a1, b1, a2, b2, a3, b3, a4, b4;
        rates(x, v, e, a1, b1);
        const Vec2 x2 = x + h / 2 * v, v2 = v + h / 2 * a1, e2 = e + h / 2 * b1;
        rates(x2, v2, e2, a2, b2);
        const Vec2 x3 = x + h / 2 * v2, v3 = v + h / 2 * a2, e3 = e + h / 2 * b2;
        rates(x3, v3, e3, a3, b3);
        const Vec2 x4 = x + h * v3, v4 = v + h * a3, e4 = e + h * b3;
        rates(x4, v4, e4, a4, b4);
        xo = x + h / 6 * (v + 2 * v2 + 2 * v3 + v4);
        vo = v + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4);
        eo = e + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4);
    }

    double crossing(int a, int b, double R) const {
        if (a < 0) return 0;
        if (b >= static_cast<int>(size())) return t_end();
        double lo = t(a), hi = t(b);
        const bool inside_lo = x_[a].norm() <= R;
        for (int it = 0; it < 80; ++it) {
            const double mid = 0.5 * (lo + hi);
            if ((position(mid).norm() <= R) == inside_lo)
                lo = mid;
            else
                hi = mid;
        }
        return 0.5 * (lo + hi);
    }

    struct FermiGrid {
        int nt = 0, ny = 0; // t nodes 0..nt, y nodes 0..2 ny
        double ht = 0, hy = 0, Y = 0;
        std::vector<Vec2> F, Ft, Fy, Fty;
        std::vector<int> lo, hi; // valid y-node range per t node
        size_t at(int i, int j) const { return static_cast<size_t>(i) * (2 * ny + 1) + j; }
    };

    void build_grid() const {
        FermiGrid& G = grid_;
        const MetricField& m = *m_;
        double Y = fermi_extent_;
        if (!(Y > 0)) {
            double gs = 0;
            for (size_t k = 0; k < size(); k += std::max<size_t>(1, size() / 64))
                gs = std::max(gs, std::sqrt(m.g(x_[k]).diagonal().maxCoeff()));
            Y = 2.2 * m.rho1() * gs;
        }
        G.nt = std::max(64, std::min(512, static_cast<int>(size()) - 1));
        G.ny = 128;
        G.ht = t_end() / G.nt;
        G.Y = Y;
        G.hy = Y / G.ny;
        const int nyt = 2 * G.ny + 1;
        const size_t tot = static_cast<size_t>(G.nt + 1) * nyt;
        G.F.assign(tot, Vec2::Zero());
        G.Ft.assign(tot, Vec2::Zero());
        G.Fy.assign(tot, Vec2::Zero());
        G.Fty.assign(tot, Vec2::Zero());
        G.lo.assign(G.nt + 1, G.ny);
        G.hi.assign(G.nt + 1, G.ny);
        const int sub = 2;
        const double lim = m.domain_radius() * 0.999;
        parallel_for(static_cast<size_t>(G.nt + 1), [&](size_t ii) {
            const int i = static_cast<int>(ii);
            const double t = i * G.ht;
            const detail::Hermite w(0, h_, size(), t);
            const Vec2 p = w(x_, v_), e = w(e_, de_);
            G.F[G.at(i, G.ny)] = p;
            G.Fy[G.at(i, G.ny)] = e;
            for (int dir = -1; dir <= 1; dir += 2) {
                GeodesicState s{p, dir * e};
                int j = G.ny;
                bool ok = true;
                while (ok && j + dir >= 0 && j + dir <= 2 * G.ny) {
                    try {
                        for (int k = 0; k < sub; ++k) s = detail::rk4_step(m, s, G.hy / sub);
                    } catch (const DomainError&) {
                        ok = false;
                        break;
                    }
                    if (!(s.x.norm() < lim)) {
                        ok = false;
                        break;
                    }
                    j += dir;
                    G.F[G.at(i, j)] = s.x;
                    G.Fy[G.at(i, j)] = dir * s.v;
                }
                if (dir < 0)
                    G.lo[i] = j;
                else
                    G.hi[i] = j;
            }
        });
        // t-derivatives by 4th-order differences along columns with valid data.
        for (int j = 0; j < nyt; ++j)
            for (int i = 0; i <= G.nt; ++i) {
                auto valid = [&](int k) { return k >= 0 && k <= G.nt && j >= G.lo[k] && j <= G.hi[k]; };
                if (!valid(i)) continue;
                auto d = [&](const std::vector<Vec2>& f) -> Vec2 {
                    auto v = [&](int k) { return f[G.at(k, j)]; };
                    if (valid(i - 2) && valid(i + 2)) return (v(i - 2) - 8 * v(i - 1) + 8 * v(i + 1) - v(i + 2)) / (12 * G.ht);
                    if (valid(i + 4) && (i < 2 || !valid(i - 2)))
                        return (-25 * v(i) + 48 * v(i + 1) - 36 * v(i + 2) + 16 * v(i + 3) - 3 * v(i + 4)) / (12 * G.ht);
                    if (valid(i - 4))
                        return (25 * v(i) - 48 * v(i - 1) + 36 * v(i - 2) - 16 * v(i - 3) + 3 * v(i - 4)) / (12 * G.ht);
                    if (valid(i + 1) && valid(i - 1)) return (v(i + 1) - v(i - 1)) / (2 * G.ht);
                    return Vec2::Zero();
                };
                G.Ft[G.at(i, j)] = d(G.F);
                G.Fty[G.at(i, j)] = d(G.Fy);
            }
    }

    std::shared_ptr<MetricField> m_;
    double fermi_extent_ = 0;
    mutable std::once_flag grid_once_;
    mutable FermiGrid grid_;
    double h_ = 0, t_in_ = 0, t_out_ = 0;
    std::vector<Vec2> x_, v_, e_, dv_, de_;
};

// ---------------------------------------------------------------------------
// Fermi charts.

struct FermiChart {
    int index = 0;
    double t_lo = 0, t_hi = 0;    // interval I_j
    double ramp_lo = 0, ramp_hi = 0; // overlap widths at either end (0 at track ends)
    double delta = 0;
    std::shared_ptr<const BeamTrack> track;
    std::vector<double> t;        // frame samples on I_j
    std::vector<Vec2> E1, E2;

    Vec2 map(double tt, double y) const { return track->fermi_map(tt, y); }
    std::optional<std::pair<double, double>> coords(const Vec2& x,
                                                    const std::pair<double, double>* guess = nullptr) const {
        return track->fermi_coords(x, t_lo, t_hi, guess);
    }

    // Partition weight eta_j(t); squares sum to one across charts.
    double eta(double tt) const {
        if (tt < t_lo || tt > t_hi) return 0;
        double w = 1;
        if (ramp_lo > 0 && tt < t_lo + ramp_lo) w *= std::sin(0.5 * kPi * smoothstep((tt - t_lo) / ramp_lo));
        if (ramp_hi > 0 && tt > t_hi - ramp_hi) w *= std::cos(0.5 * kPi * smoothstep((tt - (t_hi - ramp_hi)) / ramp_hi));
        return w;
    }
};

struct ChartOptions {
    std::vector<double> split_times; // forced splits in addition to self-intersections
    double overlap = 0;              // 0 selects min(delta, gap / 4)
    double y_extent = 0;             // half-width checked for injectivity; 0 selects delta / 2
    bool check_injectivity = true;
};

namespace detail {

inline void check_chart_injective(const FermiChart& c, double ymax) {
    const MetricField& m = c.track->metric();
    if (m.is_flat()) return;
    const int nt = 64, ny = 9;
    std::vector<Vec2> img;
    std::vector<std::pair<double, double>> par;
    const double R1 = m.rho1();
    for (int i = 0; i < nt; ++i)
        for (int j = 0; j < ny; ++j) {
            const double t = c.t_lo + (c.t_hi - c.t_lo) * (i + 0.5) / nt;
            const double y = ymax * (2.0 * j / (ny - 1) - 1);
            Vec2 p;
            try {
                p = c.map(t, y);
            } catch (const DomainError&) {
                continue;
            }
            if (p.norm() > R1) continue;
            // local diffeomorphism
            const double d = 1e-6;
            Mat2 J;
            try {
                J.col(0) = (c.map(t + d, y) - c.map(t - d, y)) / (2 * d);
                J.col(1) = (c.map(t, y + d) - c.map(t, y - d)) / (2 * d);
            } catch (const DomainError&) {
                continue;
            }
            if (!(J.determinant() > 0)) {
                std::ostringstream os;
                os << "fermi_chart_cover: chart " << c.index << " degenerates at (t, y) = (" << t << ", " << y
                   << "); delta too large";
                throw InjectivityError(os.str());
            }
            img.push_back(p);
            par.push_back({t, y});
        }
    const double dt = (c.t_hi - c.t_lo) / nt, dy = 2 * ymax / (ny - 1);
    const double sep = 0.25 * std::min(dt, dy);
    for (size_t a = 0; a < img.size(); ++a)
        for (size_t b = a + 1; b < img.size(); ++b) {
            if (std::abs(par[a].first - par[b].first) < 2.5 * dt && std::abs(par[a].second - par[b].second) < 2.5 * dy)
                continue;
            if ((img[a] - img[b]).norm() < sep) {
                std::ostringstream os;
                os << "fermi_chart_cover: chart " << c.index << " is not injective (t = " << par[a].first << " and "
                   << par[b].first << " map to the same point); delta too large";
                throw InjectivityError(os.str());
            }
        }
}

} // namespace detail

inline std::vector<FermiChart> fermi_chart_cover(std::shared_ptr<const BeamTrack> track, double delta,
                                                 const ChartOptions& opt = {}) {
    if (!(delta > 0)) throw ArgumentError("fermi_chart_cover: delta must be positive");
    std::vector<double> cuts = opt.split_times;
    for (const auto& s : track->self_intersections()) cuts.push_back(0.5 * (s.ti + s.tj));
    std::sort(cuts.begin(), cuts.end());
    cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
    for (double c : cuts)
        if (!(c > 0 && c < track->t_end())) throw ArgumentError("fermi_chart_cover: split time outside the geodesic");
    std::vector<double> ends{0.0};
    for (double c : cuts) ends.push_back(c);
    ends.push_back(track->t_end());
    double gap = std::numeric_limits<double>::infinity();
    for (size_t k = 1; k < ends.size(); ++k) gap = std::min(gap, ends[k] - ends[k - 1]);
    const double w = opt.overlap > 0 ? opt.overlap : std::min(delta, gap / 4);
    if (w >= gap / 2) throw ArgumentError("fermi_chart_cover: overlap wider than half the gap between splits");

    std::vector<FermiChart> charts;
    for (size_t k = 0; k + 1 < ends.size(); ++k) {
        FermiChart c;
        c.index = static_cast<int>(k);
        c.track = track;
        c.delta = delta;
        c.t_lo = k == 0 ? 0.0 : ends[k] - w / 2;
        c.t_hi = k + 2 == ends.size() ? track->t_end() : ends[k + 1] + w / 2;
        c.ramp_lo = k == 0 ? 0.0 : w;
        c.ramp_hi = k + 2 == ends.size() ? 0.0 : w;
        const size_t a = static_cast<size_t>(std::ceil(c.t_lo / track->h() - 1e-9));
        const size_t b = std::min(track->size() - 1, static_cast<size_t>(std::floor(c.t_hi / track->h() + 1e-9)));
        for (size_t i = a; i <= b; ++i) {
            c.t.push_back(track->t(i));
            c.E1.push_back(track->v(i));
            c.E2.push_back(track->e(i));
        }
        if (opt.check_injectivity) detail::check_chart_injective(c, opt.y_extent > 0 ? opt.y_extent : delta / 2);
        charts.push_back(std::move(c));
    }
    return charts;
}

inline std::vector<FermiChart> fermi_chart_cover(const MetricField& m, const GeodesicPath& gamma, double delta,
                                                 const ChartOptions& opt = {}) {
    if (gamma.size() == 0) throw ArgumentError("fermi_chart_cover: empty geodesic");
    auto track = std::make_shared<BeamTrack>(m, gamma.x[0], gamma.v[0]);
    track->set_fermi_extent(1.1 * (opt.y_extent > 0 ? opt.y_extent : delta / 2));
    return fermi_chart_cover(track, delta, opt);
}

// ---------------------------------------------------------------------------
// Quasimode.

struct BeamOptions {
    double a = 0.4;          // decay exponent, delta = c_delta * lambda^-a
    double c_delta = 16;     // width constant of the transverse cutoff
    int q_terms = 2;         // amplitude corrections a_j, j <= N, N in {0, 1, 2}
    int samples = 4096;      // uniform t-samples along the track
    double gauss_cut = 50;   // beam treated as zero where lambda Im H y^2 / 2 exceeds this
    cplx H0{0, 1};           // Riccati seed at the chord midpoint
    ChartOptions charts;
    ScalarField potential;   // on-axis q for the corrections; empty means q = 0
};

class Quasimode {
public:
    Quasimode(const MetricField& m, const GeodesicPath& gamma, double lambda, const BeamOptions& opt = {})
        : lambda_(lambda), opt_(opt) {
        if (!(lambda > 0)) throw ArgumentError("quasimode: lambda must be positive");
        if (!(opt.a > 1.0 / 3 && opt.a < 0.5)) {
            std::ostringstream os;
            os << "quasimode: decay exponent a = " << opt.a << " outside the open interval (1/3, 1/2)";
            throw ArgumentError(os.str());
        }
        if (opt.q_terms < 0 || opt.q_terms > 2) throw ArgumentError("quasimode: q_terms must be 0, 1 or 2");
        if (gamma.size() == 0) throw ArgumentError("quasimode: empty geodesic");
        auto tr = std::make_shared<BeamTrack>(m, gamma.x[0], gamma.v[0], opt.samples);
        track_ = tr;
        delta_ = opt.c_delta * std::pow(lambda, -opt.a);
        build_profile(m);
        tr->set_fermi_extent(1.1 * std::min(delta_ / 2, y_lim_) + 0.05 * m.rho());
        ChartOptions co = opt.charts;
        if (co.y_extent <= 0) co.y_extent = std::min(delta_ / 2, y_lim_);
        charts_ = fermi_chart_cover(track_, delta_, co);
    }

    double lambda() const { return lambda_; }
    double delta() const { return delta_; }
    double a() const { return opt_.a; }
    int q_terms() const { return opt_.q_terms; }
    double y_limit() const { return y_lim_; }
    const BeamOptions& options() const { return opt_; }
    const BeamTrack& track() const { return *track_; }
    std::shared_ptr<const BeamTrack> track_ptr() const { return track_; }
    const std::vector<FermiChart>& charts() const { return charts_; }
    const RiccatiSolution<1>& riccati() const { return ric_; }
    const AmplitudeSolution& amplitude() const { return amp_; }

    cplx H(double t) const { return detail::Hermite(0, track_->h(), track_->size(), t)(H_, dH_); }
    cplx a00(double t) const { return detail::Hermite(0, track_->h(), track_->size(), t)(coef_[0][0], dcoef_[0][0]); }

    // Correction polynomial p_j(t, z) = sum_k b_jk(t) z^k.
    cplx correction(int j, double t, double z) const {
        const detail::Hermite w(0, track_->h(), track_->size(), t);
        cplx s = 0, zk = 1;
        for (size_t k = 0; k < coef_[j].size(); ++k, zk *= z)
            if (!coef_[j][k].empty()) s += w(coef_[j][k], dcoef_[j][k]) * zk;
        return s;
    }
    int correction_degree(int j) const { return static_cast<int>(coef_[j].size()) - 1; }

    // Slowly varying envelope W of chart j at Fermi coordinates (t, y):
    // v_j = e^{i lambda t} W, including eta_j^2 and the cutoff.
    cplx envelope(const FermiChart& c, double t, double y) const {
        if (std::abs(y) >= y_lim_ || std::abs(y) >= delta_ / 2) return 0;
        const double eta = c.eta(t);
        if (eta == 0) return 0;
        const detail::Hermite w(0, track_->h(), track_->size(), t);
        const cplx h = w(H_, dH_);
        const double z = std::sqrt(lambda_) * y;
        cplx p = 0, scale = 1;
        for (int j = 0; j <= opt_.q_terms; ++j, scale /= lambda_) {
            cplx s = 0, zk = 1;
            for (size_t k = 0; k < coef_[j].size(); ++k, zk *= z)
                if (!coef_[j][k].empty()) s += w(coef_[j][k], dcoef_[j][k]) * zk;
            p += scale * s;
        }
        const cplx E = std::exp(cplx(0, 0.5) * h * z * z);
        return std::pow(2 * lambda_, 0.25) * eta * eta * chi(y / delta_) * E * p;
    }

    cplx chart_value(const FermiChart& c, double t, double y) const {
        return std::exp(cplx(0, lambda_ * t)) * envelope(c, t, y);
    }

    // Full field v(x) = sum_j eta_j^2 v_j.
    cplx operator()(const Vec2& x) const {
        cplx s = 0;
        for (const auto& c : charts_) {
            if (!near(x, c, 0)) continue;
            const auto ty = c.coords(x);
            if (ty) s += chart_value(c, ty->first, ty->second);
        }
        return s;
    }

    // Cheap test whether x can be within |y| < y_lim + margin of chart c.
    bool near(const Vec2& x, const FermiChart& c, double margin) const {
        const double reach = std::min(y_lim_, delta_ / 2) + margin;
        if (track_->metric().is_flat()) {
            const auto ty = c.coords(x);
            return ty && std::abs(ty->second) < reach;
        }
        const double r = reach / gmin_ + 2 * track_->h();
        const size_t stride = std::max<size_t>(1, track_->size() / 256);
        const double coarse = r + stride * track_->h() * gmax_;
        const size_t a = static_cast<size_t>(std::max(0.0, std::floor(c.t_lo / track_->h())));
        const size_t b = std::min(track_->size() - 1, static_cast<size_t>(std::ceil(c.t_hi / track_->h())));
        for (size_t k = a; k <= b; k += stride)
            if ((track_->x(k) - x).norm() < coarse) return true;
        return (track_->x(b) - x).norm() < coarse;
    }

    // Transverse mass at fixed t: int |v(t, y)|^2 dy by composite Simpson.
    double cross_section_mass(double t, int n = 4001) const {
        double ym = std::min(y_lim_, delta_ / 2);
        double s = 0;
        const double h = 2 * ym / (n - 1);
        for (const auto& c : charts_)
            for (int k = 0; k < n; ++k) {
                const double y = -ym + k * h;
                const double w = (k == 0 || k == n - 1) ? 1 : (k % 2 ? 4 : 2);
                s += w * std::norm(envelope(c, t, y));
            }
        return s * h / 3;
    }

    // ||dPhi|^2_g - 1| for the quadratic phase Phi = t + H y^2 / 2 at (t, y).
    double eikonal_defect(double t, double y) const {
        const FermiChart& c = charts_.front();
        const Vec2 x = c.map(t, y);
        const MetricField& m = track_->metric();
        const double s = 1e-5 * m.rho();
        std::pair<double, double> guess{t, y};
        auto Phi = [&](const Vec2& p) {
            const auto ty = c.coords(p, &guess);
            if (!ty) throw RangeError("eikonal_defect: point left the chart");
            return ty->first + 0.5 * H(ty->first) * ty->second * ty->second;
        };
        Eigen::Vector2cd d;
        for (int i = 0; i < 2; ++i) {
            Vec2 e = Vec2::Zero();
            e[i] = s;
            d[i] = (-Phi(x + 2 * e) + 8.0 * Phi(x + e) - 8.0 * Phi(x - e) + Phi(x - 2 * e)) / (12 * s);
        }
        const Mat2 gi = m.ginv(x);
        const cplx q = d.transpose() * gi.cast<cplx>() * d;
        return std::abs(q - 1.0);
    }

    nlohmann::json header() const {
        return {{"kind", "quasimode"},
                {"lambda", lambda_},
                {"a", opt_.a},
                {"c_delta", opt_.c_delta},
                {"delta", delta_},
                {"q_terms", opt_.q_terms},
                {"charts", charts_.size()},
                {"metric", track_->metric().id()},
                {"t_in", track_->t_in()},
                {"t_out", track_->t_out()},
                {"normalization", "(2 lambda)^(1/4)"}};
    }

private:
    void build_profile(const MetricField& m) {
        const size_t n = track_->size();
        const double h = track_->h();
        const std::vector<double> t = track_->times();
        const size_t i0 = static_cast<size_t>(std::llround(track_->t_mid() / h));
        auto F = [&](double s) {
            RMatN<1> f;
            f(0, 0) = m.is_flat() ? 0.0 : -m.curvature(track_->position(s));
            return f;
        };
        CMatN<1> H0;
        H0(0, 0) = opt_.H0;
        ric_ = riccati_solve<1>(F, H0, t, i0);
        amp_ = amplitude_solve(ric_);
        H_.resize(n);
        dH_.resize(n);
        std::vector<double> K(n), q0(n, 0.0);
        double min_im = std::numeric_limits<double>::infinity();
        for (size_t k = 0; k < n; ++k) {
            H_[k] = ric_.H[k](0, 0);
            dH_[k] = ric_.dH(k)(0, 0);
            K[k] = -ric_.F[k](0, 0);
            if (opt_.potential) q0[k] = opt_.potential(track_->x(k));
            if (track_->t(k) >= track_->t_in() && track_->t(k) <= track_->t_out()) min_im = std::min(min_im, H_[k].imag());
        }
        if (!(min_im < std::numeric_limits<double>::infinity())) min_im = ric_.min_im();
        y_lim_ = std::sqrt(2 * opt_.gauss_cut / (lambda_ * min_im));
        gmin_ = std::numeric_limits<double>::infinity();
        gmax_ = 0;
        for (size_t k = 0; k < n; k += std::max<size_t>(1, n / 256)) {
            Eigen::SelfAdjointEigenSolver<Mat2> es(m.g(track_->x(k)));
            gmin_ = std::min(gmin_, std::sqrt(es.eigenvalues()[0]));
            gmax_ = std::max(gmax_, std::sqrt(es.eigenvalues()[1]));
        }
        gmin_ *= 0.5;
        const std::vector<double> dK = detail::derivative(K, h);
        std::vector<cplx> ddH(n);
        for (size_t k = 0; k < n; ++k) ddH[k] = -dK[k] - 2.0 * H_[k] * dH_[k];

        const int N = opt_.q_terms;
        coef_.assign(N + 1, {});
        dcoef_.assign(N + 1, {});
        ddcoef_.assign(N + 1, {});
        coef_[0].assign(1, amp_.a00);
        dcoef_[0].assign(1, std::vector<cplx>(n));
        ddcoef_[0].assign(1, std::vector<cplx>(n));
        for (size_t k = 0; k < n; ++k) {
            dcoef_[0][0][k] = -0.5 * H_[k] * amp_.a00[k];
            ddcoef_[0][0][k] = (-0.5 * dH_[k] + 0.25 * H_[k] * H_[k]) * amp_.a00[k];
        }
        for (int j = 1; j <= N; ++j) {
            // Right side R_j = -(P0 p_{j-1} + P_{-1} p_{j-2}) as z-polynomials per sample.
            using Poly = std::vector<cplx>;
            std::vector<Poly> R(n);
            for (size_t k = 0; k < n; ++k) {
                Poly r = apply_P0(j - 1, k, K[k], dK[k], q0[k], dH_[k], ddH[k]);
                if (j >= 2) add_to(r, apply_Pm1(j - 2, k, K[k], dH_[k], ddH[k]));
                for (auto& c : r) c = -c;
                R[k] = std::move(r);
            }
            size_t deg = 0;
            for (const auto& r : R) deg = std::max(deg, r.size() - 1);
            coef_[j].assign(deg + 1, {});
            dcoef_[j].assign(deg + 1, {});
            ddcoef_[j].assign(deg + 1, {});
            for (int d = static_cast<int>(deg); d >= 0; --d) {
                std::vector<cplx> f(n);
                bool any = false;
                for (size_t k = 0; k < n; ++k) {
                    cplx rk = static_cast<size_t>(d) < R[k].size() ? R[k][d] : 0.0;
                    if (static_cast<size_t>(d + 2) <= deg && !coef_[j][d + 2].empty())
                        rk += double((d + 2) * (d + 1)) * coef_[j][d + 2][k];
                    f[k] = cplx(0, 0.5) * rk;
                    if (f[k] != 0.0) any = true;
                }
                if (!any) continue;
                // b' = f - (2d+1)/2 H b, b(t0) = 0; integrating factor (a00 / a00(t0))^{2d+1}.
                std::vector<cplx> G(n), g(n);
                for (size_t k = 0; k < n; ++k) {
                    G[k] = std::pow(amp_.a00[k] / amp_.a00[i0], 2 * d + 1);
                    g[k] = f[k] / G[k];
                }
                const auto I = detail::cumulative(g, h, i0);
                std::vector<cplx> b(n), db(n);
                for (size_t k = 0; k < n; ++k) {
                    b[k] = G[k] * I[k];
                    db[k] = f[k] - 0.5 * (2 * d + 1) * H_[k] * b[k];
                }
                ddcoef_[j][d] = detail::derivative(db, h);
                coef_[j][d] = std::move(b);
                dcoef_[j][d] = std::move(db);
            }
        }
    }

    static void add_to(std::vector<cplx>& a, const std::vector<cplx>& b) {
        if (a.size() < b.size()) a.resize(b.size(), 0.0);
        for (size_t i = 0; i < b.size(); ++i) a[i] += b[i];
    }
    static void add_shift(std::vector<cplx>& a, const std::vector<cplx>& b, int shift, cplx c) {
        for (size_t i = 0; i < b.size(); ++i) {
            const size_t d = i + shift;
            if (a.size() <= d) a.resize(d + 1, 0.0);
            a[d] += c * b[i];
        }
    }

    // Coefficient vectors of p, p_t, p_tt, p_z for correction j at sample k.
    void jets(int j, size_t k, std::vector<cplx>& p, std::vector<cplx>& pt, std::vector<cplx>& ptt,
              std::vector<cplx>& pz) const {
        const size_t m = coef_[j].size();
        p.assign(m, 0.0);
        pt.assign(m, 0.0);
        ptt.assign(m, 0.0);
        pz.assign(m, 0.0);
        for (size_t d = 0; d < m; ++d) {
            if (coef_[j][d].empty()) continue;
            p[d] = coef_[j][d][k];
            pt[d] = dcoef_[j][d][k];
            ptt[d] = ddcoef_[j][d][k];
            if (d > 0) pz[d - 1] = double(d) * p[d];
        }
    }

    // E^{-1} d_t(E p), E^{-1} d_tt(E p), E^{-1} d_z(E p) with E = exp(i H z^2 / 2).
    void e_derivs(int j, size_t k, cplx dH, cplx ddH, std::vector<cplx>& p, std::vector<cplx>& Dt,
                  std::vector<cplx>& Dtt, std::vector<cplx>& Dz) const {
        std::vector<cplx> pt, ptt, pz;
        jets(j, k, p, pt, ptt, pz);
        const cplx I(0, 1);
        Dt = pt;
        add_shift(Dt, p, 2, 0.5 * I * dH);
        Dtt = ptt;
        add_shift(Dtt, pt, 2, I * dH);
        add_shift(Dtt, p, 2, 0.5 * I * ddH);
        add_shift(Dtt, p, 4, -0.25 * dH * dH);
        Dz = pz;
        add_shift(Dz, p, 1, I * H_[k]);
    }

    // P0 = -d_tt - 2i K z^2 d_t + (2/3) K^2 z^4 - (i/2) K' z^2 + K z d_z + q.
    std::vector<cplx> apply_P0(int j, size_t k, double K, double dK, double q, cplx dH, cplx ddH) const {
        std::vector<cplx> p, Dt, Dtt, Dz, out;
        e_derivs(j, k, dH, ddH, p, Dt, Dtt, Dz);
        const cplx I(0, 1);
        add_shift(out, Dtt, 0, -1.0);
        if (K != 0 || dK != 0) {
            add_shift(out, Dt, 2, -2.0 * I * K);
            add_shift(out, p, 4, 2.0 / 3 * K * K);
            add_shift(out, p, 2, -0.5 * I * dK);
            add_shift(out, Dz, 1, K);
        }
        if (q != 0) add_shift(out, p, 0, q);
        return out;
    }

    // P_{-1} = (17/45) K^3 z^6 - (4i/3) K^2 z^4 d_t - K z^2 d_tt + (1/3) K^2 z^3 d_z.
    std::vector<cplx> apply_Pm1(int j, size_t k, double K, cplx dH, cplx ddH) const {
        std::vector<cplx> out;
        if (K == 0) return out;
        std::vector<cplx> p, Dt, Dtt, Dz;
        e_derivs(j, k, dH, ddH, p, Dt, Dtt, Dz);
        const cplx I(0, 1);
        add_shift(out, p, 6, 17.0 / 45 * K * K * K);
        add_shift(out, Dt, 4, -4.0 / 3 * I * K * K);
        add_shift(out, Dtt, 2, -K);
        add_shift(out, Dz, 3, K * K / 3);
        return out;
    }

    double lambda_;
    BeamOptions opt_;
    double delta_ = 0, y_lim_ = 0, gmin_ = 1, gmax_ = 1;
    std::shared_ptr<const BeamTrack> track_;
    std::vector<FermiChart> charts_;
    RiccatiSolution<1> ric_;
    AmplitudeSolution amp_;
    std::vector<cplx> H_, dH_;
    // coef_[j][d] holds b_jd(t) samples (empty when identically zero)
    std::vector<std::vector<std::vector<cplx>>> coef_, dcoef_, ddcoef_;
};

// ---------------------------------------------------------------------------
// Mesh quadrature.

namespace detail {

struct TriRule {
    std::array<std::array<double, 3>, 7> bary;
    std::array<double, 7> w;
};

// 7-point degree-5 rule.
inline const TriRule& tri_rule() {
    static const TriRule r = [] {
        TriRule t;
        const double a1 = 0.059715871789770, b1 = 0.470142064105115;
        const double a2 = 0.797426985353087, b2 = 0.101286507323456;
        const double w1 = 0.132394152788506, w2 = 0.125939180544827;
        t.bary = {{{1.0 / 3, 1.0 / 3, 1.0 / 3}, {a1, b1, b1}, {b1, a1, b1}, {b1, b1, a1}, {a2, b2, b2}, {b2, a2, b2},
                   {b2, b2, a2}}};
        t.w = {0.225, w1, w1, w1, w2, w2, w2};
        return t;
    }();
    return r;
}

// sum over kept triangles of int f dV_g; f(x) is complex.
template <class F, class Keep>
cplx integrate_mesh(const MetricField& m, const Mesh& mesh, F&& f, Keep&& keep) {
    const TriRule& R = tri_rule();
    const size_t nt = mesh.triangles.size();
    int nw = thread_count();
    if (nw <= 0) nw = std::max(1u, std::thread::hardware_concurrency());
    const size_t chunks = std::min<size_t>(nt, static_cast<size_t>(nw) * 16);
    std::vector<cplx> part(chunks, 0.0);
    parallel_for(chunks, [&](size_t c) {
        cplx s = 0;
        for (size_t i = nt * c / chunks; i < nt * (c + 1) / chunks; ++i) {
            const auto& T = mesh.triangles[i];
            const Vec2 &A = mesh.vertices[T[0]], &B = mesh.vertices[T[1]], &C = mesh.vertices[T[2]];
            if (!keep(A, B, C)) continue;
            const double area = 0.5 * std::abs((B - A)[0] * (C - A)[1] - (B - A)[1] * (C - A)[0]);
            cplx e = 0;
            for (int q = 0; q < 7; ++q) {
                const Vec2 x = R.bary[q][0] * A + R.bary[q][1] * B + R.bary[q][2] * C;
                e += R.w[q] * f(x) * m.sqrt_detg(x);
            }
            s += area * e;
        }
        part[c] = s;
    });
    cplx s = 0;
    for (const auto& p : part) s += p;
    return s;
}

inline Eigen::VectorXd lumped_volume(const MetricField& m, const Mesh& mesh) {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(mesh.n_vertices()));
    for (const auto& T : mesh.triangles) {
        const Vec2 &A = mesh.vertices[T[0]], &B = mesh.vertices[T[1]], &C = mesh.vertices[T[2]];
        const double area = 0.5 * std::abs((B - A)[0] * (C - A)[1] - (B - A)[1] * (C - A)[0]);
        const double v = area * m.sqrt_detg((A + B + C) / 3) / 3;
        for (int k : T) w[k] += v;
    }
    return w;
}

inline void check_beam_resolution(const Mesh& mesh, double lambda) {
    if (lambda * mesh.h_metric > 2 * kPi / 10) {
        std::ostringstream os;
        os << "mesh too coarse for lambda = " << lambda << ": lambda * h = " << lambda * mesh.h_metric
           << " exceeds 2 pi / 10 (fewer than 10 mesh points per wavelength)";
        throw ResolutionError(os.str());
    }
}

} // namespace detail

// Quasimode with its values on the mesh vertices.
struct MeshQuasimode {
    std::shared_ptr<const Quasimode> field;
    Eigen::VectorXcd values;
    std::string mesh_hash;

    void write_csv(std::ostream& os) const {
        os << "vertex,re,im\n" << std::setprecision(17);
        for (Eigen::Index k = 0; k < values.size(); ++k)
            os << k << ',' << values[k].real() << ',' << values[k].imag() << '\n';
    }
    nlohmann::json header() const {
        auto j = field->header();
        j["mesh_hash"] = mesh_hash;
        j["vertices"] = values.size();
        j["layout"] = "vertex,re,im";
        return j;
    }
};

inline MeshQuasimode assemble_quasimode(const MetricField& m, const GeodesicPath& gamma, double lambda,
                                        const Mesh& mesh, BeamOptions opt = {}) {
    detail::check_beam_resolution(mesh, lambda);
    MeshQuasimode q;
    q.field = std::make_shared<const Quasimode>(m, gamma, lambda, opt);
    q.mesh_hash = mesh.hash;
    q.values = Eigen::VectorXcd::Zero(static_cast<Eigen::Index>(mesh.n_vertices()));
    const Quasimode& v = *q.field;
    parallel_for(mesh.n_vertices(), [&](size_t k) { q.values[k] = v(mesh.vertices[k]); });
    return q;
}

inline MeshQuasimode assemble_quasimode(const MetricField& m, const GeodesicPath& gamma, double lambda, double a,
                                        int q_terms, const Mesh& mesh, BeamOptions opt = {}) {
    opt.a = a;
    opt.q_terms = q_terms;
    return assemble_quasimode(m, gamma, lambda, mesh, opt);
}

// ---------------------------------------------------------------------------
// Strong-form residual L v = -Delta_g v + (q - lambda^2) v at mesh vertices.
//
// Per chart v_j = e^{i lambda t} W with W slowly varying on the 1/sqrt(lambda)
// scale, so L v_j = e^{i lambda t}[-Delta W - 2i lambda <dt, dW> - i lambda
// (Delta t) W + lambda^2 (|dt|^2 - 1) W + q W]; W is differenced with 6th-order
// stencils at step 0.01 / sqrt(lambda), t analytically (flat) or with 4th-order
// stencils at 1e-3 rho.

struct ResidualResult {
    Eigen::VectorXcd field;
    double l2 = 0;
};

namespace detail {

inline cplx chart_residual(const Quasimode& v, const FermiChart& c, const Vec2& x, double qx) {
    const MetricField& m = v.track().metric();
    const auto c0 = c.coords(x);
    if (!c0) return 0;
    const double lam = v.lambda();
    const Mat2 gi = m.ginv(x);
    const double gscale = std::sqrt(std::max(m.g(x)(0, 0), m.g(x)(1, 1)));
    const double s = 0.01 / (std::sqrt(lam) * gscale);
    auto W = [&](const Vec2& p) -> cplx {
        const auto ty = c.coords(p, &*c0);
        if (!ty) return 0;
        return v.envelope(c, ty->first, ty->second);
    };
    // 6th-order axis stencils
    static constexpr double d1[7] = {-1, 9, -45, 0, 45, -9, 1};
    static constexpr double d2[7] = {2, -27, 270, -490, 270, -27, 2};
    const cplx W0 = W(x);
    Eigen::Vector2cd dW;
    Eigen::Matrix2cd ddW;
    for (int i = 0; i < 2; ++i) {
        Vec2 e = Vec2::Zero();
        e[i] = s;
        cplx a = 0, b = 0;
        for (int k = -3; k <= 3; ++k) {
            const cplx f = k == 0 ? W0 : W(x + k * e);
            a += d1[k + 3] * f;
            b += d2[k + 3] * f;
        }
        dW[i] = a / (60 * s);
        ddW(i, i) = b / (180 * s * s);
    }
    if (std::abs(gi(0, 1)) > 1e-14 * gi.norm()) {
        cplx mix = 0;
        for (int a = -3; a <= 3; ++a)
            for (int b = -3; b <= 3; ++b) {
                if (a == 0 || b == 0) continue;
                mix += d1[a + 3] * d1[b + 3] * W(x + Vec2(a * s, b * s));
            }
        ddW(0, 1) = ddW(1, 0) = mix / (3600 * s * s);
    } else {
        ddW(0, 1) = ddW(1, 0) = 0;
    }
    const Christoffel G = m.christoffel(x);
    Vec2 bvec; // -g^{ij} Gamma^k_ij
    for (int k = 0; k < 2; ++k) bvec[k] = -(gi.cwiseProduct(G[k])).sum();
    const cplx lapW = (gi.cast<cplx>().cwiseProduct(ddW)).sum() + bvec.cast<cplx>().dot(dW);

    Vec2 dt;
    double lapt = 0;
    if (W0 == 0.0 && dW.squaredNorm() == 0.0) return 0;
    if (m.is_flat()) {
        dt = m.g(x) * c.track->v(0);
    } else {
        const double st = 1e-3 * m.rho();
        auto T = [&](const Vec2& p) {
            const auto ty = c.coords(p, &*c0);
            if (!ty) throw RangeError("residual stencil left the chart");
            return ty->first;
        };
        Mat2 ddt = Mat2::Zero();
        const double t0 = c0->first;
        for (int i = 0; i < 2; ++i) {
            Vec2 e = Vec2::Zero();
            e[i] = st;
            const double p1 = T(x + e), m1 = T(x - e), p2 = T(x + 2 * e), m2 = T(x - 2 * e);
            dt[i] = (-p2 + 8 * p1 - 8 * m1 + m2) / (12 * st);
            ddt(i, i) = (-p2 + 16 * p1 - 30 * t0 + 16 * m1 - m2) / (12 * st * st);
        }
        if (std::abs(gi(0, 1)) > 1e-14 * gi.norm())
            ddt(0, 1) = ddt(1, 0) =
                (T(x + Vec2(st, st)) - T(x + Vec2(st, -st)) - T(x + Vec2(-st, st)) + T(x + Vec2(-st, -st))) /
                (4 * st * st);
        lapt = gi.cwiseProduct(ddt).sum() + bvec.dot(dt);
    }
    const cplx I(0, 1);
    const cplx dtdW = (gi * dt).cast<cplx>().dot(dW); // dot conjugates the first argument, which is real
    const double eik = dt.dot(gi * dt) - 1;
    const cplx R = -lapW - 2.0 * I * lam * dtdW - I * lam * lapt * W0 + lam * lam * eik * W0 + qx * W0;
    return std::exp(I * (lam * c0->first)) * R;
}

} // namespace detail

inline ResidualResult pde_residual(const MetricField& m, const ScalarField& q, const Quasimode& v, const Mesh& mesh) {
    detail::check_beam_resolution(mesh, v.lambda());
    ResidualResult out;
    out.field = Eigen::VectorXcd::Zero(static_cast<Eigen::Index>(mesh.n_vertices()));
    const double margin = 0.1 / std::sqrt(v.lambda());
    parallel_for(mesh.n_vertices(), [&](size_t k) {
        const Vec2& x = mesh.vertices[k];
        const double qx = q ? q(x) : 0.0;
        cplx r = 0;
        for (const auto& c : v.charts()) {
            if (!v.near(x, c, margin)) continue;
            r += detail::chart_residual(v, c, x, qx);
        }
        out.field[k] = r;
    });
    const Eigen::VectorXd w = detail::lumped_volume(m, mesh);
    double s = 0;
    for (Eigen::Index k = 0; k < w.size(); ++k) s += w[k] * std::norm(out.field[k]);
    out.l2 = std::sqrt(s);
    return out;
}

inline ResidualResult pde_residual(const MetricField& m, const ScalarField& q, const MeshQuasimode& v,
                                   const Mesh& mesh) {
    if (v.mesh_hash != mesh.hash) throw ArgumentError("pde_residual: quasimode was assembled on another mesh");
    return pde_residual(m, q, *v.field, mesh);
}

// ---------------------------------------------------------------------------
// Concentration and cross terms.

// int phi ds along the part of the track inside M (Gauss-Legendre panels).
inline double line_integral(const BeamTrack& tr, const ScalarField& phi, int panels = 128) {
    std::vector<double> gx, gw;
    gauss_legendre(8, gx, gw);
    const double a = tr.t_in(), b = tr.t_out(), L = (b - a) / panels;
    double s = 0;
    for (int p = 0; p < panels; ++p)
        for (int k = 0; k < 8; ++k) s += 0.5 * L * gw[k] * phi(tr.position(a + L * (p + 0.5 * (gx[k] + 1))));
    return s;
}

struct ConcentrationResult {
    double integral = 0; // int_M phi |v|^2 dV_g
    double line = 0;     // I phi(gamma)
    double gap = 0;
};

namespace detail {

inline auto tube_filter(const Quasimode& v, double margin) {
    return [&v, margin](const Vec2& A, const Vec2& B, const Vec2& C) {
        const Vec2 c = (A + B + C) / 3;
        const double r = std::max({(A - c).norm(), (B - c).norm(), (C - c).norm()});
        if (c.norm() > v.track().metric().rho() * (1 + 1e-9)) return false;
        for (const auto& ch : v.charts())
            if (v.near(c, ch, margin + 2 * r)) return true;
        return false;
    };
}

} // namespace detail

inline ConcentrationResult concentration_test(const MetricField& m, const Quasimode& v, const ScalarField& phi,
                                              const Mesh& mesh) {
    detail::check_beam_resolution(mesh, v.lambda());
    ConcentrationResult r;
    r.integral = detail::integrate_mesh(
                     m, mesh, [&](const Vec2& x) { return cplx(phi(x) * std::norm(v(x))); },
                     detail::tube_filter(v, 0.0))
                     .real();
    r.line = line_integral(v.track(), phi);
    r.gap = r.integral - r.line;
    return r;
}

struct CrossTermResult {
    cplx value = 0;
    double angle_deg = std::numeric_limits<double>::quiet_NaN(); // NaN when the tracks do not meet in M
    bool warned = false;
};

inline CrossTermResult cross_term_test(const MetricField& m, const Quasimode& v1, const Quasimode& v2,
                                       const ScalarField& phi, const Mesh& mesh, std::ostream* log = nullptr) {
    detail::check_beam_resolution(mesh, std::max(v1.lambda(), v2.lambda()));
    const BeamTrack &a = v1.track(), &b = v2.track();
    // Refuse coincident geodesics (either orientation).
    bool same = true;
    for (int k = 0; k <= 16 && same; ++k) {
        const Vec2 p = a.position(a.t_end() * k / 16);
        double d = std::numeric_limits<double>::infinity();
        for (size_t i = 0; i < b.size(); ++i) d = std::min(d, (b.x(i) - p).norm());
        if (d > 1e-6 * m.rho() + b.h()) same = false;
    }
    if (same) throw ArgumentError("cross_term_test: gamma1 and gamma2 are the same geodesic; not a cross term");
    CrossTermResult r;
    double best = std::numeric_limits<double>::infinity();
    size_t bi = 0, bj = 0;
    for (size_t i = 0; i < a.size(); i += 4)
        for (size_t j = 0; j < b.size(); j += 4) {
            const double d = (a.x(i) - b.x(j)).squaredNorm();
            if (d < best) best = d, bi = i, bj = j;
        }
    if (std::sqrt(best) < 8 * std::max(a.h(), b.h()) && a.x(bi).norm() <= m.rho()) {
        const Vec2 p = a.x(bi);
        const double c = std::abs(m.inner(p, a.v(bi), b.v(bj)));
        r.angle_deg = std::acos(std::min(1.0, c)) * 180 / kPi;
        if (r.angle_deg < 10) {
            r.warned = true;
            if (log) *log << "warning: cross_term_test: near-tangential intersection (" << r.angle_deg
                          << " deg < 10 deg); non-stationary phase bound is poorly conditioned\n";
        }
    }
    const double margin = 0.0;
    auto keep1 = detail::tube_filter(v1, margin);
    auto keep2 = detail::tube_filter(v2, margin);
    r.value = detail::integrate_mesh(
        m, mesh, [&](const Vec2& x) { return phi(x) * v1(x) * std::conj(v2(x)); },
        [&](const Vec2& A, const Vec2& B, const Vec2& C) { return keep1(A, B, C) && keep2(A, B, C); });
    return r;
}

// Sweep record for external plotting.
struct BeamSweepRow {
    double lambda = 0, delta = 0, mass = 0, gap = 0, residual = 0;
    double cross = std::numeric_limits<double>::quiet_NaN();
};

inline nlohmann::json sweep_json(const std::vector<BeamSweepRow>& rows) {
    nlohmann::json a = nlohmann::json::array();
    for (const auto& r : rows) {
        nlohmann::json j{{"lambda", r.lambda}, {"delta", r.delta}, {"mass", r.mass}, {"gap", r.gap},
                         {"residual", r.residual}};
        if (std::isfinite(r.cross)) j["cross"] = r.cross;
        a.push_back(j);
    }
    return a;
}

struct BeamSweepOptions {
    BeamOptions beam;
    double lambda_h = 0.6;   // mesh per lambda with lambda * h_metric <= lambda_h
    double h = 0;            // fixed chart mesh size instead (resolution guard applies)
    ScalarField q;           // potential in the residual
    ScalarField phi;         // concentration weight; empty means 1
    bool cross = true;       // cross term against the geodesic rotated by cross_angle
    double cross_angle = kPi / 2;
    ScalarField cross_phi;   // empty means exp(-|x|^2)
    std::ostream* log = nullptr;
};

// Concentration gap, cross-section mass, residual and cross term per lambda.
// The rotated partner geodesic assumes a rotationally symmetric metric.
inline std::vector<BeamSweepRow> beam_sweep(const MetricField& m, const GeodesicPath& gamma,
                                            const std::vector<double>& lambdas, const BeamSweepOptions& opt = {}) {
    const ScalarField one = [](const Vec2&) { return 1.0; };
    const ScalarField phi = opt.phi ? opt.phi : one;
    const ScalarField cphi = opt.cross_phi ? opt.cross_phi : ScalarField([](const Vec2& x) {
        return std::exp(-x.squaredNorm());
    });
    GeodesicPath partner = gamma;
    if (opt.cross) {
        const double c = std::cos(opt.cross_angle), s = std::sin(opt.cross_angle);
        const Mat2 R = (Mat2() << c, -s, s, c).finished();
        partner.x = {R * gamma.x[0]};
        partner.v = {R * gamma.v[0]};
    }
    std::vector<BeamSweepRow> rows;
    for (double lam : lambdas) {
        const Mesh mesh = opt.h > 0 ? build_mesh(m, opt.h) : mesh_for(m, lam, opt.lambda_h);
        detail::check_beam_resolution(mesh, lam);
        const Quasimode v(m, gamma, lam, opt.beam);
        BeamSweepRow r;
        r.lambda = lam;
        r.delta = v.delta();
        const auto c1 = concentration_test(m, v, one, mesh);
        r.mass = c1.integral / c1.line;
        r.gap = opt.phi ? concentration_test(m, v, phi, mesh).gap : c1.gap;
        r.residual = pde_residual(m, opt.q, v, mesh).l2;
        if (opt.cross) {
            const Quasimode w(m, partner, lam, opt.beam);
            r.cross = std::abs(cross_term_test(m, v, w, cphi, mesh, opt.log).value);
        }
        if (opt.log)
            *opt.log << "beam: lambda = " << lam << " vertices " << mesh.n_vertices() << " gap " << r.gap
                     << " residual " << r.residual << "\n";
        rows.push_back(r);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Geometrical-optics solutions e^{i sign lambda r} |g|^{-1/4} b(theta) on a
// simple manifold, in polar normal coordinates about y on the boundary of M1.
// |g|^{1/2} = J(r, theta) is the Jacobi field J'' + K J = 0, J(0) = 0, J'(0) = 1.

class GOSolution {
public:
    struct Polar {
        double r = 0, theta = 0, J = 0;
    };

    GOSolution(const MetricField& m, const Vec2& y, std::function<double(double)> b, double lambda, int sign,
               int steps = 400)
        : m_(std::make_shared<MetricField>(m)), y_(y), b_(std::move(b)), lambda_(lambda), sign_(sign),
          steps_(steps) {
        if (sign != 1 && sign != -1) throw ArgumentError("GOSolution: sign must be +1 or -1");
        if (!(lambda > 0)) throw ArgumentError("GOSolution: lambda must be positive");
        if (!b_) throw ArgumentError("GOSolution: angular profile missing");
        if (std::abs(y.norm() - m.rho1()) > 1e-9 * m.rho1())
            throw ArgumentError("GOSolution: center must lie on the boundary of M1");
        const auto fr = m.frame(y, Vec2(-y / y.norm()));
        e1_ = fr.first;
        e2_ = fr.second;
    }

    const Vec2& center() const { return y_; }
    double lambda() const { return lambda_; }
    int sign() const { return sign_; }
    const MetricField& metric() const { return *m_; }

    // Initial g-unit direction for angle theta from the inward normal.
    Vec2 direction(double theta) const { return std::cos(theta) * e1_ + std::sin(theta) * e2_; }

    Polar polar(const Vec2& x) const {
        const MetricField& m = *m_;
        const Vec2 d = x - y_;
        if (m.is_flat()) {
            Polar p;
            p.r = m.norm(y_, d);
            p.theta = std::atan2(m.inner(y_, d, e2_), m.inner(y_, d, e1_));
            p.J = p.r;
            return p;
        }
        double r = std::sqrt(d.dot(m.g(0.5 * (x + y_)) * d));
        double th = std::atan2(m.inner(y_, d, e2_), m.inner(y_, d, e1_));
        for (int it = 0; it < 60; ++it) {
            Shot s;
            try {
                s = shoot(r, th);
            } catch (const DomainError&) {
                r *= 0.9;
                continue;
            }
            const Vec2 res = s.x - x;
            if (res.norm() < 1e-13 * m.rho()) {
                if (s.conjugate || s.J <= 1e-8 * r) {
                    std::ostringstream os;
                    os << "polar_coords: geodesic from y to x = (" << x[0] << ", " << x[1]
                       << ") passes a conjugate point; metric not simple";
                    throw NonSimpleError(os.str());
                }
                return {r, th, s.J};
            }
            const double dth = 1e-7;
            Mat2 Jm;
            try {
                Jm.col(0) = s.v;
                Jm.col(1) = (shoot(r, th + dth).x - shoot(r, th - dth).x) / (2 * dth);
            } catch (const DomainError&) {
                r *= 0.99;
                continue;
            }
            Vec2 delta = Jm.fullPivLu().solve(-res);
            const double lim = 0.25 * m.rho();
            if (delta.norm() > lim) delta *= lim / delta.norm();
            r = std::max(r + delta[0], 1e-9 * m.rho());
            th += delta[1];
        }
        std::ostringstream os;
        os << "polar_coords: shooting from y = (" << y_[0] << ", " << y_[1] << ") to x = (" << x[0] << ", " << x[1]
           << ") did not converge; metric not simple";
        throw NonSimpleError(os.str());
    }

    double phase(const Vec2& x) const { return sign_ * polar(x).r; }
    cplx amplitude(const Vec2& x) const {
        const Polar p = polar(x);
        return b_(p.theta) / std::sqrt(p.J);
    }
    cplx operator()(const Vec2& x) const {
        const Polar p = polar(x);
        return std::exp(cplx(0, sign_ * lambda_ * p.r)) * b_(p.theta) / std::sqrt(p.J);
    }
    double profile(double theta) const { return b_(theta); }

private:
    struct Shot {
        Vec2 x, v;
        double J = 0;
        bool conjugate = false;
    };

    // Fixed-step RK4 of the geodesic and its Jacobi field, so the result is
    // smooth in (r, theta).
    Shot shoot(double r, double theta) const {
        const MetricField& m = *m_;
        Vec2 x = y_, v = direction(theta);
        double J = 0, dJ = 1;
        bool conj = false;
        const double h = r / steps_;
        auto acc = [&](const Vec2& p, const Vec2& w) {
            const Christoffel G = m.christoffel(p);
            return Vec2(-w.dot(G[0] * w), -w.dot(G[1] * w));
        };
        for (int k = 0; k < steps_; ++k) {
            const Vec2 a1 = acc(x, v);
            const double j1 = -m.curvature(x) * J;
            const Vec2 x2 = x + h / 2 * v, v2 = v + h / 2 * a1;
            const double J2 = J + h / 2 * dJ, dJ2 = dJ + h / 2 * j1;
            const Vec2 a2 = acc(x2, v2);
            const double j2 = -m.curvature(x2) * J2;
            const Vec2 x3 = x + h / 2 * v2, v3 = v + h / 2 * a2;
            const double J3 = J + h / 2 * dJ2, dJ3 = dJ + h / 2 * j2;
            const Vec2 a3 = acc(x3, v3);
            const double j3 = -m.curvature(x3) * J3;
            const Vec2 x4 = x + h * v3, v4 = v + h * a3;
            const double J4 = J + h * dJ3, dJ4 = dJ + h * j3;
            const Vec2 a4 = acc(x4, v4);
            const double j4 = -m.curvature(x4) * J4;
            x += h / 6 * (v + 2 * v2 + 2 * v3 + v4);
            v += h / 6 * (a1 + 2 * a2 + 2 * a3 + a4);
            J += h / 6 * (dJ + 2 * dJ2 + 2 * dJ3 + dJ4);
            dJ += h / 6 * (j1 + 2 * j2 + 2 * j3 + j4);
            if (k + 1 < steps_ && J <= 0) conj = true;
        }
        return {x, v, J, conj};
    }

    std::shared_ptr<MetricField> m_;
    Vec2 y_, e1_, e2_;
    std::function<double(double)> b_;
    double lambda_;
    int sign_;
    int steps_;
};

inline GOSolution build_go_solution(const MetricField& m, const Vec2& y, std::function<double(double)> b,
                                    double lambda, int sign = 1) {
    return GOSolution(m, y, std::move(b), lambda, sign);
}

// Center on the boundary of M1 at chart angle phi.
inline GOSolution build_go_solution(const MetricField& m, double phi, std::function<double(double)> b, double lambda,
                                    int sign = 1) {
    return GOSolution(m, m.rho1() * Vec2(std::cos(phi), std::sin(phi)), std::move(b), lambda, sign);
}

namespace detail {

// 4th-order gradient and g-Laplacian of a complex function at x.
template <class F>
void fd_grad_lap(const MetricField& m, F&& f, const Vec2& x, double s, Eigen::Vector2cd& grad, cplx& lap) {
    const Mat2 gi = m.ginv(x);
    const cplx f0 = f(x);
    Eigen::Matrix2cd H;
    for (int i = 0; i < 2; ++i) {
        Vec2 e = Vec2::Zero();
        e[i] = s;
        const cplx p1 = f(x + e), m1 = f(x - e), p2 = f(x + 2 * e), m2 = f(x - 2 * e);
        grad[i] = (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12 * s);
        H(i, i) = (-p2 + 16.0 * p1 - 30.0 * f0 + 16.0 * m1 - m2) / (12 * s * s);
    }
    H(0, 1) = H(1, 0) = 0;
    if (std::abs(gi(0, 1)) > 1e-14 * gi.norm()) {
        static constexpr double w[4] = {1, -8, 8, -1};
        static constexpr int o[4] = {-2, -1, 1, 2};
        cplx mix = 0;
        for (int a = 0; a < 4; ++a)
            for (int b = 0; b < 4; ++b) mix += w[a] * w[b] * f(x + Vec2(o[a] * s, o[b] * s));
        H(0, 1) = H(1, 0) = mix / (144 * s * s);
    }
    const Christoffel G = m.christoffel(x);
    Eigen::Vector2cd bv;
    for (int k = 0; k < 2; ++k) bv[k] = -(gi.cwiseProduct(G[k])).sum();
    lap = (gi.cast<cplx>().cwiseProduct(H)).sum() + bv.dot(grad);
}

} // namespace detail

// |d phi|_g^2 - 1 by differences of the phase.
inline double eikonal_residual(const GOSolution& u, const Vec2& x, double step = 0) {
    const MetricField& m = u.metric();
    if (step <= 0) step = 1e-3 * m.rho();
    Eigen::Vector2cd gr;
    cplx lap;
    detail::fd_grad_lap(m, [&](const Vec2& p) { return cplx(u.phase(p)); }, x, step, gr, lap);
    const Vec2 g = gr.real();
    return g.dot(m.ginv(x) * g) - 1;
}

// T a = 2i <d phi, d a>_g + i (Delta_g phi) a by differences.
inline cplx transport_residual(const GOSolution& u, const Vec2& x, double step = 0) {
    const MetricField& m = u.metric();
    if (step <= 0) step = 1e-3 * m.rho();
    Eigen::Vector2cd gp, ga;
    cplx lp, la;
    detail::fd_grad_lap(m, [&](const Vec2& p) { return cplx(u.phase(p)); }, x, step, gp, lp);
    detail::fd_grad_lap(m, [&](const Vec2& p) { return u.amplitude(p); }, x, step, ga, la);
    const Mat2 gi = m.ginv(x);
    const cplx I(0, 1);
    const cplx inner = gp.real().cast<cplx>().dot(gi.cast<cplx>() * ga);
    return 2.0 * I * inner + I * lp * u.amplitude(x);
}

} // namespace geobeam

#endif // GEOBEAM_BEAM_HPP
