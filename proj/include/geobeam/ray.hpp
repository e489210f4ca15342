#ifndef GEOBEAM_RAY_HPP
#define GEOBEAM_RAY_HPP

#include "geobeam/geodesic.hpp"

#include <Eigen/Sparse>
#include <memory>
#include <optional>
#include <nlohmann/json.hpp>
#include <random>

namespace geobeam {

// Uniform cell-centred grid on the square [-half_width, half_width]^2.
struct GridSpec {
    int n = 64;
    double half_width = 1.2;

    double spacing() const { return 2 * half_width / n; }
    double cell_area() const { return spacing() * spacing(); }
    int index(int i, int j) const { return i * n + j; }
    Vec2 center(int i, int j) const {
        const double h = spacing();
        return {-half_width + (i + 0.5) * h, -half_width + (j + 0.5) * h};
    }
    Vec2 center(int k) const { return center(k / n, k % n); }
    int size() const { return n * n; }
    bool operator==(const GridSpec& o) const { return n == o.n && half_width == o.half_width; }
};

inline GridSpec grid_for(const MetricField& m, int n) { return {n, m.rho1()}; }

// Function sampled on a GridSpec, extended by zero outside the disk of radius
// `support` (rho1 of the metric).
struct GridFunction {
    GridSpec grid;
    double support = 0;
    std::string metric_id;
    Eigen::VectorXd values;

    bool in_mask(int k) const { return grid.center(k).norm() <= support; }

    static GridFunction zeros(const MetricField& m, int n) {
        GridFunction f;
        f.grid = grid_for(m, n);
        f.support = m.rho1();
        f.metric_id = m.id();
        f.values = Eigen::VectorXd::Zero(f.grid.size());
        return f;
    }

    static GridFunction sample(const MetricField& m, int n, const ScalarField& fn) {
        GridFunction f = zeros(m, n);
        for (int k = 0; k < f.grid.size(); ++k)
            if (f.in_mask(k)) f.values[k] = fn(f.grid.center(k));
        return f;
    }

    GridFunction like(Eigen::VectorXd v) const {
        GridFunction f = *this;
        f.values = std::move(v);
        for (int k = 0; k < grid.size(); ++k)
            if (!in_mask(k)) f.values[k] = 0;
        return f;
    }

    // Bilinear interpolation; cells beyond the grid contribute zero.
    double operator()(const Vec2& x) const {
        const double h = grid.spacing();
        const double fx = (x[0] + grid.half_width) / h - 0.5, fy = (x[1] + grid.half_width) / h - 0.5;
        const int i = static_cast<int>(std::floor(fx)), j = static_cast<int>(std::floor(fy));
        const double ax = fx - i, ay = fy - j;
        double s = 0;
        auto val = [&](int a, int b) {
            return (a < 0 || b < 0 || a >= grid.n || b >= grid.n) ? 0.0 : values[grid.index(a, b)];
        };
        s += (1 - ax) * (1 - ay) * val(i, j) + ax * (1 - ay) * val(i + 1, j);
        s += (1 - ax) * ay * val(i, j + 1) + ax * ay * val(i + 1, j + 1);
        return s;
    }

    nlohmann::json header() const {
        return {{"kind", "grid"},     {"n", grid.n},          {"half_width", grid.half_width},
                {"spacing", grid.spacing()}, {"support_radius", support}, {"metric", metric_id},
                {"layout", "x1,x2,value over all cells, row i (x1) major"}};
    }

    void write_csv(std::ostream& os) const {
        os << "x1,x2,value\n" << std::setprecision(17);
        for (int k = 0; k < grid.size(); ++k) {
            const Vec2 c = grid.center(k);
            os << c[0] << ',' << c[1] << ',' << values[k] << '\n';
        }
    }
};

// Values on the nodes of an InfluxGrid.
struct RayData {
    std::shared_ptr<const InfluxGrid> grid;
    std::string metric_id;
    Eigen::VectorXd values;

    double& operator()(int is, int it) { return values[static_cast<Eigen::Index>(is) * grid->n_theta + it]; }
    double operator()(int is, int it) const { return values[static_cast<Eigen::Index>(is) * grid->n_theta + it]; }

    // Bilinear in (boundary angle, theta), periodic in the angle.
    double interpolate(double phi, double theta) const {
        const int ns = grid->n_s, nt = grid->n_theta;
        double fs = phi / (2 * kPi) * ns;
        fs -= ns * std::floor(fs / ns);
        const int i0 = static_cast<int>(std::floor(fs)) % ns;
        const double as = fs - std::floor(fs);
        const double ft = std::clamp((theta + kPi / 2) / kPi * (nt - 1), 0.0, nt - 1.0);
        const int j0 = std::min(static_cast<int>(std::floor(ft)), nt - 2);
        const double at = ft - j0;
        const int i1 = (i0 + 1) % ns;
        return (1 - as) * ((1 - at) * (*this)(i0, j0) + at * (*this)(i0, j0 + 1)) +
               as * ((1 - at) * (*this)(i1, j0) + at * (*this)(i1, j0 + 1));
    }

    nlohmann::json header() const {
        return {{"kind", "ray"},
                {"n_s", grid->n_s},
                {"n_theta", grid->n_theta},
                {"radius", grid->radius},
                {"perimeter", grid->perimeter},
                {"metric", metric_id},
                {"layout", "i_s,i_theta,s,theta,x1,x2,value; node index i_s * n_theta + i_theta"}};
    }

    void write_csv(std::ostream& os) const {
        os << "i_s,i_theta,s,theta,x1,x2,value\n" << std::setprecision(17);
        for (int is = 0; is < grid->n_s; ++is)
            for (int it = 0; it < grid->n_theta; ++it) {
                const auto& nd = grid->node(is, it);
                os << is << ',' << it << ',' << nd.s << ',' << nd.theta << ',' << nd.x[0] << ',' << nd.x[1] << ','
                   << (*this)(is, it) << '\n';
            }
    }
};

// L^2_mu(inward boundary) pairing: sum over nodes of mu * weight * a * b.
inline double ray_inner(const RayData& a, const RayData& b) {
    double s = 0;
    for (size_t k = 0; k < a.grid->size(); ++k) {
        const auto& nd = a.grid->nodes[k];
        s += nd.mu * nd.weight * a.values[k] * b.values[k];
    }
    return s;
}

// Riemannian L^2 pairing of grid functions (midpoint rule with sqrt|g|).
inline double grid_inner(const MetricField& m, const GridFunction& a, const GridFunction& b) {
    double s = 0;
    for (int k = 0; k < a.grid.size(); ++k) {
        if (!a.in_mask(k)) continue;
        const Vec2 c = a.grid.center(k);
        s += a.values[k] * b.values[k] * m.sqrt_detg(c);
    }
    return s * a.grid.cell_area();
}

struct RayOptions {
    double step = 0;   // sample spacing along geodesics; 0 selects grid spacing / 4
    int n_dir = 0;     // directions per pixel in the adjoint; 0 selects 2 * n_theta
    double flow_step = 0;
};

// Discrete X-ray transform between a pixel grid and an influx grid, with the
// sparse forward matrix and the pixel-driven adjoint matrix built on demand.
class RayTransform {
public:
    RayTransform(const MetricField& m, GridSpec grid, std::shared_ptr<const InfluxGrid> fan, RayOptions opt = {})
        : m_(m), grid_(grid), fan_(std::move(fan)), opt_(opt) {
        if (!fan_) throw ArgumentError("RayTransform: influx grid required");
        support_ = m.rho1();
        sqrtg_.resize(grid_.size());
        for (int k = 0; k < grid_.size(); ++k) {
            const Vec2 c = grid_.center(k);
            sqrtg_[k] = c.norm() <= support_ ? m.sqrt_detg(c) : 0.0;
        }
    }

    const InfluxGrid& fan() const { return *fan_; }
    std::shared_ptr<const InfluxGrid> fan_ptr() const { return fan_; }
    const GridSpec& grid() const { return grid_; }
    const MetricField& metric() const { return m_; }

    // rows: influx nodes, cols: pixels. (F f)_n = int_0^tau f_bilinear(gamma) dt
    const Eigen::SparseMatrix<double, Eigen::RowMajor>& forward_matrix() const {
        if (F_.rows() == 0) build_forward();
        return F_;
    }

    // rows: pixels, cols: influx nodes. (B h)(x) = int_{S_x} h_psi(x, v) dv
    const Eigen::SparseMatrix<double, Eigen::RowMajor>& adjoint_matrix() const {
        if (B_.rows() == 0) build_adjoint();
        return B_;
    }

    RayData forward(const GridFunction& f) const {
        check(f);
        return {fan_, m_.id(), forward_matrix() * f.values};
    }

    GridFunction adjoint(const RayData& h) const {
        GridFunction f = GridFunction::zeros(m_, grid_.n);
        f.grid = grid_;
        f.values = adjoint_matrix() * h.values;
        return f;
    }

    // Transpose of the forward matrix in the L^2_mu / L^2(dV_g) pairings. This
    // is the exact discrete adjoint, used where symmetry of I*I matters (CG).
    GridFunction adjoint_matched(const RayData& h) const {
        Eigen::VectorXd w(h.values.size());
        for (size_t k = 0; k < fan_->size(); ++k) w[k] = fan_->nodes[k].mu * fan_->nodes[k].weight * h.values[k];
        Eigen::VectorXd v = forward_matrix().transpose() * w;
        const double cell = grid_.cell_area();
        for (int k = 0; k < grid_.size(); ++k) v[k] = sqrtg_[k] > 0 ? v[k] / (cell * sqrtg_[k]) : 0.0;
        GridFunction f = GridFunction::zeros(m_, grid_.n);
        f.grid = grid_;
        f.values = v;
        return f;
    }

    GridFunction normal(const GridFunction& f) const { return adjoint(forward(f)); }
    GridFunction normal_matched(const GridFunction& f) const { return adjoint_matched(forward(f)); }

    // If for a closed-form f, integrated with 8-point Gauss-Legendre panels of
    // length <= step along each geodesic (no grid interpolation).
    RayData forward_exact(const ScalarField& f, double step = 0) const {
        if (step <= 0) step = m_.rho() / 64;
        std::vector<double> gx, gw;
        gauss_legendre(8, gx, gw);
        Eigen::VectorXd out = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(fan_->size()));
        parallel_for(fan_->size(), [&](size_t k) {
            const auto& nd = fan_->nodes[k];
            if (nd.mu <= 0) return;
            const GeodesicPath p = flow(nd);
            const int np = std::max(1, static_cast<int>(std::ceil(p.tau / step)));
            const double L = p.tau / np;
            double s = 0;
            for (int a = 0; a < np; ++a)
                for (int q = 0; q < 8; ++q) s += 0.5 * L * gw[q] * f(p.at(L * (a + 0.5 * (gx[q] + 1))).x);
            out[k] = s;
        });
        return {fan_, m_.id(), out};
    }

private:
    void check(const GridFunction& f) const {
        if (!(f.grid == grid_)) throw ArgumentError("RayTransform: grid function lives on a different grid");
    }

    GeodesicPath flow(const InfluxNode& nd) const {
        FlowOptions fo;
        fo.boundary_radius = fan_->radius;
        fo.step = opt_.flow_step;
        return geodesic_flow(m_, nd.x, nd.v, fo);
    }

    void bilinear(const Vec2& x, double w, std::vector<std::pair<int, double>>& out) const {
        const double h = grid_.spacing();
        const double fx = (x[0] + grid_.half_width) / h - 0.5, fy = (x[1] + grid_.half_width) / h - 0.5;
        const int i = static_cast<int>(std::floor(fx)), j = static_cast<int>(std::floor(fy));
        const double ax = fx - i, ay = fy - j;
        const int di[4] = {0, 1, 0, 1}, dj[4] = {0, 0, 1, 1};
        const double ww[4] = {(1 - ax) * (1 - ay), ax * (1 - ay), (1 - ax) * ay, ax * ay};
        for (int c = 0; c < 4; ++c) {
            const int a = i + di[c], b = j + dj[c];
            if (a < 0 || b < 0 || a >= grid_.n || b >= grid_.n) continue;
            const int k = grid_.index(a, b);
            if (sqrtg_[k] == 0 || ww[c] == 0) continue;
            out.emplace_back(k, w * ww[c]);
        }
    }

    static void compress(std::vector<std::pair<int, double>>& e) {
        std::sort(e.begin(), e.end(), [](auto& a, auto& b) { return a.first < b.first; });
        size_t o = 0;
        for (size_t i = 0; i < e.size(); ++i) {
            if (o > 0 && e[o - 1].first == e[i].first)
                e[o - 1].second += e[i].second;
            else
                e[o++] = e[i];
        }
        e.resize(o);
    }

    template <class Rows>
    static Eigen::SparseMatrix<double, Eigen::RowMajor> from_rows(const Rows& rows, int ncols) {
        Eigen::SparseMatrix<double, Eigen::RowMajor> A(static_cast<int>(rows.size()), ncols);
        std::vector<int> nnz(rows.size());
        for (size_t r = 0; r < rows.size(); ++r) nnz[r] = static_cast<int>(rows[r].size());
        A.reserve(nnz);
        for (size_t r = 0; r < rows.size(); ++r)
            for (auto& [c, v] : rows[r]) A.insert(static_cast<int>(r), c) = v;
        A.makeCompressed();
        return A;
    }

    void build_forward() const {
        const double dt = opt_.step > 0 ? opt_.step : grid_.spacing() / 4;
        std::vector<std::vector<std::pair<int, double>>> rows(fan_->size());
        parallel_for(fan_->size(), [&](size_t k) {
            const auto& nd = fan_->nodes[k];
            if (nd.mu <= 0) return;
            const GeodesicPath p = flow(nd);
            const int n = std::max(2, static_cast<int>(std::ceil(p.tau / dt)));
            const double L = p.tau / n;
            auto& r = rows[k];
            for (int a = 0; a < n; ++a) bilinear(p.at((a + 0.5) * L).x, L, r);
            compress(r);
        });
        F_ = from_rows(rows, grid_.size());
    }

    // Backward flow from (x, -v) to the boundary, then h at the influx point
    // that reaches x with velocity v, bilinear on the influx grid.
    void build_adjoint() const {
        const int ndir = opt_.n_dir > 0 ? opt_.n_dir : 2 * fan_->n_theta;
        const double R = fan_->radius;
        const int ns = fan_->n_s, nt = fan_->n_theta;
        std::vector<std::vector<std::pair<int, double>>> rows(grid_.size());
        parallel_for(static_cast<size_t>(grid_.size()), [&](size_t k) {
            const Vec2 x = grid_.center(static_cast<int>(k));
            if (x.norm() >= R || sqrtg_[k] == 0) return;
            auto [e1, e2] = m_.frame(x, Vec2(1, 0));
            auto& r = rows[k];
            for (int d = 0; d < ndir; ++d) {
                const double a = 2 * kPi * d / ndir;
                const Vec2 v = std::cos(a) * e1 + std::sin(a) * e2;
                Vec2 y, w;
                if (m_.is_flat()) {
                    const Vec2 u = -v / v.norm();
                    const double b = x.dot(u), c = x.squaredNorm() - R * R;
                    const double t = -b + std::sqrt(std::max(0.0, b * b - c));
                    y = x + t * u;
                    y *= R / y.norm();
                    w = -v;
                } else {
                    FlowOptions fo;
                    fo.boundary_radius = R;
                    fo.step = opt_.flow_step;
                    const GeodesicPath p = geodesic_flow(m_, x, -v, fo);
                    y = p.x.back();
                    w = p.v.back();
                }
                const Vec2 vin = -w;
                auto [f1, f2] = m_.frame(y, -m_.outward_normal(y));
                const double th = std::atan2(m_.inner(y, vin, f2), m_.inner(y, vin, f1));
                double phi = std::atan2(y[1], y[0]);
                if (phi < 0) phi += 2 * kPi;
                double fs = phi / (2 * kPi) * ns;
                const int i0 = static_cast<int>(std::floor(fs)) % ns;
                const double as = fs - std::floor(fs);
                const double ft = std::clamp((th + kPi / 2) / kPi * (nt - 1), 0.0, nt - 1.0);
                const int j0 = std::min(static_cast<int>(std::floor(ft)), nt - 2);
                const double at = ft - j0;
                const int i1 = (i0 + 1) % ns;
                const double wd = 2 * kPi / ndir;
                r.emplace_back(i0 * nt + j0, wd * (1 - as) * (1 - at));
                r.emplace_back(i0 * nt + j0 + 1, wd * (1 - as) * at);
                r.emplace_back(i1 * nt + j0, wd * as * (1 - at));
                r.emplace_back(i1 * nt + j0 + 1, wd * as * at);
            }
            compress(r);
        });
        B_ = from_rows(rows, static_cast<int>(fan_->size()));
    }

    const MetricField& m_;
    GridSpec grid_;
    std::shared_ptr<const InfluxGrid> fan_;
    RayOptions opt_;
    double support_ = 0;
    std::vector<double> sqrtg_;
    mutable Eigen::SparseMatrix<double, Eigen::RowMajor> F_, B_;
};

inline RayData forward_transform(const RayTransform& T, const GridFunction& f) { return T.forward(f); }
inline GridFunction adjoint_transform(const RayTransform& T, const RayData& h) { return T.adjoint(h); }
inline GridFunction normal_operator(const RayTransform& T, const GridFunction& f) { return T.normal(f); }

// ---------------------------------------------------------------------------
// Tikhonov-regularized inversion by conjugate gradients on
// (I*I + reg) f = I* d, with I* the matched discrete adjoint so that the
// operator is self-adjoint in the L^2(dV_g) pairing.

struct InversionOptions {
    std::optional<double> reg; // unset selects reg_factor * ||I*I|| (power estimate)
    double reg_factor = 1e-6;
    double tol = 1e-8;
    int max_iter = 500;
    int stagnation_window = 100; // iterations without a new residual minimum
    int power_iterations = 30;
};

struct InversionResult {
    GridFunction f;
    int iterations = 0;
    double rel_residual = 0;
    double reg = 0;
    double op_norm = 0;
    std::vector<double> history;
};

inline double normal_norm_estimate(const MetricField& m, const RayTransform& T, int iters) {
    GridFunction v = GridFunction::zeros(m, T.grid().n);
    v.grid = T.grid();
    std::mt19937_64 rng(12345);
    std::uniform_real_distribution<double> U(0.5, 1.5);
    for (int k = 0; k < v.grid.size(); ++k) v.values[k] = v.in_mask(k) ? U(rng) : 0.0;
    double lam = 0;
    for (int it = 0; it < iters; ++it) {
        const double nv = std::sqrt(grid_inner(m, v, v));
        if (nv == 0) return 0;
        v.values /= nv;
        GridFunction w = T.normal_matched(v);
        lam = grid_inner(m, v, w);
        v = w;
    }
    return lam;
}

inline InversionResult invert_ray(const MetricField& m, const RayTransform& T, const RayData& d,
                                  InversionOptions opt = {}) {
    if (opt.max_iter < 1) throw ArgumentError("invert_ray: max_iter must be positive");
    InversionResult res;
    res.op_norm = normal_norm_estimate(m, T, opt.power_iterations);
    res.reg = opt.reg ? *opt.reg : opt.reg_factor * res.op_norm;
    const GridFunction b = T.adjoint_matched(d);
    GridFunction x = b.like(Eigen::VectorXd::Zero(b.values.size()));
    auto apply = [&](const GridFunction& p) {
        GridFunction q = T.normal_matched(p);
        q.values += res.reg * p.values;
        return q;
    };
    const double bn = std::sqrt(grid_inner(m, b, b));
    res.f = x;
    if (bn == 0) return res;
    GridFunction r = b, p = b;
    double rr = grid_inner(m, r, r);
    double best = 1.0;
    int since_best = 0;
    for (int it = 0; it < opt.max_iter; ++it) {
        const GridFunction Ap = apply(p);
        const double pAp = grid_inner(m, p, Ap);
        if (!(pAp > 0)) throw ConvergenceError("invert_ray: operator lost positivity", res.history);
        const double alpha = rr / pAp;
        x.values += alpha * p.values;
        r.values -= alpha * Ap.values;
        const double rn = grid_inner(m, r, r);
        const double rel = std::sqrt(rn) / bn;
        res.history.push_back(rel);
        res.iterations = it + 1;
        res.rel_residual = rel;
        if (rel < opt.tol) break;
        if (rel < best * (1 - 1e-12)) {
            best = rel;
            since_best = 0;
        } else if (++since_best >= opt.stagnation_window) {
            std::ostringstream os;
            os << "invert_ray: CG stagnated at relative residual " << rel << " after " << it + 1 << " iterations";
            throw ConvergenceError(os.str(), res.history);
        }
        p.values = r.values + (rn / rr) * p.values;
        rr = rn;
    }
    res.f = x;
    return res;
}

// ---------------------------------------------------------------------------
// Empirical stability constants.

struct StabilityRow {
    double f_l2 = 0, f_h2 = 0, If_h1 = 0, If_h2 = 0;
    double ratio1 = 0; // ||f||_L2 / ||If||_H1
    double ratio2 = 0; // ||If||_H2 / ||f||_H2
    bool excluded = false;
};

struct StabilityTable {
    std::vector<StabilityRow> rows;
    double C1 = 0, C2 = 0;
};

// Discrete Sobolev norms on the influx grid: periodic central differences in s,
// central differences in theta with one-sided ends. Measure ds dtheta.
inline double influx_sobolev(const RayData& h, int order) {
    const InfluxGrid& G = *h.grid;
    const int ns = G.n_s, nt = G.n_theta;
    const double ds = G.perimeter / ns, dth = kPi / (nt - 1);
    auto at = [&](int i, int j) { return h((i % ns + ns) % ns, j); };
    auto dth1 = [&](int i, int j) {
        if (j == 0) return (at(i, 1) - at(i, 0)) / dth;
        if (j == nt - 1) return (at(i, nt - 1) - at(i, nt - 2)) / dth;
        return (at(i, j + 1) - at(i, j - 1)) / (2 * dth);
    };
    double s = 0;
    for (int i = 0; i < ns; ++i)
        for (int j = 0; j < nt; ++j) {
            const double w = G.node(i, j).weight;
            const double v = at(i, j);
            double acc = v * v;
            if (order >= 1) {
                const double hs = (at(i + 1, j) - at(i - 1, j)) / (2 * ds);
                const double ht = dth1(i, j);
                acc += hs * hs + ht * ht;
            }
            if (order >= 2) {
                const double hss = (at(i + 1, j) - 2 * v + at(i - 1, j)) / (ds * ds);
                double htt;
                if (j == 0)
                    htt = (at(i, 2) - 2 * at(i, 1) + v) / (dth * dth);
                else if (j == nt - 1)
                    htt = (v - 2 * at(i, nt - 2) + at(i, nt - 3)) / (dth * dth);
                else
                    htt = (at(i, j + 1) - 2 * v + at(i, j - 1)) / (dth * dth);
                const double hst = (dth1(i + 1, j) - dth1(i - 1, j)) / (2 * ds);
                acc += hss * hss + 2 * hst * hst + htt * htt;
            }
            s += w * acc;
        }
    return std::sqrt(s);
}

// Chart Sobolev norm of a grid function (central differences, zero outside the grid).
inline double grid_sobolev(const GridFunction& f, int order) {
    const int n = f.grid.n;
    const double h = f.grid.spacing();
    auto at = [&](int i, int j) { return (i < 0 || j < 0 || i >= n || j >= n) ? 0.0 : f.values[f.grid.index(i, j)]; };
    double s = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const double v = at(i, j);
            double acc = v * v;
            if (order >= 1) {
                const double fx = (at(i + 1, j) - at(i - 1, j)) / (2 * h), fy = (at(i, j + 1) - at(i, j - 1)) / (2 * h);
                acc += fx * fx + fy * fy;
            }
            if (order >= 2) {
                const double fxx = (at(i + 1, j) - 2 * v + at(i - 1, j)) / (h * h);
                const double fyy = (at(i, j + 1) - 2 * v + at(i, j - 1)) / (h * h);
                const double fxy = (at(i + 1, j + 1) - at(i + 1, j - 1) - at(i - 1, j + 1) + at(i - 1, j - 1)) / (4 * h * h);
                acc += fxx * fxx + 2 * fxy * fxy + fyy * fyy;
            }
            s += acc;
        }
    return std::sqrt(s * h * h);
}

// T should use an influx grid on the boundary of M1.
inline StabilityTable stability_probe(const MetricField& m, const RayTransform& T,
                                      const std::vector<GridFunction>& phantoms) {
    StabilityTable tab;
    for (const auto& f : phantoms) {
        StabilityRow row;
        row.f_l2 = std::sqrt(grid_inner(m, f, f));
        row.f_h2 = grid_sobolev(f, 2);
        const RayData d = T.forward(f);
        row.If_h1 = influx_sobolev(d, 1);
        row.If_h2 = influx_sobolev(d, 2);
        if (row.f_l2 == 0 || row.If_h1 == 0) {
            row.excluded = true;
        } else {
            row.ratio1 = row.f_l2 / row.If_h1;
            row.ratio2 = row.If_h2 / row.f_h2;
            tab.C1 = std::max(tab.C1, row.ratio1);
            tab.C2 = std::max(tab.C2, row.ratio2);
        }
        tab.rows.push_back(row);
    }
    return tab;
}

// Random smooth phantom: low Fourier modes times a C^infinity cutoff supported
// in |x| <= support.
inline GridFunction random_phantom(const MetricField& m, int n, std::mt19937_64& rng, int modes = 3,
                                   double support = -1) {
    if (support < 0) support = 0.9 * m.rho();
    std::normal_distribution<double> N(0.0, 1.0);
    std::vector<std::array<double, 4>> c;
    for (int a = 0; a <= modes; ++a)
        for (int b = 0; b <= modes; ++b) c.push_back({N(rng), N(rng), double(a), double(b)});
    const double k0 = kPi / (2 * support);
    return GridFunction::sample(m, n, [&](const Vec2& x) {
        const double r2 = x.squaredNorm() / (support * support);
        if (r2 >= 1) return 0.0;
        const double cut = std::exp(1 - 1 / (1 - r2));
        double s = 0;
        for (auto& [p, q, a, b] : c) s += p * std::cos(k0 * (a * x[0] + b * x[1])) + q * std::sin(k0 * (a * x[0] - b * x[1]));
        return cut * s;
    });
}

} // namespace geobeam

#endif // GEOBEAM_RAY_HPP
