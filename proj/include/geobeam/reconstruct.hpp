#ifndef GEOBEAM_RECONSTRUCT_HPP
#define GEOBEAM_RECONSTRUCT_HPP

#include "geobeam/beam.hpp"
#include "geobeam/helmholtz.hpp"
#include "geobeam/ray.hpp"

#include <charconv>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <unsupported/Eigen/FFT>

namespace geobeam {

// ---------------------------------------------------------------------------
// Potentials as sums of smooth compactly supported bumps.

// a exp(1 - 1 / (1 - |x - c|^2 / w^2)) inside the disk |x - c| < w.
struct Bump {
    Vec2 center = Vec2::Zero();
    double width = 0.3;
    double amplitude = 1;

    double operator()(const Vec2& x) const {
        const double r2 = (x - center).squaredNorm() / (width * width);
        return r2 < 1 ? amplitude * std::exp(1 - 1 / (1 - r2)) : 0.0;
    }
};

struct PotentialSpec {
    std::vector<Bump> bumps;

    bool is_zero() const {
        for (const auto& b : bumps)
            if (b.amplitude != 0) return false;
        return true;
    }
    double operator()(const Vec2& x) const {
        double s = 0;
        for (const auto& b : bumps) s += b(x);
        return s;
    }
    ScalarField field() const {
        if (is_zero()) return {};
        auto self = *this;
        return [self](const Vec2& x) { return self(x); };
    }
    GridFunction sample(const MetricField& m, int n) const {
        return GridFunction::sample(m, n, [&](const Vec2& x) { return (*this)(x); });
    }
    // Canonical text, also the parse format: "0" or "bump(cx,cy,w,a)+bump(...)".
    std::string text() const {
        if (bumps.empty()) return "0";
        // shortest round-trip digits
        auto num = [](double v) {
            char buf[32];
            return std::string(buf, std::to_chars(buf, buf + sizeof buf, v).ptr);
        };
        std::string out;
        for (size_t k = 0; k < bumps.size(); ++k) {
            const auto& b = bumps[k];
            out += (k ? "+bump(" : "bump(") + num(b.center[0]) + ',' + num(b.center[1]) + ',' + num(b.width) + ',' +
                   num(b.amplitude) + ')';
        }
        return out;
    }

    static PotentialSpec parse(const std::string& s) {
        PotentialSpec p;
        std::string t;
        for (char c : s)
            if (!std::isspace(static_cast<unsigned char>(c))) t += c;
        if (t == "0" || t == "zero") return p;
        size_t pos = 0;
        while (pos < t.size()) {
            if (t.compare(pos, 5, "bump(") != 0)
                throw ArgumentError("potential: expected 'bump(cx,cy,w,a)' at '" + t.substr(pos) + "'");
            const size_t close = t.find(')', pos);
            if (close == std::string::npos) throw ArgumentError("potential: missing ')' in '" + s + "'");
            std::vector<double> v;
            std::stringstream ss(t.substr(pos + 5, close - pos - 5));
            std::string item;
            while (std::getline(ss, item, ',')) {
                try {
                    size_t used = 0;
                    v.push_back(std::stod(item, &used));
                    if (used != item.size()) throw std::invalid_argument(item);
                } catch (const std::exception&) {
                    throw ArgumentError("potential: bad number '" + item + "' in '" + s + "'");
                }
            }
            if (v.size() != 4) throw ArgumentError("potential: bump needs 4 numbers (cx,cy,w,a) in '" + s + "'");
            if (!(v[2] > 0)) throw ArgumentError("potential: bump width must be positive in '" + s + "'");
            p.bumps.push_back({Vec2(v[0], v[1]), v[2], v[3]});
            pos = close + 1;
            if (pos < t.size()) {
                if (t[pos] != '+') throw ArgumentError("potential: expected '+' between bumps in '" + s + "'");
                ++pos;
            }
        }
        return p;
    }
};

// q1 - q2 as a bump list; bumps present in both cancel.
inline PotentialSpec difference(const PotentialSpec& q1, const PotentialSpec& q2) {
    std::vector<Bump> rest = q2.bumps;
    PotentialSpec d;
    auto same = [](const Bump& a, const Bump& b) {
        return a.center == b.center && a.width == b.width && a.amplitude == b.amplitude;
    };
    for (const auto& b : q1.bumps) {
        auto it = std::find_if(rest.begin(), rest.end(), [&](const Bump& r) { return same(r, b); });
        if (it != rest.end())
            rest.erase(it);
        else
            d.bumps.push_back(b);
    }
    for (auto b : rest) {
        b.amplitude = -b.amplitude;
        d.bumps.push_back(b);
    }
    return d;
}

// g-length of the radial segment from chart radius r out to rho, in direction
// phi; the distance to the boundary for rotationally symmetric metrics.
inline double boundary_distance(const MetricField& m, double r, double phi = 0) {
    if (r >= m.rho()) return 0;
    const Vec2 e(std::cos(phi), std::sin(phi));
    std::vector<double> gx, gw;
    gauss_legendre(8, gx, gw);
    double s = 0;
    const int panels = 16;
    const double L = (m.rho() - r) / panels;
    for (int p = 0; p < panels; ++p)
        for (int k = 0; k < 8; ++k) s += 0.5 * L * gw[k] * m.norm((r + L * (p + 0.5 * (gx[k] + 1))) * e, e);
    return s;
}

// Smallest boundary distance of the support of p (worst direction sampled).
inline double support_margin(const MetricField& m, const PotentialSpec& p) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : p.bumps) {
        if (b.amplitude == 0) continue;
        for (int k = 0; k < 64; ++k) {
            const double a = 2 * kPi * k / 64;
            const Vec2 x = b.center + b.width * Vec2(std::cos(a), std::sin(a));
            best = std::min(best, boundary_distance(m, x.norm(), std::atan2(x[1], x[0])));
        }
    }
    return best;
}

// ---------------------------------------------------------------------------
// Frequency function N_s(p) = ||p||_{H^s} / ||p||_{L^2}.

// Zero extension of p masked to the chart disk of radius rho, embedded in a
// periodic box of side >= 4 rho at the grid spacing; H^s by the multiplier
// (1 + |xi|^2)^{s/2}.
inline double frequency_function(const GridFunction& p, double s, double rho) {
    const int n = p.grid.n;
    const double h = p.grid.spacing();
    int N = std::max(n, static_cast<int>(std::ceil(4 * rho / h)));
    N += N % 2;
    Eigen::MatrixXcd A = Eigen::MatrixXcd::Zero(N, N);
    bool any = false;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            const int k = p.grid.index(i, j);
            if (p.grid.center(k).norm() > rho) continue;
            A(i, j) = p.values[k];
            any = any || p.values[k] != 0;
        }
    if (!any) return 0;
    Eigen::FFT<double> fft;
    Eigen::VectorXcd in(N), out(N);
    for (int i = 0; i < N; ++i) {
        in = A.row(i).transpose();
        fft.fwd(out, in);
        A.row(i) = out.transpose();
    }
    for (int j = 0; j < N; ++j) {
        in = A.col(j);
        fft.fwd(out, in);
        A.col(j) = out;
    }
    const double dk = 2 * kPi / (N * h);
    double num = 0, den = 0;
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < N; ++j) {
            const double ki = dk * (i < N / 2 ? i : i - N), kj = dk * (j < N / 2 ? j : j - N);
            const double a2 = std::norm(A(i, j));
            num += std::pow(1 + ki * ki + kj * kj, s) * a2;
            den += a2;
        }
    return std::sqrt(num / den);
}

// ---------------------------------------------------------------------------
// Interior pairing.

struct InteriorField {
    CVec values;
    double lambda = 0;
    std::string mesh_hash;
};

// int_M p u1 conj(u2) dV_g with P1 interpolation of u1, u2 and the 7-point rule.
inline cplx integral_identity_check(const MetricField& m, const Mesh& mesh, const InteriorField& u1,
                                    const InteriorField& u2, const ScalarField& p) {
    if (u1.lambda != u2.lambda) throw PairingError("integral_identity_check: fields solved at different lambda");
    if (u1.mesh_hash != u2.mesh_hash || u1.mesh_hash != mesh.hash)
        throw PairingError("integral_identity_check: fields live on different meshes");
    if (!p) return 0;
    const auto& R = detail::tri_rule();
    cplx s = 0;
    for (const auto& T : mesh.triangles) {
        const Vec2 &A = mesh.vertices[T[0]], &B = mesh.vertices[T[1]], &C = mesh.vertices[T[2]];
        const double area = 0.5 * std::abs((B - A)[0] * (C - A)[1] - (B - A)[1] * (C - A)[0]);
        cplx e = 0;
        for (int q = 0; q < 7; ++q) {
            const auto& l = R.bary[q];
            const Vec2 x = l[0] * A + l[1] * B + l[2] * C;
            const double px = p(x);
            if (px == 0) continue;
            const cplx a = l[0] * u1.values[T[0]] + l[1] * u1.values[T[1]] + l[2] * u1.values[T[2]];
            const cplx b = l[0] * u2.values[T[0]] + l[1] * u2.values[T[1]] + l[2] * u2.values[T[2]];
            e += R.w[q] * px * a * std::conj(b) * m.sqrt_detg(x);
        }
        s += area * e;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Boundary pairing through DN maps.
//
// A field u is matched by the solution with the same impedance data
// (d_nu - i lambda) u on the boundary; its trace solves (S - i lambda Mb) f = b
// with b_i = int (d_nu u - i lambda u) phi_i ds. For traces f1 (potential
// q + p) and f2 (potential q), f2^H (S1 - S2) f1 = int p u1 conj(u2) dV.

namespace detail {

// Impedance load of a closed-form field on the boundary polygon (4-point
// Gauss per edge, conormal derivative by 4th-order differences). Edges for
// which skip(midpoint, edge vector) holds are left out.
template <class Field, class Skip>
CVec impedance_load(const MetricField& m, const Mesh& mesh, double lambda, Field&& u, Skip&& skip) {
    const int nb = static_cast<int>(mesh.boundary.size());
    CVec b = CVec::Zero(nb);
    static const double gx[4] = {-0.8611363115940526, -0.3399810435848563, 0.3399810435848563, 0.8611363115940526};
    static const double gw[4] = {0.3478548451374538, 0.6521451548625461, 0.6521451548625461, 0.3478548451374538};
    const double eps = 0.05 / lambda;
    const cplx I(0, 1);
    for (int k = 0; k < nb; ++k) {
        const int k1 = (k + 1) % nb;
        const Vec2 A = mesh.vertices[mesh.boundary[k]], B = mesh.vertices[mesh.boundary[k1]];
        const Vec2 d = B - A;
        if (skip(0.5 * (A + B), d)) continue;
        const Vec2 n(d[1], -d[0]); // outward for a counterclockwise ring
        for (int q = 0; q < 4; ++q) {
            const double s = 0.5 * (gx[q] + 1);
            const Vec2 x = A + s * d;
            const Mat2 gi = m.ginv(x);
            Vec2 nu = gi * n;
            nu /= std::sqrt(n.dot(gi * n));
            const cplx du = (-u(x + 2 * eps * nu) + 8.0 * u(x + eps * nu) - 8.0 * u(x - eps * nu) +
                             u(x - 2 * eps * nu)) /
                            (12 * eps);
            const cplx g = du - I * lambda * u(x);
            const double w = 0.5 * gw[q] * m.norm(x, d);
            b[k] += w * (1 - s) * g;
            b[k1] += w * s * g;
        }
    }
    return b;
}

} // namespace detail

class BoundaryPairing {
public:
    // dn_q: potential q; dn_qp: potential q + p.
    BoundaryPairing(const MetricField& m, const Mesh& mesh, const DNMatrix& dn_q, const DNMatrix& dn_qp)
        : m_(m), mesh_(&mesh), lambda_(dn_q.lambda) {
        require_same_pairing(dn_q, dn_qp);
        if (dn_q.mesh_hash != mesh.hash) throw PairingError("boundary pairing: DN maps belong to another mesh");
        const cplx I(0, 1);
        const Eigen::MatrixXcd Mi = (I * lambda_) * dn_q.bmass.cast<cplx>();
        lu_q_.compute(dn_q.flux.cast<cplx>() - Mi);
        lu_qp_.compute(dn_qp.flux.cast<cplx>() - Mi);
        dS_ = dn_qp.flux - dn_q.flux;
        snorm_ = dn_q.flux.norm() + dn_qp.flux.norm();
    }

    double lambda() const { return lambda_; }
    const Mesh& mesh() const { return *mesh_; }
    const MetricField& metric() const { return m_; }

    struct Values {
        Eigen::VectorXcd pairing; // f2^H (S1 - S2) f1 per column
        Eigen::VectorXd floor;    // round-off scale eps (|S1| + |S2|) |f1| |f2|
    };

    // Columns of b1 carry the data of u1 (potential q + p), b2 of u2 (q).
    Values pair(const Eigen::MatrixXcd& b1, const Eigen::MatrixXcd& b2) const {
        const Eigen::MatrixXcd f1 = lu_qp_.solve(b1);
        const Eigen::MatrixXcd f2 = lu_q_.solve(b2);
        Eigen::MatrixXcd d(f1.rows(), f1.cols());
        d.real() = dS_ * f1.real();
        d.imag() = dS_ * f1.imag();
        Values v;
        v.pairing.resize(f1.cols());
        v.floor.resize(f1.cols());
        for (Eigen::Index c = 0; c < f1.cols(); ++c) {
            v.pairing[c] = f2.col(c).dot(d.col(c));
            v.floor[c] = std::numeric_limits<double>::epsilon() * snorm_ * f1.col(c).norm() * f2.col(c).norm();
        }
        return v;
    }

private:
    MetricField m_;
    const Mesh* mesh_;
    double lambda_;
    Eigen::PartialPivLU<Eigen::MatrixXcd> lu_q_, lu_qp_;
    Eigen::MatrixXd dS_;
    double snorm_ = 0;
};

// ---------------------------------------------------------------------------
// Ray data from DN differences.

struct ExtractOptions {
    BeamOptions beam = [] {
        BeamOptions b;
        b.samples = 1024;
        return b;
    }();
    double mu_min = 0.2; // near-tangential chords are skipped (value 0)
    int chunk = 128;     // geodesics per batched solve
};

struct ExtractDiagnostics {
    RayData floor;           // per-geodesic round-off scale
    std::vector<int> used;   // node indices with mu > mu_min
    double imag_ratio = 0;   // ||Im pairing|| / ||Re pairing|| over the fan
};

inline RayData extract_ray_data(const BoundaryPairing& P, std::shared_ptr<const InfluxGrid> fan,
                                const ExtractOptions& opt = {}, ExtractDiagnostics* diag = nullptr) {
    const MetricField& m = P.metric();
    const Mesh& mesh = P.mesh();
    const double lambda = P.lambda();
    detail::check_beam_resolution(mesh, lambda);
    std::vector<int> used;
    for (size_t k = 0; k < fan->size(); ++k)
        if (fan->nodes[k].mu > opt.mu_min) used.push_back(static_cast<int>(k));
    RayData out{fan, m.id(), Eigen::VectorXd::Zero(static_cast<Eigen::Index>(fan->size()))};
    RayData floor = out;
    const int nb = static_cast<int>(mesh.boundary.size());
    double re2 = 0, im2 = 0;
    for (size_t c0 = 0; c0 < used.size(); c0 += opt.chunk) {
        const size_t nc = std::min<size_t>(opt.chunk, used.size() - c0);
        Eigen::MatrixXcd B(nb, static_cast<Eigen::Index>(nc));
        parallel_for(nc, [&](size_t c) {
            const auto& nd = fan->nodes[used[c0 + c]];
            GeodesicPath g;
            g.t = {0};
            g.x = {nd.x};
            g.v = {nd.v};
            const Quasimode v(m, g, lambda, opt.beam);
            B.col(static_cast<Eigen::Index>(c)) = detail::impedance_load(
                m, mesh, lambda, [&](const Vec2& x) { return v(x); },
                [&](const Vec2& x, const Vec2& d) {
                    // past the Gaussian cutoff the beam is exactly zero
                    return v(x) == 0.0 && v(x - 0.5 * d) == 0.0 && v(x + 0.5 * d) == 0.0;
                });
        });
        // u1 and u2 share the leading term v
        const auto val = P.pair(B, B);
        for (size_t c = 0; c < nc; ++c) {
            const int k = used[c0 + c];
            out.values[k] = val.pairing[c].real();
            floor.values[k] = val.floor[c];
            re2 += std::norm(val.pairing[c].real());
            im2 += std::norm(val.pairing[c].imag());
        }
    }
    if (diag) {
        diag->floor = floor;
        diag->used = used;
        diag->imag_ratio = re2 > 0 ? std::sqrt(im2 / re2) : 0.0;
    }
    return out;
}

inline RayData extract_ray_data(const MetricField& m, const Mesh& mesh, const DNMatrix& dn_q, const DNMatrix& dn_qp,
                                std::shared_ptr<const InfluxGrid> fan, const ExtractOptions& opt = {},
                                ExtractDiagnostics* diag = nullptr) {
    return extract_ray_data(BoundaryPairing(m, mesh, dn_q, dn_qp), std::move(fan), opt, diag);
}

// ---------------------------------------------------------------------------
// Geometrical-optics branch: for each center y on the boundary of M1, pairs
// u1 = e^{i lambda r} J^{-1/2} b(theta) and u2 = e^{i lambda r} J^{-1/2}, giving
// int_M p J^{-1} b dV = int Ip(y, theta) b(theta) d theta.

struct GOTable {
    double lambda = 0;
    std::vector<double> phi;   // chart angle of y
    std::vector<double> value; // real part of the pairing
    std::vector<double> imag;
};

inline GOTable go_mode_extract(const BoundaryPairing& P, const std::vector<double>& centers,
                               std::function<double(double)> b = {}) {
    const MetricField& m = P.metric();
    const Mesh& mesh = P.mesh();
    const double lambda = P.lambda();
    if (!b) b = [](double) { return 1.0; };
    const int nb = static_cast<int>(mesh.boundary.size());
    const Eigen::Index nc = static_cast<Eigen::Index>(centers.size());
    Eigen::MatrixXcd B1(nb, nc), B2(nb, nc);
    auto none = [](const Vec2&, const Vec2&) { return false; };
    parallel_for(centers.size(), [&](size_t c) {
        const auto u1 = build_go_solution(m, centers[c], b, lambda);
        const auto u2 = build_go_solution(m, centers[c], [](double) { return 1.0; }, lambda);
        B1.col(static_cast<Eigen::Index>(c)) = detail::impedance_load(
            m, mesh, lambda, [&](const Vec2& x) { return u1(x); }, none);
        B2.col(static_cast<Eigen::Index>(c)) = detail::impedance_load(
            m, mesh, lambda, [&](const Vec2& x) { return u2(x); }, none);
    });
    const auto val = P.pair(B1, B2);
    GOTable t;
    t.lambda = lambda;
    t.phi = centers;
    for (Eigen::Index c = 0; c < nc; ++c) {
        t.value.push_back(val.pairing[c].real());
        t.imag.push_back(val.pairing[c].imag());
    }
    return t;
}

// ---------------------------------------------------------------------------
// End-to-end recovery.

struct ExperimentConfig {
    std::string metric = "euclidean";
    double rho = 0; // 0 selects the metric default
    PotentialSpec q, p;
    std::vector<double> lambdas{100, 200, 400};
    double a = 0.4;
    double c_delta = 16;
    int q_terms = 2;
    int fan_s = 64, fan_theta = 64;
    double mu_min = 0.2;
    int grid_n = 32;
    double sobolev_s = 2;
    double bound_B = 200;
    double support_margin = 0.05; // fraction of rho
    double lambda_h = 0.6;        // mesh: lambda * h_metric
    double reg_factor = 1e-3;
    int max_iter = 500;
    bool control = true; // p = 0 run at the lowest lambda

    // Pair form: DN data for q1 and q2, unknown difference p = q1 - q2.
    void set_pair(const PotentialSpec& q1, const PotentialSpec& q2) {
        q = q2;
        p = difference(q1, q2);
    }

    MetricField make_metric() const {
        if (metric.empty()) throw ArgumentError("config: metric id missing");
        const double r = rho > 0 ? rho : (metric == "hyperbolic" ? 0.6 : 1.0);
        return metric_by_id(metric, r);
    }

    void validate() const {
        if (lambdas.empty()) throw ArgumentError("config: lambda list is empty");
        for (size_t k = 0; k < lambdas.size(); ++k) {
            if (!(lambdas[k] > 0)) throw ArgumentError("config: lambdas must be positive");
            if (k && !(lambdas[k] > lambdas[k - 1])) throw ArgumentError("config: lambdas must increase");
        }
        if (!(a > 1.0 / 3 && a < 0.5)) {
            std::ostringstream os;
            os << "config: beam exponent a = " << a << " outside the open interval (1/3, 1/2)";
            throw ArgumentError(os.str());
        }
        if (q_terms < 0 || q_terms > 2) throw ArgumentError("config: beam q_terms must be 0, 1 or 2");
        if (fan_s < 4 || fan_theta < 4) throw ArgumentError("config: fan resolution must be >= 4");
        if (grid_n < 8) throw ArgumentError("config: grid resolution must be >= 8");
        if (!(lambda_h > 0 && lambda_h <= 0.6)) throw ArgumentError("config: mesh lambda_h must lie in (0, 0.6]");
    }

    nlohmann::json to_json() const {
        return {{"metric", metric},         {"rho", rho},
                {"q", q.text()},            {"p", p.text()},
                {"lambdas", lambdas},       {"a", a},
                {"c_delta", c_delta},       {"q_terms", q_terms},
                {"fan_s", fan_s},           {"fan_theta", fan_theta},
                {"mu_min", mu_min},         {"grid_n", grid_n},
                {"sobolev_s", sobolev_s},   {"bound_B", bound_B},
                {"support_margin", support_margin}, {"lambda_h", lambda_h},
                {"reg_factor", reg_factor}, {"max_iter", max_iter},
                {"control", control}};
    }
};

// Gates run before any solve.
inline void check_admissible(const ExperimentConfig& cfg, const MetricField& m) {
    if (cfg.p.is_zero()) return;
    const double margin = support_margin(m, cfg.p);
    if (margin < cfg.support_margin * m.rho()) {
        std::ostringstream os;
        os << "support gate: supp(p) reaches g-distance " << margin << " from the boundary, below the margin "
           << cfg.support_margin * m.rho() << " (" << cfg.support_margin << " rho)";
        throw AdmissibilityError(os.str());
    }
    const double Ns = frequency_function(cfg.p.sample(m, cfg.grid_n), cfg.sobolev_s, m.rho());
    if (Ns > cfg.bound_B) {
        std::ostringstream os;
        os << "admissibility gate: N_s(p) = " << Ns << " exceeds B = " << cfg.bound_B << " (s = " << cfg.sobolev_s
           << ")";
        throw AdmissibilityError(os.str());
    }
}

// DN maps for q and q + p at a common frequency (the near-eigenvalue guard may
// shift either one).
inline std::pair<DNMatrix, DNMatrix> dn_pair(const MetricField& m, const Mesh& mesh, const ScalarField& q,
                                             const ScalarField& qp, double lambda, HelmholtzOptions opt = {}) {
    auto pattern = std::make_shared<const MeshPattern>(mesh);
    double lam = lambda;
    for (int it = 0; it < 8; ++it) {
        DNMatrix a = dn_map(m, mesh, q, lam, "q", opt, pattern);
        DNMatrix b = dn_map(m, mesh, qp, a.lambda, "q+p", opt, pattern);
        if (b.lambda == a.lambda) {
            a.requested_lambda = b.requested_lambda = lambda;
            return {std::move(a), std::move(b)};
        }
        lam = b.lambda;
    }
    throw NearEigenvalueError("dn_pair: could not find a frequency clear of both spectra");
}

struct RecoveryStage {
    double lambda = 0, requested_lambda = 0;
    std::string mesh_hash;
    size_t vertices = 0;
    RayData extracted, truth;
    GridFunction recovered;
    double data_error = 0, data_rel_error = 0, data_floor = 0, imag_ratio = 0;
    double rel_l2 = 0, linf_supp = 0;
    int cg_iterations = 0;
    double seconds = 0;
};

struct ControlRun {
    double lambda = 0;
    double data_norm = 0, data_floor = 0;
    double p_hat_norm = 0, p_hat_floor = 0;
    bool at_floor = false;
};

struct RecoveryReport {
    ExperimentConfig config;
    std::string metric_fingerprint;
    double frequency_function = 0;
    double margin = 0;
    std::vector<RecoveryStage> stages;
    std::optional<ControlRun> control;
    double data_slope = 0;
    bool errors_non_increasing = false;

    nlohmann::json summary() const {
        nlohmann::json st = nlohmann::json::array();
        for (const auto& s : stages)
            st.push_back({{"lambda", s.lambda},
                          {"requested_lambda", s.requested_lambda},
                          {"mesh_hash", s.mesh_hash},
                          {"vertices", s.vertices},
                          {"data_error", s.data_error},
                          {"data_rel_error", s.data_rel_error},
                          {"data_floor", s.data_floor},
                          {"imag_ratio", s.imag_ratio},
                          {"rel_l2", s.rel_l2},
                          {"linf_supp", s.linf_supp},
                          {"cg_iterations", s.cg_iterations}});
        nlohmann::json j{{"config", config.to_json()},
                         {"metric", metric_fingerprint},
                         {"frequency_function", frequency_function},
                         {"support_margin", margin},
                         {"stages", st},
                         {"data_slope", data_slope},
                         {"errors_non_increasing", errors_non_increasing}};
        if (control)
            j["control"] = {{"lambda", control->lambda},         {"data_norm", control->data_norm},
                            {"data_floor", control->data_floor}, {"p_hat_norm", control->p_hat_norm},
                            {"p_hat_floor", control->p_hat_floor}, {"at_floor", control->at_floor}};
        return j;
    }

    // config.json, summary.json, timings.json and per-lambda CSVs.
    void write(const std::filesystem::path& dir) const {
        namespace fs = std::filesystem;
        fs::create_directories(dir);
        auto put = [&](const fs::path& p, const std::string& s) {
            std::ofstream f(p, std::ios::binary);
            if (!f) throw Error("report: cannot write " + p.string());
            f << s;
        };
        put(dir / "config.json", config.to_json().dump(2) + "\n");
        put(dir / "summary.json", summary().dump(2) + "\n");
        nlohmann::json t = nlohmann::json::array();
        for (const auto& s : stages) t.push_back({{"lambda", s.lambda}, {"seconds", s.seconds}});
        put(dir / "timings.json", t.dump(2) + "\n");
        for (const auto& s : stages) {
            std::ostringstream name;
            name << "lambda_" << std::setprecision(10) << s.requested_lambda;
            const fs::path d = dir / name.str();
            fs::create_directories(d);
            std::ostringstream a, b, c;
            s.extracted.write_csv(a);
            s.truth.write_csv(b);
            s.recovered.write_csv(c);
            put(d / "ray_extracted.csv", a.str());
            put(d / "ray_true.csv", b.str());
            put(d / "recovered.csv", c.str());
        }
    }
};

namespace detail {

inline double ray_norm_on(const RayData& a, const std::vector<int>& idx) {
    double s = 0;
    for (int k : idx) {
        const auto& nd = a.grid->nodes[k];
        s += nd.mu * nd.weight * a.values[k] * a.values[k];
    }
    return std::sqrt(s);
}

} // namespace detail

inline RecoveryReport recover_potential(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
    cfg.validate();
    const MetricField m = cfg.make_metric();
    RecoveryReport R;
    R.config = cfg;
    R.metric_fingerprint = m.fingerprint();
    if (!cfg.p.is_zero()) R.margin = support_margin(m, cfg.p);
    check_admissible(cfg, m);
    const GridFunction p_grid = cfg.p.sample(m, cfg.grid_n);
    R.frequency_function = frequency_function(p_grid, cfg.sobolev_s, m.rho());

    auto fan = std::make_shared<const InfluxGrid>(sample_influx(m, cfg.fan_s, cfg.fan_theta));
    RayTransform T(m, grid_for(m, cfg.grid_n), fan);
    const ScalarField q = cfg.q.field(), p = cfg.p.field();
    PotentialSpec qp_spec = cfg.q;
    for (const auto& b : cfg.p.bumps) qp_spec.bumps.push_back(b);
    const ScalarField qp = qp_spec.field();
    const RayData truth_full = p ? T.forward_exact(p) : RayData{fan, m.id(), Eigen::VectorXd::Zero(fan->size())};

    ExtractOptions eo;
    eo.mu_min = cfg.mu_min;
    eo.beam.a = cfg.a;
    eo.beam.c_delta = cfg.c_delta;
    eo.beam.q_terms = cfg.q_terms;
    eo.beam.potential = q;
    InversionOptions io;
    io.reg_factor = cfg.reg_factor;
    io.max_iter = cfg.max_iter;
    const double pn = std::sqrt(grid_inner(m, p_grid, p_grid));

    auto stage = [&](const char* what, auto&& fn) {
        try {
            return fn();
        } catch (const std::exception& e) {
            throw Error(std::string("recover: stage '") + what + "' failed: " + e.what());
        }
    };

    double gain = 0; // ||p_hat|| / ||data|| from the main runs
    for (double lam : cfg.lambdas) {
        const auto t0 = std::chrono::steady_clock::now();
        if (log) *log << "recover: lambda = " << lam << ": mesh\n";
        const Mesh mesh = stage("mesh", [&] { return mesh_for(m, lam, cfg.lambda_h); });
        if (log) *log << "recover: lambda = " << lam << ": DN maps on " << mesh.n_vertices() << " vertices\n";
        auto dn = stage("dn", [&] { return dn_pair(m, mesh, q, qp, lam); });
        if (log) *log << "recover: lambda = " << lam << ": extraction\n";
        ExtractDiagnostics dg;
        RayData d = stage("extract", [&] {
            const BoundaryPairing P(m, mesh, dn.first, dn.second);
            return extract_ray_data(P, fan, eo, &dg);
        });
        if (log) *log << "recover: lambda = " << lam << ": inversion\n";
        InversionResult inv = stage("invert", [&] { return invert_ray(m, T, d, io); });

        RecoveryStage s;
        s.lambda = dn.first.lambda;
        s.requested_lambda = lam;
        s.mesh_hash = mesh.hash;
        s.vertices = mesh.n_vertices();
        s.extracted = d;
        s.truth = truth_full;
        for (size_t k = 0; k < fan->size(); ++k)
            if (!(fan->nodes[k].mu > cfg.mu_min)) s.truth.values[k] = 0;
        RayData diff = d;
        diff.values -= s.truth.values;
        s.data_error = detail::ray_norm_on(diff, dg.used);
        const double tn = detail::ray_norm_on(s.truth, dg.used);
        s.data_rel_error = tn > 0 ? s.data_error / tn : 0.0;
        s.data_floor = detail::ray_norm_on(dg.floor, dg.used);
        s.imag_ratio = dg.imag_ratio;
        s.recovered = inv.f;
        s.cg_iterations = inv.iterations;
        GridFunction e = inv.f;
        e.values -= p_grid.values;
        const double en = std::sqrt(grid_inner(m, e, e));
        s.rel_l2 = pn > 0 ? en / pn : std::sqrt(grid_inner(m, inv.f, inv.f));
        for (int k = 0; k < p_grid.grid.size(); ++k)
            if (p_grid.values[k] != 0) s.linf_supp = std::max(s.linf_supp, std::abs(e.values[k]));
        const double dn_ = detail::ray_norm_on(d, dg.used);
        if (dn_ > 0) gain = std::max(gain, std::sqrt(grid_inner(m, inv.f, inv.f)) / dn_);
        s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (log)
            *log << "recover: lambda = " << s.lambda << ": data rel err " << s.data_rel_error << ", p rel L2 err "
                 << s.rel_l2 << " (" << s.seconds << " s)\n";
        R.stages.push_back(std::move(s));
    }

    if (R.stages.size() >= 2) {
        std::vector<double> x, y;
        for (const auto& s : R.stages) {
            x.push_back(s.lambda);
            y.push_back(std::max(s.data_error, 1e-300));
        }
        R.data_slope = loglog_slope(x, y);
    }
    R.errors_non_increasing = true;
    for (size_t k = 1; k < R.stages.size(); ++k)
        if (R.stages[k].rel_l2 > R.stages[k - 1].rel_l2) R.errors_non_increasing = false;

    if (cfg.control) {
        const double lam = cfg.lambdas.front();
        if (log) *log << "recover: control run (p = 0) at lambda = " << lam << "\n";
        ControlRun c;
        stage("control", [&] {
            const Mesh mesh = mesh_for(m, lam, cfg.lambda_h);
            auto dn = dn_pair(m, mesh, q, q, lam);
            ExtractDiagnostics dg;
            const BoundaryPairing P(m, mesh, dn.first, dn.second);
            const RayData d = extract_ray_data(P, fan, eo, &dg);
            const InversionResult inv = invert_ray(m, T, d, io);
            c.lambda = dn.first.lambda;
            c.data_norm = detail::ray_norm_on(d, dg.used);
            c.data_floor = detail::ray_norm_on(dg.floor, dg.used);
            c.p_hat_norm = std::sqrt(grid_inner(m, inv.f, inv.f));
            c.p_hat_floor = gain * c.data_floor;
            c.at_floor = c.data_norm <= 10 * c.data_floor && c.p_hat_norm <= 10 * c.p_hat_floor;
            return 0;
        });
        R.control = c;
    }
    return R;
}

} // namespace geobeam

#endif // GEOBEAM_RECONSTRUCT_HPP
