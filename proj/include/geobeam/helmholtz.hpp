#ifndef GEOBEAM_HELMHOLTZ_HPP
#define GEOBEAM_HELMHOLTZ_HPP

#include "geobeam/mesh.hpp"
#include "geobeam/sparse_factor.hpp"

#include <iostream>
#include <map>
#include <memory>
#include <Eigen/UmfPackSupport>
#include <nlohmann/json.hpp>

namespace geobeam {

using CVec = Eigen::VectorXcd;
using CMat = Eigen::MatrixXcd;

struct HelmholtzOptions {
    // Mass matrix = (1 - blend) * consistent + blend * lumped. The half blend
    // cancels the leading P1 phase error on uniform grids.
    double mass_blend = 0.5;
    double pivot_guard = 1e-12;
    int max_retries = 8;
    double max_lambda_h = 0.6;
    bool enforce_resolution = true;
    std::ostream* log = nullptr;
};

inline void check_resolution(const Mesh& mesh, double lambda, const HelmholtzOptions& opt = {}) {
    if (!opt.enforce_resolution) return;
    if (lambda * mesh.h_metric > opt.max_lambda_h) {
        std::ostringstream os;
        os << "resolution guard: lambda = " << lambda << " with h = " << mesh.h_metric << " gives lambda*h = "
           << lambda * mesh.h_metric << " > " << opt.max_lambda_h << " (fewer than ~10 points per wavelength)";
        throw ResolutionError(os.str());
    }
}

// Sparsity pattern of the P1 vertex graph, shared by every operator on a mesh.
class MeshPattern {
public:
    explicit MeshPattern(const Mesh& mesh) {
        const int n = static_cast<int>(mesh.n_vertices());
        std::vector<std::vector<int>> adj(n);
        for (const auto& T : mesh.triangles)
            for (int a : T)
                for (int b : T) adj[a].push_back(b);
        outer_.assign(n + 1, 0);
        for (int j = 0; j < n; ++j) {
            auto& c = adj[j];
            std::sort(c.begin(), c.end());
            c.erase(std::unique(c.begin(), c.end()), c.end());
            outer_[j + 1] = outer_[j] + static_cast<int>(c.size());
        }
        inner_.reserve(outer_[n]);
        for (auto& c : adj) inner_.insert(inner_.end(), c.begin(), c.end());
        n_ = n;
    }

    int find(int row, int col) const {
        auto b = inner_.begin() + outer_[col], e = inner_.begin() + outer_[col + 1];
        return static_cast<int>(std::lower_bound(b, e, row) - inner_.begin());
    }

    SpMat make(const std::vector<double>& values) const {
        SpMat A(n_, n_);
        A.resizeNonZeros(static_cast<Eigen::Index>(inner_.size()));
        std::copy(outer_.begin(), outer_.end(), A.outerIndexPtr());
        std::copy(inner_.begin(), inner_.end(), A.innerIndexPtr());
        std::copy(values.begin(), values.end(), A.valuePtr());
        return A;
    }

    size_t nnz() const { return inner_.size(); }

private:
    int n_ = 0;
    std::vector<int> outer_, inner_;
};

// Assembles  int (g^{jk} d_j u d_k v) sqrt|g|  (if with_stiffness) plus
// int w u v sqrt|g|  with the blended mass rule. w is evaluated at the three
// edge midpoints (consistent part) and at the vertices (lumped part).
inline SpMat assemble_weighted(const MetricField& m, const Mesh& mesh, const MeshPattern& pat,
                               const std::function<double(const Vec2&)>& w, bool with_stiffness, double blend) {
    std::vector<double> val(pat.nnz(), 0.0);
    for (const auto& T : mesh.triangles) {
        const Vec2 p[3] = {mesh.vertices[T[0]], mesh.vertices[T[1]], mesh.vertices[T[2]]};
        const Vec2 e1 = p[1] - p[0], e2 = p[2] - p[0];
        const double area = 0.5 * (e1[0] * e2[1] - e1[1] * e2[0]);
        double loc[3][3] = {{0}};
        const Vec2 mid[3] = {0.5 * (p[0] + p[1]), 0.5 * (p[1] + p[2]), 0.5 * (p[2] + p[0])};
        if (with_stiffness) {
            Vec2 grad[3];
            for (int i = 0; i < 3; ++i) {
                const Vec2& a = p[(i + 1) % 3];
                const Vec2& b = p[(i + 2) % 3];
                grad[i] = Vec2(a[1] - b[1], b[0] - a[0]) / (2 * area);
            }
            Mat2 G = Mat2::Zero();
            for (int q = 0; q < 3; ++q) {
                const Mat2 g = m.g(mid[q]);
                G += std::sqrt(g.determinant()) * g.inverse() / 3.0;
            }
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 3; ++j) loc[i][j] += area * grad[i].dot(G * grad[j]);
        }
        if (w) {
            // edge-midpoint rule: midpoint q sits on edge (q, q+1)
            for (int q = 0; q < 3; ++q) {
                const double c = w(mid[q]) * m.sqrt_detg(mid[q]) * area / 3.0 * (1 - blend);
                const int a = q, b = (q + 1) % 3;
                loc[a][a] += 0.25 * c;
                loc[b][b] += 0.25 * c;
                loc[a][b] += 0.25 * c;
                loc[b][a] += 0.25 * c;
            }
            if (blend != 0)
                for (int i = 0; i < 3; ++i) loc[i][i] += blend * w(p[i]) * m.sqrt_detg(p[i]) * area / 3.0;
        }
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) val[pat.find(T[i], T[j])] += loc[i][j];
    }
    return pat.make(val);
}

// Discrete form of  -Delta_g + q - lambda^2. The potential enters through
// c(x) = q(x) - lambda * lambda at every quadrature point, so shifting the
// potential by -lambda^2 at lambda = 0 reproduces the same bits.
inline SpMat assemble_helmholtz(const MetricField& m, const Mesh& mesh, const MeshPattern& pat, const ScalarField& q,
                                double lambda, double blend) {
    const double l2 = lambda * lambda;
    return assemble_weighted(
        m, mesh, pat, [&](const Vec2& x) { return (q ? q(x) : 0.0) - l2; }, true, blend);
}

// P1 mass of the boundary polygon in g-length (Simpson per edge for the length
// element, consistent 2x2 element matrix).
inline Eigen::MatrixXd boundary_mass(const MetricField& m, const Mesh& mesh) {
    const int nb = static_cast<int>(mesh.boundary.size());
    Eigen::MatrixXd Mb = Eigen::MatrixXd::Zero(nb, nb);
    for (int k = 0; k < nb; ++k) {
        const int k1 = (k + 1) % nb;
        const Vec2 a = mesh.vertices[mesh.boundary[k]], b = mesh.vertices[mesh.boundary[k1]];
        const Vec2 d = b - a;
        const double len = (m.norm(a, d) + 4 * m.norm(0.5 * (a + b), d) + m.norm(b, d)) / 6;
        Mb(k, k) += len / 3;
        Mb(k1, k1) += len / 3;
        Mb(k, k1) += len / 6;
        Mb(k1, k) += len / 6;
    }
    return Mb;
}

// Factorization of the interior block of the Dirichlet problem at (q, lambda).
// On a pivot-guard trip lambda is nudged by the factor (1 + 2^-10), at most
// max_retries times.
class DirichletSolver {
public:
    DirichletSolver(const MetricField& m, const Mesh& mesh, ScalarField q, double lambda,
                    HelmholtzOptions opt = {}, std::shared_ptr<const MeshPattern> pattern = nullptr)
        : mesh_(&mesh), q_(std::move(q)), requested_(lambda), opt_(opt) {
        check_resolution(mesh, lambda, opt);
        pat_ = pattern ? pattern : std::make_shared<MeshPattern>(mesh);
        const int n = static_cast<int>(mesh.n_vertices());
        local_.assign(n, -1);
        for (int v = 0; v < n; ++v)
            if (!mesh.is_boundary[v]) {
                local_[v] = static_cast<int>(interior_.size());
                interior_.push_back(v);
            }
        bpos_.assign(n, -1);
        for (size_t k = 0; k < mesh.boundary.size(); ++k) bpos_[mesh.boundary[k]] = static_cast<int>(k);

        double lam = lambda;
        for (int attempt = 0;; ++attempt) {
            build(m, lam);
            const double ratio = factor_->pivot_ratio();
            if (ratio >= opt_.pivot_guard) {
                lambda_ = lam;
                break;
            }
            if (opt_.log)
                *opt_.log << "near-eigenvalue guard: pivot ratio " << ratio << " at lambda = " << lam
                          << ", retrying at " << lam * (1 + std::ldexp(1.0, -10)) << "\n";
            shifts_.push_back(lam);
            if (attempt >= opt_.max_retries) {
                std::ostringstream os;
                os << "near-eigenvalue error: pivot ratio " << ratio << " below " << opt_.pivot_guard
                   << " at lambda = " << lambda << " after " << opt_.max_retries << " shifts";
                throw NearEigenvalueError(os.str());
            }
            lam *= 1 + std::ldexp(1.0, -10);
        }
    }

    double lambda() const { return lambda_; }
    double requested_lambda() const { return requested_; }
    const std::vector<double>& shifted_from() const { return shifts_; }
    const SymmetricFactor& factor() const { return *factor_; }
    const std::vector<int>& interior() const { return interior_; }
    const SpMat& full_operator() const { return A_; }
    const Mesh& mesh() const { return *mesh_; }

    // Nodal solution with boundary trace f and optional load vector (already
    // multiplied by test functions, full numbering).
    Eigen::VectorXd solve(const Eigen::VectorXd& f, const Eigen::VectorXd* load = nullptr) const {
        const Mesh& mesh = *mesh_;
        const int nb = static_cast<int>(mesh.boundary.size());
        if (f.size() != nb) throw ArgumentError("solve_dirichlet: boundary data length mismatch");
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(interior_.size()));
        if (load)
            for (size_t k = 0; k < interior_.size(); ++k) rhs[k] = (*load)[interior_[k]];
        rhs -= AIB_ * f;
        const Eigen::VectorXd uI = factor_->solve(rhs);
        Eigen::VectorXd u(mesh.n_vertices());
        for (size_t k = 0; k < interior_.size(); ++k) u[interior_[k]] = uI[k];
        for (int k = 0; k < nb; ++k) u[mesh.boundary[k]] = f[k];
        return u;
    }

    CVec solve(const CVec& f) const {
        CVec u(mesh_->n_vertices());
        u.real() = solve(Eigen::VectorXd(f.real()));
        u.imag() = solve(Eigen::VectorXd(f.imag()));
        return u;
    }

    // Schur complement on the boundary: S = A_BB - A_BI A_II^{-1} A_IB. For a
    // discrete solution u with trace f, S f is the vector of boundary fluxes
    // tested against the boundary hat functions.
    Eigen::MatrixXd schur() const {
        const int nb = static_cast<int>(mesh_->boundary.size());
        const int ni = static_cast<int>(interior_.size());
        Eigen::MatrixXd S = ABB_;
        std::vector<std::vector<std::pair<int, double>>> Y(nb);
        std::vector<double> work(ni, 0.0);
        std::vector<int> mark(ni, -1);
        std::vector<int> rowcount(ni, 0);
        for (int a = 0; a < nb; ++a) {
            std::vector<std::pair<int, double>> b;
            for (SpMat::InnerIterator it(AIB_, a); it; ++it) b.emplace_back(static_cast<int>(it.row()), it.value());
            factor_->forward_sparse(b, Y[a], work, mark, a);
            for (auto& [k, v] : Y[a]) ++rowcount[k];
        }
        // rows touched by many columns go through a dense GEMM, the rest pairwise
        const int thresh = std::max(8, nb / 8);
        std::vector<int> dense_id(ni, -1);
        int nd = 0;
        for (int k = 0; k < ni; ++k)
            if (rowcount[k] >= thresh) dense_id[k] = nd++;
        Eigen::MatrixXd Yd = Eigen::MatrixXd::Zero(nd, nb);
        std::vector<std::vector<std::pair<int, double>>> rows(ni);
        for (int a = 0; a < nb; ++a)
            for (auto& [k, v] : Y[a]) {
                if (dense_id[k] >= 0)
                    Yd(dense_id[k], a) = v;
                else
                    rows[k].emplace_back(a, v);
            }
        Y.clear();
        Y.shrink_to_fit();
        if (nd > 0) {
            Eigen::VectorXd dinv(nd);
            for (int k = 0; k < ni; ++k)
                if (dense_id[k] >= 0) dinv[dense_id[k]] = 1.0 / factor_->diag(k);
            const Eigen::MatrixXd Z = dinv.asDiagonal() * Yd;
            S.noalias() -= Yd.transpose() * Z;
        }
        for (int k = 0; k < ni; ++k) {
            if (rows[k].empty()) continue;
            const double dinv = 1.0 / factor_->diag(k);
            for (auto& [a, va] : rows[k])
                for (auto& [b, vb] : rows[k]) S(a, b) -= va * vb * dinv;
        }
        return 0.5 * (S + S.transpose());
    }

private:
    void build(const MetricField& m, double lam) {
        const Mesh& mesh = *mesh_;
        A_ = assemble_helmholtz(m, mesh, *pat_, q_, lam, opt_.mass_blend);
        const int ni = static_cast<int>(interior_.size());
        const int nb = static_cast<int>(mesh.boundary.size());
        std::vector<Eigen::Triplet<double>> tII, tIB;
        ABB_ = Eigen::MatrixXd::Zero(nb, nb);
        tII.reserve(A_.nonZeros());
        for (int j = 0; j < A_.outerSize(); ++j)
            for (SpMat::InnerIterator it(A_, j); it; ++it) {
                const int i = static_cast<int>(it.row());
                if (local_[i] >= 0 && local_[j] >= 0)
                    tII.emplace_back(local_[i], local_[j], it.value());
                else if (local_[i] >= 0)
                    tIB.emplace_back(local_[i], bpos_[j], it.value());
                else if (local_[j] < 0)
                    ABB_(bpos_[i], bpos_[j]) += it.value();
            }
        SpMat AII(ni, ni);
        AII.setFromTriplets(tII.begin(), tII.end());
        tII.clear();
        tII.shrink_to_fit();
        AIB_ = SpMat(ni, nb);
        AIB_.setFromTriplets(tIB.begin(), tIB.end());
        factor_.reset();
        factor_ = std::make_unique<SymmetricFactor>(AII);
    }

    const Mesh* mesh_;
    ScalarField q_;
    double requested_, lambda_ = 0;
    HelmholtzOptions opt_;
    std::shared_ptr<const MeshPattern> pat_;
    std::vector<int> interior_, local_, bpos_;
    std::vector<double> shifts_;
    SpMat A_, AIB_;
    Eigen::MatrixXd ABB_;
    std::unique_ptr<SymmetricFactor> factor_;
};

inline Eigen::VectorXd solve_dirichlet(const MetricField& m, const Mesh& mesh, const ScalarField& q, double lambda,
                                       const Eigen::VectorXd& f, HelmholtzOptions opt = {}) {
    DirichletSolver s(m, mesh, q, lambda, opt);
    return s.solve(f);
}

// Dense boundary operator of the discrete Dirichlet-to-Neumann map. `flux`
// holds the Schur complement S (boundary fluxes tested against the hat basis);
// the Neumann coefficients are Lambda f = Mb^{-1} S f.
struct DNMatrix {
    double lambda = 0;
    double requested_lambda = 0;
    std::string potential_id;
    std::string mesh_hash;
    double h_mesh = 0;
    Eigen::MatrixXd flux;
    Eigen::MatrixXd bmass;

    int size() const { return static_cast<int>(flux.rows()); }

    Eigen::MatrixXd matrix() const { return bmass.llt().solve(flux); }

    double symmetry_defect() const {
        const Eigen::MatrixXd L = matrix();
        return (L - L.transpose()).norm() / L.norm();
    }

    // <Lambda f1, f2> in L^2(boundary), bilinear (no conjugation)
    cplx pairing(const CVec& f1, const CVec& f2) const { return f2.transpose() * (flux.cast<cplx>() * f1); }

    nlohmann::json header() const {
        return {{"lambda", lambda},        {"requested_lambda", requested_lambda},
                {"potential", potential_id}, {"mesh_hash", mesh_hash},
                {"h_mesh", h_mesh},        {"size", size()},
                {"layout", "row,col,value of Lambda = Mb^{-1} S in the boundary hat basis"}};
    }

    void write_csv(std::ostream& os) const {
        const Eigen::MatrixXd L = matrix();
        os << "row,col,value\n" << std::setprecision(17);
        for (int i = 0; i < L.rows(); ++i)
            for (int j = 0; j < L.cols(); ++j) os << i << ',' << j << ',' << L(i, j) << '\n';
    }
};

inline void require_same_pairing(const DNMatrix& a, const DNMatrix& b) {
    if (a.mesh_hash != b.mesh_hash) throw PairingError("DN maps were built on different meshes");
    if (a.lambda != b.lambda) {
        std::ostringstream os;
        os << "DN maps were built at different frequencies (" << std::setprecision(17) << a.lambda << " vs "
           << b.lambda << ")";
        throw PairingError(os.str());
    }
}

inline DNMatrix dn_map(const MetricField& m, const Mesh& mesh, const ScalarField& q, double lambda,
                       const std::string& potential_id = "q", HelmholtzOptions opt = {},
                       std::shared_ptr<const MeshPattern> pattern = nullptr) {
    DirichletSolver s(m, mesh, q, lambda, opt, std::move(pattern));
    DNMatrix d;
    d.lambda = s.lambda();
    d.requested_lambda = lambda;
    d.potential_id = potential_id;
    d.mesh_hash = mesh.hash;
    d.h_mesh = mesh.h_mesh;
    d.flux = s.schur();
    d.bmass = boundary_mass(m, mesh);
    return d;
}

// ---------------------------------------------------------------------------
// Resolvent scaling probe.

struct ResolventRow {
    double lambda;      // frequency actually used (after any guard shift)
    double lambda_u;    // lambda ||u||
    double du;          // ||du||
    double hess;        // lambda^{-1} ||Hess u||
    double f_norm;
    double ratio;       // lambda ||u|| / ||f||
};

namespace detail {

inline std::array<Vec2, 3> p1_gradients(const Mesh& mesh, size_t t, double& area) {
    const auto& T = mesh.triangles[t];
    const Vec2 p[3] = {mesh.vertices[T[0]], mesh.vertices[T[1]], mesh.vertices[T[2]]};
    const Vec2 e1 = p[1] - p[0], e2 = p[2] - p[0];
    area = 0.5 * (e1[0] * e2[1] - e1[1] * e2[0]);
    std::array<Vec2, 3> g;
    for (int i = 0; i < 3; ++i) {
        const Vec2& a = p[(i + 1) % 3];
        const Vec2& b = p[(i + 2) % 3];
        g[i] = Vec2(a[1] - b[1], b[0] - a[0]) / (2 * area);
    }
    return g;
}

} // namespace detail

struct FieldNorms {
    double l2, grad, hess;
};

// L2, gradient and covariant-Hessian norms of a nodal P1 field. The Hessian is
// obtained by recovering nodal gradients (area-weighted averages) and
// differentiating them elementwise, with the Christoffel correction.
// With within > 0 only triangles whose centroid lies inside that chart radius
// are integrated (gradient recovery still sees the whole mesh).
inline FieldNorms field_norms(const MetricField& m, const Mesh& mesh, const Eigen::VectorXd& u, double within = 0) {
    auto counted = [&](const Vec2& c) { return within <= 0 || c.norm() < within; };
    const size_t nv = mesh.n_vertices();
    std::vector<Vec2> rg(nv, Vec2::Zero());
    std::vector<double> rw(nv, 0.0);
    double l2 = 0, gr = 0;
    for (size_t t = 0; t < mesh.triangles.size(); ++t) {
        double area;
        auto G = detail::p1_gradients(mesh, t, area);
        const auto& T = mesh.triangles[t];
        Vec2 du = Vec2::Zero();
        for (int i = 0; i < 3; ++i) du += u[T[i]] * G[i];
        const Vec2 c = (mesh.vertices[T[0]] + mesh.vertices[T[1]] + mesh.vertices[T[2]]) / 3;
        for (int i = 0; i < 3; ++i) {
            rg[T[i]] += area * du;
            rw[T[i]] += area;
        }
        if (!counted(c)) continue;
        const double sg = m.sqrt_detg(c);
        gr += area * sg * du.dot(m.ginv(c) * du);
        // edge-midpoint rule for |u|^2
        for (int e = 0; e < 3; ++e) {
            const double um = 0.5 * (u[T[e]] + u[T[(e + 1) % 3]]);
            const Vec2 xm = 0.5 * (mesh.vertices[T[e]] + mesh.vertices[T[(e + 1) % 3]]);
            l2 += area / 3 * um * um * m.sqrt_detg(xm);
        }
    }
    for (size_t v = 0; v < nv; ++v) rg[v] /= rw[v];
    double hs = 0;
    for (size_t t = 0; t < mesh.triangles.size(); ++t) {
        double area;
        auto G = detail::p1_gradients(mesh, t, area);
        const auto& T = mesh.triangles[t];
        const Vec2 c = (mesh.vertices[T[0]] + mesh.vertices[T[1]] + mesh.vertices[T[2]]) / 3;
        if (!counted(c)) continue;
        Mat2 H = Mat2::Zero();
        Vec2 dbar = Vec2::Zero();
        for (int i = 0; i < 3; ++i) {
            H += rg[T[i]] * G[i].transpose(); // H(a,b) = d_b (d_a u)
            dbar += rg[T[i]] / 3;
        }
        H = 0.5 * (H + H.transpose()).eval();
        if (!m.is_flat()) {
            const Christoffel Gm = m.christoffel(c);
            for (int k = 0; k < 2; ++k) H -= dbar[k] * Gm[k];
        }
        const Mat2 gi = m.ginv(c);
        hs += area * m.sqrt_detg(c) * (gi * H * gi * H).trace();
    }
    return {std::sqrt(l2), std::sqrt(gr), std::sqrt(std::max(0.0, hs))};
}

inline FieldNorms field_norms(const MetricField& m, const Mesh& mesh, const CVec& u, double within = 0) {
    const FieldNorms a = field_norms(m, mesh, Eigen::VectorXd(u.real()), within);
    const FieldNorms b = field_norms(m, mesh, Eigen::VectorXd(u.imag()), within);
    return {std::hypot(a.l2, b.l2), std::hypot(a.grad, b.grad), std::hypot(a.hess, b.hess)};
}

// Boundary model of the resolvent probe. `dirichlet` solves with zero
// Dirichlet data on the boundary of M. `extension` solves on the collar disk
// of radius rho1 with the impedance condition d_nu u = i lambda u on its
// boundary and measures the restriction to M, which is a solution of the
// equation in M without any condition on the boundary of M.
enum class ProbeBoundary { dirichlet, extension };

using ProbeSource = std::function<cplx(const Vec2&, double)>;

// Zero-Dirichlet solve of (-Delta_g - lambda^2 + q) u = f for a complex source.
inline CVec solve_source_dirichlet(const DirichletSolver& s, const MetricField& m, const MeshPattern& pat,
                                   const CVec& fn) {
    const Mesh& mesh = s.mesh();
    const SpMat Mw = assemble_weighted(
        m, mesh, pat, [](const Vec2&) { return 1.0; }, false, 0.0);
    const Eigen::VectorXd zero = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(mesh.boundary.size()));
    const Eigen::VectorXd lr = Mw * Eigen::VectorXd(fn.real()), li = Mw * Eigen::VectorXd(fn.imag());
    CVec u(mesh.n_vertices());
    u.real() = s.solve(zero, &lr);
    u.imag() = s.solve(zero, &li);
    return u;
}

// Impedance solve on the whole mesh: (K + (q - lambda^2) M) u - i lambda Mb u = M f.
inline CVec solve_source_impedance(const MetricField& m, const Mesh& mesh, const MeshPattern& pat,
                                   const ScalarField& q, double lambda, const CVec& fn, double blend) {
    const SpMat A = assemble_helmholtz(m, mesh, pat, q, lambda, blend);
    const SpMat Mw = assemble_weighted(
        m, mesh, pat, [](const Vec2&) { return 1.0; }, false, 0.0);
    Eigen::SparseMatrix<cplx> Z = A.cast<cplx>();
    const Eigen::MatrixXd Mb = boundary_mass(m, mesh);
    const int nb = static_cast<int>(mesh.boundary.size());
    for (int a = 0; a < nb; ++a)
        for (int b : {(a + nb - 1) % nb, a, (a + 1) % nb})
            Z.coeffRef(mesh.boundary[a], mesh.boundary[b]) += cplx(0, -lambda * Mb(a, b));
    Z.makeCompressed();
    Eigen::UmfPackLU<Eigen::SparseMatrix<cplx>> lu(Z);
    if (lu.info() != Eigen::Success) throw Error("impedance solve: factorization failed");
    const CVec load = Mw.cast<cplx>() * fn;
    return lu.solve(load);
}

// Solves (-Delta_g - lambda^2 + q) u = f_lambda for each lambda and tabulates
// the scaled norms over M. For `dirichlet`, values of lambda that trip the
// near-eigenvalue guard are skipped (reported through `skipped`). For
// `extension` the mesh must be built out to the collar radius.
inline std::vector<ResolventRow> resolvent_probe(const MetricField& m, const Mesh& mesh, const ScalarField& q,
                                                 const std::vector<double>& lambdas, const ProbeSource& source,
                                                 ProbeBoundary boundary = ProbeBoundary::dirichlet,
                                                 std::vector<double>* skipped = nullptr, HelmholtzOptions opt = {}) {
    if (boundary == ProbeBoundary::extension && mesh.radius <= m.rho() * (1 + 1e-12))
        throw ArgumentError("resolvent_probe: extension probe needs a mesh reaching past rho");
    auto pat = std::make_shared<MeshPattern>(mesh);
    const double within = boundary == ProbeBoundary::extension ? m.rho() : 0.0;
    std::vector<ResolventRow> out;
    for (double lam : lambdas) {
        CVec u, fn(mesh.n_vertices());
        double used = lam;
        try {
            if (boundary == ProbeBoundary::dirichlet) {
                opt.max_retries = 0;
                DirichletSolver s(m, mesh, q, lam, opt, pat);
                used = s.lambda();
                for (size_t v = 0; v < mesh.n_vertices(); ++v) fn[v] = source(mesh.vertices[v], used);
                u = solve_source_dirichlet(s, m, *pat, fn);
            } else {
                check_resolution(mesh, lam, opt);
                for (size_t v = 0; v < mesh.n_vertices(); ++v) fn[v] = source(mesh.vertices[v], used);
                u = solve_source_impedance(m, mesh, *pat, q, lam, fn, opt.mass_blend);
            }
        } catch (const NearEigenvalueError&) {
            if (skipped) skipped->push_back(lam);
            if (opt.log) *opt.log << "resolvent probe: skipping lambda = " << lam << " (near-eigenvalue guard)\n";
            continue;
        }
        const FieldNorms nu = field_norms(m, mesh, u, within);
        const FieldNorms nf = field_norms(m, mesh, fn, within);
        out.push_back({used, used * nu.l2, nu.grad, nu.hess / used, nf.l2, nf.l2 > 0 ? used * nu.l2 / nf.l2 : 0.0});
    }
    return out;
}

} // namespace geobeam

#endif // GEOBEAM_HELMHOLTZ_HPP
