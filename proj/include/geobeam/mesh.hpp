#ifndef GEOBEAM_MESH_HPP
#define GEOBEAM_MESH_HPP

#include "geobeam/metric.hpp"

namespace geobeam {

struct Mesh {
    std::vector<Vec2> vertices;
    std::vector<std::array<int, 3>> triangles;
    std::vector<int> boundary;   // counterclockwise boundary ring
    std::vector<int> is_boundary; // per-vertex flag
    int rings = 0;
    double radius = 0;
    double h_mesh = 0;   // ring spacing inside rho, the characteristic size
    double h_max = 0;    // longest edge in chart units
    double h_metric = 0; // characteristic size measured in g-length (worst point)
    double min_angle_deg = 0;
    std::string hash;

    size_t n_vertices() const { return vertices.size(); }

    double triangle_area(size_t t) const {
        const auto& T = triangles[t];
        const Vec2 a = vertices[T[1]] - vertices[T[0]], b = vertices[T[2]] - vertices[T[0]];
        return 0.5 * (a[0] * b[1] - a[1] * b[0]);
    }

    double area() const {
        double s = 0;
        for (size_t t = 0; t < triangles.size(); ++t) s += triangle_area(t);
        return s;
    }

    double perimeter() const {
        double s = 0;
        for (size_t k = 0; k < boundary.size(); ++k)
            s += (vertices[boundary[(k + 1) % boundary.size()]] - vertices[boundary[k]]).norm();
        return s;
    }
};

namespace detail {

inline void ring_mesh_topology(const std::vector<double>& radii, Mesh& M) {
    const int nr = static_cast<int>(radii.size()) - 1;
    M.vertices.clear();
    M.triangles.clear();
    M.vertices.push_back(Vec2::Zero());
    std::vector<int> start(nr + 1, 0);
    for (int i = 1; i <= nr; ++i) {
        start[i] = static_cast<int>(M.vertices.size());
        const int n = 6 * i;
        for (int j = 0; j < n; ++j) {
            const double a = 2 * kPi * j / n;
            M.vertices.push_back(radii[i] * Vec2(std::cos(a), std::sin(a)));
        }
    }
    for (int j = 0; j < 6; ++j) M.triangles.push_back({0, start[1] + j, start[1] + (j + 1) % 6});
    for (int i = 2; i <= nr; ++i) {
        const int ni = 6 * (i - 1), no = 6 * i;
        // zipper between ring i-1 (inner) and ring i (outer), taking the shorter
        // of the two candidate diagonals at each step
        int a = 0, b = 0;
        while (a < ni || b < no) {
            const int ia = start[i - 1] + a % ni, ia1 = start[i - 1] + (a + 1) % ni;
            const int ib = start[i] + b % no, ib1 = start[i] + (b + 1) % no;
            const double d_out = (M.vertices[ia] - M.vertices[ib1]).norm();
            const double d_in = (M.vertices[ia1] - M.vertices[ib]).norm();
            if (b < no && (a >= ni || d_out <= d_in * (1 + 1e-12))) {
                M.triangles.push_back({ia, ib, ib1});
                ++b;
            } else {
                M.triangles.push_back({ia, ib, ia1});
                ++a;
            }
        }
    }
    for (auto& T : M.triangles) {
        const Vec2 u = M.vertices[T[1]] - M.vertices[T[0]], w = M.vertices[T[2]] - M.vertices[T[0]];
        if (u[0] * w[1] - u[1] * w[0] < 0) std::swap(T[1], T[2]);
    }
    M.boundary.clear();
    for (int j = 0; j < 6 * nr; ++j) M.boundary.push_back(start[nr] + j);
    M.is_boundary.assign(M.vertices.size(), 0);
    for (int b : M.boundary) M.is_boundary[b] = 1;
    M.rings = nr;
    M.radius = radii[nr];
}

inline double max_edge(const Mesh& M) {
    double h = 0;
    for (const auto& T : M.triangles)
        for (int e = 0; e < 3; ++e) h = std::max(h, (M.vertices[T[e]] - M.vertices[T[(e + 1) % 3]]).norm());
    return h;
}

} // namespace detail

// Deterministic concentric-ring triangulation of the chart disk of radius rho:
// ring i carries 6 i vertices and rings are spaced rho / rings <= h_mesh apart.
// With outer_radius > rho the rings continue past rho (which stays a ring) up
// to outer_radius at about the same spacing; used for solves on the extension.
inline Mesh build_mesh(const MetricField& m, double h_mesh, double outer_radius = 0) {
    if (!(h_mesh > 0)) throw ArgumentError("build_mesh: h_mesh must be positive");
    const double R = m.rho();
    Mesh M;
    const int nr = std::max(1, static_cast<int>(std::ceil(R / h_mesh * (1 - 1e-12))));
    std::vector<double> radii(nr + 1);
    for (int i = 0; i <= nr; ++i) radii[i] = R * i / nr;
    if (outer_radius > R) {
        if (!m.in_domain(Vec2(outer_radius, 0))) throw DomainError("build_mesh: outer radius leaves the metric domain");
        const int ne = static_cast<int>(std::ceil((outer_radius - R) / (R / nr) * (1 - 1e-12)));
        for (int i = 1; i <= ne; ++i) radii.push_back(R + (outer_radius - R) * i / ne);
    }
    detail::ring_mesh_topology(radii, M);
    M.h_mesh = R / nr;
    M.h_max = detail::max_edge(M);
    double hm = 0, amin = kPi;
    for (const auto& T : M.triangles) {
        for (int e = 0; e < 3; ++e) {
            const Vec2 p = M.vertices[T[e]], q = M.vertices[T[(e + 1) % 3]], r = M.vertices[T[(e + 2) % 3]];
            const Vec2 u = (q - p).normalized(), w = (r - p).normalized();
            amin = std::min(amin, std::acos(std::clamp(u.dot(w), -1.0, 1.0)));
        }
    }
    for (const auto& v : M.vertices)
        hm = std::max(hm, std::sqrt(Eigen::SelfAdjointEigenSolver<Mat2>(m.g(v)).eigenvalues().maxCoeff()));
    M.h_metric = hm * M.h_mesh;
    M.min_angle_deg = amin * 180 / kPi;
    if (M.min_angle_deg < 20.0) {
        std::ostringstream os;
        os << "build_mesh: minimum angle " << M.min_angle_deg << " deg below the 20 deg quality guard";
        throw QualityError(os.str());
    }
    Hasher h;
    for (const auto& v : M.vertices) {
        h.add(v[0]);
        h.add(v[1]);
    }
    for (const auto& T : M.triangles)
        for (int k : T) h.add(static_cast<int64_t>(k));
    M.hash = h.hex();
    return M;
}

// Ring mesh with lambda * h_metric <= kh.
inline Mesh mesh_for(const MetricField& m, double lambda, double kh) {
    double h = kh / lambda;
    for (int it = 0; it < 8; ++it) {
        Mesh M = build_mesh(m, h);
        if (lambda * M.h_metric <= kh * (1 + 1e-12)) return M;
        h *= 0.999 * kh / (lambda * M.h_metric);
    }
    throw ResolutionError("mesh_for: could not meet the resolution target");
}

} // namespace geobeam

#endif // GEOBEAM_MESH_HPP
