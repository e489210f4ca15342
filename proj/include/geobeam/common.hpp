#ifndef GEOBEAM_COMMON_HPP
#define GEOBEAM_COMMON_HPP

#include <Eigen/Dense>

#include <array>
#include <complex>
#include <cstdint>
#include <cstring>
#include <functional>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace geobeam {

using Vec2 = Eigen::Vector2d;
using Mat2 = Eigen::Matrix2d;
using cplx = std::complex<double>;
using ScalarField = std::function<double(const Vec2&)>;

inline constexpr double kPi = std::numbers::pi;

// Error hierarchy. Every failure mode named by the library gets its own type so
// callers (and the CLI) can attribute aborts to a stage.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ArgumentError : Error {
    using Error::Error;
};
struct DomainError : Error {
    using Error::Error;
};
struct RangeError : Error {
    using Error::Error;
};
struct NontrappingError : Error {
    using Error::Error;
};
struct NonSimpleError : Error {
    using Error::Error;
};
struct BlowUpError : Error {
    using Error::Error;
};
struct InjectivityError : Error {
    using Error::Error;
};
struct ResolutionError : Error {
    using Error::Error;
};
struct NearEigenvalueError : Error {
    using Error::Error;
};
struct PairingError : Error {
    using Error::Error;
};
struct QualityError : Error {
    using Error::Error;
};
struct AdmissibilityError : Error {
    using Error::Error;
};

struct ConvergenceError : Error {
    ConvergenceError(const std::string& what, std::vector<double> hist)
        : Error(what), history(std::move(hist)) {}
    std::vector<double> history;
};

// Least-squares slope of log(y) against log(x).
inline double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2)
        throw ArgumentError("loglog_slope: need at least two matched samples");
    double mx = 0, my = 0;
    const double n = static_cast<double>(x.size());
    for (size_t i = 0; i < x.size(); ++i) {
        mx += std::log(x[i]);
        my += std::log(y[i]);
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0;
    for (size_t i = 0; i < x.size(); ++i) {
        const double dx = std::log(x[i]) - mx;
        sxy += dx * (std::log(y[i]) - my);
        sxx += dx * dx;
    }
    return sxy / sxx;
}

// FNV-1a over raw bytes; used for mesh and metric fingerprints.
class Hasher {
public:
    void bytes(const void* p, size_t n) {
        auto c = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < n; ++i) {
            h_ ^= c[i];
            h_ *= 1099511628211ull;
        }
    }
    void add(double v) { bytes(&v, sizeof v); }
    void add(int64_t v) { bytes(&v, sizeof v); }
    void add(const std::string& s) { bytes(s.data(), s.size()); }
    uint64_t value() const { return h_; }
    std::string hex() const {
        std::ostringstream os;
        os << std::hex << std::setw(16) << std::setfill('0') << h_;
        return os.str();
    }

private:
    uint64_t h_ = 1469598103934665603ull;
};

// Gauss-Legendre nodes and weights on [-1,1] via Newton on P_n.
inline void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
    x.assign(n, 0.0);
    w.assign(n, 0.0);
    for (int i = 0; i < (n + 1) / 2; ++i) {
        double z = std::cos(kPi * (i + 0.75) / (n + 0.5));
        double pp = 0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1, p1 = 0;
            for (int k = 1; k <= n; ++k) {
                const double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * k - 1) * z * p1 - (k - 1.0) * p2) / k;
            }
            pp = n * (z * p0 - p1) / (z * z - 1);
            const double dz = p0 / pp;
            z -= dz;
            if (std::abs(dz) < 1e-15) break;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = w[n - 1 - i] = 2.0 / ((1 - z * z) * pp * pp);
    }
}

inline double wrap_angle(double a) {
    a = std::fmod(a + kPi, 2 * kPi);
    if (a < 0) a += 2 * kPi;
    return a - kPi;
}

// Worker count used by the loops below; 0 means hardware concurrency.
inline int& thread_count() {
    static int n = 1;
    return n;
}

// Runs body(i) for i in [0, n) over contiguous chunks. Each index is owned by
// exactly one worker, so results written per index are deterministic.
template <class F>
void parallel_for(size_t n, F&& body) {
    int t = thread_count();
    if (t <= 0) t = std::max(1u, std::thread::hardware_concurrency());
    if (t == 1 || n < 2) {
        for (size_t i = 0; i < n; ++i) body(i);
        return;
    }
    t = static_cast<int>(std::min<size_t>(t, n));
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errs(t);
    for (int w = 0; w < t; ++w)
        pool.emplace_back([&, w] {
            try {
                for (size_t i = n * w / t; i < n * (w + 1) / t; ++i) body(i);
            } catch (...) {
                errs[w] = std::current_exception();
            }
        });
    for (auto& th : pool) th.join();
    for (auto& e : errs)
        if (e) std::rethrow_exception(e);
}

} // namespace geobeam

#endif // GEOBEAM_COMMON_HPP
