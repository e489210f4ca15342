#ifndef GEOBEAM_SPARSE_FACTOR_HPP
#define GEOBEAM_SPARSE_FACTOR_HPP

#include "geobeam/common.hpp"

#include <Eigen/Sparse>
#include <cholmod.h>

#include <memory>

namespace geobeam {

using SpMat = Eigen::SparseMatrix<double, Eigen::ColMajor, int>;

// Real symmetric (possibly indefinite) sparse LDL^T backed by CHOLMOD's
// simplicial factorization without pivoting. Fill-reducing ordering is chosen
// by CHOLMOD. After factorization the factor is kept packed and monotonic so
// the columns can be walked directly for sparse triangular solves.
class SymmetricFactor {
public:
    explicit SymmetricFactor(const SpMat& A) {
        if (A.rows() != A.cols()) throw ArgumentError("SymmetricFactor: matrix must be square");
        cholmod_start(&c_);
        c_.supernodal = CHOLMOD_SIMPLICIAL;
        c_.final_ll = 0;
        c_.final_pack = 1;
        c_.final_monotonic = 1;
        c_.quick_return_if_not_posdef = 0;
        c_.print = 0;
        n_ = static_cast<int>(A.rows());

        // lower triangle, CSC
        SpMat lower = A.triangularView<Eigen::Lower>();
        lower.makeCompressed();
        cholmod_sparse* S = cholmod_allocate_sparse(n_, n_, lower.nonZeros(), 1, 1, -1, CHOLMOD_REAL, &c_);
        std::copy(lower.outerIndexPtr(), lower.outerIndexPtr() + n_ + 1, static_cast<int*>(S->p));
        std::copy(lower.innerIndexPtr(), lower.innerIndexPtr() + lower.nonZeros(), static_cast<int*>(S->i));
        std::copy(lower.valuePtr(), lower.valuePtr() + lower.nonZeros(), static_cast<double*>(S->x));

        L_ = cholmod_analyze(S, &c_);
        if (!L_) {
            cholmod_free_sparse(&S, &c_);
            cholmod_finish(&c_);
            throw Error("SymmetricFactor: symbolic analysis failed");
        }
        cholmod_factorize(S, L_, &c_);
        cholmod_free_sparse(&S, &c_);
        if (c_.status < CHOLMOD_OK) {
            cholmod_free_factor(&L_, &c_);
            cholmod_finish(&c_);
            throw Error("SymmetricFactor: numeric factorization failed");
        }
        if (L_->is_super || L_->is_ll) cholmod_change_factor(CHOLMOD_REAL, 0, 0, 1, 1, L_, &c_);

        const int* Lp = static_cast<const int*>(L_->p);
        const int* Li = static_cast<const int*>(L_->i);
        const double* Lx = static_cast<const double*>(L_->x);
        const int* perm = static_cast<const int*>(L_->Perm);
        perm_.assign(perm, perm + n_);
        pos_.assign(n_, 0);
        for (int k = 0; k < n_; ++k) pos_[perm_[k]] = k;
        parent_.assign(n_, -1);
        dmin_ = std::numeric_limits<double>::infinity();
        dmax_ = 0;
        nonfinite_ = false;
        for (int j = 0; j < n_; ++j) {
            if (Li[Lp[j]] != j) throw Error("SymmetricFactor: unexpected factor layout");
            const double d = Lx[Lp[j]];
            if (!std::isfinite(d)) nonfinite_ = true;
            dmin_ = std::min(dmin_, std::abs(d));
            dmax_ = std::max(dmax_, std::abs(d));
            int par = n_;
            for (int p = Lp[j] + 1; p < Lp[j + 1]; ++p) par = std::min(par, Li[p]);
            parent_[j] = par == n_ ? -1 : par;
        }
    }

    ~SymmetricFactor() {
        if (L_) cholmod_free_factor(&L_, &c_);
        cholmod_finish(&c_);
    }
    SymmetricFactor(const SymmetricFactor&) = delete;
    SymmetricFactor& operator=(const SymmetricFactor&) = delete;

    int size() const { return n_; }
    // min |D| / max |D|; a tiny ratio signals a near-singular (near-eigenvalue) system
    double pivot_ratio() const {
        if (nonfinite_ || dmax_ == 0) return 0.0;
        return dmin_ / dmax_;
    }
    long factor_nnz() const { return static_cast<long>(static_cast<const int*>(L_->p)[n_]); }

    Eigen::MatrixXd solve(const Eigen::MatrixXd& B) const {
        if (B.rows() != n_) throw ArgumentError("SymmetricFactor::solve: dimension mismatch");
        Eigen::MatrixXd X(n_, B.cols());
        const int block = 32;
        for (int c0 = 0; c0 < B.cols(); c0 += block) {
            const int nc = std::min<int>(block, static_cast<int>(B.cols()) - c0);
            cholmod_dense* b = cholmod_allocate_dense(n_, nc, n_, CHOLMOD_REAL, &c_);
            Eigen::Map<Eigen::MatrixXd>(static_cast<double*>(b->x), n_, nc) = B.middleCols(c0, nc);
            cholmod_dense* x = cholmod_solve(CHOLMOD_A, L_, b, &c_);
            X.middleCols(c0, nc) = Eigen::Map<Eigen::MatrixXd>(static_cast<double*>(x->x), n_, nc);
            cholmod_free_dense(&x, &c_);
            cholmod_free_dense(&b, &c_);
        }
        return X;
    }

    Eigen::VectorXd solve(const Eigen::VectorXd& b) const {
        Eigen::MatrixXd B = b;
        return solve(B).col(0);
    }

    // Sparse forward solve y = L^{-1} P b for a sparse right-hand side given in
    // original numbering. Returns (permuted index, value) pairs sorted by index.
    // `work` and `mark` are caller-owned scratch arrays of length n, zeroed.
    void forward_sparse(const std::vector<std::pair<int, double>>& b, std::vector<std::pair<int, double>>& y,
                        std::vector<double>& work, std::vector<int>& mark, int stamp) const {
        std::vector<int> reach;
        for (auto [i, v] : b) {
            int k = pos_[i];
            work[k] += v;
            while (k != -1 && mark[k] != stamp) {
                mark[k] = stamp;
                reach.push_back(k);
                k = parent_[k];
            }
        }
        std::sort(reach.begin(), reach.end());
        const int* Lp = static_cast<const int*>(L_->p);
        const int* Li = static_cast<const int*>(L_->i);
        const double* Lx = static_cast<const double*>(L_->x);
        y.clear();
        y.reserve(reach.size());
        for (int j : reach) {
            const double xj = work[j];
            work[j] = 0;
            if (xj == 0) continue;
            for (int p = Lp[j] + 1; p < Lp[j + 1]; ++p) work[Li[p]] -= Lx[p] * xj;
            y.emplace_back(j, xj);
        }
    }

    double diag(int k) const {
        return static_cast<const double*>(L_->x)[static_cast<const int*>(L_->p)[k]];
    }

private:
    mutable cholmod_common c_;
    cholmod_factor* L_ = nullptr;
    int n_ = 0;
    std::vector<int> perm_, pos_, parent_;
    double dmin_ = 0, dmax_ = 0;
    bool nonfinite_ = false;
};

} // namespace geobeam

#endif // GEOBEAM_SPARSE_FACTOR_HPP
