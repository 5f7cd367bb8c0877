#include "batmarl/kernels.hpp"

#include <Eigen/Dense>

namespace batmarl::kernels {

namespace {
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const Mat>;
using MMap = Eigen::Map<Mat>;
}  // namespace

void gemm(const double* a, const double* b, double* c, int r, int n, int m, bool accumulate) {
    CMap A(a, r, n), B(b, n, m);
    MMap C(c, r, m);
    if (accumulate)
        C.noalias() += A * B;
    else
        C.noalias() = A * B;
}

void gemm_at(const double* a, const double* b, double* c, int r, int n, int m, bool accumulate) {
    CMap A(a, r, n), B(b, r, m);
    MMap C(c, n, m);
    if (accumulate)
        C.noalias() += A.transpose() * B;
    else
        C.noalias() = A.transpose() * B;
}

void gemm_bt(const double* a, const double* b, double* c, int r, int n, int m, bool accumulate) {
    CMap A(a, r, m), B(b, n, m);
    MMap C(c, r, n);
    if (accumulate)
        C.noalias() += A * B.transpose();
    else
        C.noalias() = A * B.transpose();
}

void colsum(const double* a, double* out, int r, int m, bool accumulate) {
    CMap A(a, r, m);
    Eigen::Map<Eigen::RowVectorXd> O(out, m);
    if (accumulate)
        O.noalias() += A.colwise().sum();
    else
        O.noalias() = A.colwise().sum();
}

}  // namespace batmarl::kernels
