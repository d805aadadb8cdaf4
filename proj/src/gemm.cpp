#include "affordgen/gemm.hpp"

#include <Eigen/Dense>

namespace afford {

namespace {
using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const Mat>;
using MMap = Eigen::Map<Mat>;
} // namespace

void gemm(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
          bool trans_a, bool trans_b, bool accumulate) {
    MMap cm(c, m, n);
    const CMap am(a, trans_a ? k : m, trans_a ? m : k);
    const CMap bm(b, trans_b ? n : k, trans_b ? k : n);
    if (!trans_a && !trans_b) {
        if (accumulate) cm.noalias() += am * bm;
        else cm.noalias() = am * bm;
    } else if (trans_a && !trans_b) {
        if (accumulate) cm.noalias() += am.transpose() * bm;
        else cm.noalias() = am.transpose() * bm;
    } else if (!trans_a && trans_b) {
        if (accumulate) cm.noalias() += am * bm.transpose();
        else cm.noalias() = am * bm.transpose();
    } else {
        if (accumulate) cm.noalias() += am.transpose() * bm.transpose();
        else cm.noalias() = am.transpose() * bm.transpose();
    }
}

} // namespace afford
