#include "affordgen/tape.hpp"

#include <algorithm>
#include <cmath>

#include "affordgen/gemm.hpp"

namespace afford {

namespace {

void expect_rank(const Tensor& t, int rank, const char* where) {
    if (t.rank() != rank) {
        raise(ErrorCode::Dimension, std::string(where) + ": expected rank " + std::to_string(rank) +
                                        ", got " + t.shape_str());
    }
}

// Rows = product of leading dims, cols = last dim.
std::pair<int64_t, int64_t> as_rows(const Tensor& t) {
    const int64_t c = t.dim(t.rank() - 1);
    return {t.numel() / c, c};
}

// (B, H, W, C) with B = 1 for rank-3 inputs.
struct MapDims {
    int64_t b, h, w, c;
};

MapDims map_dims(const Tensor& t, const char* where) {
    if (t.rank() == 3) return {1, t.dim(0), t.dim(1), t.dim(2)};
    if (t.rank() == 4) return {t.dim(0), t.dim(1), t.dim(2), t.dim(3)};
    raise(ErrorCode::Dimension, std::string(where) + ": expected rank 3 or 4, got " + t.shape_str());
}

int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// col[(oy*ow+ox), ((ky*kw+kx)*cin+ci)] = x[oy*s-p+ky, ox*s-p+kx, ci] or 0.
void im2col(const Tensor& x, int64_t kh, int64_t kw, int64_t stride, int64_t pad, int64_t oh,
            int64_t ow, Tensor& col) {
    const int64_t h = x.dim(0), w = x.dim(1), cin = x.dim(2);
    const double* xd = x.data();
    double* cd = col.data();
    const int64_t patch = kh * kw * cin;
    for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
            double* row = cd + (oy * ow + ox) * patch;
            for (int64_t ky = 0; ky < kh; ++ky) {
                const int64_t iy = oy * stride - pad + ky;
                for (int64_t kx = 0; kx < kw; ++kx) {
                    const int64_t ix = ox * stride - pad + kx;
                    double* dst = row + (ky * kw + kx) * cin;
                    if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
                        std::fill(dst, dst + cin, 0.0);
                    } else {
                        const double* src = xd + (iy * w + ix) * cin;
                        std::copy(src, src + cin, dst);
                    }
                }
            }
        }
    }
}

void col2im_add(const Tensor& col, int64_t kh, int64_t kw, int64_t stride, int64_t pad, int64_t oh,
                int64_t ow, Tensor& gx) {
    const int64_t h = gx.dim(0), w = gx.dim(1), cin = gx.dim(2);
    const double* cd = col.data();
    double* gd = gx.data();
    const int64_t patch = kh * kw * cin;
    for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
            const double* row = cd + (oy * ow + ox) * patch;
            for (int64_t ky = 0; ky < kh; ++ky) {
                const int64_t iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                for (int64_t kx = 0; kx < kw; ++kx) {
                    const int64_t ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= w) continue;
                    const double* src = row + (ky * kw + kx) * cin;
                    double* dst = gd + (iy * w + ix) * cin;
                    for (int64_t ci = 0; ci < cin; ++ci) dst[ci] += src[ci];
                }
            }
        }
    }
}

} // namespace

void GradSink::accumulate(int index, const Tensor& g) {
    Tensor& slot = grads_[static_cast<size_t>(index)];
    if (slot.empty()) {
        slot = g;
        return;
    }
    check_same_shape(slot, g, "GradSink::accumulate");
    double* d = slot.data();
    const double* s = g.data();
    for (int64_t i = 0; i < slot.numel(); ++i) d[i] += s[i];
}

void GradSink::add_from(const GradSink& other) {
    for (size_t i = 0; i < grads_.size(); ++i) {
        if (!other.grads_[i].empty()) accumulate(static_cast<int>(i), other.grads_[i]);
    }
}

void GradSink::scale_all(double s) {
    for (Tensor& g : grads_) {
        for (double& v : g.values()) v *= s;
    }
}

void GradSink::clear() {
    for (Tensor& g : grads_) g = Tensor();
}

VarId Tape::push(Tensor value, bool requires_grad, std::function<void(Tape&)> backward_fn) {
    debug_check_finite(value, "tape op output");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward_fn);
    nodes_.push_back(std::move(n));
    return static_cast<VarId>(nodes_.size()) - 1;
}

const Tensor& Tape::val(VarId id) const {
    const Node& n = node(id);
    return n.external ? *n.external : n.value;
}

Tensor& Tape::grad_buf(VarId id) {
    Node& n = node(id);
    if (n.grad.empty()) n.grad = Tensor::zeros(val(id).shape());
    return n.grad;
}

bool Tape::grad_ready(VarId id) const { return !node(id).grad.empty(); }

Tensor Tape::grad_of(VarId id) const {
    const Node& n = node(id);
    if (n.grad.empty()) return Tensor::zeros(val(id).shape());
    return n.grad;
}

VarId Tape::constant(Tensor value) { return push(std::move(value), false, nullptr); }

VarId Tape::input(Tensor value, bool requires_grad) {
    return push(std::move(value), requires_grad, nullptr);
}

VarId Tape::param(const ParamSet& set, int index) {
    const Parameter& p = set.at(index);
    Node n;
    n.external = &p.value;
    n.requires_grad = p.trainable;
    n.param_index = index;
    nodes_.push_back(std::move(n));
    return static_cast<VarId>(nodes_.size()) - 1;
}

VarId Tape::matmul(VarId a, VarId b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    expect_rank(av, 2, "matmul lhs");
    expect_rank(bv, 2, "matmul rhs");
    if (av.dim(1) != bv.dim(0)) {
        raise(ErrorCode::Dimension,
              "matmul: inner dims disagree " + av.shape_str() + " vs " + bv.shape_str());
    }
    const int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out({m, n});
    gemm(av.data(), bv.data(), out.data(), m, k, n, false, false, false);
    const bool rg = requires(a) || requires(b);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, a, b, m, k, n](Tape& t) {
            const Tensor& g = t.node(id).grad;
            if (t.requires(a)) // ga += g . b^T
                gemm(g.data(), t.val(b).data(), t.grad_buf(a).data(), m, n, k, false, true, true);
            if (t.requires(b)) // gb += a^T . g
                gemm(t.val(a).data(), g.data(), t.grad_buf(b).data(), k, m, n, true, false, true);
        };
    }
    return id;
}

VarId Tape::matmul_nt(VarId a, VarId b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    expect_rank(av, 2, "matmul_nt lhs");
    expect_rank(bv, 2, "matmul_nt rhs");
    if (av.dim(1) != bv.dim(1)) {
        raise(ErrorCode::Dimension,
              "matmul_nt: inner dims disagree " + av.shape_str() + " vs " + bv.shape_str());
    }
    const int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
    Tensor out({m, n});
    gemm(av.data(), bv.data(), out.data(), m, k, n, false, true, false);
    const bool rg = requires(a) || requires(b);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, a, b, m, k, n](Tape& t) {
            const Tensor& g = t.node(id).grad;
            if (t.requires(a)) // ga += g . b
                gemm(g.data(), t.val(b).data(), t.grad_buf(a).data(), m, n, k, false, false, true);
            if (t.requires(b)) // gb += g^T . a
                gemm(g.data(), t.val(a).data(), t.grad_buf(b).data(), n, m, k, true, false, true);
        };
    }
    return id;
}

VarId Tape::affine(VarId x, VarId w, VarId b) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    const Tensor& bv = val(b);
    expect_rank(xv, 1, "affine input");
    expect_rank(wv, 2, "affine weight");
    expect_rank(bv, 1, "affine bias");
    if (xv.dim(0) != wv.dim(0) || wv.dim(1) != bv.dim(0)) {
        raise(ErrorCode::Dimension, "affine: incompatible shapes " + xv.shape_str() + ", " +
                                        wv.shape_str() + ", " + bv.shape_str());
    }
    const int64_t k = wv.dim(0), n = wv.dim(1);
    Tensor out({n});
    gemm(xv.data(), wv.data(), out.data(), 1, k, n, false, false, false);
    for (int64_t i = 0; i < n; ++i) out[i] += bv[i];
    const bool rg = requires(x) || requires(w) || requires(b);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, w, b, k, n](Tape& t) {
            const Tensor& g = t.node(id).grad;
            if (t.requires(x)) // gx += w . g
                gemm(t.val(w).data(), g.data(), t.grad_buf(x).data(), k, n, 1, false, true, true);
            if (t.requires(w)) // gw += outer(x, g)
                gemm(t.val(x).data(), g.data(), t.grad_buf(w).data(), k, 1, n, true, false, true);
            if (t.requires(b)) {
                Tensor& gb = t.grad_buf(b);
                for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
            }
        };
    }
    return id;
}

VarId Tape::add(VarId a, VarId b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    check_same_shape(av, bv, "add");
    Tensor out = av;
    const double* s = bv.data();
    double* d = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) d[i] += s[i];
    const bool rg = requires(a) || requires(b);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, a, b](Tape& t) {
            const Tensor& g = t.node(id).grad;
            for (VarId p : {a, b}) {
                if (!t.requires(p)) continue;
                Tensor& gp = t.grad_buf(p);
                for (int64_t i = 0; i < g.numel(); ++i) gp[i] += g[i];
            }
        };
    }
    return id;
}

VarId Tape::sub(VarId a, VarId b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    check_same_shape(av, bv, "sub");
    Tensor out = av;
    const double* s = bv.data();
    double* d = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) d[i] -= s[i];
    const bool rg = requires(a) || requires(b);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, a, b](Tape& t) {
            const Tensor& g = t.node(id).grad;
            if (t.requires(a)) {
                Tensor& ga = t.grad_buf(a);
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
            }
            if (t.requires(b)) {
                Tensor& gb = t.grad_buf(b);
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
            }
        };
    }
    return id;
}

VarId Tape::mul(VarId a, VarId b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    check_same_shape(av, bv, "mul");
    Tensor out = av;
    const double* s = bv.data();
    double* d = out.data();
    for (int64_t i = 0; i < out.numel(); ++i) d[i] *= s[i];
    const bool rg = requires(a) || requires(b);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, a, b](Tape& t) {
            const Tensor& g = t.node(id).grad;
            if (t.requires(a)) {
                Tensor& ga = t.grad_buf(a);
                const Tensor& bv2 = t.val(b);
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv2[i];
            }
            if (t.requires(b)) {
                Tensor& gb = t.grad_buf(b);
                const Tensor& av2 = t.val(a);
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av2[i];
            }
        };
    }
    return id;
}

VarId Tape::scale(VarId a, double c) {
    Tensor out = val(a);
    for (double& v : out.values()) v *= c;
    const bool rg = requires(a);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, a, c](Tape& t) {
            const Tensor& g = t.node(id).grad;
            Tensor& ga = t.grad_buf(a);
            for (int64_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
        };
    }
    return id;
}

VarId Tape::relu(VarId a) {
    Tensor out = val(a);
    for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
    const bool rg = requires(a);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, a](Tape& t) {
            const Tensor& g = t.node(id).grad;
            const Tensor& xv = t.val(a);
            Tensor& ga = t.grad_buf(a);
            for (int64_t i = 0; i < g.numel(); ++i) {
                if (xv[i] > 0.0) ga[i] += g[i];
            }
        };
    }
    return id;
}

VarId Tape::clamp(VarId a, double lo, double hi) {
    Tensor out = val(a);
    for (double& v : out.values()) v = std::min(hi, std::max(lo, v));
    const bool rg = requires(a);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, a, lo, hi](Tape& t) {
            const Tensor& g = t.node(id).grad;
            const Tensor& xv = t.val(a);
            Tensor& ga = t.grad_buf(a);
            for (int64_t i = 0; i < g.numel(); ++i) {
                if (xv[i] > lo && xv[i] < hi) ga[i] += g[i];
            }
        };
    }
    return id;
}

VarId Tape::softmax_rows(VarId a) {
    const Tensor& av = val(a);
    auto [rows, cols] = as_rows(av);
    Tensor out = av;
    double* d = out.data();
    for (int64_t r = 0; r < rows; ++r) {
        double* row = d + r * cols;
        double mx = row[0];
        for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < cols; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int64_t j = 0; j < cols; ++j) row[j] /= sum;
    }
    const bool rg = requires(a);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, a, rows = rows, cols = cols](Tape& t) {
            const Tensor& g = t.node(id).grad;
            const Tensor& y = t.val(id);
            Tensor& ga = t.grad_buf(a);
            for (int64_t r = 0; r < rows; ++r) {
                const double* gr = g.data() + r * cols;
                const double* yr = y.data() + r * cols;
                double dot = 0.0;
                for (int64_t j = 0; j < cols; ++j) dot += gr[j] * yr[j];
                double* gar = ga.data() + r * cols;
                for (int64_t j = 0; j < cols; ++j) gar[j] += yr[j] * (gr[j] - dot);
            }
        };
    }
    return id;
}

VarId Tape::rmsnorm(VarId x, VarId gamma, double eps) {
    const Tensor& xv = val(x);
    const Tensor& gv = val(gamma);
    expect_rank(gv, 1, "rmsnorm gain");
    auto [rows, cols] = as_rows(xv);
    if (cols != gv.dim(0)) {
        raise(ErrorCode::Dimension,
              "rmsnorm: channel count " + xv.shape_str() + " vs gain " + gv.shape_str());
    }
    const double root_n = std::sqrt(static_cast<double>(cols));
    Tensor out(xv.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * cols;
        double* yr = out.data() + r * cols;
        double nrm = 0.0;
        for (int64_t j = 0; j < cols; ++j) nrm += xr[j] * xr[j];
        nrm = std::sqrt(nrm);
        const double denom = std::max(nrm, eps);
        const double s = root_n / denom;
        for (int64_t j = 0; j < cols; ++j) yr[j] = gv[j] * xr[j] * s;
    }
    const bool rg = requires(x) || requires(gamma);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, gamma, eps, rows = rows, cols = cols, root_n](Tape& t) {
            const Tensor& g = t.node(id).grad;
            const Tensor& xv2 = t.val(x);
            const Tensor& gm = t.val(gamma);
            for (int64_t r = 0; r < rows; ++r) {
                const double* xr = xv2.data() + r * cols;
                const double* gr = g.data() + r * cols;
                double nrm = 0.0;
                for (int64_t j = 0; j < cols; ++j) nrm += xr[j] * xr[j];
                nrm = std::sqrt(nrm);
                const double denom = std::max(nrm, eps);
                if (t.requires(x)) {
                    Tensor& gx = t.grad_buf(x);
                    double* gxr = gx.data() + r * cols;
                    if (nrm >= eps) {
                        double xu = 0.0;
                        for (int64_t j = 0; j < cols; ++j) xu += xr[j] * gm[j] * gr[j];
                        const double d3 = denom * denom * denom;
                        for (int64_t j = 0; j < cols; ++j) {
                            gxr[j] += root_n * (gm[j] * gr[j] / denom - xr[j] * xu / d3);
                        }
                    } else {
                        for (int64_t j = 0; j < cols; ++j) gxr[j] += root_n * gm[j] * gr[j] / eps;
                    }
                }
                if (t.requires(gamma)) {
                    Tensor& gg = t.grad_buf(gamma);
                    for (int64_t j = 0; j < cols; ++j) gg[j] += gr[j] * xr[j] * root_n / denom;
                }
            }
        };
    }
    return id;
}

VarId Tape::conv2d(VarId x, VarId kernel, int stride, int padding) {
    const Tensor& xv = val(x);
    const Tensor& kv = val(kernel);
    expect_rank(xv, 3, "conv2d input");
    expect_rank(kv, 4, "conv2d kernel");
    if (kv.dim(2) != xv.dim(2)) {
        raise(ErrorCode::Dimension,
              "conv2d: input channels " + xv.shape_str() + " vs kernel " + kv.shape_str());
    }
    const int64_t h = xv.dim(0), w = xv.dim(1);
    const int64_t kh = kv.dim(0), kw = kv.dim(1), cin = kv.dim(2), cout = kv.dim(3);
    const int64_t oh = conv_out_extent(h, kh, stride, padding);
    const int64_t ow = conv_out_extent(w, kw, stride, padding);
    if (oh < 1 || ow < 1 || kh > h + 2 * padding || kw > w + 2 * padding) {
        raise(ErrorCode::Dimension, "conv2d: kernel " + kv.shape_str() +
                                        " larger than padded input " + xv.shape_str());
    }
    Tensor col({oh * ow, kh * kw * cin});
    im2col(xv, kh, kw, stride, padding, oh, ow, col);
    Tensor out({oh, ow, cout});
    gemm(col.data(), kv.data(), out.data(), oh * ow, kh * kw * cin, cout, false, false, false);
    const bool rg = requires(x) || requires(kernel);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, kernel, stride, padding, kh, kw, cin, cout, oh, ow,
                             col = std::move(col)](Tape& t) {
            const Tensor& g = t.node(id).grad; // [oh, ow, cout]
            if (t.requires(kernel)) {
                // gk += col^T . g  -> [kh*kw*cin, cout]
                gemm(col.data(), g.data(), t.grad_buf(kernel).data(), kh * kw * cin, oh * ow,
                     cout, true, false, true);
            }
            if (t.requires(x)) {
                Tensor gcol({oh * ow, kh * kw * cin});
                gemm(g.data(), t.val(kernel).data(), gcol.data(), oh * ow, cout, kh * kw * cin,
                     false, true, false);
                col2im_add(gcol, kh, kw, stride, padding, oh, ow, t.grad_buf(x));
            }
        };
    }
    return id;
}

VarId Tape::batchnorm_train(VarId x, VarId bn_scale, VarId bn_shift, double eps,
                            BnBatchStats* stats_out) {
    const Tensor& xv = val(x);
    const MapDims d = map_dims(xv, "batchnorm");
    const Tensor& sc = val(bn_scale);
    const Tensor& sh = val(bn_shift);
    expect_rank(sc, 1, "batchnorm scale");
    expect_rank(sh, 1, "batchnorm shift");
    if (sc.dim(0) != d.c || sh.dim(0) != d.c) {
        raise(ErrorCode::Dimension, "batchnorm: channel mismatch " + xv.shape_str());
    }
    const int64_t n = d.b * d.h * d.w;
    Tensor mean({d.c});
    Tensor var({d.c});
    const double* xd = xv.data();
    for (int64_t i = 0; i < n; ++i) {
        const double* row = xd + i * d.c;
        for (int64_t c = 0; c < d.c; ++c) mean[c] += row[c];
    }
    for (int64_t c = 0; c < d.c; ++c) mean[c] /= static_cast<double>(n);
    for (int64_t i = 0; i < n; ++i) {
        const double* row = xd + i * d.c;
        for (int64_t c = 0; c < d.c; ++c) {
            const double dv = row[c] - mean[c];
            var[c] += dv * dv;
        }
    }
    for (int64_t c = 0; c < d.c; ++c) var[c] /= static_cast<double>(n);
    if (stats_out) {
        stats_out->mean = mean;
        stats_out->var = var;
    }
    Tensor inv_std({d.c});
    for (int64_t c = 0; c < d.c; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
    Tensor out(xv.shape());
    double* od = out.data();
    for (int64_t i = 0; i < n; ++i) {
        const double* row = xd + i * d.c;
        double* orow = od + i * d.c;
        for (int64_t c = 0; c < d.c; ++c) {
            orow[c] = sc[c] * (row[c] - mean[c]) * inv_std[c] + sh[c];
        }
    }
    const bool rg = requires(x) || requires(bn_scale) || requires(bn_shift);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, bn_scale, bn_shift, n, ch = d.c, mean = std::move(mean),
                             inv_std = std::move(inv_std)](Tape& t) {
            const Tensor& g = t.node(id).grad;
            const Tensor& xv2 = t.val(x);
            const Tensor& sc2 = t.val(bn_scale);
            const double* xd2 = xv2.data();
            const double* gd = g.data();
            // Per-channel sums of g and g * xhat.
            Tensor sum_g({ch});
            Tensor sum_gx({ch});
            for (int64_t i = 0; i < n; ++i) {
                const double* grow = gd + i * ch;
                const double* xrow = xd2 + i * ch;
                for (int64_t c = 0; c < ch; ++c) {
                    const double xhat = (xrow[c] - mean[c]) * inv_std[c];
                    sum_g[c] += grow[c];
                    sum_gx[c] += grow[c] * xhat;
                }
            }
            if (t.requires(bn_shift)) {
                Tensor& gsh = t.grad_buf(bn_shift);
                for (int64_t c = 0; c < ch; ++c) gsh[c] += sum_g[c];
            }
            if (t.requires(bn_scale)) {
                Tensor& gsc = t.grad_buf(bn_scale);
                for (int64_t c = 0; c < ch; ++c) gsc[c] += sum_gx[c];
            }
            if (t.requires(x)) {
                Tensor& gx = t.grad_buf(x);
                double* gxd = gx.data();
                const double inv_n = 1.0 / static_cast<double>(n);
                for (int64_t i = 0; i < n; ++i) {
                    const double* grow = gd + i * ch;
                    const double* xrow = xd2 + i * ch;
                    double* gxrow = gxd + i * ch;
                    for (int64_t c = 0; c < ch; ++c) {
                        const double xhat = (xrow[c] - mean[c]) * inv_std[c];
                        gxrow[c] += sc2[c] * inv_std[c] *
                                    (grow[c] - inv_n * sum_g[c] - xhat * inv_n * sum_gx[c]);
                    }
                }
            }
        };
    }
    return id;
}

VarId Tape::batchnorm_eval(VarId x, VarId bn_scale, VarId bn_shift, const Tensor& running_mean,
                           const Tensor& running_var, double eps) {
    const Tensor& xv = val(x);
    const MapDims d = map_dims(xv, "batchnorm");
    const Tensor& sc = val(bn_scale);
    const Tensor& sh = val(bn_shift);
    if (sc.dim(0) != d.c || running_mean.numel() != d.c || running_var.numel() != d.c) {
        raise(ErrorCode::Dimension, "batchnorm eval: channel mismatch " + xv.shape_str());
    }
    const int64_t n = d.b * d.h * d.w;
    Tensor inv_std({d.c});
    for (int64_t c = 0; c < d.c; ++c) inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);
    Tensor out(xv.shape());
    const double* xd = xv.data();
    double* od = out.data();
    for (int64_t i = 0; i < n; ++i) {
        const double* row = xd + i * d.c;
        double* orow = od + i * d.c;
        for (int64_t c = 0; c < d.c; ++c) {
            orow[c] = sc[c] * (row[c] - running_mean[c]) * inv_std[c] + sh[c];
        }
    }
    const bool rg = requires(x) || requires(bn_scale) || requires(bn_shift);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, bn_scale, bn_shift, n, ch = d.c, rm = running_mean,
                             inv_std = std::move(inv_std)](Tape& t) {
            const Tensor& g = t.node(id).grad;
            const Tensor& xv2 = t.val(x);
            const Tensor& sc2 = t.val(bn_scale);
            const double* gd = g.data();
            const double* xd2 = xv2.data();
            for (int64_t i = 0; i < n; ++i) {
                const double* grow = gd + i * ch;
                const double* xrow = xd2 + i * ch;
                for (int64_t c = 0; c < ch; ++c) {
                    const double xhat = (xrow[c] - rm[c]) * inv_std[c];
                    if (t.requires(x)) t.grad_buf(x)[i * ch + c] += grow[c] * sc2[c] * inv_std[c];
                    if (t.requires(bn_scale)) t.grad_buf(bn_scale)[c] += grow[c] * xhat;
                    if (t.requires(bn_shift)) t.grad_buf(bn_shift)[c] += grow[c];
                }
            }
        };
    }
    return id;
}

VarId Tape::adaptive_avg_pool(VarId x, int out_size) {
    const Tensor& xv = val(x);
    expect_rank(xv, 3, "adaptive_avg_pool input");
    const int64_t h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
    const int64_t p = out_size;
    if (p < 1 || p > h || p > w) {
        raise(ErrorCode::Dimension, "adaptive_avg_pool: output " + std::to_string(p) +
                                        " incompatible with input " + xv.shape_str());
    }
    auto bin_lo = [](int64_t i, int64_t in, int64_t out) { return (i * in) / out; };
    auto bin_hi = [](int64_t i, int64_t in, int64_t out) { return ((i + 1) * in + out - 1) / out; };
    Tensor out({p, p, c});
    for (int64_t oy = 0; oy < p; ++oy) {
        const int64_t y0 = bin_lo(oy, h, p), y1 = bin_hi(oy, h, p);
        for (int64_t ox = 0; ox < p; ++ox) {
            const int64_t x0 = bin_lo(ox, w, p), x1 = bin_hi(ox, w, p);
            const double area = static_cast<double>((y1 - y0) * (x1 - x0));
            for (int64_t ci = 0; ci < c; ++ci) {
                double s = 0.0;
                for (int64_t iy = y0; iy < y1; ++iy)
                    for (int64_t ix = x0; ix < x1; ++ix) s += xv.at(iy, ix, ci);
                out.at(oy, ox, ci) = s / area;
            }
        }
    }
    const bool rg = requires(x);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, h, w, c, p, bin_lo, bin_hi](Tape& t) {
            const Tensor& g = t.node(id).grad;
            Tensor& gx = t.grad_buf(x);
            for (int64_t oy = 0; oy < p; ++oy) {
                const int64_t y0 = bin_lo(oy, h, p), y1 = bin_hi(oy, h, p);
                for (int64_t ox = 0; ox < p; ++ox) {
                    const int64_t x0 = bin_lo(ox, w, p), x1 = bin_hi(ox, w, p);
                    const double inv_area = 1.0 / static_cast<double>((y1 - y0) * (x1 - x0));
                    for (int64_t ci = 0; ci < c; ++ci) {
                        const double gv = g.at(oy, ox, ci) * inv_area;
                        for (int64_t iy = y0; iy < y1; ++iy)
                            for (int64_t ix = x0; ix < x1; ++ix) gx.at(iy, ix, ci) += gv;
                    }
                }
            }
        };
    }
    return id;
}

VarId Tape::reshape(VarId x, std::vector<int64_t> shape) {
    Tensor out = val(x).reshaped(std::move(shape));
    const bool rg = requires(x);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x](Tape& t) {
            const Tensor& g = t.node(id).grad;
            Tensor& gx = t.grad_buf(x);
            for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        };
    }
    return id;
}

VarId Tape::flatten(VarId x) { return reshape(x, {val(x).numel()}); }

VarId Tape::concat_lastdim(const std::vector<VarId>& xs) {
    if (xs.empty()) raise(ErrorCode::Contract, "concat_lastdim: empty input list");
    const Tensor& first = val(xs[0]);
    std::vector<int64_t> lead(first.shape().begin(), first.shape().end() - 1);
    int64_t total_last = 0;
    bool rg = false;
    for (VarId v : xs) {
        const Tensor& tv = val(v);
        std::vector<int64_t> l(tv.shape().begin(), tv.shape().end() - 1);
        if (l != lead) {
            raise(ErrorCode::Dimension, "concat_lastdim: leading dims disagree " +
                                            first.shape_str() + " vs " + tv.shape_str());
        }
        total_last += tv.dim(tv.rank() - 1);
        rg = rg || requires(v);
    }
    std::vector<int64_t> out_shape = lead;
    out_shape.push_back(total_last);
    Tensor out(out_shape);
    const int64_t rows = out.numel() / total_last;
    int64_t off = 0;
    for (VarId v : xs) {
        const Tensor& tv = val(v);
        const int64_t c = tv.dim(tv.rank() - 1);
        for (int64_t r = 0; r < rows; ++r) {
            const double* src = tv.data() + r * c;
            double* dst = out.data() + r * total_last + off;
            std::copy(src, src + c, dst);
        }
        off += c;
    }
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, xs, total_last, rows](Tape& t) {
            const Tensor& g = t.node(id).grad;
            int64_t off2 = 0;
            for (VarId v : xs) {
                const int64_t c = t.val(v).dim(t.val(v).rank() - 1);
                if (t.requires(v)) {
                    Tensor& gv = t.grad_buf(v);
                    for (int64_t r = 0; r < rows; ++r) {
                        const double* src = g.data() + r * total_last + off2;
                        double* dst = gv.data() + r * c;
                        for (int64_t j = 0; j < c; ++j) dst[j] += src[j];
                    }
                }
                off2 += c;
            }
        };
    }
    return id;
}

VarId Tape::slice_lastdim(VarId x, int64_t offset, int64_t len) {
    const Tensor& xv = val(x);
    const int64_t last = xv.dim(xv.rank() - 1);
    if (offset < 0 || len < 1 || offset + len > last) {
        raise(ErrorCode::Dimension, "slice_lastdim: range [" + std::to_string(offset) + "," +
                                        std::to_string(offset + len) + ") out of " + xv.shape_str());
    }
    std::vector<int64_t> out_shape(xv.shape().begin(), xv.shape().end() - 1);
    out_shape.push_back(len);
    Tensor out(out_shape);
    const int64_t rows = out.numel() / len;
    for (int64_t r = 0; r < rows; ++r) {
        const double* src = xv.data() + r * last + offset;
        std::copy(src, src + len, out.data() + r * len);
    }
    const bool rg = requires(x);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, offset, len, last, rows](Tape& t) {
            const Tensor& g = t.node(id).grad;
            Tensor& gx = t.grad_buf(x);
            for (int64_t r = 0; r < rows; ++r) {
                const double* src = g.data() + r * len;
                double* dst = gx.data() + r * last + offset;
                for (int64_t j = 0; j < len; ++j) dst[j] += src[j];
            }
        };
    }
    return id;
}

VarId Tape::sum(VarId x) {
    const Tensor& xv = val(x);
    double s = 0.0;
    for (int64_t i = 0; i < xv.numel(); ++i) s += xv[i];
    const bool rg = requires(x);
    VarId id = push(Tensor::scalar(s), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x](Tape& t) {
            const double g = t.node(id).grad[0];
            Tensor& gx = t.grad_buf(x);
            for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g;
        };
    }
    return id;
}

VarId Tape::mean(VarId x) {
    const Tensor& xv = val(x);
    double s = 0.0;
    for (int64_t i = 0; i < xv.numel(); ++i) s += xv[i];
    const double inv_n = 1.0 / static_cast<double>(xv.numel());
    const bool rg = requires(x);
    VarId id = push(Tensor::scalar(s * inv_n), rg, nullptr);
    if (rg) {
        node(id).backward = [id, x, inv_n](Tape& t) {
            const double g = t.node(id).grad[0] * inv_n;
            Tensor& gx = t.grad_buf(x);
            for (int64_t i = 0; i < gx.numel(); ++i) gx[i] += g;
        };
    }
    return id;
}

VarId Tape::sq_l2(VarId pred, VarId target) {
    const Tensor& pv = val(pred);
    const Tensor& tv = val(target);
    check_same_shape(pv, tv, "sq_l2");
    double s = 0.0;
    for (int64_t i = 0; i < pv.numel(); ++i) {
        const double d = pv[i] - tv[i];
        s += d * d;
    }
    const bool rg = requires(pred) || requires(target);
    VarId id = push(Tensor::scalar(s), rg, nullptr);
    if (rg) {
        node(id).backward = [id, pred, target](Tape& t) {
            const double g = t.node(id).grad[0];
            const Tensor& pv2 = t.val(pred);
            const Tensor& tv2 = t.val(target);
            for (int64_t i = 0; i < pv2.numel(); ++i) {
                const double d = 2.0 * (pv2[i] - tv2[i]) * g;
                if (t.requires(pred)) t.grad_buf(pred)[i] += d;
                if (t.requires(target)) t.grad_buf(target)[i] -= d;
            }
        };
    }
    return id;
}

VarId Tape::l2_norm(VarId pred, VarId target) {
    const Tensor& pv = val(pred);
    const Tensor& tv = val(target);
    check_same_shape(pv, tv, "l2_norm");
    double s = 0.0;
    for (int64_t i = 0; i < pv.numel(); ++i) {
        const double d = pv[i] - tv[i];
        s += d * d;
    }
    const double nrm = std::sqrt(s);
    const bool rg = requires(pred) || requires(target);
    VarId id = push(Tensor::scalar(nrm), rg, nullptr);
    if (rg) {
        node(id).backward = [id, pred, target, nrm](Tape& t) {
            const double g = t.node(id).grad[0];
            const double inv = 1.0 / std::max(nrm, 1e-12);
            const Tensor& pv2 = t.val(pred);
            const Tensor& tv2 = t.val(target);
            for (int64_t i = 0; i < pv2.numel(); ++i) {
                const double d = (pv2[i] - tv2[i]) * inv * g;
                if (t.requires(pred)) t.grad_buf(pred)[i] += d;
                if (t.requires(target)) t.grad_buf(target)[i] -= d;
            }
        };
    }
    return id;
}

VarId Tape::kld(VarId mu, VarId log_sigma) {
    const Tensor& mv = val(mu);
    const Tensor& lv = val(log_sigma);
    check_same_shape(mv, lv, "kld");
    double s = 0.0;
    for (int64_t i = 0; i < mv.numel(); ++i) {
        s += 1.0 + 2.0 * lv[i] - mv[i] * mv[i] - std::exp(2.0 * lv[i]);
    }
    const bool rg = requires(mu) || requires(log_sigma);
    VarId id = push(Tensor::scalar(-0.5 * s), rg, nullptr);
    if (rg) {
        node(id).backward = [id, mu, log_sigma](Tape& t) {
            const double g = t.node(id).grad[0];
            const Tensor& mv2 = t.val(mu);
            const Tensor& lv2 = t.val(log_sigma);
            for (int64_t i = 0; i < mv2.numel(); ++i) {
                if (t.requires(mu)) t.grad_buf(mu)[i] += mv2[i] * g;
                if (t.requires(log_sigma))
                    t.grad_buf(log_sigma)[i] += (std::exp(2.0 * lv2[i]) - 1.0) * g;
            }
        };
    }
    return id;
}

VarId Tape::cce(VarId probs, VarId target_onehot) {
    const Tensor& pv = val(probs);
    const Tensor& tv = val(target_onehot);
    check_same_shape(pv, tv, "cce");
    int64_t target = -1;
    for (int64_t i = 0; i < tv.numel(); ++i) {
        if (tv[i] == 1.0) {
            if (target >= 0) raise(ErrorCode::Contract, "cce: target has multiple ones");
            target = i;
        } else if (tv[i] != 0.0) {
            raise(ErrorCode::Contract, "cce: target is not one-hot");
        }
    }
    if (target < 0) raise(ErrorCode::Contract, "cce: target has no one");
    constexpr double kFloor = 1e-12;
    const double p = std::max(pv[target], kFloor);
    const bool rg = requires(probs);
    VarId id = push(Tensor::scalar(-std::log(p)), rg, nullptr);
    if (rg) {
        node(id).backward = [id, probs, target](Tape& t) {
            const double g = t.node(id).grad[0];
            const double pt = t.val(probs)[target];
            if (pt > kFloor) t.grad_buf(probs)[target] += -g / pt;
        };
    }
    return id;
}

VarId Tape::reparam(VarId mu, VarId log_sigma, VarId epsilon) {
    const Tensor& mv = val(mu);
    const Tensor& lv = val(log_sigma);
    const Tensor& ev = val(epsilon);
    check_same_shape(mv, lv, "reparam");
    check_same_shape(mv, ev, "reparam");
    Tensor out = mv;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += std::exp(lv[i]) * ev[i];
    const bool rg = requires(mu) || requires(log_sigma);
    VarId id = push(std::move(out), rg, nullptr);
    if (rg) {
        node(id).backward = [id, mu, log_sigma, epsilon](Tape& t) {
            const Tensor& g = t.node(id).grad;
            const Tensor& lv2 = t.val(log_sigma);
            const Tensor& ev2 = t.val(epsilon);
            for (int64_t i = 0; i < g.numel(); ++i) {
                if (t.requires(mu)) t.grad_buf(mu)[i] += g[i];
                if (t.requires(log_sigma))
                    t.grad_buf(log_sigma)[i] += g[i] * std::exp(lv2[i]) * ev2[i];
            }
        };
    }
    return id;
}

void BatchNormState::update(const BnBatchStats& stats) {
    if (!initialized) {
        running_mean = Tensor::zeros(stats.mean.shape());
        running_var = Tensor::full(stats.var.shape(), 1.0);
        initialized = true;
    }
    check_same_shape(running_mean, stats.mean, "BatchNormState::update");
    for (int64_t c = 0; c < running_mean.numel(); ++c) {
        running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * stats.mean[c];
        running_var[c] = (1.0 - momentum) * running_var[c] + momentum * stats.var[c];
    }
}

VarId batchnorm(Tape& tape, VarId x, VarId bn_scale, VarId bn_shift, BatchNormState& state,
                bool training) {
    if (training) {
        BnBatchStats stats;
        const VarId out = tape.batchnorm_train(x, bn_scale, bn_shift, state.eps, &stats);
        state.update(stats);
        return out;
    }
    if (!state.initialized) {
        raise(ErrorCode::State, "batchnorm eval before any training step");
    }
    return tape.batchnorm_eval(x, bn_scale, bn_shift, state.running_mean, state.running_var,
                               state.eps);
}

void Tape::backward(VarId loss, GradSink* sink) {
    const Tensor& lv = val(loss);
    if (lv.numel() != 1) {
        raise(ErrorCode::Contract, "backward: loss must be scalar, got " + lv.shape_str());
    }
    grad_buf(loss)[0] = 1.0;
    for (VarId i = loss; i >= 0; --i) {
        Node& n = node(i);
        if (!n.requires_grad || n.grad.empty()) continue;
        if (n.backward) n.backward(*this);
    }
    if (sink) {
        for (const Node& n : nodes_) {
            if (n.param_index >= 0 && !n.grad.empty()) sink->accumulate(n.param_index, n.grad);
        }
    }
}

} // namespace afford
