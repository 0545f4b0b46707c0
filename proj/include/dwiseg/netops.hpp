#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "dwiseg/error.hpp"

namespace dwiseg {

// Dense (N, C, H, W) array, W fastest. Scalar type is float for training
// speed and double for finite-difference verification.
template <typename T>
struct Tensor4 {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<T> v;

    Tensor4() = default;
    Tensor4(int n_, int c_, int h_, int w_) { resize(n_, c_, h_, w_); }

    void resize(int n_, int c_, int h_, int w_) {
        n = n_;
        c = c_;
        h = h_;
        w = w_;
        v.assign(static_cast<std::size_t>(n) * c * h * w, T(0));
    }
    std::size_t size() const { return v.size(); }
    std::size_t idx(int i, int j, int y, int x) const {
        return ((static_cast<std::size_t>(i) * c + j) * h + y) * w + x;
    }
    T& at(int i, int j, int y, int x) { return v[idx(i, j, y, x)]; }
    T at(int i, int j, int y, int x) const { return v[idx(i, j, y, x)]; }
    T* plane(int i, int j) { return v.data() + idx(i, j, 0, 0); }
    const T* plane(int i, int j) const { return v.data() + idx(i, j, 0, 0); }
    void zero() { std::fill(v.begin(), v.end(), T(0)); }
};

// All loops below assign each output element to exactly one thread with a
// static schedule and keep every reduction thread-local, so results are
// bitwise identical for any worker count.

// Same-size convolution, stride 1, zero padding (kernel odd).
// weight shape (Cout, Cin, K, K) flattened, bias length Cout.
template <typename T>
void conv2d_forward(const Tensor4<T>& x, const std::vector<T>& weight, const std::vector<T>& bias,
                    int c_out, int k, Tensor4<T>& y) {
    const int p = k / 2;
    const int H = x.h, W = x.w;
    y.resize(x.n, c_out, H, W);
#pragma omp parallel for collapse(2) schedule(static)
    for (int i = 0; i < x.n; ++i) {
        for (int co = 0; co < c_out; ++co) {
            T* out = y.plane(i, co);
            const T b = bias[co];
            for (int q = 0; q < H * W; ++q) out[q] = b;
            for (int ci = 0; ci < x.c; ++ci) {
                const T* in = x.plane(i, ci);
                const T* wbase = weight.data() +
                                 (static_cast<std::size_t>(co) * x.c + ci) * k * k;
                for (int ky = 0; ky < k; ++ky) {
                    const int y0 = std::max(0, p - ky), y1 = H - std::max(0, ky - p);
                    for (int kx = 0; kx < k; ++kx) {
                        const T wv = wbase[ky * k + kx];
                        if (wv == T(0)) continue;
                        const int x0 = std::max(0, p - kx), x1 = W - std::max(0, kx - p);
                        const int dy = ky - p, dx = kx - p;
                        for (int yy = y0; yy < y1; ++yy) {
                            T* orow = out + yy * W;
                            const T* irow = in + (yy + dy) * W + dx;
                            for (int xx = x0; xx < x1; ++xx) orow[xx] += wv * irow[xx];
                        }
                    }
                }
            }
        }
    }
}

// Gradient wrt the convolution input.
template <typename T>
void conv2d_backward_data(const Tensor4<T>& dy, const std::vector<T>& weight, int c_in, int k,
                          Tensor4<T>& dx) {
    const int p = k / 2;
    const int H = dy.h, W = dy.w;
    dx.resize(dy.n, c_in, H, W);
#pragma omp parallel for collapse(2) schedule(static)
    for (int i = 0; i < dy.n; ++i) {
        for (int ci = 0; ci < c_in; ++ci) {
            T* out = dx.plane(i, ci);
            for (int co = 0; co < dy.c; ++co) {
                const T* g = dy.plane(i, co);
                const T* wbase = weight.data() +
                                 (static_cast<std::size_t>(co) * c_in + ci) * k * k;
                for (int ky = 0; ky < k; ++ky) {
                    // dx(yy) accumulates dy(yy - ky + p); swap roles of the
                    // valid ranges used in the forward pass.
                    const int y0 = std::max(0, ky - p), y1 = H - std::max(0, p - ky);
                    for (int kx = 0; kx < k; ++kx) {
                        const T wv = wbase[ky * k + kx];
                        if (wv == T(0)) continue;
                        const int x0 = std::max(0, kx - p), x1 = W - std::max(0, p - kx);
                        const int dy_off = p - ky, dx_off = p - kx;
                        for (int yy = y0; yy < y1; ++yy) {
                            T* orow = out + yy * W;
                            const T* grow = g + (yy + dy_off) * W + dx_off;
                            for (int xx = x0; xx < x1; ++xx) orow[xx] += wv * grow[xx];
                        }
                    }
                }
            }
        }
    }
}

namespace detail_conv {

// Zero-padded copy of all input planes ((H+2P) x (W+2P) each), which removes
// every bounds check from the weight-gradient kernels.
template <typename T>
std::vector<T> pad_planes(const Tensor4<T>& x, int p) {
    const int hp = x.h + 2 * p, wp = x.w + 2 * p;
    std::vector<T> out(static_cast<std::size_t>(x.n) * x.c * hp * wp, T(0));
#pragma omp parallel for collapse(2) schedule(static)
    for (int i = 0; i < x.n; ++i)
        for (int j = 0; j < x.c; ++j) {
            const T* src = x.plane(i, j);
            T* dst = out.data() + (static_cast<std::size_t>(i) * x.c + j) * hp * wp +
                     static_cast<std::size_t>(p) * wp + p;
            for (int yy = 0; yy < x.h; ++yy)
                std::copy_n(src + static_cast<std::size_t>(yy) * x.w, x.w,
                            dst + static_cast<std::size_t>(yy) * wp);
        }
    return out;
}

// One pass per (ky, row): every g element feeds all K kernel columns through
// named accumulators, so the whole row vectorizes with no edge handling.
template <typename T>
void backward_params_k5(const Tensor4<T>& x, const Tensor4<T>& dy, std::vector<T>& dweight,
                        std::vector<T>& dbias) {
    constexpr int K = 5, P = 2;
    const int H = x.h, W = x.w;
    const int wp = W + 2 * P;
    const std::vector<T> padded = pad_planes(x, P);
#pragma omp parallel for schedule(static)
    for (int co = 0; co < dy.c; ++co) {
        T bsum = T(0);
        for (int i = 0; i < x.n; ++i) {
            const T* g = dy.plane(i, co);
            for (int q = 0; q < H * W; ++q) bsum += g[q];
            for (int ci = 0; ci < x.c; ++ci) {
                const T* in = padded.data() +
                              (static_cast<std::size_t>(i) * x.c + ci) * (H + 2 * P) * wp;
                T* wbase = dweight.data() + (static_cast<std::size_t>(co) * x.c + ci) * K * K;
                for (int ky = 0; ky < K; ++ky) {
                    T a0 = 0, a1 = 0, a2 = 0, a3 = 0, a4 = 0;
                    for (int yy = 0; yy < H; ++yy) {
                        const T* grow = g + static_cast<std::size_t>(yy) * W;
                        const T* irow = in + static_cast<std::size_t>(yy + ky) * wp;
                        T l0 = 0, l1 = 0, l2 = 0, l3 = 0, l4 = 0;
#pragma omp simd reduction(+ : l0, l1, l2, l3, l4)
                        for (int xx = 0; xx < W; ++xx) {
                            const T gv = grow[xx];
                            l0 += gv * irow[xx];
                            l1 += gv * irow[xx + 1];
                            l2 += gv * irow[xx + 2];
                            l3 += gv * irow[xx + 3];
                            l4 += gv * irow[xx + 4];
                        }
                        a0 += l0;
                        a1 += l1;
                        a2 += l2;
                        a3 += l3;
                        a4 += l4;
                    }
                    wbase[ky * K + 0] += a0;
                    wbase[ky * K + 1] += a1;
                    wbase[ky * K + 2] += a2;
                    wbase[ky * K + 3] += a3;
                    wbase[ky * K + 4] += a4;
                }
            }
        }
        dbias[co] = bsum;
    }
}

template <typename T>
void backward_params_k3(const Tensor4<T>& x, const Tensor4<T>& dy, std::vector<T>& dweight,
                        std::vector<T>& dbias) {
    constexpr int K = 3, P = 1;
    const int H = x.h, W = x.w;
    const int wp = W + 2 * P;
    const std::vector<T> padded = pad_planes(x, P);
#pragma omp parallel for schedule(static)
    for (int co = 0; co < dy.c; ++co) {
        T bsum = T(0);
        for (int i = 0; i < x.n; ++i) {
            const T* g = dy.plane(i, co);
            for (int q = 0; q < H * W; ++q) bsum += g[q];
            for (int ci = 0; ci < x.c; ++ci) {
                const T* in = padded.data() +
                              (static_cast<std::size_t>(i) * x.c + ci) * (H + 2 * P) * wp;
                T* wbase = dweight.data() + (static_cast<std::size_t>(co) * x.c + ci) * K * K;
                for (int ky = 0; ky < K; ++ky) {
                    T a0 = 0, a1 = 0, a2 = 0;
                    for (int yy = 0; yy < H; ++yy) {
                        const T* grow = g + static_cast<std::size_t>(yy) * W;
                        const T* irow = in + static_cast<std::size_t>(yy + ky) * wp;
                        T l0 = 0, l1 = 0, l2 = 0;
#pragma omp simd reduction(+ : l0, l1, l2)
                        for (int xx = 0; xx < W; ++xx) {
                            const T gv = grow[xx];
                            l0 += gv * irow[xx];
                            l1 += gv * irow[xx + 1];
                            l2 += gv * irow[xx + 2];
                        }
                        a0 += l0;
                        a1 += l1;
                        a2 += l2;
                    }
                    wbase[ky * K + 0] += a0;
                    wbase[ky * K + 1] += a1;
                    wbase[ky * K + 2] += a2;
                }
            }
        }
        dbias[co] = bsum;
    }
}

template <typename T>
void backward_params_k1(const Tensor4<T>& x, const Tensor4<T>& dy, std::vector<T>& dweight,
                        std::vector<T>& dbias) {
    const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
#pragma omp parallel for schedule(static)
    for (int co = 0; co < dy.c; ++co) {
        T bsum = T(0);
        for (int i = 0; i < x.n; ++i) {
            const T* g = dy.plane(i, co);
            for (std::size_t q = 0; q < plane; ++q) bsum += g[q];
            for (int ci = 0; ci < x.c; ++ci) {
                const T* in = x.plane(i, ci);
                T acc = T(0);
#pragma omp simd reduction(+ : acc)
                for (std::size_t q = 0; q < plane; ++q) acc += g[q] * in[q];
                dweight[static_cast<std::size_t>(co) * x.c + ci] += acc;
            }
        }
        dbias[co] = bsum;
    }
}

template <typename T>
void backward_params_generic(const Tensor4<T>& x, const Tensor4<T>& dy, int k,
                             std::vector<T>& dweight, std::vector<T>& dbias) {
    const int p = k / 2;
    const int H = x.h, W = x.w;
#pragma omp parallel for schedule(static)
    for (int co = 0; co < dy.c; ++co) {
        T bsum = T(0);
        for (int i = 0; i < x.n; ++i) {
            const T* g = dy.plane(i, co);
            for (int q = 0; q < H * W; ++q) bsum += g[q];
            for (int ci = 0; ci < x.c; ++ci) {
                const T* in = x.plane(i, ci);
                T* wbase = dweight.data() + (static_cast<std::size_t>(co) * x.c + ci) * k * k;
                for (int ky = 0; ky < k; ++ky) {
                    const int y0 = std::max(0, p - ky), y1 = H - std::max(0, ky - p);
                    for (int kx = 0; kx < k; ++kx) {
                        const int x0 = std::max(0, p - kx), x1 = W - std::max(0, kx - p);
                        const int dyo = ky - p, dxo = kx - p;
                        T acc = T(0);
                        for (int yy = y0; yy < y1; ++yy) {
                            const T* grow = g + yy * W;
                            const T* irow = in + (yy + dyo) * W + dxo;
                            T row_acc = T(0);
#pragma omp simd reduction(+ : row_acc)
                            for (int xx = x0; xx < x1; ++xx) row_acc += grow[xx] * irow[xx];
                            acc += row_acc;
                        }
                        wbase[ky * k + kx] += acc;
                    }
                }
            }
        }
        dbias[co] = bsum;
    }
}

}  // namespace detail_conv

// Gradients wrt weight and bias (accumulated into zeroed buffers).
template <typename T>
void conv2d_backward_params(const Tensor4<T>& x, const Tensor4<T>& dy, int k,
                            std::vector<T>& dweight, std::vector<T>& dbias) {
    dweight.assign(static_cast<std::size_t>(dy.c) * x.c * k * k, T(0));
    dbias.assign(dy.c, T(0));
    switch (k) {
        case 1: detail_conv::backward_params_k1<T>(x, dy, dweight, dbias); break;
        case 3: detail_conv::backward_params_k3<T>(x, dy, dweight, dbias); break;
        case 5: detail_conv::backward_params_k5<T>(x, dy, dweight, dbias); break;
        default: detail_conv::backward_params_generic<T>(x, dy, k, dweight, dbias); break;
    }
}

// 2x2 max pooling with stride 2; the winning in-window offset (0..3, row
// major) is retained for unpooling. Ties go to the lowest offset.
template <typename T>
void maxpool2x2_forward(const Tensor4<T>& x, Tensor4<T>& y, Tensor4<std::uint8_t>& index) {
    const int ho = x.h / 2, wo = x.w / 2;
    y.resize(x.n, x.c, ho, wo);
    index.resize(x.n, x.c, ho, wo);
#pragma omp parallel for collapse(2) schedule(static)
    for (int i = 0; i < x.n; ++i) {
        for (int j = 0; j < x.c; ++j) {
            const T* in = x.plane(i, j);
            T* out = y.plane(i, j);
            std::uint8_t* idx = index.plane(i, j);
            for (int yy = 0; yy < ho; ++yy) {
                for (int xx = 0; xx < wo; ++xx) {
                    const T* q = in + (2 * yy) * x.w + 2 * xx;
                    T best = q[0];
                    std::uint8_t arg = 0;
                    if (q[1] > best) { best = q[1]; arg = 1; }
                    if (q[x.w] > best) { best = q[x.w]; arg = 2; }
                    if (q[x.w + 1] > best) { best = q[x.w + 1]; arg = 3; }
                    out[yy * wo + xx] = best;
                    idx[yy * wo + xx] = arg;
                }
            }
        }
    }
}

template <typename T>
void maxpool2x2_backward(const Tensor4<T>& dy, const Tensor4<std::uint8_t>& index, Tensor4<T>& dx) {
    dx.resize(dy.n, dy.c, dy.h * 2, dy.w * 2);
#pragma omp parallel for collapse(2) schedule(static)
    for (int i = 0; i < dy.n; ++i) {
        for (int j = 0; j < dy.c; ++j) {
            const T* g = dy.plane(i, j);
            const std::uint8_t* idx = index.plane(i, j);
            T* out = dx.plane(i, j);
            for (int yy = 0; yy < dy.h; ++yy) {
                for (int xx = 0; xx < dy.w; ++xx) {
                    const std::uint8_t a = idx[yy * dy.w + xx];
                    out[(2 * yy + (a >> 1)) * dx.w + 2 * xx + (a & 1)] += g[yy * dy.w + xx];
                }
            }
        }
    }
}

// Unpooling: values placed at the retained max locations, zeros elsewhere.
template <typename T>
void unpool2x2_forward(const Tensor4<T>& x, const Tensor4<std::uint8_t>& index, Tensor4<T>& y) {
    y.resize(x.n, x.c, x.h * 2, x.w * 2);
#pragma omp parallel for collapse(2) schedule(static)
    for (int i = 0; i < x.n; ++i) {
        for (int j = 0; j < x.c; ++j) {
            const T* in = x.plane(i, j);
            const std::uint8_t* idx = index.plane(i, j);
            T* out = y.plane(i, j);
            for (int yy = 0; yy < x.h; ++yy) {
                for (int xx = 0; xx < x.w; ++xx) {
                    const std::uint8_t a = idx[yy * x.w + xx];
                    out[(2 * yy + (a >> 1)) * y.w + 2 * xx + (a & 1)] = in[yy * x.w + xx];
                }
            }
        }
    }
}

template <typename T>
void unpool2x2_backward(const Tensor4<T>& dy, const Tensor4<std::uint8_t>& index, Tensor4<T>& dx) {
    dx.resize(dy.n, dy.c, dy.h / 2, dy.w / 2);
#pragma omp parallel for collapse(2) schedule(static)
    for (int i = 0; i < dy.n; ++i) {
        for (int j = 0; j < dy.c; ++j) {
            const T* g = dy.plane(i, j);
            const std::uint8_t* idx = index.plane(i, j);
            T* out = dx.plane(i, j);
            for (int yy = 0; yy < dx.h; ++yy) {
                for (int xx = 0; xx < dx.w; ++xx) {
                    const std::uint8_t a = idx[yy * dx.w + xx];
                    out[yy * dx.w + xx] = g[(2 * yy + (a >> 1)) * dy.w + 2 * xx + (a & 1)];
                }
            }
        }
    }
}

// Element-wise maximum fusion (maxout). On ties the second operand wins the
// gradient route; see maxout_backward.
template <typename T>
void maxout_forward(const Tensor4<T>& a, const Tensor4<T>& b, Tensor4<T>& y) {
    if (a.size() != b.size()) throw ShapeError("maxout operand size mismatch");
    y.resize(a.n, a.c, a.h, a.w);
    const std::size_t total = a.size();
#pragma omp parallel for schedule(static)
    for (long long q = 0; q < static_cast<long long>(total); ++q)
        y.v[q] = std::max(a.v[q], b.v[q]);
}

// Routes dy to da where a > b, else to db (b wins ties).
template <typename T>
void maxout_backward(const Tensor4<T>& a, const Tensor4<T>& b, const Tensor4<T>& dy, Tensor4<T>& da,
                     Tensor4<T>& db) {
    da.resize(a.n, a.c, a.h, a.w);
    db.resize(b.n, b.c, b.h, b.w);
    const std::size_t total = a.size();
#pragma omp parallel for schedule(static)
    for (long long q = 0; q < static_cast<long long>(total); ++q) {
        if (a.v[q] > b.v[q]) {
            da.v[q] = dy.v[q];
            db.v[q] = T(0);
        } else {
            da.v[q] = T(0);
            db.v[q] = dy.v[q];
        }
    }
}

// Per-channel batch normalization over (N, H, W). Biased variance; running
// statistics are updated with the given momentum during training.
template <typename T>
struct BnCache {
    std::vector<T> mean, invstd;
};

template <typename T>
void batchnorm_forward(const Tensor4<T>& x, const std::vector<T>& gamma,
                       const std::vector<T>& beta, std::vector<T>& run_mean,
                       std::vector<T>& run_var, bool training, double eps, double momentum,
                       Tensor4<T>& y, BnCache<T>* cache) {
    y.resize(x.n, x.c, x.h, x.w);
    const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
    const double m = static_cast<double>(x.n) * plane;
    if (cache) {
        cache->mean.assign(x.c, T(0));
        cache->invstd.assign(x.c, T(0));
    }
#pragma omp parallel for schedule(static)
    for (int j = 0; j < x.c; ++j) {
        double mu, var;
        if (training) {
            double s = 0.0;
            for (int i = 0; i < x.n; ++i) {
                const T* p = x.plane(i, j);
                for (std::size_t q = 0; q < plane; ++q) s += p[q];
            }
            mu = s / m;
            double ss = 0.0;
            for (int i = 0; i < x.n; ++i) {
                const T* p = x.plane(i, j);
                for (std::size_t q = 0; q < plane; ++q) {
                    const double d = p[q] - mu;
                    ss += d * d;
                }
            }
            var = ss / m;
            run_mean[j] = static_cast<T>((1.0 - momentum) * run_mean[j] + momentum * mu);
            run_var[j] = static_cast<T>((1.0 - momentum) * run_var[j] + momentum * var);
        } else {
            mu = run_mean[j];
            var = run_var[j];
        }
        const double inv = 1.0 / std::sqrt(var + eps);
        if (cache) {
            cache->mean[j] = static_cast<T>(mu);
            cache->invstd[j] = static_cast<T>(inv);
        }
        const T g = gamma[j], b = beta[j];
        const T a1 = static_cast<T>(g * inv);
        const T a0 = static_cast<T>(b - g * inv * mu);
        for (int i = 0; i < x.n; ++i) {
            const T* p = x.plane(i, j);
            T* o = y.plane(i, j);
            for (std::size_t q = 0; q < plane; ++q) o[q] = a1 * p[q] + a0;
        }
    }
}

// Training-mode backward through the batch statistics.
template <typename T>
void batchnorm_backward(const Tensor4<T>& x, const Tensor4<T>& dy, const std::vector<T>& gamma,
                        const BnCache<T>& cache, Tensor4<T>& dx, std::vector<T>& dgamma,
                        std::vector<T>& dbeta) {
    dx.resize(x.n, x.c, x.h, x.w);
    dgamma.assign(x.c, T(0));
    dbeta.assign(x.c, T(0));
    const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
    const double m = static_cast<double>(x.n) * plane;
#pragma omp parallel for schedule(static)
    for (int j = 0; j < x.c; ++j) {
        const double mu = cache.mean[j], inv = cache.invstd[j];
        double s1 = 0.0, s2 = 0.0;  // sum(dy), sum(dy * xhat)
        for (int i = 0; i < x.n; ++i) {
            const T* g = dy.plane(i, j);
            const T* p = x.plane(i, j);
            for (std::size_t q = 0; q < plane; ++q) {
                s1 += g[q];
                s2 += g[q] * ((p[q] - mu) * inv);
            }
        }
        dbeta[j] = static_cast<T>(s1);
        dgamma[j] = static_cast<T>(s2);
        const double gi = gamma[j] * inv;
        const double c1 = s1 / m, c2 = s2 / m;
        for (int i = 0; i < x.n; ++i) {
            const T* g = dy.plane(i, j);
            const T* p = x.plane(i, j);
            T* o = dx.plane(i, j);
            for (std::size_t q = 0; q < plane; ++q) {
                const double xhat = (p[q] - mu) * inv;
                o[q] = static_cast<T>(gi * (g[q] - c1 - xhat * c2));
            }
        }
    }
}

// Rectifier with a learnable per-channel negative slope.
template <typename T>
void prelu_forward(const Tensor4<T>& x, const std::vector<T>& slope, Tensor4<T>& y) {
    y.resize(x.n, x.c, x.h, x.w);
    const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
#pragma omp parallel for schedule(static)
    for (int j = 0; j < x.c; ++j) {
        const T a = slope[j];
        for (int i = 0; i < x.n; ++i) {
            const T* p = x.plane(i, j);
            T* o = y.plane(i, j);
            for (std::size_t q = 0; q < plane; ++q) o[q] = p[q] > T(0) ? p[q] : a * p[q];
        }
    }
}

template <typename T>
void prelu_backward(const Tensor4<T>& x, const Tensor4<T>& dy, const std::vector<T>& slope,
                    Tensor4<T>& dx, std::vector<T>& dslope) {
    dx.resize(x.n, x.c, x.h, x.w);
    dslope.assign(x.c, T(0));
    const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
#pragma omp parallel for schedule(static)
    for (int j = 0; j < x.c; ++j) {
        const T a = slope[j];
        double ds = 0.0;
        for (int i = 0; i < x.n; ++i) {
            const T* p = x.plane(i, j);
            const T* g = dy.plane(i, j);
            T* o = dx.plane(i, j);
            for (std::size_t q = 0; q < plane; ++q) {
                if (p[q] > T(0)) {
                    o[q] = g[q];
                } else {
                    o[q] = a * g[q];
                    ds += g[q] * p[q];
                }
            }
        }
        dslope[j] = static_cast<T>(ds);
    }
}

// Per-pixel softmax over the channel axis (max-subtracted).
template <typename T>
void softmax_forward(const Tensor4<T>& logits, Tensor4<T>& probs) {
    probs.resize(logits.n, logits.c, logits.h, logits.w);
    const std::size_t plane = static_cast<std::size_t>(logits.h) * logits.w;
    const std::size_t cstride = plane;  // contiguous channel planes per sample
#pragma omp parallel for schedule(static)
    for (int i = 0; i < logits.n; ++i) {
        const T* in = logits.plane(i, 0);
        T* out = probs.plane(i, 0);
        for (std::size_t q = 0; q < plane; ++q) {
            T mx = in[q];
            for (int j = 1; j < logits.c; ++j) mx = std::max(mx, in[q + j * cstride]);
            double z = 0.0;
            for (int j = 0; j < logits.c; ++j) {
                const double e = std::exp(static_cast<double>(in[q + j * cstride] - mx));
                out[q + j * cstride] = static_cast<T>(e);
                z += e;
            }
            const double invz = 1.0 / z;
            for (int j = 0; j < logits.c; ++j)
                out[q + j * cstride] = static_cast<T>(out[q + j * cstride] * invz);
        }
    }
}

// dL/dlogits from dL/dprobs: dz_j = p_j * (dp_j - sum_k dp_k p_k).
template <typename T>
void softmax_backward(const Tensor4<T>& probs, const Tensor4<T>& dprobs, Tensor4<T>& dlogits) {
    dlogits.resize(probs.n, probs.c, probs.h, probs.w);
    const std::size_t plane = static_cast<std::size_t>(probs.h) * probs.w;
#pragma omp parallel for schedule(static)
    for (int i = 0; i < probs.n; ++i) {
        const T* p = probs.plane(i, 0);
        const T* dp = dprobs.plane(i, 0);
        T* o = dlogits.plane(i, 0);
        for (std::size_t q = 0; q < plane; ++q) {
            double dot = 0.0;
            for (int j = 0; j < probs.c; ++j) dot += static_cast<double>(dp[q + j * plane]) * p[q + j * plane];
            for (int j = 0; j < probs.c; ++j)
                o[q + j * plane] =
                    static_cast<T>(p[q + j * plane] * (dp[q + j * plane] - static_cast<T>(dot)));
        }
    }
}

}  // namespace dwiseg
