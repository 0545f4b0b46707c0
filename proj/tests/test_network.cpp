#include <doctest.h>

#include <random>

#include "dwiseg/network.hpp"

using namespace dwiseg;

namespace {

template <typename T>
void fill_random(Tensor4<T>& t, std::uint64_t seed, double scale = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-scale, scale);
    for (auto& v : t.v) v = static_cast<T>(u(rng));
}

// ---------------------------------------------------------------------------
// Straight-line re-implementation of the depth-1 architecture used as an
// independent oracle. Deliberately different data layout (nested vectors)
// and no shared helpers with the library.
// ---------------------------------------------------------------------------
using Grid = std::vector<std::vector<std::vector<std::vector<double>>>>;  // [n][c][y][x]

Grid make_grid(int n, int c, int h, int w) {
    return Grid(n, std::vector<std::vector<std::vector<double>>>(
                       c, std::vector<std::vector<double>>(h, std::vector<double>(w, 0.0))));
}

Grid naive_conv(const Grid& x, const std::vector<double>& wflat, const std::vector<double>& b,
                int co_count, int k) {
    const int n = x.size(), ci_count = x[0].size(), h = x[0][0].size(), w = x[0][0][0].size();
    const int p = k / 2;
    Grid y = make_grid(n, co_count, h, w);
    for (int i = 0; i < n; ++i)
        for (int co = 0; co < co_count; ++co)
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx) {
                    double acc = b[co];
                    for (int ci = 0; ci < ci_count; ++ci)
                        for (int ky = 0; ky < k; ++ky)
                            for (int kx = 0; kx < k; ++kx) {
                                const int sy = yy + ky - p, sx = xx + kx - p;
                                if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                                acc += wflat[((co * ci_count + ci) * k + ky) * k + kx] *
                                       x[i][ci][sy][sx];
                            }
                    y[i][co][yy][xx] = acc;
                }
    return y;
}

Grid naive_bn_train(const Grid& x, const std::vector<double>& gamma,
                    const std::vector<double>& beta, double eps) {
    const int n = x.size(), c = x[0].size(), h = x[0][0].size(), w = x[0][0][0].size();
    Grid y = make_grid(n, c, h, w);
    for (int j = 0; j < c; ++j) {
        double mean = 0.0;
        for (int i = 0; i < n; ++i)
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx) mean += x[i][j][yy][xx];
        mean /= n * h * w;
        double var = 0.0;
        for (int i = 0; i < n; ++i)
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx)
                    var += (x[i][j][yy][xx] - mean) * (x[i][j][yy][xx] - mean);
        var /= n * h * w;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int i = 0; i < n; ++i)
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx)
                    y[i][j][yy][xx] = gamma[j] * (x[i][j][yy][xx] - mean) * inv + beta[j];
    }
    return y;
}

Grid naive_prelu(const Grid& x, const std::vector<double>& slope) {
    Grid y = x;
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t j = 0; j < x[0].size(); ++j)
            for (std::size_t yy = 0; yy < x[0][0].size(); ++yy)
                for (std::size_t xx = 0; xx < x[0][0][0].size(); ++xx) {
                    const double v = x[i][j][yy][xx];
                    y[i][j][yy][xx] = v > 0 ? v : slope[j] * v;
                }
    return y;
}

Grid naive_max(const Grid& a, const Grid& b) {
    Grid y = a;
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::size_t j = 0; j < a[0].size(); ++j)
            for (std::size_t yy = 0; yy < a[0][0].size(); ++yy)
                for (std::size_t xx = 0; xx < a[0][0][0].size(); ++xx)
                    y[i][j][yy][xx] = std::max(a[i][j][yy][xx], b[i][j][yy][xx]);
    return y;
}

// Pooled grid plus winning window offsets; ties to the first in row-major
// window order.
std::pair<Grid, Grid> naive_pool(const Grid& x) {
    const int n = x.size(), c = x[0].size(), h = x[0][0].size(), w = x[0][0][0].size();
    Grid y = make_grid(n, c, h / 2, w / 2);
    Grid arg = make_grid(n, c, h / 2, w / 2);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j)
            for (int yy = 0; yy < h / 2; ++yy)
                for (int xx = 0; xx < w / 2; ++xx) {
                    const double cands[4] = {x[i][j][2 * yy][2 * xx],
                                             x[i][j][2 * yy][2 * xx + 1],
                                             x[i][j][2 * yy + 1][2 * xx],
                                             x[i][j][2 * yy + 1][2 * xx + 1]};
                    double best = cands[0];
                    int a = 0;
                    for (int q = 1; q < 4; ++q)
                        if (cands[q] > best) {
                            best = cands[q];
                            a = q;
                        }
                    y[i][j][yy][xx] = best;
                    arg[i][j][yy][xx] = a;
                }
    return {y, arg};
}

Grid naive_unpool(const Grid& x, const Grid& arg) {
    const int n = x.size(), c = x[0].size(), h = x[0][0].size(), w = x[0][0][0].size();
    Grid y = make_grid(n, c, h * 2, w * 2);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < c; ++j)
            for (int yy = 0; yy < h; ++yy)
                for (int xx = 0; xx < w; ++xx) {
                    const int a = static_cast<int>(arg[i][j][yy][xx]);
                    y[i][j][2 * yy + a / 2][2 * xx + a % 2] = x[i][j][yy][xx];
                }
    return y;
}

Grid naive_softmax(const Grid& x) {
    const int n = x.size(), c = x[0].size(), h = x[0][0].size(), w = x[0][0][0].size();
    Grid y = make_grid(n, c, h, w);
    for (int i = 0; i < n; ++i)
        for (int yy = 0; yy < h; ++yy)
            for (int xx = 0; xx < w; ++xx) {
                double mx = x[i][0][yy][xx];
                for (int j = 1; j < c; ++j) mx = std::max(mx, x[i][j][yy][xx]);
                double z = 0;
                for (int j = 0; j < c; ++j) z += std::exp(x[i][j][yy][xx] - mx);
                for (int j = 0; j < c; ++j) y[i][j][yy][xx] = std::exp(x[i][j][yy][xx] - mx) / z;
            }
    return y;
}

// One competitive dense block per the contract: (conv -> bn -> prelu) units,
// unit outputs max-fused into the running state.
Grid naive_block(const Grid& input, const BlockParams<double>& bp, double eps) {
    Grid state;
    const Grid* cur = &input;
    for (std::size_t u = 0; u < bp.units.size(); ++u) {
        const auto& unit = bp.units[u];
        const std::vector<double> w(unit.conv.w.begin(), unit.conv.w.end());
        const std::vector<double> b(unit.conv.b.begin(), unit.conv.b.end());
        const std::vector<double> gamma(unit.gamma.begin(), unit.gamma.end());
        const std::vector<double> beta(unit.beta.begin(), unit.beta.end());
        const std::vector<double> slope(unit.slope.begin(), unit.slope.end());
        const Grid conv = naive_conv(*cur, w, b, unit.conv.c_out, unit.conv.k);
        const Grid act = naive_prelu(naive_bn_train(conv, gamma, beta, eps), slope);
        state = (u == 0) ? act : naive_max(state, act);
        cur = &state;
    }
    return state;
}

Grid tensor_to_grid(const Tensor4<double>& t) {
    Grid g = make_grid(t.n, t.c, t.h, t.w);
    for (int i = 0; i < t.n; ++i)
        for (int j = 0; j < t.c; ++j)
            for (int y = 0; y < t.h; ++y)
                for (int x = 0; x < t.w; ++x) g[i][j][y][x] = t.at(i, j, y, x);
    return g;
}

}  // namespace

TEST_CASE("init_params is deterministic in the seed and shape-correct") {
    ArchSpec spec;
    spec.in_channels = 5;
    spec.num_classes = 4;
    spec.depth = 2;
    spec.filters = {6, 8};
    spec.seed = 99;
    NetParams<float> a = init_params<float>(spec);
    NetParams<float> b = init_params<float>(spec);
    auto pa = collect_params(a), pb = collect_params(b);
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i].data == *pb[i].data);

    spec.seed = 100;
    NetParams<float> c = init_params<float>(spec);
    auto pc = collect_params(c);
    bool any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) any_diff |= (*pa[i].data != *pc[i].data);
    CHECK(any_diff);

    for (const auto& ref : pa) {
        if (ref.name.find("conv.b") != std::string::npos)
            for (float v : *ref.data) CHECK(v == 0.0f);
        if (ref.name.find("bn.gamma") != std::string::npos)
            for (float v : *ref.data) CHECK(v == 1.0f);
        if (ref.name.find("prelu") != std::string::npos)
            for (float v : *ref.data) CHECK(v == doctest::Approx(0.25));
    }
}

TEST_CASE("parameter count matches the hand-derived depth-1 formula") {
    ArchSpec spec;
    spec.in_channels = 3;
    spec.num_classes = 4;
    spec.depth = 1;
    spec.filters = {2};
    spec.convs_per_block = 3;
    spec.kernel = 3;
    const NetParams<float> p = init_params<float>(spec);

    const int f = 2, c = 3, k = 3, cin = 3, classes = 4;
    const auto unit = [&](int ci, int co) { return co * ci * k * k + 4 * co; };
    const std::size_t expect = unit(cin, f) + (c - 1) * unit(f, f)  // encoder block
                               + c * unit(f, f)                      // bottleneck
                               + c * unit(f, f)                      // decoder block
                               + classes * f + classes;              // head
    CHECK(param_count(p) == expect);
}

TEST_CASE("zero input with fresh params yields uniform probabilities") {
    ArchSpec spec;
    spec.in_channels = 3;
    spec.num_classes = 5;
    spec.depth = 2;
    spec.filters = {4, 6};
    spec.seed = 3;
    NetParams<double> p = init_params<double>(spec);
    Tensor4<double> x(2, 3, 8, 8);
    const Tensor4<double> probs = forward<double>(p, x, true, nullptr);
    for (double v : probs.v) CHECK(v == doctest::Approx(0.2).epsilon(1e-9));
}

TEST_CASE("output shape contract and padding path") {
    ArchSpec spec;
    spec.in_channels = 2;
    spec.num_classes = 3;
    spec.depth = 2;
    spec.filters = {4, 4};
    spec.seed = 17;
    NetParams<float> p = init_params<float>(spec);
    Tensor4<float> x(3, 2, 6, 10);  // not divisible by 4 -> internal pad + crop
    fill_random(x, 5);
    const Tensor4<float> probs = forward<float>(p, x, true, nullptr);
    CHECK(probs.n == 3);
    CHECK(probs.c == 3);
    CHECK(probs.h == 6);
    CHECK(probs.w == 10);
    for (int i = 0; i < probs.n; ++i)
        for (int y = 0; y < probs.h; ++y)
            for (int xx = 0; xx < probs.w; ++xx) {
                double sum = 0;
                for (int j = 0; j < probs.c; ++j) sum += probs.at(i, j, y, xx);
                CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
            }
}

TEST_CASE("forward matches the straight-line re-implementation to 1e-10") {
    ArchSpec spec;
    spec.in_channels = 3;
    spec.num_classes = 4;
    spec.depth = 1;
    spec.filters = {2};
    spec.convs_per_block = 3;
    spec.kernel = 5;
    spec.seed = 21;
    NetParams<double> p = init_params<double>(spec);
    Tensor4<double> x(2, 3, 4, 4);
    fill_random(x, 7);

    const Tensor4<double> probs = forward<double>(p, x, true, nullptr);

    const Grid gin = tensor_to_grid(x);
    const Grid e0 = naive_block(gin, p.enc[0], spec.bn_eps);
    const auto [pooled, arg] = naive_pool(e0);
    const Grid bott = naive_block(pooled, p.bottleneck, spec.bn_eps);
    const Grid up = naive_unpool(bott, arg);
    const Grid fused = naive_max(up, e0);
    const Grid d0 = naive_block(fused, p.dec[0], spec.bn_eps);
    const std::vector<double> hw(p.head.w.begin(), p.head.w.end());
    const std::vector<double> hb(p.head.b.begin(), p.head.b.end());
    const Grid logits = naive_conv(d0, hw, hb, spec.num_classes, 1);
    const Grid expect = naive_softmax(logits);

    for (int i = 0; i < probs.n; ++i)
        for (int j = 0; j < probs.c; ++j)
            for (int y = 0; y < probs.h; ++y)
                for (int xx = 0; xx < probs.w; ++xx)
                    CHECK(probs.at(i, j, y, xx) ==
                          doctest::Approx(expect[i][j][y][xx]).epsilon(1e-10));
}

TEST_CASE("maxout fusion properties") {
    Tensor4<float> a(1, 2, 4, 4), b(1, 2, 4, 4), y;
    fill_random(a, 1);
    fill_random(b, 2);

    maxout_forward(a, a, y);
    CHECK(y.v == a.v);  // idempotence

    maxout_forward(a, b, y);
    for (std::size_t q = 0; q < y.v.size(); ++q) {
        CHECK(y.v[q] >= a.v[q]);
        CHECK(y.v[q] >= b.v[q]);
    }
    Tensor4<float> yr;
    maxout_forward(b, a, yr);
    CHECK(y.v == yr.v);  // operand permutation

    Tensor4<float> dy(1, 2, 4, 4), da, db;
    fill_random(dy, 3);
    maxout_backward(a, b, dy, da, db);
    for (std::size_t q = 0; q < dy.v.size(); ++q) {
        if (a.v[q] > b.v[q]) {
            CHECK(da.v[q] == dy.v[q]);
            CHECK(db.v[q] == 0.0f);
        } else {
            CHECK(db.v[q] == dy.v[q]);
            CHECK(da.v[q] == 0.0f);
        }
    }
}

TEST_CASE("backward matches central finite differences on a depth-1 net") {
    ArchSpec spec;
    spec.in_channels = 2;
    spec.num_classes = 3;
    spec.depth = 1;
    spec.filters = {3};
    spec.convs_per_block = 2;
    spec.kernel = 3;
    spec.seed = 77;
    NetParams<double> p = init_params<double>(spec);
    Tensor4<double> x(2, 2, 4, 4);
    fill_random(x, 11);

    // Fixed linear functional of the probabilities as the loss.
    Tensor4<double> coeff(2, 3, 4, 4);
    fill_random(coeff, 13);
    const auto loss_of = [&](NetParams<double>& params) {
        const Tensor4<double> probs = forward<double>(params, x, true, nullptr);
        double l = 0;
        for (std::size_t q = 0; q < probs.v.size(); ++q) l += coeff.v[q] * probs.v[q];
        return l;
    };

    ForwardCache<double> cache;
    forward<double>(p, x, true, &cache);
    NetParams<double> grad = backward(p, cache, coeff);

    auto prefs = collect_params(p);
    auto grefs = collect_params(grad);
    std::mt19937_64 rng(123);
    const double h = 1e-6;
    int checked = 0;
    double max_rel = 0.0;
    for (int probe = 0; probe < 400; ++probe) {
        const std::size_t a = rng() % prefs.size();
        if (prefs[a].data->empty()) continue;
        const std::size_t i = rng() % prefs[a].data->size();
        const double orig = (*prefs[a].data)[i];
        (*prefs[a].data)[i] = orig + h;
        const double lp = loss_of(p);
        (*prefs[a].data)[i] = orig - h;
        const double lm = loss_of(p);
        (*prefs[a].data)[i] = orig;
        const double fd = (lp - lm) / (2 * h);
        const double an = (*grefs[a].data)[i];
        // Conv biases feed straight into batchnorm, so their true gradient
        // is exactly zero; there the difference is pure FD roundoff.
        if (std::abs(fd) < 1e-7 && std::abs(an) < 1e-7) {
            ++checked;
            continue;
        }
        const double denom = std::max(std::abs(fd), std::abs(an));
        max_rel = std::max(max_rel, std::abs(fd - an) / denom);
        ++checked;
    }
    CHECK(checked >= 390);
    CHECK(max_rel < 1e-4);
}

TEST_CASE("zero loss gradient gives zero parameter gradients") {
    ArchSpec spec;
    spec.in_channels = 2;
    spec.num_classes = 3;
    spec.depth = 1;
    spec.filters = {3};
    spec.seed = 5;
    NetParams<double> p = init_params<double>(spec);
    Tensor4<double> x(1, 2, 4, 4);
    fill_random(x, 9);
    ForwardCache<double> cache;
    forward<double>(p, x, true, &cache);
    Tensor4<double> zero(1, 3, 4, 4);
    NetParams<double> grad = backward(p, cache, zero);
    for (const auto& ref : collect_params(grad))
        for (double v : *ref.data) CHECK(v == 0.0);
}

TEST_CASE("duplicated sample doubles the parameter gradients") {
    ArchSpec spec;
    spec.in_channels = 2;
    spec.num_classes = 3;
    spec.depth = 1;
    spec.filters = {3};
    spec.seed = 6;
    NetParams<double> p = init_params<double>(spec);

    Tensor4<double> one(1, 2, 4, 4), dy1(1, 3, 4, 4);
    fill_random(one, 31);
    fill_random(dy1, 32);
    Tensor4<double> two(2, 2, 4, 4), dy2(2, 3, 4, 4);
    for (int i = 0; i < 2; ++i) {
        std::copy(one.v.begin(), one.v.end(),
                  two.v.begin() + static_cast<std::ptrdiff_t>(i * one.v.size()));
        std::copy(dy1.v.begin(), dy1.v.end(),
                  dy2.v.begin() + static_cast<std::ptrdiff_t>(i * dy1.v.size()));
    }

    ForwardCache<double> c1, c2;
    forward<double>(p, one, true, &c1);
    forward<double>(p, two, true, &c2);
    NetParams<double> g1 = backward(p, c1, dy1);
    NetParams<double> g2 = backward(p, c2, dy2);
    auto r1 = collect_params(g1), r2 = collect_params(g2);
    for (std::size_t a = 0; a < r1.size(); ++a)
        for (std::size_t i = 0; i < r1[a].data->size(); ++i)
            CHECK((*r2[a].data)[i] == doctest::Approx(2.0 * (*r1[a].data)[i]).epsilon(1e-9));
}

TEST_CASE("forward and backward are bitwise reproducible") {
    ArchSpec spec;
    spec.in_channels = 3;
    spec.num_classes = 4;
    spec.depth = 2;
    spec.filters = {4, 6};
    spec.seed = 8;
    NetParams<float> p1 = init_params<float>(spec);
    NetParams<float> p2 = init_params<float>(spec);
    Tensor4<float> x(2, 3, 8, 8), dy(2, 4, 8, 8);
    fill_random(x, 50);
    fill_random(dy, 51);

    ForwardCache<float> c1, c2;
    const Tensor4<float> o1 = forward<float>(p1, x, true, &c1);
    const Tensor4<float> o2 = forward<float>(p2, x, true, &c2);
    CHECK(o1.v == o2.v);
    NetParams<float> g1 = backward(p1, c1, dy);
    NetParams<float> g2 = backward(p2, c2, dy);
    auto r1 = collect_params(g1), r2 = collect_params(g2);
    for (std::size_t a = 0; a < r1.size(); ++a) CHECK(*r1[a].data == *r2[a].data);
}

TEST_CASE("translation covariance in the interior (inference mode)") {
    ArchSpec spec;
    spec.in_channels = 1;
    spec.num_classes = 3;
    spec.depth = 1;
    spec.filters = {4};
    spec.seed = 123;
    NetParams<double> p = init_params<double>(spec);
    // Warm the running stats so inference mode sees realistic scales.
    Tensor4<double> warm(1, 1, 96, 96);
    fill_random(warm, 99);
    forward<double>(p, warm, true, nullptr);

    // Shifts aligned with the pooling lattice (2^depth) translate interior
    // outputs identically; the margin exceeds the 24-pixel receptive radius
    // of three 5x5-conv blocks around one pooling stage.
    Tensor4<double> base(1, 1, 100, 100);
    fill_random(base, 100);
    const int shift = 2;  // pooling stride at depth 1
    const int size = 96;
    Tensor4<double> w0(1, 1, size, size), w1(1, 1, size, size);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            w0.at(0, 0, y, x) = base.at(0, 0, y, x);
            w1.at(0, 0, y, x) = base.at(0, 0, y + shift, x + shift);
        }
    const Tensor4<double> o0 = forward<double>(p, w0, false, nullptr);
    const Tensor4<double> o1 = forward<double>(p, w1, false, nullptr);
    const int margin = 28;
    for (int j = 0; j < 3; ++j)
        for (int y = margin; y < size - margin - shift; ++y)
            for (int x = margin; x < size - margin - shift; ++x)
                CHECK(o1.at(0, j, y, x) ==
                      doctest::Approx(o0.at(0, j, y + shift, x + shift)).epsilon(1e-10));
}

TEST_CASE("sgd_step changes each parameter by exactly -lr * gradient") {
    ArchSpec spec;
    spec.in_channels = 2;
    spec.num_classes = 3;
    spec.depth = 1;
    spec.filters = {3};
    spec.seed = 44;
    NetParams<double> p = init_params<double>(spec);
    NetParams<double> g = make_zero_like(p);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(-1, 1);
    for (auto& ref : collect_params(g))
        for (auto& v : *ref.data) v = u(rng);
    NetParams<double> before = p;
    sgd_step(p, g, 0.01);
    auto rp = collect_params(p), rb = collect_params(before), rg = collect_params(g);
    for (std::size_t a = 0; a < rp.size(); ++a)
        for (std::size_t i = 0; i < rp[a].data->size(); ++i)
            CHECK((*rp[a].data)[i] == (*rb[a].data)[i] - 0.01 * (*rg[a].data)[i]);
}

TEST_CASE("float/double parameter conversion round trip") {
    ArchSpec spec;
    spec.in_channels = 2;
    spec.num_classes = 3;
    spec.depth = 1;
    spec.filters = {3};
    spec.seed = 55;
    NetParams<float> p = init_params<float>(spec);
    NetParams<double> d = convert_params<float, double>(p);
    NetParams<float> back = convert_params<double, float>(d);
    auto r1 = collect_params(p), r2 = collect_params(back);
    for (std::size_t a = 0; a < r1.size(); ++a) CHECK(*r1[a].data == *r2[a].data);
}
