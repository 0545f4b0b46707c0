#pragma once

// Template implementation detail of network.hpp; do not include directly.

namespace dwiseg {

inline void validate(const ArchSpec& spec) {
    if (spec.depth < 1) throw ValidationError("depth must be >= 1");
    if (spec.filters.size() != static_cast<std::size_t>(spec.depth))
        throw ValidationError("filters must list one entry per encoder level");
    for (int f : spec.filters)
        if (f <= 0) throw ValidationError("filter counts must be positive");
    if (spec.convs_per_block < 1) throw ValidationError("convs_per_block must be >= 1");
    if (spec.kernel < 1 || spec.kernel % 2 == 0)
        throw ValidationError("kernel size must be odd and positive");
    if (spec.in_channels < 1) throw ValidationError("in_channels must be positive");
    if (spec.num_classes < 2) throw ValidationError("num_classes must be >= 2");
}

namespace detail {

struct BlockPlan {
    int in_ch, out_ch;
};

inline BlockPlan enc_plan(const ArchSpec& s, int level) {
    return {level == 0 ? s.in_channels : s.filters[level - 1], s.filters[level]};
}
inline BlockPlan bottleneck_plan(const ArchSpec& s) {
    return {s.filters[s.depth - 1], s.filters[s.depth - 1]};
}
inline BlockPlan dec_plan(const ArchSpec& s, int level) {
    return {s.filters[level], level == 0 ? s.filters[0] : s.filters[level - 1]};
}

template <typename T>
BlockParams<T> make_block(const ArchSpec& s, const BlockPlan& plan) {
    BlockParams<T> b;
    b.units.resize(s.convs_per_block);
    for (int j = 0; j < s.convs_per_block; ++j) {
        UnitParams<T>& u = b.units[j];
        u.conv.c_in = (j == 0) ? plan.in_ch : plan.out_ch;
        u.conv.c_out = plan.out_ch;
        u.conv.k = s.kernel;
        u.conv.w.assign(static_cast<std::size_t>(u.conv.c_out) * u.conv.c_in * s.kernel * s.kernel,
                        T(0));
        u.conv.b.assign(u.conv.c_out, T(0));
        u.gamma.assign(u.conv.c_out, T(1));
        u.beta.assign(u.conv.c_out, T(0));
        u.run_mean.assign(u.conv.c_out, T(0));
        u.run_var.assign(u.conv.c_out, T(1));
        u.slope.assign(u.conv.c_out, static_cast<T>(s.prelu_init));
    }
    return b;
}

template <typename T, typename Fn>
void visit_blocks(NetParams<T>& p, Fn&& fn) {
    for (std::size_t i = 0; i < p.enc.size(); ++i) fn("enc" + std::to_string(i), p.enc[i]);
    fn("bottleneck", p.bottleneck);
    for (std::size_t i = 0; i < p.dec.size(); ++i) fn("dec" + std::to_string(i), p.dec[i]);
}

template <typename T>
void pad_spatial(const Tensor4<T>& x, int hp, int wp, Tensor4<T>& y) {
    y.resize(x.n, x.c, hp, wp);
    for (int i = 0; i < x.n; ++i)
        for (int j = 0; j < x.c; ++j) {
            const T* in = x.plane(i, j);
            T* out = y.plane(i, j);
            for (int yy = 0; yy < x.h; ++yy)
                std::copy_n(in + static_cast<std::size_t>(yy) * x.w, x.w,
                            out + static_cast<std::size_t>(yy) * wp);
        }
}

template <typename T>
void crop_spatial(const Tensor4<T>& x, int h, int w, Tensor4<T>& y) {
    y.resize(x.n, x.c, h, w);
    for (int i = 0; i < x.n; ++i)
        for (int j = 0; j < x.c; ++j) {
            const T* in = x.plane(i, j);
            T* out = y.plane(i, j);
            for (int yy = 0; yy < h; ++yy)
                std::copy_n(in + static_cast<std::size_t>(yy) * x.w, w,
                            out + static_cast<std::size_t>(yy) * w);
        }
}

template <typename T>
void add_into(Tensor4<T>& dst, const Tensor4<T>& src) {
    if (dst.size() != src.size()) throw ShapeError("gradient accumulation size mismatch");
    const std::size_t total = dst.size();
#pragma omp parallel for schedule(static)
    for (long long q = 0; q < static_cast<long long>(total); ++q) dst.v[q] += src.v[q];
}

template <typename T>
void block_forward(UnitParams<T>* units, std::size_t n_units, const ArchSpec& spec,
                   const Tensor4<T>& input, bool training, BlockCache<T>& cache) {
    cache.input = &input;
    cache.units.resize(n_units);
    const Tensor4<T>* cur = &input;
    for (std::size_t j = 0; j < n_units; ++j) {
        UnitParams<T>& u = units[j];
        UnitCache<T>& uc = cache.units[j];
        conv2d_forward(*cur, u.conv.w, u.conv.b, u.conv.c_out, u.conv.k, uc.conv_out);
        batchnorm_forward(uc.conv_out, u.gamma, u.beta, u.run_mean, u.run_var, training,
                          spec.bn_eps, spec.bn_momentum, uc.bn_out, &uc.bn);
        prelu_forward(uc.bn_out, u.slope, uc.act_out);
        if (j > 0) maxout_forward(cache.state_of(j - 1), uc.act_out, uc.state);
        cur = &cache.state_of(j);
    }
}

// Returns the gradient wrt the block input; unit parameter gradients are
// written into `grad`.
template <typename T>
Tensor4<T> block_backward(const UnitParams<T>* units, BlockParams<T>& grad,
                          const BlockCache<T>& cache, const Tensor4<T>& d_out) {
    const std::size_t n_units = cache.units.size();
    Tensor4<T> dstate = d_out;
    Tensor4<T> d_input;
    for (std::size_t jj = n_units; jj-- > 0;) {
        const UnitParams<T>& u = units[jj];
        UnitParams<T>& g = grad.units[jj];
        const UnitCache<T>& uc = cache.units[jj];

        Tensor4<T> d_act, d_prev_from_max;
        if (jj > 0) {
            maxout_backward(cache.state_of(jj - 1), uc.act_out, dstate, d_prev_from_max, d_act);
        } else {
            d_act = std::move(dstate);
        }

        Tensor4<T> d_bn_out;
        prelu_backward(uc.bn_out, d_act, u.slope, d_bn_out, g.slope);

        Tensor4<T> d_conv_out;
        batchnorm_backward(uc.conv_out, d_bn_out, u.gamma, uc.bn, d_conv_out, g.gamma, g.beta);

        const Tensor4<T>& unit_input = (jj == 0) ? *cache.input : cache.state_of(jj - 1);
        conv2d_backward_params(unit_input, d_conv_out, u.conv.k, g.conv.w, g.conv.b);

        Tensor4<T> d_unit_input;
        conv2d_backward_data(d_conv_out, u.conv.w, u.conv.c_in, u.conv.k, d_unit_input);

        if (jj > 0) {
            add_into(d_prev_from_max, d_unit_input);
            dstate = std::move(d_prev_from_max);
        } else {
            d_input = std::move(d_unit_input);
        }
    }
    return d_input;
}

}  // namespace detail

template <typename T>
NetParams<T> init_params(const ArchSpec& spec) {
    validate(spec);
    NetParams<T> p;
    p.spec = spec;
    p.enc.reserve(spec.depth);
    for (int i = 0; i < spec.depth; ++i)
        p.enc.push_back(detail::make_block<T>(spec, detail::enc_plan(spec, i)));
    p.bottleneck = detail::make_block<T>(spec, detail::bottleneck_plan(spec));
    p.dec.reserve(spec.depth);
    for (int i = 0; i < spec.depth; ++i)
        p.dec.push_back(detail::make_block<T>(spec, detail::dec_plan(spec, i)));
    p.head.c_in = spec.filters[0];
    p.head.c_out = spec.num_classes;
    p.head.k = 1;
    p.head.w.assign(static_cast<std::size_t>(p.head.c_out) * p.head.c_in, T(0));
    p.head.b.assign(p.head.c_out, T(0));

    std::uint64_t stream = 0;
    const auto fill_conv = [&](ConvParams<T>& c) {
        const double scale = std::sqrt(2.0 / (static_cast<double>(c.c_in) * c.k * c.k));
        CounterRng rng(spec.seed, stream++);
        for (std::size_t q = 0; q < c.w.size(); ++q)
            c.w[q] = static_cast<T>(scale * rng.normal_at(q));
    };
    detail::visit_blocks(p, [&](const std::string&, BlockParams<T>& b) {
        for (auto& u : b.units) fill_conv(u.conv);
    });
    fill_conv(p.head);
    return p;
}

template <typename T>
NetParams<T> make_zero_like(const NetParams<T>& p) {
    NetParams<T> z = p;
    for_each_param<T>(z, [](const std::string&, const std::vector<int>&, std::vector<T>& a) {
        std::fill(a.begin(), a.end(), T(0));
    });
    for_each_state<T>(z, [](const std::string&, const std::vector<int>&, std::vector<T>& a) {
        std::fill(a.begin(), a.end(), T(0));
    });
    return z;
}

template <typename T>
void for_each_param(NetParams<T>& p, const ParamVisitor<T>& fn) {
    detail::visit_blocks(p, [&](const std::string& name, BlockParams<T>& b) {
        for (std::size_t j = 0; j < b.units.size(); ++j) {
            UnitParams<T>& u = b.units[j];
            const std::string base = name + ".unit" + std::to_string(j);
            fn(base + ".conv.w", {u.conv.c_out, u.conv.c_in, u.conv.k, u.conv.k}, u.conv.w);
            fn(base + ".conv.b", {u.conv.c_out}, u.conv.b);
            fn(base + ".bn.gamma", {u.conv.c_out}, u.gamma);
            fn(base + ".bn.beta", {u.conv.c_out}, u.beta);
            fn(base + ".prelu.slope", {u.conv.c_out}, u.slope);
        }
    });
    fn("head.conv.w", {p.head.c_out, p.head.c_in, 1, 1}, p.head.w);
    fn("head.conv.b", {p.head.c_out}, p.head.b);
}

template <typename T>
void for_each_state(NetParams<T>& p, const ParamVisitor<T>& fn) {
    detail::visit_blocks(p, [&](const std::string& name, BlockParams<T>& b) {
        for (std::size_t j = 0; j < b.units.size(); ++j) {
            UnitParams<T>& u = b.units[j];
            const std::string base = name + ".unit" + std::to_string(j);
            fn(base + ".bn.run_mean", {u.conv.c_out}, u.run_mean);
            fn(base + ".bn.run_var", {u.conv.c_out}, u.run_var);
        }
    });
}

template <typename T>
std::vector<ParamRef<T>> collect_params(NetParams<T>& p) {
    std::vector<ParamRef<T>> out;
    for_each_param<T>(p, [&](const std::string& n, const std::vector<int>& s, std::vector<T>& a) {
        out.push_back({n, s, &a});
    });
    return out;
}

template <typename T>
std::size_t param_count(const NetParams<T>& p) {
    std::size_t total = 0;
    auto& mp = const_cast<NetParams<T>&>(p);
    for_each_param<T>(mp, [&](const std::string&, const std::vector<int>&, std::vector<T>& a) {
        total += a.size();
    });
    return total;
}

template <typename T>
Tensor4<T> forward(NetParams<T>& p, const Tensor4<T>& input, bool training,
                   ForwardCache<T>* cache) {
    const ArchSpec& spec = p.spec;
    if (input.c != spec.in_channels)
        throw ShapeError("input channels " + std::to_string(input.c) + " != spec.in_channels " +
                         std::to_string(spec.in_channels));

    ForwardCache<T> local;
    ForwardCache<T>& ws = cache ? *cache : local;
    ws.orig_h = input.h;
    ws.orig_w = input.w;

    const int mult = 1 << spec.depth;
    const int hp = (input.h + mult - 1) / mult * mult;
    const int wp = (input.w + mult - 1) / mult * mult;
    if (hp != input.h || wp != input.w) {
        detail::pad_spatial(input, hp, wp, ws.input);
    } else {
        ws.input = input;
    }

    ws.enc.resize(spec.depth);
    ws.pooled.resize(spec.depth);
    ws.pool_idx.resize(spec.depth);
    const Tensor4<T>* cur = &ws.input;
    for (int i = 0; i < spec.depth; ++i) {
        detail::block_forward(p.enc[i].units.data(), p.enc[i].units.size(), spec, *cur, training,
                              ws.enc[i]);
        maxpool2x2_forward(ws.enc[i].output(), ws.pooled[i], ws.pool_idx[i]);
        cur = &ws.pooled[i];
    }
    detail::block_forward(p.bottleneck.units.data(), p.bottleneck.units.size(), spec, *cur,
                          training, ws.bottleneck);
    cur = &ws.bottleneck.output();

    ws.unpooled.resize(spec.depth);
    ws.fused.resize(spec.depth);
    ws.dec.resize(spec.depth);
    for (int i = spec.depth - 1; i >= 0; --i) {
        unpool2x2_forward(*cur, ws.pool_idx[i], ws.unpooled[i]);
        maxout_forward(ws.unpooled[i], ws.enc[i].output(), ws.fused[i]);
        detail::block_forward(p.dec[i].units.data(), p.dec[i].units.size(), spec, ws.fused[i],
                              training, ws.dec[i]);
        cur = &ws.dec[i].output();
    }

    conv2d_forward(*cur, p.head.w, p.head.b, p.head.c_out, 1, ws.logits);
    softmax_forward(ws.logits, ws.probs);

    if (hp != input.h || wp != input.w) {
        Tensor4<T> cropped;
        detail::crop_spatial(ws.probs, input.h, input.w, cropped);
        return cropped;
    }
    return ws.probs;
}

template <typename T>
NetParams<T> backward(const NetParams<T>& p, const ForwardCache<T>& cache,
                      const Tensor4<T>& dprobs) {
    const ArchSpec& spec = p.spec;
    NetParams<T> grad = make_zero_like(p);

    Tensor4<T> dprobs_padded;
    if (cache.probs.h != dprobs.h || cache.probs.w != dprobs.w) {
        detail::pad_spatial(dprobs, cache.probs.h, cache.probs.w, dprobs_padded);
    } else {
        dprobs_padded = dprobs;
    }

    Tensor4<T> dlogits;
    softmax_backward(cache.probs, dprobs_padded, dlogits);

    conv2d_backward_params(cache.dec[0].output(), dlogits, 1, grad.head.w, grad.head.b);
    Tensor4<T> dcur;
    conv2d_backward_data(dlogits, p.head.w, p.head.c_in, 1, dcur);

    // Decoder backward, shallowest level first (reverse of the forward pass).
    std::vector<Tensor4<T>> d_enc_out(spec.depth);
    for (int i = 0; i < spec.depth; ++i) {
        Tensor4<T> d_fused =
            detail::block_backward(p.dec[i].units.data(), grad.dec[i], cache.dec[i], dcur);
        Tensor4<T> d_unpooled;
        maxout_backward(cache.unpooled[i], cache.enc[i].output(), d_fused, d_unpooled,
                        d_enc_out[i]);
        unpool2x2_backward(d_unpooled, cache.pool_idx[i], dcur);
    }

    Tensor4<T> d_pooled = detail::block_backward(p.bottleneck.units.data(), grad.bottleneck,
                                                 cache.bottleneck, dcur);
    for (int i = spec.depth - 1; i >= 0; --i) {
        Tensor4<T> d_from_pool;
        maxpool2x2_backward(d_pooled, cache.pool_idx[i], d_from_pool);
        detail::add_into(d_from_pool, d_enc_out[i]);
        Tensor4<T> d_block_in =
            detail::block_backward(p.enc[i].units.data(), grad.enc[i], cache.enc[i], d_from_pool);
        if (i > 0) d_pooled = std::move(d_block_in);
    }
    return grad;
}

template <typename T>
void sgd_step(NetParams<T>& p, NetParams<T>& grad, double lr, double momentum,
              NetParams<T>* velocity) {
    auto ps = collect_params(p);
    auto gs = collect_params(grad);
    if (momentum != 0.0 && velocity) {
        auto vs = collect_params(*velocity);
        for (std::size_t a = 0; a < ps.size(); ++a) {
            std::vector<T>& pv = *ps[a].data;
            std::vector<T>& gv = *gs[a].data;
            std::vector<T>& vv = *vs[a].data;
            for (std::size_t q = 0; q < pv.size(); ++q) {
                vv[q] = static_cast<T>(momentum * vv[q] + gv[q]);
                pv[q] -= static_cast<T>(lr * vv[q]);
            }
        }
    } else {
        for (std::size_t a = 0; a < ps.size(); ++a) {
            std::vector<T>& pv = *ps[a].data;
            std::vector<T>& gv = *gs[a].data;
            for (std::size_t q = 0; q < pv.size(); ++q) pv[q] -= static_cast<T>(lr * gv[q]);
        }
    }
}

template <typename T, typename U>
NetParams<U> convert_params(const NetParams<T>& p) {
    NetParams<U> out = init_params<U>(p.spec);
    auto& src = const_cast<NetParams<T>&>(p);
    std::vector<ParamRef<T>> s;
    std::vector<ParamRef<U>> d;
    for_each_param<T>(src, [&](const std::string& n, const std::vector<int>& sh,
                               std::vector<T>& a) { s.push_back({n, sh, &a}); });
    for_each_state<T>(src, [&](const std::string& n, const std::vector<int>& sh,
                               std::vector<T>& a) { s.push_back({n, sh, &a}); });
    for_each_param<U>(out, [&](const std::string& n, const std::vector<int>& sh,
                               std::vector<U>& a) { d.push_back({n, sh, &a}); });
    for_each_state<U>(out, [&](const std::string& n, const std::vector<int>& sh,
                               std::vector<U>& a) { d.push_back({n, sh, &a}); });
    for (std::size_t a = 0; a < s.size(); ++a) {
        std::vector<U>& dv = *d[a].data;
        const std::vector<T>& sv = *s[a].data;
        for (std::size_t q = 0; q < sv.size(); ++q) dv[q] = static_cast<U>(sv[q]);
    }
    return out;
}

}  // namespace dwiseg
