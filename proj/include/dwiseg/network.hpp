#pragma once

#include <functional>
#include <string>

#include "dwiseg/netops.hpp"
#include "dwiseg/rng.hpp"

namespace dwiseg {

// Encoder-decoder segmentation network built from competitive dense blocks:
// each block is a sequence of (conv -> batchnorm -> prelu) units whose
// outputs are fused into the running block state by element-wise maximum.
// Skip connections fuse the stored encoder output with the unpooled decoder
// features, again by element-wise maximum. Unpooling uses the max-pool
// indices retained by the paired encoder level.
struct ArchSpec {
    int in_channels = 1;
    int num_classes = 2;
    int depth = 3;                       // encoder levels (2x2 pool stages)
    std::vector<int> filters{16, 32, 64};  // one entry per level
    int convs_per_block = 3;
    int kernel = 5;
    std::uint64_t seed = 0;
    double bn_eps = 1e-5;
    double bn_momentum = 0.1;
    double prelu_init = 0.25;
};

void validate(const ArchSpec& spec);

template <typename T>
struct ConvParams {
    std::vector<T> w;  // (c_out, c_in, k, k)
    std::vector<T> b;  // (c_out)
    int c_in = 0, c_out = 0, k = 0;
};

template <typename T>
struct UnitParams {
    ConvParams<T> conv;
    std::vector<T> gamma, beta, run_mean, run_var;  // batchnorm
    std::vector<T> slope;                           // prelu
};

template <typename T>
struct BlockParams {
    std::vector<UnitParams<T>> units;
};

template <typename T>
struct NetParams {
    ArchSpec spec;
    std::vector<BlockParams<T>> enc;   // spec.depth blocks
    BlockParams<T> bottleneck;
    std::vector<BlockParams<T>> dec;   // spec.depth blocks, dec[i] paired with enc[i]
    ConvParams<T> head;                // 1x1 conv to num_classes
};

// Named view of one parameter (or running-stat) array.
template <typename T>
struct ParamRef {
    std::string name;
    std::vector<int> shape;
    std::vector<T>* data;
};

template <typename T>
using ParamVisitor = std::function<void(const std::string&, const std::vector<int>&,
                                        std::vector<T>&)>;

// Deterministic in spec.seed: fan-in-scaled normal kernels, zero biases,
// unit batchnorm scales, prelu slopes at spec.prelu_init.
template <typename T>
NetParams<T> init_params(const ArchSpec& spec);

// Zero-valued clone used for gradients.
template <typename T>
NetParams<T> make_zero_like(const NetParams<T>& p);

// Visits learnable arrays in a fixed documented order.
template <typename T>
void for_each_param(NetParams<T>& p, const ParamVisitor<T>& fn);

// Visits batchnorm running statistics (state, not learnable).
template <typename T>
void for_each_state(NetParams<T>& p, const ParamVisitor<T>& fn);

template <typename T>
std::vector<ParamRef<T>> collect_params(NetParams<T>& p);

template <typename T>
std::size_t param_count(const NetParams<T>& p);

// Per-unit activations retained for the backward pass. For the first unit
// the fused state aliases act_out, so `state` stays empty there.
template <typename T>
struct UnitCache {
    Tensor4<T> conv_out, bn_out, act_out, state;
    BnCache<T> bn;
};

template <typename T>
struct BlockCache {
    const Tensor4<T>* input = nullptr;  // owned by the enclosing ForwardCache
    std::vector<UnitCache<T>> units;
    const Tensor4<T>& state_of(std::size_t j) const {
        return j == 0 ? units[0].act_out : units[j].state;
    }
    const Tensor4<T>& output() const { return state_of(units.size() - 1); }
};

template <typename T>
struct ForwardCache {
    Tensor4<T> input;          // padded input
    int orig_h = 0, orig_w = 0;
    std::vector<BlockCache<T>> enc;
    std::vector<Tensor4<T>> pooled;
    std::vector<Tensor4<std::uint8_t>> pool_idx;
    BlockCache<T> bottleneck;
    std::vector<Tensor4<T>> unpooled;   // per decoder level
    std::vector<Tensor4<T>> fused;      // max(unpooled, encoder output)
    std::vector<BlockCache<T>> dec;
    Tensor4<T> logits, probs;
};

// Runs the network on (N, in_channels, H, W). Spatial dims are zero-padded
// up to a multiple of 2^depth and the output is cropped back. In training
// mode batch statistics are used (and running stats updated); otherwise the
// stored running statistics apply. Returns per-pixel class probabilities.
template <typename T>
Tensor4<T> forward(NetParams<T>& p, const Tensor4<T>& input, bool training,
                   ForwardCache<T>* cache);

// Exact gradients of a scalar loss wrt every learnable array, given
// dL/dprobs from the loss. Requires the cache of a training-mode forward.
template <typename T>
NetParams<T> backward(const NetParams<T>& p, const ForwardCache<T>& cache,
                      const Tensor4<T>& dprobs);

// p -= lr * g, optionally with momentum (velocity owned by the caller).
template <typename T>
void sgd_step(NetParams<T>& p, NetParams<T>& grad, double lr, double momentum = 0.0,
              NetParams<T>* velocity = nullptr);

template <typename T, typename U>
NetParams<U> convert_params(const NetParams<T>& p);

extern template NetParams<float> init_params<float>(const ArchSpec&);
extern template NetParams<double> init_params<double>(const ArchSpec&);
extern template Tensor4<float> forward<float>(NetParams<float>&, const Tensor4<float>&, bool,
                                              ForwardCache<float>*);
extern template Tensor4<double> forward<double>(NetParams<double>&, const Tensor4<double>&, bool,
                                                ForwardCache<double>*);
extern template NetParams<float> backward<float>(const NetParams<float>&,
                                                 const ForwardCache<float>&,
                                                 const Tensor4<float>&);
extern template NetParams<double> backward<double>(const NetParams<double>&,
                                                   const ForwardCache<double>&,
                                                   const Tensor4<double>&);

}  // namespace dwiseg

#include "dwiseg/network_impl.hpp"
