#include "dwiseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "dwiseg/rng.hpp"

namespace dwiseg {

std::map<std::int32_t, std::size_t> label_counts(const LabelVolume& labels) {
    std::map<std::int32_t, std::size_t> counts;
    for (std::int32_t l : labels.labels) ++counts[l];
    return counts;
}

std::map<std::int32_t, double> median_frequency_weights(
    const std::map<std::int32_t, std::size_t>& counts) {
    if (counts.empty()) throw ValidationError("stats error: no labeled voxels");
    std::vector<double> freqs;
    freqs.reserve(counts.size());
    double total = 0.0;
    for (const auto& [label, count] : counts) {
        if (count == 0) throw ValidationError("stats error: class with zero count");
        freqs.push_back(static_cast<double>(count));
        total += static_cast<double>(count);
    }
    for (double& f : freqs) f /= total;
    std::sort(freqs.begin(), freqs.end());
    const std::size_t n = freqs.size();
    const double median =
        (n % 2 == 1) ? freqs[n / 2] : 0.5 * (freqs[n / 2 - 1] + freqs[n / 2]);

    std::map<std::int32_t, double> weights;
    for (const auto& [label, count] : counts)
        weights[label] = median / (static_cast<double>(count) / total);
    return weights;
}

std::map<std::int32_t, double> class_weights(const LabelVolume& labels) {
    return median_frequency_weights(label_counts(labels));
}

Volume edge_weights(const LabelVolume& labels, double edge_gain) {
    Volume out = make_volume(labels.dims, 1, labels.affine);
    const int nx = labels.dims[0], ny = labels.dims[1], nz = labels.dims[2];
#pragma omp parallel for collapse(2) schedule(static)
    for (int z = 0; z < nz; ++z) {
        for (int y = 0; y < ny; ++y) {
            for (int x = 0; x < nx; ++x) {
                const std::int32_t c = labels.at(x, y, z);
                const bool edge = (x > 0 && labels.at(x - 1, y, z) != c) ||
                                  (x + 1 < nx && labels.at(x + 1, y, z) != c) ||
                                  (y > 0 && labels.at(x, y - 1, z) != c) ||
                                  (y + 1 < ny && labels.at(x, y + 1, z) != c) ||
                                  (z > 0 && labels.at(x, y, z - 1) != c) ||
                                  (z + 1 < nz && labels.at(x, y, z + 1) != c);
                out.at(x, y, z) = edge ? static_cast<float>(edge_gain) : 0.0f;
            }
        }
    }
    return out;
}

Volume weight_map(const LabelVolume& labels, const std::map<std::int32_t, double>& class_w,
                  double edge_gain) {
    Volume out = edge_weights(labels, edge_gain);
    const std::size_t nvox = labels.voxels();
    for (std::size_t v = 0; v < nvox; ++v) {
        const auto it = class_w.find(labels.labels[v]);
        out.data[v] += static_cast<float>(it != class_w.end() ? it->second : 0.0);
    }
    return out;
}

template <typename T>
LossResult<T> combined_loss(const Tensor4<T>& probs, const Tensor4<std::int32_t>& targets,
                            const Tensor4<T>& weights, double logistic_scale) {
    const int n = probs.n, c = probs.c, h = probs.h, w = probs.w;
    if (targets.n != n || targets.h != h || targets.w != w || targets.c != 1)
        throw ShapeError("targets shape does not match probabilities");
    if (weights.n != n || weights.h != h || weights.w != w || weights.c != 1)
        throw ShapeError("weights shape does not match probabilities");

    constexpr double kEps = 1e-12;
    const std::size_t plane = static_cast<std::size_t>(h) * w;

    LossResult<T> res;
    res.dprobs.resize(n, c, h, w);

    // Per-class batch sums for the Dice term.
    std::vector<double> inter(c, 0.0), psum(c, 0.0);
    std::vector<std::size_t> gsum(c, 0);

    double logistic = 0.0;
    for (int i = 0; i < n; ++i) {
        const T* p = probs.plane(i, 0);
        const std::int32_t* t = targets.plane(i, 0);
        const T* om = weights.plane(i, 0);
        for (std::size_t q = 0; q < plane; ++q) {
            const std::int32_t cls = t[q];
            if (cls < 0 || cls >= c) throw ValidationError("target class out of range");
            for (int j = 0; j < c; ++j) {
                const double pj = p[q + static_cast<std::size_t>(j) * plane];
                if (!std::isfinite(pj)) throw NumericError("non-finite probability in loss");
                psum[j] += pj * pj;
            }
            const double pt = p[q + static_cast<std::size_t>(cls) * plane];
            inter[cls] += pt;
            ++gsum[cls];
            const double pc = std::min(std::max(pt, kEps), 1.0);
            logistic -= static_cast<double>(om[q]) * std::log(pc);
        }
    }

    int present = 0;
    double dice_total = 0.0;
    std::vector<double> denom(c, 0.0);
    for (int j = 0; j < c; ++j) {
        if (gsum[j] == 0) continue;
        ++present;
        denom[j] = psum[j] + static_cast<double>(gsum[j]);
        dice_total += 2.0 * inter[j] / denom[j];
    }
    const double dice_mean = present > 0 ? dice_total / present : 0.0;

    res.logistic = logistic;
    res.dice = dice_mean;
    res.value = logistic_scale * logistic - dice_mean;

    // Gradient: logistic term only touches the target channel; the Dice term
    // touches every channel of every present class.
    const double inv_present = present > 0 ? 1.0 / present : 0.0;
    for (int i = 0; i < n; ++i) {
        const T* p = probs.plane(i, 0);
        const std::int32_t* t = targets.plane(i, 0);
        const T* om = weights.plane(i, 0);
        T* g = res.dprobs.plane(i, 0);
        for (std::size_t q = 0; q < plane; ++q) {
            const std::int32_t cls = t[q];
            for (int j = 0; j < c; ++j) {
                if (gsum[j] == 0) continue;
                const double pj = p[q + static_cast<std::size_t>(j) * plane];
                const double gj = (j == cls) ? 1.0 : 0.0;
                // d(dice_j)/dp_j(x) = (2 g_j denom - 4 inter_j p_j) / denom^2
                const double ddice =
                    (2.0 * gj * denom[j] - 4.0 * inter[j] * pj) / (denom[j] * denom[j]);
                g[q + static_cast<std::size_t>(j) * plane] =
                    static_cast<T>(-inv_present * ddice);
            }
            const double pt = p[q + static_cast<std::size_t>(cls) * plane];
            if (pt > kEps)
                g[q + static_cast<std::size_t>(cls) * plane] -=
                    static_cast<T>(logistic_scale * static_cast<double>(om[q]) / pt);
        }
    }
    return res;
}

template LossResult<float> combined_loss<float>(const Tensor4<float>&,
                                                const Tensor4<std::int32_t>&,
                                                const Tensor4<float>&, double);
template LossResult<double> combined_loss<double>(const Tensor4<double>&,
                                                  const Tensor4<std::int32_t>&,
                                                  const Tensor4<double>&, double);

void validate(const TrainConfig& cfg) {
    if (cfg.initial_lr <= 0 || cfg.lr_decay <= 0 || cfg.decay_every <= 0)
        throw ValidationError("learning-rate schedule values must be positive");
    if (cfg.patience < 1) throw ValidationError("patience must be >= 1");
    if (cfg.batch_size < 1 || cfg.max_epochs < 1)
        throw ValidationError("batch size and max epochs must be positive");
    if (cfg.context_k < 0) throw ValidationError("context half-width must be >= 0");
}

double lr_for_epoch(const TrainConfig& cfg, int epoch) {
    return cfg.initial_lr * std::pow(cfg.lr_decay, epoch / cfg.decay_every);
}

SliceDataset::SliceDataset(std::vector<const Volume*> reps,
                           std::vector<const LabelVolume*> labels,
                           std::vector<const Volume*> weights, View view, int context_k)
    : reps_(std::move(reps)),
      labels_(std::move(labels)),
      weights_(std::move(weights)),
      view_(view),
      context_k_(context_k) {
    if (reps_.empty() || reps_.size() != labels_.size() || reps_.size() != weights_.size())
        throw ValidationError("dataset needs matching rep/label/weight volumes");
    const ViewGeometry g = view_geometry(reps_[0]->dims, view_);
    h_ = g.h;
    w_ = g.w;
    channels_ = reps_[0]->channels * (2 * context_k_ + 1);
    for (std::size_t i = 0; i < reps_.size(); ++i) {
        if (reps_[i]->dims != labels_[i]->dims || reps_[i]->dims != weights_[i]->dims ||
            reps_[i]->dims != reps_[0]->dims || reps_[i]->channels != reps_[0]->channels)
            throw ShapeError("dataset volumes disagree in shape");
        for (int s = 0; s < g.slices; ++s) entries_.push_back({static_cast<int>(i), s});
    }
}

void SliceDataset::fill_batch(const std::vector<std::size_t>& sample_ids,
                              Batch<float>& out) const {
    const int n = static_cast<int>(sample_ids.size());
    out.inputs.resize(n, channels_, h_, w_);
    out.targets.resize(n, 1, h_, w_);
    out.weights.resize(n, 1, h_, w_);
#pragma omp parallel for schedule(static)
    for (int i = 0; i < n; ++i) {
        const Entry& e = entries_.at(sample_ids[i]);
        copy_slice_input(*reps_[e.case_idx], view_, context_k_, e.slice, out.inputs.plane(i, 0));
        copy_slice_labels(*labels_[e.case_idx], view_, e.slice, out.targets.plane(i, 0));
        copy_slice_weights(*weights_[e.case_idx], view_, e.slice, out.weights.plane(i, 0));
    }
}

namespace {

double run_validation(NetParams<float>& params, const SliceDataset& val, int batch_size) {
    // Inference mode: stored running statistics, no parameter updates.
    std::vector<std::size_t> order(val.size());
    std::iota(order.begin(), order.end(), 0);
    double total = 0.0;
    Batch<float> batch;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
        const std::size_t end = std::min(order.size(), start + batch_size);
        std::vector<std::size_t> ids(order.begin() + start, order.begin() + end);
        val.fill_batch(ids, batch);
        Tensor4<float> probs = forward<float>(params, batch.inputs, false, nullptr);
        const double scale =
            1.0 / (static_cast<double>(probs.n) * probs.h * probs.w);
        total += combined_loss(probs, batch.targets, batch.weights, scale).value;
    }
    return total / std::ceil(static_cast<double>(val.size()) / batch_size);
}

}  // namespace

TrainResult train_network(const ArchSpec& arch, const TrainConfig& cfg,
                          const SliceDataset& train, const SliceDataset& val) {
    validate(cfg);
    if (train.size() == 0 || val.size() == 0)
        throw ValidationError("training needs non-empty train and validation sets");
    if (train.channels() != arch.in_channels)
        throw ShapeError("dataset channels " + std::to_string(train.channels()) +
                         " != arch in_channels " + std::to_string(arch.in_channels));

    NetParams<float> params = init_params<float>(arch);
    NetParams<float> velocity;
    if (cfg.momentum != 0.0) velocity = make_zero_like(params);

    TrainResult res;
    EarlyStopper stopper(cfg.patience, cfg.improve_eps);
    res.best_params = params;

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);

    Batch<float> batch;
    ForwardCache<float> cache;
    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const double lr = lr_for_epoch(cfg, epoch);
        CounterRng shuffle_rng(cfg.seed, 0x5AD0 + static_cast<std::uint64_t>(epoch));
        std::iota(order.begin(), order.end(), 0);
        shuffle_rng.shuffle(order.begin(), order.end());

        double train_total = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<std::size_t> ids(order.begin() + start, order.begin() + end);
            train.fill_batch(ids, batch);
            Tensor4<float> probs = forward(params, batch.inputs, true, &cache);
            // Pixel-averaged objective: the learning-rate schedule presumes a
            // mean-reduced logistic term.
            const double scale = 1.0 / (static_cast<double>(probs.n) * probs.h * probs.w);
            LossResult<float> loss = combined_loss(probs, batch.targets, batch.weights, scale);
            if (!std::isfinite(loss.value))
                throw NumericError("training aborted: non-finite loss at epoch " +
                                   std::to_string(epoch));
            train_total += loss.value;
            NetParams<float> grad = backward(params, cache, loss.dprobs);
            sgd_step(params, grad, lr, cfg.momentum, cfg.momentum != 0.0 ? &velocity : nullptr);
        }
        const double train_loss =
            train_total / std::ceil(static_cast<double>(train.size()) / cfg.batch_size);
        const double val_loss = run_validation(params, val, cfg.batch_size);
        if (!std::isfinite(val_loss))
            throw NumericError("training aborted: non-finite validation loss at epoch " +
                               std::to_string(epoch));

        res.history.push_back({epoch, lr, train_loss, val_loss});
        if (stopper.observe(val_loss)) res.best_params = params;
        res.epochs_run = epoch + 1;
        if (stopper.should_stop()) break;
    }
    res.best_epoch = stopper.best_epoch();
    return res;
}

void write_history_csv(const std::vector<EpochStats>& history, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << "epoch,lr,train_loss,val_loss\n";
    char buf[160];
    for (const auto& e : history) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g\n", e.epoch, e.lr, e.train_loss,
                      e.val_loss);
        out << buf;
    }
}

}  // namespace dwiseg
