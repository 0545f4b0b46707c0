#pragma once

#include <map>
#include <optional>

#include "dwiseg/features.hpp"
#include "dwiseg/network.hpp"
#include "dwiseg/volume.hpp"

namespace dwiseg {

// ---- loss weights ----------------------------------------------------------

std::map<std::int32_t, std::size_t> label_counts(const LabelVolume& labels);

// Median-frequency balancing over the classes present: w_c = median(freq) /
// freq_c. Even counts use the mean of the two middle frequencies. Absent
// classes get weight 0.
std::map<std::int32_t, double> median_frequency_weights(
    const std::map<std::int32_t, std::size_t>& counts);

std::map<std::int32_t, double> class_weights(const LabelVolume& labels);

// omega_E(x) = edge_gain where any 6-neighbor has a different label, else 0.
Volume edge_weights(const LabelVolume& labels, double edge_gain);

// omega(x) = omega_F(x) + omega_E(x) with omega_F(x) the class weight of the
// reference label at x.
Volume weight_map(const LabelVolume& labels, const std::map<std::int32_t, double>& class_w,
                  double edge_gain);

// ---- combined loss ---------------------------------------------------------

template <typename T>
struct Batch {
    Tensor4<T> inputs;               // (N, C, H, W)
    Tensor4<std::int32_t> targets;   // (N, 1, H, W)
    Tensor4<T> weights;              // (N, 1, H, W)
};

template <typename T>
struct LossResult {
    double value = 0.0;      // logistic - mean dice
    double logistic = 0.0;   // sum_x omega(x) * (-log p_target(x))
    double dice = 0.0;       // mean over classes present in the batch
    Tensor4<T> dprobs;       // exact gradient wrt probabilities
};

// Logistic term summed over pixels and classes (targets one-hot), minus the
// soft Dice term 2*sum(p*g) / (sum(p^2) + sum(g^2)) averaged over classes
// present in the batch. Probabilities are clamped to [1e-12, 1] before the
// log. Throws NumericError on non-finite probabilities.
//
// `logistic_scale` rescales the logistic term in the returned value and
// gradient; the trainer passes 1/pixel-count so SGD follows the
// pixel-averaged objective while `logistic` always reports the plain sum.
template <typename T>
LossResult<T> combined_loss(const Tensor4<T>& probs, const Tensor4<std::int32_t>& targets,
                            const Tensor4<T>& weights, double logistic_scale = 1.0);

extern template LossResult<float> combined_loss<float>(const Tensor4<float>&,
                                                       const Tensor4<std::int32_t>&,
                                                       const Tensor4<float>&, double);
extern template LossResult<double> combined_loss<double>(const Tensor4<double>&,
                                                         const Tensor4<std::int32_t>&,
                                                         const Tensor4<double>&, double);

// ---- schedule and early stopping --------------------------------------------

struct TrainConfig {
    double initial_lr = 0.01;
    double lr_decay = 0.2;    // multiplier applied every decay_every epochs
    int decay_every = 10;
    int patience = 15;        // epochs without val improvement before stopping
    double improve_eps = 1e-6;
    int batch_size = 8;
    int max_epochs = 40;
    double momentum = 0.0;    // plain SGD by default
    double edge_gain = 5.0;
    int context_k = 3;
    std::uint64_t seed = 0;
};

void validate(const TrainConfig& cfg);

// lr(e) = initial_lr * lr_decay^floor(e / decay_every)
double lr_for_epoch(const TrainConfig& cfg, int epoch);

// Tracks the best validation loss; improvement means dropping below
// best - eps. should_stop() fires after `patience` consecutive
// non-improving epochs.
class EarlyStopper {
public:
    EarlyStopper(int patience, double eps) : patience_(patience), eps_(eps) {}

    bool observe(double val_loss) {
        ++epoch_;
        if (epoch_ == 0 || val_loss < best_loss_ - eps_) {
            best_loss_ = val_loss;
            best_epoch_ = epoch_;
            stale_ = 0;
            return true;
        }
        ++stale_;
        return false;
    }
    bool should_stop() const { return stale_ >= patience_; }
    int best_epoch() const { return best_epoch_; }
    double best_loss() const { return best_loss_; }

private:
    int patience_;
    double eps_;
    int epoch_ = -1;
    int stale_ = 0;
    int best_epoch_ = 0;
    double best_loss_ = 0.0;
};

// ---- slice dataset and trainer ----------------------------------------------

// Assembles batches on demand from per-case representation volumes; nothing
// is materialized up front.
class SliceDataset {
public:
    SliceDataset(std::vector<const Volume*> reps, std::vector<const LabelVolume*> labels,
                 std::vector<const Volume*> weights, View view, int context_k);

    std::size_t size() const { return entries_.size(); }
    int channels() const { return channels_; }
    int height() const { return h_; }
    int width() const { return w_; }
    View view() const { return view_; }
    int context_k() const { return context_k_; }

    void fill_batch(const std::vector<std::size_t>& sample_ids, Batch<float>& out) const;

private:
    struct Entry {
        int case_idx, slice;
    };
    std::vector<const Volume*> reps_;
    std::vector<const LabelVolume*> labels_;
    std::vector<const Volume*> weights_;
    std::vector<Entry> entries_;
    View view_;
    int context_k_, channels_, h_, w_;
};

struct EpochStats {
    int epoch;
    double lr, train_loss, val_loss;
};

struct TrainResult {
    NetParams<float> best_params;
    std::vector<EpochStats> history;
    int best_epoch = 0;
    int epochs_run = 0;
};

// SGD on shuffled batches with the decayed schedule and early stopping;
// keeps the parameters of the best-validation epoch. Deterministic in
// cfg.seed at a fixed thread count. Throws NumericError on divergence.
TrainResult train_network(const ArchSpec& arch, const TrainConfig& cfg,
                          const SliceDataset& train, const SliceDataset& val);

void write_history_csv(const std::vector<EpochStats>& history, const std::string& path);

}  // namespace dwiseg
