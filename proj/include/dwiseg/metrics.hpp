#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dwiseg/volume.hpp"

namespace dwiseg {

// Per-voxel class probability volume; channel c holds the probability of
// class id c. Channel vectors sum to 1 within 1e-4.
struct ProbabilityVolume : Volume {
    int num_classes() const { return channels; }
};

void validate_simplex(const ProbabilityVolume& p, double tol = 1e-4);

ProbabilityVolume one_hot(const LabelVolume& labels, int num_classes);

// Convex combination of the three per-view probability volumes; weights are
// non-negative, not all zero, and renormalized to sum 1.
ProbabilityVolume aggregate_views(const ProbabilityVolume& axial, const ProbabilityVolume& coronal,
                                  const ProbabilityVolume& sagittal,
                                  const std::array<double, 3>& weights);

// Per voxel, the lowest class index attaining the maximum probability.
LabelVolume argmax_labels(const ProbabilityVolume& p,
                          const std::map<std::int32_t, std::string>* names = nullptr);

// Maps each target voxel center through the target affine and the inverse
// source affine, samples every class channel tri-linearly (outside-volume
// corner mass goes to background, class 0) and takes the argmax in target
// space.
LabelVolume resample_soft_labels(const ProbabilityVolume& p, const std::array<int, 3>& target_dims,
                                 const Eigen::Matrix4d& target_affine,
                                 const std::map<std::int32_t, std::string>* names = nullptr);

// Dice overlap 2|P.R| / (|P| + |R|); empty when both sets are empty.
std::optional<double> dice(const LabelVolume& pred, const LabelVolume& ref, std::int32_t region);

// Sum of the two directed mean nearest-neighbor distances between the voxel
// center sets, in world mm; empty when either set is empty. Accelerated by
// an exact Euclidean distance transform when the affine's columns are
// orthogonal, brute force otherwise.
std::optional<double> mean_hausdorff(const LabelVolume& pred, const LabelVolume& ref,
                                     std::int32_t region);

// Brute-force O(|P|*|R|) reference used by tests and as the general-affine
// fallback.
std::optional<double> mean_hausdorff_brute(const LabelVolume& pred, const LabelVolume& ref,
                                           std::int32_t region);

// Binarizes each volume at threshold_frac of its own maximum, then the mean
// Hausdorff distance between the two voxel sets; empty if either volume has
// no voxel reaching its threshold.
std::optional<double> compare_tracts(const Volume& a, const Volume& b,
                                     double threshold_frac = 0.2);

// Exact squared Euclidean distance transform of `sites` (nonzero entries)
// on an anisotropic grid; weights are squared per-axis spacings.
std::vector<double> squared_edt(const std::array<int, 3>& dims,
                                const std::vector<std::uint8_t>& sites,
                                const std::array<double, 3>& weights_sq);

// ---- evaluation report -------------------------------------------------------

struct RegionMetrics {
    std::int32_t label = 0;
    std::string name, family;
    std::optional<double> dice, hausdorff_mm;
    std::size_t pred_voxels = 0, ref_voxels = 0;
};

struct FamilyAggregate {
    std::string family;
    std::optional<double> mean_dice, mean_hausdorff_mm;
    std::size_t regions = 0;
};

struct MetricReport {
    std::vector<RegionMetrics> regions;      // non-background labels
    std::vector<FamilyAggregate> families;   // per family plus "all"
};

// Family from a region name prefix: "ctx-*" -> cortical, "wm-*" -> wm,
// "sub-*" -> subcortical, anything else -> other.
std::string family_of(const std::string& region_name);

MetricReport evaluate_segmentation(const LabelVolume& pred, const LabelVolume& ref);

void write_report_csv(const MetricReport& report, const std::string& path);

double mean_dice_foreground(const MetricReport& report);

}  // namespace dwiseg
