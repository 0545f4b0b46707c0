#pragma once

#include <vector>

#include "dwiseg/gradient.hpp"
#include "dwiseg/volume.hpp"

namespace dwiseg {

// Per-voxel symmetric diffusion tensor. Component channel order is fixed:
// Dxx, Dxy, Dxz, Dyy, Dyz, Dzz (mm^2/s).
struct TensorVolume {
    Volume components;                    // 6 channels
    Volume s0;                            // fitted non-diffusion-weighted signal
    std::vector<std::uint8_t> fit_failed; // 1 where all signals <= 0 inside the mask

    const std::array<int, 3>& dims() const { return components.dims; }
    const Eigen::Matrix4d& affine() const { return components.affine; }

    Eigen::Matrix3d tensor_at(std::size_t voxel) const {
        const std::size_t n = components.voxels();
        const float* d = components.data.data();
        Eigen::Matrix3d m;
        const double xx = d[voxel], xy = d[voxel + n], xz = d[voxel + 2 * n];
        const double yy = d[voxel + 3 * n], yz = d[voxel + 4 * n], zz = d[voxel + 5 * n];
        m << xx, xy, xz, xy, yy, yz, xz, yz, zz;
        return m;
    }
};

// Eigen-analysis of a TensorVolume: eigenvalues sorted descending and the
// unit principal direction (sign-canonicalized: first nonzero component
// positive). NaN input voxels propagate NaN and are counted.
struct EigenVolume {
    Volume eigenvalues;           // 3 channels, lambda1 >= lambda2 >= lambda3
    Volume principal_direction;   // 3 channels
    std::size_t nan_voxels = 0;
};

// Log-linearized ordinary least squares fit of the single-tensor model
// ln S_i = ln S0 - b_i g_i^T D g_i per masked voxel. Multiple b=0 channels
// are averaged into one row before fitting. Non-positive signals are clamped
// to 1e-6 of the voxel's maximum signal before the log; voxels where every
// signal is <= 0 are zeroed and flagged in fit_failed. Unmasked voxels are
// zero-filled. The design matrix rank is checked once per table.
TensorVolume fit_tensor(const Volume& dwi, const GradientTable& table, const LabelVolume& mask);

// All-ones convenience mask matching a DWI grid.
LabelVolume full_mask(const Volume& like);

EigenVolume eigen_decompose(const TensorVolume& t);

// FA = sqrt(3/2) * ||lambda - mean(lambda)|| / ||lambda||, clamped to [0,1],
// zero where ||lambda|| = 0.
Volume fa_map(const EigenVolume& e);

// MD = (lambda1 + lambda2 + lambda3) / 3.
Volume md_map(const EigenVolume& e);

double fa_from_eigenvalues(double l1, double l2, double l3);

// Deterministic greedy farthest-point subset of the shell
// (|bval - shell_b| <= 50 s/mm^2) under the antipodally-symmetric metric
// d(u,v) = arccos(|u.v|). Seed: direction closest to (0,0,1), ties to the
// lowest index. Returns k original-table indices in ascending order.
std::vector<std::size_t> select_directions(const GradientTable& table, double shell_b,
                                           std::size_t k);

constexpr double kShellTolerance = 50.0;  // s/mm^2

// Channels to keep for a k-direction subset: every b=0 image plus the
// k selected shell directions, in ascending original order.
std::vector<std::size_t> subset_with_b0(const GradientTable& table, double shell_b,
                                        std::size_t k);

// Extracts the given channels into a smaller DWI volume + matching table.
std::pair<Volume, GradientTable> extract_channels(const Volume& dwi, const GradientTable& table,
                                                  const std::vector<std::size_t>& indices);

}  // namespace dwiseg
