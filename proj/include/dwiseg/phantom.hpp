#pragma once

#include <map>
#include <string>
#include <vector>

#include "dwiseg/gradient.hpp"
#include "dwiseg/volume.hpp"

namespace dwiseg {

// Synthetic ground truth standing in for reference segmentations: geometric
// label volumes with per-region diffusion tensors and simulated DWI signals
// S_i(x) = s0 exp(-b_i g_i^T D(x) g_i) plus Rician noise. Fully determined
// by (spec, seed) through the SplitMix64 counter generator, so phantoms are
// byte-identical across runs and platforms.

// Principal-axis behavior of a tissue tensor. Oriented modes rotate the
// tensor's eigenframe per voxel relative to the volume center: Radial points
// the principal axis away from the center, Tangential along circles of
// latitude around the z axis (a shell tangent).
enum class Orientation { Fixed, Radial, Tangential };

struct TissueSpec {
    int label = 0;
    std::string name;
    std::string family;  // "wm" | "cortical" | "subcortical" | "other"
    Eigen::Matrix3d tensor = Eigen::Matrix3d::Identity() * 1e-3;  // SPD, mm^2/s
    double s0 = 1000.0;
    Orientation orientation = Orientation::Fixed;
};

struct Primitive {
    enum class Shape { Sphere, Ellipsoid, Box };
    Shape shape = Shape::Sphere;
    Eigen::Vector3d center{0, 0, 0};  // voxel coordinates
    Eigen::Vector3d radii{1, 1, 1};   // voxel units (semi-axes / half-extent)
    int label = 0;
};

struct PhantomSpec {
    std::array<int, 3> dims{64, 64, 64};
    std::array<double, 3> voxel_size{1.25, 1.25, 1.25};
    std::vector<Primitive> regions;  // later primitives override earlier ones
    std::map<int, TissueSpec> tissues;
    double noise_sigma = 0.0;
    std::uint64_t seed = 0;
    // Fractional geometric perturbation per phantom instance: radii scale by
    // (1 +- jitter) and centers move by up to jitter*dims/4 voxels per axis.
    double jitter = 0.0;
};

void validate(const PhantomSpec& spec);

// Built-in 64^3, 1.25 mm head-like phantom: cortex shell, oriented
// white-matter core, six subcortical blobs, a CSF-like ventricle and a
// brainstem (10 foreground labels).
PhantomSpec default_phantom_spec();

// Small 24^3 phantom (3 foreground labels) for fast integration tests.
PhantomSpec tiny_phantom_spec();

PhantomSpec parse_phantom_spec_json(const std::string& text);
std::string phantom_spec_to_json(const PhantomSpec& spec);

// Deterministic in (spec, spec.seed); geometry jitter applied per region.
LabelVolume generate_labels(const PhantomSpec& spec);

// Simulated multi-channel DWI. sigma = 0 yields exact signals; otherwise the
// magnitude of a complex Gaussian perturbation (Rician noise) is taken.
Volume simulate_dwi(const LabelVolume& labels, const std::map<int, TissueSpec>& tissues,
                    const GradientTable& table, double noise_sigma, std::uint64_t seed);

// Deterministic approximately-uniform single-shell table: ndirs directions
// from a golden-angle hemisphere spiral at the given b, with nb0 b=0 images
// interleaved evenly.
GradientTable make_uniform_table(int ndirs, double bval, int nb0);

// Diagonal tensor helper (principal axis x).
Eigen::Matrix3d diffusion_tensor(double l1, double l2, double l3);

}  // namespace dwiseg
