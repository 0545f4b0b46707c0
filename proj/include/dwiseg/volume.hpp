#pragma once

#include <Eigen/Dense>
#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "dwiseg/error.hpp"

namespace dwiseg {

// Dense voxel grid with world geometry.
//
// Storage convention (fixed): x-fastest (Fortran-style, NIfTI on-disk order),
// channel slowest:  index(x,y,z,c) = x + nx*(y + ny*(z + nz*c)).
// Voxel data is float32; all fitting and metric arithmetic runs in double.
struct Volume {
    std::array<int, 3> dims{0, 0, 0};
    int channels = 1;
    std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
    Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();  // voxel index -> world mm
    std::vector<float> data;

    std::size_t voxels() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
    std::size_t size() const { return voxels() * static_cast<std::size_t>(channels); }

    std::size_t index(int x, int y, int z, int c = 0) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(dims[0]) *
                   (static_cast<std::size_t>(y) +
                    static_cast<std::size_t>(dims[1]) *
                        (static_cast<std::size_t>(z) +
                         static_cast<std::size_t>(dims[2]) * static_cast<std::size_t>(c)));
    }
    float& at(int x, int y, int z, int c = 0) { return data[index(x, y, z, c)]; }
    float at(int x, int y, int z, int c = 0) const { return data[index(x, y, z, c)]; }

    // Pointer to the start of channel c (one contiguous x-fastest 3D block).
    float* channel(int c) { return data.data() + voxels() * static_cast<std::size_t>(c); }
    const float* channel(int c) const {
        return data.data() + voxels() * static_cast<std::size_t>(c);
    }
};

// Integer label grid sharing Volume's layout for a single channel.
// Label 0 is reserved for background; every label present in `labels`
// appears in `label_table`.
struct LabelVolume {
    std::array<int, 3> dims{0, 0, 0};
    std::array<double, 3> voxel_size{1.0, 1.0, 1.0};
    Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
    std::vector<std::int32_t> labels;
    std::map<std::int32_t, std::string> label_table;

    std::size_t voxels() const {
        return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
    }
    std::size_t index(int x, int y, int z) const {
        return static_cast<std::size_t>(x) +
               static_cast<std::size_t>(dims[0]) *
                   (static_cast<std::size_t>(y) +
                    static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(z));
    }
    std::int32_t& at(int x, int y, int z) { return labels[index(x, y, z)]; }
    std::int32_t at(int x, int y, int z) const { return labels[index(x, y, z)]; }
};

// Allocates a zero-filled volume; voxel sizes are derived from the affine's
// column norms so the two always agree.
Volume make_volume(const std::array<int, 3>& dims, int channels,
                   const Eigen::Matrix4d& affine = Eigen::Matrix4d::Identity());

LabelVolume make_label_volume(const std::array<int, 3>& dims,
                              const Eigen::Matrix4d& affine = Eigen::Matrix4d::Identity());

// Throws on violated invariants (dims/channels positive, singular affine,
// data length, voxel_size vs affine column norms within 1e-4 relative).
void validate(const Volume& v);
void validate(const LabelVolume& v);

// Ensures every present label has a table entry, synthesizing
// "region_<id>" names (and "background" for 0) where missing.
void complete_label_table(LabelVolume& v);

// Continuous voxel coordinates of a world-space point (mm). Throws
// GeometryError when the affine is singular.
Eigen::Vector3d world_to_voxel(const Volume& v, const Eigen::Vector3d& point_mm);
Eigen::Vector3d voxel_to_world(const Volume& v, const Eigen::Vector3d& voxel);

Eigen::Vector3d world_to_voxel(const Eigen::Matrix4d& affine, const Eigen::Vector3d& point_mm);
Eigen::Vector3d voxel_to_world(const Eigen::Matrix4d& affine, const Eigen::Vector3d& voxel);

std::array<double, 3> voxel_size_from_affine(const Eigen::Matrix4d& affine);

// Diagonal-scaling affine (isotropic or per-axis voxel sizes, zero origin).
Eigen::Matrix4d scaling_affine(double sx, double sy, double sz);

}  // namespace dwiseg
