#include "dwiseg/volume.hpp"

#include <cmath>
#include <set>
#include <sstream>

namespace dwiseg {

std::array<double, 3> voxel_size_from_affine(const Eigen::Matrix4d& affine) {
    std::array<double, 3> vs{};
    for (int i = 0; i < 3; ++i) vs[i] = affine.block<3, 1>(0, i).norm();
    return vs;
}

Eigen::Matrix4d scaling_affine(double sx, double sy, double sz) {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m(0, 0) = sx;
    m(1, 1) = sy;
    m(2, 2) = sz;
    return m;
}

namespace {

void check_affine(const Eigen::Matrix4d& affine) {
    const double det = affine.block<3, 3>(0, 0).determinant();
    if (!std::isfinite(det) || det == 0.0)
        throw GeometryError("affine upper-left 3x3 is singular");
}

void check_dims(const std::array<int, 3>& dims, int channels) {
    if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
        throw ValidationError("volume dims must be positive");
    if (channels <= 0) throw ValidationError("channel count must be positive");
}

}  // namespace

Volume make_volume(const std::array<int, 3>& dims, int channels, const Eigen::Matrix4d& affine) {
    check_dims(dims, channels);
    check_affine(affine);
    Volume v;
    v.dims = dims;
    v.channels = channels;
    v.affine = affine;
    v.voxel_size = voxel_size_from_affine(affine);
    v.data.assign(v.size(), 0.0f);
    return v;
}

LabelVolume make_label_volume(const std::array<int, 3>& dims, const Eigen::Matrix4d& affine) {
    check_dims(dims, 1);
    check_affine(affine);
    LabelVolume v;
    v.dims = dims;
    v.affine = affine;
    v.voxel_size = voxel_size_from_affine(affine);
    v.labels.assign(v.voxels(), 0);
    v.label_table[0] = "background";
    return v;
}

void validate(const Volume& v) {
    check_dims(v.dims, v.channels);
    check_affine(v.affine);
    if (v.data.size() != v.size()) {
        std::ostringstream os;
        os << "data length " << v.data.size() << " != dims*channels " << v.size();
        throw ValidationError(os.str());
    }
    const auto vs = voxel_size_from_affine(v.affine);
    for (int i = 0; i < 3; ++i) {
        const double rel = std::abs(v.voxel_size[i] - vs[i]) / std::max(vs[i], 1e-12);
        if (rel > 1e-4) throw ValidationError("voxel_size disagrees with affine column norm");
    }
}

void validate(const LabelVolume& v) {
    check_dims(v.dims, 1);
    check_affine(v.affine);
    if (v.labels.size() != v.voxels()) throw ValidationError("label data length != dims");
    std::set<std::int32_t> present(v.labels.begin(), v.labels.end());
    for (std::int32_t id : present) {
        if (id < 0) throw ValidationError("negative label value");
        if (v.label_table.find(id) == v.label_table.end()) {
            std::ostringstream os;
            os << "label " << id << " missing from label_table";
            throw ValidationError(os.str());
        }
    }
}

void complete_label_table(LabelVolume& v) {
    std::set<std::int32_t> present(v.labels.begin(), v.labels.end());
    for (std::int32_t id : present) {
        if (v.label_table.count(id)) continue;
        v.label_table[id] = (id == 0) ? "background" : ("region_" + std::to_string(id));
    }
    if (!v.label_table.count(0)) v.label_table[0] = "background";
}

Eigen::Vector3d voxel_to_world(const Eigen::Matrix4d& affine, const Eigen::Vector3d& voxel) {
    return affine.block<3, 3>(0, 0) * voxel + affine.block<3, 1>(0, 3);
}

Eigen::Vector3d world_to_voxel(const Eigen::Matrix4d& affine, const Eigen::Vector3d& point_mm) {
    const Eigen::Matrix3d m = affine.block<3, 3>(0, 0);
    const double det = m.determinant();
    if (!std::isfinite(det) || std::abs(det) < 1e-300)
        throw GeometryError("cannot invert singular affine");
    return m.inverse() * (point_mm - affine.block<3, 1>(0, 3));
}

Eigen::Vector3d world_to_voxel(const Volume& v, const Eigen::Vector3d& point_mm) {
    return world_to_voxel(v.affine, point_mm);
}

Eigen::Vector3d voxel_to_world(const Volume& v, const Eigen::Vector3d& voxel) {
    return voxel_to_world(v.affine, voxel);
}

}  // namespace dwiseg
