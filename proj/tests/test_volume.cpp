#include <doctest.h>

#include <random>

#include "dwiseg/volume.hpp"

using namespace dwiseg;

TEST_CASE("make_volume derives voxel sizes from the affine") {
    Eigen::Matrix4d affine = scaling_affine(1.25, 1.25, 2.5);
    const Volume v = make_volume({4, 5, 6}, 3, affine);
    CHECK(v.voxel_size[0] == doctest::Approx(1.25));
    CHECK(v.voxel_size[2] == doctest::Approx(2.5));
    CHECK(v.data.size() == 4u * 5u * 6u * 3u);
    CHECK_NOTHROW(validate(v));
}

TEST_CASE("volume invariants are enforced") {
    CHECK_THROWS_AS(make_volume({0, 4, 4}, 1), ValidationError);
    CHECK_THROWS_AS(make_volume({4, 4, 4}, 0), ValidationError);

    Eigen::Matrix4d singular = Eigen::Matrix4d::Identity();
    singular(0, 0) = 0.0;
    CHECK_THROWS_AS(make_volume({4, 4, 4}, 1, singular), GeometryError);

    Volume v = make_volume({4, 4, 4}, 1);
    v.data.pop_back();
    CHECK_THROWS_AS(validate(v), ValidationError);

    v = make_volume({4, 4, 4}, 1);
    v.voxel_size[1] = 1.5;  // disagrees with identity affine
    CHECK_THROWS_AS(validate(v), ValidationError);
}

TEST_CASE("storage order is x-fastest, channel slowest") {
    Volume v = make_volume({2, 3, 4}, 2);
    CHECK(v.index(1, 0, 0, 0) == 1);
    CHECK(v.index(0, 1, 0, 0) == 2);
    CHECK(v.index(0, 0, 1, 0) == 6);
    CHECK(v.index(0, 0, 0, 1) == 24);
}

TEST_CASE("world_to_voxel: identity and pure scaling") {
    const Volume ident = make_volume({8, 8, 8}, 1);
    const Eigen::Vector3d p = world_to_voxel(ident, {3, 4, 5});
    CHECK(p.isApprox(Eigen::Vector3d(3, 4, 5), 1e-12));

    const Volume two = make_volume({8, 8, 8}, 1, scaling_affine(2, 2, 2));
    CHECK(world_to_voxel(two, {4, 4, 4}).isApprox(Eigen::Vector3d(2, 2, 2), 1e-12));
}

TEST_CASE("world_to_voxel round trip on random invertible affines") {
    std::mt19937_64 rng(20240811);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        Eigen::Matrix4d affine = Eigen::Matrix4d::Identity();
        do {
            for (int i = 0; i < 3; ++i)
                for (int j = 0; j < 4; ++j) affine(i, j) = 5.0 * u(rng);
        } while (std::abs(affine.block<3, 3>(0, 0).determinant()) < 0.1);
        const Volume v = make_volume({8, 8, 8}, 1, affine);

        const Eigen::Vector3d point(50 * u(rng), 50 * u(rng), 50 * u(rng));
        const Eigen::Vector3d voxel = world_to_voxel(v, point);
        // Independent oracle: apply the affine directly.
        const Eigen::Vector3d back =
            affine.block<3, 3>(0, 0) * voxel + affine.block<3, 1>(0, 3);
        CHECK((back - point).norm() < 1e-6);
        CHECK((voxel_to_world(v, voxel) - point).norm() < 1e-6);
    }
}

TEST_CASE("label volumes require complete tables") {
    LabelVolume lv = make_label_volume({3, 3, 3});
    lv.at(1, 1, 1) = 7;
    CHECK_THROWS_AS(validate(lv), ValidationError);
    complete_label_table(lv);
    CHECK(lv.label_table.at(7) == "region_7");
    CHECK_NOTHROW(validate(lv));
}
