#include "dwiseg/dti.hpp"

#include <algorithm>
#include <cmath>

#include "dwiseg/error.hpp"

namespace dwiseg {

namespace {

// Row of the log-linear design matrix for unknowns
// [ln S0, Dxx, Dxy, Dxz, Dyy, Dyz, Dzz].
Eigen::Matrix<double, 1, 7> design_row(double b, const Eigen::Vector3d& g) {
    Eigen::Matrix<double, 1, 7> r;
    r << 1.0, -b * g.x() * g.x(), -2.0 * b * g.x() * g.y(), -2.0 * b * g.x() * g.z(),
        -b * g.y() * g.y(), -2.0 * b * g.y() * g.z(), -b * g.z() * g.z();
    return r;
}

std::size_t count_distinct_directions(const GradientTable& t) {
    std::vector<Eigen::Vector3d> seen;
    for (std::size_t i = 0; i < t.n(); ++i) {
        if (t.is_b0(i)) continue;
        const Eigen::Vector3d& g = t.bvecs[i];
        bool dup = false;
        for (const auto& u : seen) {
            if (std::min((u - g).norm(), (u + g).norm()) < 1e-6) {
                dup = true;
                break;
            }
        }
        if (!dup) seen.push_back(g);
    }
    return seen.size();
}

}  // namespace

LabelVolume full_mask(const Volume& like) {
    LabelVolume m = make_label_volume(like.dims, like.affine);
    std::fill(m.labels.begin(), m.labels.end(), 1);
    m.label_table[1] = "mask";
    return m;
}

TensorVolume fit_tensor(const Volume& dwi, const GradientTable& table, const LabelVolume& mask) {
    validate(table);
    if (static_cast<std::size_t>(dwi.channels) != table.n())
        throw ShapeError("DWI channel count does not match gradient table");
    if (mask.dims != dwi.dims) throw ShapeError("mask dims do not match DWI dims");
    if (table.n() < 7) throw ValidationError("tensor fit needs at least 7 images");

    std::vector<std::size_t> b0_idx, dwi_idx;
    for (std::size_t i = 0; i < table.n(); ++i)
        (table.is_b0(i) ? b0_idx : dwi_idx).push_back(i);
    if (b0_idx.empty()) throw ValidationError("tensor fit needs at least one b=0 image");
    if (count_distinct_directions(table) < 6)
        throw ValidationError("tensor fit needs at least 6 distinct nonzero-b directions");

    // Rows: averaged b=0 first, then each diffusion-weighted measurement.
    const std::size_t rows = 1 + dwi_idx.size();
    Eigen::MatrixXd design(rows, 7);
    design.row(0) = design_row(0.0, Eigen::Vector3d::Zero());
    for (std::size_t r = 0; r < dwi_idx.size(); ++r)
        design.row(static_cast<Eigen::Index>(r + 1)) =
            design_row(table.bvals[dwi_idx[r]], table.bvecs[dwi_idx[r]]);

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    if (qr.rank() < 7)
        throw ValidationError("fit design error: gradient directions do not span the tensor space");
    const Eigen::MatrixXd pinv =
        design.completeOrthogonalDecomposition().pseudoInverse();  // 7 x rows

    TensorVolume out;
    out.components = make_volume(dwi.dims, 6, dwi.affine);
    out.s0 = make_volume(dwi.dims, 1, dwi.affine);
    out.fit_failed.assign(dwi.voxels(), 0);

    const std::size_t nvox = dwi.voxels();
    const float* src = dwi.data.data();
    const double inv_b0_count = 1.0 / static_cast<double>(b0_idx.size());

#pragma omp parallel for schedule(static)
    for (long long v = 0; v < static_cast<long long>(nvox); ++v) {
        const auto vi = static_cast<std::size_t>(v);
        if (mask.labels[vi] == 0) continue;

        Eigen::VectorXd signal(rows);
        double b0 = 0.0;
        for (std::size_t i : b0_idx) b0 += src[vi + i * nvox];
        signal[0] = b0 * inv_b0_count;
        double max_signal = signal[0];
        for (std::size_t r = 0; r < dwi_idx.size(); ++r) {
            signal[static_cast<Eigen::Index>(r + 1)] = src[vi + dwi_idx[r] * nvox];
            max_signal = std::max(max_signal, signal[static_cast<Eigen::Index>(r + 1)]);
        }
        if (max_signal <= 0.0) {
            out.fit_failed[vi] = 1;
            continue;
        }
        const double eps = 1e-6 * max_signal;
        Eigen::VectorXd logs(rows);
        for (Eigen::Index i = 0; i < signal.size(); ++i)
            logs[i] = std::log(std::max(signal[i], eps));

        const Eigen::Matrix<double, 7, 1> beta = pinv * logs;
        out.s0.data[vi] = static_cast<float>(std::exp(beta[0]));
        for (int c = 0; c < 6; ++c)
            out.components.data[vi + static_cast<std::size_t>(c) * nvox] =
                static_cast<float>(beta[c + 1]);
    }
    return out;
}

EigenVolume eigen_decompose(const TensorVolume& t) {
    EigenVolume out;
    out.eigenvalues = make_volume(t.components.dims, 3, t.components.affine);
    out.principal_direction = make_volume(t.components.dims, 3, t.components.affine);
    const std::size_t nvox = t.components.voxels();

    std::size_t nan_count = 0;
#pragma omp parallel for schedule(static) reduction(+ : nan_count)
    for (long long v = 0; v < static_cast<long long>(nvox); ++v) {
        const auto vi = static_cast<std::size_t>(v);
        const Eigen::Matrix3d m = t.tensor_at(vi);
        if (!m.allFinite()) {
            for (int c = 0; c < 3; ++c) {
                out.eigenvalues.data[vi + static_cast<std::size_t>(c) * nvox] =
                    std::numeric_limits<float>::quiet_NaN();
                out.principal_direction.data[vi + static_cast<std::size_t>(c) * nvox] =
                    std::numeric_limits<float>::quiet_NaN();
            }
            ++nan_count;
            continue;
        }
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(m);
        // Eigen returns ascending order; store descending.
        const Eigen::Vector3d evals = solver.eigenvalues().reverse();
        Eigen::Vector3d dir = solver.eigenvectors().col(2);
        if (dir.x() < 0.0 || (dir.x() == 0.0 && (dir.y() < 0.0 || (dir.y() == 0.0 && dir.z() < 0.0))))
            dir = -dir;
        for (int c = 0; c < 3; ++c) {
            out.eigenvalues.data[vi + static_cast<std::size_t>(c) * nvox] =
                static_cast<float>(evals[c]);
            out.principal_direction.data[vi + static_cast<std::size_t>(c) * nvox] =
                static_cast<float>(dir[c]);
        }
    }
    out.nan_voxels = nan_count;
    return out;
}

double fa_from_eigenvalues(double l1, double l2, double l3) {
    const double norm_sq = l1 * l1 + l2 * l2 + l3 * l3;
    if (norm_sq <= 0.0) return 0.0;
    const double mean = (l1 + l2 + l3) / 3.0;
    const double d1 = l1 - mean, d2 = l2 - mean, d3 = l3 - mean;
    const double fa = std::sqrt(1.5 * (d1 * d1 + d2 * d2 + d3 * d3) / norm_sq);
    return std::clamp(fa, 0.0, 1.0);
}

Volume fa_map(const EigenVolume& e) {
    Volume out = make_volume(e.eigenvalues.dims, 1, e.eigenvalues.affine);
    const std::size_t nvox = out.voxels();
    const float* ev = e.eigenvalues.data.data();
#pragma omp parallel for schedule(static)
    for (long long v = 0; v < static_cast<long long>(nvox); ++v) {
        const auto vi = static_cast<std::size_t>(v);
        out.data[vi] =
            static_cast<float>(fa_from_eigenvalues(ev[vi], ev[vi + nvox], ev[vi + 2 * nvox]));
    }
    return out;
}

Volume md_map(const EigenVolume& e) {
    Volume out = make_volume(e.eigenvalues.dims, 1, e.eigenvalues.affine);
    const std::size_t nvox = out.voxels();
    const float* ev = e.eigenvalues.data.data();
#pragma omp parallel for schedule(static)
    for (long long v = 0; v < static_cast<long long>(nvox); ++v) {
        const auto vi = static_cast<std::size_t>(v);
        out.data[vi] = static_cast<float>(
            (static_cast<double>(ev[vi]) + ev[vi + nvox] + ev[vi + 2 * nvox]) / 3.0);
    }
    return out;
}

std::vector<std::size_t> select_directions(const GradientTable& table, double shell_b,
                                           std::size_t k) {
    std::vector<std::size_t> shell;
    for (std::size_t i = 0; i < table.n(); ++i)
        if (!table.is_b0(i) && std::abs(table.bvals[i] - shell_b) <= kShellTolerance)
            shell.push_back(i);
    if (shell.size() < k)
        throw ValidationError("selection error: shell b=" + std::to_string(shell_b) + " has " +
                              std::to_string(shell.size()) + " directions, need " +
                              std::to_string(k));
    if (k == 0) return {};

    // Antipodally-symmetric angular distance.
    const auto dist = [&](std::size_t a, std::size_t b) {
        const double dot = std::abs(table.bvecs[a].dot(table.bvecs[b]));
        return std::acos(std::clamp(dot, 0.0, 1.0));
    };

    // Seed: closest to (0,0,1) under the same metric, ties to lowest index.
    std::size_t seed = shell[0];
    double best = std::acos(std::clamp(std::abs(table.bvecs[shell[0]].z()), 0.0, 1.0));
    for (std::size_t j = 1; j < shell.size(); ++j) {
        const double d = std::acos(std::clamp(std::abs(table.bvecs[shell[j]].z()), 0.0, 1.0));
        if (d < best) {
            best = d;
            seed = shell[j];
        }
    }

    std::vector<std::size_t> chosen{seed};
    std::vector<double> min_dist(shell.size());
    for (std::size_t j = 0; j < shell.size(); ++j) min_dist[j] = dist(shell[j], seed);

    while (chosen.size() < k) {
        std::size_t arg = shell.size();
        double far = -1.0;
        for (std::size_t j = 0; j < shell.size(); ++j) {
            if (min_dist[j] == 0.0 &&
                std::find(chosen.begin(), chosen.end(), shell[j]) != chosen.end())
                continue;
            if (min_dist[j] > far) {
                far = min_dist[j];
                arg = j;
            }
        }
        const std::size_t next = shell[arg];
        chosen.push_back(next);
        for (std::size_t j = 0; j < shell.size(); ++j)
            min_dist[j] = std::min(min_dist[j], dist(shell[j], next));
    }
    std::sort(chosen.begin(), chosen.end());
    return chosen;
}

std::vector<std::size_t> subset_with_b0(const GradientTable& table, double shell_b,
                                        std::size_t k) {
    std::vector<std::size_t> keep = select_directions(table, shell_b, k);
    for (std::size_t i = 0; i < table.n(); ++i)
        if (table.is_b0(i)) keep.push_back(i);
    std::sort(keep.begin(), keep.end());
    return keep;
}

std::pair<Volume, GradientTable> extract_channels(const Volume& dwi, const GradientTable& table,
                                                  const std::vector<std::size_t>& indices) {
    if (static_cast<std::size_t>(dwi.channels) != table.n())
        throw ShapeError("DWI channel count does not match gradient table");
    Volume out = make_volume(dwi.dims, static_cast<int>(indices.size()), dwi.affine);
    GradientTable sub;
    const std::size_t nvox = dwi.voxels();
    for (std::size_t j = 0; j < indices.size(); ++j) {
        const std::size_t i = indices[j];
        if (i >= table.n()) throw ValidationError("channel index out of range");
        sub.bvals.push_back(table.bvals[i]);
        sub.bvecs.push_back(table.bvecs[i]);
        std::copy_n(dwi.data.begin() + static_cast<std::ptrdiff_t>(i * nvox), nvox,
                    out.data.begin() + static_cast<std::ptrdiff_t>(j * nvox));
    }
    return {std::move(out), std::move(sub)};
}

}  // namespace dwiseg
