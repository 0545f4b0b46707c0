#include "dwiseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <set>

namespace dwiseg {

void validate_simplex(const ProbabilityVolume& p, double tol) {
    validate(static_cast<const Volume&>(p));
    const std::size_t nvox = p.voxels();
    for (std::size_t v = 0; v < nvox; ++v) {
        double sum = 0.0;
        for (int c = 0; c < p.channels; ++c) {
            const double q = p.data[v + static_cast<std::size_t>(c) * nvox];
            if (q < -tol || q > 1.0 + tol)
                throw ValidationError("probability outside [0,1]");
            sum += q;
        }
        if (std::abs(sum - 1.0) > tol)
            throw ValidationError("probability vector does not sum to 1");
    }
}

ProbabilityVolume one_hot(const LabelVolume& labels, int num_classes) {
    ProbabilityVolume p;
    static_cast<Volume&>(p) = make_volume(labels.dims, num_classes, labels.affine);
    const std::size_t nvox = labels.voxels();
    for (std::size_t v = 0; v < nvox; ++v) {
        const std::int32_t l = labels.labels[v];
        if (l < 0 || l >= num_classes)
            throw ValidationError("label out of one-hot class range");
        p.data[v + static_cast<std::size_t>(l) * nvox] = 1.0f;
    }
    return p;
}

ProbabilityVolume aggregate_views(const ProbabilityVolume& axial, const ProbabilityVolume& coronal,
                                  const ProbabilityVolume& sagittal,
                                  const std::array<double, 3>& weights) {
    const ProbabilityVolume* vols[3] = {&axial, &coronal, &sagittal};
    for (int i = 1; i < 3; ++i) {
        if (vols[i]->dims != vols[0]->dims || vols[i]->channels != vols[0]->channels)
            throw ShapeError("view volumes disagree in shape");
        if ((vols[i]->affine - vols[0]->affine).cwiseAbs().maxCoeff() > 1e-6)
            throw ShapeError("view volumes disagree in affine");
    }
    double total = 0.0;
    for (double w : weights) {
        if (w < 0.0) throw ValidationError("view weights must be non-negative");
        total += w;
    }
    if (total <= 0.0) throw ValidationError("view weights must not all be zero");

    ProbabilityVolume out;
    static_cast<Volume&>(out) = make_volume(axial.dims, axial.channels, axial.affine);
    const std::size_t n = axial.data.size();
    for (int i = 0; i < 3; ++i) {
        const float w = static_cast<float>(weights[i] / total);
        if (w == 0.0f) continue;
        const float* src = vols[i]->data.data();
        float* dst = out.data.data();
#pragma omp parallel for schedule(static)
        for (long long q = 0; q < static_cast<long long>(n); ++q)
            dst[q] += w * src[q];
    }
    return out;
}

LabelVolume argmax_labels(const ProbabilityVolume& p,
                          const std::map<std::int32_t, std::string>* names) {
    LabelVolume out = make_label_volume(p.dims, p.affine);
    const std::size_t nvox = p.voxels();
#pragma omp parallel for schedule(static)
    for (long long v = 0; v < static_cast<long long>(nvox); ++v) {
        const auto vi = static_cast<std::size_t>(v);
        int best = 0;
        float best_p = p.data[vi];
        for (int c = 1; c < p.channels; ++c) {
            const float q = p.data[vi + static_cast<std::size_t>(c) * nvox];
            if (q > best_p) {
                best_p = q;
                best = c;
            }
        }
        out.labels[vi] = best;
    }
    if (names) out.label_table = *names;
    complete_label_table(out);
    return out;
}

LabelVolume resample_soft_labels(const ProbabilityVolume& p, const std::array<int, 3>& target_dims,
                                 const Eigen::Matrix4d& target_affine,
                                 const std::map<std::int32_t, std::string>* names) {
    const Eigen::Matrix3d src3 = p.affine.block<3, 3>(0, 0);
    if (std::abs(src3.determinant()) < 1e-300 ||
        std::abs(target_affine.block<3, 3>(0, 0).determinant()) < 1e-300)
        throw GeometryError("resampling requires invertible affines");

    // target voxel -> source continuous voxel
    const Eigen::Matrix4d m = [&] {
        Eigen::Matrix4d inv = Eigen::Matrix4d::Identity();
        inv.block<3, 3>(0, 0) = src3.inverse();
        inv.block<3, 1>(0, 3) = -src3.inverse() * p.affine.block<3, 1>(0, 3);
        return Eigen::Matrix4d(inv * target_affine);
    }();

    LabelVolume out = make_label_volume(target_dims, target_affine);
    const int nx = p.dims[0], ny = p.dims[1], nz = p.dims[2];
    const std::size_t nvox = p.voxels();
    const int classes = p.channels;

#pragma omp parallel for collapse(2) schedule(static)
    for (int z = 0; z < target_dims[2]; ++z) {
        for (int y = 0; y < target_dims[1]; ++y) {
            std::vector<double> acc(classes);
            for (int x = 0; x < target_dims[0]; ++x) {
                const Eigen::Vector3d s =
                    m.block<3, 3>(0, 0) * Eigen::Vector3d(x, y, z) + m.block<3, 1>(0, 3);
                const double fx = std::floor(s.x()), fy = std::floor(s.y()),
                             fz = std::floor(s.z());
                const double tx = s.x() - fx, ty = s.y() - fy, tz = s.z() - fz;
                std::fill(acc.begin(), acc.end(), 0.0);
                double outside = 0.0;
                for (int dz = 0; dz < 2; ++dz)
                    for (int dy2 = 0; dy2 < 2; ++dy2)
                        for (int dx2 = 0; dx2 < 2; ++dx2) {
                            const double wgt = (dx2 ? tx : 1.0 - tx) * (dy2 ? ty : 1.0 - ty) *
                                               (dz ? tz : 1.0 - tz);
                            if (wgt == 0.0) continue;
                            const int cx = static_cast<int>(fx) + dx2;
                            const int cy = static_cast<int>(fy) + dy2;
                            const int cz = static_cast<int>(fz) + dz;
                            if (cx < 0 || cx >= nx || cy < 0 || cy >= ny || cz < 0 || cz >= nz) {
                                outside += wgt;
                                continue;
                            }
                            const std::size_t base = p.index(cx, cy, cz, 0);
                            for (int c = 0; c < classes; ++c)
                                acc[c] += wgt * p.data[base + static_cast<std::size_t>(c) * nvox];
                        }
                acc[0] += outside;  // out-of-volume mass is background
                int best = 0;
                double best_p = acc[0];
                for (int c = 1; c < classes; ++c)
                    if (acc[c] > best_p) {
                        best_p = acc[c];
                        best = c;
                    }
                out.at(x, y, z) = best;
            }
        }
    }
    if (names) out.label_table = *names;
    complete_label_table(out);
    return out;
}

namespace {

std::vector<std::array<int, 3>> region_voxels(const LabelVolume& v, std::int32_t region) {
    std::vector<std::array<int, 3>> out;
    const int nx = v.dims[0], ny = v.dims[1], nz = v.dims[2];
    std::size_t q = 0;
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x, ++q)
                if (v.labels[q] == region) out.push_back({x, y, z});
    return out;
}

// Column-orthogonality check: world distances decompose per axis iff
// A^T A is diagonal.
bool axis_separable(const Eigen::Matrix4d& affine, std::array<double, 3>& weights_sq) {
    const Eigen::Matrix3d a = affine.block<3, 3>(0, 0);
    const Eigen::Matrix3d g = a.transpose() * a;
    const double scale = g.diagonal().maxCoeff();
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            if (i != j && std::abs(g(i, j)) > 1e-12 * scale) return false;
    for (int i = 0; i < 3; ++i) weights_sq[i] = g(i, i);
    return true;
}

// Per-voxel minima are collected first and summed serially in scan order so
// the result is independent of the worker count.
double directed_mean_brute(const std::vector<std::array<int, 3>>& from,
                           const std::vector<std::array<int, 3>>& to,
                           const Eigen::Matrix3d& a) {
    std::vector<double> nearest(from.size());
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < static_cast<long long>(from.size()); ++i) {
        const auto& f = from[i];
        double best = std::numeric_limits<double>::infinity();
        for (const auto& t : to) {
            const Eigen::Vector3d d =
                a * Eigen::Vector3d(f[0] - t[0], f[1] - t[1], f[2] - t[2]);
            best = std::min(best, d.squaredNorm());
        }
        nearest[i] = std::sqrt(best);
    }
    double total = 0.0;
    for (double d : nearest) total += d;
    return total / static_cast<double>(from.size());
}

constexpr double kEdtInf = 1e30;

// 1D lower-envelope pass of the Felzenszwalb-Huttenlocher transform with an
// anisotropic weight: d(i) = min_j (w*(i-j)^2 + f(j)). Rows with no finite
// entry stay at kEdtInf; infinite parabolas are never inserted.
void edt_pass_1d(const double* f, double* d, int n, double w, int* v, double* zbuf) {
    int q0 = 0;
    while (q0 < n && f[q0] >= kEdtInf) ++q0;
    if (q0 == n) {
        std::fill(d, d + n, kEdtInf);
        return;
    }
    int k = 0;
    v[0] = q0;
    zbuf[0] = -kEdtInf;
    zbuf[1] = kEdtInf;
    for (int q = q0 + 1; q < n; ++q) {
        if (f[q] >= kEdtInf) continue;
        double s;
        while (true) {
            const int p = v[k];
            s = (f[q] + w * q * q - (f[p] + w * p * p)) / (2.0 * w * (q - p));
            if (s <= zbuf[k]) {
                --k;
            } else {
                break;
            }
        }
        ++k;
        v[k] = q;
        zbuf[k] = s;
        zbuf[k + 1] = kEdtInf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (zbuf[k + 1] < q) ++k;
        const int p = v[k];
        d[q] = w * (q - p) * (q - p) + f[p];
    }
}

}  // namespace

std::vector<double> squared_edt(const std::array<int, 3>& dims,
                                const std::vector<std::uint8_t>& sites,
                                const std::array<double, 3>& weights_sq) {
    const int nx = dims[0], ny = dims[1], nz = dims[2];
    const std::size_t n = static_cast<std::size_t>(nx) * ny * nz;
    std::vector<double> d(n);
    for (std::size_t q = 0; q < n; ++q) d[q] = sites[q] ? 0.0 : kEdtInf;

    const int max_dim = std::max({nx, ny, nz});
#pragma omp parallel
    {
        std::vector<double> f(max_dim), row(max_dim), z(max_dim + 1);
        std::vector<int> v(max_dim);

        // x pass
#pragma omp for collapse(2) schedule(static)
        for (int zz = 0; zz < nz; ++zz)
            for (int yy = 0; yy < ny; ++yy) {
                double* base = d.data() + (static_cast<std::size_t>(zz) * ny + yy) * nx;
                edt_pass_1d(base, row.data(), nx, weights_sq[0], v.data(), z.data());
                std::copy_n(row.data(), nx, base);
            }
        // y pass
#pragma omp for collapse(2) schedule(static)
        for (int zz = 0; zz < nz; ++zz)
            for (int xx = 0; xx < nx; ++xx) {
                double* base = d.data() + static_cast<std::size_t>(zz) * ny * nx + xx;
                for (int yy = 0; yy < ny; ++yy) f[yy] = base[static_cast<std::size_t>(yy) * nx];
                edt_pass_1d(f.data(), row.data(), ny, weights_sq[1], v.data(), z.data());
                for (int yy = 0; yy < ny; ++yy) base[static_cast<std::size_t>(yy) * nx] = row[yy];
            }
        // z pass
#pragma omp for collapse(2) schedule(static)
        for (int yy = 0; yy < ny; ++yy)
            for (int xx = 0; xx < nx; ++xx) {
                double* base = d.data() + static_cast<std::size_t>(yy) * nx + xx;
                const std::size_t stride = static_cast<std::size_t>(nx) * ny;
                for (int zz = 0; zz < nz; ++zz) f[zz] = base[zz * stride];
                edt_pass_1d(f.data(), row.data(), nz, weights_sq[2], v.data(), z.data());
                for (int zz = 0; zz < nz; ++zz) base[zz * stride] = row[zz];
            }
    }
    return d;
}

std::optional<double> dice(const LabelVolume& pred, const LabelVolume& ref, std::int32_t region) {
    if (pred.dims != ref.dims) throw ShapeError("dice: grids disagree");
    std::size_t np = 0, nr = 0, inter = 0;
    const std::size_t n = pred.voxels();
    for (std::size_t q = 0; q < n; ++q) {
        const bool p = pred.labels[q] == region;
        const bool r = ref.labels[q] == region;
        np += p;
        nr += r;
        inter += (p && r);
    }
    if (np + nr == 0) return std::nullopt;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(np + nr);
}

std::optional<double> mean_hausdorff_brute(const LabelVolume& pred, const LabelVolume& ref,
                                           std::int32_t region) {
    if (pred.dims != ref.dims) throw ShapeError("hausdorff: grids disagree");
    const auto p = region_voxels(pred, region);
    const auto r = region_voxels(ref, region);
    if (p.empty() || r.empty()) return std::nullopt;
    const Eigen::Matrix3d a = pred.affine.block<3, 3>(0, 0);
    return directed_mean_brute(r, p, a) + directed_mean_brute(p, r, a);
}

std::optional<double> mean_hausdorff(const LabelVolume& pred, const LabelVolume& ref,
                                     std::int32_t region) {
    if (pred.dims != ref.dims) throw ShapeError("hausdorff: grids disagree");
    const auto p = region_voxels(pred, region);
    const auto r = region_voxels(ref, region);
    if (p.empty() || r.empty()) return std::nullopt;

    std::array<double, 3> wsq;
    const bool separable = axis_separable(pred.affine, wsq);
    const std::size_t cost = p.size() * r.size();
    if (!separable || cost < (1u << 22)) {
        const Eigen::Matrix3d a = pred.affine.block<3, 3>(0, 0);
        return directed_mean_brute(r, p, a) + directed_mean_brute(p, r, a);
    }

    const std::size_t nvox = pred.voxels();
    const auto directed_via_edt = [&](const LabelVolume& to_vol,
                                      const std::vector<std::array<int, 3>>& from) {
        std::vector<std::uint8_t> sites(nvox, 0);
        for (std::size_t q = 0; q < nvox; ++q) sites[q] = to_vol.labels[q] == region;
        const std::vector<double> d2 = squared_edt(pred.dims, sites, wsq);
        double total = 0.0;
        for (const auto& fvox : from)
            total += std::sqrt(
                d2[pred.index(fvox[0], fvox[1], fvox[2])]);
        return total / static_cast<double>(from.size());
    };
    // H = mean_{r in R} d(r, P) + mean_{p in P} d(p, R)
    return directed_via_edt(pred, r) + directed_via_edt(ref, p);
}

std::optional<double> compare_tracts(const Volume& a, const Volume& b, double threshold_frac) {
    if (a.dims != b.dims) throw ShapeError("compare_tracts: grids disagree");
    if (a.channels != 1 || b.channels != 1)
        throw ShapeError("compare_tracts expects scalar volumes");

    const auto binarize = [&](const Volume& v) {
        LabelVolume out = make_label_volume(v.dims, v.affine);
        float mx = 0.0f;
        for (float q : v.data) {
            if (q < 0.0f) throw ValidationError("tract intensities must be non-negative");
            mx = std::max(mx, q);
        }
        if (mx <= 0.0f) return std::pair<LabelVolume, bool>(std::move(out), false);
        const float thr = static_cast<float>(threshold_frac) * mx;
        for (std::size_t q = 0; q < v.data.size(); ++q)
            out.labels[q] = v.data[q] >= thr ? 1 : 0;
        return std::pair<LabelVolume, bool>(std::move(out), true);
    };
    auto [la, oka] = binarize(a);
    auto [lb, okb] = binarize(b);
    if (!oka || !okb) return std::nullopt;
    return mean_hausdorff(la, lb, 1);
}

std::string family_of(const std::string& region_name) {
    if (region_name.rfind("ctx-", 0) == 0 || region_name.rfind("ctx_", 0) == 0) return "cortical";
    if (region_name.rfind("wm-", 0) == 0 || region_name.rfind("wm_", 0) == 0) return "wm";
    if (region_name.rfind("sub-", 0) == 0 || region_name.rfind("sub_", 0) == 0)
        return "subcortical";
    return "other";
}

MetricReport evaluate_segmentation(const LabelVolume& pred, const LabelVolume& ref) {
    if (pred.dims != ref.dims) throw ShapeError("evaluation: grids disagree");
    std::set<std::int32_t> regions;
    for (std::int32_t l : pred.labels)
        if (l != 0) regions.insert(l);
    for (std::int32_t l : ref.labels)
        if (l != 0) regions.insert(l);

    MetricReport report;
    std::map<std::string, std::vector<const RegionMetrics*>> by_family;
    for (std::int32_t region : regions) {
        RegionMetrics m;
        m.label = region;
        if (auto rit = ref.label_table.find(region); rit != ref.label_table.end()) {
            m.name = rit->second;
        } else if (auto pit = pred.label_table.find(region); pit != pred.label_table.end()) {
            m.name = pit->second;
        } else {
            m.name = "region_" + std::to_string(region);
        }
        m.family = family_of(m.name);
        for (std::size_t q = 0; q < pred.voxels(); ++q) {
            m.pred_voxels += pred.labels[q] == region;
            m.ref_voxels += ref.labels[q] == region;
        }
        m.dice = dice(pred, ref, region);
        m.hausdorff_mm = mean_hausdorff(pred, ref, region);
        report.regions.push_back(m);
    }
    for (const auto& m : report.regions) by_family[m.family].push_back(&m);
    by_family["all"] = {};
    for (const auto& m : report.regions) by_family["all"].push_back(&m);

    for (const auto& [family, members] : by_family) {
        FamilyAggregate agg;
        agg.family = family;
        agg.regions = members.size();
        double dsum = 0, hsum = 0;
        std::size_t dn = 0, hn = 0;
        for (const auto* m : members) {
            if (m->dice) {
                dsum += *m->dice;
                ++dn;
            }
            if (m->hausdorff_mm) {
                hsum += *m->hausdorff_mm;
                ++hn;
            }
        }
        if (dn) agg.mean_dice = dsum / static_cast<double>(dn);
        if (hn) agg.mean_hausdorff_mm = hsum / static_cast<double>(hn);
        report.families.push_back(agg);
    }
    return report;
}

namespace {

std::string fmt_opt(const std::optional<double>& v) {
    if (!v) return "NA";
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", *v);
    return buf;
}

}  // namespace

void write_report_csv(const MetricReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << "label,name,family,dice,hausdorff_mm,pred_voxels,ref_voxels\n";
    for (const auto& m : report.regions) {
        out << m.label << ',' << m.name << ',' << m.family << ',' << fmt_opt(m.dice) << ','
            << fmt_opt(m.hausdorff_mm) << ',' << m.pred_voxels << ',' << m.ref_voxels << '\n';
    }
    for (const auto& f : report.families) {
        out << ",family:" << f.family << ',' << f.family << ',' << fmt_opt(f.mean_dice) << ','
            << fmt_opt(f.mean_hausdorff_mm) << ',' << f.regions << ",\n";
    }
    if (!out) throw IoError("report write failed: " + path);
}

double mean_dice_foreground(const MetricReport& report) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& m : report.regions)
        if (m.dice) {
            sum += *m.dice;
            ++n;
        }
    return n ? sum / static_cast<double>(n) : 0.0;
}

}  // namespace dwiseg
