#include "dwiseg/phantom.hpp"

#include <json.hpp>

#include <cmath>

#include "dwiseg/rng.hpp"

namespace dwiseg {

namespace {

constexpr std::uint64_t kJitterStream = 100;
constexpr std::uint64_t kNoiseStream = 7;

bool inside(const Primitive& prim, const Eigen::Vector3d& p) {
    const Eigen::Vector3d d = p - prim.center;
    switch (prim.shape) {
        case Primitive::Shape::Sphere:
        case Primitive::Shape::Ellipsoid: {
            const double q = (d.x() / prim.radii.x()) * (d.x() / prim.radii.x()) +
                             (d.y() / prim.radii.y()) * (d.y() / prim.radii.y()) +
                             (d.z() / prim.radii.z()) * (d.z() / prim.radii.z());
            return q <= 1.0;
        }
        case Primitive::Shape::Box:
            return std::abs(d.x()) <= prim.radii.x() && std::abs(d.y()) <= prim.radii.y() &&
                   std::abs(d.z()) <= prim.radii.z();
    }
    return false;
}

// Sorted-descending eigenvalues of an SPD tissue tensor.
Eigen::Vector3d sorted_eigenvalues(const Eigen::Matrix3d& tensor) {
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(tensor);
    return solver.eigenvalues().reverse();
}

Eigen::Matrix3d oriented_tensor(const Eigen::Vector3d& evals, const Eigen::Vector3d& axis) {
    Eigen::Vector3d e1 = axis.normalized();
    const Eigen::Vector3d helper = std::abs(e1.z()) < 0.9 ? Eigen::Vector3d::UnitZ()
                                                          : Eigen::Vector3d::UnitX();
    Eigen::Vector3d e2 = e1.cross(helper).normalized();
    Eigen::Vector3d e3 = e1.cross(e2);
    return evals[0] * e1 * e1.transpose() + evals[1] * e2 * e2.transpose() +
           evals[2] * e3 * e3.transpose();
}

}  // namespace

Eigen::Matrix3d diffusion_tensor(double l1, double l2, double l3) {
    Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
    m(0, 0) = l1;
    m(1, 1) = l2;
    m(2, 2) = l3;
    return m;
}

void validate(const PhantomSpec& spec) {
    if (spec.dims[0] <= 0 || spec.dims[1] <= 0 || spec.dims[2] <= 0)
        throw ValidationError("phantom dims must be positive");
    if (spec.regions.empty()) throw ValidationError("phantom needs at least one region");
    for (const auto& r : spec.regions) {
        if (r.radii.minCoeff() <= 0.0)
            throw ValidationError("degenerate primitive: non-positive radius");
        if (r.label < 0) throw ValidationError("negative region label");
    }
    for (const auto& [label, tissue] : spec.tissues) {
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(tissue.tensor);
        if (solver.eigenvalues().minCoeff() <= 0.0)
            throw ValidationError("tissue tensor for label " + std::to_string(label) +
                                  " is not SPD");
        if (tissue.s0 <= 0.0) throw ValidationError("tissue s0 must be positive");
    }
    if (spec.noise_sigma < 0.0) throw ValidationError("noise sigma must be non-negative");
    if (spec.jitter < 0.0 || spec.jitter > 0.5) throw ValidationError("jitter outside [0, 0.5]");
}

LabelVolume generate_labels(const PhantomSpec& spec) {
    validate(spec);
    LabelVolume out = make_label_volume(
        spec.dims,
        scaling_affine(spec.voxel_size[0], spec.voxel_size[1], spec.voxel_size[2]));

    std::vector<Primitive> regions = spec.regions;
    if (spec.jitter > 0.0) {
        const CounterRng rng(spec.seed, kJitterStream);
        for (std::size_t r = 0; r < regions.size(); ++r) {
            const std::uint64_t base = r * 8;
            for (int a = 0; a < 3; ++a) {
                const double u_c = 2.0 * rng.uniform_at(base + a) - 1.0;
                const double u_r = 2.0 * rng.uniform_at(base + 3 + a) - 1.0;
                regions[r].center[a] += u_c * spec.jitter * spec.dims[a] / 4.0;
                regions[r].radii[a] *= 1.0 + u_r * spec.jitter;
            }
        }
    }

    const int nx = spec.dims[0], ny = spec.dims[1], nz = spec.dims[2];
#pragma omp parallel for collapse(2) schedule(static)
    for (int z = 0; z < nz; ++z) {
        for (int y = 0; y < ny; ++y) {
            for (int x = 0; x < nx; ++x) {
                const Eigen::Vector3d p(x, y, z);
                std::int32_t label = 0;
                for (std::size_t r = regions.size(); r-- > 0;) {
                    if (inside(regions[r], p)) {
                        label = regions[r].label;
                        break;
                    }
                }
                out.at(x, y, z) = label;
            }
        }
    }

    for (const auto& [label, tissue] : spec.tissues) out.label_table[label] = tissue.name;
    complete_label_table(out);
    return out;
}

Volume simulate_dwi(const LabelVolume& labels, const std::map<int, TissueSpec>& tissues,
                    const GradientTable& table, double noise_sigma, std::uint64_t seed) {
    validate(table);
    std::int32_t max_label = 0;
    for (std::int32_t l : labels.labels) max_label = std::max(max_label, l);

    // Per-label lookup (0 = empty space, signal 0 unless a tissue is given).
    std::vector<const TissueSpec*> by_label(static_cast<std::size_t>(max_label) + 1, nullptr);
    std::vector<Eigen::Vector3d> evals(by_label.size(), Eigen::Vector3d::Zero());
    for (std::int32_t l = 0; l <= max_label; ++l) {
        const auto it = tissues.find(l);
        if (it != tissues.end()) {
            by_label[l] = &it->second;
            evals[l] = sorted_eigenvalues(it->second.tensor);
        } else if (l != 0) {
            bool present = false;
            for (std::int32_t v : labels.labels)
                if (v == l) {
                    present = true;
                    break;
                }
            if (present)
                throw ValidationError("no tissue spec for present label " + std::to_string(l));
        }
    }

    const int n = static_cast<int>(table.n());
    Volume out = make_volume(labels.dims, n, labels.affine);
    const std::size_t nvox = labels.voxels();
    const Eigen::Vector3d center((labels.dims[0] - 1) / 2.0, (labels.dims[1] - 1) / 2.0,
                                 (labels.dims[2] - 1) / 2.0);
    const CounterRng rng(seed, kNoiseStream);
    const int nx = labels.dims[0], ny = labels.dims[1];

#pragma omp parallel for schedule(static)
    for (long long v = 0; v < static_cast<long long>(nvox); ++v) {
        const auto vi = static_cast<std::size_t>(v);
        const std::int32_t label = labels.labels[vi];
        const TissueSpec* tissue = (label >= 0 && label <= max_label) ? by_label[label] : nullptr;

        Eigen::Matrix3d d = Eigen::Matrix3d::Zero();
        double s0 = 0.0;
        if (tissue) {
            s0 = tissue->s0;
            if (tissue->orientation == Orientation::Fixed) {
                d = tissue->tensor;
            } else {
                const int x = static_cast<int>(vi % nx);
                const int y = static_cast<int>((vi / nx) % ny);
                const int z = static_cast<int>(vi / (static_cast<std::size_t>(nx) * ny));
                Eigen::Vector3d radial = Eigen::Vector3d(x, y, z) - center;
                if (radial.norm() < 1e-9) radial = Eigen::Vector3d::UnitZ();
                radial.normalize();
                Eigen::Vector3d axis;
                if (tissue->orientation == Orientation::Radial) {
                    axis = radial;
                } else {
                    axis = Eigen::Vector3d::UnitZ().cross(radial);
                    if (axis.norm() < 1e-9) axis = Eigen::Vector3d::UnitX();
                }
                d = oriented_tensor(evals[label], axis);
            }
        }

        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            if (tissue) {
                const double bq = table.bvals[i] * table.bvecs[i].dot(d * table.bvecs[i]);
                s = s0 * std::exp(-bq);
            }
            if (noise_sigma > 0.0) {
                double z1, z2;
                rng.normal_pair_at(vi * static_cast<std::uint64_t>(n) + i, z1, z2);
                const double re = s + noise_sigma * z1;
                const double im = noise_sigma * z2;
                s = std::sqrt(re * re + im * im);
            }
            out.data[vi + static_cast<std::size_t>(i) * nvox] = static_cast<float>(s);
        }
    }
    return out;
}

GradientTable make_uniform_table(int ndirs, double bval, int nb0) {
    if (ndirs < 6 || nb0 < 1) throw ValidationError("table needs >= 6 directions and >= 1 b=0");
    GradientTable t;
    const int total = ndirs + nb0;
    const int stride = total / nb0;
    int placed_b0 = 0, placed_dir = 0;
    const double golden = M_PI * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < total; ++i) {
        if (placed_b0 < nb0 && i % stride == 0) {
            t.bvals.push_back(0.0);
            t.bvecs.push_back(Eigen::Vector3d::Zero());
            ++placed_b0;
        } else {
            // Golden-angle spiral on the upper hemisphere.
            const double z = (placed_dir + 0.5) / static_cast<double>(ndirs);
            const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
            const double phi = golden * placed_dir;
            t.bvals.push_back(bval);
            t.bvecs.push_back(Eigen::Vector3d(r * std::cos(phi), r * std::sin(phi), z));
            ++placed_dir;
        }
    }
    // Any b=0 slots not reached by the stride pattern become trailing rows.
    while (placed_b0 < nb0) {
        t.bvals.push_back(0.0);
        t.bvecs.push_back(Eigen::Vector3d::Zero());
        ++placed_b0;
    }
    while (placed_dir < ndirs) {
        const double z = (placed_dir + 0.5) / static_cast<double>(ndirs);
        const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
        const double phi = golden * placed_dir;
        t.bvals.push_back(bval);
        t.bvecs.push_back(Eigen::Vector3d(r * std::cos(phi), r * std::sin(phi), z));
        ++placed_dir;
    }
    validate(t);
    return t;
}

PhantomSpec default_phantom_spec() {
    PhantomSpec s;
    s.dims = {64, 64, 64};
    s.voxel_size = {1.25, 1.25, 1.25};
    s.jitter = 0.10;

    const auto tissue = [&](int label, const std::string& name, const std::string& family,
                            double l1, double l2, double l3, double s0,
                            Orientation orientation) {
        TissueSpec t;
        t.label = label;
        t.name = name;
        t.family = family;
        t.tensor = diffusion_tensor(l1, l2, l3);
        t.s0 = s0;
        t.orientation = orientation;
        s.tissues[label] = t;
    };

    // Shared s0 across most tissues keeps the b=0 image uninformative about
    // them; tensor shape/orientation carries the contrast instead.
    tissue(1, "ctx-shell", "cortical", 0.85e-3, 0.85e-3, 0.85e-3, 900, Orientation::Fixed);
    tissue(2, "wm-core", "wm", 1.6e-3, 0.35e-3, 0.35e-3, 900, Orientation::Tangential);
    tissue(3, "sub-thal-l", "subcortical", 0.60e-3, 0.60e-3, 0.60e-3, 900, Orientation::Fixed);
    tissue(4, "sub-thal-r", "subcortical", 0.60e-3, 0.60e-3, 0.60e-3, 900, Orientation::Fixed);
    tissue(5, "sub-caud-l", "subcortical", 0.65e-3, 0.65e-3, 0.65e-3, 920, Orientation::Fixed);
    tissue(6, "sub-caud-r", "subcortical", 0.65e-3, 0.65e-3, 0.65e-3, 920, Orientation::Fixed);
    tissue(7, "sub-put-l", "subcortical", 0.62e-3, 0.62e-3, 0.62e-3, 880, Orientation::Fixed);
    tissue(8, "sub-put-r", "subcortical", 0.62e-3, 0.62e-3, 0.62e-3, 880, Orientation::Fixed);
    tissue(9, "sub-vent", "subcortical", 2.6e-3, 2.6e-3, 2.6e-3, 1150, Orientation::Fixed);
    // Same eigenvalues as wm-core but a fixed axis: FA and s0 cannot tell
    // them apart, the full tensor can.
    tissue(10, "wm-stem", "wm", 1.6e-3, 0.35e-3, 0.35e-3, 900, Orientation::Fixed);

    const auto sphere = [&](double cx, double cy, double cz, double r, int label) {
        s.regions.push_back({Primitive::Shape::Sphere, {cx, cy, cz}, {r, r, r}, label});
    };
    const auto ellipsoid = [&](double cx, double cy, double cz, double rx, double ry, double rz,
                               int label) {
        s.regions.push_back({Primitive::Shape::Ellipsoid, {cx, cy, cz}, {rx, ry, rz}, label});
    };

    sphere(31.5, 31.5, 31.5, 26.0, 1);      // cortex shell
    sphere(31.5, 31.5, 31.5, 20.5, 2);      // white-matter core
    ellipsoid(24.5, 31.5, 31.5, 4.5, 5.5, 4.5, 3);
    ellipsoid(38.5, 31.5, 31.5, 4.5, 5.5, 4.5, 4);
    sphere(25.5, 40.5, 35.5, 4.0, 5);
    sphere(37.5, 40.5, 35.5, 4.0, 6);
    ellipsoid(20.5, 36.5, 29.5, 3.5, 4.5, 3.5, 7);
    ellipsoid(42.5, 36.5, 29.5, 3.5, 4.5, 3.5, 8);
    ellipsoid(31.5, 25.5, 34.5, 3.5, 6.5, 4.5, 9);
    ellipsoid(31.5, 27.5, 16.5, 5.0, 5.0, 7.5, 10);
    return s;
}

PhantomSpec tiny_phantom_spec() {
    PhantomSpec s;
    s.dims = {24, 24, 24};
    s.voxel_size = {1.25, 1.25, 1.25};
    s.jitter = 0.08;

    TissueSpec shell;
    shell.label = 1;
    shell.name = "ctx-shell";
    shell.family = "cortical";
    shell.tensor = diffusion_tensor(0.85e-3, 0.85e-3, 0.85e-3);
    shell.s0 = 900;
    s.tissues[1] = shell;

    TissueSpec core;
    core.label = 2;
    core.name = "wm-core";
    core.family = "wm";
    core.tensor = diffusion_tensor(1.6e-3, 0.35e-3, 0.35e-3);
    core.s0 = 900;
    core.orientation = Orientation::Tangential;
    s.tissues[2] = core;

    TissueSpec blob;
    blob.label = 3;
    blob.name = "sub-blob";
    blob.family = "subcortical";
    blob.tensor = diffusion_tensor(2.4e-3, 2.4e-3, 2.4e-3);
    blob.s0 = 1100;
    s.tissues[3] = blob;

    s.regions.push_back({Primitive::Shape::Sphere, {11.5, 11.5, 11.5}, {10, 10, 10}, 1});
    s.regions.push_back({Primitive::Shape::Sphere, {11.5, 11.5, 11.5}, {7, 7, 7}, 2});
    s.regions.push_back({Primitive::Shape::Sphere, {11.5, 13.5, 11.5}, {3, 3, 3}, 3});
    return s;
}

namespace {

Orientation orientation_from_string(const std::string& s) {
    if (s == "fixed") return Orientation::Fixed;
    if (s == "radial") return Orientation::Radial;
    if (s == "tangential") return Orientation::Tangential;
    throw ValidationError("unknown tissue orientation: " + s);
}

std::string orientation_to_string(Orientation o) {
    switch (o) {
        case Orientation::Fixed: return "fixed";
        case Orientation::Radial: return "radial";
        case Orientation::Tangential: return "tangential";
    }
    return "?";
}

Primitive::Shape shape_from_string(const std::string& s) {
    if (s == "sphere") return Primitive::Shape::Sphere;
    if (s == "ellipsoid") return Primitive::Shape::Ellipsoid;
    if (s == "box") return Primitive::Shape::Box;
    throw ValidationError("unknown primitive shape: " + s);
}

std::string shape_to_string(Primitive::Shape s) {
    switch (s) {
        case Primitive::Shape::Sphere: return "sphere";
        case Primitive::Shape::Ellipsoid: return "ellipsoid";
        case Primitive::Shape::Box: return "box";
    }
    return "?";
}

}  // namespace

PhantomSpec parse_phantom_spec_json(const std::string& text) {
    nlohmann::json j;
    PhantomSpec s;
    try {
        j = nlohmann::json::parse(text);
        if (j.contains("dims"))
            for (int a = 0; a < 3; ++a) s.dims[a] = j["dims"].at(a).get<int>();
        if (j.contains("voxel_size"))
            for (int a = 0; a < 3; ++a) s.voxel_size[a] = j["voxel_size"].at(a).get<double>();
        s.noise_sigma = j.value("noise_sigma", 0.0);
        s.seed = j.value("seed", 0ull);
        s.jitter = j.value("jitter", 0.0);
        s.tissues.clear();
        for (const auto& tj : j.at("tissues")) {
            TissueSpec t;
            t.label = tj.at("label").get<int>();
            t.name = tj.value("name", "region_" + std::to_string(t.label));
            t.family = tj.value("family", "other");
            t.s0 = tj.at("s0").get<double>();
            t.orientation = orientation_from_string(tj.value("orientation", "fixed"));
            if (tj.contains("tensor")) {
                const auto& c = tj["tensor"];  // [Dxx, Dxy, Dxz, Dyy, Dyz, Dzz]
                t.tensor << c.at(0).get<double>(), c.at(1).get<double>(), c.at(2).get<double>(),
                    c.at(1).get<double>(), c.at(3).get<double>(), c.at(4).get<double>(),
                    c.at(2).get<double>(), c.at(4).get<double>(), c.at(5).get<double>();
            } else {
                const auto& e = tj.at("eigenvalues");
                t.tensor = diffusion_tensor(e.at(0).get<double>(), e.at(1).get<double>(),
                                            e.at(2).get<double>());
            }
            s.tissues[t.label] = t;
        }
        s.regions.clear();
        for (const auto& rj : j.at("regions")) {
            Primitive p;
            p.shape = shape_from_string(rj.at("shape").get<std::string>());
            for (int a = 0; a < 3; ++a) p.center[a] = rj.at("center").at(a).get<double>();
            if (rj.contains("radius")) {
                p.radii.setConstant(rj["radius"].get<double>());
            } else {
                for (int a = 0; a < 3; ++a) p.radii[a] = rj.at("radii").at(a).get<double>();
            }
            p.label = rj.at("label").get<int>();
            s.regions.push_back(p);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad phantom spec: ") + e.what());
    }
    validate(s);
    return s;
}

std::string phantom_spec_to_json(const PhantomSpec& s) {
    nlohmann::json j;
    j["dims"] = s.dims;
    j["voxel_size"] = s.voxel_size;
    j["noise_sigma"] = s.noise_sigma;
    j["seed"] = s.seed;
    j["jitter"] = s.jitter;
    j["tissues"] = nlohmann::json::array();
    for (const auto& [label, t] : s.tissues) {
        nlohmann::json tj;
        tj["label"] = label;
        tj["name"] = t.name;
        tj["family"] = t.family;
        tj["s0"] = t.s0;
        tj["orientation"] = orientation_to_string(t.orientation);
        tj["tensor"] = {t.tensor(0, 0), t.tensor(0, 1), t.tensor(0, 2),
                        t.tensor(1, 1), t.tensor(1, 2), t.tensor(2, 2)};
        j["tissues"].push_back(tj);
    }
    j["regions"] = nlohmann::json::array();
    for (const auto& r : s.regions) {
        nlohmann::json rj;
        rj["shape"] = shape_to_string(r.shape);
        rj["center"] = {r.center[0], r.center[1], r.center[2]};
        rj["radii"] = {r.radii[0], r.radii[1], r.radii[2]};
        rj["label"] = r.label;
        j["regions"].push_back(rj);
    }
    return j.dump(2) + "\n";
}

}  // namespace dwiseg
