#include "dwiseg/features.hpp"

#include <algorithm>
#include <cmath>

#include <json.hpp>

namespace dwiseg {

std::string to_string(RepKind kind) {
    switch (kind) {
        case RepKind::B0Only: return "b0";
        case RepKind::B0Fa: return "b0_fa";
        case RepKind::B0Tensor: return "b0_tensor";
        case RepKind::B0Dwi: return "b0_dwi";
    }
    return "?";
}

RepKind rep_kind_from_string(const std::string& s) {
    if (s == "b0") return RepKind::B0Only;
    if (s == "b0_fa") return RepKind::B0Fa;
    if (s == "b0_tensor") return RepKind::B0Tensor;
    if (s == "b0_dwi") return RepKind::B0Dwi;
    throw ValidationError("unknown representation kind: " + s);
}

int rep_channels(const RepresentationSpec& spec) {
    switch (spec.kind) {
        case RepKind::B0Only: return 1;
        case RepKind::B0Fa: return 2;
        case RepKind::B0Tensor: return 7;
        case RepKind::B0Dwi: return 1 + spec.ndirs;
    }
    return 0;
}

double percentile(std::vector<float> values, double q) {
    if (values.empty()) throw ValidationError("percentile of empty data");
    std::sort(values.begin(), values.end());
    const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return (1.0 - frac) * values[lo] + frac * values[hi];
}

namespace {

Volume mean_b0(const Volume& dwi, const GradientTable& table) {
    std::vector<std::size_t> b0s;
    for (std::size_t i = 0; i < table.n(); ++i)
        if (table.is_b0(i)) b0s.push_back(i);
    if (b0s.empty()) throw ValidationError("representation requires at least one b=0 image");
    Volume out = make_volume(dwi.dims, 1, dwi.affine);
    const std::size_t nvox = dwi.voxels();
    const double inv = 1.0 / static_cast<double>(b0s.size());
    for (std::size_t i : b0s) {
        const float* src = dwi.data.data() + i * nvox;
        for (std::size_t v = 0; v < nvox; ++v)
            out.data[v] += static_cast<float>(src[v] * inv);
    }
    return out;
}

void normalize_channel(float* data, std::size_t n, const ChannelScale& s) {
    const double range = s.hi - s.lo;
    if (range <= 0.0) {
        std::fill(data, data + n, 0.0f);
        return;
    }
    const double inv = 1.0 / range;
    for (std::size_t v = 0; v < n; ++v) {
        const double y = (static_cast<double>(data[v]) - s.lo) * inv;
        data[v] = static_cast<float>(std::clamp(y, 0.0, 1.0));
    }
}

}  // namespace

Representation build_representation(const Volume& dwi, const GradientTable& table,
                                    const RepresentationSpec& spec,
                                    const std::vector<ChannelScale>* reuse) {
    validate(table);
    if (static_cast<std::size_t>(dwi.channels) != table.n())
        throw ShapeError("DWI channel count does not match gradient table");

    Representation rep;
    rep.spec = spec;
    const int nch = rep_channels(spec);
    rep.image = make_volume(dwi.dims, nch, dwi.affine);
    const std::size_t nvox = dwi.voxels();

    const Volume b0 = mean_b0(dwi, table);
    std::copy(b0.data.begin(), b0.data.end(), rep.image.data.begin());
    rep.channel_names.push_back("b0");

    if (spec.kind == RepKind::B0Fa || spec.kind == RepKind::B0Tensor) {
        const auto keep = subset_with_b0(table, spec.shell_b, static_cast<std::size_t>(spec.ndirs));
        auto [sub_dwi, sub_table] = extract_channels(dwi, table, keep);
        const TensorVolume tensor = fit_tensor(sub_dwi, sub_table, full_mask(sub_dwi));
        if (spec.kind == RepKind::B0Fa) {
            const Volume fa = fa_map(eigen_decompose(tensor));
            std::copy(fa.data.begin(), fa.data.end(), rep.image.data.begin() + nvox);
            rep.channel_names.push_back("fa");
        } else {
            static const char* comp_names[6] = {"dxx", "dxy", "dxz", "dyy", "dyz", "dzz"};
            std::copy(tensor.components.data.begin(), tensor.components.data.end(),
                      rep.image.data.begin() + nvox);
            for (const char* n : comp_names) rep.channel_names.push_back(n);
        }
    } else if (spec.kind == RepKind::B0Dwi) {
        rep.dwi_indices = select_directions(table, spec.shell_b, static_cast<std::size_t>(spec.ndirs));
        for (std::size_t j = 0; j < rep.dwi_indices.size(); ++j) {
            const std::size_t i = rep.dwi_indices[j];
            std::copy_n(dwi.data.begin() + static_cast<std::ptrdiff_t>(i * nvox), nvox,
                        rep.image.data.begin() + static_cast<std::ptrdiff_t>((1 + j) * nvox));
            rep.channel_names.push_back("dwi" + std::to_string(i));
        }
    }

    if (reuse) {
        if (reuse->size() != static_cast<std::size_t>(nch))
            throw ShapeError("reused normalization parameter count mismatch");
        rep.scales = *reuse;
    } else {
        rep.scales.resize(nch);
        for (int c = 0; c < nch; ++c) {
            std::vector<float> copy(rep.image.channel(c), rep.image.channel(c) + nvox);
            rep.scales[c].lo = percentile(copy, 0.5);
            rep.scales[c].hi = percentile(std::move(copy), 99.5);
        }
    }
    for (int c = 0; c < nch; ++c) normalize_channel(rep.image.channel(c), nvox, rep.scales[c]);

    for (float v : rep.image.data)
        if (!std::isfinite(v)) throw NumericError("non-finite representation channel value");
    return rep;
}

std::string representation_manifest_json(const Representation& rep) {
    nlohmann::json j;
    j["kind"] = to_string(rep.spec.kind);
    j["ndirs"] = rep.spec.ndirs;
    j["shell_b"] = rep.spec.shell_b;
    j["channels"] = nlohmann::json::array();
    for (std::size_t c = 0; c < rep.channel_names.size(); ++c) {
        j["channels"].push_back({{"name", rep.channel_names[c]},
                                 {"lo", rep.scales[c].lo},
                                 {"hi", rep.scales[c].hi}});
    }
    return j.dump(2) + "\n";
}

void parse_representation_manifest(const std::string& json_text, RepresentationSpec& spec,
                                   std::vector<std::string>& channel_names,
                                   std::vector<ChannelScale>& scales) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
        spec.kind = rep_kind_from_string(j.at("kind").get<std::string>());
        spec.ndirs = j.at("ndirs").get<int>();
        spec.shell_b = j.at("shell_b").get<double>();
        channel_names.clear();
        scales.clear();
        for (const auto& c : j.at("channels")) {
            channel_names.push_back(c.at("name").get<std::string>());
            scales.push_back({c.at("lo").get<double>(), c.at("hi").get<double>()});
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad representation manifest: ") + e.what());
    }
}

std::string to_string(View v) {
    switch (v) {
        case View::Axial: return "axial";
        case View::Coronal: return "coronal";
        case View::Sagittal: return "sagittal";
    }
    return "?";
}

View view_from_string(const std::string& s) {
    if (s == "axial") return View::Axial;
    if (s == "coronal") return View::Coronal;
    if (s == "sagittal") return View::Sagittal;
    throw ValidationError("unknown view: " + s);
}

ViewGeometry view_geometry(const std::array<int, 3>& dims, View view) {
    switch (view) {
        case View::Axial: return {2, dims[1], dims[0], dims[2]};
        case View::Coronal: return {1, dims[2], dims[0], dims[1]};
        case View::Sagittal: return {0, dims[2], dims[1], dims[0]};
    }
    return {};
}

std::array<int, 3> view_voxel(View view, int slice, int row, int col) {
    switch (view) {
        case View::Axial: return {col, row, slice};
        case View::Coronal: return {col, slice, row};
        case View::Sagittal: return {slice, col, row};
    }
    return {};
}

void copy_slice_input(const Volume& rep, View view, int k, int slice_index, float* dst) {
    const ViewGeometry g = view_geometry(rep.dims, view);
    const std::size_t plane = static_cast<std::size_t>(g.h) * g.w;
    for (int c = 0; c < rep.channels; ++c) {
        for (int o = -k; o <= k; ++o) {
            // Edge replication at the volume boundary.
            const int s = std::clamp(slice_index + o, 0, g.slices - 1);
            float* out = dst + (static_cast<std::size_t>(c) * (2 * k + 1) + (o + k)) * plane;
            for (int r = 0; r < g.h; ++r)
                for (int q = 0; q < g.w; ++q) {
                    const auto v = view_voxel(view, s, r, q);
                    out[static_cast<std::size_t>(r) * g.w + q] = rep.at(v[0], v[1], v[2], c);
                }
        }
    }
}

void copy_slice_labels(const LabelVolume& labels, View view, int slice_index, std::int32_t* dst) {
    const ViewGeometry g = view_geometry(labels.dims, view);
    for (int r = 0; r < g.h; ++r)
        for (int q = 0; q < g.w; ++q) {
            const auto v = view_voxel(view, slice_index, r, q);
            dst[static_cast<std::size_t>(r) * g.w + q] = labels.at(v[0], v[1], v[2]);
        }
}

void copy_slice_weights(const Volume& weights, View view, int slice_index, float* dst) {
    const ViewGeometry g = view_geometry(weights.dims, view);
    for (int r = 0; r < g.h; ++r)
        for (int q = 0; q < g.w; ++q) {
            const auto v = view_voxel(view, slice_index, r, q);
            dst[static_cast<std::size_t>(r) * g.w + q] = weights.at(v[0], v[1], v[2]);
        }
}

SliceSample extract_slice(const Volume& rep, const LabelVolume& labels, const Volume& weights,
                          View view, int k, int slice_index) {
    if (rep.dims != labels.dims || rep.dims != weights.dims)
        throw ShapeError("representation/labels/weights dims differ");
    const ViewGeometry g = view_geometry(rep.dims, view);
    if (k < 0 || k >= g.slices)
        throw ValidationError("context error: half-width " + std::to_string(k) +
                              " too large for axis length " + std::to_string(g.slices));
    if (slice_index < 0 || slice_index >= g.slices)
        throw ValidationError("slice index out of bounds");

    SliceSample s;
    s.view = view;
    s.slice_index = slice_index;
    s.h = g.h;
    s.w = g.w;
    s.channels = rep.channels * (2 * k + 1);
    s.input.resize(static_cast<std::size_t>(s.channels) * g.h * g.w);
    s.label.resize(static_cast<std::size_t>(g.h) * g.w);
    s.weight.resize(static_cast<std::size_t>(g.h) * g.w);
    copy_slice_input(rep, view, k, slice_index, s.input.data());
    copy_slice_labels(labels, view, slice_index, s.label.data());
    copy_slice_weights(weights, view, slice_index, s.weight.data());
    return s;
}

std::vector<SliceSample> extract_slices(const Volume& rep, const LabelVolume& labels,
                                        const Volume& weights, View view, int k) {
    const ViewGeometry g = view_geometry(rep.dims, view);
    std::vector<SliceSample> out;
    out.reserve(g.slices);
    for (int s = 0; s < g.slices; ++s)
        out.push_back(extract_slice(rep, labels, weights, view, k, s));
    return out;
}

}  // namespace dwiseg
