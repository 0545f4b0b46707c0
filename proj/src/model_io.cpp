#include "dwiseg/model_io.hpp"

#include <json.hpp>

#include <cstring>
#include <fstream>

namespace dwiseg {

namespace {

constexpr char kMagic[8] = {'D', 'W', 'S', 'E', 'G', 'N', 'E', 'T'};
constexpr std::uint32_t kVersion = 1;

nlohmann::json arch_to_json(const ArchSpec& a) {
    return {{"in_channels", a.in_channels},
            {"num_classes", a.num_classes},
            {"depth", a.depth},
            {"filters", a.filters},
            {"convs_per_block", a.convs_per_block},
            {"kernel", a.kernel},
            {"seed", a.seed},
            {"bn_eps", a.bn_eps},
            {"bn_momentum", a.bn_momentum},
            {"prelu_init", a.prelu_init}};
}

ArchSpec arch_from_json(const nlohmann::json& j) {
    ArchSpec a;
    a.in_channels = j.at("in_channels").get<int>();
    a.num_classes = j.at("num_classes").get<int>();
    a.depth = j.at("depth").get<int>();
    a.filters = j.at("filters").get<std::vector<int>>();
    a.convs_per_block = j.at("convs_per_block").get<int>();
    a.kernel = j.at("kernel").get<int>();
    a.seed = j.at("seed").get<std::uint64_t>();
    a.bn_eps = j.at("bn_eps").get<double>();
    a.bn_momentum = j.at("bn_momentum").get<double>();
    a.prelu_init = j.at("prelu_init").get<double>();
    return a;
}

}  // namespace

void save_model(const ModelFile& model, const std::string& path) {
    auto& params = const_cast<NetParams<float>&>(model.params);

    nlohmann::json j;
    j["arch"] = arch_to_json(model.arch);
    j["view"] = to_string(model.view);
    j["context_k"] = model.context_k;
    j["rep"] = {{"kind", to_string(model.rep.kind)},
                {"ndirs", model.rep.ndirs},
                {"shell_b", model.rep.shell_b}};
    j["label_table"] = nlohmann::json::object();
    for (const auto& [id, name] : model.label_table)
        j["label_table"][std::to_string(id)] = name;
    j["channels"] = nlohmann::json::array();
    for (std::size_t c = 0; c < model.channel_names.size(); ++c)
        j["channels"].push_back({{"name", model.channel_names[c]},
                                 {"lo", model.scales[c].lo},
                                 {"hi", model.scales[c].hi}});

    std::vector<std::pair<std::string, std::vector<float>*>> arrays;
    nlohmann::json manifest = nlohmann::json::array();
    const auto record = [&](const std::string& n, const std::vector<int>& shape,
                            std::vector<float>& data) {
        manifest.push_back({{"name", n}, {"shape", shape}});
        arrays.emplace_back(n, &data);
    };
    for_each_param<float>(params, record);
    for_each_state<float>(params, record);
    j["arrays"] = manifest;

    const std::string header = j.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(kMagic, 8);
    const std::uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), 4);
    const std::uint64_t jlen = header.size();
    out.write(reinterpret_cast<const char*>(&jlen), 8);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (auto& [name, data] : arrays)
        out.write(reinterpret_cast<const char*>(data->data()),
                  static_cast<std::streamsize>(data->size() * sizeof(float)));
    if (!out) throw IoError("model write failed: " + path);
}

ModelFile load_model(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kMagic, 8) != 0)
        throw FormatError("not a dwiseg model file: " + path);
    std::uint32_t version = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    if (version != kVersion) throw UnsupportedError("unsupported model version");
    std::uint64_t jlen = 0;
    in.read(reinterpret_cast<char*>(&jlen), 8);
    std::string header(jlen, '\0');
    in.read(header.data(), static_cast<std::streamsize>(jlen));
    if (!in) throw FormatError("truncated model header: " + path);

    ModelFile model;
    nlohmann::json manifest;
    try {
        const nlohmann::json j = nlohmann::json::parse(header);
        model.arch = arch_from_json(j.at("arch"));
        model.view = view_from_string(j.at("view").get<std::string>());
        model.context_k = j.at("context_k").get<int>();
        model.rep.kind = rep_kind_from_string(j.at("rep").at("kind").get<std::string>());
        model.rep.ndirs = j.at("rep").at("ndirs").get<int>();
        model.rep.shell_b = j.at("rep").at("shell_b").get<double>();
        for (const auto& [key, value] : j.at("label_table").items())
            model.label_table[std::stoi(key)] = value.get<std::string>();
        for (const auto& c : j.at("channels")) {
            model.channel_names.push_back(c.at("name").get<std::string>());
            model.scales.push_back({c.at("lo").get<double>(), c.at("hi").get<double>()});
        }
        manifest = j.at("arrays");
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bad model header: ") + e.what());
    }

    model.params = init_params<float>(model.arch);
    std::vector<std::pair<std::string, std::vector<float>*>> arrays;
    const auto record = [&](const std::string& n, const std::vector<int>&,
                            std::vector<float>& data) { arrays.emplace_back(n, &data); };
    for_each_param<float>(model.params, record);
    for_each_state<float>(model.params, record);

    if (manifest.size() != arrays.size())
        throw FormatError("model array manifest does not match architecture");
    for (std::size_t i = 0; i < arrays.size(); ++i) {
        if (manifest[i].at("name").get<std::string>() != arrays[i].first)
            throw FormatError("model array order mismatch at " + arrays[i].first);
        std::size_t expect = 1;
        for (int d : manifest[i].at("shape").get<std::vector<int>>())
            expect *= static_cast<std::size_t>(d);
        if (expect != arrays[i].second->size())
            throw FormatError("model array shape mismatch at " + arrays[i].first);
        in.read(reinterpret_cast<char*>(arrays[i].second->data()),
                static_cast<std::streamsize>(expect * sizeof(float)));
    }
    if (!in) throw FormatError("truncated model arrays: " + path);
    return model;
}

ProbabilityVolume predict_view(ModelFile& model, const Volume& rep, int batch_size) {
    const ViewGeometry g = view_geometry(rep.dims, model.view);
    const int k = model.context_k;
    const int channels = rep.channels * (2 * k + 1);
    if (channels != model.arch.in_channels)
        throw ShapeError("representation channels do not match the model");

    ProbabilityVolume out;
    static_cast<Volume&>(out) = make_volume(rep.dims, model.arch.num_classes, rep.affine);
    const std::size_t nvox = out.voxels();

    Tensor4<float> inputs;
    for (int start = 0; start < g.slices; start += batch_size) {
        const int count = std::min(batch_size, g.slices - start);
        inputs.resize(count, channels, g.h, g.w);
        for (int i = 0; i < count; ++i)
            copy_slice_input(rep, model.view, k, start + i, inputs.plane(i, 0));
        const Tensor4<float> probs = forward<float>(model.params, inputs, false, nullptr);
        for (int i = 0; i < count; ++i) {
            const int slice = start + i;
            for (int c = 0; c < probs.c; ++c) {
                const float* src = probs.plane(i, c);
                for (int r = 0; r < g.h; ++r)
                    for (int q = 0; q < g.w; ++q) {
                        const auto vox = view_voxel(model.view, slice, r, q);
                        out.data[out.index(vox[0], vox[1], vox[2]) +
                                 static_cast<std::size_t>(c) * nvox] =
                            src[static_cast<std::size_t>(r) * g.w + q];
                    }
            }
        }
    }
    return out;
}

SegmentationResult segment_views(std::array<ModelFile, 3>& models, const Volume& rep,
                                 const std::array<double, 3>& view_weights, int batch_size) {
    ProbabilityVolume axial, coronal, sagittal;
    for (auto& m : models) {
        ProbabilityVolume p = predict_view(m, rep, batch_size);
        switch (m.view) {
            case View::Axial: axial = std::move(p); break;
            case View::Coronal: coronal = std::move(p); break;
            case View::Sagittal: sagittal = std::move(p); break;
        }
    }
    SegmentationResult res;
    res.probabilities = aggregate_views(axial, coronal, sagittal, view_weights);
    res.labels = argmax_labels(res.probabilities, &models[0].label_table);
    return res;
}

}  // namespace dwiseg
