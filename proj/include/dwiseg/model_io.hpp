#pragma once

#include <string>

#include "dwiseg/features.hpp"
#include "dwiseg/metrics.hpp"
#include "dwiseg/network.hpp"

namespace dwiseg {

// Self-describing container for one view network: a JSON header (arch,
// view, label table, representation spec, channel manifest with
// normalization bounds, named array manifest) followed by the raw float32
// parameter and running-stat arrays in manifest order.
struct ModelFile {
    ArchSpec arch;
    View view = View::Axial;
    std::map<std::int32_t, std::string> label_table;
    RepresentationSpec rep;
    std::vector<std::string> channel_names;
    std::vector<ChannelScale> scales;
    int context_k = 3;
    NetParams<float> params;
};

void save_model(const ModelFile& model, const std::string& path);
ModelFile load_model(const std::string& path);

// Runs one view network over every slice of the representation volume and
// assembles a per-voxel class probability volume (inference mode, batched).
ProbabilityVolume predict_view(ModelFile& model, const Volume& rep, int batch_size = 8);

// Full multi-view inference: per-view prediction, weighted aggregation and
// argmax labeling in the input grid.
struct SegmentationResult {
    ProbabilityVolume probabilities;
    LabelVolume labels;
};

SegmentationResult segment_views(std::array<ModelFile, 3>& models, const Volume& rep,
                                 const std::array<double, 3>& view_weights, int batch_size = 8);

}  // namespace dwiseg
