#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dwiseg/dti.hpp"
#include "dwiseg/gradient.hpp"
#include "dwiseg/volume.hpp"

namespace dwiseg {

// Network input built from dMRI data. Channel order is fixed: mean-b0
// first, then FA | the six tensor components | selected DWIs depending on
// the kind.
enum class RepKind { B0Only, B0Fa, B0Tensor, B0Dwi };

std::string to_string(RepKind kind);
RepKind rep_kind_from_string(const std::string& s);

struct RepresentationSpec {
    RepKind kind = RepKind::B0Tensor;
    int ndirs = 30;          // ignored for B0Only
    double shell_b = 1000.0;  // s/mm^2
};

// Channel count implied by the spec: B0Only 1, B0Fa 2, B0Tensor 7,
// B0Dwi 1 + ndirs.
int rep_channels(const RepresentationSpec& spec);

// Per-channel affine rescale to [0,1]: robust bounds at the 0.5 and 99.5
// percentiles, values clamped. A constant channel maps to zero.
struct ChannelScale {
    double lo = 0.0;
    double hi = 1.0;
};

struct Representation {
    Volume image;  // rep_channels(spec) channels, values in [0,1]
    RepresentationSpec spec;
    std::vector<std::string> channel_names;
    std::vector<ChannelScale> scales;
    std::vector<std::size_t> dwi_indices;  // original table indices (B0Dwi)
};

// Builds the representation; tensor-based kinds fit on the b=0 images plus
// an approximately-uniform ndirs subset of the shell. When `reuse` is given
// those rescale parameters are applied instead of re-estimating (inference
// must match training).
Representation build_representation(const Volume& dwi, const GradientTable& table,
                                    const RepresentationSpec& spec,
                                    const std::vector<ChannelScale>* reuse = nullptr);

double percentile(std::vector<float> values, double q);  // q in [0,100], linear interpolation

// Sidecar manifest (JSON text) for a saved representation.
std::string representation_manifest_json(const Representation& rep);
void parse_representation_manifest(const std::string& json_text, RepresentationSpec& spec,
                                   std::vector<std::string>& channel_names,
                                   std::vector<ChannelScale>& scales);

// Anatomical slicing views. Pixel layout per view (row, col):
//   Axial    : slice along z, (y, x)
//   Coronal  : slice along y, (z, x)
//   Sagittal : slice along x, (z, y)
enum class View { Axial, Coronal, Sagittal };

std::string to_string(View v);
View view_from_string(const std::string& s);

struct ViewGeometry {
    int axis;    // volume axis the slice index runs along
    int h, w;    // slice height/width in pixels
    int slices;  // slice count along the axis
};
ViewGeometry view_geometry(const std::array<int, 3>& dims, View view);

// (slice, row, col) -> (x, y, z)
std::array<int, 3> view_voxel(View view, int slice, int row, int col);

// One training sample: a stack of neighboring slices for each base channel
// (offsets -k..+k contiguous per channel, edges replicated), the label
// slice, and the per-pixel loss weight slice.
struct SliceSample {
    View view = View::Axial;
    int slice_index = 0;
    int channels = 0, h = 0, w = 0;  // channels = base_channels * (2k+1)
    std::vector<float> input;
    std::vector<std::int32_t> label;
    std::vector<float> weight;
};

SliceSample extract_slice(const Volume& rep, const LabelVolume& labels, const Volume& weights,
                          View view, int k, int slice_index);

std::vector<SliceSample> extract_slices(const Volume& rep, const LabelVolume& labels,
                                        const Volume& weights, View view, int k);

// Raw copy helpers used by the batch assembler (dst sized channels*h*w,
// labels/weights h*w).
void copy_slice_input(const Volume& rep, View view, int k, int slice_index, float* dst);
void copy_slice_labels(const LabelVolume& labels, View view, int slice_index, std::int32_t* dst);
void copy_slice_weights(const Volume& weights, View view, int slice_index, float* dst);

}  // namespace dwiseg
