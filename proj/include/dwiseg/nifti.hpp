#pragma once

#include <string>

#include "dwiseg/volume.hpp"

namespace dwiseg {

// Minimal NIfTI-1 single-file (.nii / .nii.gz) support.
//
// Supported datatypes: uint8, int16, int32, float32, float64.
// Affine precedence on read: sform (sform_code > 0), else qform, else
// diagonal(pixdim). Little/big-endian files are auto-detected via the
// sizeof_hdr byte-swap probe. scl_slope/scl_inter are applied to scalar
// volumes when scl_slope != 0 and ignored for label volumes.
// Writes are little-endian, sform only, float32 (volumes) or int32 (labels);
// paths ending in ".gz" are gzip-compressed via stream I/O.
Volume read_volume(const std::string& path);
LabelVolume read_labels(const std::string& path);

void write_volume(const Volume& v, const std::string& path);
void write_labels(const LabelVolume& v, const std::string& path);

}  // namespace dwiseg
