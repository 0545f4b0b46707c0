#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace dwiseg {

// Per-DWI diffusion weighting: b-values (s/mm^2) and unit gradient
// directions. Directions with b == 0 may be zero vectors.
struct GradientTable {
    std::vector<double> bvals;
    std::vector<Eigen::Vector3d> bvecs;

    std::size_t n() const { return bvals.size(); }
    bool is_b0(std::size_t i, double tol = 1e-6) const { return bvals[i] <= tol; }
};

// Throws ValidationError on count mismatch, negative b-values, or non-unit
// nonzero directions (1e-3 tolerance).
void validate(const GradientTable& t);

// FSL-convention text files: bvals is one whitespace-separated row of N
// numbers, bvecs is three rows of N numbers. Nonzero directions are
// normalized to unit length.
GradientTable read_gradient_table(const std::string& bvals_path, const std::string& bvecs_path);

void write_gradient_table(const GradientTable& t, const std::string& bvals_path,
                          const std::string& bvecs_path);

// Parses from in-memory text (same format); used by the file reader.
GradientTable parse_gradient_table(const std::string& bvals_text, const std::string& bvecs_text);

}  // namespace dwiseg
