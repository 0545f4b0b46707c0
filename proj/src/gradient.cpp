#include "dwiseg/gradient.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "dwiseg/error.hpp"

namespace dwiseg {

namespace {

std::vector<double> parse_row(const std::string& line) {
    std::istringstream is(line);
    std::vector<double> out;
    double v;
    while (is >> v) out.push_back(v);
    if (!is.eof() && is.fail()) throw FormatError("non-numeric token in gradient table");
    return out;
}

std::string read_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::vector<std::string> nonempty_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.find_first_not_of(" \t\r") != std::string::npos) lines.push_back(line);
    }
    return lines;
}

}  // namespace

void validate(const GradientTable& t) {
    if (t.bvals.size() != t.bvecs.size())
        throw ValidationError("bvals/bvecs length mismatch");
    for (std::size_t i = 0; i < t.n(); ++i) {
        if (t.bvals[i] < 0.0) throw ValidationError("negative b-value");
        if (!t.is_b0(i)) {
            const double norm = t.bvecs[i].norm();
            if (std::abs(norm - 1.0) > 1e-3)
                throw ValidationError("non-unit gradient direction at index " +
                                      std::to_string(i));
        }
    }
}

GradientTable parse_gradient_table(const std::string& bvals_text, const std::string& bvecs_text) {
    // bvals: all whitespace-separated numbers, one logical row.
    std::vector<double> bvals = parse_row(bvals_text);
    if (bvals.empty()) throw FormatError("empty bvals");

    const auto lines = nonempty_lines(bvecs_text);
    if (lines.size() != 3) throw FormatError("bvecs must have exactly three rows");
    std::array<std::vector<double>, 3> rows;
    for (int r = 0; r < 3; ++r) {
        rows[r] = parse_row(lines[r]);
        if (rows[r].size() != bvals.size())
            throw FormatError("bvecs row length does not match bvals count");
    }

    GradientTable t;
    t.bvals = bvals;
    t.bvecs.resize(bvals.size());
    for (std::size_t i = 0; i < bvals.size(); ++i) {
        if (bvals[i] < 0.0) throw ValidationError("negative b-value at index " + std::to_string(i));
        Eigen::Vector3d g(rows[0][i], rows[1][i], rows[2][i]);
        const double norm = g.norm();
        if (bvals[i] > 0.0) {
            if (norm <= 0.0)
                throw ValidationError("zero direction with nonzero b-value at index " +
                                      std::to_string(i));
            g /= norm;
        } else if (norm > 0.0) {
            g /= norm;
        }
        t.bvecs[i] = g;
    }
    validate(t);
    return t;
}

GradientTable read_gradient_table(const std::string& bvals_path, const std::string& bvecs_path) {
    return parse_gradient_table(read_text(bvals_path), read_text(bvecs_path));
}

void write_gradient_table(const GradientTable& t, const std::string& bvals_path,
                          const std::string& bvecs_path) {
    std::ofstream bv(bvals_path);
    if (!bv) throw IoError("cannot open for writing: " + bvals_path);
    for (std::size_t i = 0; i < t.n(); ++i) bv << (i ? " " : "") << t.bvals[i];
    bv << "\n";

    std::ofstream gv(bvecs_path);
    if (!gv) throw IoError("cannot open for writing: " + bvecs_path);
    char buf[64];
    for (int r = 0; r < 3; ++r) {
        for (std::size_t i = 0; i < t.n(); ++i) {
            std::snprintf(buf, sizeof(buf), "%.9g", t.bvecs[i][r]);
            gv << (i ? " " : "") << buf;
        }
        gv << "\n";
    }
    if (!bv || !gv) throw IoError("gradient table write failed");
}

}  // namespace dwiseg
