#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "dwiseg/nifti.hpp"
#include "dwiseg/phantom.hpp"
#include "test_helpers.hpp"

using namespace dwiseg;

namespace {

std::string cli_binary() {
    const char* env = std::getenv("DWISEG_BIN");
    REQUIRE_MESSAGE(env != nullptr, "DWISEG_BIN must point at the dwiseg binary");
    return env;
}

struct RunResult {
    int exit_code;
    std::string output;
};

RunResult run(const std::string& args) {
    const std::string out_file = test_path("cli_out.txt");
    const std::string cmd = cli_binary() + " " + args + " > " + out_file + " 2>&1";
    const int status = std::system(cmd.c_str());
    std::ifstream in(out_file);
    std::ostringstream os;
    os << in.rdbuf();
    return {WEXITSTATUS(status), os.str()};
}

std::string read_file(const std::string& path) {
    std::ifstream in(path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

}  // namespace

TEST_CASE("invalid flags exit with the usage code") {
    CHECK(run("no-such-command").exit_code == 2);
    CHECK(run("evaluate --bogus x").exit_code == 2);
    CHECK(run("").exit_code == 2);
}

TEST_CASE("phantom subcommand writes the advertised artifacts") {
    const std::string dir = test_path("phantom_tiny");
    const RunResult r =
        run("phantom --spec tiny --seed 5 --dirs 12 --nb0 2 --out-dir " + dir);
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("\"stage\":\"phantom\"") != std::string::npos);
    CHECK(r.output.find("wall_ms") != std::string::npos);

    const LabelVolume labels = read_labels(dir + "/labels.nii.gz");
    CHECK(labels.dims == std::array<int, 3>{24, 24, 24});
    const Volume dwi = read_volume(dir + "/dwi.nii.gz");
    CHECK(dwi.channels == 14);
    const GradientTable table = read_gradient_table(dir + "/bvals", dir + "/bvecs");
    CHECK(table.n() == 14);
    CHECK(read_file(dir + "/labels.txt").find("ctx-shell") != std::string::npos);

    // Determinism across runs: byte-identical artifacts.
    const std::string dir2 = test_path("phantom_tiny2");
    CHECK(run("phantom --spec tiny --seed 5 --dirs 12 --nb0 2 --out-dir " + dir2).exit_code == 0);
    CHECK(read_file(dir + "/labels.nii.gz") == read_file(dir2 + "/labels.nii.gz"));
    CHECK(read_file(dir + "/dwi.nii.gz") == read_file(dir2 + "/dwi.nii.gz"));
}

TEST_CASE("fit-tensor subcommand produces tensor maps") {
    const std::string dir = test_path("phantom_fit");
    REQUIRE(run("phantom --spec tiny --seed 3 --dirs 15 --nb0 2 --out-dir " + dir).exit_code == 0);
    const std::string out = test_path("fit_out");
    const RunResult r = run("fit-tensor --dwi " + dir + "/dwi.nii.gz --bvals " + dir +
                            "/bvals --bvecs " + dir + "/bvecs --mask " + dir +
                            "/labels.nii.gz --out " + out);
    CHECK(r.exit_code == 0);
    const Volume tensor = read_volume(out + "/tensor.nii.gz");
    CHECK(tensor.channels == 6);
    const Volume fa = read_volume(out + "/fa.nii.gz");
    for (float v : fa.data) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("evaluate: identical volumes give dice 1 and hausdorff 0") {
    const std::string dir = test_path("phantom_eval");
    REQUIRE(run("phantom --spec tiny --seed 9 --dirs 12 --nb0 2 --out-dir " + dir).exit_code == 0);
    const std::string csv = test_path("self_eval.csv");
    const RunResult r = run("evaluate --pred " + dir + "/labels.nii.gz --ref " + dir +
                            "/labels.nii.gz --names " + dir + "/labels.txt --out " + csv);
    CHECK(r.exit_code == 0);
    std::ifstream in(csv);
    std::string line;
    std::getline(in, line);  // header
    int region_rows = 0;
    while (std::getline(in, line)) {
        if (line.find("family:") != std::string::npos) continue;
        std::stringstream ss(line);
        std::string label, name, family, dice_s, hd_s;
        std::getline(ss, label, ',');
        std::getline(ss, name, ',');
        std::getline(ss, family, ',');
        std::getline(ss, dice_s, ',');
        std::getline(ss, hd_s, ',');
        CHECK(std::stod(dice_s) == doctest::Approx(1.0));
        CHECK(std::stod(hd_s) == doctest::Approx(0.0));
        ++region_rows;
    }
    CHECK(region_rows == 3);
}

TEST_CASE("missing input files give the data exit code") {
    CHECK(run("evaluate --pred nope.nii --ref nope.nii --out x.csv").exit_code == 3);
    CHECK(run("fit-tensor --dwi nope.nii --bvals a --bvecs b --out " + test_path("x"))
              .exit_code == 3);
}

TEST_CASE("compare-tracts on identical volumes reports zero") {
    const std::string dir = test_path("phantom_ct");
    REQUIRE(run("phantom --spec tiny --seed 2 --dirs 12 --nb0 2 --out-dir " + dir).exit_code == 0);
    // Use the b0 channel as a stand-in intensity volume.
    const Volume dwi = read_volume(dir + "/dwi.nii.gz");
    Volume b0 = make_volume(dwi.dims, 1, dwi.affine);
    std::copy_n(dwi.data.begin(), b0.voxels(), b0.data.begin());
    const std::string tract = test_path("tract.nii.gz");
    write_volume(b0, tract);
    const RunResult r = run("compare-tracts --a " + tract + " --b " + tract);
    CHECK(r.exit_code == 0);
    CHECK(r.output.find("hausdorff_mm=0") != std::string::npos);
}

TEST_CASE("build-input writes representation plus manifest; reuse applies") {
    const std::string dir = test_path("phantom_bi");
    REQUIRE(run("phantom --spec tiny --seed 4 --dirs 15 --nb0 2 --out-dir " + dir).exit_code == 0);
    const std::string stem = test_path("case0");
    const RunResult r = run("build-input --dwi " + dir + "/dwi.nii.gz --bvals " + dir +
                            "/bvals --bvecs " + dir +
                            "/bvecs --kind b0_tensor --ndirs 12 --shell 1000 --out " + stem);
    CHECK(r.exit_code == 0);
    const Volume rep = read_volume(stem + ".rep.nii.gz");
    CHECK(rep.channels == 7);
    const std::string manifest = read_file(stem + ".manifest.json");
    CHECK(manifest.find("b0_tensor") != std::string::npos);

    const std::string stem2 = test_path("case0_reuse");
    const RunResult r2 = run("build-input --dwi " + dir + "/dwi.nii.gz --bvals " + dir +
                             "/bvals --bvecs " + dir + "/bvecs --reuse-manifest " + stem +
                             ".manifest.json --out " + stem2);
    CHECK(r2.exit_code == 0);
    CHECK(read_file(stem + ".rep.nii.gz") == read_file(stem2 + ".rep.nii.gz"));
}
