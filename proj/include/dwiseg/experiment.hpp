#pragma once

#include <functional>
#include <iosfwd>

#include "dwiseg/config.hpp"
#include "dwiseg/model_io.hpp"
#include "dwiseg/phantom.hpp"
#include "dwiseg/train.hpp"

namespace dwiseg {

// One JSON-lines event per pipeline stage (name, wall time, extras).
class EventLog {
public:
    explicit EventLog(std::ostream* os = nullptr) : os_(os) {}
    void emit(const std::string& stage, double wall_ms,
              const std::vector<std::pair<std::string, std::string>>& extra = {});

private:
    std::ostream* os_;
};

// Desk-scale analogue of the paper-style evaluations, driven by a plain
// key = value config (see README for the key list).
struct ExperimentConfig {
    std::string mode = "eval1";          // eval1 (sampling density + representations) | eval3
    std::string phantom = "default";     // default | tiny | path to a JSON spec
    int dims_override = 0;               // 0 keeps the spec dims, else a cube edge
    int table_ndirs = 90;
    double table_b = 1000.0;
    int table_nb0 = 9;
    double noise_sigma_frac = 0.05;      // sigma as a fraction of the mean tissue s0
    std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
    std::vector<std::string> reps{"b0", "b0_fa:30", "b0_tensor:12", "b0_tensor:30",
                                  "b0_tensor:60"};
    int train_cases = 8, val_cases = 2, test_cases = 4;
    int epochs = 12;
    int batch_size = 8;
    int context_k = 3;
    int depth = 3;
    std::vector<int> filters{16, 32, 64};
    int convs_per_block = 3;
    int kernel = 5;
    double edge_gain = 5.0;
    double lr = 0.01;
    double momentum = 0.0;
    int patience = 15;
    std::array<double, 3> view_weights{0.4, 0.4, 0.2};
    int train_ndirs = 30;                // eval3
    std::vector<int> eval_ndirs{30, 60};  // eval3
};

ExperimentConfig experiment_config_from(const KeyValueConfig& kv);

// "b0" | "b0_fa:N" | "b0_tensor:N" | "b0_dwi:N"
RepresentationSpec parse_rep_token(const std::string& token, double shell_b);

// ---- reusable pipeline pieces -------------------------------------------------

struct PhantomCase {
    LabelVolume labels;
    Volume rep;      // normalized representation channels
    Volume weights;  // omega_F + omega_E
};

struct FamilyData {
    std::vector<PhantomCase> train, val, test;
    std::vector<ChannelScale> scales;  // estimated on the first training case
    std::vector<std::string> channel_names;
    std::map<std::int32_t, std::string> label_table;
    int num_classes = 0;
    RepresentationSpec rep;
};

// Generates a phantom family (train/val/test instances of the same spec with
// per-case seeds derived from family_seed), simulates DWIs, builds
// representations (normalization estimated once, reused everywhere) and
// loss-weight volumes from the pooled training-label statistics.
FamilyData build_family(const PhantomSpec& base, const GradientTable& table,
                        const RepresentationSpec& rep, int n_train, int n_val, int n_test,
                        std::uint64_t family_seed, double edge_gain, EventLog* log = nullptr);

// Rebuilds the test-case representations for a different direction count
// (same phantoms, same normalization parameters) for generalization runs.
std::vector<PhantomCase> rebuild_test_cases(const PhantomSpec& base, const GradientTable& table,
                                            const RepresentationSpec& rep,
                                            const std::vector<ChannelScale>& scales, int n_train,
                                            int n_val, int n_test, std::uint64_t family_seed,
                                            double edge_gain);

struct TrainedViews {
    std::array<ModelFile, 3> models;  // axial, coronal, sagittal
    std::array<TrainResult, 3> results;
};

TrainedViews train_views(const FamilyData& family, const ExperimentConfig& cfg,
                         std::uint64_t seed, EventLog* log = nullptr);

// Segments every test case and evaluates against the exact labels.
std::vector<MetricReport> evaluate_test_cases(TrainedViews& views,
                                              const std::vector<PhantomCase>& test,
                                              const std::array<double, 3>& view_weights);

// Full experiment; writes metrics.csv and summary.csv under out_dir.
void run_experiment(const ExperimentConfig& cfg, const std::string& out_dir, EventLog* log);

// Spearman rank correlation (average-rank ties).
double spearman(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace dwiseg
