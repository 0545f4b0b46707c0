#include "dwiseg/experiment.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace dwiseg {

namespace {

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

}  // namespace

void EventLog::emit(const std::string& stage, double wall_ms,
                    const std::vector<std::pair<std::string, std::string>>& extra) {
    if (!os_) return;
    nlohmann::json j;
    j["stage"] = stage;
    j["wall_ms"] = wall_ms;
    for (const auto& [k, v] : extra) j[k] = v;
    (*os_) << j.dump() << std::endl;
}

ExperimentConfig experiment_config_from(const KeyValueConfig& kv) {
    ExperimentConfig c;
    c.mode = kv.get_string("mode", c.mode);
    c.phantom = kv.get_string("phantom", c.phantom);
    c.dims_override = kv.get_int("dims", 0);
    c.table_ndirs = kv.get_int("table_ndirs", c.table_ndirs);
    c.table_b = kv.get_double("table_b", c.table_b);
    c.table_nb0 = kv.get_int("table_nb0", c.table_nb0);
    c.noise_sigma_frac = kv.get_double("noise_sigma_frac", c.noise_sigma_frac);
    std::vector<int> seeds;
    for (auto s : kv.get_ints("seeds", {})) seeds.push_back(s);
    if (!seeds.empty()) {
        c.seeds.clear();
        for (int s : seeds) c.seeds.push_back(static_cast<std::uint64_t>(s));
    }
    c.reps = kv.get_strings("reps", c.reps);
    c.train_cases = kv.get_int("train_cases", c.train_cases);
    c.val_cases = kv.get_int("val_cases", c.val_cases);
    c.test_cases = kv.get_int("test_cases", c.test_cases);
    c.epochs = kv.get_int("epochs", c.epochs);
    c.batch_size = kv.get_int("batch_size", c.batch_size);
    c.context_k = kv.get_int("context_k", c.context_k);
    c.depth = kv.get_int("depth", c.depth);
    c.filters = kv.get_ints("filters", c.filters);
    c.convs_per_block = kv.get_int("convs_per_block", c.convs_per_block);
    c.kernel = kv.get_int("kernel", c.kernel);
    c.edge_gain = kv.get_double("edge_gain", c.edge_gain);
    c.lr = kv.get_double("lr", c.lr);
    c.momentum = kv.get_double("momentum", c.momentum);
    c.patience = kv.get_int("patience", c.patience);
    const auto vw = kv.get_doubles("view_weights",
                                   {c.view_weights[0], c.view_weights[1], c.view_weights[2]});
    if (vw.size() != 3) throw ValidationError("view_weights needs three values");
    c.view_weights = {vw[0], vw[1], vw[2]};
    c.train_ndirs = kv.get_int("train_ndirs", c.train_ndirs);
    c.eval_ndirs = kv.get_ints("eval_ndirs", c.eval_ndirs);
    return c;
}

RepresentationSpec parse_rep_token(const std::string& token, double shell_b) {
    RepresentationSpec spec;
    spec.shell_b = shell_b;
    const auto colon = token.find(':');
    const std::string kind = token.substr(0, colon);
    spec.kind = rep_kind_from_string(kind);
    if (colon != std::string::npos) {
        spec.ndirs = std::stoi(token.substr(colon + 1));
    } else if (spec.kind != RepKind::B0Only) {
        throw ValidationError("representation '" + token + "' needs a direction count");
    }
    return spec;
}

namespace {

PhantomSpec resolve_phantom(const ExperimentConfig& cfg) {
    PhantomSpec spec;
    if (cfg.phantom == "default") {
        spec = default_phantom_spec();
    } else if (cfg.phantom == "tiny") {
        spec = tiny_phantom_spec();
    } else {
        std::ifstream in(cfg.phantom);
        if (!in) throw IoError("cannot open phantom spec: " + cfg.phantom);
        std::ostringstream os;
        os << in.rdbuf();
        spec = parse_phantom_spec_json(os.str());
    }
    if (cfg.dims_override > 0) {
        // Scale geometry with the grid so the same anatomy fits.
        const double factor = static_cast<double>(cfg.dims_override) / spec.dims[0];
        for (auto& r : spec.regions) {
            r.center *= factor;
            r.radii *= factor;
        }
        spec.dims = {cfg.dims_override, cfg.dims_override, cfg.dims_override};
    }
    double s0_sum = 0.0;
    for (const auto& [label, tissue] : spec.tissues) s0_sum += tissue.s0;
    spec.noise_sigma = cfg.noise_sigma_frac * (s0_sum / spec.tissues.size());
    return spec;
}

std::uint64_t case_seed(std::uint64_t family_seed, int case_idx) {
    return CounterRng::mix(family_seed * 1009 + static_cast<std::uint64_t>(case_idx) + 1);
}

int num_classes_of(const PhantomSpec& spec) {
    int mx = 0;
    for (const auto& [label, tissue] : spec.tissues) mx = std::max(mx, label);
    return mx + 1;
}

PhantomCase make_case(const PhantomSpec& base, const GradientTable& table,
                      const RepresentationSpec& rep, std::uint64_t seed,
                      const std::vector<ChannelScale>* scales,
                      const std::map<std::int32_t, double>* class_w, double edge_gain,
                      std::vector<ChannelScale>* scales_out,
                      std::vector<std::string>* names_out) {
    PhantomSpec spec = base;
    spec.seed = seed;
    PhantomCase c;
    c.labels = generate_labels(spec);
    const Volume dwi = simulate_dwi(c.labels, spec.tissues, table, spec.noise_sigma, seed);
    Representation r = build_representation(dwi, table, rep, scales);
    c.rep = std::move(r.image);
    if (scales_out) *scales_out = r.scales;
    if (names_out) *names_out = r.channel_names;
    if (class_w) c.weights = weight_map(c.labels, *class_w, edge_gain);
    return c;
}

}  // namespace

FamilyData build_family(const PhantomSpec& base, const GradientTable& table,
                        const RepresentationSpec& rep, int n_train, int n_val, int n_test,
                        std::uint64_t family_seed, double edge_gain, EventLog* log) {
    const double t0 = now_ms();
    FamilyData fam;
    fam.rep = rep;
    fam.num_classes = num_classes_of(base);

    // Pooled training-label statistics for the class weights.
    std::map<std::int32_t, std::size_t> counts;
    std::vector<LabelVolume> train_labels(n_train);
    for (int i = 0; i < n_train; ++i) {
        PhantomSpec spec = base;
        spec.seed = case_seed(family_seed, i);
        train_labels[i] = generate_labels(spec);
        for (const auto& [label, count] : label_counts(train_labels[i])) counts[label] += count;
    }
    const auto class_w = median_frequency_weights(counts);

    const int total = n_train + n_val + n_test;
    for (int i = 0; i < total; ++i) {
        const std::uint64_t seed = case_seed(family_seed, i);
        const bool first = i == 0;
        PhantomCase c = make_case(base, table, rep, seed, first ? nullptr : &fam.scales,
                                  &class_w, edge_gain, first ? &fam.scales : nullptr,
                                  first ? &fam.channel_names : nullptr);
        if (first) fam.label_table = c.labels.label_table;
        if (i < n_train)
            fam.train.push_back(std::move(c));
        else if (i < n_train + n_val)
            fam.val.push_back(std::move(c));
        else
            fam.test.push_back(std::move(c));
    }
    if (log)
        log->emit("build_family", now_ms() - t0,
                  {{"rep", to_string(rep.kind)}, {"cases", std::to_string(total)}});
    return fam;
}

std::vector<PhantomCase> rebuild_test_cases(const PhantomSpec& base, const GradientTable& table,
                                            const RepresentationSpec& rep,
                                            const std::vector<ChannelScale>& scales, int n_train,
                                            int n_val, int n_test, std::uint64_t family_seed,
                                            double edge_gain) {
    std::vector<PhantomCase> out;
    for (int i = n_train + n_val; i < n_train + n_val + n_test; ++i) {
        out.push_back(make_case(base, table, rep, case_seed(family_seed, i), &scales, nullptr,
                                edge_gain, nullptr, nullptr));
    }
    return out;
}

TrainedViews train_views(const FamilyData& family, const ExperimentConfig& cfg,
                         std::uint64_t seed, EventLog* log) {
    ArchSpec arch;
    arch.in_channels = family.train[0].rep.channels * (2 * cfg.context_k + 1);
    arch.num_classes = family.num_classes;
    arch.depth = cfg.depth;
    arch.filters = cfg.filters;
    arch.convs_per_block = cfg.convs_per_block;
    arch.kernel = cfg.kernel;

    TrainConfig tc;
    tc.initial_lr = cfg.lr;
    tc.momentum = cfg.momentum;
    tc.batch_size = cfg.batch_size;
    tc.max_epochs = cfg.epochs;
    tc.patience = cfg.patience;
    tc.context_k = cfg.context_k;
    tc.edge_gain = cfg.edge_gain;

    TrainedViews out;
    const View views[3] = {View::Axial, View::Coronal, View::Sagittal};
    for (int v = 0; v < 3; ++v) {
        const double t0 = now_ms();
        std::vector<const Volume*> train_reps, val_reps, train_w, val_w;
        std::vector<const LabelVolume*> train_l, val_l;
        for (const auto& c : family.train) {
            train_reps.push_back(&c.rep);
            train_l.push_back(&c.labels);
            train_w.push_back(&c.weights);
        }
        for (const auto& c : family.val) {
            val_reps.push_back(&c.rep);
            val_l.push_back(&c.labels);
            val_w.push_back(&c.weights);
        }
        SliceDataset train_ds(train_reps, train_l, train_w, views[v], cfg.context_k);
        SliceDataset val_ds(val_reps, val_l, val_w, views[v], cfg.context_k);

        arch.seed = CounterRng::mix(seed + 31 * static_cast<std::uint64_t>(v));
        TrainConfig vtc = tc;
        vtc.seed = arch.seed;
        out.results[v] = train_network(arch, vtc, train_ds, val_ds);

        ModelFile& m = out.models[v];
        m.arch = arch;
        m.view = views[v];
        m.label_table = family.label_table;
        m.rep = family.rep;
        m.channel_names = family.channel_names;
        m.scales = family.scales;
        m.context_k = cfg.context_k;
        m.params = out.results[v].best_params;
        if (log)
            log->emit("train_view", now_ms() - t0,
                      {{"view", to_string(views[v])},
                       {"epochs", std::to_string(out.results[v].epochs_run)},
                       {"best_val", fmt(out.results[v].history.empty()
                                            ? 0.0
                                            : out.results[v]
                                                  .history[out.results[v].best_epoch]
                                                  .val_loss)}});
    }
    return out;
}

std::vector<MetricReport> evaluate_test_cases(TrainedViews& views,
                                              const std::vector<PhantomCase>& test,
                                              const std::array<double, 3>& view_weights) {
    std::vector<MetricReport> reports;
    for (const auto& c : test) {
        SegmentationResult seg = segment_views(views.models, c.rep, view_weights);
        reports.push_back(evaluate_segmentation(seg.labels, c.labels));
    }
    return reports;
}

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2)
        throw ValidationError("spearman needs two equal-length series");
    const auto ranks = [](const std::vector<double>& x) {
        const std::size_t n = x.size();
        std::vector<std::size_t> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
        std::vector<double> r(n);
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && x[idx[j + 1]] == x[idx[i]]) ++j;
            const double avg = 0.5 * (static_cast<double>(i) + static_cast<double>(j)) + 1.0;
            for (std::size_t q = i; q <= j; ++q) r[idx[q]] = avg;
            i = j + 1;
        }
        return r;
    };
    const auto ra = ranks(a), rb = ranks(b);
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        ma += ra[i];
        mb += rb[i];
    }
    ma /= ra.size();
    mb /= rb.size();
    double num = 0, da = 0, db = 0;
    for (std::size_t i = 0; i < ra.size(); ++i) {
        num += (ra[i] - ma) * (rb[i] - mb);
        da += (ra[i] - ma) * (ra[i] - ma);
        db += (rb[i] - mb) * (rb[i] - mb);
    }
    if (da == 0.0 || db == 0.0) return 0.0;
    return num / std::sqrt(da * db);
}

namespace {

struct MetricsWriter {
    std::ofstream out;
    explicit MetricsWriter(const std::string& path) : out(path) {
        if (!out) throw IoError("cannot open for writing: " + path);
        out << "rep,seed,case,label,name,family,metric,value\n";
    }
    void add(const std::string& rep, std::uint64_t seed, int case_idx,
             const MetricReport& report) {
        for (const auto& m : report.regions) {
            if (m.dice)
                out << rep << ',' << seed << ',' << case_idx << ',' << m.label << ',' << m.name
                    << ',' << m.family << ",dice," << fmt(*m.dice) << '\n';
            if (m.hausdorff_mm)
                out << rep << ',' << seed << ',' << case_idx << ',' << m.label << ',' << m.name
                    << ',' << m.family << ",hausdorff_mm," << fmt(*m.hausdorff_mm) << '\n';
        }
        for (const auto& f : report.families) {
            if (f.mean_dice)
                out << rep << ',' << seed << ',' << case_idx << ",,family:" << f.family << ','
                    << f.family << ",mean_dice," << fmt(*f.mean_dice) << '\n';
        }
    }
};

int rep_direction_count(const std::string& token) {
    const auto colon = token.find(':');
    return colon == std::string::npos ? 0 : std::stoi(token.substr(colon + 1));
}

void run_eval1(const ExperimentConfig& cfg, const PhantomSpec& spec, const GradientTable& table,
               const std::string& out_dir, EventLog* log) {
    MetricsWriter metrics(out_dir + "/metrics.csv");
    // rep -> per-seed mean foreground dice
    std::map<std::string, std::vector<double>> rep_dice;

    for (const std::string& rep_token : cfg.reps) {
        const RepresentationSpec rep = parse_rep_token(rep_token, cfg.table_b);
        for (std::uint64_t seed : cfg.seeds) {
            FamilyData family = build_family(spec, table, rep, cfg.train_cases, cfg.val_cases,
                                             cfg.test_cases, seed, cfg.edge_gain, log);
            TrainedViews views = train_views(family, cfg, seed, log);
            const auto reports = evaluate_test_cases(views, family.test, cfg.view_weights);
            double dice_sum = 0.0;
            for (std::size_t t = 0; t < reports.size(); ++t) {
                metrics.add(rep_token, seed, static_cast<int>(t), reports[t]);
                dice_sum += mean_dice_foreground(reports[t]);
            }
            rep_dice[rep_token].push_back(dice_sum / static_cast<double>(reports.size()));
            if (log)
                log->emit("experiment_run", 0.0,
                          {{"rep", rep_token},
                           {"seed", std::to_string(seed)},
                           {"mean_dice", fmt(rep_dice[rep_token].back())}});
        }
    }

    std::ofstream summary(out_dir + "/summary.csv");
    if (!summary) throw IoError("cannot open for writing: " + out_dir + "/summary.csv");
    summary << "rep,ndirs,mean_dice,stderr_dice\n";
    std::vector<double> ndirs_series, dice_series;
    for (const std::string& rep_token : cfg.reps) {
        const auto& d = rep_dice[rep_token];
        const double mean = std::accumulate(d.begin(), d.end(), 0.0) / d.size();
        double var = 0.0;
        for (double x : d) var += (x - mean) * (x - mean);
        const double stderr_mean =
            d.size() > 1 ? std::sqrt(var / (d.size() - 1)) / std::sqrt(d.size()) : 0.0;
        summary << rep_token << ',' << rep_direction_count(rep_token) << ',' << fmt(mean) << ','
                << fmt(stderr_mean) << '\n';
        if (rep_token.rfind("b0_tensor:", 0) == 0) {
            ndirs_series.push_back(rep_direction_count(rep_token));
            dice_series.push_back(mean);
        }
    }
    if (ndirs_series.size() >= 2) {
        summary << "spearman_dice_vs_ndirs,," << fmt(spearman(ndirs_series, dice_series))
                << ",\n";
    }
}

void run_eval3(const ExperimentConfig& cfg, const PhantomSpec& spec, const GradientTable& table,
               const std::string& out_dir, EventLog* log) {
    MetricsWriter metrics(out_dir + "/metrics.csv");
    std::map<int, std::vector<double>> dice_by_m;

    RepresentationSpec train_rep;
    train_rep.kind = RepKind::B0Tensor;
    train_rep.ndirs = cfg.train_ndirs;
    train_rep.shell_b = cfg.table_b;

    for (std::uint64_t seed : cfg.seeds) {
        FamilyData family = build_family(spec, table, train_rep, cfg.train_cases, cfg.val_cases,
                                         cfg.test_cases, seed, cfg.edge_gain, log);
        TrainedViews views = train_views(family, cfg, seed, log);
        for (int m : cfg.eval_ndirs) {
            RepresentationSpec eval_rep = train_rep;
            eval_rep.ndirs = m;
            std::vector<PhantomCase> test =
                (m == cfg.train_ndirs)
                    ? std::move(family.test)
                    : rebuild_test_cases(spec, table, eval_rep, family.scales, cfg.train_cases,
                                         cfg.val_cases, cfg.test_cases, seed, cfg.edge_gain);
            if (m == cfg.train_ndirs) family.test.clear();
            const auto reports = evaluate_test_cases(views, test, cfg.view_weights);
            double dice_sum = 0.0;
            for (std::size_t t = 0; t < reports.size(); ++t) {
                const std::string tag =
                    "train" + std::to_string(cfg.train_ndirs) + "_eval" + std::to_string(m);
                metrics.add(tag, seed, static_cast<int>(t), reports[t]);
                dice_sum += mean_dice_foreground(reports[t]);
            }
            dice_by_m[m].push_back(dice_sum / static_cast<double>(reports.size()));
        }
    }

    std::ofstream summary(out_dir + "/summary.csv");
    if (!summary) throw IoError("cannot open for writing: " + out_dir + "/summary.csv");
    summary << "train_ndirs,eval_ndirs,mean_dice,dice_drop\n";
    const auto& matched = dice_by_m[cfg.train_ndirs];
    const double matched_mean =
        matched.empty() ? 0.0
                        : std::accumulate(matched.begin(), matched.end(), 0.0) / matched.size();
    for (const auto& [m, dices] : dice_by_m) {
        const double mean = std::accumulate(dices.begin(), dices.end(), 0.0) / dices.size();
        summary << cfg.train_ndirs << ',' << m << ',' << fmt(mean) << ','
                << fmt(matched_mean - mean) << '\n';
    }
}

}  // namespace

void run_experiment(const ExperimentConfig& cfg, const std::string& out_dir, EventLog* log) {
    std::filesystem::create_directories(out_dir);
    const PhantomSpec spec = resolve_phantom(cfg);
    const GradientTable table = make_uniform_table(cfg.table_ndirs, cfg.table_b, cfg.table_nb0);
    const double t0 = now_ms();
    if (cfg.mode == "eval1") {
        run_eval1(cfg, spec, table, out_dir, log);
    } else if (cfg.mode == "eval3") {
        run_eval3(cfg, spec, table, out_dir, log);
    } else {
        throw ValidationError("unknown experiment mode: " + cfg.mode);
    }
    if (log) log->emit("experiment", now_ms() - t0, {{"mode", cfg.mode}});
}

}  // namespace dwiseg
