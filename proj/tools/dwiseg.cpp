// dwiseg: whole-brain anatomical segmentation directly from diffusion MRI,
// trained and verified at desk scale on built-in synthetic phantoms.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "dwiseg/dti.hpp"
#include "dwiseg/experiment.hpp"
#include "dwiseg/model_io.hpp"
#include "dwiseg/nifti.hpp"
#include "dwiseg/phantom.hpp"

namespace {

using namespace dwiseg;

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << text;
    if (!out) throw IoError("write failed: " + path);
}

void write_label_names(const LabelVolume& labels, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (const auto& [id, name] : labels.label_table) out << id << ' ' << name << '\n';
}

std::map<std::int32_t, std::string> read_label_names(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::map<std::int32_t, std::string> names;
    std::int32_t id;
    std::string name;
    while (in >> id >> name) names[id] = name;
    return names;
}

PhantomSpec load_phantom_spec(const std::string& arg) {
    if (arg == "default") return default_phantom_spec();
    if (arg == "tiny") return tiny_phantom_spec();
    return parse_phantom_spec_json(read_text_file(arg));
}

struct Cli {
    EventLog log{&std::cout};

    // ---- phantom -------------------------------------------------------------
    std::string phantom_spec = "default";
    std::string phantom_out;
    std::uint64_t phantom_seed = 0;
    bool phantom_seed_set = false;
    int phantom_ndirs = 90, phantom_nb0 = 9;
    double phantom_b = 1000.0;
    std::string dump_spec_path;

    int run_phantom() {
        const double t0 = now_ms();
        PhantomSpec spec = load_phantom_spec(phantom_spec);
        if (phantom_seed_set) spec.seed = phantom_seed;
        if (!dump_spec_path.empty()) write_text_file(dump_spec_path, phantom_spec_to_json(spec));
        std::filesystem::create_directories(phantom_out);
        const GradientTable table = make_uniform_table(phantom_ndirs, phantom_b, phantom_nb0);
        const LabelVolume labels = generate_labels(spec);
        const Volume dwi = simulate_dwi(labels, spec.tissues, table, spec.noise_sigma, spec.seed);
        write_labels(labels, phantom_out + "/labels.nii.gz");
        write_volume(dwi, phantom_out + "/dwi.nii.gz");
        write_gradient_table(table, phantom_out + "/bvals", phantom_out + "/bvecs");
        write_label_names(labels, phantom_out + "/labels.txt");
        log.emit("phantom", now_ms() - t0,
                 {{"out", phantom_out}, {"seed", std::to_string(spec.seed)}});
        return 0;
    }

    // ---- fit-tensor ----------------------------------------------------------
    std::string fit_dwi, fit_bvals, fit_bvecs, fit_mask, fit_out;
    double fit_shell = 0.0;
    int fit_ndirs = 0;

    int run_fit_tensor() {
        const double t0 = now_ms();
        Volume dwi = read_volume(fit_dwi);
        GradientTable table = read_gradient_table(fit_bvals, fit_bvecs);
        if (fit_ndirs > 0) {
            const double shell = fit_shell > 0 ? fit_shell : 1000.0;
            const auto keep = subset_with_b0(table, shell, static_cast<std::size_t>(fit_ndirs));
            std::tie(dwi, table) = extract_channels(dwi, table, keep);
        }
        LabelVolume mask = fit_mask.empty() ? full_mask(dwi) : read_labels(fit_mask);
        const TensorVolume tensor = fit_tensor(dwi, table, mask);
        std::filesystem::create_directories(fit_out);
        write_volume(tensor.components, fit_out + "/tensor.nii.gz");
        write_volume(tensor.s0, fit_out + "/s0.nii.gz");
        const EigenVolume eig = eigen_decompose(tensor);
        write_volume(fa_map(eig), fit_out + "/fa.nii.gz");
        write_volume(md_map(eig), fit_out + "/md.nii.gz");
        log.emit("fit_tensor", now_ms() - t0, {{"out", fit_out}});
        return 0;
    }

    // ---- build-input -----------------------------------------------------------
    std::string bi_dwi, bi_bvals, bi_bvecs, bi_kind = "b0_tensor", bi_out, bi_reuse;
    int bi_ndirs = 30;
    double bi_shell = 1000.0;

    int run_build_input() {
        const double t0 = now_ms();
        const Volume dwi = read_volume(bi_dwi);
        const GradientTable table = read_gradient_table(bi_bvals, bi_bvecs);
        RepresentationSpec spec;
        spec.kind = rep_kind_from_string(bi_kind);
        spec.ndirs = bi_ndirs;
        spec.shell_b = bi_shell;
        std::vector<ChannelScale> reuse;
        std::vector<std::string> reuse_names;
        const bool have_reuse = !bi_reuse.empty();
        if (have_reuse) {
            RepresentationSpec stored;
            parse_representation_manifest(read_text_file(bi_reuse), stored, reuse_names, reuse);
            spec = stored;
        }
        const Representation rep =
            build_representation(dwi, table, spec, have_reuse ? &reuse : nullptr);
        write_volume(rep.image, bi_out + ".rep.nii.gz");
        write_text_file(bi_out + ".manifest.json", representation_manifest_json(rep));
        log.emit("build_input", now_ms() - t0, {{"kind", to_string(spec.kind)}});
        return 0;
    }

    // ---- train -------------------------------------------------------------------
    std::string train_view = "axial", train_rep_dir, train_labels_dir, train_config,
                train_out_model, train_history;

    int run_train() {
        const double t0 = now_ms();
        const KeyValueConfig kv = train_config.empty() ? KeyValueConfig::parse_text("")
                                                       : KeyValueConfig::parse_file(train_config);
        TrainConfig tc;
        tc.initial_lr = kv.get_double("lr", tc.initial_lr);
        tc.lr_decay = kv.get_double("lr_decay", tc.lr_decay);
        tc.decay_every = kv.get_int("decay_every", tc.decay_every);
        tc.patience = kv.get_int("patience", tc.patience);
        tc.batch_size = kv.get_int("batch_size", tc.batch_size);
        tc.max_epochs = kv.get_int("epochs", tc.max_epochs);
        tc.momentum = kv.get_double("momentum", tc.momentum);
        tc.edge_gain = kv.get_double("edge_gain", tc.edge_gain);
        tc.context_k = kv.get_int("context_k", tc.context_k);
        tc.seed = kv.get_u64("seed", tc.seed);
        const int val_count = kv.get_int("val_count", 1);

        // Cases: <stem>.rep.nii.gz (+ .manifest.json) under --rep-dir, matched
        // with <stem>.labels.nii.gz under --labels; the lexicographically last
        // val_count stems become the validation split.
        std::vector<std::string> stems;
        for (const auto& entry : std::filesystem::directory_iterator(train_rep_dir)) {
            const std::string name = entry.path().filename().string();
            const std::string suffix = ".rep.nii.gz";
            if (name.size() > suffix.size() &&
                name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
                stems.push_back(name.substr(0, name.size() - suffix.size()));
        }
        std::sort(stems.begin(), stems.end());
        if (stems.size() < 2)
            throw ValidationError("need at least two cases under " + train_rep_dir);
        if (val_count < 1 || static_cast<std::size_t>(val_count) >= stems.size())
            throw ValidationError("val_count must leave at least one training case");

        RepresentationSpec rep_spec;
        std::vector<std::string> channel_names;
        std::vector<ChannelScale> scales;
        parse_representation_manifest(
            read_text_file(train_rep_dir + "/" + stems[0] + ".manifest.json"), rep_spec,
            channel_names, scales);

        std::vector<Volume> reps;
        std::vector<LabelVolume> labels;
        std::vector<Volume> weights;
        std::map<std::int32_t, std::size_t> counts;
        const std::size_t n_train_cases = stems.size() - static_cast<std::size_t>(val_count);
        for (std::size_t i = 0; i < stems.size(); ++i) {
            reps.push_back(read_volume(train_rep_dir + "/" + stems[i] + ".rep.nii.gz"));
            labels.push_back(read_labels(train_labels_dir + "/" + stems[i] + ".labels.nii.gz"));
            if (i < n_train_cases)
                for (const auto& [l, c] : label_counts(labels.back())) counts[l] += c;
        }
        const auto class_w = median_frequency_weights(counts);
        std::int32_t max_label = 0;
        for (const auto& [l, c] : counts) max_label = std::max(max_label, l);
        for (const auto& lv : labels) weights.push_back(weight_map(lv, class_w, tc.edge_gain));

        std::vector<const Volume*> tr_r, va_r, tr_w, va_w;
        std::vector<const LabelVolume*> tr_l, va_l;
        for (std::size_t i = 0; i < stems.size(); ++i) {
            const bool is_val = i >= n_train_cases;
            (is_val ? va_r : tr_r).push_back(&reps[i]);
            (is_val ? va_l : tr_l).push_back(&labels[i]);
            (is_val ? va_w : tr_w).push_back(&weights[i]);
        }
        const View view = view_from_string(train_view);
        SliceDataset train_ds(tr_r, tr_l, tr_w, view, tc.context_k);
        SliceDataset val_ds(va_r, va_l, va_w, view, tc.context_k);

        ArchSpec arch;
        arch.in_channels = train_ds.channels();
        arch.num_classes = max_label + 1;
        arch.depth = kv.get_int("depth", arch.depth);
        arch.filters = kv.get_ints("filters", arch.filters);
        arch.convs_per_block = kv.get_int("convs_per_block", arch.convs_per_block);
        arch.kernel = kv.get_int("kernel", arch.kernel);
        arch.seed = tc.seed;

        const TrainResult result = train_network(arch, tc, train_ds, val_ds);

        ModelFile model;
        model.arch = arch;
        model.view = view;
        model.label_table = labels[0].label_table;
        model.rep = rep_spec;
        model.channel_names = channel_names;
        model.scales = scales;
        model.context_k = tc.context_k;
        model.params = result.best_params;
        save_model(model, train_out_model);
        if (!train_history.empty()) write_history_csv(result.history, train_history);
        log.emit("train", now_ms() - t0,
                 {{"view", train_view},
                  {"epochs", std::to_string(result.epochs_run)},
                  {"best_epoch", std::to_string(result.best_epoch)}});
        return 0;
    }

    // ---- segment ---------------------------------------------------------------
    std::string seg_model_dir, seg_input, seg_bvals, seg_bvecs, seg_out, seg_prob_out,
                seg_resample_to;
    std::vector<double> seg_weights{0.4, 0.4, 0.2};

    int run_segment() {
        const double t0 = now_ms();
        std::array<ModelFile, 3> models = {load_model(seg_model_dir + "/axial.dwsegnet"),
                                           load_model(seg_model_dir + "/coronal.dwsegnet"),
                                           load_model(seg_model_dir + "/sagittal.dwsegnet")};
        const Volume dwi = read_volume(seg_input);
        const GradientTable table = read_gradient_table(seg_bvals, seg_bvecs);
        const Representation rep =
            build_representation(dwi, table, models[0].rep, &models[0].scales);
        if (seg_weights.size() != 3) throw ValidationError("--weights needs three values");
        SegmentationResult seg = segment_views(
            models, rep.image, {seg_weights[0], seg_weights[1], seg_weights[2]});
        if (!seg_resample_to.empty()) {
            const Volume target = read_volume(seg_resample_to);
            const LabelVolume resampled = resample_soft_labels(
                seg.probabilities, target.dims, target.affine, &models[0].label_table);
            write_labels(resampled, seg_out);
        } else {
            write_labels(seg.labels, seg_out);
        }
        if (!seg_prob_out.empty()) write_volume(seg.probabilities, seg_prob_out);
        log.emit("segment", now_ms() - t0, {{"out", seg_out}});
        return 0;
    }

    // ---- evaluate ---------------------------------------------------------------
    std::string eval_pred, eval_ref, eval_out, eval_names;

    int run_evaluate() {
        const double t0 = now_ms();
        LabelVolume pred = read_labels(eval_pred);
        LabelVolume ref = read_labels(eval_ref);
        if (!eval_names.empty()) {
            ref.label_table = read_label_names(eval_names);
            complete_label_table(ref);
        }
        const MetricReport report = evaluate_segmentation(pred, ref);
        write_report_csv(report, eval_out);
        log.emit("evaluate", now_ms() - t0,
                 {{"mean_dice", std::to_string(mean_dice_foreground(report))}});
        return 0;
    }

    // ---- compare-tracts ----------------------------------------------------------
    std::string ct_a, ct_b;
    double ct_threshold = 0.2;

    int run_compare_tracts() {
        const double t0 = now_ms();
        const Volume a = read_volume(ct_a);
        const Volume b = read_volume(ct_b);
        const auto d = compare_tracts(a, b, ct_threshold);
        if (!d) {
            std::cout << "hausdorff_mm=undefined\n";
        } else {
            std::cout << "hausdorff_mm=" << *d << "\n";
        }
        log.emit("compare_tracts", now_ms() - t0, {});
        return 0;
    }

    // ---- experiment ----------------------------------------------------------------
    std::string exp_config, exp_out;

    int run_experiment_cmd() {
        const ExperimentConfig cfg =
            experiment_config_from(KeyValueConfig::parse_file(exp_config));
        run_experiment(cfg, exp_out, &log);
        return 0;
    }
};

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Anatomical segmentation directly from diffusion-weighted MRI"};
    app.require_subcommand(1);

    Cli cli;
    int threads = 0;
    app.add_option("--threads", threads, "cap worker threads (default: hardware)");

    auto* phantom = app.add_subcommand("phantom", "generate a synthetic ground-truth phantom");
    phantom->add_option("--spec", cli.phantom_spec, "built-in name (default|tiny) or JSON path");
    phantom->add_option("--out-dir", cli.phantom_out)->required();
    auto* seed_opt = phantom->add_option("--seed", cli.phantom_seed, "override spec seed");
    phantom->add_option("--dirs", cli.phantom_ndirs, "gradient directions");
    phantom->add_option("--b", cli.phantom_b, "shell b-value (s/mm^2)");
    phantom->add_option("--nb0", cli.phantom_nb0, "interleaved b=0 images");
    phantom->add_option("--dump-spec", cli.dump_spec_path, "write the resolved spec JSON");
    phantom->callback([&] {
        cli.phantom_seed_set = seed_opt->count() > 0;
    });

    auto* fit = app.add_subcommand("fit-tensor", "per-voxel diffusion tensor fit");
    fit->add_option("--dwi", cli.fit_dwi)->required();
    fit->add_option("--bvals", cli.fit_bvals)->required();
    fit->add_option("--bvecs", cli.fit_bvecs)->required();
    fit->add_option("--mask", cli.fit_mask, "binary mask volume (default: all voxels)");
    fit->add_option("--shell", cli.fit_shell, "shell b-value for subset selection");
    fit->add_option("--ndirs", cli.fit_ndirs, "fit on an n-direction uniform subset");
    fit->add_option("--out", cli.fit_out)->required();

    auto* bi = app.add_subcommand("build-input", "build a network input representation");
    bi->add_option("--dwi", cli.bi_dwi)->required();
    bi->add_option("--bvals", cli.bi_bvals)->required();
    bi->add_option("--bvecs", cli.bi_bvecs)->required();
    bi->add_option("--kind", cli.bi_kind, "b0|b0_fa|b0_tensor|b0_dwi");
    bi->add_option("--ndirs", cli.bi_ndirs);
    bi->add_option("--shell", cli.bi_shell);
    bi->add_option("--reuse-manifest", cli.bi_reuse, "apply stored normalization parameters");
    bi->add_option("--out", cli.bi_out, "output stem (writes <stem>.rep.nii.gz + manifest)")
        ->required();

    auto* tr = app.add_subcommand("train", "train one view network");
    tr->add_option("--view", cli.train_view, "axial|coronal|sagittal")->required();
    tr->add_option("--rep-dir", cli.train_rep_dir)->required();
    tr->add_option("--labels", cli.train_labels_dir)->required();
    tr->add_option("--config", cli.train_config, "key = value training config");
    tr->add_option("--out-model", cli.train_out_model)->required();
    tr->add_option("--history", cli.train_history, "per-epoch CSV");

    auto* seg = app.add_subcommand("segment", "run 3 view networks + aggregation");
    seg->add_option("--model-dir", cli.seg_model_dir,
                    "directory with axial/coronal/sagittal.dwsegnet")
        ->required();
    seg->add_option("--input", cli.seg_input, "DWI volume")->required();
    seg->add_option("--bvals", cli.seg_bvals)->required();
    seg->add_option("--bvecs", cli.seg_bvecs)->required();
    seg->add_option("--out", cli.seg_out)->required();
    seg->add_option("--prob-out", cli.seg_prob_out, "write soft labels");
    seg->add_option("--resample-to", cli.seg_resample_to,
                    "resample soft labels onto this volume's grid");
    seg->add_option("--weights", cli.seg_weights, "view-aggregation weights")->expected(3);

    auto* ev = app.add_subcommand("evaluate", "Dice / Hausdorff report");
    ev->add_option("--pred", cli.eval_pred)->required();
    ev->add_option("--ref", cli.eval_ref)->required();
    ev->add_option("--out", cli.eval_out)->required();
    ev->add_option("--names", cli.eval_names, "label-name table (id name per line)");

    auto* ct = app.add_subcommand("compare-tracts", "thresholded tract distance");
    ct->add_option("--a", cli.ct_a)->required();
    ct->add_option("--b", cli.ct_b)->required();
    ct->add_option("--threshold", cli.ct_threshold, "fraction of each volume's maximum");

    auto* ex = app.add_subcommand("experiment", "desk-scale evaluation runner");
    ex->add_option("--config", cli.exp_config)->required();
    ex->add_option("--out", cli.exp_out)->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

#ifdef _OPENMP
    if (threads > 0) omp_set_num_threads(threads);
#endif

    try {
        if (app.got_subcommand(phantom)) return cli.run_phantom();
        if (app.got_subcommand(fit)) return cli.run_fit_tensor();
        if (app.got_subcommand(bi)) return cli.run_build_input();
        if (app.got_subcommand(tr)) return cli.run_train();
        if (app.got_subcommand(seg)) return cli.run_segment();
        if (app.got_subcommand(ev)) return cli.run_evaluate();
        if (app.got_subcommand(ct)) return cli.run_compare_tracts();
        if (app.got_subcommand(ex)) return cli.run_experiment_cmd();
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 0;
}
