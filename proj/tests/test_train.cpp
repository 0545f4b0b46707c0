#include <doctest.h>

#include <fstream>
#include <random>

#include "dwiseg/phantom.hpp"
#include "dwiseg/train.hpp"
#include "test_helpers.hpp"

using namespace dwiseg;

TEST_CASE("median frequency class weights: hand cases") {
    LabelVolume lv = make_label_volume({160, 1, 1});
    // counts A(1):100, B(2):50, C(3):10 -> weights 0.5, 1, 5
    for (int i = 0; i < 100; ++i) lv.at(i, 0, 0) = 1;
    for (int i = 100; i < 150; ++i) lv.at(i, 0, 0) = 2;
    for (int i = 150; i < 160; ++i) lv.at(i, 0, 0) = 3;
    complete_label_table(lv);
    const auto w = class_weights(lv);
    CHECK(w.at(1) == doctest::Approx(0.5));
    CHECK(w.at(2) == doctest::Approx(1.0));
    CHECK(w.at(3) == doctest::Approx(5.0));
    CHECK(w.count(4) == 0);  // absent class: no entry (weight 0)
}

TEST_CASE("equal counts give unit weights (odd and even class counts)") {
    LabelVolume lv = make_label_volume({30, 1, 1});
    for (int i = 0; i < 30; ++i) lv.at(i, 0, 0) = i / 10;  // 3 classes x 10
    complete_label_table(lv);
    for (const auto& [label, w] : class_weights(lv)) CHECK(w == doctest::Approx(1.0));

    LabelVolume two = make_label_volume({20, 1, 1});
    for (int i = 0; i < 20; ++i) two.at(i, 0, 0) = i / 10;  // 2 classes x 10
    complete_label_table(two);
    // Even count: median = mean of the two middle values.
    for (const auto& [label, w] : class_weights(two)) CHECK(w == doctest::Approx(1.0));
}

TEST_CASE("empty label volume is a stats error") {
    std::map<std::int32_t, std::size_t> empty;
    CHECK_THROWS_AS(median_frequency_weights(empty), ValidationError);
}

TEST_CASE("edge weights flag exactly the 6-neighbor boundary voxels") {
    LabelVolume lv = make_label_volume({8, 6, 5});
    CHECK(edge_weights(lv, 5.0).data == std::vector<float>(8 * 6 * 5, 0.0f));  // uniform

    // Two half-volumes split at x = 4.
    for (int z = 0; z < 5; ++z)
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 8; ++x) lv.at(x, y, z) = x < 4 ? 1 : 2;
    complete_label_table(lv);
    const Volume ew = edge_weights(lv, 5.0);
    // Brute-force neighbor-scan oracle.
    for (int z = 0; z < 5; ++z)
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 8; ++x) {
                bool edge = false;
                const int dirs[6][3] = {{1, 0, 0},  {-1, 0, 0}, {0, 1, 0},
                                        {0, -1, 0}, {0, 0, 1},  {0, 0, -1}};
                for (const auto& d : dirs) {
                    const int nx = x + d[0], ny = y + d[1], nz = z + d[2];
                    if (nx < 0 || nx >= 8 || ny < 0 || ny >= 6 || nz < 0 || nz >= 5) continue;
                    edge |= lv.at(nx, ny, nz) != lv.at(x, y, z);
                }
                CHECK(ew.at(x, y, z) == (edge ? 5.0f : 0.0f));
                CHECK((ew.at(x, y, z) != 0.0f) == (x == 3 || x == 4));
            }

    // Zero gain degenerates to the class term only.
    const auto cw = class_weights(lv);
    const Volume wm = weight_map(lv, cw, 0.0);
    for (std::size_t v = 0; v < lv.voxels(); ++v)
        CHECK(wm.data[v] == doctest::Approx(cw.at(lv.labels[v])));
}

namespace {

template <typename T>
Tensor4<T> random_probs(int n, int c, int h, int w, std::uint64_t seed) {
    Tensor4<T> p(n, c, h, w);
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.05, 1.0);
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    for (int i = 0; i < n; ++i)
        for (std::size_t q = 0; q < plane; ++q) {
            double total = 0;
            for (int j = 0; j < c; ++j) {
                const double v = u(rng);
                p.v[p.idx(i, j, 0, 0) + q] = static_cast<T>(v);
                total += v;
            }
            for (int j = 0; j < c; ++j)
                p.v[p.idx(i, j, 0, 0) + q] = static_cast<T>(p.v[p.idx(i, j, 0, 0) + q] / total);
        }
    return p;
}

}  // namespace

TEST_CASE("combined loss: perfect one-hot prediction gives -1") {
    const int c = 4;
    Tensor4<double> probs(1, c, 4, 4);
    Tensor4<std::int32_t> targets(1, 1, 4, 4);
    Tensor4<double> weights(1, 1, 4, 4);
    for (int q = 0; q < 16; ++q) {
        targets.v[q] = 2;  // single class present
        weights.v[q] = 1.0;
        probs.v[probs.idx(0, 2, 0, 0) + q] = 1.0;
    }
    const auto res = combined_loss(probs, targets, weights);
    CHECK(res.logistic == doctest::Approx(0.0));
    CHECK(res.dice == doctest::Approx(1.0));
    CHECK(res.value == doctest::Approx(-1.0));
}

TEST_CASE("combined loss: uniform prediction logistic term is n log C") {
    const int c = 5, n_pix = 6 * 7;
    Tensor4<double> probs(1, c, 6, 7);
    Tensor4<std::int32_t> targets(1, 1, 6, 7);
    Tensor4<double> weights(1, 1, 6, 7);
    std::mt19937_64 rng(2);
    for (int q = 0; q < n_pix; ++q) {
        targets.v[q] = static_cast<std::int32_t>(rng() % c);
        weights.v[q] = 1.0;
        for (int j = 0; j < c; ++j) probs.v[probs.idx(0, j, 0, 0) + q] = 1.0 / c;
    }
    const auto res = combined_loss(probs, targets, weights);
    CHECK(res.logistic == doctest::Approx(n_pix * std::log(double(c))).epsilon(1e-12));
}

TEST_CASE("combined loss gradient matches central finite differences") {
    // A small batch keeps the loss magnitude low enough for the FD roundoff
    // (eps * |L| / h) to stay below 1e-6 of the smallest gradients.
    Tensor4<double> probs = random_probs<double>(1, 3, 4, 4, 77);
    Tensor4<std::int32_t> targets(1, 1, 4, 4);
    Tensor4<double> weights(1, 1, 4, 4);
    std::mt19937_64 rng(78);
    std::uniform_real_distribution<double> uw(0.5, 4.0);
    for (std::size_t q = 0; q < targets.v.size(); ++q) {
        targets.v[q] = static_cast<std::int32_t>(rng() % 3);
        weights.v[q] = uw(rng);
    }
    const auto res = combined_loss(probs, targets, weights);
    const double h = 1e-5;
    double max_rel = 0;
    for (std::size_t q = 0; q < probs.v.size(); ++q) {
        const double orig = probs.v[q];
        probs.v[q] = orig + h;
        const double lp = combined_loss(probs, targets, weights).value;
        probs.v[q] = orig - h;
        const double lm = combined_loss(probs, targets, weights).value;
        probs.v[q] = orig;
        const double fd = (lp - lm) / (2 * h);
        const double an = res.dprobs.v[q];
        if (std::abs(fd) < 1e-9 && std::abs(an) < 1e-9) continue;
        max_rel = std::max(max_rel, std::abs(fd - an) / std::max(std::abs(fd), std::abs(an)));
    }
    CHECK(max_rel < 1e-6);
}

TEST_CASE("scaling weights scales the logistic term and not the dice term") {
    Tensor4<double> probs = random_probs<double>(1, 3, 6, 6, 5);
    Tensor4<std::int32_t> targets(1, 1, 6, 6);
    Tensor4<double> weights(1, 1, 6, 6);
    std::mt19937_64 rng(6);
    for (std::size_t q = 0; q < targets.v.size(); ++q) {
        targets.v[q] = static_cast<std::int32_t>(rng() % 3);
        weights.v[q] = 1.0 + 0.1 * static_cast<double>(rng() % 10);
    }
    const auto base = combined_loss(probs, targets, weights);
    const double alpha = 3.5;
    for (auto& w : weights.v) w *= alpha;
    const auto scaled = combined_loss(probs, targets, weights);
    CHECK(scaled.logistic == doctest::Approx(alpha * base.logistic).epsilon(1e-12));
    CHECK(scaled.dice == doctest::Approx(base.dice).epsilon(1e-12));
}

TEST_CASE("loss is minimized at the one-hot correct prediction") {
    // Random perturbations away from one-hot never decrease the loss.
    Tensor4<std::int32_t> targets(1, 1, 4, 4);
    Tensor4<double> weights(1, 1, 4, 4);
    std::mt19937_64 rng(12);
    for (std::size_t q = 0; q < targets.v.size(); ++q) {
        targets.v[q] = static_cast<std::int32_t>(rng() % 3);
        weights.v[q] = 1.0;
    }
    Tensor4<double> ideal(1, 3, 4, 4);
    for (int q = 0; q < 16; ++q) ideal.v[ideal.idx(0, targets.v[q], 0, 0) + q] = 1.0;
    const double best = combined_loss(ideal, targets, weights).value;
    CHECK(best == doctest::Approx(-1.0));
    for (int trial = 0; trial < 30; ++trial) {
        Tensor4<double> p = random_probs<double>(1, 3, 4, 4, 100 + trial);
        CHECK(combined_loss(p, targets, weights).value >= best - 1e-12);
    }
}

TEST_CASE("absent classes are skipped by the dice reduction") {
    Tensor4<double> probs = random_probs<double>(1, 6, 4, 4, 8);
    Tensor4<std::int32_t> targets(1, 1, 4, 4);
    Tensor4<double> weights(1, 1, 4, 4);
    for (std::size_t q = 0; q < targets.v.size(); ++q) {
        targets.v[q] = static_cast<std::int32_t>(q % 2);  // only classes 0 and 1 present
        weights.v[q] = 1.0;
    }
    const auto res = combined_loss(probs, targets, weights);
    // Oracle: dice over the two present classes only.
    double expect = 0;
    const std::size_t nvox = 16;
    for (int cls = 0; cls < 2; ++cls) {
        double inter = 0, psum = 0;
        std::size_t gsum = 0;
        for (std::size_t q = 0; q < nvox; ++q) {
            const double p = probs.v[probs.idx(0, cls, 0, 0) + q];
            psum += p * p;
            if (targets.v[q] == cls) {
                inter += p;
                ++gsum;
            }
        }
        for (int other = 2; other < 6; ++other) {
            const double p = probs.v[probs.idx(0, other, 0, 0)];
            (void)p;
        }
        expect += 2.0 * inter / (psum + gsum);
    }
    CHECK(res.dice == doctest::Approx(expect / 2.0).epsilon(1e-12));
}

TEST_CASE("learning rate schedule: 0.01 * 0.2^(e/10)") {
    TrainConfig cfg;
    CHECK(lr_for_epoch(cfg, 0) == doctest::Approx(0.01));
    CHECK(lr_for_epoch(cfg, 9) == doctest::Approx(0.01));
    CHECK(lr_for_epoch(cfg, 10) == doctest::Approx(0.002));
    CHECK(lr_for_epoch(cfg, 19) == doctest::Approx(0.002));
    CHECK(lr_for_epoch(cfg, 20) == doctest::Approx(0.0004));
}

TEST_CASE("early stopping: improvement resets, plateau of 15 stops at best+15") {
    // Scripted validation losses: improve through epoch 4, flat afterwards.
    EarlyStopper stopper(15, 1e-6);
    int stop_epoch = -1;
    for (int e = 0; e < 100; ++e) {
        const double val = e <= 4 ? 1.0 - 0.1 * e : 0.6;
        stopper.observe(val);
        if (stopper.should_stop()) {
            stop_epoch = e;
            break;
        }
    }
    CHECK(stop_epoch == 4 + 15);
    CHECK(stopper.best_epoch() == 4);

    // Always improving: never stops.
    EarlyStopper improving(15, 1e-6);
    for (int e = 0; e < 200; ++e) {
        improving.observe(1.0 / (1.0 + e));
        CHECK_FALSE(improving.should_stop());
    }

    // Improvements below the threshold do not count.
    EarlyStopper eps(3, 1e-6);
    eps.observe(1.0);
    eps.observe(1.0 - 1e-9);
    eps.observe(1.0 - 2e-9);
    eps.observe(1.0 - 3e-9);
    CHECK(eps.should_stop());
    CHECK(eps.best_epoch() == 0);
}

TEST_CASE("tiny training run is reproducible and writes history") {
    PhantomSpec spec = tiny_phantom_spec();
    spec.noise_sigma = 30.0;
    const GradientTable table = make_uniform_table(12, 1000, 2);
    const auto make_case = [&](std::uint64_t seed) {
        PhantomSpec s = spec;
        s.seed = seed;
        LabelVolume labels = generate_labels(s);
        Volume dwi = simulate_dwi(labels, s.tissues, table, s.noise_sigma, seed);
        Representation rep = build_representation(dwi, table, {RepKind::B0Only, 0, 1000.0});
        Volume weights = weight_map(labels, class_weights(labels), 5.0);
        return std::make_tuple(std::move(rep.image), std::move(labels), std::move(weights));
    };
    auto [r1, l1, w1] = make_case(1);
    auto [r2, l2, w2] = make_case(2);

    SliceDataset train({&r1}, {&l1}, {&w1}, View::Axial, 1);
    SliceDataset val({&r2}, {&l2}, {&w2}, View::Axial, 1);

    ArchSpec arch;
    arch.in_channels = train.channels();
    arch.num_classes = 4;
    arch.depth = 2;
    arch.filters = {6, 8};
    arch.convs_per_block = 2;
    arch.kernel = 3;
    arch.seed = 11;
    TrainConfig cfg;
    cfg.max_epochs = 3;
    cfg.batch_size = 6;
    cfg.seed = 11;

    const TrainResult a = train_network(arch, cfg, train, val);
    const TrainResult b = train_network(arch, cfg, train, val);
    REQUIRE(a.history.size() == b.history.size());
    for (std::size_t e = 0; e < a.history.size(); ++e) {
        CHECK(a.history[e].train_loss == b.history[e].train_loss);
        CHECK(a.history[e].val_loss == b.history[e].val_loss);
    }
    auto pa = collect_params(const_cast<NetParams<float>&>(a.best_params));
    auto pb = collect_params(const_cast<NetParams<float>&>(b.best_params));
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(*pa[i].data == *pb[i].data);

    // Loss actually decreases on this easy phantom.
    CHECK(a.history.back().train_loss < a.history.front().train_loss);

    const std::string csv = test_path("history.csv");
    write_history_csv(a.history, csv);
    std::ifstream in(csv);
    std::string header;
    std::getline(in, header);
    CHECK(header == "epoch,lr,train_loss,val_loss");
    int rows = 0;
    for (std::string line; std::getline(in, line);) rows += !line.empty();
    CHECK(rows == static_cast<int>(a.history.size()));
}
