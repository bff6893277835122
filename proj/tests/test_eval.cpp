#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "gals/data.hpp"
#include "gals/errors.hpp"
#include "gals/eval.hpp"
#include "gals/grounder.hpp"
#include "gals/nn.hpp"
#include "gals/rng.hpp"
#include "gals/tensor.hpp"

using namespace gals;

namespace {

// gender-bias evaluation rows as (pred A, pred B, pred Neutral) fractions
std::array<double, 3> row(double a, double b, double n) {
    double s = a + b + n;
    return {a / s, b / s, n / s};
}

GridMap make_map(int h, int w, const std::vector<double>& v) {
    GridMap m;
    m.h = h;
    m.w = w;
    m.v = v;
    return m;
}

// score = sum_j w_j * masked_pixel_j over channel 0, a linear probe whose
// RISE limit has a closed form
MaskScorer linear_scorer(std::vector<double> weights) {
    return [weights](const Tensor& masked) {
        double s = 0.0;
        const int hw = masked.dim(2) * masked.dim(3);
        for (int i = 0; i < hw; ++i) s += weights[static_cast<size_t>(i)] * masked.data()[i];
        return s;
    };
}

Tensor ones_image(int c, int h, int w) { return Tensor::full({1, c, h, w}, 1.0); }

}  // namespace

TEST_CASE("group accuracy: hand-built four-group report") {
    // groups with accuracies 1.0, 0.5, 0.5, 1.0
    std::vector<int> labels = {0, 0, 1, 1, 0, 0, 1, 1};
    std::vector<int> preds = {0, 0, 1, 0, 1, 0, 1, 1};
    std::vector<int> groups = {0, 0, 1, 1, 2, 2, 3, 3};
    GroupReport r = group_accuracy(preds, labels, groups);
    REQUIRE(r.per_group.size() == 4);
    CHECK(r.per_group[0] == 1.0);
    CHECK(r.per_group[1] == 0.5);
    CHECK(r.per_group[2] == 0.5);
    CHECK(r.per_group[3] == 1.0);
    CHECK(r.mean == 0.75);
    CHECK(r.worst == 0.5);
    CHECK(r.sizes == std::vector<int>{2, 2, 2, 2});
}

TEST_CASE("group accuracy: all correct") {
    std::vector<int> labels = {0, 1, 0, 1};
    GroupReport r = group_accuracy(labels, labels, {0, 0, 1, 1});
    CHECK(r.mean == 1.0);
    CHECK(r.worst == 1.0);
}

TEST_CASE("group accuracy: per-group mean differs from plain accuracy on skewed sizes") {
    // group 0: 8 samples all correct; group 1: 2 samples none correct.
    // plain accuracy 0.8, per-group mean 0.5
    std::vector<int> labels(10, 0), preds(10, 0), groups(10, 0);
    preds[8] = preds[9] = 1;
    groups[8] = groups[9] = 1;
    GroupReport r = group_accuracy(preds, labels, groups);
    int plain = 0;
    for (size_t i = 0; i < labels.size(); ++i) plain += preds[i] == labels[i];
    CHECK(static_cast<double>(plain) / 10.0 == 0.8);
    CHECK(r.mean == 0.5);
    CHECK(r.worst == 0.0);
}

TEST_CASE("group accuracy: rejects gaps, negatives and length mismatches") {
    CHECK_THROWS_AS(group_accuracy({0, 1}, {0, 1}, {0, 2}), ConfigError);
    CHECK_THROWS_AS(group_accuracy({0, 1}, {0, 1}, {0, -1}), ConfigError);
    CHECK_THROWS_AS(group_accuracy({0, 1}, {0}, {0, 1}), ConfigError);
    CHECK_THROWS_AS(group_accuracy({}, {}, {}), ConfigError);
}

TEST_CASE("group accuracy: invariant under group relabeling") {
    Rng rng(11);
    std::vector<int> preds, labels, groups;
    for (int i = 0; i < 60; ++i) {
        preds.push_back(rng.uniform_int(3));
        labels.push_back(rng.uniform_int(3));
        groups.push_back(rng.uniform_int(4));
    }
    for (int g = 0; g < 4; ++g) groups[static_cast<size_t>(g)] = g;  // keep all nonempty
    const std::vector<int> perm = {2, 0, 3, 1};
    std::vector<int> relabeled;
    for (int g : groups) relabeled.push_back(perm[static_cast<size_t>(g)]);
    GroupReport a = group_accuracy(preds, labels, groups);
    GroupReport b = group_accuracy(preds, labels, relabeled);
    CHECK(a.mean == doctest::Approx(b.mean).epsilon(1e-12));
    CHECK(a.worst == b.worst);
    for (int g = 0; g < 4; ++g) {
        CHECK(a.per_group[static_cast<size_t>(g)] ==
              b.per_group[static_cast<size_t>(perm[static_cast<size_t>(g)])]);
        CHECK(a.sizes[static_cast<size_t>(g)] ==
              b.sizes[static_cast<size_t>(perm[static_cast<size_t>(g)])]);
    }
}

TEST_CASE("ratio delta: published gender-bias rows") {
    // counts pooled over both true classes: |1 - predB/predA|
    CHECK(ratio_delta({83.6, 6.2, 10.2}, {28.6, 66.8, 4.6}) ==
          doctest::Approx(0.349376).epsilon(1e-5));
    CHECK(ratio_delta({79.8, 11.8, 8.4}, {22.6, 74.2, 3.2}) ==
          doctest::Approx(0.160156).epsilon(1e-5));
    CHECK(ratio_delta({84.8, 4.6, 10.6}, {25.4, 68.8, 5.8}) ==
          doctest::Approx(0.333938).epsilon(1e-5));
    CHECK(ratio_delta({80.2, 11.2, 8.6}, {28.6, 68.0, 3.4}) ==
          doctest::Approx(0.272059).epsilon(1e-5));
}

TEST_CASE("ratio delta: zero for balanced predictions, scale invariant") {
    CHECK(ratio_delta({10, 4, 1}, {4, 10, 1}) == 0.0);
    double d1 = ratio_delta({8, 3, 2}, {5, 6, 1});
    double d2 = ratio_delta({16, 6, 4}, {10, 12, 2});
    CHECK(d1 == doctest::Approx(d2).epsilon(1e-12));
}

TEST_CASE("ratio delta: rejects zero predicted-A and negative counts") {
    CHECK_THROWS_AS(ratio_delta({0, 5, 1}, {0, 7, 2}), ConfigError);
    CHECK_THROWS_AS(ratio_delta({-1, 5, 1}, {3, 7, 2}), ConfigError);
}

TEST_CASE("outcome divergence: published gender-bias rows") {
    CHECK(outcome_divergence(row(83.6, 6.2, 10.2), row(28.6, 66.8, 4.6)) ==
          doctest::Approx(0.070988).epsilon(1e-4));
    CHECK(outcome_divergence(row(79.8, 11.8, 8.4), row(22.6, 74.2, 3.2)) ==
          doctest::Approx(0.021888).epsilon(1e-4));
    CHECK(outcome_divergence(row(84.8, 4.6, 10.6), row(25.4, 68.8, 5.8)) ==
          doctest::Approx(0.068446).epsilon(1e-4));
    CHECK(outcome_divergence(row(80.2, 11.2, 8.6), row(28.6, 68.0, 3.4)) ==
          doctest::Approx(0.040414).epsilon(1e-4));
}

TEST_CASE("outcome divergence: exact identities") {
    // both classes recognized with the same outcome profile: divergence 0
    CHECK(outcome_divergence({0.8, 0.15, 0.05}, {0.15, 0.8, 0.05}) == 0.0);
    // A always right, B always misread as A: the base-2 bound 1 exactly
    CHECK(outcome_divergence({1, 0, 0}, {1, 0, 0}) == 1.0);
    // hand-computed asymmetric case: p=(3/4,1/4,0), q=(1/4,3/4,0) aligned to
    // (3/4,1/4,0) vs (3/4,1/4,0) -> 0; flip q to (1/4,3/4,0) aligned gives
    // JSD(p, reversed) = log2(3)*3/4 - 1
    CHECK(outcome_divergence({0.75, 0.25, 0}, {0.75, 0.25, 0}) ==
          doctest::Approx(std::log2(3.0) * 0.75 - 1.0).epsilon(1e-12));
}

TEST_CASE("outcome divergence: bounded, symmetric, rejects bad rows") {
    Rng rng(5);
    for (int t = 0; t < 100; ++t) {
        std::array<double, 3> a{}, b{};
        double sa = 0, sb = 0;
        for (int i = 0; i < 3; ++i) {
            a[static_cast<size_t>(i)] = rng.uniform() + 1e-3;
            b[static_cast<size_t>(i)] = rng.uniform() + 1e-3;
            sa += a[static_cast<size_t>(i)];
            sb += b[static_cast<size_t>(i)];
        }
        for (int i = 0; i < 3; ++i) {
            a[static_cast<size_t>(i)] /= sa;
            b[static_cast<size_t>(i)] /= sb;
        }
        double d = outcome_divergence(a, b);
        CHECK(d >= 0.0);
        CHECK(d <= 1.0);
        CHECK(d == doctest::Approx(outcome_divergence(b, a)).epsilon(1e-12));
    }
    CHECK_THROWS_AS(outcome_divergence({0.5, 0.5, 0.5}, {1, 0, 0}), ConfigError);
    CHECK_THROWS_AS(outcome_divergence({1.2, -0.2, 0}, {1, 0, 0}), ConfigError);
}

TEST_CASE("fairness from predictions: perfect and degenerate classifiers") {
    std::vector<int> labels = {0, 0, 1, 1, 2};
    FairnessReport r = fairness_from_predictions(labels, labels);
    CHECK(r.a_row == std::array<double, 3>{1, 0, 0});
    CHECK(r.b_row == std::array<double, 3>{0, 1, 0});
    CHECK(r.ratio_delta == 0.0);
    CHECK(r.outcome_divergence == 0.0);

    std::vector<int> all_neutral(labels.size(), 2);
    CHECK_THROWS_AS(fairness_from_predictions(all_neutral, labels), ConfigError);
    CHECK_THROWS_AS(fairness_from_predictions({0, 1}, {1, 1}), ConfigError);  // no A samples
    CHECK_THROWS_AS(fairness_from_predictions({3, 0}, {0, 1}), ConfigError);
    CHECK_THROWS_AS(fairness_from_predictions({0}, {0, 1}), ConfigError);
}

TEST_CASE("fairness from predictions: hand-counted rows and metrics") {
    // A-labeled: 4 predicted A, 1 predicted B; B-labeled: 1 A, 3 B, 1 Neutral
    std::vector<int> labels = {0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
    std::vector<int> preds = {0, 0, 0, 0, 1, 0, 1, 1, 1, 2};
    FairnessReport r = fairness_from_predictions(preds, labels);
    CHECK(r.a_row == std::array<double, 3>{0.8, 0.2, 0.0});
    CHECK(r.b_row == std::array<double, 3>{0.2, 0.6, 0.2});
    CHECK(r.ratio_delta == doctest::Approx(std::abs(1.0 - 0.8 / 1.0)).epsilon(1e-12));
    CHECK(r.outcome_divergence ==
          doctest::Approx(outcome_divergence({0.8, 0.2, 0.0}, {0.2, 0.6, 0.2})).epsilon(1e-15));
    double rowsum_a = r.a_row[0] + r.a_row[1] + r.a_row[2];
    double rowsum_b = r.b_row[0] + r.b_row[1] + r.b_row[2];
    CHECK(rowsum_a == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(rowsum_b == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("predict and evaluate_groups agree with single-sample forwards") {
    BiasGenConfig cfg;
    cfg.rho = 0.5;
    cfg.train_per_class = 4;
    cfg.val_per_group = 2;
    cfg.test_per_group = 2;
    cfg.seed = 3;
    DatasetSplit data = generate_biased_shapes(cfg);
    NetSpec spec;
    spec.classes = data.classes;
    ConvNet net = init_parameters(spec, 21);

    std::vector<int> preds = predict(net, data.val);
    REQUIRE(preds.size() == data.val.size());
    CHECK(predict(net, data.val) == preds);  // deterministic
    for (size_t i = 0; i < std::min<size_t>(3, data.val.size()); ++i) {
        Tape tape;
        Tensor logits = forward(net, tape, image_tensor(data.val[i], spec.in_h, spec.in_w));
        int arg = 0;
        for (int c = 1; c < spec.classes; ++c)
            if (logits.data()[c] > logits.data()[arg]) arg = c;
        CHECK(preds[i] == arg);
    }

    GroupReport gr = evaluate_groups(net, data.val);
    std::vector<int> labels, groups;
    for (const Sample& s : data.val) {
        labels.push_back(s.label);
        groups.push_back(s.group);
    }
    GroupReport manual = group_accuracy(preds, labels, groups);
    CHECK(gr.per_group == manual.per_group);
    CHECK(gr.mean == manual.mean);
    CHECK(gr.worst == manual.worst);
}

TEST_CASE("fairness_eval matches the prediction path on a 3-class analog") {
    BiasGenConfig cfg = preset_config("apparent-analog");
    cfg.train_a = 12;
    cfg.train_b = 8;
    cfg.train_neutral = 4;
    cfg.eval_per_class = 6;
    cfg.seed = 9;
    DatasetSplit data = generate_apparent_attribute_analog(cfg);
    REQUIRE(data.classes == 3);
    ConvNet net = init_parameters(NetSpec{3, data.h, data.w, 3, {{8, 3}, {16, 3}, {32, 3}}}, 4);

    std::vector<int> labels;
    for (const Sample& s : data.test) labels.push_back(s.label);
    bool threw_eval = false, threw_manual = false;
    FairnessReport via_eval{}, via_manual{};
    try {
        via_eval = fairness_eval(net, data.test);
    } catch (const ConfigError&) {
        threw_eval = true;
    }
    try {
        via_manual = fairness_from_predictions(predict(net, data.test), labels);
    } catch (const ConfigError&) {
        threw_manual = true;
    }
    CHECK(threw_eval == threw_manual);
    if (!threw_eval) {
        CHECK(via_eval.a_row == via_manual.a_row);
        CHECK(via_eval.b_row == via_manual.b_row);
        CHECK(via_eval.a_row[0] + via_eval.a_row[1] + via_eval.a_row[2] ==
              doctest::Approx(1.0).epsilon(1e-9));
    }

    ConvNet two_class = init_parameters(NetSpec{}, 4);
    CHECK_THROWS_AS(fairness_eval(two_class, data.test), ConfigError);
}

TEST_CASE("rise: exhaustive 2x2 masks reproduce the closed-form expectation") {
    // linear scorer w = (1, 2, 3, 4), keep-prob 1/2: every 16-mask weight is
    // 1/16, so saliency_j = (sum over masks containing j of the score) / 8,
    // which equals w_j + p * sum_{k != j} w_k = (5.5, 6, 6.5, 7)
    RiseConfig cfg;
    cfg.grid = 2;
    cfg.exhaustive = true;
    GridMap sal = rise_saliency(linear_scorer({1, 2, 3, 4}), ones_image(1, 2, 2), cfg);
    REQUIRE(sal.v.size() == 4);
    CHECK(sal.v[0] == 5.5);
    CHECK(sal.v[1] == 6.0);
    CHECK(sal.v[2] == 6.5);
    CHECK(sal.v[3] == 7.0);

    // brute-force check with independent mask enumeration
    std::vector<double> w = {1, 2, 3, 4};
    for (int j = 0; j < 4; ++j) {
        double acc = 0.0;
        for (int bits = 0; bits < 16; ++bits) {
            if (!((bits >> j) & 1)) continue;
            double score = 0.0;
            for (int k = 0; k < 4; ++k)
                if ((bits >> k) & 1) score += w[static_cast<size_t>(k)];
            acc += score / 16.0;
        }
        CHECK(sal.v[static_cast<size_t>(j)] == acc / 0.5);
    }
}

TEST_CASE("rise: constant scorer flattens toward the constant as N grows") {
    MaskScorer constant = [](const Tensor&) { return 7.0; };
    Tensor img = ones_image(1, 8, 8);
    auto mean_abs_dev = [&](int n, uint64_t seed) {
        RiseConfig cfg;
        cfg.n_masks = n;
        cfg.seed = seed;
        GridMap sal = rise_saliency(constant, img, cfg);
        double dev = 0.0;
        for (double v : sal.v) dev += std::abs(v - 7.0);
        return dev / static_cast<double>(sal.v.size());
    };
    double coarse = mean_abs_dev(100, 1);
    double fine = mean_abs_dev(1600, 1);
    CHECK(fine < coarse);
    CHECK(fine < 0.2);
}

TEST_CASE("rise: deterministic per seed") {
    MaskScorer scorer = linear_scorer([] {
        std::vector<double> w(64);
        for (size_t i = 0; i < w.size(); ++i) w[i] = 0.1 * static_cast<double>(i) - 2.0;
        return w;
    }());
    Tensor img = ones_image(1, 8, 8);
    RiseConfig cfg;
    cfg.n_masks = 40;
    cfg.seed = 12;
    GridMap a = rise_saliency(scorer, img, cfg);
    GridMap b = rise_saliency(scorer, img, cfg);
    CHECK(a.v == b.v);
    cfg.seed = 13;
    GridMap c = rise_saliency(scorer, img, cfg);
    CHECK(a.v != c.v);
}

TEST_CASE("rise: sampling error follows the Monte Carlo law") {
    // variance of the saliency estimate scales as 1/N: the log-log slope of
    // variance against mask count should sit near -1
    MaskScorer scorer = linear_scorer([] {
        std::vector<double> w(64);
        for (size_t i = 0; i < w.size(); ++i) w[i] = 1.0 + 0.1 * static_cast<double>(i);
        return w;
    }());
    Tensor img = ones_image(1, 8, 8);
    const std::vector<int> sizes = {64, 128, 256, 512};
    const int repeats = 48;
    std::vector<double> log_var;
    for (int n : sizes) {
        std::vector<std::vector<double>> maps;
        for (int r = 0; r < repeats; ++r) {
            RiseConfig cfg;
            cfg.n_masks = n;
            cfg.seed = 1000 + static_cast<uint64_t>(r) * 131 + static_cast<uint64_t>(n);
            maps.push_back(rise_saliency(scorer, img, cfg).v);
        }
        double var_sum = 0.0;
        const size_t pixels = maps[0].size();
        for (size_t j = 0; j < pixels; ++j) {
            double mean = 0.0;
            for (int r = 0; r < repeats; ++r) mean += maps[static_cast<size_t>(r)][j];
            mean /= repeats;
            double var = 0.0;
            for (int r = 0; r < repeats; ++r) {
                double d = maps[static_cast<size_t>(r)][j] - mean;
                var += d * d;
            }
            var_sum += var / (repeats - 1);
        }
        log_var.push_back(std::log2(var_sum / static_cast<double>(pixels)));
    }
    // least squares slope of log2(var) against log2(N)
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < sizes.size(); ++i) {
        double x = std::log2(static_cast<double>(sizes[i]));
        sx += x;
        sy += log_var[i];
        sxx += x * x;
        sxy += x * log_var[i];
    }
    double k = static_cast<double>(sizes.size());
    double slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
    CHECK(slope > -1.2);
    CHECK(slope < -0.8);
}

TEST_CASE("rise: configuration and input validation") {
    MaskScorer ok = [](const Tensor&) { return 1.0; };
    Tensor img = ones_image(1, 4, 4);
    RiseConfig cfg;
    cfg.n_masks = 0;
    CHECK_THROWS_AS(rise_saliency(ok, img, cfg), ConfigError);
    cfg = RiseConfig{};
    cfg.grid = 0;
    CHECK_THROWS_AS(rise_saliency(ok, img, cfg), ConfigError);
    cfg = RiseConfig{};
    cfg.keep_prob = 0.0;
    CHECK_THROWS_AS(rise_saliency(ok, img, cfg), ConfigError);
    cfg = RiseConfig{};
    cfg.keep_prob = 1.0;
    CHECK_THROWS_AS(rise_saliency(ok, img, cfg), ConfigError);
    cfg = RiseConfig{};
    cfg.grid = 5;
    cfg.exhaustive = true;
    CHECK_THROWS_AS(rise_saliency(ok, img, cfg), ConfigError);

    cfg = RiseConfig{};
    CHECK_THROWS_AS(rise_saliency(ok, Tensor({3, 4, 4}), cfg), ConfigError);
    MaskScorer boom = [](const Tensor&) -> double { throw IoError("scorer backend down"); };
    cfg.n_masks = 2;
    CHECK_THROWS_AS(rise_saliency(boom, img, cfg), IoError);
}

TEST_CASE("rise: net scorer returns the softmax probability") {
    NetSpec spec;
    spec.in_channels = 1;
    spec.in_h = 8;
    spec.in_w = 8;
    spec.classes = 2;
    spec.blocks = {{4, 3}};
    ConvNet net = init_parameters(spec, 2);
    Tensor img = ones_image(1, 8, 8);
    MaskScorer s0 = net_prob_scorer(net, 0);
    MaskScorer s1 = net_prob_scorer(net, 1);
    double p0 = s0(img), p1 = s1(img);
    CHECK(p0 > 0.0);
    CHECK(p1 > 0.0);
    CHECK(p0 + p1 == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(net_prob_scorer(net, 2), ConfigError);
}

TEST_CASE("pointing game: pass, tie rule and error cases") {
    // peak inside the mask
    GridMap hit = make_map(2, 2, {0.1, 0.9, 0.2, 0.3});
    std::vector<uint8_t> z_hit = {0, 1, 0, 0};
    PointingGameReport r = pointing_game({hit}, {z_hit});
    CHECK(r.rate == 1.0);
    CHECK(r.passes == std::vector<char>{1});

    // uniform saliency: the tie goes to pixel (0,0), outside this mask
    GridMap flat = make_map(2, 2, {0.5, 0.5, 0.5, 0.5});
    std::vector<uint8_t> z_rest = {0, 1, 1, 1};
    r = pointing_game({flat}, {z_rest});
    CHECK(r.rate == 0.0);

    // mixed batch
    r = pointing_game({hit, flat}, {z_hit, z_rest});
    CHECK(r.rate == 0.5);
    CHECK(r.passes == std::vector<char>{1, 0});

    std::vector<uint8_t> z_empty = {0, 0, 0, 0};
    CHECK_THROWS_AS(pointing_game({hit}, {z_empty}), ConfigError);
    CHECK_THROWS_AS(pointing_game({hit}, {z_hit, z_rest}), ConfigError);
    CHECK_THROWS_AS(pointing_game({hit}, {std::vector<uint8_t>{1, 0}}), ConfigError);
    CHECK_THROWS_AS(pointing_game({}, {}), ConfigError);
}

TEST_CASE("pointing game: invariant under strictly monotone rescaling") {
    Rng rng(17);
    std::vector<GridMap> maps;
    std::vector<std::vector<uint8_t>> zs;
    for (int i = 0; i < 10; ++i) {
        GridMap m;
        m.h = 4;
        m.w = 4;
        for (int j = 0; j < 16; ++j) m.v.push_back(rng.uniform());
        maps.push_back(m);
        std::vector<uint8_t> z(16, 0);
        for (int j = 0; j < 16; ++j) z[static_cast<size_t>(j)] = rng.uniform() < 0.4 ? 1 : 0;
        z[static_cast<size_t>(rng.uniform_int(16))] = 1;
        zs.push_back(z);
    }
    PointingGameReport before = pointing_game(maps, zs);
    for (GridMap& m : maps)
        for (double& v : m.v) v = std::exp(3.0 * v) - 0.5;
    PointingGameReport after = pointing_game(maps, zs);
    CHECK(before.passes == after.passes);
    CHECK(before.rate == after.rate);
}

TEST_CASE("pointing game: oracle maps at zero noise always pass") {
    BiasGenConfig cfg;
    cfg.rho = 0.5;
    cfg.train_per_class = 6;
    cfg.val_per_group = 1;
    cfg.test_per_group = 1;
    cfg.seed = 2;
    DatasetSplit data = generate_biased_shapes(cfg);
    std::vector<GridMap> maps;
    std::vector<std::vector<uint8_t>> zs;
    for (const Sample& s : data.train) {
        maps.push_back(oracle_ground(s, data.h, data.w, 0, 0.0, 0).grid);
        zs.push_back(s.mask);
    }
    PointingGameReport r = pointing_game(maps, zs);
    CHECK(r.rate == 1.0);
}

TEST_CASE("report serialization round-trips through text") {
    std::vector<int> labels = {0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
    std::vector<int> preds = {0, 0, 0, 0, 1, 0, 1, 1, 1, 2};
    FairnessReport fr = fairness_from_predictions(preds, labels);

    std::string csv = fairness_csv(fr);
    std::istringstream is(csv);
    std::string header, line_a, line_b;
    std::getline(is, header);
    std::getline(is, line_a);
    std::getline(is, line_b);
    CHECK(header == "row,pred_a,pred_b,pred_neutral,ratio_delta,outcome_divergence");
    auto fields = [](const std::string& line) {
        std::vector<std::string> out;
        std::istringstream ls(line);
        std::string f;
        while (std::getline(ls, f, ',')) out.push_back(f);
        return out;
    };
    std::vector<std::string> fa = fields(line_a), fb = fields(line_b);
    REQUIRE(fa.size() == 6);
    REQUIRE(fb.size() == 6);
    CHECK(fa[0] == "a");
    CHECK(std::stod(fa[1]) == doctest::Approx(fr.a_row[0]).epsilon(1e-10));
    CHECK(std::stod(fa[4]) == doctest::Approx(fr.ratio_delta).epsilon(1e-10));
    CHECK(std::stod(fb[3]) == doctest::Approx(fr.b_row[2]).epsilon(1e-10));
    CHECK(std::stod(fb[5]) == doctest::Approx(fr.outcome_divergence).epsilon(1e-10));

    std::string table = fairness_table(fr);
    CHECK(table.find("ratio delta") != std::string::npos);
    CHECK(table.find("outcome divergence") != std::string::npos);
    CHECK(table.find("0.8000") != std::string::npos);

    GroupReport gr = group_accuracy({0, 1, 1, 0}, {0, 1, 0, 0}, {0, 0, 1, 1});
    std::string gcsv = group_csv(gr);
    CHECK(gcsv.find("group,size,accuracy") == 0);
    CHECK(gcsv.find("mean,,0.75") != std::string::npos);
    CHECK(gcsv.find("worst,,0.5") != std::string::npos);
    CHECK(group_table(gr).find("worst") != std::string::npos);

    PointingGameReport pr;
    pr.passes = {1, 0, 1};
    pr.rate = 2.0 / 3.0;
    std::string pcsv = pointing_csv(pr);
    CHECK(pcsv.find("sample,pass") == 0);
    CHECK(pcsv.find("1,0") != std::string::npos);
    CHECK(pcsv.find("rate,0.666666666667") != std::string::npos);
}
