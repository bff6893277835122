#include "gals/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "gals/errors.hpp"
#include "gals/rng.hpp"

namespace gals {

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

double jsd_base2(const std::array<double, 3>& p, const std::array<double, 3>& q) {
    std::array<double, 3> m{};
    for (int i = 0; i < 3; ++i) m[static_cast<size_t>(i)] =
        0.5 * (p[static_cast<size_t>(i)] + q[static_cast<size_t>(i)]);
    auto kl = [&](const std::array<double, 3>& a) {
        double s = 0.0;
        for (int i = 0; i < 3; ++i) {
            double ai = a[static_cast<size_t>(i)];
            if (ai > 0.0) s += ai * std::log2(ai / m[static_cast<size_t>(i)]);
        }
        return s;
    };
    return 0.5 * kl(p) + 0.5 * kl(q);
}

void check_prob_row(const std::array<double, 3>& row, const char* name) {
    double sum = 0.0;
    for (double v : row) {
        if (!(v >= 0.0))
            throw ConfigError(std::string("outcome divergence: ") + name +
                              " row has a negative or non-finite entry");
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw ConfigError(std::string("outcome divergence: ") + name +
                          " row is not normalized (sum " + fmt(sum) + ")");
}

int argmax_row(const double* v, int n) {
    int best = 0;
    for (int i = 1; i < n; ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

}  // namespace

GroupReport group_accuracy(const std::vector<int>& predictions,
                           const std::vector<int>& labels,
                           const std::vector<int>& groups) {
    if (predictions.size() != labels.size() || labels.size() != groups.size())
        throw ConfigError("group accuracy: predictions, labels and groups differ in length");
    if (predictions.empty()) throw ConfigError("group accuracy: no samples");
    int n_groups = 0;
    for (int g : groups) {
        if (g < 0) throw ConfigError("group accuracy: negative group id");
        n_groups = std::max(n_groups, g + 1);
    }
    GroupReport r;
    r.sizes.assign(static_cast<size_t>(n_groups), 0);
    std::vector<int> correct(static_cast<size_t>(n_groups), 0);
    for (size_t i = 0; i < groups.size(); ++i) {
        int g = groups[i];
        ++r.sizes[static_cast<size_t>(g)];
        if (predictions[i] == labels[i]) ++correct[static_cast<size_t>(g)];
    }
    r.per_group.resize(static_cast<size_t>(n_groups));
    double sum = 0.0;
    r.worst = 1.0;
    for (int g = 0; g < n_groups; ++g) {
        if (r.sizes[static_cast<size_t>(g)] == 0)
            throw ConfigError("group accuracy: group " + std::to_string(g) + " is empty");
        double acc = static_cast<double>(correct[static_cast<size_t>(g)]) /
                     static_cast<double>(r.sizes[static_cast<size_t>(g)]);
        r.per_group[static_cast<size_t>(g)] = acc;
        sum += acc;
        r.worst = std::min(r.worst, acc);
    }
    r.mean = sum / static_cast<double>(n_groups);
    return r;
}

double ratio_delta(const std::array<double, 3>& a_row, const std::array<double, 3>& b_row) {
    for (double v : a_row)
        if (!(v >= 0.0)) throw ConfigError("ratio delta: negative or non-finite count");
    for (double v : b_row)
        if (!(v >= 0.0)) throw ConfigError("ratio delta: negative or non-finite count");
    double pred_a = a_row[0] + b_row[0];
    double pred_b = a_row[1] + b_row[1];
    if (pred_a <= 0.0) throw ConfigError("ratio delta: nothing predicted as class A");
    return std::abs(1.0 - pred_b / pred_a);
}

double outcome_divergence(const std::array<double, 3>& a_row,
                          const std::array<double, 3>& b_row) {
    check_prob_row(a_row, "class-A");
    check_prob_row(b_row, "class-B");
    std::array<double, 3> pa = {a_row[0], a_row[1], a_row[2]};
    std::array<double, 3> pb = {b_row[1], b_row[0], b_row[2]};
    return jsd_base2(pa, pb);
}

FairnessReport fairness_from_predictions(const std::vector<int>& predictions,
                                         const std::vector<int>& labels) {
    if (predictions.size() != labels.size())
        throw ConfigError("fairness: predictions and labels differ in length");
    if (predictions.empty()) throw ConfigError("fairness: no samples");
    std::array<double, 3> a_count{}, b_count{};
    int na = 0, nb = 0;
    for (size_t i = 0; i < labels.size(); ++i) {
        int y = labels[i], p = predictions[i];
        if (y < 0 || y > 2 || p < 0 || p > 2)
            throw ConfigError("fairness: labels and predictions must lie in {0, 1, 2}");
        if (y == 0) { ++a_count[static_cast<size_t>(p)]; ++na; }
        if (y == 1) { ++b_count[static_cast<size_t>(p)]; ++nb; }
    }
    if (na == 0) throw ConfigError("fairness: no class-A samples");
    if (nb == 0) throw ConfigError("fairness: no class-B samples");
    FairnessReport r;
    for (int i = 0; i < 3; ++i) {
        r.a_row[static_cast<size_t>(i)] = a_count[static_cast<size_t>(i)] / na;
        r.b_row[static_cast<size_t>(i)] = b_count[static_cast<size_t>(i)] / nb;
    }
    r.ratio_delta = ratio_delta(r.a_row, r.b_row);
    r.outcome_divergence = outcome_divergence(r.a_row, r.b_row);
    return r;
}

FairnessReport fairness_eval(const ConvNet& net, const std::vector<Sample>& samples) {
    if (net.spec.classes != 3)
        throw ConfigError("fairness: expected a 3-class net, got " +
                          std::to_string(net.spec.classes) + " classes");
    std::vector<int> labels;
    labels.reserve(samples.size());
    for (const Sample& s : samples) labels.push_back(s.label);
    return fairness_from_predictions(predict(net, samples), labels);
}

std::vector<int> predict(const ConvNet& net, const std::vector<Sample>& samples) {
    if (samples.empty()) throw ConfigError("predict: no samples");
    const int c = net.spec.in_channels, h = net.spec.in_h, w = net.spec.in_w;
    const size_t plane = static_cast<size_t>(c) * h * w;
    std::vector<int> out;
    out.reserve(samples.size());
    const int chunk = 32;
    for (size_t start = 0; start < samples.size(); start += chunk) {
        size_t stop = std::min(samples.size(), start + chunk);
        int n = static_cast<int>(stop - start);
        std::vector<double> batch(static_cast<size_t>(n) * plane);
        for (size_t i = start; i < stop; ++i) {
            if (samples[i].image.size() != plane)
                throw ConfigError("predict: sample " + samples[i].id +
                                  " does not match the net input shape");
            std::copy(samples[i].image.begin(), samples[i].image.end(),
                      batch.begin() + static_cast<long>((i - start) * plane));
        }
        Tape tape;
        Tensor logits = forward(net, tape, Tensor(Shape{n, c, h, w}, std::move(batch)));
        for (int i = 0; i < n; ++i)
            out.push_back(argmax_row(logits.data() + static_cast<size_t>(i) * net.spec.classes,
                                     net.spec.classes));
    }
    return out;
}

GroupReport evaluate_groups(const ConvNet& net, const std::vector<Sample>& samples) {
    std::vector<int> labels, groups;
    labels.reserve(samples.size());
    groups.reserve(samples.size());
    for (const Sample& s : samples) {
        labels.push_back(s.label);
        groups.push_back(s.group);
    }
    return group_accuracy(predict(net, samples), labels, groups);
}

void RiseConfig::validate() const {
    if (n_masks < 1) throw ConfigError("rise: n_masks must be >= 1");
    if (grid < 1) throw ConfigError("rise: grid must be >= 1");
    if (!(keep_prob > 0.0 && keep_prob < 1.0))
        throw ConfigError("rise: keep_prob must lie in (0, 1)");
    if (exhaustive && grid * grid > 16)
        throw ConfigError("rise: exhaustive enumeration supports at most a 4x4 grid");
}

MaskScorer net_prob_scorer(const ConvNet& net, int target_class) {
    if (target_class < 0 || target_class >= net.spec.classes)
        throw ConfigError("rise scorer: target class out of range");
    return [net, target_class](const Tensor& masked) {
        Tape tape;
        Tensor logits = forward(net, tape, masked);
        const double* l = logits.data();
        int k = net.spec.classes;
        double mx = l[0];
        for (int i = 1; i < k; ++i) mx = std::max(mx, l[i]);
        double denom = 0.0;
        for (int i = 0; i < k; ++i) denom += std::exp(l[i] - mx);
        return std::exp(l[target_class] - mx) / denom;
    };
}

GridMap rise_saliency(const MaskScorer& scorer, const Tensor& image, const RiseConfig& cfg) {
    cfg.validate();
    if (!scorer) throw ConfigError("rise: no scorer");
    if (image.rank() != 4 || image.dim(0) != 1)
        throw ConfigError("rise: image must be (1, C, H, W), got " + shape_str(image.shape()));
    const int c = image.dim(1), h = image.dim(2), w = image.dim(3);
    const int g = cfg.grid;
    const double p = cfg.keep_prob;
    GridMap sal;
    sal.h = h;
    sal.w = w;
    sal.v.assign(static_cast<size_t>(h) * w, 0.0);

    std::vector<double> mask(static_cast<size_t>(h) * w);
    Tensor masked(image.shape());
    auto accumulate = [&](double weight) {
        for (int ch = 0; ch < c; ++ch)
            for (int i = 0; i < h * w; ++i)
                masked.data()[static_cast<size_t>(ch) * h * w + static_cast<size_t>(i)] =
                    image.data()[static_cast<size_t>(ch) * h * w + static_cast<size_t>(i)] *
                    mask[static_cast<size_t>(i)];
        double score = scorer(masked);
        for (int i = 0; i < h * w; ++i)
            sal.v[static_cast<size_t>(i)] += weight * score * mask[static_cast<size_t>(i)];
    };

    if (cfg.exhaustive) {
        const int cells = g * g;
        const int cell_h = (h + g - 1) / g, cell_w = (w + g - 1) / g;
        for (uint32_t bits = 0; bits < (1u << cells); ++bits) {
            int ones = 0;
            for (int i = 0; i < cells; ++i) ones += (bits >> i) & 1u;
            double weight = std::pow(p, ones) * std::pow(1.0 - p, cells - ones);
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    int cell = std::min(y / cell_h, g - 1) * g + std::min(x / cell_w, g - 1);
                    mask[static_cast<size_t>(y) * w + x] =
                        static_cast<double>((bits >> cell) & 1u);
                }
            accumulate(weight);
        }
        for (double& v : sal.v) v /= p;
        return sal;
    }

    const int cell_h = (h + g - 1) / g, cell_w = (w + g - 1) / g;
    const int up_h = (g + 1) * cell_h, up_w = (g + 1) * cell_w;
    std::vector<double> grid_vals(static_cast<size_t>(g) * g);
    for (int i = 0; i < cfg.n_masks; ++i) {
        Rng rng(derive_seed("rise-mask", cfg.seed, static_cast<uint64_t>(i)));
        for (double& v : grid_vals) v = rng.uniform() < p ? 1.0 : 0.0;
        int oy = rng.uniform_int(cell_h), ox = rng.uniform_int(cell_w);
        std::vector<double> up = bilinear_resize_grid(grid_vals, g, g, up_h, up_w);
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x)
                mask[static_cast<size_t>(y) * w + x] =
                    up[static_cast<size_t>(y + oy) * up_w + (x + ox)];
        accumulate(1.0);
    }
    for (double& v : sal.v) v /= static_cast<double>(cfg.n_masks) * p;
    return sal;
}

PointingGameReport pointing_game(const std::vector<GridMap>& saliency,
                                 const std::vector<std::vector<uint8_t>>& masks) {
    if (saliency.size() != masks.size())
        throw ConfigError("pointing game: saliency and mask counts differ");
    if (saliency.empty()) throw ConfigError("pointing game: no samples");
    PointingGameReport r;
    r.passes.reserve(saliency.size());
    int hits = 0;
    for (size_t i = 0; i < saliency.size(); ++i) {
        const GridMap& m = saliency[i];
        const std::vector<uint8_t>& z = masks[i];
        if (m.v.size() != static_cast<size_t>(m.h) * m.w || z.size() != m.v.size())
            throw ConfigError("pointing game: sample " + std::to_string(i) +
                              " map and mask shapes differ");
        if (std::find_if(z.begin(), z.end(), [](uint8_t b) { return b != 0; }) == z.end())
            throw ConfigError("pointing game: sample " + std::to_string(i) +
                              " mask has no positive pixels");
        int arg = argmax_row(m.v.data(), static_cast<int>(m.v.size()));
        char pass = z[static_cast<size_t>(arg)] != 0 ? 1 : 0;
        r.passes.push_back(pass);
        hits += pass;
    }
    r.rate = static_cast<double>(hits) / static_cast<double>(saliency.size());
    return r;
}

std::string group_csv(const GroupReport& r) {
    std::ostringstream os;
    os << "group,size,accuracy\n";
    for (size_t g = 0; g < r.per_group.size(); ++g)
        os << g << "," << r.sizes[g] << "," << fmt(r.per_group[g]) << "\n";
    os << "mean,," << fmt(r.mean) << "\n";
    os << "worst,," << fmt(r.worst) << "\n";
    return os.str();
}

std::string fairness_csv(const FairnessReport& r) {
    std::ostringstream os;
    os << "row,pred_a,pred_b,pred_neutral,ratio_delta,outcome_divergence\n";
    os << "a," << fmt(r.a_row[0]) << "," << fmt(r.a_row[1]) << "," << fmt(r.a_row[2]) << ","
       << fmt(r.ratio_delta) << "," << fmt(r.outcome_divergence) << "\n";
    os << "b," << fmt(r.b_row[0]) << "," << fmt(r.b_row[1]) << "," << fmt(r.b_row[2]) << ","
       << fmt(r.ratio_delta) << "," << fmt(r.outcome_divergence) << "\n";
    return os.str();
}

std::string pointing_csv(const PointingGameReport& r) {
    std::ostringstream os;
    os << "sample,pass\n";
    for (size_t i = 0; i < r.passes.size(); ++i)
        os << i << "," << static_cast<int>(r.passes[i]) << "\n";
    os << "rate," << fmt(r.rate) << "\n";
    return os.str();
}

std::string fairness_table(const FairnessReport& r) {
    char buf[256];
    std::ostringstream os;
    os << "true\\pred        A        B  Neutral\n";
    std::snprintf(buf, sizeof(buf), "A         %8.4f %8.4f %8.4f\n",
                  r.a_row[0], r.a_row[1], r.a_row[2]);
    os << buf;
    std::snprintf(buf, sizeof(buf), "B         %8.4f %8.4f %8.4f\n",
                  r.b_row[0], r.b_row[1], r.b_row[2]);
    os << buf;
    std::snprintf(buf, sizeof(buf), "ratio delta         %8.4f\n", r.ratio_delta);
    os << buf;
    std::snprintf(buf, sizeof(buf), "outcome divergence  %8.4f\n", r.outcome_divergence);
    os << buf;
    return os.str();
}

std::string group_table(const GroupReport& r) {
    char buf[128];
    std::ostringstream os;
    os << "group    size  accuracy\n";
    for (size_t g = 0; g < r.per_group.size(); ++g) {
        std::snprintf(buf, sizeof(buf), "%-7zu %5d  %8.4f\n", g, r.sizes[g], r.per_group[g]);
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "mean          %10.4f\n", r.mean);
    os << buf;
    std::snprintf(buf, sizeof(buf), "worst         %10.4f\n", r.worst);
    os << buf;
    return os.str();
}

}  // namespace gals
