#include "gals/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <numeric>
#include <sstream>

#include "gals/errors.hpp"
#include "gals/grounder.hpp"
#include "gals/rng.hpp"

namespace gals {

namespace {

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.12g", v);
    return buf;
}

Tensor batch_images(const std::vector<Sample>& samples, const std::vector<int>& order,
                    size_t start, size_t stop, int c, int h, int w) {
    const size_t plane = static_cast<size_t>(c) * h * w;
    std::vector<double> data((stop - start) * plane);
    for (size_t i = start; i < stop; ++i) {
        const Sample& s = samples[static_cast<size_t>(order[i])];
        if (s.image.size() != plane)
            throw ConfigError("train: sample " + s.id + " does not match the net input shape");
        std::copy(s.image.begin(), s.image.end(), data.begin() +
                  static_cast<long>((i - start) * plane));
    }
    return Tensor(Shape{static_cast<int>(stop - start), c, h, w}, std::move(data));
}

// like group_accuracy, but a split of a heavily biased dataset may lack some
// groups entirely; those report NaN and are skipped by mean and worst
GroupReport split_group_stats(const ConvNet& net, const std::vector<Sample>& samples,
                              int groups) {
    std::vector<int> preds = predict(net, samples);
    GroupReport r;
    r.per_group.assign(static_cast<size_t>(groups),
                       std::numeric_limits<double>::quiet_NaN());
    r.sizes.assign(static_cast<size_t>(groups), 0);
    std::vector<int> correct(static_cast<size_t>(groups), 0);
    for (size_t i = 0; i < samples.size(); ++i) {
        int g = samples[i].group;
        if (g < 0 || g >= groups)
            throw ConfigError("train: sample " + samples[i].id + " has group " +
                              std::to_string(g) + " outside 0.." + std::to_string(groups - 1));
        ++r.sizes[static_cast<size_t>(g)];
        if (preds[i] == samples[i].label) ++correct[static_cast<size_t>(g)];
    }
    double sum = 0.0;
    int present = 0;
    r.worst = 1.0;
    for (int g = 0; g < groups; ++g) {
        if (r.sizes[static_cast<size_t>(g)] == 0) continue;
        double acc = static_cast<double>(correct[static_cast<size_t>(g)]) /
                     r.sizes[static_cast<size_t>(g)];
        r.per_group[static_cast<size_t>(g)] = acc;
        sum += acc;
        ++present;
        r.worst = std::min(r.worst, acc);
    }
    if (present == 0) throw ConfigError("train: split has no samples to score");
    r.mean = sum / present;
    return r;
}

double split_cross_entropy(const ConvNet& net, const std::vector<Sample>& samples) {
    const int c = net.spec.in_channels, h = net.spec.in_h, w = net.spec.in_w;
    std::vector<int> order(samples.size());
    std::iota(order.begin(), order.end(), 0);
    double sum = 0.0;
    const size_t chunk = 64;
    for (size_t start = 0; start < samples.size(); start += chunk) {
        size_t stop = std::min(samples.size(), start + chunk);
        std::vector<int> labels;
        for (size_t i = start; i < stop; ++i)
            labels.push_back(samples[static_cast<size_t>(order[i])].label);
        Tape tape;
        Tensor logits = forward(net, tape, batch_images(samples, order, start, stop, c, h, w));
        sum += cross_entropy(logits, labels).item() * static_cast<double>(stop - start);
    }
    return sum / static_cast<double>(samples.size());
}

}  // namespace

std::string train_method_name(TrainMethod m) {
    switch (m) {
        case TrainMethod::Vanilla: return "vanilla";
        case TrainMethod::Upweight: return "upweight";
        case TrainMethod::Guided: return "guided";
    }
    throw ConfigError("train: unknown method value");
}

TrainMethod train_method_from(const std::string& name) {
    if (name == "vanilla") return TrainMethod::Vanilla;
    if (name == "upweight") return TrainMethod::Upweight;
    if (name == "guided") return TrainMethod::Guided;
    throw ConfigError("train: unknown method '" + name +
                      "' (expected vanilla, upweight or guided)");
}

void TrainConfig::validate() const {
    net.validate();
    if (epochs < 1) throw ConfigError("train config: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train config: batch_size must be >= 1");
    if (!(lr_backbone > 0.0)) throw ConfigError("train config: lr_backbone must be > 0");
    if (!(lr_head > 0.0)) throw ConfigError("train config: lr_head must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0))
        throw ConfigError("train config: momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("train config: weight_decay must be >= 0");
    if (eval_every < 1) throw ConfigError("train config: eval_every must be >= 1");
    attention.validate();
}

const std::set<std::string>& TrainConfig::config_keys() {
    static const std::set<std::string> keys = {
        "net",      "epochs", "batch_size", "lr_backbone", "lr_head",
        "momentum", "weight_decay", "lambda", "variant", "score",
        "reduction", "method", "seed", "eval_every"};
    return keys;
}

TrainConfig TrainConfig::from_config(const KeyValueConfig& kv) {
    TrainConfig c;
    if (kv.has("net")) c.net = NetSpec::decode(kv.require_string("net"));
    c.epochs = static_cast<int>(kv.get_int("epochs", c.epochs));
    c.batch_size = static_cast<int>(kv.get_int("batch_size", c.batch_size));
    c.lr_backbone = kv.get_double("lr_backbone", c.lr_backbone);
    c.lr_head = kv.get_double("lr_head", c.lr_head);
    c.momentum = kv.get_double("momentum", c.momentum);
    c.weight_decay = kv.get_double("weight_decay", c.weight_decay);
    c.attention.lambda = kv.get_double("lambda", c.attention.lambda);
    if (kv.has("variant"))
        c.attention.variant = attention_variant_from(kv.require_string("variant"));
    if (kv.has("score"))
        c.attention.score_choice = score_choice_from(kv.require_string("score"));
    if (kv.has("reduction"))
        c.attention.pixel_reduction = pixel_reduction_from(kv.require_string("reduction"));
    c.method = train_method_from(kv.get_string("method", train_method_name(c.method)));
    c.seed = static_cast<uint64_t>(kv.get_int("seed", 0));
    c.eval_every = static_cast<int>(kv.get_int("eval_every", c.eval_every));
    c.validate();
    return c;
}

void sgd_momentum_step(Tensor& param, const Tensor& grad, Tensor& velocity,
                       double lr, double momentum, double weight_decay) {
    if (param.shape() != grad.shape() || param.shape() != velocity.shape())
        throw ConfigError("sgd step: param " + shape_str(param.shape()) + ", grad " +
                          shape_str(grad.shape()) + " and velocity " +
                          shape_str(velocity.shape()) + " shapes differ");
    double* p = param.data();
    const double* g = grad.data();
    double* v = velocity.data();
    for (int i = 0; i < param.numel(); ++i) {
        v[i] = momentum * v[i] + (g[i] + weight_decay * p[i]);
        p[i] -= lr * v[i];
    }
}

std::string history_csv(const std::vector<EpochRow>& rows) {
    if (rows.empty()) throw ConfigError("history: no rows");
    const size_t n_groups = rows.front().group_acc.size();
    std::ostringstream os;
    os << "epoch,split,method,ce,att,total";
    for (size_t g = 0; g < n_groups; ++g) os << ",g" << g;
    os << ",worst\n";
    for (const EpochRow& r : rows) {
        if (r.group_acc.size() != n_groups)
            throw ConfigError("history: rows disagree on group count");
        os << r.epoch << "," << r.split << "," << r.method << "," << fmt(r.ce) << ","
           << fmt(r.att) << "," << fmt(r.total);
        for (double a : r.group_acc) os << "," << fmt(a);
        os << "," << fmt(r.worst) << "\n";
    }
    return os.str();
}

std::vector<GridMap> load_train_attention(const std::string& dir, uint64_t spec_hash,
                                          const std::vector<Sample>& samples,
                                          int h, int w) {
    std::vector<GridMap> maps;
    maps.reserve(samples.size());
    std::vector<std::string> missing;
    for (const Sample& s : samples) {
        std::string path = attention_cache_path(dir, s.id, spec_hash);
        if (!std::filesystem::exists(path)) {
            missing.push_back(s.id);
            continue;
        }
        AttentionMap m = load_attention(path);
        if (m.grid.h != h || m.grid.w != w)
            throw ConfigError("attention cache: map for " + s.id + " is " +
                              std::to_string(m.grid.h) + "x" + std::to_string(m.grid.w) +
                              ", expected " + std::to_string(h) + "x" + std::to_string(w));
        maps.push_back(std::move(m.grid));
    }
    if (!missing.empty()) {
        std::ostringstream os;
        os << "attention cache incomplete: " << missing.size() << " of " << samples.size()
           << " maps missing (first: " << missing.front() << ")";
        throw ConfigError(os.str());
    }
    return maps;
}

TrainResult train_classifier(const DatasetSplit& data, const std::vector<GridMap>* attention,
                             const TrainConfig& cfg, const EpochHook& hook) {
    cfg.validate();
    if (data.train.empty()) throw ConfigError("train: empty train split");
    if (data.val.empty()) throw ConfigError("train: empty val split");
    if (cfg.batch_size > static_cast<int>(data.train.size()))
        throw ConfigError("train: batch_size " + std::to_string(cfg.batch_size) +
                          " exceeds the train split (" + std::to_string(data.train.size()) + ")");
    if (cfg.net.classes != data.classes)
        throw ConfigError("train: net has " + std::to_string(cfg.net.classes) +
                          " classes but the dataset has " + std::to_string(data.classes));
    if (cfg.net.in_h != data.h || cfg.net.in_w != data.w)
        throw ConfigError("train: net input is " + std::to_string(cfg.net.in_h) + "x" +
                          std::to_string(cfg.net.in_w) + " but the dataset is " +
                          std::to_string(data.h) + "x" + std::to_string(data.w));
    const bool guided = cfg.method == TrainMethod::Guided;
    if (guided) {
        if (attention == nullptr)
            throw ConfigError("train: guided method needs attention maps for the train split");
        if (attention->size() != data.train.size())
            throw ConfigError("train: " + std::to_string(attention->size()) +
                              " attention maps for " + std::to_string(data.train.size()) +
                              " train samples");
        for (size_t i = 0; i < attention->size(); ++i)
            if ((*attention)[i].h != data.h || (*attention)[i].w != data.w)
                throw ConfigError("train: attention map " + std::to_string(i) +
                                  " does not match the image extent");
    }

    const int c = cfg.net.in_channels, h = cfg.net.in_h, w = cfg.net.in_w;
    ConvNet net = init_parameters(cfg.net, derive_seed("train-init", cfg.seed));
    std::vector<Tensor> velocity;
    std::vector<double> lr_of;
    for (const auto& kv : net.params) {
        velocity.emplace_back(kv.second.shape());
        lr_of.push_back(kv.first.rfind("head.", 0) == 0 ? cfg.lr_head : cfg.lr_backbone);
    }

    std::vector<int> train_labels;
    for (const Sample& s : data.train) train_labels.push_back(s.label);
    std::vector<double> class_weights;
    if (cfg.method == TrainMethod::Upweight)
        class_weights = class_weights_inverse_frequency(train_labels, data.classes);

    AttentionLossConfig att_cfg = cfg.attention;
    if (!guided) att_cfg.lambda = 0.0;  // vanilla objective, bit for bit
    const std::vector<GridMap> no_maps;
    const std::string method = train_method_name(cfg.method);

    TrainResult result;
    result.best_val_worst = -1.0;
    std::vector<int> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng rng(derive_seed("train-epoch", cfg.seed, static_cast<uint64_t>(epoch - 1)));
        std::iota(order.begin(), order.end(), 0);
        rng.shuffle(order);

        double ce_sum = 0.0, att_sum = 0.0, total_sum = 0.0;
        for (size_t start = 0; start < order.size();
             start += static_cast<size_t>(cfg.batch_size)) {
            size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
            const double bn = static_cast<double>(stop - start);
            Tensor images = batch_images(data.train, order, start, stop, c, h, w);
            std::vector<int> labels;
            std::vector<GridMap> maps;
            std::vector<double> weights;
            for (size_t i = start; i < stop; ++i) {
                const size_t idx = static_cast<size_t>(order[i]);
                labels.push_back(data.train[idx].label);
                if (guided) maps.push_back((*attention)[idx]);
                if (!class_weights.empty())
                    weights.push_back(class_weights[static_cast<size_t>(data.train[idx].label)]);
            }

            Tape tape;
            LossBreakdown lb;
            if (cfg.method == TrainMethod::Upweight) {
                Tensor logits = forward(net, tape, images, &lb.trace);
                lb.ce = cross_entropy(logits, labels, &weights);
                lb.total = lb.ce;
                lb.ce_value = lb.total_value = lb.ce.item();
            } else {
                lb = total_loss(net, tape, images, labels, guided ? maps : no_maps, att_cfg);
            }
            if (!std::isfinite(lb.total_value)) {
                std::ostringstream os;
                os << "train: non-finite loss at epoch " << epoch << ", batch "
                   << start / static_cast<size_t>(cfg.batch_size) << " (method " << method
                   << ", ce " << lb.ce_value << ", att " << lb.att_value << ", lr "
                   << cfg.lr_backbone << "/" << cfg.lr_head << ")";
                throw TrainingError(os.str());
            }

            std::vector<Tensor> grads = backward(lb.total, lb.trace.watched_params, false);
            for (size_t i = 0; i < net.params.size(); ++i)
                sgd_momentum_step(net.params[i].second, grads[i], velocity[i], lr_of[i],
                                  cfg.momentum, cfg.weight_decay);

            ce_sum += lb.ce_value * bn;
            att_sum += lb.att_value * bn;
            total_sum += lb.total_value * bn;
        }

        const double n_train = static_cast<double>(data.train.size());
        EpochRow train_row;
        train_row.epoch = epoch;
        train_row.split = "train";
        train_row.method = method;
        train_row.ce = ce_sum / n_train;
        train_row.att = att_sum / n_train;
        train_row.total = total_sum / n_train;
        GroupReport train_groups = split_group_stats(net, data.train, data.groups);
        train_row.group_acc = train_groups.per_group;
        train_row.worst = train_groups.worst;
        result.history.push_back(std::move(train_row));

        if (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            EpochRow val_row;
            val_row.epoch = epoch;
            val_row.split = "val";
            val_row.method = method;
            val_row.ce = split_cross_entropy(net, data.val);
            val_row.att = 0.0;
            val_row.total = val_row.ce;
            GroupReport val_groups = split_group_stats(net, data.val, data.groups);
            val_row.group_acc = val_groups.per_group;
            val_row.worst = val_groups.worst;
            result.history.push_back(std::move(val_row));

            if (val_groups.worst > result.best_val_worst) {
                result.best_val_worst = val_groups.worst;
                result.best_epoch = epoch;
                result.best = checkpoint_from_net(net);
                result.best.set_meta("method", method);
                result.best.set_meta("epoch", std::to_string(epoch));
                result.best.set_meta("val_worst", fmt(val_groups.worst));
                result.best.set_meta("seed", std::to_string(cfg.seed));
                result.best.set_meta("lambda", fmt(cfg.attention.lambda));
                result.best.set_meta("variant", attention_variant_name(cfg.attention.variant));
            }
        }
        if (hook) hook(epoch, net);
    }
    return result;
}

}  // namespace gals
