#include "gals/nn.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "gals/errors.hpp"
#include "gals/rng.hpp"

namespace gals {

void NetSpec::validate() const {
    if (in_channels < 1 || in_h < 1 || in_w < 1 || classes < 2 || blocks.empty())
        throw ConfigError("net spec: need positive extents, >=2 classes, >=1 block");
    int h = in_h, w = in_w;
    for (const auto& b : blocks) {
        if (b.out_channels < 1) throw ConfigError("net spec: block channels must be positive");
        if (b.kernel < 1 || b.kernel % 2 == 0)
            throw ConfigError("net spec: kernels must be odd, got " + std::to_string(b.kernel));
        if (h % 2 != 0 || w % 2 != 0)
            throw ConfigError("net spec: spatial extents must halve cleanly at every block");
        h /= 2;
        w /= 2;
    }
    if (h < 1 || w < 1) throw ConfigError("net spec: too many blocks for the input size");
}

std::string NetSpec::encode() const {
    std::ostringstream os;
    os << in_channels << ":" << in_h << ":" << in_w << ":" << classes;
    for (const auto& b : blocks) os << ":" << b.out_channels << "x" << b.kernel;
    return os.str();
}

NetSpec NetSpec::decode(const std::string& text) {
    NetSpec spec;
    spec.blocks.clear();
    std::istringstream is(text);
    std::string tok;
    std::vector<std::string> parts;
    while (std::getline(is, tok, ':')) parts.push_back(tok);
    if (parts.size() < 5) throw ParseError("net spec string malformed: " + text);
    spec.in_channels = std::stoi(parts[0]);
    spec.in_h = std::stoi(parts[1]);
    spec.in_w = std::stoi(parts[2]);
    spec.classes = std::stoi(parts[3]);
    for (size_t i = 4; i < parts.size(); ++i) {
        const size_t x = parts[i].find('x');
        if (x == std::string::npos) throw ParseError("net spec block malformed: " + parts[i]);
        spec.blocks.push_back(
            {std::stoi(parts[i].substr(0, x)), std::stoi(parts[i].substr(x + 1))});
    }
    spec.validate();
    return spec;
}

Tensor& ConvNet::param(const std::string& name) {
    for (auto& kv : params)
        if (kv.first == name) return kv.second;
    throw ConfigError("no parameter named " + name);
}

const Tensor& ConvNet::param(const std::string& name) const {
    for (const auto& kv : params)
        if (kv.first == name) return kv.second;
    throw ConfigError("no parameter named " + name);
}

ConvNet init_parameters(const NetSpec& spec, uint64_t seed) {
    spec.validate();
    ConvNet net;
    net.spec = spec;
    int param_index = 0;
    auto he_normal = [&](Shape shape, int fan_in) {
        Rng rng(derive_seed("init", seed, static_cast<uint64_t>(param_index++)));
        const double sd = std::sqrt(2.0 / fan_in);
        Tensor t(std::move(shape));
        for (int i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal() * sd;
        return t;
    };
    int c_in = spec.in_channels;
    for (size_t b = 0; b < spec.blocks.size(); ++b) {
        const auto& blk = spec.blocks[b];
        const std::string base = "conv" + std::to_string(b);
        net.params.emplace_back(base + ".weight",
                                he_normal({blk.out_channels, c_in, blk.kernel, blk.kernel},
                                          c_in * blk.kernel * blk.kernel));
        net.params.emplace_back(base + ".bias", Tensor(Shape{blk.out_channels}));
        c_in = blk.out_channels;
    }
    net.params.emplace_back("head.weight", he_normal({c_in, spec.classes}, c_in));
    net.params.emplace_back("head.bias", Tensor(Shape{spec.classes}));
    return net;
}

namespace {

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    const int n = x.dim(0), k = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor b = reshape(bias, {1, k, 1, 1});
    b = broadcast_axis(b, 0, n);
    b = broadcast_axis(b, 2, h);
    b = broadcast_axis(b, 3, w);
    return add(x, b);
}

}  // namespace

Tensor forward(const ConvNet& net, Tape& tape, const Tensor& images, ForwardTrace* trace) {
    const NetSpec& spec = net.spec;
    if (images.rank() != 4 || images.dim(1) != spec.in_channels || images.dim(2) != spec.in_h ||
        images.dim(3) != spec.in_w)
        throw ConfigError("forward: image batch shape " + shape_str(images.shape()) +
                          " does not match spec input (" + std::to_string(spec.in_channels) +
                          ", " + std::to_string(spec.in_h) + ", " + std::to_string(spec.in_w) +
                          ")");
    ForwardTrace local;
    ForwardTrace& tr = trace ? *trace : local;
    tr.input = tape.watch(images);
    tr.watched_params.clear();
    tr.watched_params.reserve(net.params.size());
    for (const auto& kv : net.params) tr.watched_params.push_back(tape.watch(kv.second));

    Tensor x = tr.input;
    size_t p = 0;
    for (size_t b = 0; b < spec.blocks.size(); ++b) {
        const Tensor& w = tr.watched_params[p++];
        const Tensor& bias = tr.watched_params[p++];
        x = maxpool2(relu(add_channel_bias(conv2d(x, w), bias)));
    }
    tr.last_conv = x;
    Tensor h = global_avg_pool(x);
    Tensor logits = matmul(h, tr.watched_params[p]);
    Tensor hb = broadcast_axis(reshape(tr.watched_params[p + 1], {1, spec.classes}), 0,
                               images.dim(0));
    return add(logits, hb);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     const std::vector<double>* per_sample_weights) {
    if (logits.rank() != 2) throw ConfigError("cross_entropy: logits must be rank 2");
    const int n = logits.dim(0), c = logits.dim(1);
    if (static_cast<int>(labels.size()) != n)
        throw ConfigError("cross_entropy: label count does not match batch");
    std::vector<double> onehot(static_cast<size_t>(n) * c, 0.0);
    for (int i = 0; i < n; ++i) {
        if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= c)
            throw ConfigError("cross_entropy: label " +
                              std::to_string(labels[static_cast<size_t>(i)]) +
                              " outside [0, " + std::to_string(c) + ")");
        onehot[static_cast<size_t>(i) * c + labels[static_cast<size_t>(i)]] = 1.0;
    }
    Tensor lp = log_softmax(logits);
    Tensor per = neg(sum_axis(mul(lp, Tensor({n, c}, std::move(onehot))), 1));  // (n,1)
    if (!per_sample_weights) return scale(sum_all(per), 1.0 / n);
    if (static_cast<int>(per_sample_weights->size()) != n)
        throw ConfigError("cross_entropy: weight count does not match batch");
    double wsum = 0.0;
    for (double w : *per_sample_weights) wsum += w;
    if (wsum <= 0.0) throw ConfigError("cross_entropy: weights must sum to a positive value");
    Tensor w = Tensor({n, 1}, std::vector<double>(per_sample_weights->begin(),
                                                  per_sample_weights->end()));
    return scale(sum_all(mul(per, w)), 1.0 / wsum);
}

std::vector<double> class_weights_inverse_frequency(const std::vector<int>& labels,
                                                    int num_classes) {
    std::vector<int> counts(static_cast<size_t>(num_classes), 0);
    for (int y : labels) {
        if (y < 0 || y >= num_classes)
            throw ConfigError("class_weights: label outside class range");
        ++counts[static_cast<size_t>(y)];
    }
    int min_count = 0;
    for (size_t c = 0; c < counts.size(); ++c) {
        if (counts[c] == 0)
            throw ConfigError("class_weights: class " + std::to_string(c) + " has no samples");
        min_count = (c == 0) ? counts[c] : std::min(min_count, counts[c]);
    }
    std::vector<double> w(counts.size());
    for (size_t c = 0; c < counts.size(); ++c)
        w[c] = static_cast<double>(min_count) / counts[c];
    return w;
}

void Checkpoint::set_meta(const std::string& key, const std::string& value) {
    for (auto& kv : meta)
        if (kv.first == key) {
            kv.second = value;
            return;
        }
    meta.emplace_back(key, value);
}

std::string Checkpoint::meta_value(const std::string& key) const {
    for (const auto& kv : meta)
        if (kv.first == key) return kv.second;
    return "";
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "GALSCKPT1\n";
    os << "meta " << ckpt.meta.size() << "\n";
    for (const auto& kv : ckpt.meta) os << kv.first << "=" << kv.second << "\n";
    os << "tensors " << ckpt.tensors.size() << "\n";
    for (const auto& kv : ckpt.tensors) {
        os << kv.first << "\n";
        write_tensor(os, kv.second);
    }
    if (!os) throw IoError("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint " + path);
    std::string line;
    if (!std::getline(is, line) || line != "GALSCKPT1")
        throw ParseError("not a checkpoint file: " + path);
    Checkpoint ckpt;
    size_t n = 0;
    if (!(is >> line >> n) || line != "meta") throw ParseError("checkpoint meta header missing");
    std::getline(is, line);
    for (size_t i = 0; i < n; ++i) {
        if (!std::getline(is, line)) throw ParseError("checkpoint meta truncated");
        const size_t eq = line.find('=');
        if (eq == std::string::npos) throw ParseError("checkpoint meta line malformed: " + line);
        ckpt.meta.emplace_back(line.substr(0, eq), line.substr(eq + 1));
    }
    size_t m = 0;
    if (!(is >> line >> m) || line != "tensors")
        throw ParseError("checkpoint tensor header missing");
    std::getline(is, line);
    for (size_t i = 0; i < m; ++i) {
        std::string name;
        if (!std::getline(is, name) || name.empty())
            throw ParseError("checkpoint tensor name missing");
        ckpt.tensors.emplace_back(name, read_tensor(is));
    }
    return ckpt;
}

Checkpoint checkpoint_from_net(const ConvNet& net) {
    Checkpoint ckpt;
    ckpt.set_meta("net_spec", net.spec.encode());
    for (const auto& kv : net.params) ckpt.tensors.emplace_back(kv.first, kv.second.clone());
    return ckpt;
}

ConvNet net_from_checkpoint(const Checkpoint& ckpt) {
    const std::string spec = ckpt.meta_value("net_spec");
    if (spec.empty()) throw ParseError("checkpoint lacks net_spec metadata");
    ConvNet net;
    net.spec = NetSpec::decode(spec);
    for (const auto& kv : ckpt.tensors) net.params.emplace_back(kv.first, kv.second.clone());
    return net;
}

}  // namespace gals
