#pragma once
// Small convolutional classifier: conv blocks (conv -> relu -> 2x2 maxpool),
// global average pooling, linear head. The forward pass exposes the watched
// input and the last block's activations so input-gradient penalties and
// class-activation maps can reach back into the graph.

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gals/tensor.hpp"

namespace gals {

struct ConvBlockSpec {
    int out_channels = 8;
    int kernel = 3;
};

struct NetSpec {
    int in_channels = 3;
    int in_h = 32;
    int in_w = 32;
    int classes = 2;
    std::vector<ConvBlockSpec> blocks{{8, 3}, {16, 3}, {32, 3}};

    void validate() const;
    int feature_channels() const { return blocks.back().out_channels; }
    // spatial extent of the last block's (post-pool) feature map
    int feature_h() const { return in_h >> static_cast<int>(blocks.size()); }
    int feature_w() const { return in_w >> static_cast<int>(blocks.size()); }
    std::string encode() const;               // compact text form for checkpoints
    static NetSpec decode(const std::string&);
};

struct ConvNet {
    NetSpec spec;
    std::vector<std::pair<std::string, Tensor>> params;

    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;
};

ConvNet init_parameters(const NetSpec& spec, uint64_t seed);

struct ForwardTrace {
    Tensor input;      // watched image batch
    Tensor last_conv;  // last block output (N, K, fh, fw), on tape
    std::vector<Tensor> watched_params;  // same order as net.params
};

// images: (N, C, H, W) values; watched on the tape internally
Tensor forward(const ConvNet& net, Tape& tape, const Tensor& images,
               ForwardTrace* trace = nullptr);

// mean (or weight-normalized mean) of -log softmax at the true class
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     const std::vector<double>* per_sample_weights = nullptr);

// weight_c = min_count / count_c; every class must appear
std::vector<double> class_weights_inverse_frequency(const std::vector<int>& labels,
                                                    int num_classes);

struct Checkpoint {
    std::vector<std::pair<std::string, std::string>> meta;
    std::vector<std::pair<std::string, Tensor>> tensors;

    void set_meta(const std::string& key, const std::string& value);
    std::string meta_value(const std::string& key) const;  // "" when absent
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

Checkpoint checkpoint_from_net(const ConvNet& net);
ConvNet net_from_checkpoint(const Checkpoint& ckpt);

}  // namespace gals
