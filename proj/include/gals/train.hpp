#pragma once
// Deterministic SGD training harness for the vanilla, class-upweighted and
// attention-guided objectives. Guided training folds the attention penalty
// into one backward pass; inference never needs the maps again.

#include <cstdint>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "gals/config.hpp"
#include "gals/data.hpp"
#include "gals/eval.hpp"
#include "gals/nn.hpp"
#include "gals/supervision.hpp"

namespace gals {

enum class TrainMethod { Vanilla, Upweight, Guided };
std::string train_method_name(TrainMethod m);
TrainMethod train_method_from(const std::string& name);

struct TrainConfig {
    NetSpec net;
    int epochs = 20;
    int batch_size = 16;
    double lr_backbone = 0.01;  // conv blocks
    double lr_head = 0.01;      // linear head
    double momentum = 0.9;
    double weight_decay = 1e-5;
    AttentionLossConfig attention;  // lambda and variant, used by guided only
    TrainMethod method = TrainMethod::Vanilla;
    uint64_t seed = 0;
    int eval_every = 1;  // epochs between val rows; the last epoch always evaluates

    void validate() const;  // lrs > 0, momentum in [0,1), positive counts
    static const std::set<std::string>& config_keys();
    static TrainConfig from_config(const KeyValueConfig& kv);
};

// v <- momentum * v + (g + wd * p); p <- p - lr * v
void sgd_momentum_step(Tensor& param, const Tensor& grad, Tensor& velocity,
                       double lr, double momentum, double weight_decay);

struct EpochRow {
    int epoch = 0;        // 1-based
    std::string split;    // "train" | "val"
    std::string method;
    double ce = 0.0;
    double att = 0.0;     // weighted attention term; 0 where inactive
    double total = 0.0;
    std::vector<double> group_acc;
    double worst = 0.0;
};

std::string history_csv(const std::vector<EpochRow>& rows);

struct TrainResult {
    Checkpoint best;  // highest val worst-group accuracy, earlier epoch on ties
    int best_epoch = 0;
    double best_val_worst = 0.0;
    std::vector<EpochRow> history;
};

// one grid per sample, loaded from <dir>/<id>.<spec-hash-hex>.att; any
// missing or mis-sized map is an error
std::vector<GridMap> load_train_attention(const std::string& dir, uint64_t spec_hash,
                                          const std::vector<Sample>& samples,
                                          int h, int w);

using EpochHook = std::function<void(int epoch, const ConvNet& net)>;

// attention: required for guided (aligned with data.train), ignored
// otherwise. Batches follow a seeded per-epoch permutation with the last
// partial batch kept; a non-finite loss aborts with diagnostics.
TrainResult train_classifier(const DatasetSplit& data, const std::vector<GridMap>* attention,
                             const TrainConfig& cfg, const EpochHook& hook = {});

}  // namespace gals
