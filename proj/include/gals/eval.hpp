#pragma once
// Metric battery: per-group accuracies, fairness metrics (prediction-ratio
// delta and base-2 Jensen-Shannon outcome divergence), black-box RISE
// saliency, and the Pointing Game.

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gals/data.hpp"
#include "gals/grounder.hpp"
#include "gals/nn.hpp"

namespace gals {

// ---- group accuracy ----

struct GroupReport {
    std::vector<double> per_group;  // accuracy per group id
    std::vector<int> sizes;
    double mean = 0.0;  // unweighted mean over groups
    double worst = 0.0;
};

// group ids must cover 0..max contiguously; every group nonempty
GroupReport group_accuracy(const std::vector<int>& predictions,
                           const std::vector<int>& labels,
                           const std::vector<int>& groups);

// ---- fairness ----
// rows are (predicted A, predicted B, predicted Neutral) counts or fractions
// for A-labeled and B-labeled samples respectively

// |1 - predicted-B / predicted-A| with both totals pooled over the two rows
double ratio_delta(const std::array<double, 3>& a_row, const std::array<double, 3>& b_row);

// rows must be probability vectors; each is aligned to (correct, wrong,
// neutral) and the base-2 Jensen-Shannon divergence of the aligned pair is
// returned. Identical outcome profiles give 0; a row fully misread as the
// other class against a fully correct one gives the bound 1.
double outcome_divergence(const std::array<double, 3>& a_row,
                          const std::array<double, 3>& b_row);

struct FairnessReport {
    std::array<double, 3> a_row{};  // fractions over (A, B, Neutral) predictions
    std::array<double, 3> b_row{};
    double ratio_delta = 0.0;
    double outcome_divergence = 0.0;
};

// metric stage: labels in {0 A, 1 B, 2 Neutral}, rows over A- and B-labeled
// samples only; degenerate zero-predicted-A data errors out of ratio_delta
FairnessReport fairness_from_predictions(const std::vector<int>& predictions,
                                         const std::vector<int>& labels);
// predict + metric stage; the net must have exactly 3 classes
FairnessReport fairness_eval(const ConvNet& net, const std::vector<Sample>& samples);

// ---- classifier predictions ----

// argmax of the logits, ties toward the lower class id
std::vector<int> predict(const ConvNet& net, const std::vector<Sample>& samples);
GroupReport evaluate_groups(const ConvNet& net, const std::vector<Sample>& samples);

// ---- RISE ----

struct RiseConfig {
    int n_masks = 500;
    int grid = 4;
    double keep_prob = 0.5;
    uint64_t seed = 0;
    // average over all 2^(grid^2) cell masks, probability-weighted, instead
    // of sampling; cell-constant masks, no sub-cell shift
    bool exhaustive = false;

    void validate() const;
};

// maps a masked image (same shape as the input) to a class score
using MaskScorer = std::function<double(const Tensor&)>;

// softmax probability of target_class under the net
MaskScorer net_prob_scorer(const ConvNet& net, int target_class);

// image (1, C, H, W); keep-prob Bernoulli cell grids, bilinearly upsampled
// with a random sub-cell shift; saliency = sum score_i * mask_i / (N * p)
GridMap rise_saliency(const MaskScorer& scorer, const Tensor& image, const RiseConfig& cfg);

// ---- pointing game ----

struct PointingGameReport {
    std::vector<char> passes;  // 1 pass, 0 fail
    double rate = 0.0;
    std::string tie_rule = "first row-major";
};

// pass iff the saliency argmax pixel (ties toward the first in row-major
// order) lies where the mask is 1; every mask needs at least one 1
PointingGameReport pointing_game(const std::vector<GridMap>& saliency,
                                 const std::vector<std::vector<uint8_t>>& masks);

// ---- report serialization ----

std::string group_csv(const GroupReport& r);
std::string fairness_csv(const FairnessReport& r);
std::string pointing_csv(const PointingGameReport& r);
// aligned-column text, one row per true class over predicted columns
std::string fairness_table(const FairnessReport& r);
std::string group_table(const GroupReport& r);

}  // namespace gals
