#pragma once
// Guided training objectives: cross entropy plus a penalty that keeps the
// classifier's evidence out of regions an attention map marks irrelevant.
// The penalty gates either the input gradients (which makes the loss a
// function of gradients and needs the higher-order tape) or the classifier's
// own class-activation map.

#include <string>
#include <vector>

#include "gals/grounder.hpp"
#include "gals/nn.hpp"
#include "gals/tensor.hpp"

namespace gals {

enum class AttentionVariant { RrrInputGradient, GradcamMatch };
enum class ScoreChoice { SumLogProb, TrueClassLogit };
enum class PixelReduction { Mean, Sum };

// config-string forms: "rrr-input-gradient" | "gradcam-match",
// "sum-log-prob" | "true-class-logit", "mean" | "sum"
std::string attention_variant_name(AttentionVariant v);
AttentionVariant attention_variant_from(const std::string& name);
std::string score_choice_name(ScoreChoice s);
ScoreChoice score_choice_from(const std::string& name);
std::string pixel_reduction_name(PixelReduction r);
PixelReduction pixel_reduction_from(const std::string& name);

struct AttentionLossConfig {
    double lambda = 10000.0;
    AttentionVariant variant = AttentionVariant::RrrInputGradient;
    ScoreChoice score_choice = ScoreChoice::SumLogProb;
    PixelReduction pixel_reduction = PixelReduction::Mean;

    void validate() const;  // lambda >= 0
};

// scalar driving the penalized saliency, summed over the batch: each sample
// contributes its true-class logit or its sum of log-probabilities
Tensor attention_score(const Tensor& logits, const std::vector<int>& labels,
                       ScoreChoice choice);

// lambda * reduce(|input_grad * (1 - map)|). One spatial map per sample gates
// all channels; the reduction covers channels and pixels (mean, or per-sample
// sum) and then averages over the batch. With input_grad on a tape the result
// stays differentiable; a constant gradient (linear model) yields a constant
// penalty.
Tensor rrr_attention_loss(const Tensor& input_grad, const std::vector<GridMap>& a_vl,
                          const AttentionLossConfig& cfg);

// lambda * reduce(|cam * (1 - map)|) with cam the classifier's own
// class-activation map at the last conv block, built on the tape so the
// penalty reaches the parameters; maps are area-averaged down to the feature
// resolution
Tensor gradcam_match_loss(const ConvNet& net, Tape& tape, const Tensor& images,
                          const std::vector<int>& labels, const std::vector<GridMap>& a_vl,
                          const AttentionLossConfig& cfg);

struct LossBreakdown {
    Tensor total;
    Tensor ce;
    Tensor att;  // undefined while the attention branch is inactive
    bool att_active = false;
    double ce_value = 0.0;
    double att_value = 0.0;
    double total_value = 0.0;
    ForwardTrace trace;  // watched parameters and input for the update step
};

// cross entropy plus the configured attention penalty. lambda == 0 skips the
// attention branch entirely: total IS the cross-entropy node, so training
// degenerates to the vanilla objective bit for bit.
LossBreakdown total_loss(const ConvNet& net, Tape& tape, const Tensor& images,
                         const std::vector<int>& labels, const std::vector<GridMap>& a_vl,
                         const AttentionLossConfig& cfg);

}  // namespace gals
