#include "gals/supervision.hpp"

#include <cmath>

#include "gals/errors.hpp"

namespace gals {

namespace {

void check_maps(const std::vector<GridMap>& a_vl, int n, int h, int w, const char* what) {
    if (static_cast<int>(a_vl.size()) != n)
        throw ConfigError(std::string(what) + ": got " + std::to_string(a_vl.size()) +
                          " attention maps for a batch of " + std::to_string(n));
    for (const GridMap& m : a_vl) {
        if (m.h != h || m.w != w ||
            static_cast<int>(m.v.size()) != m.h * m.w)
            throw ConfigError(std::string(what) + ": attention map extent " +
                              std::to_string(m.h) + "x" + std::to_string(m.w) +
                              " does not match " + std::to_string(h) + "x" +
                              std::to_string(w));
        for (double v : m.v)
            if (!(v >= 0.0 && v <= 1.0))
                throw ConfigError(std::string(what) +
                                  ": attention map values must lie in [0,1]");
    }
}

// constant (n, c, h, w) gate holding 1 - map, the same spatial map for every
// channel of a sample
Tensor irrelevance_gate(const std::vector<GridMap>& a_vl, int c, int h, int w) {
    const int n = static_cast<int>(a_vl.size());
    Tensor gate({n, c, h, w});
    double* out = gate.data();
    for (int i = 0; i < n; ++i) {
        const std::vector<double>& m = a_vl[static_cast<size_t>(i)].v;
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < h * w; ++p) *out++ = 1.0 - m[static_cast<size_t>(p)];
    }
    return gate;
}

Tensor reduce_penalty(const Tensor& gated_abs, const AttentionLossConfig& cfg) {
    const int n = gated_abs.dim(0);
    const double divisor =
        cfg.pixel_reduction == PixelReduction::Mean
            ? static_cast<double>(gated_abs.numel())
            : static_cast<double>(n);
    return scale(sum_all(gated_abs), cfg.lambda / divisor);
}

Tensor cam_on_tape(const Tensor& logits, const ForwardTrace& tr,
                   const std::vector<int>& labels, ScoreChoice choice) {
    Tensor score = attention_score(logits, labels, choice);
    Tensor g = backward(score, {tr.last_conv}, true)[0];
    const int k = tr.last_conv.dim(1), fh = tr.last_conv.dim(2), fw = tr.last_conv.dim(3);
    Tensor alpha = scale(sum_axis(sum_axis(g, 3), 2), 1.0 / (fh * fw));  // (n,k,1,1)
    Tensor weighted = mul(broadcast_axis(broadcast_axis(alpha, 2, fh), 3, fw), tr.last_conv);
    return relu(sum_axis(weighted, 1));  // (n,1,fh,fw)
}

Tensor gradcam_match_from_trace(const Tensor& logits, const ForwardTrace& tr,
                                const std::vector<int>& labels,
                                const std::vector<GridMap>& a_vl, int in_h, int in_w,
                                const AttentionLossConfig& cfg) {
    const int n = tr.last_conv.dim(0), fh = tr.last_conv.dim(2), fw = tr.last_conv.dim(3);
    check_maps(a_vl, n, in_h, in_w, "gradcam match loss");
    std::vector<GridMap> down(a_vl.size());
    for (size_t i = 0; i < a_vl.size(); ++i) {
        down[i].h = fh;
        down[i].w = fw;
        down[i].v = area_downsample_grid(a_vl[i].v, in_h, in_w, fh, fw);
    }
    Tensor cam = cam_on_tape(logits, tr, labels, cfg.score_choice);
    Tensor gate = irrelevance_gate(down, 1, fh, fw);
    return reduce_penalty(abs(mul(cam, gate)), cfg);
}

}  // namespace

std::string attention_variant_name(AttentionVariant v) {
    return v == AttentionVariant::RrrInputGradient ? "rrr-input-gradient" : "gradcam-match";
}

AttentionVariant attention_variant_from(const std::string& name) {
    if (name == "rrr-input-gradient") return AttentionVariant::RrrInputGradient;
    if (name == "gradcam-match") return AttentionVariant::GradcamMatch;
    throw ConfigError("unknown attention variant '" + name +
                      "' (expected rrr-input-gradient or gradcam-match)");
}

std::string score_choice_name(ScoreChoice s) {
    return s == ScoreChoice::SumLogProb ? "sum-log-prob" : "true-class-logit";
}

ScoreChoice score_choice_from(const std::string& name) {
    if (name == "sum-log-prob") return ScoreChoice::SumLogProb;
    if (name == "true-class-logit") return ScoreChoice::TrueClassLogit;
    throw ConfigError("unknown score choice '" + name +
                      "' (expected sum-log-prob or true-class-logit)");
}

std::string pixel_reduction_name(PixelReduction r) {
    return r == PixelReduction::Mean ? "mean" : "sum";
}

PixelReduction pixel_reduction_from(const std::string& name) {
    if (name == "mean") return PixelReduction::Mean;
    if (name == "sum") return PixelReduction::Sum;
    throw ConfigError("unknown pixel reduction '" + name + "' (expected mean or sum)");
}

void AttentionLossConfig::validate() const {
    if (!(lambda >= 0.0))
        throw ConfigError("attention loss weight must be >= 0, got " + std::to_string(lambda));
}

Tensor attention_score(const Tensor& logits, const std::vector<int>& labels,
                       ScoreChoice choice) {
    if (logits.rank() != 2)
        throw ConfigError("attention score: logits must be (batch, classes)");
    const int n = logits.dim(0), c = logits.dim(1);
    if (static_cast<int>(labels.size()) != n)
        throw ConfigError("attention score: got " + std::to_string(labels.size()) +
                          " labels for a batch of " + std::to_string(n));
    for (int y : labels)
        if (y < 0 || y >= c)
            throw ConfigError("attention score: label " + std::to_string(y) +
                              " outside [0," + std::to_string(c) + ")");
    if (choice == ScoreChoice::SumLogProb) return sum_all(log_softmax(logits));
    Tensor onehot({n, c});
    for (int i = 0; i < n; ++i) onehot.data()[i * c + labels[static_cast<size_t>(i)]] = 1.0;
    return sum_all(mul(logits, onehot));
}

Tensor rrr_attention_loss(const Tensor& input_grad, const std::vector<GridMap>& a_vl,
                          const AttentionLossConfig& cfg) {
    cfg.validate();
    if (input_grad.rank() != 4)
        throw ConfigError("input gradient must be a (batch, channels, h, w) tensor");
    // a constant (off-tape) gradient is legitimate: linear models have one,
    // and the penalty is then simply constant in the parameters
    const int n = input_grad.dim(0), c = input_grad.dim(1);
    const int h = input_grad.dim(2), w = input_grad.dim(3);
    check_maps(a_vl, n, h, w, "attention loss");
    Tensor gate = irrelevance_gate(a_vl, c, h, w);
    return reduce_penalty(abs(mul(input_grad, gate)), cfg);
}

Tensor gradcam_match_loss(const ConvNet& net, Tape& tape, const Tensor& images,
                          const std::vector<int>& labels, const std::vector<GridMap>& a_vl,
                          const AttentionLossConfig& cfg) {
    cfg.validate();
    ForwardTrace tr;
    Tensor logits = forward(net, tape, images, &tr);
    return gradcam_match_from_trace(logits, tr, labels, a_vl, net.spec.in_h, net.spec.in_w,
                                    cfg);
}

LossBreakdown total_loss(const ConvNet& net, Tape& tape, const Tensor& images,
                         const std::vector<int>& labels, const std::vector<GridMap>& a_vl,
                         const AttentionLossConfig& cfg) {
    cfg.validate();
    LossBreakdown out;
    Tensor logits = forward(net, tape, images, &out.trace);
    const ForwardTrace& tr = out.trace;

    out.ce = cross_entropy(logits, labels);
    if (cfg.lambda == 0.0) {
        out.total = out.ce;
    } else {
        if (cfg.variant == AttentionVariant::RrrInputGradient) {
            const int h = net.spec.in_h, w = net.spec.in_w;
            check_maps(a_vl, images.dim(0), h, w, "attention loss");
            Tensor score = attention_score(logits, labels, cfg.score_choice);
            Tensor ig = input_gradient(score, tr.input);
            out.att = rrr_attention_loss(ig, a_vl, cfg);
        } else {
            out.att = gradcam_match_from_trace(logits, tr, labels, a_vl, net.spec.in_h,
                                               net.spec.in_w, cfg);
        }
        out.att_active = true;
        out.total = add(out.ce, out.att);
        out.att_value = out.att.item();
    }
    out.ce_value = out.ce.item();
    out.total_value = out.total.item();
    return out;
}

}  // namespace gals
