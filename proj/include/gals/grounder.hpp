#pragma once
// Language-driven attention. A toy two-tower contrastive model maps images
// and concept-token prompts into a shared embedding space; class-activation
// maps of the image-text similarity, normalized and ensembled across prompts,
// become per-image attention maps. An oracle variant derives the map from the
// ground-truth mask instead, as an upper bound and test fixture.

#include <cstdint>
#include <string>
#include <vector>

#include "gals/data.hpp"
#include "gals/nn.hpp"
#include "gals/tensor.hpp"

namespace gals {

// ---- prompts ----

struct Prompt {
    std::vector<int> tokens;  // ids into concept_vocabulary()
    std::string display;
};

struct LanguageSpec {
    enum class Mode { Average, Max };
    std::vector<Prompt> prompts;
    Mode mode = Mode::Average;
    bool fallback_on_zero = true;

    void validate() const;       // nonempty prompts, tokens in vocabulary
    std::string canonical() const;  // stable text form, hashed for cache keys
    uint64_t hash() const;
};

// text form: "mode=average|max", "fallback=on|off", one "prompt=<token names>"
// line per prompt
LanguageSpec parse_language_spec_text(const std::string& text);
LanguageSpec parse_language_spec_file(const std::string& path);
Prompt make_prompt(const std::vector<std::string>& token_names);

// ---- model ----

struct GrounderSpec {
    int in_channels = 3;
    int in_h = 32;
    int in_w = 32;
    std::vector<ConvBlockSpec> blocks{{8, 3}, {16, 3}};
    int embed_dim = 16;
    int vocab = 12;

    void validate() const;
    int feature_channels() const { return blocks.back().out_channels; }
    int feature_h() const { return in_h >> static_cast<int>(blocks.size()); }
    int feature_w() const { return in_w >> static_cast<int>(blocks.size()); }
    std::string encode() const;
    static GrounderSpec decode(const std::string&);
};

struct TwoTowerGrounder {
    GrounderSpec spec;
    std::vector<std::pair<std::string, Tensor>> params;
    bool trained = false;

    Tensor& param(const std::string& name);
    const Tensor& param(const std::string& name) const;
    double temperature() const;  // tau = exp(-log_inv_tau), always > 0
};

TwoTowerGrounder init_grounder(const GrounderSpec& spec, uint64_t seed);

// stable id of the parameter values, for attention-map provenance
std::string grounder_id(const TwoTowerGrounder& g);

void save_grounder(const std::string& path, const TwoTowerGrounder& g);
TwoTowerGrounder load_grounder(const std::string& path);

struct GrounderTrace {
    Tensor input;
    Tensor last_conv;  // (N, K, fh, fw)
    std::vector<Tensor> watched_params;
};

// L2-normalized embeddings (N, E); images watched on the tape internally
Tensor image_embeddings(const TwoTowerGrounder& g, Tape& tape, const Tensor& images,
                        GrounderTrace* trace = nullptr);
// L2-normalized mean-of-token embeddings (P, E) for a batch of prompts;
// watched_table receives the on-tape token table when given
Tensor prompt_embeddings(const TwoTowerGrounder& g, Tape& tape,
                         const std::vector<Prompt>& prompts, Tensor* watched_table = nullptr);

// symmetric cross entropy over the cosine-similarity matrix divided by tau;
// logit_scale is the on-tape scalar 1/tau
Tensor contrastive_loss(const Tensor& image_emb, const Tensor& text_emb,
                        const Tensor& logit_scale);

// ---- attention maps ----

struct GridMap {
    int h = 0, w = 0;
    std::vector<double> v;
};

struct AttentionMap {
    GridMap grid;    // classifier input resolution, values in [0,1]
    GridMap source;  // pre-upsample resolution, nonnegative
    std::vector<std::string> prompts;
    std::string mode;        // "average" | "max" | "oracle"
    std::string grounder;    // grounder id or "oracle"
    uint64_t spec_hash = 0;
};

// map_k = relu(sum_k alpha_k A_k) with alpha_k the spatial mean of
// d(score)/d(A_k); score must be rank 0 and reach last_conv on the tape
GridMap gradcam(const Tensor& score, const Tensor& last_conv);

// (v - min) / (max - min); a constant map normalizes to all zeros, carrying
// no localization evidence rather than a fake uniform preference
GridMap normalize_minmax(const GridMap& m);

// elementwise average or max; with fallback on, all-zero maps are dropped
// before combining (unless every map is zero)
GridMap ensemble(const std::vector<GridMap>& maps, LanguageSpec::Mode mode,
                 bool fallback_on_zero);

// per prompt: similarity score -> gradcam -> normalize; ensemble; upsample
AttentionMap ground(const TwoTowerGrounder& g, const Tensor& image, const LanguageSpec& spec);

// box-blurred ground-truth mask plus seeded uniform noise, min-max
// normalized; a constant blurred mask short-circuits to all ones (nonempty)
// or all zeros (empty) regardless of noise
AttentionMap oracle_ground(const Sample& sample, int h, int w, int blur_radius,
                           double noise_level, uint64_t seed);

// ---- cache ----
// <dir>/<image-id>.<spec-hash-hex>.att, atomic write-then-rename
std::string attention_cache_path(const std::string& dir, const std::string& image_id,
                                 uint64_t spec_hash);
void save_attention(const std::string& path, const AttentionMap& map);
AttentionMap load_attention(const std::string& path);
// returns the cached map when present, else grounds and writes it
AttentionMap ground_cached(const TwoTowerGrounder& g, const Sample& sample,
                           const LanguageSpec& spec, const std::string& cache_dir);

// ---- training ----

struct GrounderTrainConfig {
    int epochs = 30;
    int batch_size = 16;
    double lr = 0.02;
    double momentum = 0.9;
    double weight_decay = 0.0;
    double grad_clip = 5.0;  // global norm cap; 0 disables
    bool class_agnostic = false;  // captions carry the generic glyph token
    uint64_t seed = 0;
};

struct GrounderTrainReport {
    std::vector<double> epoch_loss;
    double final_loss = 0.0;
};

// contrastive training on (image, caption) pairs; batches are filled so no
// two rows share a caption, keeping the match labels unambiguous
TwoTowerGrounder train_grounder(const DatasetSplit& data, const GrounderSpec& spec,
                                const GrounderTrainConfig& cfg,
                                GrounderTrainReport* report = nullptr);

// fraction of samples whose image embedding ranks its own caption first
// among the distinct captions present in `samples`
double retrieval_accuracy(const TwoTowerGrounder& g, const std::vector<Sample>& samples,
                          const std::string& task, bool class_agnostic);

// argmax of cosine similarity against one prompt per class; ties break toward
// the lowest class id
int zero_shot_classify(const TwoTowerGrounder& g, const Tensor& image,
                       const std::vector<Prompt>& class_prompts, int num_classes);

struct ProbeConfig {
    int steps = 400;
    double lr = 0.5;
    double momentum = 0.9;
    uint64_t seed = 0;
};

struct LinearProbe {
    Tensor weight;  // (E, C)
    Tensor bias;    // (C)
};

// multinomial logistic regression on frozen, detached embeddings
LinearProbe linear_probe(const TwoTowerGrounder& g, const std::vector<Sample>& samples,
                         int num_classes, const ProbeConfig& cfg);
int probe_predict(const LinearProbe& probe, const TwoTowerGrounder& g, const Tensor& image);
double probe_accuracy(const LinearProbe& probe, const TwoTowerGrounder& g,
                      const std::vector<Sample>& samples);

// planar image vector -> (1, C, H, W) tensor
Tensor image_tensor(const Sample& s, int h, int w);

}  // namespace gals
