#pragma once
// Synthetic bias-regime datasets. Each sample is a textured foreground glyph
// composited on a procedural background, with the exact foreground pixel set
// recorded as the mask Z. Backgrounds correlate with labels at a configurable
// rate so a lazy classifier can score well on train and collapse on the
// minority groups.

#include <cstdint>
#include <string>
#include <vector>

namespace gals {

struct Sample {
    std::string id;
    int label = 0;
    int group = 0;
    int fg_kind = 0;  // foreground texture variant
    int bg_kind = 0;  // background style
    bool flipped = false;
    bool distractor = false;
    std::vector<double> image;  // (3, h, w) planar, snapped to 8-bit levels
    std::vector<uint8_t> mask;  // h*w, 0 or 1
};

struct DatasetSplit {
    int h = 32, w = 32;
    int classes = 2;
    int groups = 4;
    std::string task = "foreground";  // foreground | background | meat | apparent
    std::vector<Sample> train, val, test;
};

struct BiasGenConfig {
    std::string task = "foreground";
    double rho = 0.95;          // P(correlated background | class) in train
    int train_per_class = 200;
    int val_per_group = 20;     // per (class, background) cell
    int test_per_group = 40;
    std::vector<int> train_group_counts;  // optional exact per-group override
    double label_noise = 0.0;
    double distractor_cooccurrence = 0.0;
    int size = 32;
    uint64_t seed = 0;
    // apparent-attribute analog
    int train_a = 1056, train_b = 480, train_neutral = 282;
    int eval_per_class = 100;   // val and test count for each of A, B
};

BiasGenConfig preset_config(const std::string& name);
std::vector<std::string> preset_names();

DatasetSplit generate_biased_shapes(const BiasGenConfig& cfg);
DatasetSplit generate_noisy_meat_analog(const BiasGenConfig& cfg);
DatasetSplit generate_apparent_attribute_analog(const BiasGenConfig& cfg);

// Swaps the prediction target to the background style on val/test. Requires a
// perfectly correlated split, where train labels already agree with both tasks.
DatasetSplit relabel_background_task(const DatasetSplit& split);

// ---- concept vocabulary ----
const std::vector<std::string>& concept_vocabulary();
int token_id(const std::string& name);  // ConfigError on unknown token

// Tokens naming the concepts visible in the sample: generic foreground, the
// background style, the foreground texture (or the generic token when the
// grounder should stay class-agnostic), the glyph kind, the distractor.
std::vector<int> caption_tokens_for_sample(const Sample& s, const std::string& task,
                                           bool class_agnostic);

// ---- disk layout ----
// <dir>/meta.txt, <dir>/manifest.csv, <dir>/images/<id>.ppm, <dir>/masks/<id>.pgm
void save_dataset(const std::string& dir, const DatasetSplit& split);
DatasetSplit load_dataset(const std::string& dir);

// ---- image files ----
void write_ppm(const std::string& path, int h, int w, const std::vector<double>& chw);
std::vector<double> read_ppm(const std::string& path, int* h, int* w);
void write_pgm(const std::string& path, int h, int w, const std::vector<uint8_t>& mask01);
std::vector<uint8_t> read_pgm(const std::string& path, int* h, int* w);

}  // namespace gals
