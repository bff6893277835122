#include "gals/cli.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "gals/config.hpp"
#include "gals/data.hpp"
#include "gals/errors.hpp"
#include "gals/eval.hpp"
#include "gals/grounder.hpp"
#include "gals/nn.hpp"
#include "gals/rng.hpp"
#include "gals/train.hpp"

namespace gals {

namespace {

namespace fs = std::filesystem;

constexpr const char* kBuildId = "gals-0.1";

std::string hex16(uint64_t v) {
    char b[32];
    std::snprintf(b, sizeof(b), "%016llx", static_cast<unsigned long long>(v));
    return b;
}

std::string fmt(double v) {
    char b[64];
    std::snprintf(b, sizeof(b), "%.12g", v);
    return b;
}

const std::vector<Sample>& split_of(const DatasetSplit& d, const std::string& name) {
    if (name == "train") return d.train;
    if (name == "val") return d.val;
    if (name == "test") return d.test;
    throw ConfigError("unknown split '" + name + "' (expected train, val or test)");
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + path);
    os << text;
    if (!os.flush()) throw IoError("short write to " + path);
}

uint64_t cache_meta_hash(const std::string& cache_dir) {
    std::string meta = cache_dir + "/cache_meta.txt";
    if (!fs::exists(meta))
        throw MissingDependency("attention cache " + cache_dir +
                                " has no cache_meta.txt (run `gals ground` first)");
    KeyValueConfig kv = KeyValueConfig::parse_file(
        meta, {"spec_hash", "mode", "source", "count", "split"});
    return std::stoull(kv.require_string("spec_hash"), nullptr, 16);
}

// panels side by side with a 2-pixel white gap, all channels clamped
void write_panels(const std::string& path, int h, int w,
                  const std::vector<std::vector<double>>& panels_chw) {
    const int gap = 2;
    const int n = static_cast<int>(panels_chw.size());
    const int out_w = n * w + (n - 1) * gap;
    std::vector<double> out(static_cast<size_t>(3) * h * out_w, 1.0);
    for (int p = 0; p < n; ++p) {
        const std::vector<double>& src = panels_chw[static_cast<size_t>(p)];
        const int x0 = p * (w + gap);
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < h; ++y)
                for (int x = 0; x < w; ++x) {
                    double v = src[(static_cast<size_t>(c) * h + y) * w + x];
                    out[(static_cast<size_t>(c) * h + y) * out_w + (x0 + x)] =
                        std::clamp(v, 0.0, 1.0);
                }
    }
    write_ppm(path, h, out_w, out);
}

std::vector<double> gray_chw(const GridMap& g) {
    std::vector<double> out;
    out.reserve(g.v.size() * 3);
    for (int c = 0; c < 3; ++c) out.insert(out.end(), g.v.begin(), g.v.end());
    return out;
}

struct GroundStats {
    int computed = 0;
    int cached = 0;
    double in_min = 1.0, in_mean = 0.0, in_max = 0.0;
    double out_min = 1.0, out_mean = 0.0, out_max = 0.0;
};

// per-image mean attention inside and outside the mask, aggregated
void attention_mass(const std::string& dir, uint64_t hash,
                    const std::vector<Sample>& samples, GroundStats* st) {
    double in_sum = 0.0, out_sum = 0.0;
    int counted = 0;
    for (const Sample& s : samples) {
        AttentionMap m = load_attention(attention_cache_path(dir, s.id, hash));
        double si = 0.0, so = 0.0;
        int ni = 0, no = 0;
        for (size_t i = 0; i < m.grid.v.size(); ++i) {
            if (i < s.mask.size() && s.mask[i]) {
                si += m.grid.v[i];
                ++ni;
            } else {
                so += m.grid.v[i];
                ++no;
            }
        }
        if (ni == 0 || no == 0) continue;
        double mi = si / ni, mo = so / no;
        st->in_min = std::min(st->in_min, mi);
        st->in_max = std::max(st->in_max, mi);
        st->out_min = std::min(st->out_min, mo);
        st->out_max = std::max(st->out_max, mo);
        in_sum += mi;
        out_sum += mo;
        ++counted;
    }
    if (counted > 0) {
        st->in_mean = in_sum / counted;
        st->out_mean = out_sum / counted;
    }
}

}  // namespace

void write_run_manifest(const std::string& dir, const RunManifest& m) {
    std::ostringstream os;
    os << "command=" << m.command << "\n";
    os << "config=" << (m.config_path.empty() ? "-" : m.config_path) << "\n";
    os << "seed=" << m.seed << "\n";
    os << "build=" << m.build_id << "\n";
    os << "out=" << m.out_dir << "\n";
    for (const auto& kv : m.config_echo) os << kv.first << "=" << kv.second << "\n";
    write_text(dir + "/manifest.txt", os.str());
}

DirLock::DirLock(const std::string& dir) : path_(dir + "/.gals.lock") {
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0)
        throw IoError("output directory " + dir + " is locked (" + path_ +
                      " exists; remove it if no other run is active)");
}

DirLock::~DirLock() {
    if (fd_ >= 0) {
        ::close(fd_);
        ::unlink(path_.c_str());
    }
}

int run_cli(int argc, char** argv) {
    CLI::App app{"synthetic bias benchmark: data, grounding, training, evaluation"};
    app.require_subcommand(1);

    // ---- gen-data ----
    auto* gen = app.add_subcommand("gen-data", "synthesize a biased dataset");
    std::string gen_preset = "waterbirds95-analog", gen_out;
    uint64_t gen_seed = 0;
    double gen_rho = 0.0, gen_label_noise = 0.0;
    int gen_train_per_class = 0, gen_val_per_group = 0, gen_test_per_group = 0, gen_size = 0;
    gen->add_option("--preset", gen_preset, "dataset preset");
    gen->add_option("--seed", gen_seed, "root seed");
    gen->add_option("--out", gen_out, "output directory")->required();
    auto* o_rho = gen->add_option("--rho", gen_rho, "train label/background correlation");
    auto* o_tpc = gen->add_option("--train-per-class", gen_train_per_class, "");
    auto* o_vpg = gen->add_option("--val-per-group", gen_val_per_group, "");
    auto* o_tpg = gen->add_option("--test-per-group", gen_test_per_group, "");
    auto* o_size = gen->add_option("--size", gen_size, "image extent");
    auto* o_ln = gen->add_option("--label-noise", gen_label_noise, "");
    gen->callback([&] {
        BiasGenConfig cfg = preset_config(gen_preset);
        if (o_rho->count()) cfg.rho = gen_rho;
        if (o_tpc->count()) cfg.train_per_class = gen_train_per_class;
        if (o_vpg->count()) cfg.val_per_group = gen_val_per_group;
        if (o_tpg->count()) cfg.test_per_group = gen_test_per_group;
        if (o_size->count()) cfg.size = gen_size;
        if (o_ln->count()) cfg.label_noise = gen_label_noise;
        cfg.seed = gen_seed;
        fs::create_directories(gen_out);
        DirLock lock(gen_out);
        DatasetSplit split;
        if (cfg.task == "meat") split = generate_noisy_meat_analog(cfg);
        else if (cfg.task == "apparent") split = generate_apparent_attribute_analog(cfg);
        else split = generate_biased_shapes(cfg);
        save_dataset(gen_out, split);
        RunManifest m;
        m.command = "gen-data";
        m.seed = gen_seed;
        m.build_id = kBuildId;
        m.out_dir = gen_out;
        m.config_echo = {{"preset", gen_preset},
                         {"task", cfg.task},
                         {"rho", fmt(cfg.rho)},
                         {"train_per_class", std::to_string(cfg.train_per_class)},
                         {"val_per_group", std::to_string(cfg.val_per_group)},
                         {"test_per_group", std::to_string(cfg.test_per_group)},
                         {"size", std::to_string(cfg.size)},
                         {"label_noise", fmt(cfg.label_noise)}};
        write_run_manifest(gen_out, m);
        std::cout << "wrote " << split.train.size() << " train / " << split.val.size()
                  << " val / " << split.test.size() << " test samples (" << split.groups
                  << " groups) to " << gen_out << "\n";
    });

    // ---- train-grounder ----
    auto* tg = app.add_subcommand("train-grounder", "contrastive grounder training");
    std::string tg_data, tg_out, tg_arch;
    uint64_t tg_seed = 7;
    int tg_epochs = 60, tg_batch = 4;
    double tg_lr = 0.02;
    bool tg_agnostic = false;
    tg->add_option("--data", tg_data, "dataset directory")->required();
    tg->add_option("--out", tg_out, "output directory")->required();
    tg->add_option("--seed", tg_seed, "");
    tg->add_option("--epochs", tg_epochs, "");
    tg->add_option("--batch-size", tg_batch, "");
    tg->add_option("--lr", tg_lr, "");
    tg->add_option("--arch", tg_arch, "grounder spec string");
    tg->add_flag("--class-agnostic", tg_agnostic, "generic glyph token in captions");
    tg->callback([&] {
        DatasetSplit data = load_dataset(tg_data);
        GrounderSpec gs;
        if (!tg_arch.empty()) gs = GrounderSpec::decode(tg_arch);
        else {
            gs.in_h = data.h;
            gs.in_w = data.w;
        }
        GrounderTrainConfig tc;
        tc.epochs = tg_epochs;
        tc.batch_size = tg_batch;
        tc.lr = tg_lr;
        tc.seed = tg_seed;
        tc.class_agnostic = tg_agnostic;
        fs::create_directories(tg_out);
        DirLock lock(tg_out);
        GrounderTrainReport rep;
        TwoTowerGrounder g = train_grounder(data, gs, tc, &rep);
        save_grounder(tg_out + "/grounder.bin", g);
        double retrieval = retrieval_accuracy(g, data.val, data.task, tg_agnostic);
        RunManifest m;
        m.command = "train-grounder";
        m.seed = tg_seed;
        m.build_id = kBuildId;
        m.out_dir = tg_out;
        m.config_echo = {{"data", tg_data},
                         {"arch", gs.encode()},
                         {"epochs", std::to_string(tg_epochs)},
                         {"batch_size", std::to_string(tg_batch)},
                         {"lr", fmt(tg_lr)},
                         {"class_agnostic", tg_agnostic ? "1" : "0"},
                         {"grounder_id", grounder_id(g)}};
        write_run_manifest(tg_out, m);
        std::cout << "final loss " << fmt(rep.final_loss) << ", val retrieval "
                  << fmt(retrieval) << ", grounder " << grounder_id(g) << "\n";
    });

    // ---- ground ----
    auto* gr = app.add_subcommand("ground", "precompute attention maps");
    std::string gr_data, gr_out, gr_grounder, gr_spec, gr_split = "train";
    bool gr_oracle = false;
    double gr_noise = 0.1;
    int gr_blur = 1;
    uint64_t gr_seed = 0;
    gr->add_option("--data", gr_data, "dataset directory")->required();
    gr->add_option("--out", gr_out, "attention cache directory")->required();
    gr->add_flag("--oracle", gr_oracle, "derive maps from ground-truth masks");
    gr->add_option("--grounder", gr_grounder, "grounder checkpoint");
    gr->add_option("--spec", gr_spec, "language spec file");
    gr->add_option("--noise", gr_noise, "oracle noise level");
    gr->add_option("--blur", gr_blur, "oracle blur radius");
    gr->add_option("--seed", gr_seed, "oracle noise seed");
    gr->add_option("--split", gr_split, "dataset split");
    gr->callback([&] {
        DatasetSplit data = load_dataset(gr_data);
        const std::vector<Sample>& samples = split_of(data, gr_split);
        fs::create_directories(gr_out);
        DirLock lock(gr_out);
        GroundStats st;
        uint64_t cache_hash = 0;
        std::string mode, source;
        if (gr_oracle) {
            std::ostringstream os;
            os << "oracle;r=" << gr_blur << ";noise=" << gr_noise << ";seed=" << gr_seed;
            cache_hash = hash64(os.str());
            mode = "oracle";
            source = "oracle";
            for (size_t i = 0; i < samples.size(); ++i) {
                std::string path = attention_cache_path(gr_out, samples[i].id, cache_hash);
                if (fs::exists(path)) {
                    ++st.cached;
                    continue;
                }
                AttentionMap m = oracle_ground(samples[i], data.h, data.w, gr_blur, gr_noise,
                                               derive_seed("oracle-att", gr_seed, i));
                // one cache key per run configuration; the prompt string keeps
                // the per-sample noise seed for provenance
                m.spec_hash = cache_hash;
                save_attention(path, m);
                ++st.computed;
            }
        } else {
            if (gr_grounder.empty())
                throw ConfigError("ground: need --oracle or --grounder <checkpoint>");
            if (gr_spec.empty()) throw ConfigError("ground: need --spec <file>");
            TwoTowerGrounder g = load_grounder(gr_grounder);
            LanguageSpec spec = parse_language_spec_file(gr_spec);
            cache_hash = spec.hash();
            mode = spec.mode == LanguageSpec::Mode::Average ? "average" : "max";
            source = grounder_id(g);
            for (const Sample& s : samples) {
                bool was = fs::exists(attention_cache_path(gr_out, s.id, cache_hash));
                ground_cached(g, s, spec, gr_out);
                ++(was ? st.cached : st.computed);
            }
        }
        attention_mass(gr_out, cache_hash, samples, &st);
        std::ostringstream meta;
        meta << "spec_hash=" << hex16(cache_hash) << "\nmode=" << mode << "\nsource=" << source
             << "\ncount=" << samples.size() << "\nsplit=" << gr_split << "\n";
        write_text(gr_out + "/cache_meta.txt", meta.str());
        RunManifest m;
        m.command = "ground";
        m.seed = gr_seed;
        m.build_id = kBuildId;
        m.out_dir = gr_out;
        m.config_echo = {{"data", gr_data},
                         {"split", gr_split},
                         {"mode", mode},
                         {"source", source},
                         {"spec_hash", hex16(cache_hash)}};
        if (gr_oracle) {
            m.config_echo.emplace_back("noise", fmt(gr_noise));
            m.config_echo.emplace_back("blur", std::to_string(gr_blur));
        } else {
            m.config_echo.emplace_back("spec", gr_spec);
            m.config_echo.emplace_back("grounder", gr_grounder);
        }
        write_run_manifest(gr_out, m);
        std::cout << st.computed << " computed, " << st.cached << " cached\n";
        std::cout << "attention inside Z: min " << fmt(st.in_min) << " mean "
                  << fmt(st.in_mean) << " max " << fmt(st.in_max) << " | outside: min "
                  << fmt(st.out_min) << " mean " << fmt(st.out_mean) << " max "
                  << fmt(st.out_max) << "\n";
    });

    // ---- train ----
    auto* tr = app.add_subcommand("train", "train a classifier");
    std::string tr_data, tr_config, tr_out, tr_attention;
    uint64_t tr_seed = 0;
    tr->add_option("--data", tr_data, "dataset directory")->required();
    tr->add_option("--config", tr_config, "key=value training config")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_option("--attention", tr_attention, "attention cache (guided)");
    auto* o_tr_seed = tr->add_option("--seed", tr_seed, "overrides the config seed");
    tr->callback([&] {
        DatasetSplit data = load_dataset(tr_data);
        KeyValueConfig kv = KeyValueConfig::parse_file(tr_config, TrainConfig::config_keys());
        if (o_tr_seed->count()) kv.set("seed", std::to_string(tr_seed));
        TrainConfig cfg = TrainConfig::from_config(kv);
        if (!kv.has("net")) {
            cfg.net.in_h = data.h;
            cfg.net.in_w = data.w;
            cfg.net.classes = data.classes;
            cfg.net.validate();
        }
        std::vector<GridMap> maps;
        const std::vector<GridMap>* maps_ptr = nullptr;
        if (cfg.method == TrainMethod::Guided) {
            if (tr_attention.empty())
                throw MissingDependency("guided training needs --attention <cache dir>");
            uint64_t hash = cache_meta_hash(tr_attention);
            for (const Sample& s : data.train)
                if (!fs::exists(attention_cache_path(tr_attention, s.id, hash)))
                    throw MissingDependency("attention cache is missing a map for " + s.id);
            maps = load_train_attention(tr_attention, hash, data.train, data.h, data.w);
            maps_ptr = &maps;
        }
        fs::create_directories(tr_out);
        DirLock lock(tr_out);
        TrainResult r = train_classifier(data, maps_ptr, cfg);
        write_text(tr_out + "/history.csv", history_csv(r.history));
        save_checkpoint(tr_out + "/best.ckpt", r.best);
        RunManifest m;
        m.command = "train";
        m.config_path = tr_config;
        m.seed = cfg.seed;
        m.build_id = kBuildId;
        m.out_dir = tr_out;
        m.config_echo = {{"data", tr_data},
                         {"method", train_method_name(cfg.method)},
                         {"net", cfg.net.encode()},
                         {"epochs", std::to_string(cfg.epochs)},
                         {"batch_size", std::to_string(cfg.batch_size)},
                         {"lr_backbone", fmt(cfg.lr_backbone)},
                         {"lr_head", fmt(cfg.lr_head)},
                         {"momentum", fmt(cfg.momentum)},
                         {"weight_decay", fmt(cfg.weight_decay)},
                         {"lambda", fmt(cfg.attention.lambda)},
                         {"variant", attention_variant_name(cfg.attention.variant)},
                         {"attention", tr_attention.empty() ? "-" : tr_attention}};
        write_run_manifest(tr_out, m);
        std::cout << "best epoch " << r.best_epoch << ", val worst-group "
                  << fmt(r.best_val_worst) << "\n";
    });

    // ---- eval ----
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string ev_data, ev_ckpt, ev_out, ev_split = "test";
    ev->add_option("--data", ev_data, "dataset directory")->required();
    ev->add_option("--checkpoint", ev_ckpt, "classifier checkpoint")->required();
    ev->add_option("--out", ev_out, "output directory")->required();
    ev->add_option("--split", ev_split, "dataset split");
    ev->callback([&] {
        DatasetSplit data = load_dataset(ev_data);
        ConvNet net = net_from_checkpoint(load_checkpoint(ev_ckpt));
        const std::vector<Sample>& samples = split_of(data, ev_split);
        GroupReport grp = evaluate_groups(net, samples);
        fs::create_directories(ev_out);
        DirLock lock(ev_out);
        write_text(ev_out + "/group_" + ev_split + ".csv", group_csv(grp));
        std::cout << group_table(grp);
        if (data.classes == 3) {
            FairnessReport fr = fairness_eval(net, samples);
            write_text(ev_out + "/fairness_" + ev_split + ".csv", fairness_csv(fr));
            std::cout << fairness_table(fr);
        }
        RunManifest m;
        m.command = "eval";
        m.build_id = kBuildId;
        m.out_dir = ev_out;
        m.config_echo = {{"data", ev_data}, {"checkpoint", ev_ckpt}, {"split", ev_split}};
        write_run_manifest(ev_out, m);
        std::cout << "mean " << fmt(grp.mean) << " worst " << fmt(grp.worst) << "\n";
    });

    // ---- pointing-game ----
    auto* pg = app.add_subcommand("pointing-game", "saliency argmax vs masks");
    std::string pg_data, pg_out, pg_saliency = "cache", pg_ckpt, pg_cache, pg_split;
    int pg_n = 500, pg_grid = 4, pg_limit = 0;
    double pg_keep = 0.5;
    uint64_t pg_seed = 0;
    pg->add_option("--data", pg_data, "dataset directory")->required();
    pg->add_option("--out", pg_out, "output directory")->required();
    pg->add_option("--saliency", pg_saliency, "cache | rise");
    pg->add_option("--checkpoint", pg_ckpt, "classifier checkpoint (rise)");
    pg->add_option("--cache", pg_cache, "attention cache (cache)");
    pg->add_option("--split", pg_split, "dataset split");
    pg->add_option("--n", pg_n, "RISE mask count");
    pg->add_option("--grid", pg_grid, "RISE grid");
    pg->add_option("--keep-prob", pg_keep, "RISE keep probability");
    pg->add_option("--seed", pg_seed, "RISE seed");
    pg->add_option("--limit", pg_limit, "cap sample count, 0 = all");
    pg->callback([&] {
        DatasetSplit data = load_dataset(pg_data);
        std::string split = pg_split.empty() ? (pg_saliency == "rise" ? "test" : "train")
                                             : pg_split;
        const std::vector<Sample>& all = split_of(data, split);
        size_t n_take = pg_limit > 0 ? std::min(all.size(), static_cast<size_t>(pg_limit))
                                     : all.size();
        std::vector<Sample> samples(all.begin(), all.begin() + static_cast<long>(n_take));
        std::vector<GridMap> maps;
        std::vector<std::vector<uint8_t>> masks;
        if (pg_saliency == "cache") {
            if (pg_cache.empty()) throw ConfigError("pointing-game: need --cache");
            uint64_t hash = cache_meta_hash(pg_cache);
            for (const Sample& s : samples) {
                std::string path = attention_cache_path(pg_cache, s.id, hash);
                if (!fs::exists(path))
                    throw MissingDependency("attention cache is missing a map for " + s.id);
                maps.push_back(load_attention(path).grid);
                masks.push_back(s.mask);
            }
        } else if (pg_saliency == "rise") {
            if (pg_ckpt.empty()) throw ConfigError("pointing-game: need --checkpoint");
            ConvNet net = net_from_checkpoint(load_checkpoint(pg_ckpt));
            std::vector<int> preds = predict(net, samples);
            for (size_t i = 0; i < samples.size(); ++i) {
                RiseConfig rc;
                rc.n_masks = pg_n;
                rc.grid = pg_grid;
                rc.keep_prob = pg_keep;
                rc.seed = derive_seed("rise-image", pg_seed, i);
                maps.push_back(rise_saliency(net_prob_scorer(net, preds[i]),
                                             image_tensor(samples[i], data.h, data.w), rc));
                masks.push_back(samples[i].mask);
            }
        } else {
            throw ConfigError("pointing-game: unknown saliency '" + pg_saliency + "'");
        }
        PointingGameReport rep = pointing_game(maps, masks);
        fs::create_directories(pg_out);
        DirLock lock(pg_out);
        write_text(pg_out + "/pointing_" + split + ".csv", pointing_csv(rep));
        RunManifest m;
        m.command = "pointing-game";
        m.seed = pg_seed;
        m.build_id = kBuildId;
        m.out_dir = pg_out;
        m.config_echo = {{"data", pg_data},
                         {"saliency", pg_saliency},
                         {"split", split},
                         {"samples", std::to_string(samples.size())}};
        write_run_manifest(pg_out, m);
        int hits = 0;
        for (char p : rep.passes) hits += p;
        std::cout << "pass rate: " << fmt(rep.rate) << " (" << hits << "/"
                  << rep.passes.size() << ")\n";
    });

    // ---- visualize ----
    auto* vz = app.add_subcommand("visualize", "input / attention / RISE panels");
    std::string vz_data, vz_ckpt, vz_cache, vz_ids, vz_out;
    int vz_n = 300;
    uint64_t vz_seed = 0;
    vz->add_option("--data", vz_data, "dataset directory")->required();
    vz->add_option("--checkpoint", vz_ckpt, "classifier checkpoint for RISE panels");
    vz->add_option("--cache", vz_cache, "attention cache for map panels");
    vz->add_option("--ids", vz_ids, "comma-separated image ids")->required();
    vz->add_option("--out", vz_out, "output directory")->required();
    vz->add_option("--n", vz_n, "RISE mask count");
    vz->add_option("--seed", vz_seed, "RISE seed");
    vz->callback([&] {
        if (vz_ckpt.empty() && vz_cache.empty())
            throw ConfigError("visualize: need --checkpoint and/or --cache");
        DatasetSplit data = load_dataset(vz_data);
        std::vector<std::string> ids;
        std::istringstream is(vz_ids);
        std::string id;
        while (std::getline(is, id, ','))
            if (!id.empty()) ids.push_back(id);
        if (ids.empty()) throw ConfigError("visualize: no ids given");
        ConvNet net;
        bool have_net = !vz_ckpt.empty();
        if (have_net) net = net_from_checkpoint(load_checkpoint(vz_ckpt));
        uint64_t hash = 0;
        if (!vz_cache.empty()) hash = cache_meta_hash(vz_cache);
        fs::create_directories(vz_out);
        DirLock lock(vz_out);
        for (const std::string& want : ids) {
            const Sample* found = nullptr;
            for (const std::vector<Sample>* sp : {&data.train, &data.val, &data.test})
                for (const Sample& s : *sp)
                    if (s.id == want) found = &s;
            if (!found) throw ConfigError("visualize: unknown image id '" + want + "'");
            std::vector<std::vector<double>> panels;
            panels.push_back(found->image);
            if (!vz_cache.empty()) {
                std::string path = attention_cache_path(vz_cache, found->id, hash);
                if (!fs::exists(path))
                    throw MissingDependency("attention cache is missing a map for " +
                                            found->id);
                panels.push_back(gray_chw(load_attention(path).grid));
            }
            if (have_net) {
                std::vector<int> pred = predict(net, {*found});
                RiseConfig rc;
                rc.n_masks = vz_n;
                rc.seed = derive_seed("rise-image", vz_seed, hash64(found->id));
                GridMap sal = rise_saliency(net_prob_scorer(net, pred[0]),
                                            image_tensor(*found, data.h, data.w), rc);
                panels.push_back(gray_chw(normalize_minmax(sal)));
            }
            write_panels(vz_out + "/" + found->id + ".panels.ppm", data.h, data.w, panels);
        }
        RunManifest m;
        m.command = "visualize";
        m.seed = vz_seed;
        m.build_id = kBuildId;
        m.out_dir = vz_out;
        m.config_echo = {{"data", vz_data},
                         {"ids", vz_ids},
                         {"checkpoint", vz_ckpt.empty() ? "-" : vz_ckpt},
                         {"cache", vz_cache.empty() ? "-" : vz_cache}};
        write_run_manifest(vz_out, m);
        std::cout << "wrote " << ids.size() << " panel image(s) to " << vz_out << "\n";
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const MissingDependency& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const TrainingError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace gals
