#include "gals/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gals/errors.hpp"
#include "gals/rng.hpp"

namespace gals {

namespace {

struct Rgb {
    int r, g, b;
};

int clamp255(int v) { return v < 0 ? 0 : (v > 255 ? 255 : v); }

Rgb jitter(Rgb base, Rng& rng, int amp = 15) {
    auto j = [&](int v) { return clamp255(v + rng.uniform_int(2 * amp + 1) - amp); };
    return {j(base.r), j(base.g), j(base.b)};
}

void paint_background(std::vector<Rgb>& px, int s, int style, Rng& rng) {
    if (style == 0) {
        const int period = 4 + rng.uniform_int(3);
        const int phase = rng.uniform_int(2 * period);
        const Rgb c0 = jitter({45, 85, 200}, rng), c1 = jitter({95, 135, 235}, rng);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x)
                px[static_cast<size_t>(y) * s + x] =
                    (((x + y + phase) / period) % 2 == 0) ? c0 : c1;
    } else {
        const int cell = 4 + rng.uniform_int(3);
        const int ox = rng.uniform_int(cell), oy = rng.uniform_int(cell);
        const Rgb c0 = jitter({45, 165, 75}, rng), c1 = jitter({20, 110, 45}, rng);
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x)
                px[static_cast<size_t>(y) * s + x] =
                    ((((x + ox) / cell) + ((y + oy) / cell)) % 2 == 0) ? c0 : c1;
    }
}

struct Ellipse {
    double cx, cy, rx, ry;
    bool contains(double x, double y) const {
        const double nx = (x - cx) / rx, ny = (y - cy) / ry;
        return nx * nx + ny * ny <= 1.0;
    }
    double norm_dist(double x, double y) const {
        const double nx = (x - cx) / rx, ny = (y - cy) / ry;
        return std::sqrt(nx * nx + ny * ny);
    }
};

// radii chosen so the glyph covers roughly 10-25% of the image and sits
// fully inside it
Ellipse sample_blob(int s, Rng& rng, double lo_prod, double hi_prod, double top_margin = 0.0,
                    double bottom_margin = 0.0) {
    const double sc = s / 32.0;
    for (;;) {
        const double rx = rng.uniform(5.0, 10.5) * sc;
        const double ry = rng.uniform(5.0, 10.5) * sc;
        if (rx * ry < lo_prod * sc * sc || rx * ry > hi_prod * sc * sc) continue;
        const double cy_lo = ry * (1.0 + top_margin), cy_hi = s - 1 - ry * (1.0 + bottom_margin);
        if (cy_hi <= cy_lo) continue;
        const double cx = rng.uniform(rx, s - 1 - rx);
        const double cy = rng.uniform(cy_lo, cy_hi);
        return {cx, cy, rx, ry};
    }
}

// texture kinds: 0 rings, 1 dots, 2 weave, 3 cross, 4 solid (rimmed)
bool texture_primary(int kind, double nd, int x, int y, int phase) {
    switch (kind) {
        case 0: return (static_cast<int>(nd * 4.0) % 2) == 0;
        case 1: return ((x + phase) % 4 < 2) && ((y + phase) % 4 < 2);
        case 2: return ((x + phase) % 4) < 2;
        case 3: return (((x + phase) % 4 < 2) != ((y + phase) % 4 < 2));
        default: return nd < 0.72;
    }
}

void draw_distractor(std::vector<Rgb>& px, const std::vector<uint8_t>& mask, int s) {
    const int cand[6][2] = {{2, 2},          {2, s - 5},      {s - 5, 2},
                            {s - 5, s - 5},  {2, s / 2 - 1},  {s - 5, s / 2 - 1}};
    for (const auto& c : cand) {
        bool free = true;
        for (int dy = 0; dy < 3 && free; ++dy)
            for (int dx = 0; dx < 3; ++dx)
                if (mask[static_cast<size_t>(c[0] + dy) * s + (c[1] + dx)]) {
                    free = false;
                    break;
                }
        if (!free) continue;
        for (int dy = 0; dy < 3; ++dy)
            for (int dx = 0; dx < 3; ++dx)
                px[static_cast<size_t>(c[0] + dy) * s + (c[1] + dx)] = {232, 45, 228};
        return;
    }
}

// person_glyph composes a body ellipse plus a head circle; otherwise the
// glyph is the bare ellipse
void draw_sample(Sample& smp, int s, int tex_kind, int bg_style, bool person_glyph,
                 bool distractor, Rng& rng) {
    std::vector<Rgb> px(static_cast<size_t>(s) * s);
    paint_background(px, s, bg_style, rng);

    Ellipse base = person_glyph ? sample_blob(s, rng, 45.0, 95.0, 0.1, 0.05)
                                : sample_blob(s, rng, 33.0, 80.0);
    Ellipse body = base, head{0, 0, 1, 1};
    if (person_glyph) {
        body = {base.cx, base.cy + 0.18 * base.ry, base.rx * 0.8, base.ry * 0.8};
        const double rh = 0.38 * std::min(base.rx, base.ry) + 1.2;
        head = {base.cx, base.cy - 0.55 * base.ry, rh, rh};
    }
    const Rgb f0 = jitter({235, 70, 55}, rng), f1 = jitter({250, 205, 70}, rng);
    const int phase = rng.uniform_int(4);

    smp.mask.assign(static_cast<size_t>(s) * s, 0);
    for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
            const bool in_body = body.contains(x, y);
            const bool in_head = person_glyph && head.contains(x, y);
            if (!in_body && !in_head) continue;
            smp.mask[static_cast<size_t>(y) * s + x] = 1;
            const double nd = in_body ? body.norm_dist(x, y) : 1.0;
            const bool primary = in_head ? true : texture_primary(tex_kind, nd, x, y, phase);
            px[static_cast<size_t>(y) * s + x] = primary ? f0 : f1;
        }
    }
    if (distractor) draw_distractor(px, smp.mask, s);

    smp.image.assign(static_cast<size_t>(3) * s * s, 0.0);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const Rgb& c = px[static_cast<size_t>(y) * s + x];
            smp.image[static_cast<size_t>(0) * s * s + y * s + x] = c.r / 255.0;
            smp.image[static_cast<size_t>(1) * s * s + y * s + x] = c.g / 255.0;
            smp.image[static_cast<size_t>(2) * s * s + y * s + x] = c.b / 255.0;
        }
}

std::string make_id(const char* prefix, uint64_t idx, int fg, int bg, bool patch) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%s%06llu-f%d-b%d-p%d", prefix,
                  static_cast<unsigned long long>(idx), fg, bg, patch ? 1 : 0);
    return buf;
}

}  // namespace

BiasGenConfig preset_config(const std::string& name) {
    BiasGenConfig c;
    if (name == "waterbirds95-analog") {
        c.task = "foreground";
        c.rho = 0.95;
        c.train_per_class = 200;
        c.val_per_group = 20;
        c.test_per_group = 40;
    } else if (name == "waterbirds100-analog") {
        c = preset_config("waterbirds95-analog");
        c.rho = 1.0;
    } else if (name == "redmeat-analog") {
        c.task = "meat";
        c.train_per_class = 500;
        c.val_per_group = 250;
        c.test_per_group = 250;
        c.label_noise = 0.1;
        c.distractor_cooccurrence = 0.6;
    } else if (name == "apparent-analog") {
        c.task = "apparent";
        c.rho = 0.9;
        c.train_a = 1056;   // 10565:4802:2822 scaled by 1/10
        c.train_b = 480;
        c.train_neutral = 282;
        c.eval_per_class = 100;
    } else {
        throw ConfigError("unknown preset '" + name + "'");
    }
    return c;
}

std::vector<std::string> preset_names() {
    return {"waterbirds95-analog", "waterbirds100-analog", "redmeat-analog",
            "apparent-analog"};
}

DatasetSplit generate_biased_shapes(const BiasGenConfig& cfg) {
    if (cfg.rho < 0.0 || cfg.rho > 1.0) throw ConfigError("rho must be in [0,1]");
    if (cfg.size < 16 || cfg.size % 8 != 0)
        throw ConfigError("image size must be a multiple of 8, at least 16");
    DatasetSplit out;
    out.h = out.w = cfg.size;
    out.classes = 2;
    out.groups = 4;
    out.task = "foreground";

    std::vector<int> gcounts(4, 0);
    if (!cfg.train_group_counts.empty()) {
        if (cfg.train_group_counts.size() != 4)
            throw ConfigError("train_group_counts needs 4 entries for the 2x2 grid");
        for (size_t i = 0; i < 4; ++i) gcounts[i] = cfg.train_group_counts[i];
    } else {
        for (int c = 0; c < 2; ++c) {
            const int n = cfg.train_per_class;
            if (n < 0) throw ConfigError("train_per_class must be nonnegative");
            const int maj = static_cast<int>(std::lround(cfg.rho * n));
            gcounts[static_cast<size_t>(c * 2 + c)] = maj;      // class c correlates with bg c
            gcounts[static_cast<size_t>(c * 2 + (1 - c))] = n - maj;
        }
    }
    for (int g : gcounts)
        if (g < 0) throw ConfigError("negative group count");

    uint64_t idx = 0;
    auto emit = [&](std::vector<Sample>& dst, const char* prefix, int label, int bg, int count) {
        for (int i = 0; i < count; ++i) {
            Sample s;
            s.label = label;
            s.fg_kind = label;
            s.bg_kind = bg;
            s.group = label * 2 + bg;
            s.id = make_id(prefix, idx, s.fg_kind, bg, false);
            Rng rng(derive_seed("sample", cfg.seed, idx));
            draw_sample(s, cfg.size, s.fg_kind, bg, false, false, rng);
            dst.push_back(std::move(s));
            ++idx;
        }
    };
    for (int label = 0; label < 2; ++label)
        for (int bg = 0; bg < 2; ++bg)
            emit(out.train, "tr", label, bg, gcounts[static_cast<size_t>(label * 2 + bg)]);
    const int val_n = cfg.val_per_group, test_n = cfg.test_per_group;
    for (int label = 0; label < 2; ++label)
        for (int bg = 0; bg < 2; ++bg) emit(out.val, "va", label, bg, val_n);
    for (int label = 0; label < 2; ++label)
        for (int bg = 0; bg < 2; ++bg) emit(out.test, "te", label, bg, test_n);
    return out;
}

DatasetSplit generate_noisy_meat_analog(const BiasGenConfig& cfg) {
    if (cfg.label_noise < 0.0 || cfg.label_noise >= 0.5)
        throw ConfigError("label noise fraction must be in [0, 0.5)");
    if (cfg.size < 16 || cfg.size % 8 != 0)
        throw ConfigError("image size must be a multiple of 8, at least 16");
    DatasetSplit out;
    out.h = out.w = cfg.size;
    out.classes = 5;
    out.groups = 5;
    out.task = "meat";

    uint64_t idx = 0;
    auto emit = [&](std::vector<Sample>& dst, const char* prefix, int tex, int count) {
        for (int i = 0; i < count; ++i) {
            Rng rng(derive_seed("sample", cfg.seed, idx));
            Sample s;
            s.label = tex;
            s.fg_kind = tex;
            s.bg_kind = rng.uniform_int(2);
            s.group = tex;
            const double p_patch = tex == 0 ? cfg.distractor_cooccurrence
                                            : cfg.distractor_cooccurrence * 0.25;
            s.distractor = rng.uniform() < p_patch;
            s.id = make_id(prefix, idx, tex, s.bg_kind, s.distractor);
            draw_sample(s, cfg.size, tex, s.bg_kind, false, s.distractor, rng);
            dst.push_back(std::move(s));
            ++idx;
        }
    };
    for (int tex = 0; tex < 5; ++tex) emit(out.train, "tr", tex, cfg.train_per_class);
    for (int tex = 0; tex < 5; ++tex) emit(out.val, "va", tex, cfg.val_per_group);
    for (int tex = 0; tex < 5; ++tex) emit(out.test, "te", tex, cfg.test_per_group);

    // flip a fixed count of train labels; val and test stay clean
    const int n_train = static_cast<int>(out.train.size());
    const int n_flip = static_cast<int>(std::lround(cfg.label_noise * n_train));
    std::vector<int> order(static_cast<size_t>(n_train));
    for (int i = 0; i < n_train; ++i) order[static_cast<size_t>(i)] = i;
    Rng flip_rng(derive_seed("labelnoise", cfg.seed));
    flip_rng.shuffle(order);
    for (int i = 0; i < n_flip; ++i) {
        Sample& s = out.train[static_cast<size_t>(order[static_cast<size_t>(i)])];
        const int shift = 1 + flip_rng.uniform_int(4);
        s.label = (s.label + shift) % 5;
        s.group = s.label;
        s.flipped = true;
    }
    return out;
}

DatasetSplit generate_apparent_attribute_analog(const BiasGenConfig& cfg) {
    if (cfg.rho < 0.0 || cfg.rho > 1.0) throw ConfigError("rho must be in [0,1]");
    if (cfg.eval_per_class % 2 != 0)
        throw ConfigError("eval_per_class must be even for a balanced context split");
    DatasetSplit out;
    out.h = out.w = cfg.size;
    out.classes = 3;
    out.groups = 6;
    out.task = "apparent";

    uint64_t idx = 0;
    auto emit = [&](std::vector<Sample>& dst, const char* prefix, int label, int ctx,
                    int count) {
        for (int i = 0; i < count; ++i) {
            Sample s;
            s.label = label;
            s.fg_kind = label;  // 0 rings, 1 dots, 2 solid on the person glyph
            s.bg_kind = ctx;
            s.group = label * 2 + ctx;
            s.id = make_id(prefix, idx, label, ctx, false);
            Rng rng(derive_seed("sample", cfg.seed, idx));
            draw_sample(s, cfg.size, label == 2 ? 4 : label, ctx, true, false, rng);
            dst.push_back(std::move(s));
            ++idx;
        }
    };
    const int counts[3] = {cfg.train_a, cfg.train_b, cfg.train_neutral};
    const double ctx0_p[3] = {cfg.rho, 1.0 - cfg.rho, 0.5};
    for (int label = 0; label < 3; ++label) {
        const int n = counts[label];
        if (n < 0) throw ConfigError("negative class count");
        const int on_ctx0 = static_cast<int>(std::lround(ctx0_p[label] * n));
        emit(out.train, "tr", label, 0, on_ctx0);
        emit(out.train, "tr", label, 1, n - on_ctx0);
    }
    for (int label = 0; label < 2; ++label)
        for (int ctx = 0; ctx < 2; ++ctx) emit(out.val, "va", label, ctx, cfg.eval_per_class / 2);
    for (int label = 0; label < 2; ++label)
        for (int ctx = 0; ctx < 2; ++ctx)
            emit(out.test, "te", label, ctx, cfg.eval_per_class / 2);
    return out;
}

DatasetSplit relabel_background_task(const DatasetSplit& split) {
    if (split.task != "foreground")
        throw ConfigError("relabel_background_task needs a foreground-task split");
    for (const Sample& s : split.train)
        if (s.bg_kind != s.label)
            throw ConfigError(
                "relabel_background_task needs a perfectly correlated split; sample " + s.id +
                " has label " + std::to_string(s.label) + " on background " +
                std::to_string(s.bg_kind));
    DatasetSplit out = split;
    out.task = "background";
    auto relabel = [](std::vector<Sample>& v) {
        for (Sample& s : v) {
            s.label = s.bg_kind;
            s.group = s.bg_kind * 2 + s.fg_kind;
        }
    };
    relabel(out.train);  // labels unchanged by precondition; groups re-keyed
    relabel(out.val);
    relabel(out.test);
    return out;
}

const std::vector<std::string>& concept_vocabulary() {
    static const std::vector<std::string> vocab = {
        "foreground", "background", "blob", "person", "rings", "dots",
        "stripes",    "checker",    "weave", "cross",  "solid", "patch"};
    return vocab;
}

int token_id(const std::string& name) {
    const auto& v = concept_vocabulary();
    for (size_t i = 0; i < v.size(); ++i)
        if (v[i] == name) return static_cast<int>(i);
    throw ConfigError("unknown concept token '" + name + "'");
}

std::vector<int> caption_tokens_for_sample(const Sample& s, const std::string& task,
                                           bool class_agnostic) {
    static const int kTex[5] = {4, 5, 8, 9, 10};  // rings dots weave cross solid
    std::vector<int> toks;
    toks.push_back(0);               // foreground
    toks.push_back(6 + s.bg_kind);   // stripes | checker
    if (task == "apparent") {
        toks.push_back(3);  // person
        if (!class_agnostic) toks.push_back(s.fg_kind == 2 ? 10 : kTex[s.fg_kind]);
    } else {
        toks.push_back(class_agnostic ? 2 : kTex[s.fg_kind]);
    }
    if (s.distractor) toks.push_back(11);
    return toks;
}

// ---- image files ----

void write_ppm(const std::string& path, int h, int w, const std::vector<double>& chw) {
    if (static_cast<int>(chw.size()) != 3 * h * w) throw IoError("ppm: bad buffer size");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "P6\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(w) * 3);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = chw[(static_cast<size_t>(c) * h + y) * w + x];
                v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
                row[static_cast<size_t>(x) * 3 + c] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }
        os.write(reinterpret_cast<const char*>(row.data()),
                 static_cast<std::streamsize>(row.size()));
    }
    if (!os) throw IoError("ppm write failed: " + path);
}

namespace {

int read_pnm_int(std::istream& is) {
    // skip whitespace and '#' comments
    for (;;) {
        const int c = is.peek();
        if (c == '#') {
            std::string line;
            std::getline(is, line);
        } else if (std::isspace(c)) {
            is.get();
        } else {
            break;
        }
    }
    int v = 0;
    if (!(is >> v)) throw ParseError("pnm: missing header integer");
    return v;
}

void read_pnm_header(std::istream& is, const char* magic, int* h, int* w) {
    char m[2];
    is.read(m, 2);
    if (!is || m[0] != magic[0] || m[1] != magic[1])
        throw ParseError(std::string("pnm: expected ") + magic + " magic");
    *w = read_pnm_int(is);
    *h = read_pnm_int(is);
    const int maxv = read_pnm_int(is);
    if (maxv != 255) throw ParseError("pnm: only maxval 255 is supported");
    is.get();  // single whitespace before raster
    if (*w < 1 || *h < 1 || *w > 4096 || *h > 4096) throw ParseError("pnm: extent out of range");
}

}  // namespace

std::vector<double> read_ppm(const std::string& path, int* h, int* w) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    read_pnm_header(is, "P6", h, w);
    std::vector<unsigned char> raw(static_cast<size_t>(*h) * *w * 3);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!is) throw ParseError("ppm: truncated raster in " + path);
    std::vector<double> chw(raw.size());
    for (int y = 0; y < *h; ++y)
        for (int x = 0; x < *w; ++x)
            for (int c = 0; c < 3; ++c)
                chw[(static_cast<size_t>(c) * *h + y) * *w + x] =
                    raw[(static_cast<size_t>(y) * *w + x) * 3 + c] / 255.0;
    return chw;
}

void write_pgm(const std::string& path, int h, int w, const std::vector<uint8_t>& mask01) {
    if (static_cast<int>(mask01.size()) != h * w) throw IoError("pgm: bad buffer size");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os << "P5\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(static_cast<size_t>(w));
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x)
            row[static_cast<size_t>(x)] = mask01[static_cast<size_t>(y) * w + x] ? 255 : 0;
        os.write(reinterpret_cast<const char*>(row.data()),
                 static_cast<std::streamsize>(row.size()));
    }
    if (!os) throw IoError("pgm write failed: " + path);
}

std::vector<uint8_t> read_pgm(const std::string& path, int* h, int* w) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    read_pnm_header(is, "P5", h, w);
    std::vector<unsigned char> raw(static_cast<size_t>(*h) * *w);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!is) throw ParseError("pgm: truncated raster in " + path);
    std::vector<uint8_t> mask(raw.size());
    for (size_t i = 0; i < raw.size(); ++i) mask[i] = raw[i] > 127 ? 1 : 0;
    return mask;
}

// ---- disk layout ----

void save_dataset(const std::string& dir, const DatasetSplit& split) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir + "/images", ec);
    fs::create_directories(dir + "/masks", ec);
    if (ec) throw IoError("cannot create dataset directories under " + dir);

    std::ofstream meta(dir + "/meta.txt");
    if (!meta) throw IoError("cannot write " + dir + "/meta.txt");
    meta << "task=" << split.task << "\nh=" << split.h << "\nw=" << split.w
         << "\nclasses=" << split.classes << "\ngroups=" << split.groups << "\n";

    std::ofstream man(dir + "/manifest.csv");
    if (!man) throw IoError("cannot write " + dir + "/manifest.csv");
    man << "image-id,path,mask-path,label,group-id,split,flipped-flag\n";
    auto dump = [&](const std::vector<Sample>& v, const char* name) {
        for (const Sample& s : v) {
            const std::string img = "images/" + s.id + ".ppm";
            const std::string msk = "masks/" + s.id + ".pgm";
            write_ppm(dir + "/" + img, split.h, split.w, s.image);
            write_pgm(dir + "/" + msk, split.h, split.w, s.mask);
            man << s.id << "," << img << "," << msk << "," << s.label << "," << s.group << ","
                << name << "," << (s.flipped ? 1 : 0) << "\n";
        }
    };
    dump(split.train, "train");
    dump(split.val, "val");
    dump(split.test, "test");
    if (!man) throw IoError("manifest write failed");
}

DatasetSplit load_dataset(const std::string& dir) {
    DatasetSplit split;
    {
        std::ifstream meta(dir + "/meta.txt");
        if (!meta) throw IoError("cannot open " + dir + "/meta.txt");
        std::string line;
        while (std::getline(meta, line)) {
            const size_t eq = line.find('=');
            if (eq == std::string::npos) continue;
            const std::string k = line.substr(0, eq), v = line.substr(eq + 1);
            if (k == "task") split.task = v;
            else if (k == "h") split.h = std::stoi(v);
            else if (k == "w") split.w = std::stoi(v);
            else if (k == "classes") split.classes = std::stoi(v);
            else if (k == "groups") split.groups = std::stoi(v);
            else throw ParseError("meta.txt: unknown key " + k);
        }
    }
    std::ifstream man(dir + "/manifest.csv");
    if (!man) throw IoError("cannot open " + dir + "/manifest.csv");
    std::string line;
    if (!std::getline(man, line) ||
        line != "image-id,path,mask-path,label,group-id,split,flipped-flag")
        throw ParseError("manifest.csv: unexpected header");
    while (std::getline(man, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string field;
        std::vector<std::string> f;
        while (std::getline(row, field, ',')) f.push_back(field);
        if (f.size() != 7) throw ParseError("manifest.csv: malformed row: " + line);
        Sample s;
        s.id = f[0];
        s.label = std::stoi(f[3]);
        s.group = std::stoi(f[4]);
        s.flipped = f[6] == "1";
        const size_t fp = s.id.rfind("-f"), bp = s.id.rfind("-b"), pp = s.id.rfind("-p");
        if (fp == std::string::npos || bp == std::string::npos || pp == std::string::npos ||
            bp <= fp || pp <= bp)
            throw ParseError("manifest.csv: id lacks kind suffix: " + s.id);
        s.fg_kind = std::stoi(s.id.substr(fp + 2, bp - fp - 2));
        s.bg_kind = std::stoi(s.id.substr(bp + 2, pp - bp - 2));
        s.distractor = s.id.substr(pp + 2) == "1";
        int h = 0, w = 0;
        s.image = read_ppm(dir + "/" + f[1], &h, &w);
        if (h != split.h || w != split.w) throw ParseError("image extent mismatch for " + s.id);
        s.mask = read_pgm(dir + "/" + f[2], &h, &w);
        if (h != split.h || w != split.w) throw ParseError("mask extent mismatch for " + s.id);
        if (f[5] == "train") split.train.push_back(std::move(s));
        else if (f[5] == "val") split.val.push_back(std::move(s));
        else if (f[5] == "test") split.test.push_back(std::move(s));
        else throw ParseError("manifest.csv: unknown split " + f[5]);
    }
    return split;
}

}  // namespace gals
