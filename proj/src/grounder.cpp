#include "gals/grounder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "gals/errors.hpp"
#include "gals/rng.hpp"

namespace gals {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_ws(const std::string& s) {
    std::istringstream is(s);
    std::vector<std::string> out;
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    const int n = x.dim(0), k = x.dim(1), h = x.dim(2), w = x.dim(3);
    Tensor b = reshape(bias, {1, k, 1, 1});
    b = broadcast_axis(b, 0, n);
    b = broadcast_axis(b, 2, h);
    b = broadcast_axis(b, 3, w);
    return add(x, b);
}

Tensor l2_normalize_rows(const Tensor& x) {
    const int n = x.dim(0), e = x.dim(1);
    Tensor sq = sum_axis(mul(x, x), 1);                       // (n,1)
    Tensor norm = sqrt(add(sq, Tensor::full({n, 1}, 1e-12)));
    return mul(x, broadcast_axis(reciprocal(norm), 1, e));
}

}  // namespace

// ---- prompts ----

void LanguageSpec::validate() const {
    if (prompts.empty()) throw ConfigError("language spec: need at least one prompt");
    const int vocab = static_cast<int>(concept_vocabulary().size());
    for (const Prompt& p : prompts) {
        if (p.tokens.empty()) throw ConfigError("language spec: empty prompt");
        for (int t : p.tokens)
            if (t < 0 || t >= vocab)
                throw ConfigError("language spec: token id " + std::to_string(t) +
                                  " outside the vocabulary");
    }
}

std::string LanguageSpec::canonical() const {
    std::ostringstream os;
    os << "mode=" << (mode == Mode::Average ? "average" : "max")
       << ";fallback=" << (fallback_on_zero ? "on" : "off");
    for (const Prompt& p : prompts) {
        os << ";prompt=";
        for (size_t i = 0; i < p.tokens.size(); ++i) os << (i ? "," : "") << p.tokens[i];
    }
    return os.str();
}

uint64_t LanguageSpec::hash() const { return hash64(canonical()); }

Prompt make_prompt(const std::vector<std::string>& token_names) {
    if (token_names.empty()) throw ConfigError("prompt needs at least one token");
    Prompt p;
    std::string disp;
    for (const std::string& name : token_names) {
        p.tokens.push_back(token_id(name));
        disp += (disp.empty() ? "" : " ") + name;
    }
    p.display = disp;
    return p;
}

LanguageSpec parse_language_spec_text(const std::string& text) {
    LanguageSpec spec;
    bool saw_mode = false, saw_fallback = false;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("language spec line " + std::to_string(lineno) +
                              ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "mode") {
            if (saw_mode) throw ConfigError("language spec: duplicate mode");
            saw_mode = true;
            if (value == "average") spec.mode = LanguageSpec::Mode::Average;
            else if (value == "max") spec.mode = LanguageSpec::Mode::Max;
            else throw ConfigError("language spec: mode must be average or max, got '" + value +
                                   "'");
        } else if (key == "fallback") {
            if (saw_fallback) throw ConfigError("language spec: duplicate fallback");
            saw_fallback = true;
            if (value == "on") spec.fallback_on_zero = true;
            else if (value == "off") spec.fallback_on_zero = false;
            else throw ConfigError("language spec: fallback must be on or off");
        } else if (key == "prompt") {
            spec.prompts.push_back(make_prompt(split_ws(value)));
        } else {
            throw ConfigError("language spec line " + std::to_string(lineno) +
                              ": unknown key '" + key + "'");
        }
    }
    spec.validate();
    return spec;
}

LanguageSpec parse_language_spec_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open language spec file " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_language_spec_text(buf.str());
}

// ---- model ----

void GrounderSpec::validate() const {
    if (in_channels < 1 || in_h < 1 || in_w < 1 || embed_dim < 2 || vocab < 2 ||
        blocks.empty())
        throw ConfigError("grounder spec: need positive extents, embed dim and vocab >= 2");
    int h = in_h, w = in_w;
    for (const auto& b : blocks) {
        if (b.out_channels < 1 || b.kernel < 1 || b.kernel % 2 == 0)
            throw ConfigError("grounder spec: bad conv block");
        if (h % 2 != 0 || w % 2 != 0)
            throw ConfigError("grounder spec: spatial extents must halve cleanly");
        h /= 2;
        w /= 2;
    }
}

std::string GrounderSpec::encode() const {
    std::ostringstream os;
    os << in_channels << ":" << in_h << ":" << in_w << ":" << embed_dim << ":" << vocab;
    for (const auto& b : blocks) os << ":" << b.out_channels << "x" << b.kernel;
    return os.str();
}

GrounderSpec GrounderSpec::decode(const std::string& text) {
    GrounderSpec spec;
    spec.blocks.clear();
    std::istringstream is(text);
    std::string tok;
    std::vector<std::string> parts;
    while (std::getline(is, tok, ':')) parts.push_back(tok);
    if (parts.size() < 6) throw ParseError("grounder spec string malformed: " + text);
    spec.in_channels = std::stoi(parts[0]);
    spec.in_h = std::stoi(parts[1]);
    spec.in_w = std::stoi(parts[2]);
    spec.embed_dim = std::stoi(parts[3]);
    spec.vocab = std::stoi(parts[4]);
    for (size_t i = 5; i < parts.size(); ++i) {
        const size_t x = parts[i].find('x');
        if (x == std::string::npos)
            throw ParseError("grounder spec block malformed: " + parts[i]);
        spec.blocks.push_back(
            {std::stoi(parts[i].substr(0, x)), std::stoi(parts[i].substr(x + 1))});
    }
    spec.validate();
    return spec;
}

Tensor& TwoTowerGrounder::param(const std::string& name) {
    for (auto& kv : params)
        if (kv.first == name) return kv.second;
    throw ConfigError("grounder has no parameter named " + name);
}

const Tensor& TwoTowerGrounder::param(const std::string& name) const {
    for (const auto& kv : params)
        if (kv.first == name) return kv.second;
    throw ConfigError("grounder has no parameter named " + name);
}

double TwoTowerGrounder::temperature() const {
    return std::exp(-param("log_inv_tau").data()[0]);
}

TwoTowerGrounder init_grounder(const GrounderSpec& spec, uint64_t seed) {
    spec.validate();
    TwoTowerGrounder g;
    g.spec = spec;
    int param_index = 0;
    auto scaled_normal = [&](Shape shape, double sd) {
        Rng rng(derive_seed("ginit", seed, static_cast<uint64_t>(param_index++)));
        Tensor t(std::move(shape));
        for (int i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal() * sd;
        return t;
    };
    int c_in = spec.in_channels;
    for (size_t b = 0; b < spec.blocks.size(); ++b) {
        const auto& blk = spec.blocks[b];
        const std::string base = "conv" + std::to_string(b);
        g.params.emplace_back(base + ".weight",
                              scaled_normal({blk.out_channels, c_in, blk.kernel, blk.kernel},
                                            std::sqrt(2.0 / (c_in * blk.kernel * blk.kernel))));
        g.params.emplace_back(base + ".bias", Tensor(Shape{blk.out_channels}));
        c_in = blk.out_channels;
    }
    g.params.emplace_back("proj.weight",
                          scaled_normal({c_in, spec.embed_dim}, std::sqrt(2.0 / c_in)));
    g.params.emplace_back("token_table", scaled_normal({spec.vocab, spec.embed_dim},
                                                       1.0 / std::sqrt(spec.embed_dim)));
    Tensor lt(Shape{1});
    lt.data()[0] = std::log(1.0 / 0.07);
    g.params.emplace_back("log_inv_tau", lt);
    return g;
}

std::string grounder_id(const TwoTowerGrounder& g) {
    uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const void* data, size_t len) {
        const unsigned char* p = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    const std::string enc = g.spec.encode();
    mix(enc.data(), enc.size());
    for (const auto& kv : g.params)
        mix(kv.second.data(), sizeof(double) * static_cast<size_t>(kv.second.numel()));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void save_grounder(const std::string& path, const TwoTowerGrounder& g) {
    Checkpoint ckpt;
    ckpt.set_meta("grounder_spec", g.spec.encode());
    ckpt.set_meta("trained", g.trained ? "1" : "0");
    for (const auto& kv : g.params) ckpt.tensors.emplace_back(kv.first, kv.second.clone());
    save_checkpoint(path, ckpt);
}

TwoTowerGrounder load_grounder(const std::string& path) {
    Checkpoint ckpt = load_checkpoint(path);
    const std::string spec = ckpt.meta_value("grounder_spec");
    if (spec.empty()) throw ParseError("checkpoint lacks grounder_spec metadata");
    TwoTowerGrounder g;
    g.spec = GrounderSpec::decode(spec);
    g.trained = ckpt.meta_value("trained") == "1";
    for (const auto& kv : ckpt.tensors) g.params.emplace_back(kv.first, kv.second.clone());
    return g;
}

namespace {

std::vector<Tensor> watch_all(Tape& tape, const TwoTowerGrounder& g) {
    std::vector<Tensor> w;
    w.reserve(g.params.size());
    for (const auto& kv : g.params) w.push_back(tape.watch(kv.second));
    return w;
}

Tensor encode_from_watched(const GrounderSpec& spec, const std::vector<Tensor>& wp,
                           const Tensor& wimg, Tensor* last_conv_out) {
    Tensor x = wimg;
    size_t p = 0;
    for (size_t b = 0; b < spec.blocks.size(); ++b) {
        x = maxpool2(relu(add_channel_bias(conv2d(x, wp[p]), wp[p + 1])));
        p += 2;
    }
    if (last_conv_out) *last_conv_out = x;
    return l2_normalize_rows(matmul(global_avg_pool(x), wp[p]));
}

Tensor encode_prompts_from_table(const GrounderSpec& spec, const Tensor& wtable,
                                 const std::vector<Prompt>& prompts) {
    const int np = static_cast<int>(prompts.size()), v = spec.vocab;
    std::vector<double> sel(static_cast<size_t>(np) * v, 0.0);
    for (int i = 0; i < np; ++i) {
        const Prompt& p = prompts[static_cast<size_t>(i)];
        if (p.tokens.empty()) throw ConfigError("prompt with no tokens");
        for (int t : p.tokens) {
            if (t < 0 || t >= v)
                throw ConfigError("prompt token " + std::to_string(t) +
                                  " outside the grounder vocabulary");
            sel[static_cast<size_t>(i) * v + t] += 1.0 / p.tokens.size();
        }
    }
    return l2_normalize_rows(matmul(Tensor({np, v}, std::move(sel)), wtable));
}

size_t table_index(const TwoTowerGrounder& g) { return g.spec.blocks.size() * 2 + 1; }
size_t tau_index(const TwoTowerGrounder& g) { return g.spec.blocks.size() * 2 + 2; }

}  // namespace

Tensor image_embeddings(const TwoTowerGrounder& g, Tape& tape, const Tensor& images,
                        GrounderTrace* trace) {
    if (images.rank() != 4 || images.dim(1) != g.spec.in_channels ||
        images.dim(2) != g.spec.in_h || images.dim(3) != g.spec.in_w)
        throw ConfigError("image batch shape " + shape_str(images.shape()) +
                          " does not match the grounder input");
    GrounderTrace local;
    GrounderTrace& tr = trace ? *trace : local;
    tr.input = tape.watch(images);
    tr.watched_params = watch_all(tape, g);
    return encode_from_watched(g.spec, tr.watched_params, tr.input, &tr.last_conv);
}

Tensor prompt_embeddings(const TwoTowerGrounder& g, Tape& tape,
                         const std::vector<Prompt>& prompts, Tensor* watched_table) {
    if (prompts.empty()) throw ConfigError("prompt batch is empty");
    Tensor table = tape.watch(g.param("token_table"));
    if (watched_table) *watched_table = table;
    return encode_prompts_from_table(g.spec, table, prompts);
}

Tensor contrastive_loss(const Tensor& image_emb, const Tensor& text_emb,
                        const Tensor& logit_scale) {
    if (image_emb.rank() != 2 || text_emb.rank() != 2)
        throw ConfigError("contrastive loss: embeddings must be rank 2");
    const int n = image_emb.dim(0), e = image_emb.dim(1);
    if (text_emb.dim(0) != n || text_emb.dim(1) != e)
        throw ConfigError("contrastive loss: embedding batches disagree");
    if (n < 2) throw ConfigError("contrastive loss: need at least two pairs");
    if (logit_scale.numel() != 1)
        throw ConfigError("contrastive loss: logit scale must be a single value");
    for (const Tensor* t : {&image_emb, &text_emb})
        for (int i = 0; i < n; ++i) {
            double sq = 0.0;
            for (int j = 0; j < e; ++j) {
                const double v = t->data()[i * e + j];
                sq += v * v;
            }
            if (std::fabs(std::sqrt(sq) - 1.0) > 1e-6)
                throw ConfigError("contrastive loss: row " + std::to_string(i) +
                                  " is not L2-normalized");
        }

    Tensor sim = mul(matmul(image_emb, transpose(text_emb)),
                     broadcast_full(logit_scale, {n, n}));
    std::vector<int> diag(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) diag[static_cast<size_t>(i)] = i;
    Tensor i2t = cross_entropy(sim, diag);
    Tensor t2i = cross_entropy(transpose(sim), diag);
    return scale(add(i2t, t2i), 0.5);
}

// ---- attention maps ----

GridMap gradcam(const Tensor& score, const Tensor& last_conv) {
    if (score.numel() != 1) throw ConfigError("gradcam: score must be a scalar");
    if (last_conv.rank() != 4 || last_conv.dim(0) != 1)
        throw ConfigError("gradcam: need a single sample's conv feature block");
    const int k = last_conv.dim(1), h = last_conv.dim(2), w = last_conv.dim(3);
    Tensor g = backward(score, {last_conv}, false)[0];

    GridMap map;
    map.h = h;
    map.w = w;
    map.v.assign(static_cast<size_t>(h) * w, 0.0);
    const double inv_hw = 1.0 / (h * w);
    for (int c = 0; c < k; ++c) {
        double alpha = 0.0;
        const double* gp = g.data() + static_cast<size_t>(c) * h * w;
        for (int i = 0; i < h * w; ++i) alpha += gp[i];
        alpha *= inv_hw;
        const double* ap = last_conv.data() + static_cast<size_t>(c) * h * w;
        for (int i = 0; i < h * w; ++i) map.v[static_cast<size_t>(i)] += alpha * ap[i];
    }
    for (double& v : map.v) v = v > 0.0 ? v : 0.0;
    return map;
}

GridMap normalize_minmax(const GridMap& m) {
    if (m.v.empty()) throw ConfigError("normalize: empty map");
    double lo = m.v[0], hi = m.v[0];
    for (double v : m.v) {
        if (!std::isfinite(v)) throw ConfigError("normalize: non-finite map value");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    GridMap out;
    out.h = m.h;
    out.w = m.w;
    out.v.assign(m.v.size(), 0.0);
    if (hi == lo) return out;  // no contrast, no localization evidence
    const double inv = 1.0 / (hi - lo);
    for (size_t i = 0; i < m.v.size(); ++i) out.v[i] = (m.v[i] - lo) * inv;
    return out;
}

GridMap ensemble(const std::vector<GridMap>& maps, LanguageSpec::Mode mode,
                 bool fallback_on_zero) {
    if (maps.empty()) throw ConfigError("ensemble: no maps");
    for (const GridMap& m : maps)
        if (m.h != maps[0].h || m.w != maps[0].w)
            throw ConfigError("ensemble: map shapes disagree");

    std::vector<const GridMap*> used;
    for (const GridMap& m : maps) {
        bool nonzero = false;
        for (double v : m.v)
            if (v != 0.0) {
                nonzero = true;
                break;
            }
        if (nonzero || !fallback_on_zero) used.push_back(&m);
    }
    GridMap out;
    out.h = maps[0].h;
    out.w = maps[0].w;
    out.v.assign(maps[0].v.size(), 0.0);
    if (used.empty()) return out;  // every prompt came back silent

    if (mode == LanguageSpec::Mode::Average) {
        const double inv = 1.0 / used.size();
        for (const GridMap* m : used)
            for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += m->v[i] * inv;
    } else {
        for (size_t i = 0; i < out.v.size(); ++i) {
            double hi = used[0]->v[i];
            for (const GridMap* m : used) hi = std::max(hi, m->v[i]);
            out.v[i] = hi;
        }
    }
    return out;
}

AttentionMap ground(const TwoTowerGrounder& g, const Tensor& image, const LanguageSpec& spec) {
    if (!g.trained) throw ConfigError("grounding with an untrained grounder");
    spec.validate();
    if (image.rank() != 4 || image.dim(0) != 1)
        throw ConfigError("ground: expected a single (1,C,H,W) image");

    const double inv_tau = std::exp(g.param("log_inv_tau").data()[0]);
    std::vector<GridMap> per_prompt;
    for (const Prompt& p : spec.prompts) {
        Tape tape;
        GrounderTrace tr;
        Tensor ie = image_embeddings(g, tape, image, &tr);
        Tensor pe = prompt_embeddings(g, tape, {p});
        Tensor score = scale(sum_all(mul(ie, pe)), inv_tau);
        per_prompt.push_back(normalize_minmax(gradcam(score, tr.last_conv)));
    }
    GridMap src = ensemble(per_prompt, spec.mode, spec.fallback_on_zero);

    AttentionMap out;
    out.source = src;
    out.grid.h = g.spec.in_h;
    out.grid.w = g.spec.in_w;
    out.grid.v = bilinear_resize_grid(src.v, src.h, src.w, g.spec.in_h, g.spec.in_w);
    for (double& v : out.grid.v) v = std::min(1.0, std::max(0.0, v));
    for (const Prompt& p : spec.prompts) out.prompts.push_back(p.display);
    out.mode = spec.mode == LanguageSpec::Mode::Average ? "average" : "max";
    out.grounder = grounder_id(g);
    out.spec_hash = spec.hash();
    return out;
}

AttentionMap oracle_ground(const Sample& sample, int h, int w, int blur_radius,
                           double noise_level, uint64_t seed) {
    if (static_cast<int>(sample.mask.size()) != h * w)
        throw ConfigError("oracle grounding: sample lacks a ground-truth mask of " +
                          std::to_string(h) + "x" + std::to_string(w));
    if (blur_radius < 0 || noise_level < 0.0)
        throw ConfigError("oracle grounding: radius and noise must be nonnegative");

    GridMap blurred;
    blurred.h = h;
    blurred.w = w;
    blurred.v.assign(static_cast<size_t>(h) * w, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int y0 = std::max(0, y - blur_radius), y1 = std::min(h - 1, y + blur_radius);
            const int x0 = std::max(0, x - blur_radius), x1 = std::min(w - 1, x + blur_radius);
            double acc = 0.0;
            for (int yy = y0; yy <= y1; ++yy)
                for (int xx = x0; xx <= x1; ++xx)
                    acc += sample.mask[static_cast<size_t>(yy) * w + xx];
            blurred.v[static_cast<size_t>(y) * w + x] =
                acc / ((y1 - y0 + 1) * (x1 - x0 + 1));
        }

    AttentionMap out;
    out.mode = "oracle";
    out.grounder = "oracle";
    {
        std::ostringstream os;
        os << "oracle;r=" << blur_radius << ";noise=" << noise_level << ";seed=" << seed;
        out.prompts.push_back(os.str());
        out.spec_hash = hash64(os.str());
    }

    double lo = blurred.v[0], hi = blurred.v[0];
    for (double v : blurred.v) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi == lo) {
        // a constant blurred mask (all-foreground or empty) carries its own
        // verdict; noise must not manufacture contrast
        GridMap flat;
        flat.h = h;
        flat.w = w;
        flat.v.assign(static_cast<size_t>(h) * w, hi > 0.0 ? 1.0 : 0.0);
        out.grid = flat;
        out.source = flat;
        return out;
    }
    if (noise_level > 0.0) {
        Rng rng(derive_seed("oracle-att:" + sample.id, seed));
        for (double& v : blurred.v) v += noise_level * rng.uniform();
    }
    out.grid = normalize_minmax(blurred);
    out.source = out.grid;
    return out;
}

// ---- cache ----

std::string attention_cache_path(const std::string& dir, const std::string& image_id,
                                 uint64_t spec_hash) {
    char hex[17];
    std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(spec_hash));
    return dir + "/" + image_id + "." + hex + ".att";
}

void save_attention(const std::string& path, const AttentionMap& map) {
    if (map.grid.v.empty() ||
        static_cast<int>(map.grid.v.size()) != map.grid.h * map.grid.w)
        throw ConfigError("attention map grid is malformed");
    std::ostringstream os;
    os << "GALSATT 1 " << map.grid.h << " " << map.grid.w << "\n";
    char buf[32];
    for (int y = 0; y < map.grid.h; ++y) {
        for (int x = 0; x < map.grid.w; ++x) {
            std::snprintf(buf, sizeof(buf), "%.17g",
                          map.grid.v[static_cast<size_t>(y) * map.grid.w + x]);
            os << (x ? " " : "") << buf;
        }
        os << "\n";
    }
    os << "# mode: " << map.mode << "\n";
    os << "# grounder: " << map.grounder << "\n";
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(map.spec_hash));
    os << "# spec: " << buf << "\n";
    for (const std::string& p : map.prompts) os << "# prompt: " << p << "\n";
    if (!map.source.v.empty()) {
        os << "# source " << map.source.h << " " << map.source.w << "\n";
        for (int y = 0; y < map.source.h; ++y) {
            os << "#";
            for (int x = 0; x < map.source.w; ++x) {
                std::snprintf(buf, sizeof(buf), "%.17g",
                              map.source.v[static_cast<size_t>(y) * map.source.w + x]);
                os << " " << buf;
            }
            os << "\n";
        }
    }

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw IoError("cannot write attention map " + tmp);
        f << os.str();
        if (!f) throw IoError("attention map write failed: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot move attention map into place: " + path);
}

AttentionMap load_attention(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open attention map " + path);
    std::string magic;
    int version = 0, h = 0, w = 0;
    if (!(is >> magic >> version >> h >> w) || magic != "GALSATT" || version != 1)
        throw ParseError("not an attention map file: " + path);
    if (h < 1 || w < 1 || h > 4096 || w > 4096)
        throw ParseError("attention map extent out of range in " + path);
    AttentionMap map;
    map.grid.h = h;
    map.grid.w = w;
    map.grid.v.resize(static_cast<size_t>(h) * w);
    for (double& v : map.grid.v)
        if (!(is >> v)) throw ParseError("attention map truncated: " + path);
    std::string line;
    std::getline(is, line);  // finish the last grid row
    int source_rows_left = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line[0] != '#') throw ParseError("unexpected trailer in attention map: " + path);
        std::string body = trim(line.substr(1));
        if (source_rows_left > 0) {
            std::istringstream rs(body);
            for (int x = 0; x < map.source.w; ++x) {
                double v = 0.0;
                if (!(rs >> v)) throw ParseError("attention source grid truncated: " + path);
                map.source.v.push_back(v);
            }
            --source_rows_left;
            continue;
        }
        if (body.rfind("mode:", 0) == 0) map.mode = trim(body.substr(5));
        else if (body.rfind("grounder:", 0) == 0) map.grounder = trim(body.substr(9));
        else if (body.rfind("spec:", 0) == 0)
            map.spec_hash = std::stoull(trim(body.substr(5)), nullptr, 16);
        else if (body.rfind("prompt:", 0) == 0) map.prompts.push_back(trim(body.substr(7)));
        else if (body.rfind("source ", 0) == 0) {
            std::istringstream hs(body.substr(7));
            if (!(hs >> map.source.h >> map.source.w) || map.source.h < 1 || map.source.w < 1)
                throw ParseError("attention source header malformed: " + path);
            map.source.v.reserve(static_cast<size_t>(map.source.h) * map.source.w);
            source_rows_left = map.source.h;
        }
        // unknown comments are provenance for humans; skip them
    }
    if (source_rows_left != 0) throw ParseError("attention source grid truncated: " + path);
    return map;
}

AttentionMap ground_cached(const TwoTowerGrounder& g, const Sample& sample,
                           const LanguageSpec& spec, const std::string& cache_dir) {
    const std::string path = attention_cache_path(cache_dir, sample.id, spec.hash());
    if (std::filesystem::exists(path)) return load_attention(path);
    AttentionMap map = ground(g, image_tensor(sample, g.spec.in_h, g.spec.in_w), spec);
    std::filesystem::create_directories(cache_dir);
    save_attention(path, map);
    return map;
}

// ---- training ----

TwoTowerGrounder train_grounder(const DatasetSplit& data, const GrounderSpec& spec,
                                const GrounderTrainConfig& cfg,
                                GrounderTrainReport* report) {
    if (data.train.empty()) throw ConfigError("grounder training: empty train split");
    if (cfg.batch_size < 2) throw ConfigError("grounder training: batch size must be >= 2");
    if (cfg.epochs < 1 || cfg.lr <= 0.0)
        throw ConfigError("grounder training: need positive epochs and learning rate");

    const int n = static_cast<int>(data.train.size());
    std::vector<Prompt> captions(static_cast<size_t>(n));
    std::vector<std::string> keys(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        const Sample& s = data.train[static_cast<size_t>(i)];
        Prompt p;
        p.tokens = caption_tokens_for_sample(s, data.task, cfg.class_agnostic);
        std::ostringstream disp;
        for (size_t t = 0; t < p.tokens.size(); ++t)
            disp << (t ? " " : "")
                 << concept_vocabulary()[static_cast<size_t>(p.tokens[t])];
        p.display = disp.str();
        captions[static_cast<size_t>(i)] = p;
        keys[static_cast<size_t>(i)] = p.display;
        for (int t : p.tokens)
            if (t >= spec.vocab)
                throw ConfigError("grounder vocab too small for caption token " +
                                  std::to_string(t));
    }

    TwoTowerGrounder g = init_grounder(spec, derive_seed("grounder-init", cfg.seed));
    std::vector<Tensor> vel;
    for (const auto& kv : g.params) vel.push_back(Tensor::full(kv.second.shape(), 0.0));

    const size_t tau_i = tau_index(g);
    std::vector<double> epoch_losses;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<int> order(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
        Rng erng(derive_seed("grounder-epoch", cfg.seed, static_cast<uint64_t>(epoch)));
        erng.shuffle(order);

        double loss_sum = 0.0;
        int batches = 0;
        std::vector<char> taken(static_cast<size_t>(n), 0);
        size_t cursor = 0;
        for (;;) {
            // fill a batch with pairwise-distinct captions so the diagonal
            // match labels stay unambiguous
            std::vector<int> batch;
            std::vector<std::string> seen;
            for (size_t k = cursor; k < order.size() &&
                                    static_cast<int>(batch.size()) < cfg.batch_size;
                 ++k) {
                const int idx = order[k];
                if (taken[static_cast<size_t>(idx)]) continue;
                const std::string& key = keys[static_cast<size_t>(idx)];
                if (std::find(seen.begin(), seen.end(), key) != seen.end()) continue;
                seen.push_back(key);
                batch.push_back(idx);
                taken[static_cast<size_t>(idx)] = 1;
            }
            while (cursor < order.size() && taken[static_cast<size_t>(order[cursor])])
                ++cursor;
            if (static_cast<int>(batch.size()) < 2) break;

            const int b = static_cast<int>(batch.size());
            Tensor images({b, spec.in_channels, spec.in_h, spec.in_w});
            const int per = spec.in_channels * spec.in_h * spec.in_w;
            std::vector<Prompt> bprompts;
            for (int r = 0; r < b; ++r) {
                const Sample& s = data.train[static_cast<size_t>(batch[static_cast<size_t>(r)])];
                if (static_cast<int>(s.image.size()) != per)
                    throw ConfigError("sample image does not match grounder input extent");
                std::copy(s.image.begin(), s.image.end(), images.data() + r * per);
                bprompts.push_back(captions[static_cast<size_t>(batch[static_cast<size_t>(r)])]);
            }

            Tape tape;
            GrounderTrace tr;
            Tensor ie = image_embeddings(g, tape, images, &tr);
            Tensor te = encode_prompts_from_table(g.spec, tr.watched_params[table_index(g)],
                                                  bprompts);
            Tensor logit_scale = gals::exp(tr.watched_params[tau_i]);
            Tensor loss;
            try {
                loss = contrastive_loss(ie, te, logit_scale);
            } catch (const ConfigError& e) {
                // an embedding row losing its unit norm here means a tower
                // collapsed to (near) zero output, e.g. every relu went dead
                std::ostringstream os;
                os << "grounder training diverged (" << e.what() << ") at epoch " << epoch
                   << "; lr=" << cfg.lr << " batch_size=" << cfg.batch_size
                   << " momentum=" << cfg.momentum << " seed=" << cfg.seed;
                throw TrainingError(os.str());
            }
            const double lv = loss.item();
            if (!std::isfinite(lv)) {
                std::ostringstream os;
                os << "grounder training diverged (loss is not finite) at epoch " << epoch
                   << "; lr=" << cfg.lr << " batch_size=" << cfg.batch_size
                   << " momentum=" << cfg.momentum << " seed=" << cfg.seed;
                throw TrainingError(os.str());
            }
            loss_sum += lv;
            ++batches;

            std::vector<Tensor> grads = backward(loss, tr.watched_params, false);
            if (cfg.grad_clip > 0.0) {
                // cosine similarities through an L2-normalize have exploding
                // gradients near collapsed embeddings; a global norm cap
                // keeps single batches from wrecking the towers
                double total = 0.0;
                for (const Tensor& gr : grads)
                    for (int i = 0; i < gr.numel(); ++i) total += gr.data()[i] * gr.data()[i];
                total = std::sqrt(total);
                if (total > cfg.grad_clip) {
                    const double sc = cfg.grad_clip / total;
                    for (Tensor& gr : grads)
                        for (int i = 0; i < gr.numel(); ++i) gr.data()[i] *= sc;
                }
            }
            for (size_t p = 0; p < g.params.size(); ++p) {
                Tensor& theta = g.params[p].second;
                double* tv = theta.data();
                double* vv = vel[p].data();
                const double* gv = grads[p].data();
                for (int i = 0; i < theta.numel(); ++i) {
                    vv[i] = cfg.momentum * vv[i] + gv[i] + cfg.weight_decay * tv[i];
                    tv[i] -= cfg.lr * vv[i];
                }
            }
            // keep the similarity scale in a sane band, as contrastive
            // towers are prone to runaway temperatures
            double& lt = g.param("log_inv_tau").data()[0];
            lt = std::min(std::log(100.0), std::max(0.0, lt));
        }
        if (batches == 0) throw ConfigError("grounder training: no usable batch of size >= 2");
        epoch_losses.push_back(loss_sum / batches);
    }

    g.trained = true;
    if (report) {
        report->epoch_loss = epoch_losses;
        report->final_loss = epoch_losses.back();
    }
    return g;
}

double retrieval_accuracy(const TwoTowerGrounder& g, const std::vector<Sample>& samples,
                          const std::string& task, bool class_agnostic) {
    if (samples.empty()) throw ConfigError("retrieval: no samples");
    std::vector<Prompt> prompts;
    std::vector<std::string> keys;
    std::vector<int> target(samples.size());
    for (size_t i = 0; i < samples.size(); ++i) {
        Prompt p;
        p.tokens = caption_tokens_for_sample(samples[i], task, class_agnostic);
        std::ostringstream disp;
        for (size_t t = 0; t < p.tokens.size(); ++t)
            disp << (t ? " " : "") << concept_vocabulary()[static_cast<size_t>(p.tokens[t])];
        p.display = disp.str();
        auto it = std::find(keys.begin(), keys.end(), p.display);
        if (it == keys.end()) {
            target[i] = static_cast<int>(keys.size());
            keys.push_back(p.display);
            prompts.push_back(p);
        } else {
            target[i] = static_cast<int>(it - keys.begin());
        }
    }
    if (prompts.size() < 2)
        throw ConfigError("retrieval: need at least two distinct captions");

    Tape ptape;
    Tensor pe = prompt_embeddings(g, ptape, prompts);
    const int np = pe.dim(0), e = pe.dim(1);

    int correct = 0;
    const int per = g.spec.in_channels * g.spec.in_h * g.spec.in_w;
    const int chunk = 64;
    for (size_t at = 0; at < samples.size(); at += chunk) {
        const int b = static_cast<int>(std::min<size_t>(chunk, samples.size() - at));
        Tensor images({b, g.spec.in_channels, g.spec.in_h, g.spec.in_w});
        for (int r = 0; r < b; ++r) {
            const Sample& s = samples[at + static_cast<size_t>(r)];
            if (static_cast<int>(s.image.size()) != per)
                throw ConfigError("retrieval: image extent mismatch");
            std::copy(s.image.begin(), s.image.end(), images.data() + r * per);
        }
        Tape tape;
        Tensor ie = image_embeddings(g, tape, images);
        for (int r = 0; r < b; ++r) {
            int best = 0;
            double best_sim = 0.0;
            for (int p = 0; p < np; ++p) {
                double sim = 0.0;
                for (int j = 0; j < e; ++j)
                    sim += ie.data()[r * e + j] * pe.data()[p * e + j];
                if (p == 0 || sim > best_sim) {
                    best_sim = sim;
                    best = p;
                }
            }
            correct += best == target[at + static_cast<size_t>(r)];
        }
    }
    return static_cast<double>(correct) / samples.size();
}

int zero_shot_classify(const TwoTowerGrounder& g, const Tensor& image,
                       const std::vector<Prompt>& class_prompts, int num_classes) {
    if (static_cast<int>(class_prompts.size()) != num_classes)
        throw ConfigError("zero-shot: need exactly one prompt per class, got " +
                          std::to_string(class_prompts.size()) + " for " +
                          std::to_string(num_classes));
    Tape tape;
    Tensor ie = image_embeddings(g, tape, image);
    Tensor pe = prompt_embeddings(g, tape, class_prompts);
    const int e = ie.dim(1);
    int best = 0;
    double best_sim = 0.0;
    for (int c = 0; c < num_classes; ++c) {
        double sim = 0.0;
        for (int j = 0; j < e; ++j) sim += ie.data()[j] * pe.data()[c * e + j];
        if (c == 0 || sim > best_sim) {
            best_sim = sim;
            best = c;
        }
    }
    return best;
}

namespace {

Tensor embed_all(const TwoTowerGrounder& g, const std::vector<Sample>& samples) {
    const int n = static_cast<int>(samples.size());
    const int per = g.spec.in_channels * g.spec.in_h * g.spec.in_w;
    Tensor out({n, g.spec.embed_dim});
    const int chunk = 64;
    for (int at = 0; at < n; at += chunk) {
        const int b = std::min(chunk, n - at);
        Tensor images({b, g.spec.in_channels, g.spec.in_h, g.spec.in_w});
        for (int r = 0; r < b; ++r)
            std::copy(samples[static_cast<size_t>(at + r)].image.begin(),
                      samples[static_cast<size_t>(at + r)].image.end(),
                      images.data() + r * per);
        Tape tape;
        Tensor ie = image_embeddings(g, tape, images);
        std::copy(ie.data(), ie.data() + static_cast<size_t>(b) * g.spec.embed_dim,
                  out.data() + static_cast<size_t>(at) * g.spec.embed_dim);
    }
    return out;
}

}  // namespace

LinearProbe linear_probe(const TwoTowerGrounder& g, const std::vector<Sample>& samples,
                         int num_classes, const ProbeConfig& cfg) {
    if (samples.empty()) throw ConfigError("linear probe: no samples");
    if (num_classes < 2) throw ConfigError("linear probe: need at least two classes");
    const int n = static_cast<int>(samples.size()), e = g.spec.embed_dim;
    Tensor emb = embed_all(g, samples);
    std::vector<int> labels(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        labels[static_cast<size_t>(i)] = samples[static_cast<size_t>(i)].label;
        if (labels[static_cast<size_t>(i)] < 0 || labels[static_cast<size_t>(i)] >= num_classes)
            throw ConfigError("linear probe: label outside class range");
    }

    LinearProbe probe;
    probe.weight = Tensor(Shape{e, num_classes});
    probe.bias = Tensor(Shape{num_classes});
    Tensor vw = Tensor::full({e, num_classes}, 0.0), vb = Tensor::full({num_classes}, 0.0);
    for (int step = 0; step < cfg.steps; ++step) {
        Tape tape;
        Tensor w = tape.watch(probe.weight);
        Tensor b = tape.watch(probe.bias);
        Tensor logits = add(matmul(emb, w),
                            broadcast_axis(reshape(b, {1, num_classes}), 0, n));
        Tensor loss = cross_entropy(logits, labels);
        if (!std::isfinite(loss.item()))
            throw TrainingError("linear probe diverged at step " + std::to_string(step) +
                                "; lr=" + std::to_string(cfg.lr));
        std::vector<Tensor> grads = backward(loss, {w, b}, false);
        for (int i = 0; i < probe.weight.numel(); ++i) {
            vw.data()[i] = cfg.momentum * vw.data()[i] + grads[0].data()[i];
            probe.weight.data()[i] -= cfg.lr * vw.data()[i];
        }
        for (int i = 0; i < probe.bias.numel(); ++i) {
            vb.data()[i] = cfg.momentum * vb.data()[i] + grads[1].data()[i];
            probe.bias.data()[i] -= cfg.lr * vb.data()[i];
        }
    }
    return probe;
}

int probe_predict(const LinearProbe& probe, const TwoTowerGrounder& g, const Tensor& image) {
    Tape tape;
    Tensor ie = image_embeddings(g, tape, image);
    const int e = probe.weight.dim(0), c = probe.weight.dim(1);
    int best = 0;
    double best_score = 0.0;
    for (int k = 0; k < c; ++k) {
        double s = probe.bias.data()[k];
        for (int j = 0; j < e; ++j) s += ie.data()[j] * probe.weight.data()[j * c + k];
        if (k == 0 || s > best_score) {
            best_score = s;
            best = k;
        }
    }
    return best;
}

double probe_accuracy(const LinearProbe& probe, const TwoTowerGrounder& g,
                      const std::vector<Sample>& samples) {
    if (samples.empty()) throw ConfigError("probe accuracy: no samples");
    int correct = 0;
    for (const Sample& s : samples)
        correct += probe_predict(probe, g, image_tensor(s, g.spec.in_h, g.spec.in_w)) ==
                   s.label;
    return static_cast<double>(correct) / samples.size();
}

Tensor image_tensor(const Sample& s, int h, int w) {
    if (static_cast<int>(s.image.size()) != 3 * h * w)
        throw ConfigError("sample image extent mismatch for " + s.id);
    return Tensor({1, 3, h, w}, s.image);
}

}  // namespace gals
