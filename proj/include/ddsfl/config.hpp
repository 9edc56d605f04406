#pragma once

// Pipeline configuration: a sectioned key = value file, resolved against
// defaults, validated before any work starts, and hashable for run logs.

#include <map>
#include <sstream>

#include "ddsfl/core.hpp"
#include "ddsfl/dataio.hpp"
#include "ddsfl/dsfl.hpp"
#include "ddsfl/encode.hpp"
#include "ddsfl/exemplar.hpp"
#include "ddsfl/mathkit.hpp"

namespace ddsfl {

struct LayerConfig {
    int filters = 400;
    int pca_dim = 300;  // ignored on layer 1
    int num_scales = 6;
    int stride = 3;
    AggregateConfig agg;  // used above layer 1
    LayerHyperparams hp;
    int w_iters = 200;
    double grad_tol = 1e-6;
};

struct ExemplarConfig {
    std::string method = "nn";  // nn | svm | none
    NNSelectConfig nn;
    SVMSelectConfig svm;
};

struct ClassifierConfig {
    double lambda_reg = 1e-4;
    int epochs = 10;
};

struct SweepConfig {
    std::vector<std::string> params = {"xi", "lambda1", "lambda2", "gamma", "eta"};
    std::vector<double> grid = {0.0, 0.01, 0.1, 1.0};
    double val_fraction = 0.2;
};

struct PipelineConfig {
    std::string manifest;
    std::string image_root;

    int layers = 3;
    std::uint64_t seed = 0;
    int threads = 0;  // 0: hardware default

    int patches_per_image = 4000;
    double lu_pool_factor = 1.0;  // unsupervised pool size as a multiple of the exemplar count
    int patch_size = 16;

    ExemplarConfig exemplar;
    std::vector<LayerConfig> layer;  // size == layers
    EncodeParams encode;
    int codebook_cap = 100000;
    ClassifierConfig classifier;
    SweepConfig sweep;
};

inline LayerConfig default_layer_config(int index) {
    LayerConfig cfg;
    cfg.filters = 400;
    cfg.pca_dim = 300;
    cfg.hp.delta = 1.0;
    cfg.hp.K = 5;
    cfg.hp.M = 3;
    cfg.hp.nn_refresh_period = 50;
    cfg.hp.greedy_tol = 1e-3;
    cfg.hp.outer_rounds = 5;
    cfg.hp.xi = 0.1;
    cfg.hp.lambda1 = 0.1;
    cfg.hp.lambda2 = 0.1;
    cfg.hp.gamma = 1.0;
    cfg.hp.eta = 0.1;
    if (index == 0) {
        cfg.num_scales = 6;
        cfg.stride = 3;
    } else if (index == 1) {
        cfg.num_scales = 5;
        cfg.stride = 6;
        cfg.agg = {3, 8};
    } else {
        cfg.num_scales = 3;
        cfg.stride = 6;
        cfg.agg = {3, 16};
    }
    return cfg;
}

inline PipelineConfig default_config(int layers = 3) {
    PipelineConfig cfg;
    cfg.layers = layers;
    for (int l = 0; l < layers; ++l) cfg.layer.push_back(default_layer_config(l));
    return cfg;
}

// Receptive field of layer `index` given the preceding geometry.
inline int layer_receptive_field(const PipelineConfig& cfg, int index) {
    int rf = cfg.patch_size;
    for (int l = 1; l <= index; ++l) {
        rf = (cfg.layer[static_cast<std::size_t>(l)].agg.grid - 1) * cfg.layer[static_cast<std::size_t>(l)].agg.step + rf;
    }
    return rf;
}

namespace detail {

struct ConfigParser {
    std::map<std::string, std::map<std::string, std::pair<std::string, int>>> sections;
    std::string name;

    static std::string trim(const std::string& s) {
        std::size_t b = s.find_first_not_of(" \t\r");
        std::size_t e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    }

    void parse(const std::string& text) {
        std::istringstream in(text);
        std::string line, section;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#' || t[0] == ';') continue;
            if (t.front() == '[') {
                if (t.back() != ']') fail(lineno, "unterminated section header");
                section = trim(t.substr(1, t.size() - 2));
                if (section.empty()) fail(lineno, "empty section name");
                continue;
            }
            const std::size_t eq = t.find('=');
            if (eq == std::string::npos) fail(lineno, "expected `key = value`");
            const std::string key = trim(t.substr(0, eq));
            const std::string value = trim(t.substr(eq + 1));
            if (key.empty()) fail(lineno, "empty key");
            if (section.empty()) fail(lineno, "key outside any section");
            auto& sec = sections[section];
            if (sec.count(key) != 0) fail(lineno, "duplicate key `" + key + "`");
            sec[key] = {value, lineno};
        }
    }

    [[noreturn]] void fail(int lineno, const std::string& why) const {
        throw DataError(name + ": config error at line " + std::to_string(lineno) + ": " + why);
    }

    // Typed getters; consumed keys are erased so leftovers can be reported.
    bool take(const std::string& sec, const std::string& key, std::string* out) {
        auto s = sections.find(sec);
        if (s == sections.end()) return false;
        auto k = s->second.find(key);
        if (k == s->second.end()) return false;
        *out = k->second.first;
        s->second.erase(k);
        return true;
    }

    template <typename T, typename Fn>
    void get(const std::string& sec, const std::string& key, T* out, Fn&& convert) {
        std::string raw;
        if (!take(sec, key, &raw)) return;
        try {
            *out = convert(raw);
        } catch (const std::exception&) {
            throw DataError(name + ": config error: bad value for " + sec + "." + key + ": `" + raw + "`");
        }
    }

    void get_int(const std::string& sec, const std::string& key, int* out) {
        get(sec, key, out, [](const std::string& v) {
            std::size_t used = 0;
            const long long r = std::stoll(v, &used);
            if (used != v.size()) throw std::invalid_argument("");
            return static_cast<int>(r);
        });
    }

    void get_u64(const std::string& sec, const std::string& key, std::uint64_t* out) {
        get(sec, key, out, [](const std::string& v) {
            std::size_t used = 0;
            const unsigned long long r = std::stoull(v, &used);
            if (used != v.size()) throw std::invalid_argument("");
            return static_cast<std::uint64_t>(r);
        });
    }

    void get_double(const std::string& sec, const std::string& key, double* out) {
        get(sec, key, out, [](const std::string& v) {
            std::size_t used = 0;
            const double r = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument("");
            return r;
        });
    }

    void get_bool(const std::string& sec, const std::string& key, bool* out) {
        get(sec, key, out, [](const std::string& v) {
            if (v == "true" || v == "1") return true;
            if (v == "false" || v == "0") return false;
            throw std::invalid_argument("");
        });
    }

    void get_string(const std::string& sec, const std::string& key, std::string* out) {
        get(sec, key, out, [](const std::string& v) { return v; });
    }

    void reject_leftovers() const {
        for (const auto& [sec, keys] : sections) {
            for (const auto& [key, value] : keys) {
                throw DataError(name + ": config error at line " + std::to_string(value.second) +
                                ": unknown key " + sec + "." + key);
            }
        }
    }
};

inline std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, ',')) {
        const std::string t = ConfigParser::trim(cur);
        if (!t.empty()) out.push_back(t);
    }
    return out;
}

}  // namespace detail

inline void validate_config(const PipelineConfig& cfg) {
    auto fail = [](const std::string& why) { throw DataError("config contradiction: " + why); };
    if (cfg.layers < 1 || cfg.layers > 3) fail("layers must be 1..3");
    if (static_cast<int>(cfg.layer.size()) != cfg.layers) fail("layer section count mismatch");
    if (cfg.patches_per_image < 1) fail("patches_per_image must be >= 1");
    if (cfg.lu_pool_factor < 1.0) fail("lu_pool_factor must be >= 1");
    if (cfg.patch_size < 2) fail("patch_size must be >= 2");
    if (cfg.exemplar.method != "nn" && cfg.exemplar.method != "svm" && cfg.exemplar.method != "none") {
        fail("exemplar.method must be nn, svm, or none");
    }
    if (!(cfg.exemplar.nn.eps_nn > 0.0) || cfg.exemplar.nn.eps_nn > 1.0) fail("eps_nn must be in (0,1]");
    if (cfg.exemplar.nn.M_nn < 1) fail("M_nn must be >= 1");
    if (cfg.exemplar.svm.M_svm < cfg.exemplar.svm.eps_svm || cfg.exemplar.svm.eps_svm < 1) {
        fail("need M_svm >= eps_svm >= 1");
    }
    for (int l = 0; l < cfg.layers; ++l) {
        const LayerConfig& lc = cfg.layer[static_cast<std::size_t>(l)];
        if (lc.filters < 1) fail("layer filters must be >= 1");
        if (lc.num_scales < 1) fail("num_scales must be >= 1");
        if (lc.stride < 1) fail("stride must be >= 1");
        if (lc.hp.K < 1) fail("K must be >= 1");
        if (lc.hp.delta <= 0) fail("delta must be > 0");
        if (lc.hp.xi < 0 || lc.hp.lambda1 < 0 || lc.hp.lambda2 < 0 || lc.hp.gamma < 0 || lc.hp.eta < 0) {
            fail("trade-off weights must be >= 0");
        }
        if (lc.hp.xi > 0 && lc.hp.M < 1) fail("M must be >= 1 when xi > 0");
        if (l > 0) {
            if (lc.agg.grid < 1) fail("agg_grid must be >= 1");
            if (lc.agg.grid > 1 && lc.agg.step < 1) fail("agg_step must be >= 1");
            const int prev_filters = cfg.layer[static_cast<std::size_t>(l - 1)].filters;
            const int agg_dim = lc.agg.grid * lc.agg.grid * prev_filters;
            if (lc.pca_dim < 1 || lc.pca_dim > agg_dim) {
                fail("layer " + std::to_string(l + 1) + " pca_dim must be in [1, grid^2 * prev_filters]");
            }
        }
    }
    if (cfg.encode.knn < 1 || cfg.encode.knn > cfg.encode.codebook_size) fail("knn must be in [1, codebook_size]");
    if (!(cfg.encode.beta > 0)) fail("beta must be > 0");
    if (cfg.codebook_cap < cfg.encode.codebook_size) fail("codebook_cap must be >= codebook_size");
    if (cfg.classifier.lambda_reg <= 0) fail("classifier lambda must be > 0");
    if (!(cfg.sweep.val_fraction > 0.0) || cfg.sweep.val_fraction >= 1.0) fail("sweep val_fraction must be in (0,1)");
    if (cfg.sweep.grid.empty()) fail("sweep grid must be nonempty");
    for (const auto& p : cfg.sweep.params) {
        if (p != "xi" && p != "lambda1" && p != "lambda2" && p != "gamma" && p != "eta") {
            fail("unknown sweep parameter `" + p + "`");
        }
    }
}

inline PipelineConfig parse_config_text(const std::string& text, const std::string& name) {
    detail::ConfigParser p;
    p.name = name;
    p.parse(text);

    PipelineConfig cfg = default_config(3);
    int layers = 3;
    p.get_int("pipeline", "layers", &layers);
    cfg = default_config(layers);
    cfg.layers = layers;

    p.get_string("dataset", "manifest", &cfg.manifest);
    p.get_string("dataset", "image_root", &cfg.image_root);

    p.get_u64("pipeline", "seed", &cfg.seed);
    p.get_int("pipeline", "threads", &cfg.threads);

    p.get_int("dataio", "patches_per_image", &cfg.patches_per_image);
    p.get_double("dataio", "lu_pool_factor", &cfg.lu_pool_factor);
    p.get_int("dataio", "patch_size", &cfg.patch_size);

    p.get_string("exemplar", "method", &cfg.exemplar.method);
    p.get_double("exemplar", "eps_nn", &cfg.exemplar.nn.eps_nn);
    p.get_int("exemplar", "M_nn", &cfg.exemplar.nn.M_nn);
    p.get_bool("exemplar", "approx", &cfg.exemplar.nn.approx);
    p.get_int("exemplar", "ann_trees", &cfg.exemplar.nn.ann_trees);
    p.get_int("exemplar", "ann_checks", &cfg.exemplar.nn.ann_checks);
    p.get_int("exemplar", "svm_clusters", &cfg.exemplar.svm.S_c);
    p.get_int("exemplar", "svm_M", &cfg.exemplar.svm.M_svm);
    p.get_int("exemplar", "svm_eps", &cfg.exemplar.svm.eps_svm);
    p.get_int("exemplar", "svm_rounds", &cfg.exemplar.svm.max_rounds);
    p.get_double("exemplar", "svm_lambda", &cfg.exemplar.svm.lambda_reg);
    p.get_int("exemplar", "svm_epochs", &cfg.exemplar.svm.epochs);
    p.get_int("exemplar", "svm_neg_cap", &cfg.exemplar.svm.neg_cap);

    for (int l = 0; l < cfg.layers; ++l) {
        const std::string sec = "layer" + std::to_string(l + 1);
        LayerConfig& lc = cfg.layer[static_cast<std::size_t>(l)];
        p.get_int(sec, "filters", &lc.filters);
        p.get_int(sec, "pca_dim", &lc.pca_dim);
        p.get_int(sec, "num_scales", &lc.num_scales);
        p.get_int(sec, "stride", &lc.stride);
        p.get_int(sec, "agg_grid", &lc.agg.grid);
        p.get_int(sec, "agg_step", &lc.agg.step);
        p.get_double(sec, "xi", &lc.hp.xi);
        p.get_double(sec, "lambda1", &lc.hp.lambda1);
        p.get_double(sec, "lambda2", &lc.hp.lambda2);
        p.get_double(sec, "gamma", &lc.hp.gamma);
        p.get_double(sec, "eta", &lc.hp.eta);
        p.get_double(sec, "delta", &lc.hp.delta);
        p.get_int(sec, "K", &lc.hp.K);
        p.get_int(sec, "M", &lc.hp.M);
        p.get_int(sec, "nn_refresh", &lc.hp.nn_refresh_period);
        p.get_double(sec, "greedy_tol", &lc.hp.greedy_tol);
        p.get_int(sec, "max_active", &lc.hp.max_active);
        p.get_int(sec, "outer_rounds", &lc.hp.outer_rounds);
        p.get_int(sec, "w_iters", &lc.w_iters);
        p.get_double(sec, "grad_tol", &lc.grad_tol);
    }

    p.get_int("encode", "codebook_size", &cfg.encode.codebook_size);
    p.get_int("encode", "knn", &cfg.encode.knn);
    p.get_double("encode", "beta", &cfg.encode.beta);
    p.get_bool("encode", "signed_max", &cfg.encode.signed_max);
    p.get_int("encode", "kmeans_iters", &cfg.encode.kmeans_iters);
    p.get_int("encode", "codebook_cap", &cfg.codebook_cap);

    p.get_double("svm", "lambda", &cfg.classifier.lambda_reg);
    p.get_int("svm", "epochs", &cfg.classifier.epochs);

    std::string csv;
    if (p.take("sweep", "params", &csv)) cfg.sweep.params = detail::split_csv(csv);
    if (p.take("sweep", "grid", &csv)) {
        cfg.sweep.grid.clear();
        for (const auto& v : detail::split_csv(csv)) cfg.sweep.grid.push_back(std::stod(v));
    }
    p.get_double("sweep", "val_fraction", &cfg.sweep.val_fraction);

    p.reject_leftovers();
    validate_config(cfg);
    return cfg;
}

inline PipelineConfig load_config(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    return parse_config_text(std::string(bytes.begin(), bytes.end()), path);
}

// Canonical dump of every resolved field; re-parsing it yields the same config.
inline std::string dump_config(const PipelineConfig& cfg) {
    std::ostringstream out;
    out.precision(17);
    out << "[dataset]\n";
    out << "manifest = " << cfg.manifest << "\n";
    out << "image_root = " << cfg.image_root << "\n";
    out << "[pipeline]\n";
    out << "layers = " << cfg.layers << "\n";
    out << "seed = " << cfg.seed << "\n";
    out << "threads = " << cfg.threads << "\n";
    out << "[dataio]\n";
    out << "patches_per_image = " << cfg.patches_per_image << "\n";
    out << "lu_pool_factor = " << cfg.lu_pool_factor << "\n";
    out << "patch_size = " << cfg.patch_size << "\n";
    out << "[exemplar]\n";
    out << "method = " << cfg.exemplar.method << "\n";
    out << "eps_nn = " << cfg.exemplar.nn.eps_nn << "\n";
    out << "M_nn = " << cfg.exemplar.nn.M_nn << "\n";
    out << "approx = " << (cfg.exemplar.nn.approx ? "true" : "false") << "\n";
    out << "ann_trees = " << cfg.exemplar.nn.ann_trees << "\n";
    out << "ann_checks = " << cfg.exemplar.nn.ann_checks << "\n";
    out << "svm_clusters = " << cfg.exemplar.svm.S_c << "\n";
    out << "svm_M = " << cfg.exemplar.svm.M_svm << "\n";
    out << "svm_eps = " << cfg.exemplar.svm.eps_svm << "\n";
    out << "svm_rounds = " << cfg.exemplar.svm.max_rounds << "\n";
    out << "svm_lambda = " << cfg.exemplar.svm.lambda_reg << "\n";
    out << "svm_epochs = " << cfg.exemplar.svm.epochs << "\n";
    out << "svm_neg_cap = " << cfg.exemplar.svm.neg_cap << "\n";
    for (int l = 0; l < cfg.layers; ++l) {
        const LayerConfig& lc = cfg.layer[static_cast<std::size_t>(l)];
        out << "[layer" << (l + 1) << "]\n";
        out << "filters = " << lc.filters << "\n";
        out << "pca_dim = " << lc.pca_dim << "\n";
        out << "num_scales = " << lc.num_scales << "\n";
        out << "stride = " << lc.stride << "\n";
        out << "agg_grid = " << lc.agg.grid << "\n";
        out << "agg_step = " << lc.agg.step << "\n";
        out << "xi = " << lc.hp.xi << "\n";
        out << "lambda1 = " << lc.hp.lambda1 << "\n";
        out << "lambda2 = " << lc.hp.lambda2 << "\n";
        out << "gamma = " << lc.hp.gamma << "\n";
        out << "eta = " << lc.hp.eta << "\n";
        out << "delta = " << lc.hp.delta << "\n";
        out << "K = " << lc.hp.K << "\n";
        out << "M = " << lc.hp.M << "\n";
        out << "nn_refresh = " << lc.hp.nn_refresh_period << "\n";
        out << "greedy_tol = " << lc.hp.greedy_tol << "\n";
        out << "max_active = " << lc.hp.max_active << "\n";
        out << "outer_rounds = " << lc.hp.outer_rounds << "\n";
        out << "w_iters = " << lc.w_iters << "\n";
        out << "grad_tol = " << lc.grad_tol << "\n";
    }
    out << "[encode]\n";
    out << "codebook_size = " << cfg.encode.codebook_size << "\n";
    out << "knn = " << cfg.encode.knn << "\n";
    out << "beta = " << cfg.encode.beta << "\n";
    out << "signed_max = " << (cfg.encode.signed_max ? "true" : "false") << "\n";
    out << "kmeans_iters = " << cfg.encode.kmeans_iters << "\n";
    out << "codebook_cap = " << cfg.codebook_cap << "\n";
    out << "[svm]\n";
    out << "lambda = " << cfg.classifier.lambda_reg << "\n";
    out << "epochs = " << cfg.classifier.epochs << "\n";
    out << "[sweep]\n";
    out << "params = ";
    for (std::size_t i = 0; i < cfg.sweep.params.size(); ++i) {
        out << (i ? "," : "") << cfg.sweep.params[i];
    }
    out << "\n";
    out << "grid = ";
    for (std::size_t i = 0; i < cfg.sweep.grid.size(); ++i) {
        out << (i ? "," : "") << cfg.sweep.grid[i];
    }
    out << "\n";
    out << "val_fraction = " << cfg.sweep.val_fraction << "\n";
    return out.str();
}

inline std::string config_hash_hex(const PipelineConfig& cfg) {
    const std::uint64_t h = fnv1a64(dump_config(cfg));
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

}  // namespace ddsfl
