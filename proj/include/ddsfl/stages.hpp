#pragma once

// CLI stage runners and the artifact formats passed between them. Every
// artifact is written atomically; `pipeline` is literally the stages run in
// order against the same files.

#include <filesystem>
#include <iomanip>

#include "ddsfl/pipeline.hpp"

namespace ddsfl {

namespace artifacts {
inline constexpr const char* patches = "patches.bin";
inline constexpr const char* exemplars = "exemplars.tsv";
inline constexpr const char* model = "model.ddsfl";
inline constexpr const char* metrics = "metrics.txt";
inline constexpr const char* confusion = "confusion.csv";
}  // namespace artifacts

inline std::string artifact_path(const std::string& out_dir, const char* name) {
    return (std::filesystem::path(out_dir) / name).string();
}

inline void require_artifact(const std::string& path, const std::string& produced_by) {
    if (!std::filesystem::exists(path)) {
        throw DataError("missing artifact `" + path + "`; run `" + produced_by + "` first");
    }
}

// ---------------------------------------------------------------------------
// Patch store: magic DDSP, version, dims, then per-patch provenance + f32 data.

inline void save_patchset(const PatchSet& set, const std::string& path) {
    ByteWriter w;
    w.raw("DDSP", 4);
    w.u16(1);
    w.u32(static_cast<std::uint32_t>(set.X.rows()));
    w.u32(static_cast<std::uint32_t>(set.patch_size));
    w.u32(static_cast<std::uint32_t>(set.num_classes));
    w.u64(static_cast<std::uint64_t>(set.X.cols()));
    for (Eigen::Index i = 0; i < set.X.cols(); ++i) {
        const auto& pv = set.prov[static_cast<std::size_t>(i)];
        w.i32(pv.image_id);
        w.i32(set.labels[static_cast<std::size_t>(i)]);
        w.i32(pv.scale_idx);
        w.i32(pv.x);
        w.i32(pv.y);
        for (Eigen::Index d = 0; d < set.X.rows(); ++d) w.f32(static_cast<float>(set.X(d, i)));
    }
    write_file_atomic(path, w.bytes());
}

inline PatchSet load_patchset(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    ByteReader r(bytes);
    char magic[4];
    if (bytes.size() < 4) throw DataError(path + ": bad magic");
    r.raw(magic, 4);
    if (std::memcmp(magic, "DDSP", 4) != 0) throw DataError(path + ": bad magic");
    if (r.u16() != 1) throw DataError(path + ": unsupported patch store version");
    PatchSet set;
    const std::uint32_t d0 = r.u32();
    set.patch_size = static_cast<int>(r.u32());
    set.num_classes = static_cast<int>(r.u32());
    const std::uint64_t n = r.u64();
    set.X.resize(d0, static_cast<Eigen::Index>(n));
    set.labels.resize(n);
    set.prov.resize(n);
    for (std::uint64_t i = 0; i < n; ++i) {
        set.prov[i].image_id = r.i32();
        set.labels[i] = r.i32();
        set.prov[i].scale_idx = r.i32();
        set.prov[i].x = r.i32();
        set.prov[i].y = r.i32();
        for (std::uint32_t d = 0; d < d0; ++d) set.X(d, static_cast<Eigen::Index>(i)) = static_cast<double>(r.f32());
    }
    if (!r.at_end()) throw DataError(path + ": trailing data");
    return set;
}

inline ExemplarSet load_exemplars(const std::string& path, int num_classes, std::size_t pool_size) {
    const auto bytes = read_file_bytes(path);
    ExemplarSet ex;
    ex.per_class.resize(static_cast<std::size_t>(num_classes));
    std::istringstream in(std::string(bytes.begin(), bytes.end()));
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        long cls = -1, idx = -1;
        if (!(ls >> cls >> idx) || cls < 0 || cls >= num_classes || idx < 0 ||
            static_cast<std::size_t>(idx) >= pool_size) {
            throw DataError(path + ": bad exemplar record at line " + std::to_string(lineno));
        }
        ex.per_class[static_cast<std::size_t>(cls)].push_back(static_cast<int>(idx));
    }
    return ex;
}

// ---------------------------------------------------------------------------
// Descriptor export: binary matrix (one row per image) plus an index file
// listing the image paths in row order.

inline void save_descriptors(const EncodedSplit& enc, const std::string& bin_path,
                             const std::string& idx_path) {
    ByteWriter w;
    w.u32(static_cast<std::uint32_t>(enc.descriptors.cols()));  // rows: images
    w.u32(static_cast<std::uint32_t>(enc.descriptors.rows()));  // cols: descriptor dim
    for (Eigen::Index i = 0; i < enc.descriptors.cols(); ++i) {
        for (Eigen::Index d = 0; d < enc.descriptors.rows(); ++d) {
            w.f32(static_cast<float>(enc.descriptors(d, i)));
        }
    }
    write_file_atomic(bin_path, w.bytes());

    std::ostringstream idx;
    for (std::size_t i = 0; i < enc.paths.size(); ++i) {
        idx << enc.paths[i] << '\t' << enc.labels[i] << '\n';
    }
    write_file_atomic(idx_path, idx.str());
}

inline EncodedSplit load_descriptors(const std::string& bin_path, const std::string& idx_path) {
    const auto bytes = read_file_bytes(bin_path);
    ByteReader r(bytes);
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    EncodedSplit enc;
    enc.descriptors.resize(cols, rows);
    for (std::uint32_t i = 0; i < rows; ++i) {
        for (std::uint32_t d = 0; d < cols; ++d) enc.descriptors(d, i) = static_cast<double>(r.f32());
    }
    if (!r.at_end()) throw DataError(bin_path + ": trailing data");

    const auto idx_bytes = read_file_bytes(idx_path);
    std::istringstream in(std::string(idx_bytes.begin(), idx_bytes.end()));
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos) throw DataError(idx_path + ": malformed index line");
        enc.paths.push_back(line.substr(0, tab));
        enc.labels.push_back(std::stoi(line.substr(tab + 1)));
    }
    if (enc.labels.size() != rows) throw DataError(idx_path + ": index does not match descriptor rows");
    return enc;
}

// ---------------------------------------------------------------------------
// Metrics report: `metric<TAB>value` lines, confusion as CSV.

inline std::string format_metrics(const Metrics& m) {
    std::ostringstream out;
    out << "accuracy\t" << std::fixed << std::setprecision(6) << m.accuracy << '\n';
    for (Eigen::Index c = 0; c < m.per_class.size(); ++c) {
        out << "class_" << c << "_accuracy\t" << std::fixed << std::setprecision(6) << m.per_class(c) << '\n';
    }
    return out.str();
}

inline std::string format_confusion_csv(const Metrics& m) {
    std::ostringstream out;
    for (Eigen::Index r = 0; r < m.confusion.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.confusion.cols(); ++c) {
            out << m.confusion(r, c) << (c + 1 < m.confusion.cols() ? "," : "");
        }
        out << '\n';
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// Feature-map export for `extract`: per block a text header
// `FMAP image=<path> scale=<i> sw=<w> sh=<h> rf=<rf> stride=<s> rows=<n> cols=<d>`
// followed by rows*cols f32 row-major (one row per anchor, y-outer x-inner).

inline void append_feature_map_block(ByteWriter& w, const std::string& image_path, const FeatureMap& fm,
                                     int stride) {
    for (std::size_t s = 0; s < fm.scale_dims.size(); ++s) {
        std::vector<const FeatureEntry*> entries;
        for (const auto& e : fm.entries) {
            if (e.scale_idx == static_cast<int>(s)) entries.push_back(&e);
        }
        if (entries.empty()) continue;
        const Eigen::Index dim = entries[0]->f.size();
        std::ostringstream head;
        head << "FMAP image=" << image_path << " scale=" << s << " sw=" << fm.scale_dims[s].first
             << " sh=" << fm.scale_dims[s].second << " rf=" << fm.receptive_field
             << " stride=" << stride << " rows=" << entries.size() << " cols=" << dim << "\n";
        const std::string h = head.str();
        w.raw(h.data(), h.size());
        for (const auto* e : entries) {
            for (Eigen::Index d = 0; d < dim; ++d) w.f32(static_cast<float>(e->f(d)));
        }
    }
}

// ---------------------------------------------------------------------------
// Stage runners

struct StageContext {
    PipelineConfig cfg;
    std::string out_dir;
    DatasetManifest manifest;
};

inline StageContext make_stage_context(const PipelineConfig& cfg, const std::string& out_dir) {
    if (cfg.manifest.empty()) throw DataError("config has no dataset.manifest");
    StageContext ctx{cfg, out_dir, load_manifest(cfg.manifest)};
    std::filesystem::create_directories(out_dir);
    log_info("config_hash=" + config_hash_hex(cfg) + " seed=" + std::to_string(cfg.seed) +
             " out=" + out_dir);
    return ctx;
}

inline void run_stage_patches(const StageContext& ctx) {
    const PatchSet set = collect_layer1_patches(ctx.manifest, ctx.cfg, ctx.cfg.seed);
    save_patchset(set, artifact_path(ctx.out_dir, artifacts::patches));
    log_info("patches: " + std::to_string(set.labels.size()) + " stored");
}

inline void run_stage_exemplars(const StageContext& ctx) {
    const std::string ppath = artifact_path(ctx.out_dir, artifacts::patches);
    require_artifact(ppath, "patches");
    const PatchSet set = load_patchset(ppath);
    const ExemplarSet ex = select_exemplars(set, ctx.cfg, ctx.cfg.seed);
    dump_exemplars(ex, artifact_path(ctx.out_dir, artifacts::exemplars));
    log_info("exemplars: " + std::to_string(ex.total()) + " of " + std::to_string(set.labels.size()) + " kept");
}

inline void run_stage_train(const StageContext& ctx, bool random_filters = false) {
    DeepModel model;
    if (random_filters) {
        model.layers = train_layers(ctx.manifest, ctx.cfg, PatchSet{}, ExemplarSet{}, ctx.cfg.seed,
                                    {true});
    } else {
        const std::string ppath = artifact_path(ctx.out_dir, artifacts::patches);
        const std::string epath = artifact_path(ctx.out_dir, artifacts::exemplars);
        require_artifact(ppath, "patches");
        require_artifact(epath, "exemplars");
        const PatchSet set = load_patchset(ppath);
        const ExemplarSet ex = load_exemplars(epath, set.num_classes, set.labels.size());
        model.layers = train_layers(ctx.manifest, ctx.cfg, set, ex, ctx.cfg.seed);
    }
    quantize_model(model);
    save_model(model, artifact_path(ctx.out_dir, artifacts::model));
    log_info("train: model with " + std::to_string(model.layers.size()) + " layer(s) written");
}

inline void run_stage_codebook(const StageContext& ctx) {
    const std::string mpath = artifact_path(ctx.out_dir, artifacts::model);
    require_artifact(mpath, "train");
    DeepModel model = load_model(mpath);
    model.codebooks = build_codebooks(ctx.manifest, ctx.cfg, model, ctx.cfg.seed);
    quantize_model(model);
    save_model(model, mpath);
}

inline std::string descriptor_bin_path(const std::string& out_dir, Split split) {
    return artifact_path(out_dir, ("descriptors_" + std::string(split_name(split)) + ".bin").c_str());
}

inline std::string descriptor_idx_path(const std::string& out_dir, Split split) {
    return artifact_path(out_dir, ("descriptors_" + std::string(split_name(split)) + ".idx").c_str());
}

inline void run_stage_encode(const StageContext& ctx, Split split) {
    const std::string mpath = artifact_path(ctx.out_dir, artifacts::model);
    require_artifact(mpath, "train");
    const DeepModel model = load_model(mpath);
    if (!model.has_codebooks()) throw DataError("model has no codebooks; run `codebook` first");
    const EncodedSplit enc = encode_split(ctx.manifest, ctx.cfg, model, split);
    save_descriptors(enc, descriptor_bin_path(ctx.out_dir, split), descriptor_idx_path(ctx.out_dir, split));
    log_info(std::string("encode: ") + split_name(split) + " split, " + std::to_string(enc.labels.size()) +
             " descriptors of dim " + std::to_string(enc.descriptors.rows()));
}

inline void run_stage_fit_classifier(const StageContext& ctx) {
    const std::string mpath = artifact_path(ctx.out_dir, artifacts::model);
    require_artifact(mpath, "train");
    const std::string dpath = descriptor_bin_path(ctx.out_dir, Split::train);
    require_artifact(dpath, "encode");
    DeepModel model = load_model(mpath);
    const EncodedSplit enc = load_descriptors(dpath, descriptor_idx_path(ctx.out_dir, Split::train));
    model.classifier = fit_classifier(enc, ctx.manifest.num_classes, ctx.cfg, ctx.cfg.seed);
    quantize_model(model);
    save_model(model, mpath);
}

inline Metrics run_stage_evaluate(const StageContext& ctx) {
    const std::string mpath = artifact_path(ctx.out_dir, artifacts::model);
    require_artifact(mpath, "train");
    const DeepModel model = load_model(mpath);
    if (!model.has_classifier()) throw DataError("model has no classifier; run `fit-classifier` first");
    const std::string dpath = descriptor_bin_path(ctx.out_dir, Split::test);
    require_artifact(dpath, "encode");
    const EncodedSplit enc = load_descriptors(dpath, descriptor_idx_path(ctx.out_dir, Split::test));
    const Metrics metrics = evaluate_encoded(model, enc, ctx.manifest.num_classes);
    write_file_atomic(artifact_path(ctx.out_dir, artifacts::metrics), format_metrics(metrics));
    write_file_atomic(artifact_path(ctx.out_dir, artifacts::confusion), format_confusion_csv(metrics));
    log_info("evaluate: accuracy " + std::to_string(metrics.accuracy));
    return metrics;
}

inline Metrics run_stage_pipeline(const StageContext& ctx, bool random_filters = false) {
    if (!random_filters) {
        run_stage_patches(ctx);
        run_stage_exemplars(ctx);
    }
    run_stage_train(ctx, random_filters);
    run_stage_codebook(ctx);
    run_stage_encode(ctx, Split::train);
    run_stage_fit_classifier(ctx);
    run_stage_encode(ctx, Split::test);
    return run_stage_evaluate(ctx);
}

inline void run_stage_extract(const StageContext& ctx, int layer, Split split) {
    const std::string mpath = artifact_path(ctx.out_dir, artifacts::model);
    require_artifact(mpath, "train");
    const DeepModel model = load_model(mpath);
    ByteWriter w;
    for (const auto& e : split_entries(ctx.manifest, split)) {
        const GrayImage img = load_image(resolve_image_path(ctx.cfg, e.path));
        const FeatureMap fm = extract_features(img, model, layer);
        append_feature_map_block(w, e.path, fm, model.layers[static_cast<std::size_t>(layer - 1)].stride);
    }
    const std::string path =
        artifact_path(ctx.out_dir, ("features_layer" + std::to_string(layer) + "_" + split_name(split) + ".bin").c_str());
    write_file_atomic(path, w.bytes());
    log_info("extract: wrote " + path);
}

}  // namespace ddsfl
