#pragma once

// End-to-end orchestration: patch collection, per-layer training with exemplar
// re-selection on derived inputs, codebooks, classifier fitting, evaluation,
// split resampling, and the sequential hyperparameter sweep. The CLI stages
// call these same functions, with artifacts persisted between them.
//
// Every parameter block is rounded through f32 the moment it is produced, so
// in-memory runs and artifact-driven stage runs yield byte-identical models.

#include <filesystem>
#include <memory>
#include <numeric>

#include "ddsfl/config.hpp"
#include "ddsfl/dataio.hpp"
#include "ddsfl/deepstack.hpp"
#include "ddsfl/dsfl.hpp"
#include "ddsfl/encode.hpp"
#include "ddsfl/exemplar.hpp"

namespace ddsfl {

// ---------------------------------------------------------------------------
// Patch pools

struct PatchProvenance {
    int image_id;  // index into the train-split entry list
    int scale_idx;
    int x, y;
};

struct PatchSet {
    Eigen::MatrixXd X;  // D0 x N, already normalized (layer 1) or PCA inputs (layers above)
    std::vector<int> labels;
    std::vector<PatchProvenance> prov;
    int patch_size = 0;  // layer-1 pixel size; 0 above
    int num_classes = 0;
};

inline std::vector<ManifestEntry> split_entries(const DatasetManifest& manifest, Split split) {
    std::vector<ManifestEntry> out;
    for (const auto& e : manifest.entries) {
        if (e.split == split) out.push_back(e);
    }
    return out;
}

inline std::string resolve_image_path(const PipelineConfig& cfg, const std::string& rel) {
    if (cfg.image_root.empty()) return rel;
    return (std::filesystem::path(cfg.image_root) / rel).string();
}

namespace detail {

inline double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

inline void quantize_matrix_f32(Eigen::MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = to_f32(m.data()[i]);
}

inline PyramidConfig layer_pyramid(const PipelineConfig& cfg, int layer_idx) {
    PyramidConfig p;
    p.num_scales = cfg.layer[static_cast<std::size_t>(layer_idx)].num_scales;
    p.patch_size = layer_receptive_field(cfg, layer_idx);
    p.stride = cfg.layer[static_cast<std::size_t>(layer_idx)].stride;
    return p;
}

}  // namespace detail

// Dense patches from every training image, normalized, budgeted per image.
inline PatchSet collect_layer1_patches(const DatasetManifest& manifest, const PipelineConfig& cfg,
                                       std::uint64_t seed) {
    const auto train = split_entries(manifest, Split::train);
    if (train.empty()) throw DataError("training split is empty");

    const PyramidConfig pcfg = detail::layer_pyramid(cfg, 0);
    const Eigen::Index D0 = static_cast<Eigen::Index>(cfg.patch_size) * cfg.patch_size;

    std::vector<std::vector<Patch>> per_image(train.size());
    parallel_for_each_index(static_cast<std::int64_t>(train.size()), [&](std::int64_t i) {
        const GrayImage img = load_image(resolve_image_path(cfg, train[static_cast<std::size_t>(i)].path));
        const auto scales = build_pyramid(img, pcfg);
        std::vector<Patch> all;
        for (std::size_t s = 0; s < scales.size(); ++s) {
            auto patches = extract_patches(scales[s], cfg.patch_size, pcfg.stride);
            for (auto& p : patches) {
                p.image_id = static_cast<int>(i);
                p.class_id = train[static_cast<std::size_t>(i)].class_id;
                p.scale_idx = static_cast<int>(s);
                all.push_back(std::move(p));
            }
        }
        Rng rng(derive_seed(seed, "patches", static_cast<std::uint64_t>(i)));
        const auto keep = rng.sample_indices(static_cast<std::int64_t>(all.size()),
                                             std::min<std::int64_t>(cfg.patches_per_image,
                                                                    static_cast<std::int64_t>(all.size())));
        for (int k : keep) {
            per_image[static_cast<std::size_t>(i)].push_back(normalize_patch(all[static_cast<std::size_t>(k)]));
        }
    });

    PatchSet set;
    set.patch_size = cfg.patch_size;
    set.num_classes = manifest.num_classes;
    std::size_t total = 0;
    for (const auto& v : per_image) total += v.size();
    if (total == 0) throw DataError("no training patches extracted; images smaller than the patch size?");
    set.X.resize(D0, static_cast<Eigen::Index>(total));
    Eigen::Index col = 0;
    for (const auto& v : per_image) {
        for (const auto& p : v) {
            for (Eigen::Index d = 0; d < D0; ++d) set.X(d, col) = detail::to_f32(p.values(d));
            set.labels.push_back(p.class_id);
            set.prov.push_back({p.image_id, p.scale_idx, p.x, p.y});
            ++col;
        }
    }
    return set;
}

inline ExemplarSet select_exemplars(const PatchSet& set, const PipelineConfig& cfg, std::uint64_t seed) {
    if (cfg.exemplar.method == "nn") {
        return nn_select(set.X, set.labels, cfg.exemplar.nn);
    }
    if (cfg.exemplar.method == "svm") {
        return svm_select(set.X, set.labels, cfg.exemplar.svm, derive_seed(seed, "svmsel"));
    }
    // method == "none": every patch is an exemplar.
    ExemplarSet all;
    all.per_class.resize(static_cast<std::size_t>(set.num_classes));
    for (std::size_t i = 0; i < set.labels.size(); ++i) {
        all.per_class[static_cast<std::size_t>(set.labels[i])].push_back(static_cast<int>(i));
    }
    return all;
}

// ---------------------------------------------------------------------------
// Batch assembly. The unsupervised pool is the exemplars plus a uniform sample
// of the remaining patches (lu_pool_factor controls the total), and spatial
// neighbors are drawn around each pooled patch's source position.

namespace detail {

struct PoolPick {
    std::vector<int> pool;  // global patch indices, exemplars first
};

inline PoolPick pick_lu_pool(const PatchSet& set, const ExemplarSet& ex, double factor,
                             std::uint64_t seed) {
    PoolPick pick;
    std::vector<char> is_ex(set.labels.size(), 0);
    for (const auto& cls : ex.per_class) {
        for (int i : cls) is_ex[static_cast<std::size_t>(i)] = 1;
    }
    for (std::size_t i = 0; i < is_ex.size(); ++i) {
        if (is_ex[i]) pick.pool.push_back(static_cast<int>(i));
    }
    const std::size_t ex_count = pick.pool.size();
    const std::size_t want = std::min(set.labels.size(),
                                      static_cast<std::size_t>(std::llround(factor * static_cast<double>(ex_count))));
    if (want > ex_count) {
        std::vector<int> rest;
        for (std::size_t i = 0; i < is_ex.size(); ++i) {
            if (!is_ex[i]) rest.push_back(static_cast<int>(i));
        }
        Rng rng(derive_seed(seed, "lupool"));
        const auto extra = rng.sample_indices(static_cast<std::int64_t>(rest.size()),
                                              static_cast<std::int64_t>(want - ex_count));
        for (int e : extra) pick.pool.push_back(rest[static_cast<std::size_t>(e)]);
        std::sort(pick.pool.begin(), pick.pool.end());
    }
    return pick;
}

}  // namespace detail

// Layer-1 batch: pixel patches with image-space spatial neighbors.
inline TrainBatch assemble_layer1_batch(const DatasetManifest& manifest, const PipelineConfig& cfg,
                                        const PatchSet& set, const ExemplarSet& ex,
                                        std::uint64_t seed) {
    TrainBatch batch;
    batch.X_ex.resize(static_cast<std::size_t>(set.num_classes));
    for (int c = 0; c < set.num_classes; ++c) {
        const auto& idx = ex.per_class[static_cast<std::size_t>(c)];
        batch.X_ex[static_cast<std::size_t>(c)].resize(set.X.rows(), static_cast<Eigen::Index>(idx.size()));
        for (std::size_t j = 0; j < idx.size(); ++j) {
            batch.X_ex[static_cast<std::size_t>(c)].col(static_cast<Eigen::Index>(j)) = set.X.col(idx[j]);
        }
    }

    const auto pick = detail::pick_lu_pool(set, ex, cfg.lu_pool_factor, seed);
    batch.X_all.resize(set.X.rows(), static_cast<Eigen::Index>(pick.pool.size()));
    for (std::size_t j = 0; j < pick.pool.size(); ++j) batch.X_all.col(static_cast<Eigen::Index>(j)) = set.X.col(pick.pool[j]);

    const int M = cfg.layer[0].hp.M;
    if (cfg.layer[0].hp.xi > 0.0) {
        const auto train = split_entries(manifest, Split::train);
        const PyramidConfig pcfg = detail::layer_pyramid(cfg, 0);
        batch.Omega.resize(set.X.rows(), static_cast<Eigen::Index>(pick.pool.size()) * M);

        // Group pooled patches by source image so each pyramid is built once.
        std::vector<std::vector<int>> by_image(train.size());
        for (std::size_t j = 0; j < pick.pool.size(); ++j) {
            by_image[static_cast<std::size_t>(set.prov[static_cast<std::size_t>(pick.pool[j])].image_id)].push_back(
                static_cast<int>(j));
        }
        parallel_for_each_index(static_cast<std::int64_t>(train.size()), [&](std::int64_t i) {
            if (by_image[static_cast<std::size_t>(i)].empty()) return;
            const GrayImage img = load_image(resolve_image_path(cfg, train[static_cast<std::size_t>(i)].path));
            const auto scales = build_pyramid(img, pcfg);
            for (int j : by_image[static_cast<std::size_t>(i)]) {
                const int global = pick.pool[static_cast<std::size_t>(j)];
                const PatchProvenance& pv = set.prov[static_cast<std::size_t>(global)];
                Patch p;
                p.x = pv.x;
                p.y = pv.y;
                p.size = set.patch_size;
                p.values = set.X.col(global);
                const auto neighbors = sample_spatial_neighbors(
                    scales[static_cast<std::size_t>(pv.scale_idx)], p, M,
                    derive_seed(seed, "omega", static_cast<std::uint64_t>(global)));
                for (int m = 0; m < M; ++m) {
                    for (Eigen::Index d = 0; d < set.X.rows(); ++d) {
                        batch.Omega(d, static_cast<Eigen::Index>(j) * M + m) =
                            detail::to_f32(neighbors[static_cast<std::size_t>(m)].values(d));
                    }
                }
            }
        });
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Upper-layer inputs: aggregated previous-layer features, PCA-projected.

namespace detail {

// Aggregated (pre-PCA) vector at an anchor of a scaled image.
inline Eigen::VectorXd aggregated_at(LayerFeatureComputer& computer, const DeepModel& partial,
                                     int prev_layers, const AggregateConfig& agg, int x, int y) {
    const Eigen::Index dprev = partial.layers[static_cast<std::size_t>(prev_layers - 1)].filter_bank.W.rows();
    Eigen::VectorXd cat(static_cast<Eigen::Index>(agg.grid) * agg.grid * dprev);
    Eigen::Index off = 0;
    for (int gy = 0; gy < agg.grid; ++gy) {
        for (int gx = 0; gx < agg.grid; ++gx) {
            const Eigen::VectorXd& sub = computer.at(prev_layers, x + gx * agg.step, y + gy * agg.step);
            cat.segment(off, sub.size()) = sub;
            off += sub.size();
        }
    }
    return cat;
}

}  // namespace detail

struct UpperLayerInputs {
    PatchSet set;       // PCA-projected inputs with provenance
    PcaModel pca;       // fitted on the aggregated vectors
};

// Computes aggregated inputs for layer `layer_idx` (0-based, >= 1) over the
// training images, fits the PCA, and projects.
inline UpperLayerInputs collect_upper_layer_inputs(const DatasetManifest& manifest,
                                                   const PipelineConfig& cfg, const DeepModel& partial,
                                                   int layer_idx, std::uint64_t seed) {
    const auto train = split_entries(manifest, Split::train);
    const LayerConfig& lc = cfg.layer[static_cast<std::size_t>(layer_idx)];
    const PyramidConfig pcfg = detail::layer_pyramid(cfg, layer_idx);
    const int rf = pcfg.patch_size;

    std::vector<Eigen::MatrixXd> per_image_vecs(train.size());
    std::vector<std::vector<PatchProvenance>> per_image_prov(train.size());

    parallel_for_each_index(static_cast<std::int64_t>(train.size()), [&](std::int64_t i) {
        const GrayImage img = load_image(resolve_image_path(cfg, train[static_cast<std::size_t>(i)].path));
        const auto scales = build_pyramid(img, pcfg);
        std::vector<Eigen::VectorXd> vecs;
        std::vector<PatchProvenance> prov;
        for (std::size_t s = 0; s < scales.size(); ++s) {
            detail::LayerFeatureComputer computer(scales[s], partial);
            for (int y = 0; y + rf <= scales[s].height; y += pcfg.stride) {
                for (int x = 0; x + rf <= scales[s].width; x += pcfg.stride) {
                    vecs.push_back(detail::aggregated_at(computer, partial, layer_idx, lc.agg, x, y));
                    prov.push_back({static_cast<int>(i), static_cast<int>(s), x, y});
                }
            }
        }
        Rng rng(derive_seed(seed, "upper-patches", static_cast<std::uint64_t>(layer_idx),
                            static_cast<std::uint64_t>(i)));
        const auto keep = rng.sample_indices(static_cast<std::int64_t>(vecs.size()),
                                             std::min<std::int64_t>(cfg.patches_per_image,
                                                                    static_cast<std::int64_t>(vecs.size())));
        if (!vecs.empty()) {
            per_image_vecs[static_cast<std::size_t>(i)].resize(vecs[0].size(), static_cast<Eigen::Index>(keep.size()));
            for (std::size_t k = 0; k < keep.size(); ++k) {
                per_image_vecs[static_cast<std::size_t>(i)].col(static_cast<Eigen::Index>(k)) =
                    vecs[static_cast<std::size_t>(keep[k])];
                per_image_prov[static_cast<std::size_t>(i)].push_back(prov[static_cast<std::size_t>(keep[k])]);
            }
        }
    });

    Eigen::Index total = 0;
    for (const auto& m : per_image_vecs) total += m.cols();
    if (total == 0) {
        throw DataError("no inputs for layer " + std::to_string(layer_idx + 1) +
                        "; images too small for its receptive field");
    }

    const Eigen::Index agg_dim = static_cast<Eigen::Index>(lc.agg.grid) * lc.agg.grid *
                                 partial.layers[static_cast<std::size_t>(layer_idx - 1)].filter_bank.W.rows();
    Eigen::MatrixXd raw(agg_dim, total);
    UpperLayerInputs out;
    out.set.num_classes = manifest.num_classes;
    Eigen::Index col = 0;
    for (std::size_t i = 0; i < per_image_vecs.size(); ++i) {
        for (Eigen::Index j = 0; j < per_image_vecs[i].cols(); ++j) {
            raw.col(col++) = per_image_vecs[i].col(j);
            out.set.labels.push_back(train[i].class_id);
            out.set.prov.push_back(per_image_prov[i][static_cast<std::size_t>(j)]);
        }
    }

    out.pca = pca_fit(raw, lc.pca_dim);
    detail::quantize_matrix_f32(out.pca.components);
    for (Eigen::Index i = 0; i < out.pca.mean.size(); ++i) out.pca.mean(i) = detail::to_f32(out.pca.mean(i));
    for (Eigen::Index i = 0; i < out.pca.eigenvalues.size(); ++i) out.pca.eigenvalues(i) = detail::to_f32(out.pca.eigenvalues(i));

    out.set.X = pca_transform_all(out.pca, raw);
    detail::quantize_matrix_f32(out.set.X);
    return out;
}

// Upper-layer batch: neighbors are aggregated+projected inputs at jittered
// anchors within half a receptive field of the source position.
inline TrainBatch assemble_upper_batch(const DatasetManifest& manifest, const PipelineConfig& cfg,
                                       const DeepModel& partial, int layer_idx,
                                       const UpperLayerInputs& inputs, const ExemplarSet& ex,
                                       std::uint64_t seed) {
    const PatchSet& set = inputs.set;
    TrainBatch batch;
    batch.X_ex.resize(static_cast<std::size_t>(set.num_classes));
    for (int c = 0; c < set.num_classes; ++c) {
        const auto& idx = ex.per_class[static_cast<std::size_t>(c)];
        batch.X_ex[static_cast<std::size_t>(c)].resize(set.X.rows(), static_cast<Eigen::Index>(idx.size()));
        for (std::size_t j = 0; j < idx.size(); ++j) {
            batch.X_ex[static_cast<std::size_t>(c)].col(static_cast<Eigen::Index>(j)) = set.X.col(idx[j]);
        }
    }
    const auto pick = detail::pick_lu_pool(set, ex, cfg.lu_pool_factor, seed);
    batch.X_all.resize(set.X.rows(), static_cast<Eigen::Index>(pick.pool.size()));
    for (std::size_t j = 0; j < pick.pool.size(); ++j) batch.X_all.col(static_cast<Eigen::Index>(j)) = set.X.col(pick.pool[j]);

    const LayerConfig& lc = cfg.layer[static_cast<std::size_t>(layer_idx)];
    const int M = lc.hp.M;
    if (lc.hp.xi > 0.0) {
        const auto train = split_entries(manifest, Split::train);
        const PyramidConfig pcfg = detail::layer_pyramid(cfg, layer_idx);
        const int rf = pcfg.patch_size;
        batch.Omega.resize(set.X.rows(), static_cast<Eigen::Index>(pick.pool.size()) * M);

        std::vector<std::vector<int>> by_image(train.size());
        for (std::size_t j = 0; j < pick.pool.size(); ++j) {
            by_image[static_cast<std::size_t>(set.prov[static_cast<std::size_t>(pick.pool[j])].image_id)].push_back(
                static_cast<int>(j));
        }
        parallel_for_each_index(static_cast<std::int64_t>(train.size()), [&](std::int64_t i) {
            if (by_image[static_cast<std::size_t>(i)].empty()) return;
            const GrayImage img = load_image(resolve_image_path(cfg, train[static_cast<std::size_t>(i)].path));
            const auto scales = build_pyramid(img, pcfg);
            std::vector<std::unique_ptr<detail::LayerFeatureComputer>> computers;
            for (const auto& s : scales) {
                computers.push_back(std::make_unique<detail::LayerFeatureComputer>(s, partial));
            }
            for (int j : by_image[static_cast<std::size_t>(i)]) {
                const int global = pick.pool[static_cast<std::size_t>(j)];
                const PatchProvenance& pv = set.prov[static_cast<std::size_t>(global)];
                const GrayImage& simg = scales[static_cast<std::size_t>(pv.scale_idx)];
                Rng rng(derive_seed(seed, "upper-omega", static_cast<std::uint64_t>(layer_idx),
                                    static_cast<std::uint64_t>(global)));
                for (int m = 0; m < M; ++m) {
                    const int jx = static_cast<int>(rng.uniform_int(rf + 1)) - rf / 2;
                    const int jy = static_cast<int>(rng.uniform_int(rf + 1)) - rf / 2;
                    const int nx = std::min(std::max(pv.x + jx, 0), simg.width - rf);
                    const int ny = std::min(std::max(pv.y + jy, 0), simg.height - rf);
                    const Eigen::VectorXd agg = detail::aggregated_at(
                        *computers[static_cast<std::size_t>(pv.scale_idx)], partial, layer_idx, lc.agg, nx, ny);
                    Eigen::VectorXd v = pca_transform(inputs.pca, agg);
                    for (Eigen::Index d = 0; d < v.size(); ++d) {
                        batch.Omega(d, static_cast<Eigen::Index>(j) * M + m) = detail::to_f32(v(d));
                    }
                }
            }
        });
    }
    return batch;
}

// ---------------------------------------------------------------------------
// Layer training

struct RandomFilterPolicy {
    bool random_filters = false;  // skip learning; random W (the untrained baseline)
};

inline FilterBank random_filter_bank(int D, Eigen::Index D0, std::uint64_t seed) {
    Rng rng(derive_seed(seed, "winit"));
    FilterBank bank;
    bank.W.resize(D, D0);
    for (Eigen::Index d = 0; d < D; ++d) {
        for (Eigen::Index k = 0; k < D0; ++k) bank.W(d, k) = 0.01 * rng.normal();
        const double norm = bank.W.row(d).norm();
        if (norm > 0) bank.W.row(d) /= norm;
    }
    return bank;
}

// Trains (or randomizes) every layer. Layer 1 consumes the provided patch set
// and exemplars; upper layers recompute inputs through the stack trained so
// far and re-run exemplar selection on those derived vectors.
inline std::vector<LayerModel> train_layers(const DatasetManifest& manifest, const PipelineConfig& cfg,
                                            const PatchSet& layer1_patches, const ExemplarSet& layer1_ex,
                                            std::uint64_t seed, RandomFilterPolicy policy = {}) {
    DeepModel partial;
    for (int l = 0; l < cfg.layers; ++l) {
        const LayerConfig& lc = cfg.layer[static_cast<std::size_t>(l)];
        LayerModel lm;
        lm.receptive_field = layer_receptive_field(cfg, l);
        lm.num_scales = lc.num_scales;
        lm.stride = lc.stride;
        lm.agg = lc.agg;

        const std::uint64_t layer_seed = derive_seed(seed, "layer", static_cast<std::uint64_t>(l));

        TrainBatch batch;
        std::optional<PcaModel> pca;
        if (l == 0) {
            lm.input_dim = static_cast<int>(layer1_patches.X.rows());
            if (!policy.random_filters) {
                batch = assemble_layer1_batch(manifest, cfg, layer1_patches, layer1_ex, layer_seed);
            }
        } else {
            UpperLayerInputs inputs = collect_upper_layer_inputs(manifest, cfg, partial, l, layer_seed);
            lm.input_dim = lc.pca_dim;
            pca = std::move(inputs.pca);
            if (!policy.random_filters) {
                const ExemplarSet ex = select_exemplars(inputs.set, cfg, layer_seed);
                batch = assemble_upper_batch(manifest, cfg, partial, l, inputs, ex, layer_seed);
            }
        }
        lm.pca_in = std::move(pca);

        if (policy.random_filters) {
            lm.filter_bank = random_filter_bank(lc.filters, lm.input_dim, layer_seed);
            lm.masks.resize(static_cast<std::size_t>(manifest.num_classes));
            for (auto& m : lm.masks) m.alpha = Eigen::ArrayXi::Ones(lc.filters);
        } else {
            LbfgsParams lbfgs;
            lbfgs.max_iters = lc.w_iters;
            lbfgs.grad_tol = lc.grad_tol;
            TrainLayerResult res = train_layer(batch, lc.hp, lc.filters, layer_seed, lbfgs);
            if (res.degraded) {
                log_info("layer " + std::to_string(l + 1) + ": L-BFGS reported degraded convergence");
            }
            lm.filter_bank = std::move(res.bank);
            lm.masks = std::move(res.masks);
        }
        lm.filter_bank.layer_idx = l;
        detail::quantize_matrix_f32(lm.filter_bank.W);
        partial.layers.push_back(std::move(lm));
        log_info("layer " + std::to_string(l + 1) + " ready (input_dim=" +
                 std::to_string(partial.layers.back().input_dim) + ", filters=" + std::to_string(lc.filters) + ")");
    }
    return partial.layers;
}

// ---------------------------------------------------------------------------
// Codebooks, descriptors, classifier, evaluation

inline std::vector<Codebook> build_codebooks(const DatasetManifest& manifest, const PipelineConfig& cfg,
                                             const DeepModel& model, std::uint64_t seed) {
    const auto train = split_entries(manifest, Split::train);
    std::vector<Codebook> books;
    for (int l = 1; l <= static_cast<int>(model.layers.size()); ++l) {
        std::vector<Eigen::MatrixXd> per_image(train.size());
        parallel_for_each_index(static_cast<std::int64_t>(train.size()), [&](std::int64_t i) {
            const GrayImage img = load_image(resolve_image_path(cfg, train[static_cast<std::size_t>(i)].path));
            const FeatureMap fm = extract_features(img, model, l);
            Eigen::MatrixXd feats(model.layers[static_cast<std::size_t>(l - 1)].filter_bank.W.rows(),
                                  static_cast<Eigen::Index>(fm.entries.size()));
            for (std::size_t e = 0; e < fm.entries.size(); ++e) {
                feats.col(static_cast<Eigen::Index>(e)) = fm.entries[e].f;
            }
            per_image[static_cast<std::size_t>(i)] = std::move(feats);
        });
        Eigen::Index total = 0;
        for (const auto& m : per_image) total += m.cols();
        if (total < cfg.encode.codebook_size) {
            throw DataError("layer " + std::to_string(l) + ": only " + std::to_string(total) +
                            " features for a " + std::to_string(cfg.encode.codebook_size) + "-word codebook");
        }
        Eigen::MatrixXd all(per_image[0].rows(), total);
        Eigen::Index col = 0;
        for (const auto& m : per_image) {
            if (m.cols() > 0) all.middleCols(col, m.cols()) = m;
            col += m.cols();
        }
        if (total > cfg.codebook_cap) {
            Rng rng(derive_seed(seed, "cbsub", static_cast<std::uint64_t>(l)));
            const auto keep = rng.sample_indices(total, cfg.codebook_cap);
            Eigen::MatrixXd sub(all.rows(), static_cast<Eigen::Index>(keep.size()));
            for (std::size_t k = 0; k < keep.size(); ++k) sub.col(static_cast<Eigen::Index>(k)) = all.col(keep[k]);
            all = std::move(sub);
        }
        Codebook cb = build_codebook(all, cfg.encode.codebook_size, cfg.encode.kmeans_iters,
                                     derive_seed(seed, "codebook", static_cast<std::uint64_t>(l)));
        cb.layer_idx = l - 1;
        detail::quantize_matrix_f32(cb.centers);
        books.push_back(std::move(cb));
        log_info("codebook for layer " + std::to_string(l) + " built from " + std::to_string(all.cols()) +
                 " features");
    }
    return books;
}

struct EncodedSplit {
    Eigen::MatrixXd descriptors;  // dim x N_images
    std::vector<int> labels;
    std::vector<std::string> paths;
};

inline EncodedSplit encode_split(const DatasetManifest& manifest, const PipelineConfig& cfg,
                                 const DeepModel& model, Split split) {
    const auto entries = split_entries(manifest, split);
    if (entries.empty()) throw DataError(std::string("split `") + split_name(split) + "` is empty");
    EncodedSplit out;
    const Eigen::Index dim = static_cast<Eigen::Index>(model.layers.size()) * kSpmRegions *
                             model.codebooks.at(0).centers.cols();
    out.descriptors.resize(dim, static_cast<Eigen::Index>(entries.size()));
    out.labels.resize(entries.size());
    out.paths.resize(entries.size());
    parallel_for_each_index(static_cast<std::int64_t>(entries.size()), [&](std::int64_t i) {
        const GrayImage img = load_image(resolve_image_path(cfg, entries[static_cast<std::size_t>(i)].path));
        out.descriptors.col(i) = describe_image(img, model, cfg.encode);
        out.labels[static_cast<std::size_t>(i)] = entries[static_cast<std::size_t>(i)].class_id;
        out.paths[static_cast<std::size_t>(i)] = entries[static_cast<std::size_t>(i)].path;
    });
    detail::quantize_matrix_f32(out.descriptors);
    return out;
}

inline OvrModel fit_classifier(const EncodedSplit& encoded, int C, const PipelineConfig& cfg,
                               std::uint64_t seed) {
    OvrModel m = train_ovr(encoded.descriptors, encoded.labels, C, cfg.classifier.lambda_reg,
                           cfg.classifier.epochs, derive_seed(seed, "classifier"));
    for (auto& lm : m.models) {
        for (Eigen::Index i = 0; i < lm.w.size(); ++i) lm.w(i) = detail::to_f32(lm.w(i));
        lm.b = detail::to_f32(lm.b);
        lm.lambda_reg = detail::to_f32(lm.lambda_reg);
    }
    return m;
}

inline Metrics evaluate_encoded(const DeepModel& model, const EncodedSplit& encoded, int C) {
    if (!model.has_classifier()) throw DataError("evaluate: model has no classifier; run `fit-classifier` first");
    std::vector<int> predicted(encoded.labels.size());
    for (Eigen::Index i = 0; i < encoded.descriptors.cols(); ++i) {
        predicted[static_cast<std::size_t>(i)] = ovr_predict(model.classifier, encoded.descriptors.col(i));
    }
    return evaluate_predictions(encoded.labels, predicted, C);
}

// Full evaluation from images (descriptor computation included).
inline Metrics evaluate_model(const DeepModel& model, const DatasetManifest& manifest,
                              const PipelineConfig& cfg) {
    const EncodedSplit test = encode_split(manifest, cfg, model, Split::test);
    return evaluate_encoded(model, test, manifest.num_classes);
}

// ---------------------------------------------------------------------------
// One-call training

inline DeepModel train_deep(const DatasetManifest& manifest, const PipelineConfig& cfg,
                            std::uint64_t seed, RandomFilterPolicy policy = {}) {
    PatchSet patches;
    ExemplarSet exemplars;
    if (!policy.random_filters) {
        patches = collect_layer1_patches(manifest, cfg, seed);
        exemplars = select_exemplars(patches, cfg, seed);
        log_info("layer 1 pool: " + std::to_string(patches.labels.size()) + " patches, " +
                 std::to_string(exemplars.total()) + " exemplars");
    } else {
        patches.patch_size = cfg.patch_size;
        patches.num_classes = manifest.num_classes;
        patches.X.resize(static_cast<Eigen::Index>(cfg.patch_size) * cfg.patch_size, 0);
    }

    DeepModel model;
    model.layers = train_layers(manifest, cfg, patches, exemplars, seed, policy);
    model.codebooks = build_codebooks(manifest, cfg, model, seed);
    const EncodedSplit train = encode_split(manifest, cfg, model, Split::train);
    model.classifier = fit_classifier(train, manifest.num_classes, cfg, seed);
    quantize_model(model);
    return model;
}

// ---------------------------------------------------------------------------
// Split resampling: re-draw train/test per class with the original counts.

inline DatasetManifest resample_split(const DatasetManifest& manifest, std::uint64_t seed, int round) {
    DatasetManifest out = manifest;
    std::vector<std::vector<int>> by_class(static_cast<std::size_t>(manifest.num_classes));
    std::vector<int> train_count(static_cast<std::size_t>(manifest.num_classes), 0);
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        const auto& e = manifest.entries[i];
        if (e.split == Split::val) continue;
        by_class[static_cast<std::size_t>(e.class_id)].push_back(static_cast<int>(i));
        if (e.split == Split::train) ++train_count[static_cast<std::size_t>(e.class_id)];
    }
    for (int c = 0; c < manifest.num_classes; ++c) {
        auto idx = by_class[static_cast<std::size_t>(c)];
        Rng rng(derive_seed(seed, "resplit", static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(c)));
        rng.shuffle(idx);
        for (std::size_t i = 0; i < idx.size(); ++i) {
            out.entries[static_cast<std::size_t>(idx[i])].split =
                static_cast<int>(i) < train_count[static_cast<std::size_t>(c)] ? Split::train : Split::test;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sequential hyperparameter sweep: tune one weight at a time on a held-out
// validation carve of the training split, keeping the best value fixed before
// moving to the next parameter.

struct SweepStep {
    std::string param;
    double value;
    double val_accuracy;
    bool chosen;
};

struct SweepResult {
    std::vector<SweepStep> steps;
    PipelineConfig best_config;
};

namespace detail {

inline void set_sweep_param(PipelineConfig& cfg, const std::string& name, double value) {
    for (auto& lc : cfg.layer) {
        if (name == "xi") lc.hp.xi = value;
        else if (name == "lambda1") lc.hp.lambda1 = value;
        else if (name == "lambda2") lc.hp.lambda2 = value;
        else if (name == "gamma") lc.hp.gamma = value;
        else if (name == "eta") lc.hp.eta = value;
    }
}

}  // namespace detail

inline SweepResult run_sweep(const DatasetManifest& manifest, const PipelineConfig& base,
                             std::uint64_t seed) {
    // Carve a validation set out of the training split, per class.
    DatasetManifest carved = manifest;
    std::vector<std::vector<int>> train_by_class(static_cast<std::size_t>(manifest.num_classes));
    for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
        const auto& e = manifest.entries[i];
        if (e.split == Split::train) train_by_class[static_cast<std::size_t>(e.class_id)].push_back(static_cast<int>(i));
        if (e.split == Split::test) carved.entries[i].split = Split::val;  // hidden during the sweep
    }
    for (int c = 0; c < manifest.num_classes; ++c) {
        auto idx = train_by_class[static_cast<std::size_t>(c)];
        Rng rng(derive_seed(seed, "sweepval", static_cast<std::uint64_t>(c)));
        rng.shuffle(idx);
        const std::size_t nval = std::max<std::size_t>(1, static_cast<std::size_t>(
            std::floor(base.sweep.val_fraction * static_cast<double>(idx.size()))));
        for (std::size_t i = 0; i < nval && i < idx.size(); ++i) {
            carved.entries[static_cast<std::size_t>(idx[i])].split = Split::test;  // validation plays the test role
        }
    }

    SweepResult result;
    PipelineConfig cfg = base;
    for (const std::string& param : base.sweep.params) {
        double best_value = cfg.layer[0].hp.xi;  // replaced below
        double best_acc = -1.0;
        for (double v : base.sweep.grid) {
            PipelineConfig trial = cfg;
            detail::set_sweep_param(trial, param, v);
            const DeepModel model = train_deep(carved, trial, seed);
            const Metrics metrics = evaluate_model(model, carved, trial);
            result.steps.push_back({param, v, metrics.accuracy, false});
            log_info("sweep " + param + "=" + std::to_string(v) + " val_acc=" + std::to_string(metrics.accuracy));
            if (metrics.accuracy > best_acc) {
                best_acc = metrics.accuracy;
                best_value = v;
            }
        }
        detail::set_sweep_param(cfg, param, best_value);
        for (auto it = result.steps.rbegin(); it != result.steps.rend(); ++it) {
            if (it->param == param && it->value == best_value) {
                it->chosen = true;
                break;
            }
        }
    }
    result.best_config = cfg;
    return result;
}

}  // namespace ddsfl
