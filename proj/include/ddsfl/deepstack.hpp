#pragma once

// Hierarchical composition: per-layer receptive-field aggregation, PCA-reduced
// inputs for the upper layers, full-stack feature extraction, and versioned
// binary model persistence.
//
// Geometry: layer l computes features at stride `stride` anchors of each
// pyramid scale. Layer 1 consumes raw receptive_field^2 pixel patches; layer
// l>1 concatenates a grid x grid block of layer l-1 features spaced agg.step
// pixels apart (receptive field (grid-1)*step + rf_prev), then projects by
// PCA. Test-time extraction uses the full filter bank; the per-class masks are
// training artifacts kept for audit.

#include <Eigen/Dense>

#include <map>
#include <optional>
#include <tuple>
#include <unordered_map>

#include "ddsfl/core.hpp"
#include "ddsfl/dataio.hpp"
#include "ddsfl/dsfl.hpp"
#include "ddsfl/mathkit.hpp"
#include "ddsfl/svm.hpp"

namespace ddsfl {

struct AggregateConfig {
    int grid = 3;  // grid x grid previous-layer positions
    int step = 8;  // pixels between grid positions
};

struct LayerModel {
    FilterBank filter_bank;
    std::vector<SelectionMask> masks;
    std::optional<PcaModel> pca_in;  // absent on layer 1
    AggregateConfig agg;             // used when pca_in is present
    int input_dim = 256;
    int receptive_field = 16;  // pixels covered in the scaled image
    int num_scales = 6;
    int stride = 3;
};

struct Codebook {
    Eigen::MatrixXd centers;  // D x B, codewords as columns
    int layer_idx = 0;
};

struct DeepModel {
    std::vector<LayerModel> layers;
    std::vector<Codebook> codebooks;
    OvrModel classifier;
    std::uint16_t format_version = 1;

    bool has_codebooks() const { return !codebooks.empty(); }
    bool has_classifier() const { return !classifier.models.empty(); }
};

struct FeatureEntry {
    int scale_idx;  // index into FeatureMap::scale_dims
    int x, y;       // anchor in scaled-image pixels
    Eigen::VectorXd f;
};

struct FeatureMap {
    int layer = 1;  // 1-based
    int image_width = 0, image_height = 0;
    int receptive_field = 0;
    std::vector<std::pair<int, int>> scale_dims;  // kept pyramid scales
    std::vector<FeatureEntry> entries;
};

// ---------------------------------------------------------------------------
// Aggregation: concatenate grid x grid feature vectors (row-major over the
// grid) anchored at every position whose full grid exists in the map.

inline FeatureMap aggregate_receptive_field(const FeatureMap& fm, const AggregateConfig& agg) {
    if (agg.grid < 1 || (agg.grid > 1 && agg.step < 1)) {
        throw std::invalid_argument("aggregate_receptive_field: bad grid config");
    }
    FeatureMap out;
    out.layer = fm.layer;
    out.image_width = fm.image_width;
    out.image_height = fm.image_height;
    out.scale_dims = fm.scale_dims;
    out.receptive_field = (agg.grid - 1) * agg.step + fm.receptive_field;

    std::map<std::tuple<int, int, int>, const FeatureEntry*> index;
    for (const auto& e : fm.entries) index[{e.scale_idx, e.x, e.y}] = &e;

    for (const auto& e : fm.entries) {
        Eigen::VectorXd cat;
        bool complete = true;
        std::vector<const FeatureEntry*> block;
        block.reserve(static_cast<std::size_t>(agg.grid) * agg.grid);
        for (int gy = 0; gy < agg.grid && complete; ++gy) {
            for (int gx = 0; gx < agg.grid; ++gx) {
                const auto it = index.find({e.scale_idx, e.x + gx * agg.step, e.y + gy * agg.step});
                if (it == index.end()) {
                    complete = false;
                    break;
                }
                block.push_back(it->second);
            }
        }
        if (!complete) continue;
        const Eigen::Index dim = e.f.size();
        cat.resize(dim * agg.grid * agg.grid);
        for (std::size_t b = 0; b < block.size(); ++b) {
            cat.segment(static_cast<Eigen::Index>(b) * dim, dim) = block[b]->f;  // copies, never aliases
        }
        out.entries.push_back({e.scale_idx, e.x, e.y, std::move(cat)});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Full-stack extraction

namespace detail {

// Memoized per-scale feature computation across the layer stack.
class LayerFeatureComputer {
public:
    LayerFeatureComputer(const GrayImage& scaled, const DeepModel& model)
        : img_(scaled), model_(model), memo_(model.layers.size()) {}

    // Feature of layer `level` (1-based) anchored at (x, y); requires the
    // receptive field to fit inside the scaled image.
    const Eigen::VectorXd& at(int level, int x, int y) {
        auto& table = memo_[static_cast<std::size_t>(level - 1)];
        const std::int64_t key = (static_cast<std::int64_t>(x) << 24) | y;
        auto it = table.find(key);
        if (it != table.end()) return it->second;

        const LayerModel& lm = model_.layers[static_cast<std::size_t>(level - 1)];
        Eigen::VectorXd f;
        if (level == 1) {
            Patch p;
            p.x = x;
            p.y = y;
            p.size = lm.receptive_field;
            p.values.resize(static_cast<Eigen::Index>(lm.receptive_field) * lm.receptive_field);
            for (int r = 0; r < lm.receptive_field; ++r) {
                for (int c = 0; c < lm.receptive_field; ++c) {
                    p.values(static_cast<Eigen::Index>(r) * lm.receptive_field + c) = img_.at(x + c, y + r);
                }
            }
            f = (lm.filter_bank.W * normalize_patch(p).values).cwiseAbs();
        } else {
            const LayerModel& prev = model_.layers[static_cast<std::size_t>(level - 2)];
            const int g = lm.agg.grid;
            Eigen::VectorXd cat(static_cast<Eigen::Index>(g) * g * prev.filter_bank.W.rows());
            Eigen::Index off = 0;
            for (int gy = 0; gy < g; ++gy) {
                for (int gx = 0; gx < g; ++gx) {
                    const Eigen::VectorXd& sub = at(level - 1, x + gx * lm.agg.step, y + gy * lm.agg.step);
                    cat.segment(off, sub.size()) = sub;
                    off += sub.size();
                }
            }
            f = (lm.filter_bank.W * pca_transform(*lm.pca_in, cat)).cwiseAbs();
        }
        return table.emplace(key, std::move(f)).first->second;
    }

private:
    const GrayImage& img_;
    const DeepModel& model_;
    std::vector<std::unordered_map<std::int64_t, Eigen::VectorXd>> memo_;
};

}  // namespace detail

inline void validate_layer_geometry(const DeepModel& model) {
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const LayerModel& lm = model.layers[l];
        if (lm.filter_bank.W.cols() != lm.input_dim) {
            throw DataError("model: layer " + std::to_string(l + 1) + " filter bank does not match input_dim");
        }
        if ((l == 0) == lm.pca_in.has_value()) {
            throw DataError("model: PCA must be absent on layer 1 and present above");
        }
        if (lm.pca_in.has_value()) {
            if (lm.pca_in->components.rows() != lm.input_dim) {
                throw DataError("model: layer " + std::to_string(l + 1) + " PCA output does not match input_dim");
            }
            const LayerModel& prev = model.layers[l - 1];
            const Eigen::Index agg_dim =
                static_cast<Eigen::Index>(lm.agg.grid) * lm.agg.grid * prev.filter_bank.W.rows();
            if (lm.pca_in->components.cols() != agg_dim) {
                throw DataError("model: layer " + std::to_string(l + 1) + " PCA input does not match the aggregation grid");
            }
            if (lm.receptive_field != (lm.agg.grid - 1) * lm.agg.step + prev.receptive_field) {
                throw DataError("model: layer " + std::to_string(l + 1) + " receptive field disagrees with the grid");
            }
        }
    }
}

inline FeatureMap extract_features(const GrayImage& img, const DeepModel& model, int layer) {
    if (layer < 1 || layer > static_cast<int>(model.layers.size())) {
        throw DataError("extract_features: layer " + std::to_string(layer) + " is not trained");
    }
    const LayerModel& lm = model.layers[static_cast<std::size_t>(layer - 1)];

    FeatureMap fm;
    fm.layer = layer;
    fm.image_width = img.width;
    fm.image_height = img.height;
    fm.receptive_field = lm.receptive_field;

    PyramidConfig pcfg;
    pcfg.num_scales = lm.num_scales;
    pcfg.patch_size = lm.receptive_field;
    pcfg.stride = lm.stride;
    const std::vector<GrayImage> scales = build_pyramid(img, pcfg);

    for (std::size_t s = 0; s < scales.size(); ++s) {
        fm.scale_dims.push_back({scales[s].width, scales[s].height});
        detail::LayerFeatureComputer computer(scales[s], model);
        for (int y = 0; y + lm.receptive_field <= scales[s].height; y += lm.stride) {
            for (int x = 0; x + lm.receptive_field <= scales[s].width; x += lm.stride) {
                fm.entries.push_back({static_cast<int>(s), x, y, computer.at(layer, x, y)});
            }
        }
    }
    return fm;
}

// ---------------------------------------------------------------------------
// Persistence: magic "DDSFL\0", u16 version, little-endian; matrices as
// u32 rows, u32 cols, f32 row-major.

namespace detail {

inline void write_matrix(ByteWriter& w, const Eigen::MatrixXd& m) {
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) w.f32(static_cast<float>(m(r, c)));
    }
}

inline Eigen::MatrixXd read_matrix(ByteReader& r) {
    const std::uint32_t rows = r.u32();
    const std::uint32_t cols = r.u32();
    if (static_cast<std::uint64_t>(rows) * cols > (1ull << 31)) throw DataError("model matrix too large");
    Eigen::MatrixXd m(rows, cols);
    for (std::uint32_t i = 0; i < rows; ++i) {
        for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = static_cast<double>(r.f32());
    }
    return m;
}

inline void write_vector(ByteWriter& w, const Eigen::VectorXd& v) {
    write_matrix(w, v.transpose());
}

inline Eigen::VectorXd read_vector(ByteReader& r) {
    const Eigen::MatrixXd m = read_matrix(r);
    if (m.rows() != 1) throw DataError("model: expected a row vector");
    return m.row(0).transpose();
}

}  // namespace detail

// Round every parameter through f32 so the in-memory model and its on-disk
// form are bit-identical after a round trip.
inline void quantize_model(DeepModel& model) {
    auto q = [](Eigen::MatrixXd& m) {
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
    };
    auto qv = [](Eigen::VectorXd& v) {
        for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = static_cast<double>(static_cast<float>(v(i)));
    };
    for (auto& layer : model.layers) {
        q(layer.filter_bank.W);
        if (layer.pca_in.has_value()) {
            q(layer.pca_in->components);
            qv(layer.pca_in->mean);
            qv(layer.pca_in->eigenvalues);
        }
    }
    for (auto& cb : model.codebooks) q(cb.centers);
    for (auto& m : model.classifier.models) {
        qv(m.w);
        m.b = static_cast<double>(static_cast<float>(m.b));
        m.lambda_reg = static_cast<double>(static_cast<float>(m.lambda_reg));
    }
}

inline std::vector<std::uint8_t> serialize_model(const DeepModel& model) {
    ByteWriter w;
    w.raw("DDSFL\0", 6);
    w.u16(model.format_version);
    std::uint8_t flags = 0;
    if (model.has_codebooks()) flags |= 1;
    if (model.has_classifier()) flags |= 2;
    w.u8(flags);

    w.u32(static_cast<std::uint32_t>(model.layers.size()));
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const LayerModel& lm = model.layers[l];
        w.u32(static_cast<std::uint32_t>(l));
        w.u32(static_cast<std::uint32_t>(lm.input_dim));
        w.u32(static_cast<std::uint32_t>(lm.receptive_field));
        w.u32(static_cast<std::uint32_t>(lm.num_scales));
        w.u32(static_cast<std::uint32_t>(lm.stride));
        w.u8(lm.pca_in.has_value() ? 1 : 0);
        if (lm.pca_in.has_value()) {
            w.u32(static_cast<std::uint32_t>(lm.agg.grid));
            w.u32(static_cast<std::uint32_t>(lm.agg.step));
            detail::write_vector(w, lm.pca_in->mean);
            detail::write_matrix(w, lm.pca_in->components);
            detail::write_vector(w, lm.pca_in->eigenvalues);
        }
        detail::write_matrix(w, lm.filter_bank.W);
        w.u32(static_cast<std::uint32_t>(lm.masks.size()));
        for (const auto& m : lm.masks) {
            detail::write_vector(w, m.alpha.cast<double>().matrix());
        }
    }

    if (model.has_codebooks()) {
        w.u32(static_cast<std::uint32_t>(model.codebooks.size()));
        for (const auto& cb : model.codebooks) {
            w.u32(static_cast<std::uint32_t>(cb.layer_idx));
            detail::write_matrix(w, cb.centers);
        }
    }
    if (model.has_classifier()) {
        w.u32(static_cast<std::uint32_t>(model.classifier.models.size()));
        for (const auto& m : model.classifier.models) {
            detail::write_vector(w, m.w);
            w.f32(static_cast<float>(m.b));
            w.f32(static_cast<float>(m.lambda_reg));
        }
    }
    return w.bytes();
}

inline DeepModel deserialize_model(const std::vector<std::uint8_t>& bytes) {
    ByteReader r(bytes);
    char magic[6];
    if (bytes.size() < 6) throw DataError("bad magic");
    r.raw(magic, 6);
    if (std::memcmp(magic, "DDSFL\0", 6) != 0) throw DataError("bad magic");
    DeepModel model;
    model.format_version = r.u16();
    if (model.format_version != 1) {
        throw DataError("unsupported model version " + std::to_string(model.format_version));
    }
    const std::uint8_t flags = r.u8();

    const std::uint32_t num_layers = r.u32();
    if (num_layers == 0) throw DataError("model: no layers");
    model.layers.resize(num_layers);
    for (std::uint32_t l = 0; l < num_layers; ++l) {
        LayerModel& lm = model.layers[l];
        const std::uint32_t idx = r.u32();
        if (idx != l) throw DataError("model: layer indices out of order");
        lm.input_dim = static_cast<int>(r.u32());
        lm.receptive_field = static_cast<int>(r.u32());
        lm.num_scales = static_cast<int>(r.u32());
        lm.stride = static_cast<int>(r.u32());
        const bool has_pca = r.u8() != 0;
        if (has_pca) {
            lm.agg.grid = static_cast<int>(r.u32());
            lm.agg.step = static_cast<int>(r.u32());
            PcaModel pca;
            pca.mean = detail::read_vector(r);
            pca.components = detail::read_matrix(r);
            pca.eigenvalues = detail::read_vector(r);
            lm.pca_in = std::move(pca);
        }
        lm.filter_bank.W = detail::read_matrix(r);
        lm.filter_bank.layer_idx = static_cast<int>(l);
        const std::uint32_t num_masks = r.u32();
        lm.masks.resize(num_masks);
        for (std::uint32_t m = 0; m < num_masks; ++m) {
            const Eigen::VectorXd v = detail::read_vector(r);
            lm.masks[m].alpha.resize(v.size());
            for (Eigen::Index i = 0; i < v.size(); ++i) {
                lm.masks[m].alpha(i) = v(i) != 0.0 ? 1 : 0;
            }
        }
    }

    if (flags & 1) {
        const std::uint32_t count = r.u32();
        model.codebooks.resize(count);
        for (std::uint32_t i = 0; i < count; ++i) {
            model.codebooks[i].layer_idx = static_cast<int>(r.u32());
            model.codebooks[i].centers = detail::read_matrix(r);
        }
    }
    if (flags & 2) {
        const std::uint32_t C = r.u32();
        model.classifier.models.resize(C);
        for (std::uint32_t c = 0; c < C; ++c) {
            model.classifier.models[c].w = detail::read_vector(r);
            model.classifier.models[c].b = static_cast<double>(r.f32());
            model.classifier.models[c].lambda_reg = static_cast<double>(r.f32());
        }
    }

    if (!r.at_end()) throw DataError("trailing data");
    validate_layer_geometry(model);
    return model;
}

inline void save_model(const DeepModel& model, const std::string& path) {
    write_file_atomic(path, serialize_model(model));
}

inline DeepModel load_model(const std::string& path) {
    return deserialize_model(read_file_bytes(path));
}

}  // namespace ddsfl
