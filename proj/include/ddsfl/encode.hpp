#pragma once

// Local features to a global image descriptor: k-means codebooks, locality-
// constrained linear coding over the knn nearest codewords, spatial-pyramid
// max pooling over 1x1 + 2x2 + 4x4 regions, and classifier evaluation.

#include <Eigen/Dense>

#include <queue>

#include "ddsfl/core.hpp"
#include "ddsfl/deepstack.hpp"
#include "ddsfl/mathkit.hpp"
#include "ddsfl/svm.hpp"

namespace ddsfl {

struct EncodeParams {
    int codebook_size = 2000;
    int knn = 5;
    double beta = 1e-4;
    bool signed_max = false;  // pool signed codes instead of |code|
    int kmeans_iters = 25;
};

inline constexpr int kSpmRegions = 21;  // 1 + 4 + 16

inline Codebook build_codebook(const Eigen::MatrixXd& features, int B, int iters, std::uint64_t seed) {
    if (features.cols() < B) throw DataError("build_codebook: fewer features than codewords");
    Codebook cb;
    cb.centers = kmeans(features, B, iters, seed).centers;
    return cb;
}

// LLC approximated coding: constrained least squares over the knn nearest
// codewords with a sum-to-one constraint, covariance regularized by
// beta * trace. Returns a dense length-B code with at most knn nonzeros.
inline Eigen::VectorXd llc_encode(const Codebook& cb, const Eigen::VectorXd& f, int knn, double beta) {
    const Eigen::Index B = cb.centers.cols();
    if (f.size() != cb.centers.rows()) throw DimensionError("llc_encode: feature dimension mismatch");
    if (knn < 1 || knn > B) throw std::invalid_argument("llc_encode: knn must be in [1, B]");
    if (!(beta > 0)) throw std::invalid_argument("llc_encode: beta must be > 0");

    // knn nearest codewords under (distance, index) order.
    using Cand = std::pair<double, int>;
    std::priority_queue<Cand> heap;
    const Eigen::VectorXd d2 =
        (cb.centers.colwise() - f).colwise().squaredNorm().transpose();
    for (Eigen::Index j = 0; j < B; ++j) {
        const Cand c{d2(j), static_cast<int>(j)};
        if (static_cast<Eigen::Index>(heap.size()) < knn) {
            heap.push(c);
        } else if (c < heap.top()) {
            heap.pop();
            heap.push(c);
        }
    }
    std::vector<Cand> nn;
    nn.reserve(heap.size());
    while (!heap.empty()) {
        nn.push_back(heap.top());
        heap.pop();
    }
    std::sort(nn.begin(), nn.end());

    const int k = static_cast<int>(nn.size());
    Eigen::MatrixXd Z(f.size(), k);
    for (int i = 0; i < k; ++i) Z.col(i) = cb.centers.col(nn[static_cast<std::size_t>(i)].second) - f;
    Eigen::MatrixXd C = Z.transpose() * Z;
    const double tr = C.trace();
    C.diagonal().array() += beta * (tr > 0 ? tr : 1.0);

    Eigen::VectorXd w = C.ldlt().solve(Eigen::VectorXd::Ones(k));
    const double sum = w.sum();
    if (std::abs(sum) < 1e-12 || !w.allFinite()) {
        w.setConstant(1.0 / k);
    } else {
        w /= sum;
    }

    Eigen::VectorXd code = Eigen::VectorXd::Zero(B);
    for (int i = 0; i < k; ++i) code(nn[static_cast<std::size_t>(i)].second) = w(i);
    return code;
}

struct CodedPatch {
    double cx, cy;  // patch center in original-image coordinates
    Eigen::VectorXd code;
};

// Max pooling over the three pyramid levels, regions concatenated 1x1 then
// 2x2 then 4x4 (row-major), L2-normalized. Empty regions stay zero.
inline Eigen::VectorXd spm_pool(const std::vector<CodedPatch>& patches, int img_w, int img_h, int B,
                                bool signed_max = false) {
    Eigen::VectorXd desc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(kSpmRegions) * B);
    if (patches.empty()) {
        log_info("spm_pool: image produced no patches; zero descriptor");
        return desc;
    }
    const int levels[3] = {1, 2, 4};
    for (const auto& p : patches) {
        if (p.code.size() != B) throw DimensionError("spm_pool: code length mismatch");
        int region_base = 0;
        for (int li = 0; li < 3; ++li) {
            const int n = levels[li];
            int rx = static_cast<int>(p.cx * n / img_w);
            int ry = static_cast<int>(p.cy * n / img_h);
            rx = std::min(std::max(rx, 0), n - 1);
            ry = std::min(std::max(ry, 0), n - 1);
            const int region = region_base + ry * n + rx;
            auto block = desc.segment(static_cast<Eigen::Index>(region) * B, B);
            for (Eigen::Index b = 0; b < B; ++b) {
                const double v = signed_max ? p.code(b) : std::abs(p.code(b));
                if (v > block(b)) block(b) = v;
            }
            region_base += n * n;
        }
    }
    const double norm = desc.norm();
    if (norm > 0) desc /= norm;
    return desc;
}

// Per layer: extract, LLC-encode against that layer's codebook, pool; then
// concatenate the layer descriptors and L2-normalize the concatenation.
inline Eigen::VectorXd describe_image(const GrayImage& img, const DeepModel& model,
                                      const EncodeParams& params) {
    if (!model.has_codebooks()) throw DataError("describe_image: model has no codebooks; run `codebook` first");
    if (model.codebooks.size() != model.layers.size()) {
        throw DataError("describe_image: codebook count does not match layer count");
    }
    const int L = static_cast<int>(model.layers.size());
    const Eigen::Index B = model.codebooks[0].centers.cols();
    Eigen::VectorXd desc(static_cast<Eigen::Index>(L) * kSpmRegions * B);

    for (int l = 1; l <= L; ++l) {
        const Codebook& cb = model.codebooks[static_cast<std::size_t>(l - 1)];
        if (cb.centers.cols() != B) throw DataError("describe_image: codebook sizes differ across layers");
        const FeatureMap fm = extract_features(img, model, l);
        std::vector<CodedPatch> coded;
        coded.reserve(fm.entries.size());
        for (const auto& e : fm.entries) {
            const auto [sw, sh] = fm.scale_dims[static_cast<std::size_t>(e.scale_idx)];
            CodedPatch cp;
            cp.cx = (e.x + fm.receptive_field / 2.0) * static_cast<double>(img.width) / sw;
            cp.cy = (e.y + fm.receptive_field / 2.0) * static_cast<double>(img.height) / sh;
            cp.code = llc_encode(cb, e.f, params.knn, params.beta);
            coded.push_back(std::move(cp));
        }
        desc.segment(static_cast<Eigen::Index>(l - 1) * kSpmRegions * B, kSpmRegions * B) =
            spm_pool(coded, img.width, img.height, static_cast<int>(B), params.signed_max);
    }
    const double norm = desc.norm();
    if (norm > 0) desc /= norm;
    return desc;
}

// ---------------------------------------------------------------------------
// Evaluation

struct Metrics {
    double accuracy = 0.0;
    Eigen::VectorXd per_class;   // recall per class
    Eigen::MatrixXi confusion;   // rows: true class, cols: predicted
};

inline Metrics evaluate_predictions(const std::vector<int>& truth, const std::vector<int>& predicted,
                                    int C) {
    if (truth.size() != predicted.size() || truth.empty()) {
        throw DataError("evaluate: prediction/label size mismatch");
    }
    Metrics m;
    m.confusion = Eigen::MatrixXi::Zero(C, C);
    int correct = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        m.confusion(truth[i], predicted[i]) += 1;
        if (truth[i] == predicted[i]) ++correct;
    }
    m.accuracy = static_cast<double>(correct) / static_cast<double>(truth.size());
    m.per_class.resize(C);
    for (int c = 0; c < C; ++c) {
        const int row = m.confusion.row(c).sum();
        m.per_class(c) = row > 0 ? static_cast<double>(m.confusion(c, c)) / row : 0.0;
    }
    return m;
}

}  // namespace ddsfl
