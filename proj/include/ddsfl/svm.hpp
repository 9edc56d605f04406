#pragma once

// Binary linear SVM trained by Pegasos-style stochastic subgradient descent,
// plus a one-vs-rest multiclass wrapper. Used for exemplar mining and as the
// final classifier.

#include <Eigen/Dense>

#include "ddsfl/core.hpp"

namespace ddsfl {

struct LinearSvmModel {
    Eigen::VectorXd w;
    double b = 0.0;
    double lambda_reg = 1e-4;
};

inline double svm_score(const LinearSvmModel& m, const Eigen::VectorXd& x) {
    if (x.size() != m.w.size()) throw DimensionError("svm_score: feature dimension mismatch");
    return m.w.dot(x) + m.b;
}

// A detector "fires" when its score is strictly above -1.
inline bool svm_fires(const LinearSvmModel& m, const Eigen::VectorXd& x) {
    return svm_score(m, x) > -1.0;
}

// Hinge + (lambda/2)||w||^2, learning rate 1/(lambda*t), class-balanced by
// alternating positive/negative draws. Columns are samples. The observer, when
// set, sees every iterate.
inline LinearSvmModel train_binary(const Eigen::MatrixXd& pos, const Eigen::MatrixXd& neg,
                                   double lambda_reg, int epochs, std::uint64_t seed,
                                   const std::function<void(std::int64_t, const LinearSvmModel&)>& observer = {}) {
    if (pos.cols() == 0 || neg.cols() == 0) throw DataError("train_binary: both classes must be nonempty");
    if (pos.rows() != neg.rows()) throw DimensionError("train_binary: feature dimension mismatch");
    if (!pos.allFinite() || !neg.allFinite()) throw NumericError("train_binary: non-finite feature");
    if (lambda_reg <= 0) throw std::invalid_argument("train_binary: lambda_reg must be > 0");

    LinearSvmModel m;
    m.w = Eigen::VectorXd::Zero(pos.rows());
    m.b = 0.0;
    m.lambda_reg = lambda_reg;

    Rng rng(seed);
    const std::int64_t total = static_cast<std::int64_t>(epochs) * (pos.cols() + neg.cols());
    for (std::int64_t t = 1; t <= total; ++t) {
        const bool take_pos = (t % 2 == 1);
        const Eigen::MatrixXd& src = take_pos ? pos : neg;
        const double y = take_pos ? 1.0 : -1.0;
        const Eigen::Index i = rng.uniform_int(src.cols());
        const double eta = 1.0 / (lambda_reg * static_cast<double>(t));
        const double margin = y * (m.w.dot(src.col(i)) + m.b);
        // The bias rides along as a constant-one feature, regularized with w.
        m.w *= (1.0 - eta * lambda_reg);
        m.b *= (1.0 - eta * lambda_reg);
        if (margin < 1.0) {
            m.w += (eta * y) * src.col(i);
            m.b += eta * y;
        }
        if (observer) observer(t, m);
    }
    if (!m.w.allFinite() || !std::isfinite(m.b)) throw NumericError("train_binary: diverged");
    return m;
}

// Mean hinge + (lambda/2)||(w, b)||^2 over a labeled set (the bias lives in the
// regularized vector); used by diagnostics and tests.
inline double svm_objective(const LinearSvmModel& m, const Eigen::MatrixXd& data,
                            const std::vector<int>& y) {
    double hinge = 0.0;
    for (Eigen::Index i = 0; i < data.cols(); ++i) {
        const double margin = y[static_cast<std::size_t>(i)] * (m.w.dot(data.col(i)) + m.b);
        hinge += std::max(0.0, 1.0 - margin);
    }
    return 0.5 * m.lambda_reg * (m.w.squaredNorm() + m.b * m.b) + hinge / static_cast<double>(data.cols());
}

struct OvrModel {
    std::vector<LinearSvmModel> models;  // one per class

    int num_classes() const { return static_cast<int>(models.size()); }
};

inline OvrModel train_ovr(const Eigen::MatrixXd& data, const std::vector<int>& labels, int C,
                          double lambda_reg, int epochs, std::uint64_t seed) {
    if (data.cols() != static_cast<Eigen::Index>(labels.size())) {
        throw DimensionError("train_ovr: label count mismatch");
    }
    std::vector<int> counts(static_cast<std::size_t>(C), 0);
    for (int l : labels) {
        if (l < 0 || l >= C) throw DataError("train_ovr: label out of range");
        ++counts[static_cast<std::size_t>(l)];
    }
    for (int c = 0; c < C; ++c) {
        if (counts[static_cast<std::size_t>(c)] == 0) {
            throw DataError("train_ovr: class " + std::to_string(c) + " has no samples");
        }
    }

    OvrModel ovr;
    ovr.models.resize(static_cast<std::size_t>(C));
    if (C == 1) {  // degenerate: no negatives exist, predict is constant anyway
        ovr.models[0].w = Eigen::VectorXd::Zero(data.rows());
        ovr.models[0].b = 0.0;
        ovr.models[0].lambda_reg = lambda_reg;
        return ovr;
    }
    std::vector<Shard> shards;
    for (int c = 0; c < C; ++c) shards.push_back({c, c + 1});
    parallel_shards(shards, [&](std::size_t, std::int64_t c, std::int64_t) {
        const Eigen::Index npos = counts[static_cast<std::size_t>(c)];
        Eigen::MatrixXd pos(data.rows(), npos);
        Eigen::MatrixXd neg(data.rows(), data.cols() - npos);
        Eigen::Index ip = 0, in = 0;
        for (Eigen::Index i = 0; i < data.cols(); ++i) {
            if (labels[static_cast<std::size_t>(i)] == c) {
                pos.col(ip++) = data.col(i);
            } else {
                neg.col(in++) = data.col(i);
            }
        }
        ovr.models[static_cast<std::size_t>(c)] =
            train_binary(pos, neg, lambda_reg, epochs, derive_seed(seed, "ovr", static_cast<std::uint64_t>(c)));
    });
    return ovr;
}

// Argmax of per-class scores; ties go to the smallest class id.
inline int ovr_predict(const OvrModel& m, const Eigen::VectorXd& x) {
    if (m.models.empty()) throw DataError("ovr_predict: empty model");
    int best = 0;
    double best_score = svm_score(m.models[0], x);
    for (int c = 1; c < m.num_classes(); ++c) {
        const double s = svm_score(m.models[static_cast<std::size_t>(c)], x);
        if (s > best_score) {
            best_score = s;
            best = c;
        }
    }
    return best;
}

}  // namespace ddsfl
