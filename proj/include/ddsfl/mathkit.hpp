#pragma once

// Numerical primitives: L-BFGS with Armijo backtracking, central-difference
// gradient checking, k-means++ / Lloyd, and covariance-eigendecomposition PCA.
// Matrices hold samples as columns throughout.

#include <Eigen/Dense>

#include <deque>
#include <limits>

#include "ddsfl/core.hpp"

namespace ddsfl {

using Eigen::MatrixXd;
using Eigen::VectorXd;

struct ObjectiveResult {
    double value;
    VectorXd grad;
};

// Callable contract: given theta, return value and a gradient of len(theta).
using ObjectiveFn = std::function<ObjectiveResult(const VectorXd&)>;

// ---------------------------------------------------------------------------
// L-BFGS

struct LbfgsParams {
    int max_iters = 200;
    int memory = 10;
    double grad_tol = 1e-6;
    double armijo_c1 = 1e-4;
    double backtrack = 0.5;
    int max_backtracks = 40;         // halvings within one line search
    int max_linesearch_failures = 50;  // consecutive failed searches before giving up
    std::function<void(int, double)> iteration_callback;  // (accepted iter, value)
};

struct LbfgsResult {
    VectorXd x;
    double value = 0.0;
    int iters = 0;  // accepted steps
    bool degraded = false;
    double grad_norm = 0.0;
};

inline LbfgsResult lbfgs_minimize(const ObjectiveFn& f, VectorXd x0, const LbfgsParams& params) {
    if (params.memory < 1) throw std::invalid_argument("lbfgs: memory must be >= 1");
    if (params.grad_tol <= 0) throw std::invalid_argument("lbfgs: grad_tol must be > 0");

    VectorXd x = std::move(x0);
    ObjectiveResult cur = f(x);
    if (!std::isfinite(cur.value)) throw NumericError("lbfgs: objective not finite at start");

    LbfgsResult best;
    best.x = x;
    best.value = cur.value;
    best.grad_norm = cur.grad.norm();

    struct Pair {
        VectorXd s, y;
        double rho;
    };
    std::deque<Pair> hist;

    int consecutive_failures = 0;
    int iters = 0;

    while (iters < params.max_iters) {
        const double gnorm = cur.grad.norm();
        if (gnorm <= params.grad_tol) break;

        // Two-loop recursion.
        VectorXd d = -cur.grad;
        if (!hist.empty()) {
            std::vector<double> alpha(hist.size());
            for (std::size_t i = hist.size(); i-- > 0;) {
                alpha[i] = hist[i].rho * hist[i].s.dot(d);
                d -= alpha[i] * hist[i].y;
            }
            const Pair& last = hist.back();
            const double yy = last.y.squaredNorm();
            if (yy > 0) d *= last.s.dot(last.y) / yy;
            for (std::size_t i = 0; i < hist.size(); ++i) {
                const double beta = hist[i].rho * hist[i].y.dot(d);
                d += (alpha[i] - beta) * hist[i].s;
            }
        }
        double dg = d.dot(cur.grad);
        if (!(dg < 0)) {  // not a descent direction; restart from steepest descent
            hist.clear();
            d = -cur.grad;
            dg = -gnorm * gnorm;
        }

        // Armijo backtracking.
        double t = 1.0;
        bool accepted = false;
        ObjectiveResult trial;
        VectorXd x_trial;
        for (int bt = 0; bt <= params.max_backtracks; ++bt) {
            x_trial = x + t * d;
            trial = f(x_trial);
            if (std::isfinite(trial.value) && trial.value <= cur.value + params.armijo_c1 * t * dg) {
                accepted = true;
                break;
            }
            t *= params.backtrack;
        }

        if (!accepted) {
            ++consecutive_failures;
            hist.clear();
            if (consecutive_failures >= params.max_linesearch_failures) {
                best.degraded = true;
                break;
            }
            continue;
        }
        consecutive_failures = 0;

        VectorXd s = x_trial - x;
        VectorXd y = trial.grad - cur.grad;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
            hist.push_back({std::move(s), std::move(y), 1.0 / sy});
            if (static_cast<int>(hist.size()) > params.memory) hist.pop_front();
        }

        x = std::move(x_trial);
        cur = std::move(trial);
        ++iters;
        if (params.iteration_callback) params.iteration_callback(iters, cur.value);
        if (cur.value < best.value) {
            best.x = x;
            best.value = cur.value;
        }
    }

    // Report the current point unless we bailed out degraded past a better one.
    if (cur.value <= best.value) {
        best.x = x;
        best.value = cur.value;
        best.grad_norm = cur.grad.norm();
    } else {
        best.grad_norm = f(best.x).grad.norm();
    }
    best.iters = iters;
    return best;
}

// ---------------------------------------------------------------------------
// Central finite differences, max relative error over coordinates.

inline double check_gradient(const ObjectiveFn& f, const VectorXd& theta, double eps) {
    if (!(eps > 0.0) || eps > 1e-2) throw std::invalid_argument("check_gradient: eps must be in (0, 1e-2]");
    const VectorXd g = f(theta).grad;
    if (g.size() != theta.size()) throw DimensionError("check_gradient: gradient length mismatch");
    double worst = 0.0;
    VectorXd probe = theta;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
        probe(i) = theta(i) + eps;
        const double fp = f(probe).value;
        probe(i) = theta(i) - eps;
        const double fm = f(probe).value;
        probe(i) = theta(i);
        const double gfd = (fp - fm) / (2.0 * eps);
        const double denom = std::max({1.0, std::abs(gfd), std::abs(g(i))});
        worst = std::max(worst, std::abs(gfd - g(i)) / denom);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// k-means (data: D x N, samples as columns)

struct KmeansResult {
    MatrixXd centers;  // D x k
    std::vector<int> assignment;
    double sse = 0.0;
};

namespace detail {

inline void kmeans_assign(const MatrixXd& data, const MatrixXd& centers,
                          std::vector<int>& assignment, double& sse) {
    const Eigen::Index n = data.cols();
    const Eigen::Index k = centers.cols();
    const VectorXd cnorm = centers.colwise().squaredNorm();
    sse = 0.0;
    // Blocked GEMM keeps memory flat for large N.
    const Eigen::Index block = 4096;
    for (Eigen::Index b = 0; b < n; b += block) {
        const Eigen::Index len = std::min(block, n - b);
        MatrixXd dots = centers.transpose() * data.middleCols(b, len);  // k x len
        for (Eigen::Index j = 0; j < len; ++j) {
            const double xn = data.col(b + j).squaredNorm();
            int bestc = 0;
            double bestd = std::numeric_limits<double>::infinity();
            for (Eigen::Index c = 0; c < k; ++c) {
                const double d2 = xn + cnorm(c) - 2.0 * dots(c, j);
                if (d2 < bestd) {
                    bestd = d2;
                    bestc = static_cast<int>(c);
                }
            }
            assignment[static_cast<std::size_t>(b + j)] = bestc;
            sse += std::max(0.0, bestd);
        }
    }
}

}  // namespace detail

inline KmeansResult kmeans(const MatrixXd& data, int k, int iters, std::uint64_t seed) {
    const Eigen::Index n = data.cols();
    if (k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
    if (n < k) throw DataError("kmeans: fewer samples than clusters");

    Rng rng(seed);
    MatrixXd centers(data.rows(), k);

    // k-means++ seeding.
    std::vector<double> d2(static_cast<std::size_t>(n), 0.0);
    {
        const Eigen::Index first = rng.uniform_int(n);
        centers.col(0) = data.col(first);
        for (Eigen::Index i = 0; i < n; ++i) d2[static_cast<std::size_t>(i)] = (data.col(i) - centers.col(0)).squaredNorm();
        for (int c = 1; c < k; ++c) {
            double total = 0.0;
            for (double v : d2) total += v;
            Eigen::Index pick;
            if (total <= 0.0) {
                pick = rng.uniform_int(n);
            } else {
                double r = rng.uniform() * total;
                pick = n - 1;
                for (Eigen::Index i = 0; i < n; ++i) {
                    r -= d2[static_cast<std::size_t>(i)];
                    if (r <= 0.0) {
                        pick = i;
                        break;
                    }
                }
            }
            centers.col(c) = data.col(pick);
            for (Eigen::Index i = 0; i < n; ++i) {
                const double nd = (data.col(i) - centers.col(c)).squaredNorm();
                if (nd < d2[static_cast<std::size_t>(i)]) d2[static_cast<std::size_t>(i)] = nd;
            }
        }
    }

    KmeansResult result;
    result.assignment.assign(static_cast<std::size_t>(n), 0);
    double sse = 0.0;
    detail::kmeans_assign(data, centers, result.assignment, sse);

    std::vector<int> counts(static_cast<std::size_t>(k));
    for (int it = 0; it < iters; ++it) {
        // Update step.
        std::fill(counts.begin(), counts.end(), 0);
        MatrixXd sums = MatrixXd::Zero(data.rows(), k);
        for (Eigen::Index i = 0; i < n; ++i) {
            const int c = result.assignment[static_cast<std::size_t>(i)];
            sums.col(c) += data.col(i);
            ++counts[static_cast<std::size_t>(c)];
        }
        for (int c = 0; c < k; ++c) {
            if (counts[static_cast<std::size_t>(c)] > 0) {
                centers.col(c) = sums.col(c) / counts[static_cast<std::size_t>(c)];
            } else {
                // Re-seed an empty cluster at the point farthest from its center.
                Eigen::Index far = 0;
                double fard = -1.0;
                for (Eigen::Index i = 0; i < n; ++i) {
                    const double d = (data.col(i) - centers.col(result.assignment[static_cast<std::size_t>(i)])).squaredNorm();
                    if (d > fard) {
                        fard = d;
                        far = i;
                    }
                }
                centers.col(c) = data.col(far);
            }
        }

        std::vector<int> prev = result.assignment;
        detail::kmeans_assign(data, centers, result.assignment, sse);
        if (result.assignment == prev) break;
    }

    result.centers = std::move(centers);
    result.sse = sse;
    return result;
}

// ---------------------------------------------------------------------------
// PCA (data: D x N)

struct PcaModel {
    VectorXd mean;        // D
    MatrixXd components;  // k x D, rows orthonormal, sorted by descending eigenvalue
    VectorXd eigenvalues; // k, descending, of the 1/N covariance
};

inline PcaModel pca_fit(const MatrixXd& data, int k) {
    const Eigen::Index d = data.rows();
    const Eigen::Index n = data.cols();
    if (n < 2) throw DataError("pca_fit: need at least 2 samples");
    if (k < 1 || k > std::min<Eigen::Index>(n - 1, d)) throw DataError("pca_fit: k out of range");

    PcaModel model;
    model.mean = data.rowwise().mean();
    MatrixXd centered = data.colwise() - model.mean;
    MatrixXd cov = (centered * centered.transpose()) / static_cast<double>(n);

    Eigen::SelfAdjointEigenSolver<MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw NumericError("pca_fit: eigendecomposition failed");

    model.components.resize(k, d);
    model.eigenvalues.resize(k);
    for (int i = 0; i < k; ++i) {
        const Eigen::Index src = d - 1 - i;  // solver sorts ascending
        VectorXd v = eig.eigenvectors().col(src);
        // Canonical sign: largest-magnitude entry positive.
        Eigen::Index arg = 0;
        v.cwiseAbs().maxCoeff(&arg);
        if (v(arg) < 0) v = -v;
        model.components.row(i) = v.transpose();
        model.eigenvalues(i) = std::max(0.0, eig.eigenvalues()(src));
    }
    return model;
}

inline VectorXd pca_transform(const PcaModel& model, const VectorXd& x) {
    if (x.size() != model.mean.size()) throw DimensionError("pca_transform: input dimension mismatch");
    return model.components * (x - model.mean);
}

inline MatrixXd pca_transform_all(const PcaModel& model, const MatrixXd& x) {
    if (x.rows() != model.mean.size()) throw DimensionError("pca_transform: input dimension mismatch");
    return model.components * (x.colwise() - model.mean);
}

}  // namespace ddsfl
