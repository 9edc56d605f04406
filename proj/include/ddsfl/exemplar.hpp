#pragma once

// Informative-exemplar mining over a patch pool: nearest-neighbor reaching
// scores with per-class top-percent selection, and SVM-based discriminative
// clustering with train/validation swapping.

#include <Eigen/Dense>

#include <fstream>
#include <set>

#include "ddsfl/core.hpp"
#include "ddsfl/kdtree.hpp"
#include "ddsfl/mathkit.hpp"
#include "ddsfl/svm.hpp"

namespace ddsfl {

struct NNSelectConfig {
    int M_nn = 10;        // coverage-set size
    double eps_nn = 0.1;  // fraction of top-ranked patches kept per class
    bool approx = false;  // randomized k-d forest instead of exact search
    int ann_trees = 4;
    int ann_checks = 1024;
    int ann_leaf_size = 16;
};

struct SVMSelectConfig {
    int S_c = 0;  // initial clusters per class; 0 means N_c/20
    int M_svm = 10;
    int eps_svm = 3;
    int max_rounds = 5;
    double lambda_reg = 1e-2;
    int epochs = 5;
    int neg_cap = 5000;
    int kmeans_iters = 10;
};

struct ExemplarSet {
    std::vector<std::vector<int>> per_class;  // patch indices into the source pool

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& v : per_class) n += v.size();
        return n;
    }
};

// ---------------------------------------------------------------------------
// Coverage sets: for every column of X, its M_nn nearest neighbors (self
// excluded), ordered by (distance, index).

inline std::vector<std::vector<int>> coverage_sets(const Eigen::MatrixXd& X, int M_nn, bool approx,
                                                   const NNSelectConfig& cfg = NNSelectConfig()) {
    const Eigen::Index n = X.cols();
    if (M_nn < 1) throw std::invalid_argument("coverage_sets: M_nn must be >= 1");
    if (n <= M_nn) throw DataError("coverage_sets: need more than M_nn patches");

    std::vector<std::vector<int>> cover(static_cast<std::size_t>(n));

    if (approx) {
        KdForest forest(X, cfg.ann_trees, cfg.ann_leaf_size, /*seed=*/0x9d5f);
        const int checks = std::max(cfg.ann_checks, M_nn * 4);
        parallel_for_each_index(n, [&](std::int64_t i) {
            cover[static_cast<std::size_t>(i)] =
                forest.knn(X.col(i), M_nn, checks, static_cast<int>(i));
        });
        return cover;
    }

    // Exact search, blocked over queries and candidates so memory stays flat
    // on large pools.
    const Eigen::VectorXd norms = X.colwise().squaredNorm();
    using Cand = std::pair<double, int>;
    const Eigen::Index qblock = 512;
    const Eigen::Index cblock = 4096;

    auto shards = make_shards(n, 256, qblock);
    parallel_shards(shards, [&](std::size_t, std::int64_t qb, std::int64_t qe) {
        for (std::int64_t q0 = qb; q0 < qe; q0 += qblock) {
            const std::int64_t qlen = std::min<std::int64_t>(qblock, qe - q0);
            std::vector<std::priority_queue<Cand>> heaps(static_cast<std::size_t>(qlen));
            for (std::int64_t c0 = 0; c0 < n; c0 += cblock) {
                const std::int64_t clen = std::min<std::int64_t>(cblock, n - c0);
                Eigen::MatrixXd dots = X.middleCols(c0, clen).transpose() * X.middleCols(q0, qlen);
                for (std::int64_t j = 0; j < qlen; ++j) {
                    auto& heap = heaps[static_cast<std::size_t>(j)];
                    const double qn = norms(q0 + j);
                    for (std::int64_t i = 0; i < clen; ++i) {
                        const std::int64_t idx = c0 + i;
                        if (idx == q0 + j) continue;
                        const double d2 = std::max(0.0, qn + norms(idx) - 2.0 * dots(i, j));
                        const Cand cand{d2, static_cast<int>(idx)};
                        if (static_cast<int>(heap.size()) < M_nn) {
                            heap.push(cand);
                        } else if (cand < heap.top()) {
                            heap.pop();
                            heap.push(cand);
                        }
                    }
                }
            }
            for (std::int64_t j = 0; j < qlen; ++j) {
                auto& heap = heaps[static_cast<std::size_t>(j)];
                std::vector<Cand> sorted;
                sorted.reserve(heap.size());
                while (!heap.empty()) {
                    sorted.push_back(heap.top());
                    heap.pop();
                }
                std::sort(sorted.begin(), sorted.end());
                auto& out = cover[static_cast<std::size_t>(q0 + j)];
                out.resize(sorted.size());
                for (std::size_t i = 0; i < sorted.size(); ++i) out[i] = sorted[i].second;
            }
        }
    });
    return cover;
}

namespace detail {

inline double max_pairwise_distance_exact(const Eigen::MatrixXd& X) {
    const Eigen::Index n = X.cols();
    const Eigen::VectorXd norms = X.colwise().squaredNorm();
    auto shards = make_shards(n, 128);
    std::vector<double> best(shards.size(), 0.0);
    parallel_shards(shards, [&](std::size_t s, std::int64_t b, std::int64_t e) {
        double m = 0.0;
        for (std::int64_t i = b; i < e; ++i) {
            for (Eigen::Index j = i + 1; j < n; ++j) {
                const double d2 = std::max(0.0, norms(i) + norms(j) - 2.0 * X.col(i).dot(X.col(j)));
                if (d2 > m) m = d2;
            }
        }
        best[s] = m;
    });
    double m = 0.0;
    for (double v : best) m = std::max(m, v);
    return std::sqrt(m);
}

// Cheap upper bound on the diameter used in approximate mode.
inline double max_pairwise_distance_bound(const Eigen::MatrixXd& X) {
    const Eigen::VectorXd centroid = X.rowwise().mean();
    double far = 0.0;
    for (Eigen::Index i = 0; i < X.cols(); ++i) {
        far = std::max(far, (X.col(i) - centroid).norm());
    }
    return 2.0 * far;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Reaching scores: per patch, the mean distance at which other-class patches
// reach it, averaged over the other classes. Never-reached classes contribute
// the pool's max pairwise distance so distinctive patches rank highest.

inline Eigen::VectorXd reaching_scores(const Eigen::MatrixXd& X, const std::vector<int>& labels,
                                       const std::vector<std::vector<int>>& coverage, int C,
                                       bool exact_diameter = true) {
    const Eigen::Index n = X.cols();
    if (static_cast<Eigen::Index>(labels.size()) != n) throw DimensionError("reaching_scores: label count mismatch");
    if (C < 2) throw DataError("reaching_scores: need at least two classes");

    Eigen::MatrixXd dist_sum = Eigen::MatrixXd::Zero(n, C);
    Eigen::MatrixXi reach_count = Eigen::MatrixXi::Zero(n, C);

    for (Eigen::Index l = 0; l < n; ++l) {
        const int cl = labels[static_cast<std::size_t>(l)];
        for (int j : coverage[static_cast<std::size_t>(l)]) {
            if (labels[static_cast<std::size_t>(j)] == cl) continue;
            dist_sum(j, cl) += (X.col(j) - X.col(l)).norm();
            reach_count(j, cl) += 1;
        }
    }

    const double max_dist = exact_diameter ? detail::max_pairwise_distance_exact(X)
                                           : detail::max_pairwise_distance_bound(X);

    Eigen::VectorXd scores(n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const int cj = labels[static_cast<std::size_t>(j)];
        double total = 0.0;
        for (int c = 0; c < C; ++c) {
            if (c == cj) continue;
            total += reach_count(j, c) > 0 ? dist_sum(j, c) / reach_count(j, c) : max_dist;
        }
        scores(j) = total / static_cast<double>(C - 1);
    }
    return scores;
}

// ---------------------------------------------------------------------------
// NN-based selection: keep the top eps_nn fraction per class by reaching
// score, ties broken by original index.

inline ExemplarSet nn_select(const Eigen::MatrixXd& X, const std::vector<int>& labels,
                             const NNSelectConfig& cfg) {
    if (!(cfg.eps_nn > 0.0) || cfg.eps_nn > 1.0) throw std::invalid_argument("nn_select: eps_nn must be in (0,1]");
    const Eigen::Index n = X.cols();
    int C = 0;
    for (int l : labels) C = std::max(C, l + 1);
    std::vector<std::vector<int>> by_class(static_cast<std::size_t>(C));
    for (Eigen::Index i = 0; i < n; ++i) by_class[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])].push_back(static_cast<int>(i));
    for (int c = 0; c < C; ++c) {
        if (by_class[static_cast<std::size_t>(c)].empty()) {
            throw DataError("nn_select: class " + std::to_string(c) + " has no patches");
        }
    }

    const auto coverage = coverage_sets(X, cfg.M_nn, cfg.approx, cfg);
    const Eigen::VectorXd scores = reaching_scores(X, labels, coverage, C, /*exact_diameter=*/!cfg.approx);

    ExemplarSet out;
    out.per_class.resize(static_cast<std::size_t>(C));
    for (int c = 0; c < C; ++c) {
        auto idx = by_class[static_cast<std::size_t>(c)];
        std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
            if (scores(a) != scores(b)) return scores(a) > scores(b);
            return a < b;
        });
        const std::size_t keep = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::floor(cfg.eps_nn * static_cast<double>(idx.size()))));
        idx.resize(std::min(keep, idx.size()));
        std::sort(idx.begin(), idx.end());
        out.per_class[static_cast<std::size_t>(c)] = std::move(idx);
    }
    return out;
}

// ---------------------------------------------------------------------------
// SVM-based selection (discriminative clustering with half swapping).

enum class ClusterVerdict { keep, drop_few_hits, drop_too_broad };

// A cluster is dropped when it fires fewer than eps_svm same-class patches, or
// fires patches from more than half of all the classes.
inline ClusterVerdict cluster_verdict(int same_class_fired, int distinct_classes_fired, int C,
                                      int eps_svm) {
    if (distinct_classes_fired > (C + 1) / 2) return ClusterVerdict::drop_too_broad;
    if (same_class_fired < eps_svm) return ClusterVerdict::drop_few_hits;
    return ClusterVerdict::keep;
}

inline ExemplarSet svm_select(const Eigen::MatrixXd& X, const std::vector<int>& labels,
                              const SVMSelectConfig& cfg, std::uint64_t seed) {
    if (cfg.M_svm < cfg.eps_svm || cfg.eps_svm < 1) throw std::invalid_argument("svm_select: need M_svm >= eps_svm >= 1");
    const Eigen::Index n = X.cols();
    if (static_cast<Eigen::Index>(labels.size()) != n) throw DimensionError("svm_select: label count mismatch");
    int C = 0;
    for (int l : labels) C = std::max(C, l + 1);

    // Equal split of the candidate pool into two halves, per class.
    std::vector<char> half(static_cast<std::size_t>(n), 0);
    std::vector<std::vector<int>> by_class(static_cast<std::size_t>(C));
    for (Eigen::Index i = 0; i < n; ++i) by_class[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])].push_back(static_cast<int>(i));
    for (int c = 0; c < C; ++c) {
        auto& idx = by_class[static_cast<std::size_t>(c)];
        if (idx.size() < 2) throw DataError("svm_select: class " + std::to_string(c) + " needs at least 2 patches");
        Rng rng(derive_seed(seed, "svmsel-split", static_cast<std::uint64_t>(c)));
        rng.shuffle(idx);
        const std::size_t ntr = (idx.size() + 1) / 2;
        for (std::size_t i = ntr; i < idx.size(); ++i) half[static_cast<std::size_t>(idx[i])] = 1;
    }

    struct Cluster {
        int cls;
        std::vector<int> members;  // indices into X, always within the current train half
    };
    std::vector<Cluster> clusters;

    // k-means initialization on each class's train half.
    for (int c = 0; c < C; ++c) {
        std::vector<int> train_idx;
        for (int i : by_class[static_cast<std::size_t>(c)]) {
            if (half[static_cast<std::size_t>(i)] == 0) train_idx.push_back(i);
        }
        std::sort(train_idx.begin(), train_idx.end());
        if (train_idx.empty()) throw DataError("svm_select: empty train half for class " + std::to_string(c));
        int sc = cfg.S_c > 0 ? cfg.S_c : std::max<int>(1, static_cast<int>(train_idx.size()) / 20);
        sc = std::min<int>(sc, static_cast<int>(train_idx.size()));

        Eigen::MatrixXd sub(X.rows(), static_cast<Eigen::Index>(train_idx.size()));
        for (std::size_t i = 0; i < train_idx.size(); ++i) sub.col(static_cast<Eigen::Index>(i)) = X.col(train_idx[i]);
        const KmeansResult km = kmeans(sub, sc, cfg.kmeans_iters,
                                       derive_seed(seed, "svmsel-kmeans", static_cast<std::uint64_t>(c)));
        std::vector<Cluster> init(static_cast<std::size_t>(sc));
        for (auto& cl : init) cl.cls = c;
        for (std::size_t i = 0; i < train_idx.size(); ++i) {
            init[static_cast<std::size_t>(km.assignment[i])].members.push_back(train_idx[i]);
        }
        for (auto& cl : init) {
            if (!cl.members.empty()) clusters.push_back(std::move(cl));
        }
    }

    int train_side = 0;
    std::vector<std::vector<int>> members_prev1, members_prev2;

    for (int round = 0; round < cfg.max_rounds; ++round) {
        const int val_side = 1 - train_side;

        // Validation pool and per-class negative pools, in index order.
        std::vector<int> val_idx;
        std::vector<std::vector<int>> neg_pool_for(static_cast<std::size_t>(C));
        for (Eigen::Index i = 0; i < n; ++i) {
            if (half[static_cast<std::size_t>(i)] == val_side) {
                val_idx.push_back(static_cast<int>(i));
            } else {
                for (int c = 0; c < C; ++c) {
                    if (labels[static_cast<std::size_t>(i)] != c) neg_pool_for[static_cast<std::size_t>(c)].push_back(static_cast<int>(i));
                }
            }
        }

        std::vector<std::vector<int>> new_members(clusters.size());
        std::vector<char> alive(clusters.size(), 0);

        auto shards = make_shards(static_cast<std::int64_t>(clusters.size()), 64);
        parallel_shards(shards, [&](std::size_t, std::int64_t cb, std::int64_t ce) {
            for (std::int64_t ci = cb; ci < ce; ++ci) {
                const Cluster& cl = clusters[static_cast<std::size_t>(ci)];

                Eigen::MatrixXd pos(X.rows(), static_cast<Eigen::Index>(cl.members.size()));
                for (std::size_t i = 0; i < cl.members.size(); ++i) pos.col(static_cast<Eigen::Index>(i)) = X.col(cl.members[i]);

                std::vector<int> neg_pool = neg_pool_for[static_cast<std::size_t>(cl.cls)];
                if (neg_pool.empty()) continue;  // cannot train; cluster dies
                if (static_cast<int>(neg_pool.size()) > cfg.neg_cap) {
                    Rng rng(derive_seed(seed, "svmsel-neg", static_cast<std::uint64_t>(round),
                                        static_cast<std::uint64_t>(ci)));
                    const auto pick = rng.sample_indices(static_cast<std::int64_t>(neg_pool.size()), cfg.neg_cap);
                    std::vector<int> sub;
                    sub.reserve(pick.size());
                    for (int pi : pick) sub.push_back(neg_pool[static_cast<std::size_t>(pi)]);
                    neg_pool = std::move(sub);
                }
                Eigen::MatrixXd neg(X.rows(), static_cast<Eigen::Index>(neg_pool.size()));
                for (std::size_t i = 0; i < neg_pool.size(); ++i) neg.col(static_cast<Eigen::Index>(i)) = X.col(neg_pool[i]);

                const LinearSvmModel svm =
                    train_binary(pos, neg, cfg.lambda_reg, cfg.epochs,
                                 derive_seed(seed, "svmsel-train", static_cast<std::uint64_t>(round),
                                             static_cast<std::uint64_t>(ci)));

                // Test on the validation half.
                std::vector<std::pair<double, int>> fired_same;  // (-score, idx) for top-k ordering
                std::set<int> fired_classes;
                int same = 0;
                for (int vi : val_idx) {
                    const double s = svm.w.dot(X.col(vi)) + svm.b;
                    if (s > -1.0) {
                        fired_classes.insert(labels[static_cast<std::size_t>(vi)]);
                        if (labels[static_cast<std::size_t>(vi)] == cl.cls) {
                            ++same;
                            fired_same.push_back({-s, vi});
                        }
                    }
                }
                if (cluster_verdict(same, static_cast<int>(fired_classes.size()), C, cfg.eps_svm) !=
                    ClusterVerdict::keep) {
                    continue;
                }
                std::sort(fired_same.begin(), fired_same.end());
                if (static_cast<int>(fired_same.size()) > cfg.M_svm) fired_same.resize(static_cast<std::size_t>(cfg.M_svm));
                auto& nm = new_members[static_cast<std::size_t>(ci)];
                for (const auto& [negscore, vi] : fired_same) nm.push_back(vi);
                std::sort(nm.begin(), nm.end());
                alive[static_cast<std::size_t>(ci)] = 1;
            }
        });

        std::vector<Cluster> survivors;
        std::vector<std::vector<int>> survivor_members;
        for (std::size_t ci = 0; ci < clusters.size(); ++ci) {
            if (!alive[ci]) continue;
            survivors.push_back({clusters[ci].cls, new_members[ci]});
            survivor_members.push_back(new_members[ci]);
        }
        const bool dropped_any = survivors.size() != clusters.size();
        clusters = std::move(survivors);
        train_side = val_side;  // swap halves

        // Converged when nothing was dropped and the member sets match the
        // same-parity round (two back, since halves alternate).
        if (!dropped_any && !members_prev2.empty() && members_prev2 == survivor_members) break;
        members_prev2 = std::move(members_prev1);
        members_prev1 = std::move(survivor_members);
        if (clusters.empty()) break;
    }

    ExemplarSet out;
    out.per_class.resize(static_cast<std::size_t>(C));
    for (const auto& cl : clusters) {
        auto& dst = out.per_class[static_cast<std::size_t>(cl.cls)];
        dst.insert(dst.end(), cl.members.begin(), cl.members.end());
    }
    for (auto& v : out.per_class) {
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
    }
    return out;
}

// Dump: one `class_id<TAB>patch_index` line per exemplar.
inline void dump_exemplars(const ExemplarSet& ex, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write exemplar dump `" + path + "`");
    for (std::size_t c = 0; c < ex.per_class.size(); ++c) {
        for (int idx : ex.per_class[c]) out << c << '\t' << idx << '\n';
    }
    if (!out) throw DataError("write failed for `" + path + "`");
}

}  // namespace ddsfl
