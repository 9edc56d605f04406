#pragma once

// Single-layer discriminative/shareable filter-bank learning: reconstruction,
// spatial-smoothness and sparsity costs over the unlabeled pool, per-class
// masked reconstruction, a nearest-neighbor triplet hinge, greedy filter
// selection per class, and the alternating optimization over (W, masks).
//
// Features are f = abs(W x); a class-c feature is the mask-selected variant
// alpha_c .* abs(W x). Subgradients use sign(0) = 0 and a zero hinge
// subgradient at exactly zero.

#include <Eigen/Dense>

#include <limits>
#include <queue>

#include "ddsfl/core.hpp"
#include "ddsfl/mathkit.hpp"

namespace ddsfl {

struct FilterBank {
    Eigen::MatrixXd W;  // D x D0, each row a filter
    int layer_idx = 0;
};

struct SelectionMask {
    Eigen::ArrayXi alpha;  // 0/1 per filter

    int active_count() const { return static_cast<int>((alpha != 0).count()); }
    bool operator==(const SelectionMask& o) const {
        return alpha.size() == o.alpha.size() && (alpha == o.alpha).all();
    }
};

struct LayerHyperparams {
    double xi = 0.0;       // spatial-smoothness weight
    double lambda1 = 0.0;  // feature sparsity weight
    double lambda2 = 0.0;  // mask cardinality weight
    double gamma = 0.0;    // shareable-term weight
    double eta = 0.0;      // discriminative-term weight
    double delta = 1.0;    // hinge margin
    int K = 5;             // triplet neighbors per side
    int M = 3;             // spatial neighbors per patch
    int nn_refresh_period = 50;  // accepted W iterations between triplet refreshes
    double greedy_tol = 1e-3;    // relative reconstruction-decrease threshold
    int max_active = 0;          // cap on active filters per class; 0 means D/4
    int outer_rounds = 5;
};

struct ExemplarRef {
    int cls;
    int idx;  // column within that class's exemplar matrix
    bool operator==(const ExemplarRef& o) const { return cls == o.cls && idx == o.idx; }
};

struct TripletCache {
    struct PerExemplar {
        std::vector<int> pos;          // same-class exemplar columns, self excluded
        std::vector<ExemplarRef> neg;  // other-class exemplars
        bool operator==(const PerExemplar& o) const { return pos == o.pos && neg == o.neg; }
    };
    std::vector<std::vector<PerExemplar>> by_class;

    bool empty() const { return by_class.empty(); }
    bool operator==(const TripletCache& o) const { return by_class == o.by_class; }
};

struct TrainBatch {
    Eigen::MatrixXd X_all;              // D0 x N unlabeled pool for the unsupervised term
    Eigen::MatrixXd Omega;              // D0 x (N*M), neighbor m of patch i at column i*M+m
    std::vector<Eigen::MatrixXd> X_ex;  // per-class exemplars, D0 x Nc
};

struct CostResult {
    double value = 0.0;
    Eigen::MatrixXd grad;  // same shape as W
};

// ---------------------------------------------------------------------------
// Feature transform

inline Eigen::VectorXd transform(const FilterBank& bank, const Eigen::VectorXd& x) {
    if (x.size() != bank.W.cols()) throw DimensionError("transform: input dimension mismatch");
    return (bank.W * x).cwiseAbs();
}

namespace detail {

inline Eigen::MatrixXd sign_of(const Eigen::MatrixXd& m) {
    return m.unaryExpr([](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

inline Eigen::VectorXd mask_as_double(const SelectionMask& mask) {
    return mask.alpha.cast<double>().matrix();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Unsupervised cost: reconstruction + spatial smoothness + sparsity.
//   sum_i ||x_i - W^T W x_i||^2
// + xi * sum_i (1/M) sum_m || |W x_i| - |W omega_im| ||_1
// + lambda1 * sum_i sum_d |W x_i|_d

inline CostResult cost_unsupervised(const Eigen::MatrixXd& W, const Eigen::MatrixXd& X,
                                    const Eigen::MatrixXd& Omega, const LayerHyperparams& hp) {
    const Eigen::Index n = X.cols();
    if (X.rows() != W.cols()) throw DimensionError("cost_unsupervised: patch dimension mismatch");
    if (hp.xi > 0.0) {
        if (hp.M < 1) throw std::invalid_argument("cost_unsupervised: M must be >= 1 when xi > 0");
        if (Omega.cols() != n * hp.M) {
            throw DimensionError("cost_unsupervised: Omega must hold M neighbors per patch");
        }
    }

    CostResult total;
    total.grad = Eigen::MatrixXd::Zero(W.rows(), W.cols());

    auto shards = make_shards(n, 16, 64);
    std::vector<CostResult> parts(shards.size());
    parallel_shards(shards, [&](std::size_t s, std::int64_t b, std::int64_t e) {
        const Eigen::Index len = e - b;
        const auto Xb = X.middleCols(b, len);
        Eigen::MatrixXd U = W * Xb;                       // D x len
        Eigen::MatrixXd E = W.transpose() * U - Xb;       // D0 x len
        CostResult part;
        part.value = E.squaredNorm();
        part.grad = 2.0 * (U * E.transpose() + (W * E) * Xb.transpose());

        if (hp.lambda1 > 0.0) {
            part.value += hp.lambda1 * U.cwiseAbs().sum();
            part.grad.noalias() += hp.lambda1 * detail::sign_of(U) * Xb.transpose();
        }

        if (hp.xi > 0.0) {
            const auto Ob = Omega.middleCols(b * hp.M, len * hp.M);
            Eigen::MatrixXd V = W * Ob;  // D x len*M
            const Eigen::MatrixXd F = U.cwiseAbs();
            const Eigen::MatrixXd G = V.cwiseAbs();
            const double w = hp.xi / static_cast<double>(hp.M);
            Eigen::MatrixXd A = Eigen::MatrixXd::Zero(W.rows(), len);      // per-patch sign sums
            Eigen::MatrixXd B(W.rows(), len * hp.M);                       // per-neighbor signs
            for (Eigen::Index j = 0; j < len; ++j) {
                for (int m = 0; m < hp.M; ++m) {
                    const Eigen::Index cm = j * hp.M + m;
                    const Eigen::VectorXd diff = F.col(j) - G.col(cm);
                    part.value += w * diff.cwiseAbs().sum();
                    const Eigen::VectorXd sd = detail::sign_of(diff);
                    A.col(j) += sd;
                    B.col(cm) = sd;
                }
            }
            part.grad.noalias() += w * (A.cwiseProduct(detail::sign_of(U))) * Xb.transpose();
            part.grad.noalias() -= w * (B.cwiseProduct(detail::sign_of(V))) * Ob.transpose();
        }
        parts[s] = std::move(part);
    });

    for (const auto& part : parts) {
        total.value += part.value;
        total.grad += part.grad;
    }
    return total;
}

// ---------------------------------------------------------------------------
// Shareable cost for one class: masked reconstruction. The ||alpha||_0 penalty
// belongs to the mask-selection objective and is added there, not here.

inline CostResult cost_shareable(const Eigen::MatrixXd& W, const SelectionMask& mask,
                                 const Eigen::MatrixXd& Xc) {
    if (Xc.rows() != W.cols()) throw DimensionError("cost_shareable: patch dimension mismatch");
    if (mask.alpha.size() != W.rows()) throw DimensionError("cost_shareable: mask length mismatch");

    const Eigen::VectorXd a = detail::mask_as_double(mask);
    Eigen::MatrixXd U = W * Xc;
    Eigen::MatrixXd Um = a.asDiagonal() * U;
    Eigen::MatrixXd E = W.transpose() * Um - Xc;

    CostResult out;
    out.value = E.squaredNorm();
    out.grad = 2.0 * (Um * E.transpose() + a.asDiagonal() * (W * E) * Xc.transpose());
    return out;
}

namespace detail {

// Shared precomputation for the discriminative term: raw responses and
// absolute features of every exemplar, in one concatenated frame.
struct ExemplarFrame {
    Eigen::MatrixXd X_cat;  // D0 x NE
    Eigen::MatrixXd U;      // W * X_cat
    Eigen::MatrixXd F;      // |U|
    std::vector<int> offset;  // class -> first global column
    std::vector<int> count;

    int global(int cls, int idx) const { return offset[static_cast<std::size_t>(cls)] + idx; }
};

inline ExemplarFrame make_exemplar_frame(const Eigen::MatrixXd& W,
                                         const std::vector<Eigen::MatrixXd>& X_ex) {
    ExemplarFrame fr;
    const int C = static_cast<int>(X_ex.size());
    fr.offset.resize(static_cast<std::size_t>(C));
    fr.count.resize(static_cast<std::size_t>(C));
    Eigen::Index ne = 0;
    for (int c = 0; c < C; ++c) {
        fr.offset[static_cast<std::size_t>(c)] = static_cast<int>(ne);
        fr.count[static_cast<std::size_t>(c)] = static_cast<int>(X_ex[static_cast<std::size_t>(c)].cols());
        ne += X_ex[static_cast<std::size_t>(c)].cols();
    }
    fr.X_cat.resize(W.cols(), ne);
    for (int c = 0; c < C; ++c) {
        if (X_ex[static_cast<std::size_t>(c)].cols() > 0) {
            fr.X_cat.middleCols(fr.offset[static_cast<std::size_t>(c)],
                                X_ex[static_cast<std::size_t>(c)].cols()) = X_ex[static_cast<std::size_t>(c)];
        }
    }
    fr.U = W * fr.X_cat;
    fr.F = fr.U.cwiseAbs();
    return fr;
}

// Triplet hinge for one class given the shared frame. Appends the gradient
// coefficient matrix contribution into coef (D x NE).
inline double dis_value_and_coef(const ExemplarFrame& fr, const SelectionMask& mask, int cls,
                                 const TripletCache& cache, const LayerHyperparams& hp,
                                 Eigen::MatrixXd* coef) {
    const auto& entries = cache.by_class[static_cast<std::size_t>(cls)];
    if (static_cast<int>(entries.size()) != fr.count[static_cast<std::size_t>(cls)]) {
        throw DimensionError("discriminative cost: triplet cache does not match exemplar count");
    }
    const Eigen::VectorXd a = mask_as_double(mask);
    double value = 0.0;
    for (std::size_t j = 0; j < entries.size(); ++j) {
        const int gj = fr.global(cls, static_cast<int>(j));
        const auto& ent = entries[j];
        if (ent.pos.empty() || ent.neg.empty()) continue;

        double dis_pos = 0.0, dis_neg = 0.0;
        for (int p : ent.pos) {
            dis_pos += (a.array() * (fr.F.col(gj) - fr.F.col(fr.global(cls, p))).array()).matrix().squaredNorm();
        }
        dis_pos /= static_cast<double>(ent.pos.size());
        for (const ExemplarRef& r : ent.neg) {
            dis_neg += (a.array() * (fr.F.col(gj) - fr.F.col(fr.global(r.cls, r.idx))).array()).matrix().squaredNorm();
        }
        dis_neg /= static_cast<double>(ent.neg.size());

        const double h = hp.delta + dis_pos - dis_neg;
        if (h <= 0.0) continue;
        value += h;

        if (coef != nullptr) {
            const double wp = 2.0 / static_cast<double>(ent.pos.size());
            for (int p : ent.pos) {
                const int gp = fr.global(cls, p);
                const Eigen::VectorXd diff = a.cwiseProduct(fr.F.col(gj) - fr.F.col(gp));
                coef->col(gj) += wp * diff;
                coef->col(gp) -= wp * diff;
            }
            const double wn = 2.0 / static_cast<double>(ent.neg.size());
            for (const ExemplarRef& r : ent.neg) {
                const int gn = fr.global(r.cls, r.idx);
                const Eigen::VectorXd diff = a.cwiseProduct(fr.F.col(gj) - fr.F.col(gn));
                coef->col(gj) -= wn * diff;
                coef->col(gn) += wn * diff;
            }
        }
    }
    return value;
}

}  // namespace detail

// Discriminative cost for one class: hinge over patch-to-class distances in
// the class's masked feature space.

inline CostResult cost_discriminative(const Eigen::MatrixXd& W, const SelectionMask& mask,
                                      const std::vector<Eigen::MatrixXd>& X_ex, int cls,
                                      const TripletCache& cache, const LayerHyperparams& hp) {
    if (cache.by_class.size() != X_ex.size()) throw DimensionError("cost_discriminative: cache/class mismatch");
    const detail::ExemplarFrame fr = detail::make_exemplar_frame(W, X_ex);

    Eigen::MatrixXd coef = Eigen::MatrixXd::Zero(W.rows(), fr.X_cat.cols());
    CostResult out;
    out.value = detail::dis_value_and_coef(fr, mask, cls, cache, hp, &coef);
    out.grad = coef.cwiseProduct(detail::sign_of(fr.U)) * fr.X_cat.transpose();
    return out;
}

// ---------------------------------------------------------------------------
// Triplet cache refresh: per class, nearest same-class / other-class exemplars
// measured in that class's masked feature space.

inline TripletCache refresh_triplets(const Eigen::MatrixXd& W,
                                     const std::vector<SelectionMask>& masks,
                                     const std::vector<Eigen::MatrixXd>& X_ex, int K) {
    if (K < 1) throw std::invalid_argument("refresh_triplets: K must be >= 1");
    const int C = static_cast<int>(X_ex.size());
    if (static_cast<int>(masks.size()) != C) throw DimensionError("refresh_triplets: mask count mismatch");

    // Raw responses shared across classes; each class applies its own mask.
    const detail::ExemplarFrame fr = detail::make_exemplar_frame(W, X_ex);
    const Eigen::Index ne = fr.X_cat.cols();

    TripletCache cache;
    cache.by_class.resize(static_cast<std::size_t>(C));

    for (int c = 0; c < C; ++c) {
        const int nc = fr.count[static_cast<std::size_t>(c)];
        auto& out = cache.by_class[static_cast<std::size_t>(c)];
        out.resize(static_cast<std::size_t>(nc));
        if (nc == 0) continue;

        const int k_pos = std::min(K, nc - 1);
        const int k_neg = std::min<int>(K, static_cast<int>(ne) - nc);
        if (k_pos < K) {
            log_info("refresh_triplets: class " + std::to_string(c) + " has only " +
                     std::to_string(nc) + " exemplars; clamping K to " + std::to_string(k_pos));
        }

        const Eigen::VectorXd a = detail::mask_as_double(masks[static_cast<std::size_t>(c)]);
        Eigen::MatrixXd Fc = a.asDiagonal() * fr.F;  // masked features for every exemplar
        const Eigen::VectorXd norms = Fc.colwise().squaredNorm();

        using Cand = std::pair<double, int>;
        for (int j = 0; j < nc; ++j) {
            const int gj = fr.global(c, j);
            // One pass over all exemplars, two heaps.
            std::priority_queue<Cand> pos_heap, neg_heap;
            for (Eigen::Index g = 0; g < ne; ++g) {
                if (g == gj) continue;
                const double d2 = std::max(
                    0.0, norms(gj) + norms(g) - 2.0 * Fc.col(gj).dot(Fc.col(g)));
                const bool same = g >= fr.offset[static_cast<std::size_t>(c)] &&
                                  g < fr.offset[static_cast<std::size_t>(c)] + nc;
                auto& heap = same ? pos_heap : neg_heap;
                const int cap = same ? k_pos : k_neg;
                if (cap <= 0) continue;
                const Cand cand{d2, static_cast<int>(g)};
                if (static_cast<int>(heap.size()) < cap) {
                    heap.push(cand);
                } else if (cand < heap.top()) {
                    heap.pop();
                    heap.push(cand);
                }
            }
            auto drain = [](std::priority_queue<Cand>& h) {
                std::vector<Cand> v;
                v.reserve(h.size());
                while (!h.empty()) {
                    v.push_back(h.top());
                    h.pop();
                }
                std::sort(v.begin(), v.end());
                return v;
            };
            for (const auto& [d2, g] : drain(pos_heap)) {
                out[static_cast<std::size_t>(j)].pos.push_back(g - fr.offset[static_cast<std::size_t>(c)]);
            }
            for (const auto& [d2, g] : drain(neg_heap)) {
                int rc = 0;
                while (rc + 1 < C && fr.offset[static_cast<std::size_t>(rc + 1)] <= g) ++rc;
                out[static_cast<std::size_t>(j)].neg.push_back({rc, g - fr.offset[static_cast<std::size_t>(rc)]});
            }
        }
    }
    return cache;
}

// ---------------------------------------------------------------------------
// Greedy mask selection for one class: activate one filter at a time, each
// step taking the single extension that minimizes masked reconstruction
// + lambda2 * |alpha|_0 + eta * hinge.

inline SelectionMask greedy_select_alpha(const Eigen::MatrixXd& W, const Eigen::MatrixXd& Xc,
                                         int cls, const std::vector<Eigen::MatrixXd>& X_ex,
                                         const TripletCache& cache, const LayerHyperparams& hp,
                                         std::vector<int>* activation_order = nullptr) {
    const Eigen::Index D = W.rows();
    const Eigen::Index nc = Xc.cols();
    SelectionMask mask;
    mask.alpha = Eigen::ArrayXi::Zero(D);
    if (nc == 0) {
        mask.alpha(0) = 1;
        if (activation_order != nullptr) activation_order->push_back(0);
        return mask;
    }
    const int max_active = hp.max_active > 0 ? hp.max_active : std::max(1, static_cast<int>(D) / 4);

    const Eigen::MatrixXd U = W * Xc;  // D x nc raw responses
    const Eigen::VectorXd row_norm2 = W.rowwise().squaredNorm();
    const Eigen::VectorXd u_sq = U.cwiseAbs2().rowwise().sum();

    // Per-filter triplet contributions; distances add row-wise over active filters.
    const bool use_dis = hp.eta > 0.0 && !cache.empty();
    Eigen::MatrixXd P, Nn;
    if (use_dis) {
        const detail::ExemplarFrame fr = detail::make_exemplar_frame(W, X_ex);
        const auto& entries = cache.by_class[static_cast<std::size_t>(cls)];
        if (static_cast<Eigen::Index>(entries.size()) != nc) {
            throw DimensionError("greedy_select_alpha: triplet cache does not match exemplar count");
        }
        P = Eigen::MatrixXd::Zero(D, nc);
        Nn = Eigen::MatrixXd::Zero(D, nc);
        for (Eigen::Index j = 0; j < nc; ++j) {
            const auto& ent = entries[static_cast<std::size_t>(j)];
            const int gj = fr.global(cls, static_cast<int>(j));
            if (!ent.pos.empty()) {
                for (int p : ent.pos) {
                    P.col(j) += (fr.F.col(gj) - fr.F.col(fr.global(cls, p))).cwiseAbs2();
                }
                P.col(j) /= static_cast<double>(ent.pos.size());
            }
            if (!ent.neg.empty()) {
                for (const ExemplarRef& r : ent.neg) {
                    Nn.col(j) += (fr.F.col(gj) - fr.F.col(fr.global(r.cls, r.idx))).cwiseAbs2();
                }
                Nn.col(j) /= static_cast<double>(ent.neg.size());
            }
        }
    }

    Eigen::MatrixXd R = Xc;  // residual under the current mask
    double cur_sha = R.squaredNorm();
    Eigen::VectorXd dis_pos = Eigen::VectorXd::Zero(nc);
    Eigen::VectorXd dis_neg = Eigen::VectorXd::Zero(nc);
    auto dis_total = [&](const Eigen::VectorXd& dp, const Eigen::VectorXd& dn) {
        double v = 0.0;
        for (Eigen::Index j = 0; j < nc; ++j) v += std::max(0.0, hp.delta + dp(j) - dn(j));
        return v;
    };
    double cur_dis = use_dis ? dis_total(dis_pos, dis_neg) : 0.0;
    double cur_obj = cur_sha + hp.eta * cur_dis;  // lambda2 * 0 active

    int active = 0;
    while (active < max_active && active < D) {
        const Eigen::MatrixXd T = W * R;  // T(d,j) = w_d . R_j
        int best = -1;
        double best_obj = 0.0, best_sha = 0.0, best_dis = 0.0;
        for (Eigen::Index d = 0; d < D; ++d) {
            if (mask.alpha(d) != 0) continue;
            const double sha_new =
                cur_sha - 2.0 * U.row(d).dot(T.row(d)) + row_norm2(d) * u_sq(d);
            double dis_new = 0.0;
            if (use_dis) {
                dis_new = dis_total(dis_pos + P.row(d).transpose(), dis_neg + Nn.row(d).transpose());
            }
            const double obj = sha_new + hp.lambda2 * (active + 1) + hp.eta * dis_new;
            if (best < 0 || obj < best_obj) {
                best = static_cast<int>(d);
                best_obj = obj;
                best_sha = sha_new;
                best_dis = dis_new;
            }
        }
        if (best < 0) break;
        if (active > 0) {
            if (best_obj >= cur_obj) break;  // no filter decreases the objective
            if (cur_sha - best_sha < hp.greedy_tol * std::max(cur_sha, 1e-12)) break;
        }

        mask.alpha(best) = 1;
        ++active;
        if (activation_order != nullptr) activation_order->push_back(best);
        R.noalias() -= W.row(best).transpose() * U.row(best);
        cur_sha = best_sha;
        if (use_dis) {
            dis_pos += P.row(best).transpose();
            dis_neg += Nn.row(best).transpose();
        }
        cur_dis = best_dis;
        cur_obj = best_sha + hp.lambda2 * active + hp.eta * best_dis;
    }

    if (active == 0) {
        mask.alpha(0) = 1;  // contract: at least one active filter
        if (activation_order != nullptr) activation_order->push_back(0);
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Full-objective evaluation (the alternation's merit function) and the W-step.

inline double eval_objective(const Eigen::MatrixXd& W, const std::vector<SelectionMask>& masks,
                             const TrainBatch& batch, const TripletCache& cache,
                             const LayerHyperparams& hp) {
    double value = cost_unsupervised(W, batch.X_all, batch.Omega, hp).value;
    if (hp.gamma > 0.0 || hp.eta > 0.0) {
        const detail::ExemplarFrame fr = detail::make_exemplar_frame(W, batch.X_ex);
        for (std::size_t c = 0; c < batch.X_ex.size(); ++c) {
            if (hp.gamma > 0.0) {
                const double sha = cost_shareable(W, masks[c], batch.X_ex[c]).value;
                value += hp.gamma * (sha + hp.lambda2 * masks[c].active_count());
            }
            if (hp.eta > 0.0 && !cache.empty()) {
                value += hp.eta *
                         detail::dis_value_and_coef(fr, masks[c], static_cast<int>(c), cache, hp, nullptr);
            }
        }
    }
    return value;
}

namespace detail {

// Eq.-5 style objective over flattened W (row-major), with fixed masks/cache.
inline ObjectiveResult eval_w_objective(const Eigen::VectorXd& theta, Eigen::Index D, Eigen::Index D0,
                                        const std::vector<SelectionMask>& masks,
                                        const TrainBatch& batch, const TripletCache& cache,
                                        const LayerHyperparams& hp) {
    Eigen::MatrixXd W(D, D0);
    for (Eigen::Index d = 0; d < D; ++d) {
        W.row(d) = theta.segment(d * D0, D0).transpose();
    }

    CostResult acc = cost_unsupervised(W, batch.X_all, batch.Omega, hp);

    if (hp.gamma > 0.0 || (hp.eta > 0.0 && !cache.empty())) {
        const ExemplarFrame fr = make_exemplar_frame(W, batch.X_ex);
        Eigen::MatrixXd dis_coef;
        if (hp.eta > 0.0 && !cache.empty()) {
            dis_coef = Eigen::MatrixXd::Zero(D, fr.X_cat.cols());
        }
        for (std::size_t c = 0; c < batch.X_ex.size(); ++c) {
            const Eigen::MatrixXd& Xc = batch.X_ex[c];
            if (hp.gamma > 0.0 && Xc.cols() > 0) {
                // Masked reconstruction, reusing the shared raw responses.
                const Eigen::VectorXd a = mask_as_double(masks[c]);
                const auto Uc = fr.U.middleCols(fr.offset[c], Xc.cols());
                Eigen::MatrixXd Um = a.asDiagonal() * Uc;
                Eigen::MatrixXd E = W.transpose() * Um - Xc;
                acc.value += hp.gamma * E.squaredNorm();
                acc.grad.noalias() += (2.0 * hp.gamma) * (Um * E.transpose());
                acc.grad.noalias() += (2.0 * hp.gamma) * (a.asDiagonal() * (W * E) * Xc.transpose());
            }
            if (hp.eta > 0.0 && !cache.empty()) {
                acc.value += hp.eta *
                             dis_value_and_coef(fr, masks[c], static_cast<int>(c), cache, hp, &dis_coef);
            }
        }
        if (hp.eta > 0.0 && !cache.empty()) {
            acc.grad.noalias() +=
                hp.eta * (dis_coef.cwiseProduct(sign_of(fr.U)) * fr.X_cat.transpose());
        }
    }

    ObjectiveResult out;
    out.value = acc.value;
    out.grad.resize(D * D0);
    for (Eigen::Index d = 0; d < D; ++d) {
        out.grad.segment(d * D0, D0) = acc.grad.row(d).transpose();
    }
    return out;
}

inline Eigen::VectorXd flatten_rows(const Eigen::MatrixXd& W) {
    Eigen::VectorXd theta(W.size());
    for (Eigen::Index d = 0; d < W.rows(); ++d) {
        theta.segment(d * W.cols(), W.cols()) = W.row(d).transpose();
    }
    return theta;
}

inline Eigen::MatrixXd unflatten_rows(const Eigen::VectorXd& theta, Eigen::Index D, Eigen::Index D0) {
    Eigen::MatrixXd W(D, D0);
    for (Eigen::Index d = 0; d < D; ++d) W.row(d) = theta.segment(d * D0, D0).transpose();
    return W;
}

}  // namespace detail

struct StepWResult {
    FilterBank bank;
    TripletCache cache;  // possibly refreshed
    bool degraded = false;
    double objective = 0.0;
    int iters = 0;
};

// Minimize the W-block objective by L-BFGS, refreshing the triplet cache every
// nn_refresh_period accepted iterations. The objective is non-increasing
// between refreshes.
inline StepWResult step_W(const FilterBank& bank, const std::vector<SelectionMask>& masks,
                          const TrainBatch& batch, TripletCache cache, const LayerHyperparams& hp,
                          const LbfgsParams& lbfgs_params) {
    const Eigen::Index D = bank.W.rows();
    const Eigen::Index D0 = bank.W.cols();

    StepWResult result;
    result.bank = bank;
    result.cache = std::move(cache);

    Eigen::VectorXd theta = detail::flatten_rows(bank.W);
    int remaining = lbfgs_params.max_iters;
    const int period = std::max(1, hp.nn_refresh_period);

    while (remaining > 0) {
        const int window = std::min(period, remaining);
        LbfgsParams p = lbfgs_params;
        p.max_iters = window;
        const TripletCache& cache_ref = result.cache;
        ObjectiveFn fn = [&](const Eigen::VectorXd& t) {
            return detail::eval_w_objective(t, D, D0, masks, batch, cache_ref, hp);
        };
        LbfgsResult res = lbfgs_minimize(fn, theta, p);
        theta = res.x;
        result.objective = res.value;
        result.degraded = result.degraded || res.degraded;
        result.iters += res.iters;
        remaining -= std::max(1, res.iters);

        const bool converged = res.iters < window;
        if (hp.eta > 0.0 && remaining > 0) {
            result.bank.W = detail::unflatten_rows(theta, D, D0);
            TripletCache refreshed = refresh_triplets(result.bank.W, masks, batch.X_ex, hp.K);
            const bool unchanged = refreshed == result.cache;
            result.cache = std::move(refreshed);
            if (converged && unchanged) break;
        } else if (converged) {
            break;
        }
    }

    result.bank.W = detail::unflatten_rows(theta, D, D0);
    return result;
}

// ---------------------------------------------------------------------------
// Layer training: unsupervised warm start, then alternate greedy mask
// selection (per class) with W updates until masks settle.

struct TrainLayerResult {
    FilterBank bank;
    std::vector<SelectionMask> masks;
    TripletCache cache;
    std::vector<double> objective_per_round;
    int rounds_run = 0;
    bool converged = false;
    bool degraded = false;
};

inline TrainLayerResult train_layer(const TrainBatch& batch, const LayerHyperparams& hp, int D,
                                    std::uint64_t seed, const LbfgsParams& lbfgs_params) {
    if (batch.X_all.cols() == 0) throw DataError("train_layer: empty unsupervised pool");
    const Eigen::Index D0 = batch.X_all.rows();
    const int C = static_cast<int>(batch.X_ex.size());

    TrainLayerResult result;

    // Random init, rows on the unit sphere.
    Rng rng(derive_seed(seed, "winit"));
    result.bank.W.resize(D, D0);
    for (Eigen::Index d = 0; d < D; ++d) {
        for (Eigen::Index k = 0; k < D0; ++k) result.bank.W(d, k) = 0.01 * rng.normal();
        const double norm = result.bank.W.row(d).norm();
        if (norm > 0) result.bank.W.row(d) /= norm;
    }

    result.masks.resize(static_cast<std::size_t>(C));
    for (auto& m : result.masks) m.alpha = Eigen::ArrayXi::Zero(D);

    // Warm start on the unsupervised term alone.
    {
        LayerHyperparams warm = hp;
        warm.gamma = 0.0;
        warm.eta = 0.0;
        StepWResult w = step_W(result.bank, result.masks, batch, TripletCache{}, warm, lbfgs_params);
        result.bank = std::move(w.bank);
        result.degraded = w.degraded;
    }

    if (hp.eta > 0.0) {
        std::vector<SelectionMask> ones(static_cast<std::size_t>(C));
        for (auto& m : ones) m.alpha = Eigen::ArrayXi::Ones(D);
        result.cache = refresh_triplets(result.bank.W, ones, batch.X_ex, hp.K);
    }

    double obj_prev = std::numeric_limits<double>::infinity();
    for (int round = 0; round < hp.outer_rounds; ++round) {
        bool masks_changed = false;
        for (int c = 0; c < C; ++c) {
            SelectionMask cand = greedy_select_alpha(result.bank.W, batch.X_ex[static_cast<std::size_t>(c)],
                                                     c, batch.X_ex, result.cache, hp);
            if (round > 0) {
                // Coordinate descent guard: keep the incumbent when it scores
                // better on this class's block of the full objective.
                auto block_value = [&](const SelectionMask& m) {
                    double v = hp.gamma * (cost_shareable(result.bank.W, m, batch.X_ex[static_cast<std::size_t>(c)]).value +
                                           hp.lambda2 * m.active_count());
                    if (hp.eta > 0.0 && !result.cache.empty()) {
                        v += hp.eta * cost_discriminative(result.bank.W, m, batch.X_ex, c,
                                                          result.cache, hp).value;
                    }
                    return v;
                };
                if (block_value(cand) >= block_value(result.masks[static_cast<std::size_t>(c)])) {
                    continue;  // incumbent stays
                }
            }
            if (!(cand == result.masks[static_cast<std::size_t>(c)])) masks_changed = true;
            result.masks[static_cast<std::size_t>(c)] = std::move(cand);
        }

        StepWResult w = step_W(result.bank, result.masks, batch, std::move(result.cache), hp, lbfgs_params);
        result.bank = std::move(w.bank);
        result.cache = std::move(w.cache);
        result.degraded = result.degraded || w.degraded;

        const double obj = eval_objective(result.bank.W, result.masks, batch, result.cache, hp);
        result.objective_per_round.push_back(obj);
        result.rounds_run = round + 1;

        if (!masks_changed && obj_prev - obj < 1e-4 * std::max(1.0, std::abs(obj_prev))) {
            result.converged = true;
            break;
        }
        obj_prev = obj;
    }
    return result;
}

}  // namespace ddsfl
