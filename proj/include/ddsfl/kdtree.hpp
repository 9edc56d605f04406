#pragma once

// Randomized k-d forest for approximate nearest neighbor search: several trees
// split on dimensions drawn from the top-variance set, queried jointly with a
// shared priority queue and a checked-point budget. With budget >= N the
// search visits every point and is exact.

#include <Eigen/Dense>

#include <queue>

#include "ddsfl/core.hpp"

namespace ddsfl {

class KdForest {
public:
    // X: D x N, samples as columns. Trees share the data, each with its own splits.
    KdForest(const Eigen::MatrixXd& X, int num_trees, int leaf_size, std::uint64_t seed)
        : data_(X), leaf_size_(std::max(1, leaf_size)) {
        const int n = static_cast<int>(X.cols());
        trees_.resize(static_cast<std::size_t>(std::max(1, num_trees)));
        for (std::size_t t = 0; t < trees_.size(); ++t) {
            Rng rng(derive_seed(seed, "kdtree", t));
            trees_[t].order.resize(static_cast<std::size_t>(n));
            for (int i = 0; i < n; ++i) trees_[t].order[static_cast<std::size_t>(i)] = i;
            build(trees_[t], 0, n, rng);
        }
    }

    // k nearest neighbors of q under squared L2, ordered by (distance, index).
    // `exclude` removes one index (a query that lives in the data set).
    // `max_checks` caps the number of distinct points whose distance is computed.
    std::vector<int> knn(const Eigen::VectorXd& q, int k, int max_checks, int exclude = -1) const {
        const int n = static_cast<int>(data_.cols());
        if (k > n - (exclude >= 0 ? 1 : 0)) k = n - (exclude >= 0 ? 1 : 0);
        if (k <= 0) return {};

        std::vector<char> visited(static_cast<std::size_t>(n), 0);
        using Cand = std::pair<double, int>;  // (squared distance, index)
        std::priority_queue<Cand> best;       // max-heap of current k best

        using Branch = std::pair<double, std::pair<int, int>>;  // (min dist, (tree, node))
        std::priority_queue<Branch, std::vector<Branch>, std::greater<Branch>> branches;

        int checks = 0;
        auto visit_leaf = [&](const Tree& tree, int node_idx) {
            const Node& node = tree.nodes[static_cast<std::size_t>(node_idx)];
            for (int i = node.begin; i < node.end; ++i) {
                const int idx = tree.order[static_cast<std::size_t>(i)];
                if (idx == exclude || visited[static_cast<std::size_t>(idx)]) continue;
                visited[static_cast<std::size_t>(idx)] = 1;
                ++checks;
                const double d2 = (data_.col(idx) - q).squaredNorm();
                const Cand c{d2, idx};
                if (static_cast<int>(best.size()) < k) {
                    best.push(c);
                } else if (c < best.top()) {
                    best.pop();
                    best.push(c);
                }
            }
        };

        auto descend = [&](int tree_idx, int node_idx) {
            const Tree& tree = trees_[static_cast<std::size_t>(tree_idx)];
            int cur = node_idx;
            for (;;) {
                const Node& node = tree.nodes[static_cast<std::size_t>(cur)];
                if (node.left < 0) {
                    visit_leaf(tree, cur);
                    return;
                }
                const double diff = q(node.split_dim) - node.split_val;
                const int near = diff <= 0 ? node.left : node.right;
                const int far = diff <= 0 ? node.right : node.left;
                branches.push({diff * diff, {tree_idx, far}});
                cur = near;
            }
        };

        for (std::size_t t = 0; t < trees_.size(); ++t) descend(static_cast<int>(t), 0);
        while (!branches.empty() && checks < max_checks) {
            const Branch b = branches.top();
            branches.pop();
            if (static_cast<int>(best.size()) == k && b.first > best.top().first) continue;
            descend(b.second.first, b.second.second);
        }

        std::vector<Cand> out;
        out.reserve(best.size());
        while (!best.empty()) {
            out.push_back(best.top());
            best.pop();
        }
        std::sort(out.begin(), out.end());
        std::vector<int> idx(out.size());
        for (std::size_t i = 0; i < out.size(); ++i) idx[i] = out[i].second;
        return idx;
    }

private:
    struct Node {
        int begin = 0, end = 0;     // range into order for leaves
        int left = -1, right = -1;  // children; -1 marks a leaf
        int split_dim = 0;
        double split_val = 0.0;
    };
    struct Tree {
        std::vector<int> order;
        std::vector<Node> nodes;
    };

    void build(Tree& tree, int begin, int end, Rng& rng) {
        tree.nodes.push_back({});
        const int self = static_cast<int>(tree.nodes.size()) - 1;
        tree.nodes[static_cast<std::size_t>(self)].begin = begin;
        tree.nodes[static_cast<std::size_t>(self)].end = end;
        if (end - begin <= leaf_size_) return;

        // Pick a split dimension randomly among the top-5 variance dims of this subset.
        const Eigen::Index d = data_.rows();
        Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
        for (int i = begin; i < end; ++i) mean += data_.col(tree.order[static_cast<std::size_t>(i)]);
        mean /= static_cast<double>(end - begin);
        Eigen::VectorXd var = Eigen::VectorXd::Zero(d);
        for (int i = begin; i < end; ++i) {
            var += (data_.col(tree.order[static_cast<std::size_t>(i)]) - mean).cwiseAbs2();
        }
        std::vector<int> dims(static_cast<std::size_t>(d));
        for (Eigen::Index i = 0; i < d; ++i) dims[static_cast<std::size_t>(i)] = static_cast<int>(i);
        std::sort(dims.begin(), dims.end(), [&](int a, int b) {
            return var(a) != var(b) ? var(a) > var(b) : a < b;
        });
        const int top = static_cast<int>(std::min<Eigen::Index>(5, d));
        const int split_dim = dims[static_cast<std::size_t>(rng.uniform_int(top))];
        const double split_val = mean(split_dim);

        auto mid_it = std::partition(tree.order.begin() + begin, tree.order.begin() + end,
                                     [&](int idx) { return data_(split_dim, idx) <= split_val; });
        int mid = static_cast<int>(mid_it - tree.order.begin());
        double final_split = split_val;
        if (mid == begin || mid == end) {
            // Mean split degenerated; median split keeps the half-space bound sound.
            mid = (begin + end) / 2;
            std::nth_element(tree.order.begin() + begin, tree.order.begin() + mid,
                             tree.order.begin() + end,
                             [&](int a, int b) { return data_(split_dim, a) < data_(split_dim, b); });
            final_split = data_(split_dim, tree.order[static_cast<std::size_t>(mid)]);
        }

        tree.nodes[static_cast<std::size_t>(self)].split_dim = split_dim;
        tree.nodes[static_cast<std::size_t>(self)].split_val = final_split;
        const int left = static_cast<int>(tree.nodes.size());
        build(tree, begin, mid, rng);
        const int right = static_cast<int>(tree.nodes.size());
        build(tree, mid, end, rng);
        tree.nodes[static_cast<std::size_t>(self)].left = left;
        tree.nodes[static_cast<std::size_t>(self)].right = right;
    }

    const Eigen::MatrixXd& data_;
    int leaf_size_;
    std::vector<Tree> trees_;
};

}  // namespace ddsfl
