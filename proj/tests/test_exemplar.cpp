#include <catch2/catch_amalgamated.hpp>

#include "ddsfl/exemplar.hpp"
#include "test_util.hpp"

using namespace ddsfl;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST_CASE("coverage sets on collinear points", "[exemplar]") {
    MatrixXd X(1, 3);
    X << 0.0, 1.0, 10.0;
    const auto cover = coverage_sets(X, 1, false);
    REQUIRE(cover[0] == std::vector<int>{1});
    REQUIRE(cover[1] == std::vector<int>{0});
    REQUIRE(cover[2] == std::vector<int>{1});
}

TEST_CASE("coverage excludes self but keeps duplicates", "[exemplar]") {
    MatrixXd X(2, 4);
    X.col(0) << 0.0, 0.0;
    X.col(1) << 0.0, 0.0;  // duplicate of 0
    X.col(2) << 5.0, 0.0;
    X.col(3) << 9.0, 0.0;
    const auto cover = coverage_sets(X, 1, false);
    REQUIRE(cover[0] == std::vector<int>{1});
    REQUIRE(cover[1] == std::vector<int>{0});
}

TEST_CASE("approximate coverage equals exact on a small pool", "[exemplar]") {
    Rng rng(3);
    const MatrixXd X = testutil::random_matrix(rng, 2, 200);
    NNSelectConfig cfg;
    cfg.ann_checks = 4096;  // more than the pool: the forest search is exact
    const auto exact = coverage_sets(X, 6, false, cfg);
    const auto approx = coverage_sets(X, 6, true, cfg);
    REQUIRE(exact == approx);
}

TEST_CASE("kd-forest recall stays above 0.9 under a budget", "[exemplar]") {
    // Clustered pool, the regime dense patches live in.
    Rng rng(17);
    const int blobs = 25, per = 120;
    MatrixXd X(16, blobs * per);
    for (int b = 0; b < blobs; ++b) {
        const MatrixXd center = testutil::random_matrix(rng, 16, 1) * 3.0;
        for (int i = 0; i < per; ++i) {
            X.col(b * per + i) = center + 0.3 * testutil::random_matrix(rng, 16, 1);
        }
    }
    NNSelectConfig cfg;
    cfg.ann_checks = 600;
    const auto exact = coverage_sets(X, 10, false, cfg);
    const auto approx = coverage_sets(X, 10, true, cfg);
    std::size_t hit = 0, total = 0;
    for (std::size_t i = 0; i < exact.size(); ++i) {
        std::set<int> truth(exact[i].begin(), exact[i].end());
        for (int j : approx[i]) hit += truth.count(j);
        total += exact[i].size();
    }
    REQUIRE(static_cast<double>(hit) / static_cast<double>(total) >= 0.9);
}

TEST_CASE("reaching score hand case: reached once at distance 2", "[exemplar]") {
    MatrixXd X(1, 3);
    X << 0.0, 2.0, 5.0;
    const std::vector<int> labels = {0, 1, 1};
    const auto cover = coverage_sets(X, 1, false);
    const VectorXd scores = reaching_scores(X, labels, cover, 2);
    // cover(2.0) = {0}: patch 0 is reached once by class 1 at distance 2.
    REQUIRE(scores(0) == Catch::Approx(2.0));
}

TEST_CASE("common patches score near zero, unreached patches score the diameter", "[exemplar]") {
    // A patch duplicated in both classes scores zero; patches nobody reaches
    // score the pool diameter. Pairs are tight so coverage stays local.
    MatrixXd X(1, 6);
    X << 0.0, 0.0, 100.0, 101.0, -100.0, -101.0;
    const std::vector<int> labels = {0, 1, 0, 0, 1, 1};
    const auto cover = coverage_sets(X, 1, false);
    const VectorXd scores = reaching_scores(X, labels, cover, 2);
    REQUIRE(scores(0) == Catch::Approx(0.0));
    REQUIRE(scores(1) == Catch::Approx(0.0));
    // Patch 2 (class 0 at 100) is covered only by its class-0 twin.
    const double diameter = 202.0;  // 101 to -101
    REQUIRE(scores(2) == Catch::Approx(diameter));
}

TEST_CASE("nn_select keeps exactly the top fraction per class", "[exemplar]") {
    Rng rng(5);
    const int per = 100;
    MatrixXd X(3, 2 * per);
    std::vector<int> labels(static_cast<std::size_t>(2 * per));
    for (int i = 0; i < 2 * per; ++i) {
        X.col(i) = testutil::random_matrix(rng, 3, 1);
        if (i >= per) X(0, i) += 3.0;
        labels[static_cast<std::size_t>(i)] = i < per ? 0 : 1;
    }
    NNSelectConfig cfg;
    cfg.M_nn = 8;
    cfg.eps_nn = 0.1;
    const ExemplarSet ex = nn_select(X, labels, cfg);
    REQUIRE(ex.per_class[0].size() == 10);
    REQUIRE(ex.per_class[1].size() == 10);

    cfg.eps_nn = 1.0;
    const ExemplarSet all = nn_select(X, labels, cfg);
    REQUIRE(all.per_class[0].size() == static_cast<std::size_t>(per));
    REQUIRE(all.per_class[1].size() == static_cast<std::size_t>(per));
}

TEST_CASE("nn_select matches the brute-force oracle on random instances", "[exemplar]") {
    for (std::uint64_t seed = 0; seed < 6; ++seed) {
        Rng rng(1000 + seed);
        const int C = 2 + static_cast<int>(rng.uniform_int(3));
        const int n = 60 + static_cast<int>(rng.uniform_int(120));
        MatrixXd X(4, n);
        std::vector<int> labels(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const int c = i % C;
            labels[static_cast<std::size_t>(i)] = c;
            X.col(i) = testutil::random_matrix(rng, 4, 1);
            X(0, i) += 1.5 * c;
        }
        NNSelectConfig cfg;
        cfg.M_nn = 5;
        cfg.eps_nn = 0.25;
        const ExemplarSet got = nn_select(X, labels, cfg);
        const auto oracle = testutil::oracle_nn_select(X, labels, C, cfg.M_nn, cfg.eps_nn);
        REQUIRE(got.per_class == oracle.selected);
    }
}

TEST_CASE("a patch duplicated across every class is never selected", "[exemplar]") {
    Rng rng(77);
    const int C = 3, per = 10;
    MatrixXd X(4, C * per);
    std::vector<int> labels;
    for (int c = 0; c < C; ++c) {
        for (int i = 0; i < per; ++i) {
            const int col = c * per + i;
            labels.push_back(c);
            if (i == 0) {
                X.col(col) = VectorXd::Constant(4, 0.5);  // the common patch
            } else {
                X.col(col) = testutil::random_matrix(rng, 4, 1);
                X(0, col) += 4.0 * c;
            }
        }
    }
    NNSelectConfig cfg;
    cfg.M_nn = 3;
    cfg.eps_nn = 0.5;
    const ExemplarSet ex = nn_select(X, labels, cfg);
    for (int c = 0; c < C; ++c) {
        for (int idx : ex.per_class[static_cast<std::size_t>(c)]) {
            REQUIRE(idx % per != 0);  // the planted common column is excluded
        }
        REQUIRE(ex.per_class[static_cast<std::size_t>(c)].size() == per / 2);
    }
}

TEST_CASE("selection is invariant to rotation and translation", "[exemplar]") {
    Rng rng(41);
    const int n = 80;
    MatrixXd X(3, n);
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        X.col(i) = testutil::random_matrix(rng, 3, 1);
        labels[static_cast<std::size_t>(i)] = i % 3;
        X(1, i) += labels[static_cast<std::size_t>(i)];
    }
    NNSelectConfig cfg;
    cfg.M_nn = 6;
    cfg.eps_nn = 0.3;
    const ExemplarSet base = nn_select(X, labels, cfg);

    const MatrixXd R = testutil::random_orthonormal(rng, 3);
    const VectorXd shift = testutil::random_matrix(rng, 3, 1);
    MatrixXd Y = (R * X).colwise() + shift;
    const ExemplarSet moved = nn_select(Y, labels, cfg);
    REQUIRE(base.per_class == moved.per_class);
}

TEST_CASE("cluster verdicts implement both drop rules", "[exemplar]") {
    REQUIRE(cluster_verdict(2, 1, 10, 3) == ClusterVerdict::drop_few_hits);
    REQUIRE(cluster_verdict(3, 1, 10, 3) == ClusterVerdict::keep);
    REQUIRE(cluster_verdict(9, 6, 10, 3) == ClusterVerdict::drop_too_broad);
    REQUIRE(cluster_verdict(9, 5, 10, 3) == ClusterVerdict::keep);
    // C=3: more than ceil(3/2)=2 distinct classes means all three.
    REQUIRE(cluster_verdict(5, 3, 3, 3) == ClusterVerdict::drop_too_broad);
    REQUIRE(cluster_verdict(5, 2, 3, 3) == ClusterVerdict::keep);
}

namespace {

// Planted pool: per class, `spec_clusters` tight specific blobs plus one blob
// shared by every class. Returns (X, labels, is_common flag per column).
struct PlantedPool {
    MatrixXd X;
    std::vector<int> labels;
    std::vector<char> common;
};

PlantedPool make_planted_pool(std::uint64_t seed, int C, int spec_clusters, int copies) {
    Rng rng(seed);
    const int dim = 16;
    std::vector<VectorXd> dirs;
    for (int c = 0; c < C; ++c) {
        for (int s = 0; s < spec_clusters; ++s) {
            VectorXd v = testutil::random_matrix(rng, dim, 1);
            v.normalize();
            dirs.push_back(8.0 * v);
        }
    }
    VectorXd common_dir = testutil::random_matrix(rng, dim, 1);
    common_dir.normalize();
    common_dir *= 8.0;

    const int per_class = (spec_clusters + 1) * copies;
    PlantedPool pool;
    pool.X.resize(dim, C * per_class);
    int col = 0;
    for (int c = 0; c < C; ++c) {
        for (int s = 0; s < spec_clusters; ++s) {
            for (int i = 0; i < copies; ++i, ++col) {
                pool.X.col(col) = dirs[static_cast<std::size_t>(c * spec_clusters + s)] +
                                  0.05 * testutil::random_matrix(rng, dim, 1);
                pool.labels.push_back(c);
                pool.common.push_back(0);
            }
        }
        for (int i = 0; i < copies; ++i, ++col) {
            pool.X.col(col) = common_dir + 0.05 * testutil::random_matrix(rng, dim, 1);
            pool.labels.push_back(c);
            pool.common.push_back(1);
        }
    }
    return pool;
}

}  // namespace

TEST_CASE("svm_select drops the cross-class common cluster", "[exemplar]") {
    const PlantedPool pool = make_planted_pool(123, 3, 3, 20);
    SVMSelectConfig cfg;
    cfg.S_c = 4;
    cfg.M_svm = 10;
    cfg.eps_svm = 3;
    cfg.max_rounds = 5;
    const ExemplarSet ex = svm_select(pool.X, pool.labels, cfg, 9);

    std::size_t total = 0, common_kept = 0;
    for (const auto& cls : ex.per_class) {
        for (int idx : cls) {
            ++total;
            if (pool.common[static_cast<std::size_t>(idx)]) ++common_kept;
        }
    }
    REQUIRE(total > 0);
    REQUIRE(common_kept == 0);
}

TEST_CASE("svm_select with zero rounds is the k-means passthrough", "[exemplar]") {
    const PlantedPool pool = make_planted_pool(5, 2, 2, 8);
    SVMSelectConfig cfg;
    cfg.S_c = 3;
    cfg.max_rounds = 0;
    const ExemplarSet ex = svm_select(pool.X, pool.labels, cfg, 1);
    // Everything in each class's train half is kept: half of each class.
    for (std::size_t c = 0; c < ex.per_class.size(); ++c) {
        std::size_t class_count = 0;
        for (int l : pool.labels) {
            if (l == static_cast<int>(c)) ++class_count;
        }
        REQUIRE(ex.per_class[c].size() == (class_count + 1) / 2);
    }
}

TEST_CASE("surviving clusters respect the member bounds", "[exemplar]") {
    const PlantedPool pool = make_planted_pool(31, 3, 2, 16);
    SVMSelectConfig cfg;
    cfg.S_c = 3;
    cfg.M_svm = 7;
    cfg.eps_svm = 2;
    cfg.max_rounds = 4;
    const ExemplarSet ex = svm_select(pool.X, pool.labels, cfg, 2);
    for (const auto& cls : ex.per_class) {
        // Union of clusters; each cluster contributed between eps_svm and M_svm.
        REQUIRE((cls.empty() || cls.size() >= static_cast<std::size_t>(cfg.eps_svm)));
        REQUIRE(cls.size() <= static_cast<std::size_t>(cfg.M_svm) * cfg.S_c);
    }
}
