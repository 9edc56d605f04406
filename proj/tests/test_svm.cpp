#include <catch2/catch_amalgamated.hpp>

#include "ddsfl/mathkit.hpp"
#include "ddsfl/svm.hpp"
#include "test_util.hpp"

using namespace ddsfl;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST_CASE("score and fires semantics", "[svm]") {
    LinearSvmModel m;
    m.w.resize(2);
    m.w << 1.0, 0.0;
    m.b = 0.0;
    VectorXd x(2);
    x << -0.5, 9.0;
    REQUIRE(svm_score(m, x) == -0.5);
    REQUIRE(svm_fires(m, x));

    // Score exactly -1 does not fire: the threshold is strict.
    VectorXd at(2);
    at << -1.0, 0.0;
    REQUIRE(svm_score(m, at) == -1.0);
    REQUIRE_FALSE(svm_fires(m, at));

    LinearSvmModel never;
    never.w = VectorXd::Zero(2);
    never.b = -2.0;
    REQUIRE_FALSE(svm_fires(never, x));

    VectorXd bad(3);
    REQUIRE_THROWS_AS(svm_score(m, bad), DimensionError);
}

TEST_CASE("binary training separates a separable 1-D set", "[svm]") {
    MatrixXd pos(1, 2), neg(1, 2);
    pos << 2.0, 3.0;
    neg << -2.0, -3.0;
    const LinearSvmModel m = train_binary(pos, neg, 1e-3, 200, 1);
    for (int i = 0; i < 2; ++i) {
        REQUIRE(svm_score(m, pos.col(i)) > 0.0);
        REQUIRE(svm_score(m, neg.col(i)) < 0.0);
    }
}

TEST_CASE("binary training survives identical classes", "[svm]") {
    Rng rng(5);
    const MatrixXd data = testutil::random_matrix(rng, 3, 20);
    const LinearSvmModel m = train_binary(data, data, 1e-2, 30, 2);
    REQUIRE(m.w.allFinite());
    // Every point appears once per label, so training accuracy is 0.5 exactly.
    int correct = 0;
    for (Eigen::Index i = 0; i < data.cols(); ++i) {
        const double s = svm_score(m, data.col(i));
        if (s > 0) ++correct;   // as the positive copy
        if (s <= 0) ++correct;  // as the negative copy
    }
    REQUIRE(correct == static_cast<int>(data.cols()));
}

TEST_CASE("binary training is deterministic and rejects non-finite input", "[svm]") {
    Rng rng(6);
    const MatrixXd pos = testutil::random_matrix(rng, 4, 15);
    const MatrixXd neg = testutil::random_matrix(rng, 4, 17).array() + 3.0;
    const LinearSvmModel a = train_binary(pos, neg, 1e-3, 50, 7);
    const LinearSvmModel b = train_binary(pos, neg, 1e-3, 50, 7);
    REQUIRE(a.w == b.w);
    REQUIRE(a.b == b.b);

    MatrixXd nan_pos = pos;
    nan_pos(0, 0) = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_AS(train_binary(nan_pos, neg, 1e-3, 10, 7), NumericError);
}

TEST_CASE("pegasos tail objective matches an lbfgs smooth-hinge oracle within 10%", "[svm]") {
    // 50-point separable, balanced set.
    Rng rng(21);
    const int per = 25;
    MatrixXd pos(2, per), neg(2, per);
    for (int i = 0; i < per; ++i) {
        pos.col(i) = testutil::random_matrix(rng, 2, 1) * 0.4;
        pos(0, i) += 2.0;
        neg.col(i) = testutil::random_matrix(rng, 2, 1) * 0.4;
        neg(0, i) -= 2.0;
    }
    MatrixXd all(2, 2 * per);
    all << pos, neg;
    std::vector<int> y(static_cast<std::size_t>(2 * per), 1);
    for (int i = per; i < 2 * per; ++i) y[static_cast<std::size_t>(i)] = -1;

    const double lambda = 0.1;

    // Library model: average the true hinge objective over the last 10% of iterates.
    double tail_sum = 0.0;
    std::int64_t tail_count = 0;
    const int epochs = 4000;
    const std::int64_t total = static_cast<std::int64_t>(epochs) * 2 * per;
    train_binary(pos, neg, lambda, epochs, 3, [&](std::int64_t t, const LinearSvmModel& m) {
        if (t > total - total / 10) {
            tail_sum += svm_objective(m, all, y);
            ++tail_count;
        }
    });
    const double pegasos_obj = tail_sum / static_cast<double>(tail_count);

    // Oracle: minimize the quadratically smoothed hinge with L-BFGS.
    const double mu = 1e-3;
    ObjectiveFn f = [&](const VectorXd& t) {
        const VectorXd w = t.head(2);
        const double b = t(2);
        ObjectiveResult r;
        r.value = 0.5 * lambda * (w.squaredNorm() + b * b);
        r.grad = VectorXd::Zero(3);
        r.grad.head(2) = lambda * w;
        r.grad(2) = lambda * b;
        for (Eigen::Index i = 0; i < all.cols(); ++i) {
            const double yi = y[static_cast<std::size_t>(i)];
            const double m = yi * (w.dot(all.col(i)) + b);
            double dv = 0.0;
            if (m >= 1.0) {
                continue;
            } else if (m <= 1.0 - mu) {
                r.value += (1.0 - m - mu / 2) / all.cols();
                dv = -1.0 / all.cols();
            } else {
                r.value += (1.0 - m) * (1.0 - m) / (2.0 * mu) / all.cols();
                dv = -(1.0 - m) / mu / all.cols();
            }
            r.grad.head(2) += dv * yi * all.col(i);
            r.grad(2) += dv * yi;
        }
        return r;
    };
    LbfgsParams p;
    p.max_iters = 500;
    p.grad_tol = 1e-9;
    const LbfgsResult res = lbfgs_minimize(f, VectorXd::Zero(3), p);
    LinearSvmModel opt;
    opt.w = res.x.head(2);
    opt.b = res.x(2);
    opt.lambda_reg = lambda;
    const double oracle_obj = svm_objective(opt, all, y);

    REQUIRE(pegasos_obj <= 1.10 * oracle_obj);
    REQUIRE(pegasos_obj >= 0.90 * oracle_obj);
}

TEST_CASE("one-vs-rest separates three blobs and breaks ties low", "[svm]") {
    Rng rng(31);
    const int per = 20;
    MatrixXd data(2, 3 * per);
    std::vector<int> labels(static_cast<std::size_t>(3 * per));
    const double cx[3] = {0.0, 6.0, 0.0};
    const double cy[3] = {0.0, 0.0, 6.0};
    for (int c = 0; c < 3; ++c) {
        for (int i = 0; i < per; ++i) {
            data.col(c * per + i) = testutil::random_matrix(rng, 2, 1) * 0.2;
            data(0, c * per + i) += cx[c];
            data(1, c * per + i) += cy[c];
            labels[static_cast<std::size_t>(c * per + i)] = c;
        }
    }
    const OvrModel m = train_ovr(data, labels, 3, 1e-3, 120, 11);
    int correct = 0;
    for (Eigen::Index i = 0; i < data.cols(); ++i) {
        if (ovr_predict(m, data.col(i)) == labels[static_cast<std::size_t>(i)]) ++correct;
    }
    REQUIRE(correct == 3 * per);

    // Identical models for every class force the tie rule.
    OvrModel tie;
    tie.models.resize(3);
    for (auto& t : tie.models) {
        t.w = Eigen::VectorXd::Zero(2);
        t.b = 0.5;
    }
    REQUIRE(ovr_predict(tie, data.col(0)) == 0);

    OvrModel single;
    single.models.resize(1);
    single.models[0].w = Eigen::VectorXd::Zero(2);
    REQUIRE(ovr_predict(single, data.col(0)) == 0);

    std::vector<int> missing = labels;
    for (auto& l : missing) {
        if (l == 2) l = 1;
    }
    REQUIRE_THROWS_AS(train_ovr(data, missing, 3, 1e-3, 5, 1), DataError);
}
