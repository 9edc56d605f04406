#include <catch2/catch_amalgamated.hpp>

#include "ddsfl/mathkit.hpp"
#include "test_util.hpp"

using namespace ddsfl;
using Eigen::MatrixXd;
using Eigen::VectorXd;

TEST_CASE("lbfgs solves a quadratic exactly", "[mathkit]") {
    ObjectiveFn f = [](const VectorXd& t) {
        VectorXd c(2);
        c << 1.0, 2.0;
        ObjectiveResult r;
        r.value = (t - c).squaredNorm();
        r.grad = 2.0 * (t - c);
        return r;
    };
    LbfgsParams p;
    p.grad_tol = 1e-10;
    const LbfgsResult res = lbfgs_minimize(f, VectorXd::Zero(2), p);
    REQUIRE(std::abs(res.x(0) - 1.0) < 1e-6);
    REQUIRE(std::abs(res.x(1) - 2.0) < 1e-6);
    REQUIRE_FALSE(res.degraded);
}

TEST_CASE("lbfgs solves Rosenbrock from the classic start", "[mathkit]") {
    ObjectiveFn f = [](const VectorXd& t) {
        const double x = t(0), y = t(1);
        ObjectiveResult r;
        r.value = (1 - x) * (1 - x) + 100.0 * (y - x * x) * (y - x * x);
        r.grad.resize(2);
        r.grad(0) = -2.0 * (1 - x) - 400.0 * x * (y - x * x);
        r.grad(1) = 200.0 * (y - x * x);
        return r;
    };
    LbfgsParams p;
    p.max_iters = 2000;
    p.grad_tol = 1e-10;
    VectorXd x0(2);
    x0 << -1.2, 1.0;
    const LbfgsResult res = lbfgs_minimize(f, x0, p);
    REQUIRE(std::abs(res.x(0) - 1.0) < 1e-4);
    REQUIRE(std::abs(res.x(1) - 1.0) < 1e-4);
}

TEST_CASE("lbfgs returns immediately at a stationary start", "[mathkit]") {
    ObjectiveFn f = [](const VectorXd& t) {
        ObjectiveResult r;
        r.value = t.squaredNorm();
        r.grad = 2.0 * t;
        return r;
    };
    const LbfgsResult res = lbfgs_minimize(f, VectorXd::Zero(3), LbfgsParams{});
    REQUIRE(res.iters <= 1);
    REQUIRE(res.x.isZero(0));
}

TEST_CASE("lbfgs flags degraded convergence when line search cannot make progress", "[mathkit]") {
    // Deliberately inconsistent gradient: reported ascent direction, so every
    // Armijo test fails and the consecutive-failure limit trips.
    ObjectiveFn f = [](const VectorXd& t) {
        ObjectiveResult r;
        r.value = t.squaredNorm() + 1.0;
        r.grad = -2.0 * t;  // wrong sign
        return r;
    };
    VectorXd x0(2);
    x0 << 1.0, -1.0;
    LbfgsParams p;
    p.max_iters = 500;
    const LbfgsResult res = lbfgs_minimize(f, x0, p);
    REQUIRE(res.degraded);
    REQUIRE(res.x == x0);  // best point seen is the start
}

TEST_CASE("lbfgs objective is non-increasing over accepted iterates", "[mathkit]") {
    Rng rng(7);
    const MatrixXd A = testutil::random_matrix(rng, 6, 6);
    const MatrixXd Q = A.transpose() * A + MatrixXd::Identity(6, 6);
    const VectorXd b = testutil::random_matrix(rng, 6, 1);
    ObjectiveFn f = [&](const VectorXd& t) {
        ObjectiveResult r;
        r.value = 0.5 * t.dot(Q * t) - b.dot(t) + std::pow(t.norm(), 4) * 0.01;
        r.grad = Q * t - b + 0.04 * t.squaredNorm() * t;
        return r;
    };
    std::vector<double> values;
    LbfgsParams p;
    p.iteration_callback = [&](int, double v) { values.push_back(v); };
    lbfgs_minimize(f, VectorXd::Ones(6) * 3.0, p);
    REQUIRE(values.size() > 3);
    for (std::size_t i = 1; i < values.size(); ++i) REQUIRE(values[i] <= values[i - 1] + 1e-12);
}

TEST_CASE("check_gradient accepts exact gradients and flags scaled ones", "[mathkit]") {
    ObjectiveFn good = [](const VectorXd& t) {
        ObjectiveResult r;
        r.value = 3.0 * t.squaredNorm() + t(0);
        r.grad = 6.0 * t;
        r.grad(0) += 1.0;
        return r;
    };
    VectorXd theta(3);
    theta << 0.3, -1.2, 2.0;
    REQUIRE(check_gradient(good, theta, 1e-5) <= 1e-7);

    ObjectiveFn doubled = [](const VectorXd& t) {
        ObjectiveResult r;
        r.value = 3.0 * t.squaredNorm() + t(0);
        r.grad = 2.0 * (6.0 * t);
        r.grad(0) += 2.0;
        return r;
    };
    const double err = check_gradient(doubled, theta, 1e-5);
    REQUIRE(err > 0.45);
    REQUIRE(err < 0.55);

    ObjectiveFn absf = [](const VectorXd& t) {
        ObjectiveResult r;
        r.value = std::abs(t(0));
        r.grad.resize(1);
        r.grad(0) = t(0) > 0 ? 1.0 : (t(0) < 0 ? -1.0 : 0.0);
        return r;
    };
    VectorXd at_one(1);
    at_one << 1.0;
    REQUIRE(check_gradient(absf, at_one, 1e-5) <= 1e-6);

    REQUIRE_THROWS_AS(check_gradient(good, theta, 0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(check_gradient(good, theta, 0.5), std::invalid_argument);
}

TEST_CASE("kmeans recovers well-separated blobs", "[mathkit]") {
    Rng rng(11);
    const int per = 60;
    MatrixXd data(2, 2 * per);
    VectorXd m0(2), m1(2);
    m0 << -4.0, 0.0;
    m1 << 4.0, 1.0;
    for (int i = 0; i < per; ++i) {
        data.col(i) = m0 + 0.05 * testutil::random_matrix(rng, 2, 1);
        data.col(per + i) = m1 + 0.05 * testutil::random_matrix(rng, 2, 1);
    }
    const KmeansResult km = kmeans(data, 2, 30, 5);
    const double d00 = (km.centers.col(0) - m0).norm();
    const double d01 = (km.centers.col(0) - m1).norm();
    const double near0 = std::min(d00, d01);
    const double near1 = std::min((km.centers.col(1) - m0).norm(), (km.centers.col(1) - m1).norm());
    REQUIRE(near0 < 0.1);
    REQUIRE(near1 < 0.1);
    REQUIRE(std::abs(d00 - near0) < 1e-12);  // the two centers take distinct blobs
}

TEST_CASE("kmeans covers duplicated points exactly", "[mathkit]") {
    const int k = 4;
    Rng rng(3);
    MatrixXd pts = testutil::random_matrix(rng, 3, k);
    MatrixXd data(3, k * k);
    for (int i = 0; i < k * k; ++i) data.col(i) = pts.col(i % k);
    const KmeansResult km = kmeans(data, k, 20, 9);
    REQUIRE(km.sse < 1e-20);
    for (int c = 0; c < k; ++c) {
        double best = 1e9;
        for (int j = 0; j < k; ++j) best = std::min(best, (km.centers.col(c) - pts.col(j)).norm());
        REQUIRE(best < 1e-12);
    }
}

TEST_CASE("kmeans is deterministic and SSE non-increasing per Lloyd step", "[mathkit]") {
    Rng rng(23);
    const MatrixXd data = testutil::random_matrix(rng, 4, 120);
    const KmeansResult a = kmeans(data, 5, 15, 42);
    const KmeansResult b = kmeans(data, 5, 15, 42);
    REQUIRE(a.centers == b.centers);
    REQUIRE(a.assignment == b.assignment);

    double prev = std::numeric_limits<double>::infinity();
    for (int t = 0; t <= 6; ++t) {
        const KmeansResult r = kmeans(data, 5, t, 42);
        REQUIRE(r.sse <= prev + 1e-9);
        prev = r.sse;
    }

    REQUIRE_THROWS_AS(kmeans(data.leftCols(3), 5, 5, 1), DataError);
}

TEST_CASE("pca recovers the dominant direction of collinear data", "[mathkit]") {
    Rng rng(17);
    MatrixXd data(2, 50);
    for (int i = 0; i < 50; ++i) {
        const double t = rng.uniform(-2.0, 2.0);
        data.col(i) << t, 2.0 * t;
    }
    const PcaModel m = pca_fit(data, 2);
    VectorXd dir(2);
    dir << 1.0, 2.0;
    dir.normalize();
    REQUIRE(std::abs(std::abs(m.components.row(0).dot(dir)) - 1.0) < 1e-9);
    REQUIRE(m.eigenvalues(1) < 1e-12);
}

TEST_CASE("pca full-rank transform preserves distances and centers the mean", "[mathkit]") {
    Rng rng(29);
    const MatrixXd data = testutil::random_matrix(rng, 6, 10);
    const PcaModel m = pca_fit(data, 6);

    const VectorXd a = data.col(0), b = data.col(3);
    const double before = (a - b).norm();
    const double after = (pca_transform(m, a) - pca_transform(m, b)).norm();
    REQUIRE(std::abs(before - after) < 1e-8);

    REQUIRE(pca_transform(m, m.mean).norm() < 1e-10);

    const MatrixXd gram = m.components * m.components.transpose();
    REQUIRE((gram - MatrixXd::Identity(6, 6)).cwiseAbs().maxCoeff() < 1e-6);

    REQUIRE_THROWS_AS(pca_fit(data, 7), DataError);
}

TEST_CASE("pca reconstruction error equals the discarded eigenvalue mass", "[mathkit]") {
    Rng rng(31);
    const MatrixXd data = testutil::random_matrix(rng, 6, 10);
    const int k = 3;
    const PcaModel m = pca_fit(data, k);

    double err = 0.0;
    for (Eigen::Index i = 0; i < data.cols(); ++i) {
        const VectorXd z = pca_transform(m, data.col(i));
        const VectorXd rec = m.components.transpose() * z + m.mean;
        err += (data.col(i) - rec).squaredNorm();
    }
    err /= static_cast<double>(data.cols());

    // Oracle eigenvalues via SVD of the centered data (a different algorithm).
    MatrixXd centered = data.colwise() - data.rowwise().mean().eval();
    Eigen::JacobiSVD<MatrixXd> svd(centered);
    double discarded = 0.0;
    for (int i = k; i < 6; ++i) {
        discarded += svd.singularValues()(i) * svd.singularValues()(i) / static_cast<double>(data.cols());
    }
    REQUIRE(std::abs(err - discarded) < 1e-6);
}
