#include <doctest.h>

#include "evai/errors.hpp"
#include "evai/linear_head.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace evai;

namespace {

std::vector<std::string> names(int n) {
    std::vector<std::string> out;
    for (int i = 0; i < n; ++i) out.push_back("c" + std::to_string(i));
    return out;
}

}  // namespace

TEST_CASE("ridge weights match a direct linear solve") {
    Rng rng(1);
    const Eigen::MatrixXd x = test::normal_matrix(50, 5, rng);
    std::vector<int> labels;
    for (int i = 0; i < 50; ++i) labels.push_back(static_cast<int>(rng.below(3)));
    auto head = fit_ridge(x, labels, names(3), 0.1);

    // Oracle: build X̃ᵀX̃ + λD and X̃ᵀY by hand, then Gauss-Jordan.
    oracle::Matrix a = oracle::zeros(6, 6), b = oracle::zeros(6, 3);
    for (int i = 0; i < 50; ++i) {
        std::vector<double> row(6, 1.0);
        for (int j = 0; j < 5; ++j) row[static_cast<std::size_t>(j)] = x(i, j);
        for (std::size_t p = 0; p < 6; ++p) {
            for (std::size_t q = 0; q < 6; ++q) a[p][q] += row[p] * row[q];
            b[p][static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])] += row[p];
        }
    }
    for (std::size_t p = 0; p < 5; ++p) a[p][p] += 0.1;
    const auto w = oracle::solve(a, b);
    const auto coef = stacked_coefficients(head);
    for (std::size_t p = 0; p < 6; ++p)
        for (std::size_t c = 0; c < 3; ++c)
            CHECK(std::abs(coef(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(c)) - w[p][c]) < 1e-6);

    const auto sys = ridge_normal_equations(x, labels, 3, 0.1);
    CHECK((sys.lhs * coef - sys.rhs).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("separable scores are fit perfectly") {
    Eigen::MatrixXd x = Eigen::MatrixXd::Zero(12, 3);
    std::vector<int> labels;
    for (int i = 0; i < 12; ++i) {
        x(i, i % 3) = 1.0;
        labels.push_back(i % 3);
    }
    auto head = fit_ridge(x, labels, names(3), 1e-6);
    for (int i = 0; i < 12; ++i) CHECK(apply_head(head, x.row(i).transpose()) == labels[static_cast<std::size_t>(i)]);
    auto again = fit_ridge(x, labels, names(3), 1e-6);
    CHECK(again.weights == head.weights);
}

TEST_CASE("large lambda shrinks weights to zero") {
    Rng rng(2);
    const Eigen::MatrixXd x = test::normal_matrix(40, 4, rng);
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) labels.push_back(i < 25 ? 1 : (i < 32 ? 0 : 2));
    auto head = fit_ridge(x, labels, names(3), 1e12);
    CHECK(head.weights.cwiseAbs().maxCoeff() < 1e-9);
    // The unpenalized bias converges to the class frequencies.
    CHECK(head.bias(1) == doctest::Approx(25.0 / 40).epsilon(1e-6));
    for (int i = 0; i < 40; ++i) CHECK(apply_head(head, x.row(i).transpose()) == 1);
}

TEST_CASE("singular system without regularization") {
    Eigen::MatrixXd x(4, 2);
    x << 1, 2, 2, 4, 3, 6, 4, 8;
    std::vector<int> labels{0, 1, 0, 1};
    try {
        fit_ridge(x, labels, names(2), 0.0);
        FAIL("expected SingularError");
    } catch (const SingularError& e) {
        CHECK(std::string(e.what()).find("lambda > 0") != std::string::npos);
    }
    CHECK_NOTHROW(fit_ridge(x, labels, names(2), 0.5));
    CHECK_THROWS_AS(fit_ridge(x, labels, names(2), -1.0), ConfigError);
}

TEST_CASE("identity head and argmax ties") {
    LinearHead head;
    head.weights = Eigen::MatrixXd::Identity(5, 5);
    head.bias = Eigen::VectorXd::Zero(5);
    head.hypothesis_names = names(5);
    Eigen::VectorXd e3 = Eigen::VectorXd::Zero(5);
    e3(3) = 1.0;
    CHECK(apply_head(head, e3) == 3);
    CHECK(apply_head(head, Eigen::VectorXd::Ones(5)) == 0);
    CHECK_THROWS_AS(apply_head(head, Eigen::VectorXd::Ones(4)), ShapeError);
}

TEST_CASE("original head on lossless reconstruction") {
    // With k = C and an exact factorization the reconstructed pooled features
    // equal the originals, so the head's decision is unchanged.
    Rng rng(3);
    LinearHead head;
    head.kind = HeadKind::original;
    head.weights = test::normal_matrix(7, 6, rng);
    head.bias = test::normal_matrix(7, 1, rng);
    head.hypothesis_names = names(7);
    const Eigen::MatrixXd p = test::uniform_matrix(6, 6, rng, 0.1, 1.0);
    for (int t = 0; t < 20; ++t) {
        const Eigen::VectorXd s = test::uniform_matrix(6, 1, rng);
        const Eigen::VectorXd features = p.transpose() * s;
        const Eigen::VectorXd rebuilt = p.transpose() * p.transpose().fullPivLu().solve(features);
        CHECK(apply_head(head, rebuilt) == apply_head(head, features));
    }
}

TEST_CASE("linear head JSON") {
    Rng rng(4);
    LinearHead head;
    head.kind = HeadKind::original;
    head.weights = test::normal_matrix(3, 4, rng);
    head.bias = test::normal_matrix(3, 1, rng);
    head.hypothesis_names = names(3);
    auto back = linear_head_from_json(nlohmann::json::parse(to_json(head).dump()));
    CHECK(back.kind == HeadKind::original);
    CHECK(back.weights == head.weights);
    CHECK(back.bias == head.bias);
    auto j = to_json(head);
    j["bias"].erase(0);
    CHECK_THROWS_AS(linear_head_from_json(j), IntegrityError);
}
