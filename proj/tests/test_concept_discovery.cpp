#include <doctest.h>

#include <algorithm>
#include <random>

#include <opencv2/imgcodecs.hpp>

#include "evai/concept_discovery.hpp"
#include "evai/errors.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace evai;

namespace {

ConceptScoreMap single_channel_map(std::size_t h, std::size_t w, const std::vector<double>& values) {
    ConceptScoreMap m;
    m.image_id = "m";
    m.h = h;
    m.w = w;
    m.k = 1;
    m.scores = values;
    return m;
}

}  // namespace

TEST_CASE("rank-1 NMF is recovered exactly") {
    Rng rng(2);
    Eigen::VectorXd s = test::uniform_matrix(20, 1, rng, 0.1, 2.0);
    Eigen::RowVectorXd p = test::uniform_matrix(1, 6, rng, 0.1, 2.0);
    Eigen::MatrixXd v = s * p;
    auto f = factorize_nmf(v, {1, 2000, 1e-12, 4});
    CHECK(f.relative_error(v) < 1e-6);
}

TEST_CASE("NMF recovers a planted rank-4 product") {
    Rng rng(11);
    Eigen::MatrixXd s0 = test::uniform_matrix(100, 4, rng);
    Eigen::MatrixXd p0 = test::uniform_matrix(4, 16, rng);
    Eigen::MatrixXd v = s0 * p0;
    auto f = factorize_nmf(v, {4, 500, 0.0, 0});
    // Oracle: the reconstruction error recomputed from scratch.
    double num = 0, den = 0;
    const Eigen::MatrixXd rec = f.coefficients * f.basis;
    for (Eigen::Index i = 0; i < v.rows(); ++i)
        for (Eigen::Index j = 0; j < v.cols(); ++j) {
            num += (v(i, j) - rec(i, j)) * (v(i, j) - rec(i, j));
            den += v(i, j) * v(i, j);
        }
    CHECK(std::sqrt(num / den) < 1e-2);
    CHECK(f.relative_error(v) == doctest::Approx(std::sqrt(num / den)));
}

TEST_CASE("NMF objective never increases and factors stay non-negative") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        Rng rng(100 + seed);
        Eigen::MatrixXd v = test::uniform_matrix(30, 12, rng);
        v(0, 0) = 0.0;
        auto f = factorize_nmf(v, {5, 150, 0.0, seed});
        CHECK(f.objective.size() == static_cast<std::size_t>(f.iterations) + 1);
        for (std::size_t i = 1; i < f.objective.size(); ++i) CHECK(f.objective[i] <= f.objective[i - 1] + 1e-10);
        CHECK((f.coefficients.array() >= 0.0).all());
        CHECK((f.basis.array() >= 0.0).all());
        const double direct = (v - f.coefficients * f.basis).squaredNorm();
        CHECK(f.objective.back() == doctest::Approx(direct));
    }
}

TEST_CASE("NMF is deterministic and validates inputs") {
    Rng rng(5);
    Eigen::MatrixXd v = test::uniform_matrix(10, 6, rng);
    auto a = factorize_nmf(v, {3, 50, 1e-5, 9});
    auto b = factorize_nmf(v, {3, 50, 1e-5, 9});
    CHECK(a.basis == b.basis);
    CHECK(a.coefficients == b.coefficients);
    CHECK(factorize_nmf(v, {3, 400, 1e-2, 9}).iterations < 400);

    v(2, 3) = -0.5;
    CHECK_THROWS_AS(factorize_nmf(v, {3, 50, 1e-5, 9}), DomainError);
    v(2, 3) = 0.5;
    CHECK_THROWS_AS(factorize_nmf(v, {7, 50, 1e-5, 9}), ConfigError);
    CHECK_THROWS_AS(factorize_nmf(v, {3, 0, 1e-5, 9}), ConfigError);
}

TEST_CASE("zero input factorizes to zero") {
    Eigen::MatrixXd v = Eigen::MatrixXd::Zero(5, 4);
    auto f = factorize_nmf(v, {2, 10, 1e-5, 0});
    CHECK((f.coefficients * f.basis).norm() < 1e-12);
}

TEST_CASE("fit_nmf on a feature batch") {
    Rng rng(8);
    FeatureBatch b;
    b.n = 3;
    b.h = 2;
    b.w = 2;
    b.c = 10;
    for (std::size_t i = 0; i < 3 * 4 * 10; ++i) b.values.push_back(static_cast<float>(rng.uniform()));
    b.image_ids = {"x", "y", "z"};
    b.backbone_id = "bb";
    auto fit = fit_nmf(b, {8, 100, 1e-5, 1});
    CHECK(fit.basis.k() == 8);
    CHECK(fit.basis.kind == BasisKind::nmf);
    CHECK(fit.basis.display_name(0) == "Feature 1");
    CHECK(fit.basis.display_name(7) == "Feature 8");
    CHECK(fit.basis.backbone_id == "bb");
    REQUIRE(fit.maps.size() == 3);
    CHECK(fit.maps[1].image_id == "y");
    CHECK(fit.maps[1].at(1, 0, 5) == fit.factors.coefficients(4 + 2, 5));
    CHECK_NOTHROW(fit.basis.validate());
}

TEST_CASE("PCA along the x axis") {
    Eigen::MatrixXd pts(5, 2);
    pts << -2, 0, -1, 0, 0, 0, 1, 0, 2, 0;
    auto pca = principal_components(pts, 1);
    CHECK(std::abs(pca.directions(0, 0)) == doctest::Approx(1.0));
    CHECK(pca.directions(0, 1) == doctest::Approx(0.0));
    CHECK(pca.explained_variance(0) == doctest::Approx(2.0));
}

TEST_CASE("PCA matches a Jacobi eigenvalue oracle") {
    Rng rng(21);
    Eigen::MatrixXd x = test::normal_matrix(200, 10, rng);
    for (Eigen::Index j = 0; j < 10; ++j) x.col(j) *= 1.0 + j;
    auto pca = principal_components(x, 10);
    const Eigen::MatrixXd gram = pca.directions * pca.directions.transpose();
    CHECK((gram - Eigen::MatrixXd::Identity(10, 10)).cwiseAbs().maxCoeff() < 1e-8);
    const auto eig = oracle::jacobi_eigenvalues(oracle::covariance(test::to_std(x)));
    for (Eigen::Index i = 0; i < 10; ++i) {
        CHECK(std::abs(pca.explained_variance(i) - eig[static_cast<std::size_t>(i)]) < 1e-6);
        if (i > 0) CHECK(pca.explained_variance(i) <= pca.explained_variance(i - 1));
    }
    // Variance of the projected training data equals the eigenvalues.
    const Eigen::MatrixXd z = (x.rowwise() - pca.mean.transpose()) * pca.directions.transpose();
    for (Eigen::Index i = 0; i < 10; ++i)
        CHECK(std::abs(z.col(i).squaredNorm() / 200.0 - eig[static_cast<std::size_t>(i)]) < 1e-6);
    for (Eigen::Index i = 0; i < 10; ++i) {
        Eigen::Index pivot;
        pca.directions.row(i).cwiseAbs().maxCoeff(&pivot);
        CHECK(pca.directions(i, pivot) > 0);
    }
}

TEST_CASE("fit_pca stores the mean and rejects bad k") {
    Rng rng(4);
    auto b = test::batch_from_rows(test::normal_matrix(30, 6, rng));
    auto basis = fit_pca(b, 3);
    CHECK(basis.kind == BasisKind::pca);
    CHECK(basis.mean.size() == 6);
    CHECK_NOTHROW(basis.validate());
    CHECK_THROWS_AS(fit_pca(b, 7), ConfigError);

    // The centering mean itself projects to zero.
    auto mean_batch = test::batch_from_rows(basis.mean.transpose().cast<float>().cast<double>());
    ConceptBasis exact = basis;
    exact.mean = exact.mean.cast<float>().cast<double>();
    auto maps = transform_scores(mean_batch, exact);
    for (double v : maps[0].scores) CHECK(std::abs(v) < 1e-12);
}

TEST_CASE("sweep range of k is accepted") {
    Rng rng(6);
    auto b = test::batch_from_rows(test::uniform_matrix(60, 48, rng));
    for (Eigen::Index k = 5; k <= 40; k += 5) {
        CHECK(fit_pca(b, k).k() == k);
        CHECK(fit_nmf(b, {k, 5, 1e-5, 0}).basis.k() == k);
    }
}

TEST_CASE("NMF transform of a scaled basis row") {
    Rng rng(13);
    ConceptBasis basis;
    basis.kind = BasisKind::nmf;
    basis.directions = test::uniform_matrix(4, 12, rng);
    for (Eigen::Index j = 0; j < 4; ++j) {
        const Eigen::MatrixXd row = 2.0 * basis.directions.row(j);
        auto s = nmf_project(row, basis.directions);
        for (Eigen::Index i = 0; i < 4; ++i) CHECK(std::abs(s(0, i) - (i == j ? 2.0 : 0.0)) < 1e-3);
    }
    auto zero = nmf_project(Eigen::MatrixXd::Zero(3, 12), basis.directions);
    CHECK(zero.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("NMF transform never does worse than zero coefficients") {
    Rng rng(17);
    const Eigen::MatrixXd p = test::uniform_matrix(5, 9, rng);
    const Eigen::MatrixXd v = test::uniform_matrix(40, 9, rng);
    auto s = nmf_project(v, p);
    CHECK((s.array() >= 0.0).all());
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
        const double with = (v.row(r) - s.row(r) * p).squaredNorm();
        CHECK(with <= v.row(r).squaredNorm() + 1e-12);
    }
    // Rows are independent of their batch companions.
    auto single = nmf_project(v.row(7), p);
    CHECK((single.row(0) - s.row(7)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("transform_scores checks channels and handles each kind") {
    Rng rng(19);
    auto b = test::batch_from_rows(test::uniform_matrix(4, 6, rng));
    ConceptBasis basis;
    basis.kind = BasisKind::nmf;
    basis.directions = test::uniform_matrix(2, 5, rng);
    CHECK_THROWS_AS(transform_scores(b, basis), ShapeError);

    basis.kind = BasisKind::cav;
    basis.directions = test::normal_matrix(3, 6, rng);
    auto maps = transform_scores(b, basis);
    const Eigen::MatrixXd v = flatten_locations(b);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            const auto row = basis.directions.row(static_cast<Eigen::Index>(j));
            CHECK(maps[i].at(0, 0, j) ==
                  doctest::Approx(v.row(static_cast<Eigen::Index>(i)).dot(row) / row.squaredNorm()));
        }
}

TEST_CASE("pooling") {
    ConceptScoreMap m;
    m.h = 2;
    m.w = 2;
    m.k = 2;
    m.scores = {0, 5, 0, 5, 0, 5, 4, 5};
    auto mean = pool_scores(m, PoolMode::mean);
    auto max = pool_scores(m, PoolMode::max);
    CHECK(mean.scores(0) == 1.0);
    CHECK(max.scores(0) == 4.0);
    CHECK(mean.scores(1) == 5.0);
    CHECK(max.scores(1) == 5.0);

    ConceptScoreMap one;
    one.h = one.w = 1;
    one.k = 3;
    one.scores = {-1, 2, 7};
    CHECK(test::to_std(pool_scores(one).scores) == one.scores);
    CHECK(test::to_std(pool_scores(one, PoolMode::max).scores) == one.scores);
}

TEST_CASE("reconstruction adds the PCA mean back") {
    ConceptBasis basis;
    basis.kind = BasisKind::pca;
    basis.directions = Eigen::MatrixXd::Identity(2, 3);
    basis.mean = Eigen::Vector3d(1, 2, 3);
    ConceptScoreVector s{"x", Eigen::Vector2d(1, 1)};
    CHECK(reconstruct_features(s, basis) == Eigen::Vector3d(2, 3, 3));
}

TEST_CASE("bilinear resize agrees with direct evaluation") {
    Rng rng(23);
    std::vector<double> grid(7 * 5);
    for (auto& g : grid) g = rng.uniform();
    auto up = bilinear_resize(grid, 7, 5, 30, 19);
    for (int y = 0; y < 30; ++y)
        for (int x = 0; x < 19; ++x)
            CHECK(up[static_cast<std::size_t>(y * 19 + x)] ==
                  doctest::Approx(oracle::bilinear_at(grid, 7, 5, 30, 19, y, x)).epsilon(1e-12));
    auto same = bilinear_resize(grid, 7, 5, 7, 5);
    CHECK(same == grid);
}

TEST_CASE("heatmap of a single active cell") {
    std::vector<double> grid(49, 0.0);
    grid[2 * 7 + 4] = 3.0;  // row 2, column 4
    auto a = concept_heatmap(single_channel_map(7, 7, grid), 0, 224, 224);
    CHECK(a.width == 224);
    CHECK(!a.empty());
    // Cell (2,4) covers x ∈ [128,160), y ∈ [64,96) at 32 px per cell.
    std::vector<double> direct(224 * 224);
    for (int y = 0; y < 224; ++y)
        for (int x = 0; x < 224; ++x)
            direct[static_cast<std::size_t>(y * 224 + x)] = oracle::bilinear_at(grid, 7, 7, 224, 224, y, x);
    const double peak = *std::max_element(direct.begin(), direct.end());
    std::size_t inside = 0, total = 0;
    for (int y = 0; y < 224; ++y)
        for (int x = 0; x < 224; ++x) {
            const auto i = static_cast<std::size_t>(y * 224 + x);
            const double expected = direct[i] / peak;
            CHECK(a.heat[i] == doctest::Approx(expected).epsilon(1e-6));
            CHECK(a.mask[i] == (expected >= 0.5 ? 1 : 0));
            if (a.mask[i]) {
                ++total;
                if (x >= 128 && x < 160 && y >= 64 && y < 96) ++inside;
            }
        }
    CHECK(total > 0);
    CHECK(inside == total);
    for (auto [x, y] : a.polygon) {
        CHECK(x >= 128);
        CHECK(x < 160);
        CHECK(y >= 64);
        CHECK(y < 96);
    }
}

TEST_CASE("heatmap picks the largest component") {
    std::vector<double> grid(36, 0.0);
    grid[0] = 1.0;                     // small blob, top-left
    grid[3 * 6 + 3] = grid[3 * 6 + 4] = grid[4 * 6 + 3] = grid[4 * 6 + 4] = 1.0;  // big blob
    auto a = concept_heatmap(single_channel_map(6, 6, grid), 0, 60, 60);
    REQUIRE(!a.empty());
    for (auto [x, y] : a.polygon) {
        CHECK(x >= 25);
        CHECK(y >= 25);
    }
}

TEST_CASE("degenerate heatmaps") {
    auto zero = concept_heatmap(single_channel_map(3, 3, std::vector<double>(9, 0.0)), 0, 10, 10);
    CHECK(zero.empty());
    CHECK(std::all_of(zero.mask.begin(), zero.mask.end(), [](auto v) { return v == 0; }));
    auto constant = concept_heatmap(single_channel_map(3, 3, std::vector<double>(9, 2.5)), 0, 10, 10);
    CHECK(constant.empty());
    CHECK(std::all_of(constant.heat.begin(), constant.heat.end(), [](auto v) { return v == 0.0f; }));
    CHECK_THROWS_AS(concept_heatmap(single_channel_map(3, 3, std::vector<double>(9, 0.0)), 1, 10, 10),
                    IndexError);
}

TEST_CASE("mask PNG decodes back to the mask") {
    std::vector<double> grid(16, 0.0);
    grid[5] = 1.0;
    auto a = concept_heatmap(single_channel_map(4, 4, grid), 0, 32, 32);
    auto png = encode_mask_png(a);
    cv::Mat decoded = cv::imdecode(png, cv::IMREAD_GRAYSCALE);
    REQUIRE(decoded.rows == 32);
    for (int i = 0; i < 32 * 32; ++i) CHECK(decoded.data[i] == (a.mask[static_cast<std::size_t>(i)] ? 255 : 0));
}

TEST_CASE("top prototypes") {
    auto vec = [](std::string id, double v) { return ConceptScoreVector{std::move(id), Eigen::VectorXd::Constant(1, v)}; };
    std::vector<ConceptScoreVector> vs{vec("a", 3), vec("b", 1), vec("c", 2)};
    CHECK(top_prototypes(vs, 0, 2) == std::vector<std::string>{"a", "c"});
    CHECK(top_prototypes(vs, 0, 10) == std::vector<std::string>{"a", "c", "b"});

    std::vector<ConceptScoreVector> ties{vec("z", 1), vec("m", 1), vec("q", 2), vec("a", 1)};
    const std::vector<std::string> expected{"q", "a", "m", "z"};
    CHECK(top_prototypes(ties, 0, 4) == expected);
    std::mt19937 shuffle(3);
    for (int i = 0; i < 10; ++i) {
        std::shuffle(ties.begin(), ties.end(), shuffle);
        CHECK(top_prototypes(ties, 0, 4) == expected);
    }
    CHECK(top_prototypes(ties, 0).size() == 4);
    CHECK_THROWS_AS(top_prototypes(ties, 1, 2), IndexError);
}
