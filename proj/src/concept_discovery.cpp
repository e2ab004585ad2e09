#include "evai/concept_discovery.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "evai/errors.hpp"
#include "evai/rng.hpp"

namespace evai {
namespace {

void check_nonnegative(const Eigen::MatrixXd& v) {
    for (Eigen::Index r = 0; r < v.rows(); ++r)
        for (Eigen::Index c = 0; c < v.cols(); ++c)
            if (v(r, c) < 0.0)
                throw DomainError("NMF needs non-negative features; entry (" + std::to_string(r) +
                                  ", " + std::to_string(c) + ") is " + std::to_string(v(r, c)));
}

// In-place multiplicative update x ← x ∘ num / den. Entries with a zero
// denominator do not influence the objective and are left unchanged.
void multiplicative_update(Eigen::MatrixXd& x, const Eigen::MatrixXd& num, const Eigen::MatrixXd& den) {
    for (Eigen::Index c = 0; c < x.cols(); ++c)
        for (Eigen::Index r = 0; r < x.rows(); ++r) {
            const double d = den(r, c);
            if (d > 0.0) x(r, c) *= num(r, c) / d;
        }
}

std::vector<ConceptScoreMap> split_maps(const FeatureBatch& features, const Eigen::MatrixXd& scores) {
    const auto locations = features.h * features.w;
    const auto k = static_cast<std::size_t>(scores.cols());
    std::vector<ConceptScoreMap> maps(features.n);
    for (std::size_t i = 0; i < features.n; ++i) {
        auto& m = maps[i];
        m.image_id = i < features.image_ids.size() ? features.image_ids[i] : std::string{};
        m.h = features.h;
        m.w = features.w;
        m.k = k;
        m.scores.resize(locations * k);
        for (std::size_t loc = 0; loc < locations; ++loc)
            for (std::size_t j = 0; j < k; ++j)
                m.scores[loc * k + j] =
                    scores(static_cast<Eigen::Index>(i * locations + loc), static_cast<Eigen::Index>(j));
    }
    return maps;
}

}  // namespace

double NmfFactors::relative_error(const Eigen::MatrixXd& v) const {
    const double norm = v.norm();
    if (norm == 0.0) return (coefficients * basis).norm() == 0.0 ? 0.0 : 1.0;
    return (v - coefficients * basis).norm() / norm;
}

NmfFactors factorize_nmf(const Eigen::MatrixXd& v, const NmfOptions& options) {
    if (options.k < 1) throw ConfigError("NMF needs k >= 1");
    if (options.k > v.cols())
        throw ConfigError("NMF k = " + std::to_string(options.k) + " exceeds channel count " +
                          std::to_string(v.cols()));
    if (options.iters < 1) throw ConfigError("NMF needs iters >= 1");
    if (options.inner_updates < 1) throw ConfigError("NMF needs inner_updates >= 1");
    if (v.rows() < 1) throw ShapeError("NMF input has no rows");
    check_nonnegative(v);

    Rng rng(options.seed);
    NmfFactors f;
    f.coefficients.resize(v.rows(), options.k);
    f.basis.resize(options.k, v.cols());
    for (Eigen::Index r = 0; r < f.coefficients.rows(); ++r)
        for (Eigen::Index c = 0; c < f.coefficients.cols(); ++c) f.coefficients(r, c) = rng.uniform_open_closed();
    for (Eigen::Index r = 0; r < f.basis.rows(); ++r)
        for (Eigen::Index c = 0; c < f.basis.cols(); ++c) f.basis(r, c) = rng.uniform_open_closed();

    const double v_norm = v.norm();
    f.objective.push_back((v - f.coefficients * f.basis).squaredNorm());
    for (int it = 0; it < options.iters; ++it) {
        {
            const Eigen::MatrixXd num = f.coefficients.transpose() * v;
            const Eigen::MatrixXd gram = f.coefficients.transpose() * f.coefficients;
            for (int j = 0; j < options.inner_updates; ++j)
                multiplicative_update(f.basis, num, gram * f.basis);
        }
        {
            const Eigen::MatrixXd num = v * f.basis.transpose();
            const Eigen::MatrixXd gram = f.basis * f.basis.transpose();
            for (int j = 0; j < options.inner_updates; ++j)
                multiplicative_update(f.coefficients, num, f.coefficients * gram);
        }
        f.objective.push_back((v - f.coefficients * f.basis).squaredNorm());
        f.iterations = it + 1;

        if (v_norm == 0.0) break;
        const double prev = std::sqrt(f.objective[f.objective.size() - 2]);
        const double curr = std::sqrt(f.objective.back());
        if (prev == 0.0 || (prev - curr) / prev < options.tol) break;
    }
    return f;
}

NmfFit fit_nmf(const FeatureBatch& features, const NmfOptions& options) {
    features.validate();
    const Eigen::MatrixXd v = flatten_locations(features);
    NmfFit fit;
    fit.factors = factorize_nmf(v, options);
    fit.basis.kind = BasisKind::nmf;
    fit.basis.directions = fit.factors.basis;
    fit.basis.backbone_id = features.backbone_id;
    fit.basis.config = {{"reducer", "nmf"},
                        {"k", options.k},
                        {"iters", options.iters},
                        {"tol", options.tol},
                        {"seed", options.seed},
                        {"inner_updates", options.inner_updates},
                        {"iterations_run", fit.factors.iterations}};
    fit.maps = split_maps(features, fit.factors.coefficients);
    return fit;
}

PcaResult principal_components(const Eigen::MatrixXd& samples, Eigen::Index k) {
    if (k < 1) throw ConfigError("PCA needs k >= 1");
    if (k > samples.cols())
        throw ConfigError("PCA k = " + std::to_string(k) + " exceeds channel count " +
                          std::to_string(samples.cols()));
    if (samples.rows() < 2) throw DataError("PCA needs at least two samples");

    PcaResult out;
    out.mean = samples.colwise().mean().transpose();
    const Eigen::MatrixXd centered = samples.rowwise() - out.mean.transpose();
    const Eigen::MatrixXd cov =
        (centered.transpose() * centered) / static_cast<double>(samples.rows());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
    if (eig.info() != Eigen::Success) throw DataError("covariance eigendecomposition failed");

    const Eigen::Index c = samples.cols();
    out.directions.resize(k, c);
    out.explained_variance.resize(k);
    for (Eigen::Index i = 0; i < k; ++i) {
        Eigen::VectorXd dir = eig.eigenvectors().col(c - 1 - i);
        Eigen::Index pivot = 0;
        dir.cwiseAbs().maxCoeff(&pivot);
        if (dir(pivot) < 0.0) dir = -dir;
        out.directions.row(i) = dir.transpose();
        out.explained_variance(i) = std::max(0.0, eig.eigenvalues()(c - 1 - i));
    }
    return out;
}

ConceptBasis fit_pca(const FeatureBatch& features, Eigen::Index k) {
    features.validate();
    if (features.n * features.h * features.w < 2) throw DataError("PCA needs at least two feature locations");
    auto pca = principal_components(flatten_locations(features), k);
    ConceptBasis basis;
    basis.kind = BasisKind::pca;
    basis.directions = std::move(pca.directions);
    basis.mean = std::move(pca.mean);
    basis.backbone_id = features.backbone_id;
    std::vector<double> variance(pca.explained_variance.data(),
                                 pca.explained_variance.data() + pca.explained_variance.size());
    basis.config = {{"reducer", "pca"}, {"k", k}, {"explained_variance", variance}};
    return basis;
}

Eigen::MatrixXd nmf_project(const Eigen::MatrixXd& v, const Eigen::MatrixXd& basis,
                            const TransformOptions& options) {
    if (v.cols() != basis.cols())
        throw ShapeError("feature width " + std::to_string(v.cols()) + " does not match basis width " +
                         std::to_string(basis.cols()));
    check_nonnegative(v);
    const Eigen::Index k = basis.rows();
    const Eigen::MatrixXd gram = basis * basis.transpose();
    const Eigen::MatrixXd cross = v * basis.transpose();  // rows×k
    // Unconstrained least-squares start, clamped into the positive orthant.
    const Eigen::MatrixXd ls = gram.completeOrthogonalDecomposition().solve(cross.transpose()).transpose();

    Eigen::MatrixXd s(v.rows(), k);
    for (Eigen::Index r = 0; r < v.rows(); ++r) {
        const Eigen::VectorXd b = cross.row(r).transpose();
        const double v_sq = v.row(r).squaredNorm();
        Eigen::VectorXd x = ls.row(r).transpose();
        const double floor = 1e-6 * std::max(x.maxCoeff(), 1e-12);
        x = x.cwiseMax(floor);

        // Optimal non-negative rescaling: the start is never worse than zero.
        const double fit = x.dot(gram * x);
        const double alpha = fit > 0.0 ? std::max(0.0, x.dot(b) / fit) : 0.0;
        x *= alpha;

        auto objective = [&](const Eigen::VectorXd& y) {
            return std::max(0.0, v_sq - 2.0 * y.dot(b) + y.dot(gram * y));
        };
        double prev = std::sqrt(objective(x));
        for (int it = 0; it < options.iters && prev > 0.0; ++it) {
            const Eigen::VectorXd den = gram * x;
            for (Eigen::Index j = 0; j < k; ++j)
                if (den(j) > 0.0) x(j) *= b(j) / den(j);
            const double curr = std::sqrt(objective(x));
            if ((prev - curr) / prev < options.tol) break;
            prev = curr;
        }
        s.row(r) = x.transpose();
    }
    return s;
}

std::vector<ConceptScoreMap> transform_scores(const FeatureBatch& features, const ConceptBasis& basis,
                                              const TransformOptions& options) {
    features.validate();
    if (static_cast<Eigen::Index>(features.c) != basis.channels())
        throw ShapeError("features have " + std::to_string(features.c) + " channels, basis expects " +
                         std::to_string(basis.channels()));
    const Eigen::MatrixXd v = flatten_locations(features);
    Eigen::MatrixXd scores;
    switch (basis.kind) {
        case BasisKind::pca:
            scores = (v.rowwise() - basis.mean.transpose()) * basis.directions.transpose();
            break;
        case BasisKind::nmf:
            scores = nmf_project(v, basis.directions, options);
            break;
        case BasisKind::cav: {
            const Eigen::VectorXd norms = basis.directions.rowwise().squaredNorm();
            scores = v * basis.directions.transpose();
            for (Eigen::Index j = 0; j < scores.cols(); ++j) scores.col(j) /= norms(j);
            break;
        }
    }
    return split_maps(features, scores);
}

ConceptScoreVector pool_scores(const ConceptScoreMap& map, PoolMode mode) {
    const auto locations = map.h * map.w;
    if (locations == 0) throw ShapeError("cannot pool an empty score map");
    if (map.scores.size() != locations * map.k) throw ShapeError("score map size mismatch");
    ConceptScoreVector out;
    out.image_id = map.image_id;
    const auto k = static_cast<Eigen::Index>(map.k);
    if (mode == PoolMode::mean) {
        out.scores = Eigen::VectorXd::Zero(k);
        for (std::size_t loc = 0; loc < locations; ++loc)
            for (Eigen::Index j = 0; j < k; ++j) out.scores(j) += map.scores[loc * map.k + j];
        out.scores /= static_cast<double>(locations);
    } else {
        out.scores = Eigen::VectorXd::Constant(k, -std::numeric_limits<double>::infinity());
        for (std::size_t loc = 0; loc < locations; ++loc)
            for (Eigen::Index j = 0; j < k; ++j)
                out.scores(j) = std::max(out.scores(j), map.scores[loc * map.k + j]);
    }
    return out;
}

std::vector<ConceptScoreVector> pool_scores(const std::vector<ConceptScoreMap>& maps, PoolMode mode) {
    std::vector<ConceptScoreVector> out;
    out.reserve(maps.size());
    for (const auto& m : maps) out.push_back(pool_scores(m, mode));
    return out;
}

Eigen::VectorXd reconstruct_features(const ConceptScoreVector& scores, const ConceptBasis& basis) {
    if (scores.scores.size() != basis.k()) throw ShapeError("score vector length does not match basis");
    Eigen::VectorXd out = basis.directions.transpose() * scores.scores;
    if (basis.kind == BasisKind::pca) out += basis.mean;
    return out;
}

std::vector<double> bilinear_resize(std::span<const double> grid, int in_h, int in_w, int out_h, int out_w) {
    if (in_h < 1 || in_w < 1 || out_h < 1 || out_w < 1) throw ShapeError("resize sizes must be positive");
    if (grid.size() != static_cast<std::size_t>(in_h) * static_cast<std::size_t>(in_w))
        throw ShapeError("grid size does not match dimensions");
    auto axis = [](int i, int in, int out, int& lo, int& hi, double& frac) {
        double src = (i + 0.5) * static_cast<double>(in) / out - 0.5;
        src = std::clamp(src, 0.0, static_cast<double>(in - 1));
        lo = static_cast<int>(std::floor(src));
        hi = std::min(lo + 1, in - 1);
        frac = src - lo;
    };
    std::vector<double> out(static_cast<std::size_t>(out_h) * static_cast<std::size_t>(out_w));
    for (int y = 0; y < out_h; ++y) {
        int y0, y1;
        double fy;
        axis(y, in_h, out_h, y0, y1, fy);
        for (int x = 0; x < out_w; ++x) {
            int x0, x1;
            double fx;
            axis(x, in_w, out_w, x0, x1, fx);
            auto at = [&](int yy, int xx) { return grid[static_cast<std::size_t>(yy) * in_w + xx]; };
            const double top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
            const double bottom = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
            out[static_cast<std::size_t>(y) * out_w + x] = (1.0 - fy) * top + fy * bottom;
        }
    }
    return out;
}

Annotation concept_heatmap(const ConceptScoreMap& map, std::size_t concept_index, int out_width,
                           int out_height, double threshold) {
    if (concept_index >= map.k)
        throw IndexError("concept " + std::to_string(concept_index) + " out of range (K = " +
                         std::to_string(map.k) + ")");
    if (out_width < 1 || out_height < 1) throw ConfigError("annotation size must be positive");

    std::vector<double> channel(map.h * map.w);
    for (std::size_t loc = 0; loc < channel.size(); ++loc) channel[loc] = map.scores[loc * map.k + concept_index];
    const auto up = bilinear_resize(channel, static_cast<int>(map.h), static_cast<int>(map.w), out_height,
                                    out_width);

    Annotation a;
    a.width = out_width;
    a.height = out_height;
    a.heat.assign(up.size(), 0.0f);
    a.mask.assign(up.size(), 0);
    const auto [lo, hi] = std::minmax_element(up.begin(), up.end());
    const double range = *hi - *lo;
    if (!(range > 0.0)) return a;  // constant channel: nothing to localize

    cv::Mat mask(out_height, out_width, CV_8U, cv::Scalar(0));
    bool any = false;
    for (std::size_t i = 0; i < up.size(); ++i) {
        const double norm = (up[i] - *lo) / range;
        a.heat[i] = static_cast<float>(norm);
        if (norm >= threshold) {
            a.mask[i] = 1;
            mask.data[i] = 1;
            any = true;
        }
    }
    if (!any) return a;

    cv::Mat labels, stats, centroids;
    const int count = cv::connectedComponentsWithStats(mask, labels, stats, centroids, 8, CV_32S);
    int best = 1;
    for (int l = 2; l < count; ++l)
        if (stats.at<int>(l, cv::CC_STAT_AREA) > stats.at<int>(best, cv::CC_STAT_AREA)) best = l;
    cv::Mat component = (labels == best);
    std::vector<std::vector<cv::Point>> contours;
    cv::findContours(component, contours, cv::RETR_EXTERNAL, cv::CHAIN_APPROX_SIMPLE);
    if (contours.empty()) return a;
    const auto& outline = *std::max_element(contours.begin(), contours.end(), [](const auto& l, const auto& r) {
        return l.size() < r.size();
    });
    for (const auto& p : outline) a.polygon.emplace_back(p.x, p.y);
    return a;
}

std::vector<std::uint8_t> encode_mask_png(const Annotation& annotation) {
    cv::Mat img(annotation.height, annotation.width, CV_8U, cv::Scalar(0));
    for (std::size_t i = 0; i < annotation.mask.size(); ++i) img.data[i] = annotation.mask[i] ? 255 : 0;
    std::vector<std::uint8_t> png;
    cv::imencode(".png", img, png);
    return png;
}

std::vector<std::string> top_prototypes(std::span<const ConceptScoreVector> vectors, std::size_t concept_index,
                                        std::size_t m) {
    if (m < 1) throw ConfigError("prototype count must be at least 1");
    if (vectors.empty()) throw DataError("no training vectors to rank");
    const auto k = static_cast<std::size_t>(vectors.front().scores.size());
    if (concept_index >= k)
        throw IndexError("concept " + std::to_string(concept_index) + " out of range (K = " + std::to_string(k) + ")");
    std::vector<std::size_t> order(vectors.size());
    std::iota(order.begin(), order.end(), 0);
    const auto c = static_cast<Eigen::Index>(concept_index);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double sa = vectors[a].scores(c), sb = vectors[b].scores(c);
        if (sa != sb) return sa > sb;
        return vectors[a].image_id < vectors[b].image_id;
    });
    order.resize(std::min(m, order.size()));
    std::vector<std::string> ids;
    for (auto i : order) ids.push_back(vectors[i].image_id);
    return ids;
}

}  // namespace evai
