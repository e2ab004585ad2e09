#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "evai/concept_basis.hpp"
#include "evai/feature_batch.hpp"

namespace evai {

struct NmfOptions {
    Eigen::Index k = 8;
    int iters = 400;
    double tol = 1e-5;
    std::uint64_t seed = 0;
    /// Multiplicative updates applied to each factor per iteration, reusing
    /// the same Gram products.
    int inner_updates = 20;
};

/// V ≈ S·P with S (rows×k) and P (k×cols) non-negative.
struct NmfFactors {
    Eigen::MatrixXd coefficients;  // S
    Eigen::MatrixXd basis;         // P
    /// ‖V − S·P‖²_F after initialization and after every iteration.
    std::vector<double> objective;
    int iterations = 0;

    double relative_error(const Eigen::MatrixXd& v) const;
};

/// Lee-Seung multiplicative updates for the Frobenius objective, seeded
/// uniform (0,1] initialization. Stops after `iters` iterations or once the
/// relative error improves by less than `tol`.
NmfFactors factorize_nmf(const Eigen::MatrixXd& v, const NmfOptions& options);

struct NmfFit {
    ConceptBasis basis;
    std::vector<ConceptScoreMap> maps;
    NmfFactors factors;
};

/// One global factorization of all feature locations in `features`.
NmfFit fit_nmf(const FeatureBatch& features, const NmfOptions& options);

struct PcaResult {
    Eigen::MatrixXd directions;  // k×C, orthonormal rows
    Eigen::VectorXd explained_variance;
    Eigen::VectorXd mean;
};

/// Top-k principal directions of the rows of `samples`, ordered by
/// decreasing variance (population covariance). Each direction's sign is
/// fixed so that its largest-magnitude entry is positive.
PcaResult principal_components(const Eigen::MatrixXd& samples, Eigen::Index k);

ConceptBasis fit_pca(const FeatureBatch& features, Eigen::Index k);

struct TransformOptions {
    int iters = 200;
    double tol = 1e-5;
};

/// Non-negative coefficients for each row of `v` against a frozen basis P.
Eigen::MatrixXd nmf_project(const Eigen::MatrixXd& v, const Eigen::MatrixXd& basis,
                            const TransformOptions& options = {});

/// Projects every feature location onto `basis`:
///  - pca: (v − mean)·directionsᵀ
///  - nmf: frozen-basis multiplicative updates
///  - cav: ⟨v, w_j⟩ / ‖w_j‖² per concept
std::vector<ConceptScoreMap> transform_scores(const FeatureBatch& features,
                                              const ConceptBasis& basis,
                                              const TransformOptions& options = {});

enum class PoolMode { mean, max };

ConceptScoreVector pool_scores(const ConceptScoreMap& map, PoolMode mode = PoolMode::mean);
std::vector<ConceptScoreVector> pool_scores(const std::vector<ConceptScoreMap>& maps,
                                            PoolMode mode = PoolMode::mean);

/// Pooled features reconstructed from pooled concept scores: sᵀ·P (+ mean).
Eigen::VectorXd reconstruct_features(const ConceptScoreVector& scores, const ConceptBasis& basis);

/// A localized concept: upsampled activation, its mask and the outline of
/// the mask's largest 8-connected component.
struct Annotation {
    int width = 0;
    int height = 0;
    std::vector<float> heat;           // min-max normalized, row-major
    std::vector<std::uint8_t> mask;    // 0/1, row-major
    std::vector<std::pair<int, int>> polygon;  // (x, y) vertices

    bool empty() const { return polygon.empty(); }
};

/// Bilinear resize with half-pixel centers and edge clamping.
std::vector<double> bilinear_resize(std::span<const double> grid, int in_h, int in_w, int out_h,
                                    int out_w);

Annotation concept_heatmap(const ConceptScoreMap& map, std::size_t concept_index, int out_width,
                           int out_height, double threshold = 0.5);

/// PNG encoding of the mask (0/255, single channel).
std::vector<std::uint8_t> encode_mask_png(const Annotation& annotation);

/// The m image ids with the highest score on `concept`, descending; ties go
/// to the lexicographically smaller id.
std::vector<std::string> top_prototypes(std::span<const ConceptScoreVector> vectors,
                                        std::size_t concept_index, std::size_t m = 5);

}  // namespace evai
