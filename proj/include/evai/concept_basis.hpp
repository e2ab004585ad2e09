#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace evai {

enum class BasisKind { nmf, pca, cav };

std::string_view to_string(BasisKind kind);
BasisKind parse_basis_kind(std::string_view text);

/// K concept directions in C-dimensional feature space.
struct ConceptBasis {
    BasisKind kind = BasisKind::nmf;
    Eigen::MatrixXd directions;  // K×C
    std::vector<std::string> names;
    /// Centering mean (PCA only; empty otherwise).
    Eigen::VectorXd mean;
    std::string backbone_id;
    /// Fitting configuration, kept for provenance.
    nlohmann::json config = nlohmann::json::object();

    Eigen::Index k() const { return directions.rows(); }
    Eigen::Index channels() const { return directions.cols(); }

    /// Concept name, or "Feature i" (1-based) for unnamed bases.
    std::string display_name(Eigen::Index concept_index) const;

    /// Checks kind-specific invariants. `orthonormal_tol` applies to PCA rows.
    void validate(double orthonormal_tol = 1e-8) const;

    /// Rounds every stored value to float32, the precision it has on disk.
    void round_to_storage();

    /// SHA-256 over the serialized tensor and sidecar.
    std::string hash() const;
};

/// Per-location concept activations for one image, H×W×K row-major.
struct ConceptScoreMap {
    std::string image_id;
    std::size_t h = 0;
    std::size_t w = 0;
    std::size_t k = 0;
    std::vector<double> scores;

    double at(std::size_t y, std::size_t x, std::size_t concept_index) const {
        return scores[(y * w + x) * k + concept_index];
    }
};

/// Spatially pooled concept activations for one image.
struct ConceptScoreVector {
    std::string image_id;
    Eigen::VectorXd scores;
};

/// Writes the K×C tensor to `path` and a JSON sidecar to `path` + ".json".
void save_basis(const std::filesystem::path& path, const ConceptBasis& basis);
ConceptBasis load_basis(const std::filesystem::path& path);

nlohmann::json basis_sidecar(const ConceptBasis& basis);

/// Stacks pooled vectors into an N×K matrix.
Eigen::MatrixXd stack_scores(const std::vector<ConceptScoreVector>& vectors);

}  // namespace evai
