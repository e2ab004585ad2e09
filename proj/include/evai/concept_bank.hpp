#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "evai/concept_basis.hpp"

namespace evai {

struct ConceptExamples {
    std::string name;
    std::vector<Eigen::VectorXd> positives;
    std::vector<Eigen::VectorXd> negatives;
};

struct CavOptions {
    double regularization = 0.01;
    double lr = 0.01;
    int epochs = 500;
    std::uint64_t seed = 0;
};

/// Concept activation vector: normal of a linear separator between concept
/// positives and negatives.
struct Cav {
    std::string name;
    Eigen::VectorXd weights;
    double bias = 0.0;
    double train_accuracy = 0.0;

    double decision(const Eigen::VectorXd& x) const { return weights.dot(x) + bias; }
};

/// L2-regularized logistic regression (labels ±1) fitted by full-batch
/// gradient descent. Examples are put in a canonical order before the seeded
/// shuffle, so the result does not depend on the input order.
Cav train_cav(const ConceptExamples& examples, const CavOptions& options = {});

struct ConceptBank {
    ConceptBasis basis;  // kind = cav
    std::vector<Cav> cavs;
};

/// One CAV per concept; concepts are trained independently (in parallel when
/// `threads` > 1).
ConceptBank build_bank(std::span<const ConceptExamples> all_examples, const CavOptions& options = {},
                       std::string backbone_id = {}, unsigned threads = 1);

/// score_j = ⟨embedding, w_j⟩ / ‖w_j‖².
ConceptScoreVector project_concepts(const Eigen::VectorXd& embedding, const ConceptBasis& bank);

/// Reads `root/<concept>/{pos,neg}/*.features`; each file contributes the
/// spatial mean of every image it holds. Concepts are returned sorted by name.
std::vector<ConceptExamples> load_concept_examples(const std::filesystem::path& root);

/// Manifest form: {"concepts": [{"name": ..., "positives": [paths], "negatives": [paths]}]}
/// with paths relative to the manifest's directory.
std::vector<ConceptExamples> load_concept_manifest(const std::filesystem::path& manifest);

}  // namespace evai
