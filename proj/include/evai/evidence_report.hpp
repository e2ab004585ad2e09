#pragma once

#include <string>
#include <vector>

#include "evai/concept_basis.hpp"
#include "evai/concept_discovery.hpp"
#include "evai/evidence.hpp"

namespace evai {

struct ConceptEvidence {
    Eigen::Index id = 0;
    std::string display_name;
    double woe_value = 0.0;
    Annotation annotation;
    std::vector<std::string> prototype_ids;
};

struct EvidenceReport {
    std::string image_id;
    std::string hypothesis;
    WoEDecomposition decomposition;
    std::vector<ConceptEvidence> concepts;
};

struct AnnotationOptions {
    int width = 224;
    int height = 224;
    double threshold = 0.5;
};

/// Assembles the per-concept evidence for hypothesis `h` on one image.
/// `prototypes[j]` lists the training prototypes of concept j (only the first
/// five are kept).
EvidenceReport evidence_report(const GaussianEvidenceModel& model, const ConceptBasis& basis,
                               const ConceptScoreMap& map, const ConceptScoreVector& pooled,
                               const std::vector<std::vector<std::string>>& prototypes,
                               Eigen::Index h, const AnnotationOptions& options = {});

}  // namespace evai
