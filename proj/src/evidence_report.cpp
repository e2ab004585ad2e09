#include "evai/evidence_report.hpp"

#include "evai/errors.hpp"

namespace evai {

EvidenceReport evidence_report(const GaussianEvidenceModel& model, const ConceptBasis& basis,
                               const ConceptScoreMap& map, const ConceptScoreVector& pooled,
                               const std::vector<std::vector<std::string>>& prototypes,
                               Eigen::Index h, const AnnotationOptions& options) {
    const auto k = basis.k();
    if (model.concepts() != k)
        throw ConfigError("evidence model has " + std::to_string(model.concepts()) + " concepts, basis has " +
                          std::to_string(k));
    if (static_cast<Eigen::Index>(map.k) != k || pooled.scores.size() != k)
        throw ConfigError("concept scores do not come from this basis");
    if (!prototypes.empty() && static_cast<Eigen::Index>(prototypes.size()) != k)
        throw ConfigError("prototype lists do not match the basis");

    EvidenceReport report;
    report.image_id = map.image_id;
    report.decomposition = woe(model, h, pooled.scores);
    report.hypothesis = model.hypothesis_names[static_cast<std::size_t>(h)];
    for (Eigen::Index j = 0; j < k; ++j) {
        ConceptEvidence c;
        c.id = j;
        c.display_name = basis.display_name(j);
        c.woe_value = report.decomposition.per_concept(j);
        c.annotation = concept_heatmap(map, static_cast<std::size_t>(j), options.width, options.height,
                                       options.threshold);
        if (!prototypes.empty()) {
            const auto& p = prototypes[static_cast<std::size_t>(j)];
            c.prototype_ids.assign(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(std::min<std::size_t>(5, p.size())));
        }
        report.concepts.push_back(std::move(c));
    }
    return report;
}

}  // namespace evai
