#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "evai/backbone.hpp"
#include "evai/concept_basis.hpp"
#include "evai/evidence.hpp"
#include "evai/evidence_report.hpp"
#include "evai/feature_pipeline.hpp"

namespace evai {

/// One servable basis: directions, the evidence model fitted on its scores
/// and the prototype ids of every concept.
struct BasisEntry {
    ConceptBasis basis;
    GaussianEvidenceModel model;
    std::vector<std::vector<std::string>> prototypes;
    std::string hash;  // basis.hash(), computed once
};

struct MethodEntry {
    Eigen::Index default_k = 0;
    std::map<Eigen::Index, BasisEntry> bases;
};

struct ExampleImage {
    std::string image_id;
    std::vector<std::uint8_t> bytes;
};

/// Everything the evidence service needs. Immutable once loaded.
struct ModelBundle {
    std::vector<std::string> hypotheses;
    PreprocessConfig preprocess;
    nlohmann::json backbone_spec;
    std::shared_ptr<const Backbone> backbone;
    std::vector<ExampleImage> examples;
    std::map<std::string, MethodEntry> methods;  // "ice", "pcbm"
    std::map<std::string, std::vector<std::uint8_t>> prototype_images;
    AnnotationOptions annotation;

    /// Method names in catalog order: ice before pcbm.
    std::vector<std::string> method_names() const;
    /// The basis for `method` at `k` (0 = the method's default).
    const BasisEntry& basis(const std::string& method, Eigen::Index k = 0) const;
    /// Checks shapes, hypothesis names and basis hashes; IntegrityError on failure.
    void validate() const;
};

/// Backbone from its bundle description:
///   {"type": "grid_stats", "side", "grid", "channels", "seed"}
///   {"type": "onnx", "path", "side", "layer"?, "id"?}  (path relative to `root`)
std::shared_ptr<const Backbone> make_backbone(const nlohmann::json& spec, const std::filesystem::path& root);

/// Adds a basis entry; rounds the basis to storage precision so that a saved
/// and reloaded bundle answers identically.
void add_basis(ModelBundle& bundle, const std::string& method, ConceptBasis basis, GaussianEvidenceModel model,
               std::vector<std::vector<std::string>> prototypes);

/// Directory layout: bundle.json, bases/, models/, examples/, prototypes/.
void save_bundle(const std::filesystem::path& dir, const ModelBundle& bundle);
ModelBundle load_bundle(const std::filesystem::path& dir);

struct DemoBundleOptions {
    int side = 64;
    int grid = 7;
    int channels = 32;
    std::size_t train_per_class = 20;
    std::size_t concept_examples = 20;
    std::vector<Eigen::Index> ice_k{8};
    std::uint64_t seed = 0;
    unsigned threads = 1;
    bool with_pcbm = true;
};

/// A self-contained bundle over synthetic images: grid-statistics backbone,
/// NMF bases, a 12-concept CAV bank and three example images.
ModelBundle make_demo_bundle(const DemoBundleOptions& options = {});

}  // namespace evai
