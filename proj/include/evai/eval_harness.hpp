#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "evai/concept_basis.hpp"
#include "evai/concept_discovery.hpp"
#include "evai/evidence.hpp"
#include "evai/feature_batch.hpp"
#include "evai/feature_pipeline.hpp"
#include "evai/linear_head.hpp"

namespace evai {

struct MetricsRecord {
    /// Macro averages, in percent.
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    Eigen::MatrixXi confusion;  // rows: true class, columns: predicted
    std::vector<double> class_precision;
    std::vector<double> class_recall;
    std::vector<double> class_f1;
    std::uint64_t seed = 0;
    std::string model_tag;
};

/// Per-class precision/recall/F1 from the confusion matrix, macro-averaged.
/// Classes with an empty denominator score 0. `num_classes` = 0 infers it from
/// the largest index seen.
MetricsRecord compute_metrics(std::span<const int> predictions, std::span<const int> labels,
                              int num_classes = 0);

struct RunSummary {
    double mean = 0.0;
    double std = 0.0;
    std::size_t n = 0;
};

/// Population mean and standard deviation.
RunSummary summarize(std::span<const double> values);

struct TTestResult {
    double t = 0.0;
    double p_two_tailed = 1.0;
    double cohens_d = 0.0;
    double df = 0.0;
};

/// Pooled two-sample t-test with two-tailed p and Cohen's d on the pooled
/// standard deviation.
TTestResult compare_runs(const RunSummary& a, const RunSummary& b);

enum class ModelKind { original, ice, ice_gnb, ice_woe, pcbm, pcbm_woe };

std::string_view to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view text);
/// Table-style tag: "Original", "ICE(8)", "ICE(8)+GNB", "ICE(8)+WoE", "PCBM", "PCBM+WoE".
std::string model_tag(ModelKind kind, Eigen::Index k);

/// Hypothesis with the largest posterior log-odds; ties go to the lowest index.
Eigen::Index woe_argmax(const GaussianEvidenceModel& model, const Eigen::VectorXd& e);

struct ExperimentData {
    FeatureBatch train;  // resampling pool
    std::vector<int> train_labels;
    FeatureBatch test;
    std::vector<int> test_labels;
    std::vector<std::string> hypotheses;
    /// The backbone's own classifier over pooled features. When absent a
    /// ridge head on pooled training features stands in for it.
    std::optional<LinearHead> original_head;
    /// Named CAV bank for the PCBM models.
    std::optional<ConceptBasis> bank;
};

struct ExperimentConfig {
    ModelKind model = ModelKind::ice_woe;
    BasisKind reducer = BasisKind::nmf;
    Eigen::Index k = 8;
    std::vector<std::uint64_t> seeds{0};
    /// Training images per class after resampling; 0 keeps the pool as is.
    std::size_t per_class = 0;
    bool augment = true;
    int nmf_iters = 400;
    double nmf_tol = 1e-5;
    TransformOptions transform;
    double ridge_lambda = 1.0;
    double var_floor = 1e-6;
    PoolMode pool = PoolMode::mean;
    unsigned threads = 1;

    nlohmann::json to_json() const;
};

struct ExperimentResult {
    std::string model_tag;
    std::vector<MetricsRecord> runs;
    RunSummary precision;
    RunSummary recall;
    RunSummary f1;
};

/// Resample, fit and evaluate once per seed on the fixed test split.
ExperimentResult run_experiment(const ExperimentData& data, const ExperimentConfig& config);

/// "73.16 ± 8.65"
std::string format_summary(const RunSummary& s);

struct SweepCurve {
    std::string model_tag;  // tag without the concept count, e.g. "ICE+WoE"
    BasisKind reducer = BasisKind::nmf;
    std::vector<Eigen::Index> k_values;
    std::vector<RunSummary> f1;
    std::vector<ExperimentResult> results;
};

SweepCurve concept_sweep(const ExperimentData& data, const ExperimentConfig& config,
                         std::span<const Eigen::Index> k_values);

/// Columns: model_tag, reducer, k, seed, precision, recall, f1.
void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepCurve> curves);
void write_runs_csv(const std::filesystem::path& path, const ExperimentResult& result);
nlohmann::json summary_json(const ExperimentResult& result, const ExperimentConfig& config);
nlohmann::json sweep_json(std::span<const SweepCurve> curves);

/// Pooled concept scores of every image in `batch` against `basis`: CAV banks
/// project the spatially pooled features; reducers transform each location
/// and then pool.
Eigen::MatrixXd concept_scores(const FeatureBatch& batch, const ConceptBasis& basis,
                               const TransformOptions& transform = {}, PoolMode pool = PoolMode::mean);

/// Training batch for one seed: `per_class` images per class with augmented
/// duplicates transformed in feature space.
struct TrainingSample {
    FeatureBatch batch;
    std::vector<int> labels;
};
TrainingSample resample_training(const FeatureBatch& pool, std::span<const int> labels, std::size_t per_class,
                                 std::uint64_t seed, bool augment, std::size_t num_classes);

/// Labels for every image of `batch` looked up by image id.
std::vector<int> labels_for(const FeatureBatch& batch, std::span<const ImageRecord> records);

struct ExperimentInputs {
    std::filesystem::path train_features;
    std::filesystem::path test_features;
    std::filesystem::path metadata;  // CSV with id and label columns
    std::optional<std::filesystem::path> original_head;
    std::optional<std::filesystem::path> bank;
    MetadataConfig metadata_config;
};

/// Loads every artifact; missing files raise one IOError naming all of them.
ExperimentData load_experiment_data(const ExperimentInputs& inputs);

}  // namespace evai
