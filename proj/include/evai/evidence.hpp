#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace evai {

enum class PriorMode { uniform, empirical };

PriorMode parse_prior_mode(std::string_view text);

/// Per-hypothesis, per-concept Gaussians plus hypothesis priors.
struct GaussianEvidenceModel {
    Eigen::MatrixXd means;      // |H|×K
    Eigen::MatrixXd variances;  // |H|×K
    Eigen::VectorXd priors;     // |H|
    std::vector<std::string> hypothesis_names;
    std::vector<std::string> concept_names;
    double var_floor = 1e-6;
    /// Hash of the concept basis the scores came from (may be empty).
    std::string basis_hash;

    Eigen::Index hypotheses() const { return means.rows(); }
    Eigen::Index concepts() const { return means.cols(); }

    /// Throws IntegrityError when an invariant does not hold.
    void validate() const;
};

/// Per-class sample means and population variances (clamped below by
/// `var_floor`) of an N×K score matrix.
GaussianEvidenceModel fit_gnb(const Eigen::MatrixXd& scores, std::span<const int> labels,
                              std::vector<std::string> hypothesis_names,
                              PriorMode prior_mode = PriorMode::uniform, double var_floor = 1e-6);

/// log N(x; mean, variance).
double log_normal_density(double x, double mean, double variance);

/// Σ_i log N(e_i; μ_{h,i}, σ²_{h,i}).
double log_class_likelihood(const GaussianEvidenceModel& model, Eigen::Index h,
                            const Eigen::VectorXd& e);

/// Weight of evidence for hypothesis h against the prior-weighted mixture of
/// the remaining hypotheses.
struct WoEDecomposition {
    Eigen::VectorXd per_concept;
    double total_woe = 0.0;
    double prior_log_odds = 0.0;
    double posterior_log_odds = 0.0;
    Eigen::Index hypothesis = 0;
};

WoEDecomposition woe(const GaussianEvidenceModel& model, Eigen::Index h, const Eigen::VectorXd& e);

/// argmax_h log P(h) + log P(e|h); ties go to the lowest index.
Eigen::Index classify(const GaussianEvidenceModel& model, const Eigen::VectorXd& e);

double log_sum_exp(std::span<const double> values);

nlohmann::json to_json(const GaussianEvidenceModel& model);
/// Parses and re-verifies invariants (IntegrityError on violation).
GaussianEvidenceModel evidence_model_from_json(const nlohmann::json& j);

void save_evidence_model(const std::filesystem::path& path, const GaussianEvidenceModel& model);
GaussianEvidenceModel load_evidence_model(const std::filesystem::path& path);

}  // namespace evai
