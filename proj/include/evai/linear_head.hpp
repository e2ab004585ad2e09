#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

namespace evai {

enum class HeadKind { ridge, original };

std::string_view to_string(HeadKind kind);

/// scores = weights·x + bias; prediction = argmax (lowest index on ties).
struct LinearHead {
    HeadKind kind = HeadKind::ridge;
    Eigen::MatrixXd weights;  // |H|×D
    Eigen::VectorXd bias;     // |H|
    std::vector<std::string> hypothesis_names;

    Eigen::Index input_dim() const { return weights.cols(); }
};

/// One-vs-all ridge regression on one-hot targets. The design matrix is
/// augmented with a constant column whose coefficient (the bias) is not
/// penalized; the weights solve (X̃ᵀX̃ + λD)W̃ = X̃ᵀY with D = diag(1,…,1,0).
LinearHead fit_ridge(const Eigen::MatrixXd& x, std::span<const int> labels,
                     std::vector<std::string> hypothesis_names, double lambda = 1.0);

/// The matrix X̃ᵀX̃ + λD and right-hand side X̃ᵀY solved by fit_ridge.
struct RidgeSystem {
    Eigen::MatrixXd lhs;
    Eigen::MatrixXd rhs;
};
RidgeSystem ridge_normal_equations(const Eigen::MatrixXd& x, std::span<const int> labels,
                                   Eigen::Index num_classes, double lambda);

/// Stacked [weights | bias] as solved by fit_ridge (D+1)×|H|.
Eigen::MatrixXd stacked_coefficients(const LinearHead& head);

Eigen::VectorXd head_scores(const LinearHead& head, const Eigen::VectorXd& input);
Eigen::Index apply_head(const LinearHead& head, const Eigen::VectorXd& input);

/// argmax with ties to the lowest index.
Eigen::Index argmax(const Eigen::VectorXd& values);

nlohmann::json to_json(const LinearHead& head);
LinearHead linear_head_from_json(const nlohmann::json& j);

}  // namespace evai
