#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "evai/feature_batch.hpp"

namespace evai {

/// Feature maps built as non-negative mixtures of planted concept patterns.
/// Pattern c lives on its own block of channels, so every class is identified
/// by which pattern dominates and the Bayes-optimal classifier is exact.
struct PlantedOptions {
    std::size_t classes = 3;
    std::size_t train_per_class = 40;
    std::size_t test_per_class = 20;
    std::size_t grid = 4;
    std::size_t channels = 12;
    /// Own-pattern weight is drawn from [0.6, 1.4]·own, the others from [0, other].
    double own = 1.0;
    double other = 0.1;
    double noise = 0.05;
    std::uint64_t seed = 0;
};

struct PlantedDataset {
    FeatureBatch train;
    std::vector<int> train_labels;
    FeatureBatch test;
    std::vector<int> test_labels;
    Eigen::MatrixXd patterns;  // classes × channels
    std::vector<std::string> hypotheses;
};

PlantedDataset planted_concept_dataset(const PlantedOptions& options = {});

/// PNG of a toy lesion: a class-coloured ellipse on a skin-toned background
/// with seeded position, size and speckle.
std::vector<std::uint8_t> synthetic_lesion_png(int label, std::uint64_t seed, int side = 64);

/// PNG of a lesion that shows (positive) or lacks (negative) a concept marker:
/// dots in a concept-specific colour and spacing.
std::vector<std::uint8_t> synthetic_concept_png(int concept_index, bool positive, std::uint64_t seed,
                                                int side = 64);

}  // namespace evai
