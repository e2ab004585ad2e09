#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace evai {

/// Last-convolution activations for N images, stored N×H×W×C row-major.
struct FeatureBatch {
    std::size_t n = 0;
    std::size_t h = 0;
    std::size_t w = 0;
    std::size_t c = 0;
    std::vector<float> values;
    std::vector<std::string> image_ids;
    std::string backbone_id;
    std::string layer;

    std::size_t locations_per_image() const { return h * w; }

    std::span<const float> image(std::size_t i) const {
        return {values.data() + i * h * w * c, h * w * c};
    }
    std::span<float> image(std::size_t i) { return {values.data() + i * h * w * c, h * w * c}; }

    float at(std::size_t i, std::size_t y, std::size_t x, std::size_t ch) const {
        return values[((i * h + y) * w + x) * c + ch];
    }

    /// Throws ShapeError/DomainError if sizes disagree or an entry is non-finite.
    void validate() const;
};

/// New batch holding the listed images, in the listed order.
FeatureBatch slice(const FeatureBatch& batch, std::span<const std::size_t> indices);

/// (N·H·W)×C matrix of per-location feature vectors.
Eigen::MatrixXd flatten_locations(const FeatureBatch& batch);

/// N×C matrix of spatially averaged features.
Eigen::MatrixXd pooled_features(const FeatureBatch& batch);

void save_feature_batch(const std::filesystem::path& path, const FeatureBatch& batch);
FeatureBatch load_feature_batch(const std::filesystem::path& path);

/// Write then read back.
FeatureBatch feature_file_roundtrip(const FeatureBatch& batch, const std::filesystem::path& path);

}  // namespace evai
