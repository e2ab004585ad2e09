#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "evai/feature_batch.hpp"
#include "evai/feature_pipeline.hpp"

namespace evai {

/// H×W×C activations of one image.
struct FeatureMap {
    std::size_t h = 0;
    std::size_t w = 0;
    std::size_t c = 0;
    std::vector<float> values;
};

/// A frozen feature extractor. Implementations must be safe to call from
/// several threads at once.
class Backbone {
public:
    virtual ~Backbone() = default;

    virtual std::string id() const = 0;
    virtual std::string layer() const = 0;
    /// Expected NormalizedImage side length.
    virtual int input_side() const = 0;
    virtual FeatureMap forward(const NormalizedImage& image) const = 0;
};

/// Runs `backbone` over `images` (in parallel when `threads` > 1) and stacks
/// the outputs in input order.
FeatureBatch extract_features(const Backbone& backbone, std::span<const NormalizedImage> images,
                              std::span<const std::string> image_ids, unsigned threads = 1);

/// Backbone loaded from an ONNX exchange-format file through OpenCV's DNN
/// module. The output blob (NCHW) is transposed to H×W×C.
class OnnxBackbone final : public Backbone {
public:
    OnnxBackbone(const std::filesystem::path& model_path, int input_side,
                 std::string output_layer = {}, std::string id = {});
    ~OnnxBackbone() override;

    std::string id() const override { return id_; }
    std::string layer() const override { return layer_; }
    int input_side() const override { return side_; }
    FeatureMap forward(const NormalizedImage& image) const override;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
    int side_;
    std::string layer_;
    std::string id_;
};

/// Deterministic hand-built extractor: the image is cut into a grid×grid
/// lattice and each cell's per-channel mean and standard deviation are mapped
/// through a seeded random linear layer followed by a rectifier. Useful where
/// no trained network is available (demos, tests); outputs are non-negative
/// like post-ReLU convolution features.
class GridStatsBackbone final : public Backbone {
public:
    GridStatsBackbone(int input_side, int grid, int channels, std::uint64_t seed);

    std::string id() const override;
    std::string layer() const override { return "grid_stats"; }
    int input_side() const override { return side_; }
    FeatureMap forward(const NormalizedImage& image) const override;

private:
    int side_;
    int grid_;
    int channels_;
    std::uint64_t seed_;
    std::vector<double> weights_;  // channels × 6
    std::vector<double> bias_;
};

}  // namespace evai
