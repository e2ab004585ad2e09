#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "evai/classes.hpp"
#include "evai/feature_batch.hpp"

namespace evai {

struct PreprocessConfig {
    int side = 224;
    std::array<double, 3> mean{0.485, 0.456, 0.406};
    std::array<double, 3> std{0.229, 0.224, 0.225};

    void validate() const;
};

/// 3×S×S channels-first (RGB) standardized pixels.
struct NormalizedImage {
    int side = 0;
    std::vector<float> pixels;
    std::array<double, 3> mean{};
    std::array<double, 3> std{};

    float at(int channel, int y, int x) const {
        return pixels[(static_cast<std::size_t>(channel) * side + y) * side + x];
    }
};

/// Decode (any format OpenCV reads), resize to S×S with bilinear
/// interpolation, scale to [0,1] and standardize per channel.
NormalizedImage preprocess_image(std::span<const std::uint8_t> bytes, const PreprocessConfig& config);

/// Label-preserving spatial transform applied to resampled duplicates.
/// Flips are applied first, then a clockwise rotation.
struct Augmentation {
    bool hflip = false;
    bool vflip = false;
    int rotation = 0;  // degrees: 0, 90, 180 or 270

    bool is_identity() const { return !hflip && !vflip && rotation == 0; }
    friend bool operator==(const Augmentation&, const Augmentation&) = default;
};

NormalizedImage apply_augmentation(const NormalizedImage& image, const Augmentation& aug);

/// Single-image batch holding image `index` with `aug` applied to its H×W grid.
/// 90/270 degree rotations need H == W.
FeatureBatch apply_augmentation(const FeatureBatch& batch, std::size_t index, const Augmentation& aug);

struct ImageRecord {
    std::string image_id;
    int label = 0;
    std::filesystem::path source_path;
    bool is_augmented = false;
    Augmentation augmentation;
    /// For resampled duplicates, the id of the record they were copied from.
    std::string origin_id;

    friend bool operator==(const ImageRecord&, const ImageRecord&) = default;
};

struct MetadataConfig {
    std::string id_column = "image_id";
    std::string label_column = "dx";
    std::vector<std::string> classes = skin_lesion_classes();
    std::filesystem::path image_dir;
    std::string image_extension = ".jpg";
};

/// Case-insensitive lookup of `name` in `classes`; -1 when absent.
int class_index(std::span<const std::string> classes, std::string_view name);

std::vector<ImageRecord> load_metadata(const std::filesystem::path& csv_path,
                                       const MetadataConfig& config = {});

struct AugmentConfig {
    bool enabled = true;
};

/// Exactly `per_class` records for each of `num_classes` labels. Classes with
/// more records are subsampled without replacement; smaller classes keep all
/// their records and are topped up with seeded resampled duplicates.
std::vector<ImageRecord> prepare_training_set(std::span<const ImageRecord> records,
                                              std::size_t per_class, std::uint64_t seed,
                                              const AugmentConfig& augment = {},
                                              std::size_t num_classes = kSkinLesionClasses.size());

struct DatasetSplit {
    std::vector<ImageRecord> train;
    std::vector<ImageRecord> test;
};

/// Seeded uniform sampling of `per_class` test records per label; the rest
/// become the training pool.
DatasetSplit split_test_set(std::span<const ImageRecord> records, std::size_t per_class,
                            std::uint64_t seed,
                            std::size_t num_classes = kSkinLesionClasses.size());

}  // namespace evai
