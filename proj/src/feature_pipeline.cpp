#include "evai/feature_pipeline.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <unordered_map>
#include <unordered_set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "evai/errors.hpp"
#include "evai/rng.hpp"

namespace evai {
namespace {

// Source coordinate for output cell (y, x) of an in_h×in_w grid transformed
// by `aug` (flip first, then clockwise rotation).
std::pair<std::size_t, std::size_t> source_cell(const Augmentation& aug, std::size_t in_h,
                                                std::size_t in_w, std::size_t y, std::size_t x) {
    std::size_t fy = 0, fx = 0;  // coordinate in the flipped image
    switch (aug.rotation) {
        case 0: fy = y; fx = x; break;
        case 90: fy = in_h - 1 - x; fx = y; break;
        case 180: fy = in_h - 1 - y; fx = in_w - 1 - x; break;
        case 270: fy = x; fx = in_w - 1 - y; break;
        default: throw ConfigError("rotation must be 0, 90, 180 or 270");
    }
    if (aug.vflip) fy = in_h - 1 - fy;
    if (aug.hflip) fx = in_w - 1 - fx;
    return {fy, fx};
}

std::pair<std::size_t, std::size_t> transformed_dims(const Augmentation& aug, std::size_t h,
                                                     std::size_t w) {
    if (aug.rotation == 90 || aug.rotation == 270) return {w, h};
    return {h, w};
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> fields;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char ch = line[i];
        if (quoted) {
            if (ch == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(ch);
            }
        } else if (ch == '"') {
            quoted = true;
        } else if (ch == ',') {
            fields.push_back(std::move(field));
            field.clear();
        } else if (ch != '\r') {
            field.push_back(ch);
        }
    }
    fields.push_back(std::move(field));
    return fields;
}

std::string lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

std::vector<std::vector<std::size_t>> group_by_class(std::span<const ImageRecord> records,
                                                     std::size_t num_classes) {
    std::vector<std::vector<std::size_t>> members(num_classes);
    for (std::size_t i = 0; i < records.size(); ++i) {
        const int label = records[i].label;
        if (label < 0 || static_cast<std::size_t>(label) >= num_classes)
            throw LabelError("record " + records[i].image_id + " has label " +
                             std::to_string(label) + " outside 0.." +
                             std::to_string(num_classes - 1));
        members[static_cast<std::size_t>(label)].push_back(i);
    }
    return members;
}

// `count` distinct positions of [0, n) chosen uniformly, returned ascending.
std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t count, Rng& rng) {
    std::vector<std::size_t> pool(n);
    std::iota(pool.begin(), pool.end(), 0);
    for (std::size_t i = 0; i < count; ++i) {
        const auto j = i + static_cast<std::size_t>(rng.below(n - i));
        std::swap(pool[i], pool[j]);
    }
    pool.resize(count);
    std::sort(pool.begin(), pool.end());
    return pool;
}

}  // namespace

void PreprocessConfig::validate() const {
    if (side < 1) throw ConfigError("resize side must be positive");
    for (int c = 0; c < 3; ++c) {
        if (!(std[c] > 0.0)) throw ConfigError("channel std must be > 0");
        if (!std::isfinite(mean[c])) throw ConfigError("channel mean must be finite");
    }
}

NormalizedImage preprocess_image(std::span<const std::uint8_t> bytes, const PreprocessConfig& config) {
    config.validate();
    if (bytes.empty()) throw DecodeError("empty image buffer");
    const cv::Mat buffer(1, static_cast<int>(bytes.size()), CV_8U,
                         const_cast<std::uint8_t*>(bytes.data()));
    cv::Mat decoded;
    try {
        decoded = cv::imdecode(buffer, cv::IMREAD_COLOR | cv::IMREAD_ANYDEPTH);
    } catch (const cv::Exception& e) {
        throw DecodeError(std::string("image decode failed: ") + e.what());
    }
    if (decoded.empty() || decoded.channels() != 3)
        throw DecodeError("bytes do not decode to an RGB raster");

    double scale = 1.0;
    switch (decoded.depth()) {
        case CV_8U: scale = 1.0 / 255.0; break;
        case CV_16U: scale = 1.0 / 65535.0; break;
        case CV_32F: scale = 1.0; break;
        default: throw DecodeError("unsupported pixel depth");
    }
    cv::Mat rgb;
    cv::cvtColor(decoded, rgb, cv::COLOR_BGR2RGB);
    cv::Mat unit;
    rgb.convertTo(unit, CV_32FC3, scale);
    cv::Mat resized;
    cv::resize(unit, resized, cv::Size(config.side, config.side), 0, 0, cv::INTER_LINEAR);

    NormalizedImage out;
    out.side = config.side;
    out.mean = config.mean;
    out.std = config.std;
    const auto s = static_cast<std::size_t>(config.side);
    out.pixels.resize(3 * s * s);
    for (int y = 0; y < config.side; ++y) {
        const auto* row = resized.ptr<cv::Vec3f>(y);
        for (int x = 0; x < config.side; ++x)
            for (int c = 0; c < 3; ++c)
                out.pixels[(static_cast<std::size_t>(c) * s + y) * s + x] = static_cast<float>(
                    (static_cast<double>(row[x][c]) - config.mean[c]) / config.std[c]);
    }
    return out;
}

NormalizedImage apply_augmentation(const NormalizedImage& image, const Augmentation& aug) {
    const auto s = static_cast<std::size_t>(image.side);
    NormalizedImage out = image;
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t y = 0; y < s; ++y)
            for (std::size_t x = 0; x < s; ++x) {
                auto [sy, sx] = source_cell(aug, s, s, y, x);
                out.pixels[(c * s + y) * s + x] = image.pixels[(c * s + sy) * s + sx];
            }
    return out;
}

FeatureBatch apply_augmentation(const FeatureBatch& batch, std::size_t index, const Augmentation& aug) {
    if (index >= batch.n) throw IndexError("image index out of range");
    if ((aug.rotation == 90 || aug.rotation == 270) && batch.h != batch.w)
        throw ShapeError("quarter-turn rotation needs a square feature grid");
    auto [oh, ow] = transformed_dims(aug, batch.h, batch.w);
    FeatureBatch out;
    out.n = 1;
    out.h = oh;
    out.w = ow;
    out.c = batch.c;
    out.backbone_id = batch.backbone_id;
    out.layer = batch.layer;
    out.image_ids = {batch.image_ids.at(index)};
    out.values.resize(oh * ow * batch.c);
    const auto src = batch.image(index);
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            auto [sy, sx] = source_cell(aug, batch.h, batch.w, y, x);
            std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((sy * batch.w + sx) * batch.c),
                        batch.c, out.values.begin() + static_cast<std::ptrdiff_t>((y * ow + x) * batch.c));
        }
    return out;
}

int class_index(std::span<const std::string> classes, std::string_view name) {
    const auto key = lower(name);
    for (std::size_t i = 0; i < classes.size(); ++i)
        if (lower(classes[i]) == key) return static_cast<int>(i);
    return -1;
}

std::vector<ImageRecord> load_metadata(const std::filesystem::path& csv_path,
                                       const MetadataConfig& config) {
    std::ifstream in(csv_path);
    if (!in) throw IOError("cannot open metadata " + csv_path.string());

    std::string line;
    if (!std::getline(in, line)) throw DataError("metadata file is empty: " + csv_path.string());
    const auto header = split_csv_line(line);
    auto column = [&](const std::string& name) {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end())
            throw ConfigError("metadata has no column '" + name + "'");
        return static_cast<std::size_t>(it - header.begin());
    };
    const auto id_col = column(config.id_column);
    const auto label_col = column(config.label_column);

    std::vector<ImageRecord> records;
    std::unordered_set<std::string> seen;
    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (line.empty() || line == "\r") continue;
        const auto fields = split_csv_line(line);
        if (fields.size() <= std::max(id_col, label_col))
            throw DataError("row " + std::to_string(row) + " has too few columns");
        ImageRecord record;
        record.image_id = fields[id_col];
        const int label = class_index(config.classes, fields[label_col]);
        if (label < 0)
            throw LabelError("row " + std::to_string(row) + ": unknown diagnosis '" +
                             fields[label_col] + "'");
        record.label = label;
        if (!seen.insert(record.image_id).second)
            throw DuplicateError("row " + std::to_string(row) + ": duplicate image_id '" +
                                 record.image_id + "'");
        record.source_path = config.image_dir / (record.image_id + config.image_extension);
        records.push_back(std::move(record));
    }
    return records;
}

std::vector<ImageRecord> prepare_training_set(std::span<const ImageRecord> records,
                                              std::size_t per_class, std::uint64_t seed,
                                              const AugmentConfig& augment,
                                              std::size_t num_classes) {
    if (per_class < 1) throw ConfigError("per_class must be at least 1");
    const auto members = group_by_class(records, num_classes);
    Rng rng(seed);
    std::vector<ImageRecord> out;
    out.reserve(per_class * num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
        const auto& idx = members[c];
        if (idx.empty()) throw DataError("class " + std::to_string(c) + " has no records");
        if (idx.size() >= per_class) {
            for (auto pos : sample_without_replacement(idx.size(), per_class, rng))
                out.push_back(records[idx[pos]]);
            continue;
        }
        for (auto i : idx) out.push_back(records[i]);
        for (std::size_t j = 0; j < per_class - idx.size(); ++j) {
            const auto& src = records[idx[rng.below(idx.size())]];
            ImageRecord dup = src;
            dup.origin_id = src.origin_id.empty() ? src.image_id : src.origin_id;
            dup.image_id = src.image_id + "#aug" + std::to_string(j + 1);
            dup.is_augmented = true;
            dup.augmentation = {};
            if (augment.enabled) {
                dup.augmentation.hflip = rng.below(2) == 1;
                dup.augmentation.vflip = rng.below(2) == 1;
                dup.augmentation.rotation = 90 * static_cast<int>(1 + rng.below(3));
            }
            out.push_back(std::move(dup));
        }
    }
    return out;
}

DatasetSplit split_test_set(std::span<const ImageRecord> records, std::size_t per_class,
                            std::uint64_t seed, std::size_t num_classes) {
    const auto members = group_by_class(records, num_classes);
    Rng rng(seed);
    std::vector<bool> in_test(records.size(), false);
    for (std::size_t c = 0; c < num_classes; ++c) {
        const auto& idx = members[c];
        if (idx.size() < per_class)
            throw DataError("class " + std::to_string(c) + " has " + std::to_string(idx.size()) +
                            " records, fewer than the " + std::to_string(per_class) +
                            " needed for the test split");
        for (auto pos : sample_without_replacement(idx.size(), per_class, rng))
            in_test[idx[pos]] = true;
    }
    DatasetSplit split;
    for (std::size_t i = 0; i < records.size(); ++i)
        (in_test[i] ? split.test : split.train).push_back(records[i]);
    return split;
}

}  // namespace evai
