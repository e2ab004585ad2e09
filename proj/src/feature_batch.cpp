#include "evai/feature_batch.hpp"

#include <cmath>

#include "evai/errors.hpp"
#include "evai/feature_file.hpp"

namespace evai {

void FeatureBatch::validate() const {
    if (n == 0) throw ShapeError("feature batch is empty");
    if (values.size() != n * h * w * c)
        throw ShapeError("feature batch holds " + std::to_string(values.size()) +
                         " values, expected " + std::to_string(n * h * w * c));
    if (image_ids.size() != n)
        throw ShapeError("feature batch has " + std::to_string(image_ids.size()) +
                         " ids for " + std::to_string(n) + " images");
    for (float v : values)
        if (!std::isfinite(v)) throw DomainError("non-finite feature value");
}

FeatureBatch slice(const FeatureBatch& batch, std::span<const std::size_t> indices) {
    FeatureBatch out;
    out.n = indices.size();
    out.h = batch.h;
    out.w = batch.w;
    out.c = batch.c;
    out.backbone_id = batch.backbone_id;
    out.layer = batch.layer;
    out.values.reserve(out.n * out.h * out.w * out.c);
    for (auto i : indices) {
        if (i >= batch.n) throw IndexError("image index out of range");
        auto img = batch.image(i);
        out.values.insert(out.values.end(), img.begin(), img.end());
        out.image_ids.push_back(batch.image_ids[i]);
    }
    return out;
}

Eigen::MatrixXd flatten_locations(const FeatureBatch& batch) {
    const auto rows = static_cast<Eigen::Index>(batch.n * batch.h * batch.w);
    const auto cols = static_cast<Eigen::Index>(batch.c);
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> view(
        batch.values.data(), rows, cols);
    return view.cast<double>();
}

Eigen::MatrixXd pooled_features(const FeatureBatch& batch) {
    const auto locations = batch.h * batch.w;
    Eigen::MatrixXd pooled = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(batch.n),
                                                   static_cast<Eigen::Index>(batch.c));
    if (locations == 0) return pooled;
    for (std::size_t i = 0; i < batch.n; ++i) {
        auto img = batch.image(i);
        for (std::size_t loc = 0; loc < locations; ++loc)
            for (std::size_t ch = 0; ch < batch.c; ++ch)
                pooled(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(ch)) +=
                    img[loc * batch.c + ch];
    }
    pooled /= static_cast<double>(locations);
    return pooled;
}

void save_feature_batch(const std::filesystem::path& path, const FeatureBatch& batch) {
    if (batch.values.size() != batch.n * batch.h * batch.w * batch.c)
        throw ShapeError("feature batch dims do not match value count");
    TensorFile file;
    file.dims = {static_cast<std::uint32_t>(batch.n), static_cast<std::uint32_t>(batch.h),
                 static_cast<std::uint32_t>(batch.w), static_cast<std::uint32_t>(batch.c)};
    file.values = batch.values;
    file.trailer = {{"backbone_id", batch.backbone_id},
                    {"layer", batch.layer},
                    {"image_ids", batch.image_ids}};
    write_tensor_file(path, file);
}

FeatureBatch load_feature_batch(const std::filesystem::path& path) {
    auto file = read_tensor_file(path);
    if (file.dims.size() != 4)
        throw FormatError("feature batch must have 4 dims, found " +
                              std::to_string(file.dims.size()),
                          8);
    FeatureBatch batch;
    batch.n = file.dims[0];
    batch.h = file.dims[1];
    batch.w = file.dims[2];
    batch.c = file.dims[3];
    batch.values = std::move(file.values);
    if (file.trailer.is_object()) {
        batch.backbone_id = file.trailer.value("backbone_id", "");
        batch.layer = file.trailer.value("layer", "");
        batch.image_ids = file.trailer.value("image_ids", std::vector<std::string>{});
    }
    return batch;
}

FeatureBatch feature_file_roundtrip(const FeatureBatch& batch, const std::filesystem::path& path) {
    save_feature_batch(path, batch);
    return load_feature_batch(path);
}

}  // namespace evai
