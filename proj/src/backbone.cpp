#include "evai/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <thread>

#include <opencv2/dnn.hpp>

#include "evai/errors.hpp"
#include "evai/rng.hpp"

namespace evai {

FeatureBatch extract_features(const Backbone& backbone, std::span<const NormalizedImage> images,
                              std::span<const std::string> image_ids, unsigned threads) {
    if (images.size() != image_ids.size())
        throw ShapeError("extract_features: " + std::to_string(images.size()) + " images but " +
                         std::to_string(image_ids.size()) + " ids");
    if (images.empty()) throw ShapeError("extract_features: no images");
    for (const auto& img : images)
        if (img.side != backbone.input_side())
            throw BackboneError("image side " + std::to_string(img.side) +
                                " does not match backbone input " +
                                std::to_string(backbone.input_side()));

    std::vector<FeatureMap> maps(images.size());
    auto work = [&](std::size_t begin, std::size_t step) {
        for (std::size_t i = begin; i < images.size(); i += step) maps[i] = backbone.forward(images[i]);
    };
    threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(images.size())));
    if (threads == 1) {
        work(0, 1);
    } else {
        std::vector<std::exception_ptr> errors(threads);
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < threads; ++t)
            pool.emplace_back([&, t] {
                try {
                    work(t, threads);
                } catch (...) {
                    errors[t] = std::current_exception();
                }
            });
        for (auto& th : pool) th.join();
        for (auto& e : errors)
            if (e) std::rethrow_exception(e);
    }

    FeatureBatch batch;
    batch.n = images.size();
    batch.h = maps[0].h;
    batch.w = maps[0].w;
    batch.c = maps[0].c;
    batch.backbone_id = backbone.id();
    batch.layer = backbone.layer();
    batch.image_ids.assign(image_ids.begin(), image_ids.end());
    batch.values.reserve(batch.n * batch.h * batch.w * batch.c);
    for (const auto& m : maps) {
        if (m.h != batch.h || m.w != batch.w || m.c != batch.c ||
            m.values.size() != m.h * m.w * m.c)
            throw BackboneError("backbone produced inconsistent feature shapes");
        batch.values.insert(batch.values.end(), m.values.begin(), m.values.end());
    }
    batch.validate();
    return batch;
}

struct OnnxBackbone::Impl {
    cv::dnn::Net net;
    std::mutex mutex;
};

OnnxBackbone::OnnxBackbone(const std::filesystem::path& model_path, int input_side,
                           std::string output_layer, std::string id)
    : impl_(std::make_unique<Impl>()),
      side_(input_side),
      layer_(std::move(output_layer)),
      id_(std::move(id)) {
    if (!std::filesystem::exists(model_path))
        throw IOError("backbone model not found: " + model_path.string());
    try {
        impl_->net = cv::dnn::readNetFromONNX(model_path.string());
    } catch (const cv::Exception& e) {
        throw BackboneError("cannot load ONNX model " + model_path.string() + ": " + e.what());
    }
    if (impl_->net.empty()) throw BackboneError("empty ONNX model " + model_path.string());
    impl_->net.setPreferableBackend(cv::dnn::DNN_BACKEND_OPENCV);
    impl_->net.setPreferableTarget(cv::dnn::DNN_TARGET_CPU);
    if (layer_.empty()) {
        const auto outputs = impl_->net.getUnconnectedOutLayersNames();
        layer_ = outputs.empty() ? std::string{"output"} : outputs.front();
    }
    if (id_.empty()) id_ = model_path.stem().string();
}

OnnxBackbone::~OnnxBackbone() = default;

FeatureMap OnnxBackbone::forward(const NormalizedImage& image) const {
    if (image.side != side_)
        throw BackboneError("image side " + std::to_string(image.side) +
                            " does not match backbone input " + std::to_string(side_));
    const int sizes[] = {1, 3, side_, side_};
    cv::Mat blob(4, sizes, CV_32F);
    std::copy(image.pixels.begin(), image.pixels.end(), blob.ptr<float>());

    cv::Mat out;
    {
        std::lock_guard lock(impl_->mutex);
        try {
            impl_->net.setInput(blob);
            out = impl_->net.forward(layer_).clone();
        } catch (const cv::Exception& e) {
            throw BackboneError(std::string("backbone inference failed: ") + e.what());
        }
    }

    FeatureMap map;
    if (out.dims == 4) {
        map.c = static_cast<std::size_t>(out.size[1]);
        map.h = static_cast<std::size_t>(out.size[2]);
        map.w = static_cast<std::size_t>(out.size[3]);
    } else if (out.dims == 2) {
        map.c = static_cast<std::size_t>(out.size[1]);
        map.h = map.w = 1;
    } else {
        throw BackboneError("unexpected output rank " + std::to_string(out.dims));
    }
    const float* src = out.ptr<float>();
    map.values.resize(map.h * map.w * map.c);
    for (std::size_t ch = 0; ch < map.c; ++ch)
        for (std::size_t y = 0; y < map.h; ++y)
            for (std::size_t x = 0; x < map.w; ++x)
                map.values[(y * map.w + x) * map.c + ch] = src[(ch * map.h + y) * map.w + x];
    return map;
}

GridStatsBackbone::GridStatsBackbone(int input_side, int grid, int channels, std::uint64_t seed)
    : side_(input_side), grid_(grid), channels_(channels), seed_(seed) {
    if (grid < 1 || grid > input_side) throw ConfigError("grid must be in 1..input_side");
    if (channels < 1) throw ConfigError("channels must be positive");
    Rng rng(seed);
    weights_.resize(static_cast<std::size_t>(channels) * 6);
    bias_.resize(static_cast<std::size_t>(channels));
    for (auto& w : weights_) w = rng.normal() / std::sqrt(6.0);
    for (auto& b : bias_) b = 0.1 * rng.normal();
}

std::string GridStatsBackbone::id() const {
    return "grid-stats-g" + std::to_string(grid_) + "-c" + std::to_string(channels_) + "-s" +
           std::to_string(seed_);
}

FeatureMap GridStatsBackbone::forward(const NormalizedImage& image) const {
    if (image.side != side_)
        throw BackboneError("image side " + std::to_string(image.side) +
                            " does not match backbone input " + std::to_string(side_));
    FeatureMap map;
    map.h = map.w = static_cast<std::size_t>(grid_);
    map.c = static_cast<std::size_t>(channels_);
    map.values.resize(map.h * map.w * map.c);
    for (int gy = 0; gy < grid_; ++gy) {
        const int y0 = gy * side_ / grid_, y1 = (gy + 1) * side_ / grid_;
        for (int gx = 0; gx < grid_; ++gx) {
            const int x0 = gx * side_ / grid_, x1 = (gx + 1) * side_ / grid_;
            double stats[6];
            const double count = static_cast<double>((y1 - y0) * (x1 - x0));
            for (int c = 0; c < 3; ++c) {
                double sum = 0.0, sq = 0.0;
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) {
                        const double v = image.at(c, y, x);
                        sum += v;
                        sq += v * v;
                    }
                const double mean = sum / count;
                stats[c] = mean;
                stats[3 + c] = std::sqrt(std::max(0.0, sq / count - mean * mean));
            }
            for (int ch = 0; ch < channels_; ++ch) {
                double acc = bias_[static_cast<std::size_t>(ch)];
                for (int j = 0; j < 6; ++j) acc += weights_[static_cast<std::size_t>(ch) * 6 + j] * stats[j];
                map.values[(static_cast<std::size_t>(gy) * map.w + gx) * map.c + ch] =
                    static_cast<float>(std::max(0.0, acc));
            }
        }
    }
    return map;
}

}  // namespace evai
