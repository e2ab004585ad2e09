#include "evai/synthetic.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "evai/errors.hpp"
#include "evai/rng.hpp"

namespace evai {
namespace {

void append_image(FeatureBatch& batch, const Eigen::MatrixXd& patterns, int label, const PlantedOptions& o,
                  Rng& rng) {
    const auto k = static_cast<Eigen::Index>(o.classes);
    for (std::size_t loc = 0; loc < o.grid * o.grid; ++loc) {
        Eigen::VectorXd coef(k);
        for (Eigen::Index j = 0; j < k; ++j)
            coef(j) = j == label ? o.own * rng.uniform(0.6, 1.4) : rng.uniform(0.0, o.other);
        const Eigen::VectorXd v = patterns.transpose() * coef;
        for (Eigen::Index ch = 0; ch < v.size(); ++ch)
            batch.values.push_back(static_cast<float>(v(ch) + std::abs(o.noise * rng.normal())));
    }
    batch.image_ids.push_back(std::to_string(batch.image_ids.size()));
    ++batch.n;
}

FeatureBatch empty_batch(const PlantedOptions& o, const std::string& prefix) {
    FeatureBatch b;
    b.h = b.w = o.grid;
    b.c = o.channels;
    b.backbone_id = "planted";
    b.layer = prefix;
    return b;
}

cv::Scalar class_colour(int label) {
    static const cv::Scalar colours[] = {{60, 90, 170},  {140, 120, 200}, {70, 110, 140}, {90, 70, 110},
                                         {40, 30, 50},   {50, 80, 120},   {80, 40, 200}};
    return colours[static_cast<std::size_t>(label) % 7];
}

cv::Scalar concept_colour(int index) {
    const double hue = 180.0 * index / 12.0;
    cv::Mat hsv(1, 1, CV_8UC3, cv::Scalar(hue, 220, 230)), bgr;
    cv::cvtColor(hsv, bgr, cv::COLOR_HSV2BGR);
    const auto px = bgr.at<cv::Vec3b>(0, 0);
    return {static_cast<double>(px[0]), static_cast<double>(px[1]), static_cast<double>(px[2])};
}

cv::Mat lesion(int label, Rng& rng, int side) {
    cv::Mat img(side, side, CV_8UC3, cv::Scalar(150, 170, 215));
    const cv::Point centre(static_cast<int>(side * rng.uniform(0.4, 0.6)), static_cast<int>(side * rng.uniform(0.4, 0.6)));
    const cv::Size axes(static_cast<int>(side * rng.uniform(0.18, 0.3)), static_cast<int>(side * rng.uniform(0.18, 0.3)));
    cv::ellipse(img, centre, axes, rng.uniform(0.0, 180.0), 0, 360, class_colour(label), cv::FILLED);
    for (int i = 0; i < side * side / 16; ++i) {
        auto& px = img.at<cv::Vec3b>(static_cast<int>(rng.below(static_cast<std::uint64_t>(side))),
                                     static_cast<int>(rng.below(static_cast<std::uint64_t>(side))));
        for (int ch = 0; ch < 3; ++ch)
            px[ch] = static_cast<std::uint8_t>(std::clamp(px[ch] + static_cast<int>(rng.normal() * 12.0), 0, 255));
    }
    return img;
}

std::vector<std::uint8_t> png(const cv::Mat& img) {
    std::vector<std::uint8_t> out;
    cv::imencode(".png", img, out);
    return out;
}

}  // namespace

PlantedDataset planted_concept_dataset(const PlantedOptions& o) {
    if (o.classes < 2) throw ConfigError("a planted dataset needs at least two classes");
    if (o.channels < o.classes) throw ConfigError("need at least one channel per planted pattern");
    if (o.grid == 0 || o.train_per_class == 0 || o.test_per_class == 0)
        throw ConfigError("grid and per-class counts must be positive");
    Rng rng(o.seed);
    PlantedDataset d;
    const auto k = static_cast<Eigen::Index>(o.classes);
    const auto c = static_cast<Eigen::Index>(o.channels);
    d.patterns = Eigen::MatrixXd::Zero(k, c);
    const Eigen::Index block = c / k;
    for (Eigen::Index j = 0; j < k; ++j) {
        const Eigen::Index end = j + 1 == k ? c : (j + 1) * block;
        for (Eigen::Index ch = j * block; ch < end; ++ch) d.patterns(j, ch) = rng.uniform(0.5, 1.5);
    }
    for (std::size_t j = 0; j < o.classes; ++j) d.hypotheses.push_back("class" + std::to_string(j));

    d.train = empty_batch(o, "train");
    d.test = empty_batch(o, "test");
    for (std::size_t i = 0; i < o.train_per_class; ++i)
        for (int label = 0; label < static_cast<int>(o.classes); ++label) {
            append_image(d.train, d.patterns, label, o, rng);
            d.train_labels.push_back(label);
        }
    for (std::size_t i = 0; i < o.test_per_class; ++i)
        for (int label = 0; label < static_cast<int>(o.classes); ++label) {
            append_image(d.test, d.patterns, label, o, rng);
            d.test_labels.push_back(label);
        }
    for (auto& id : d.train.image_ids) id = "train" + id;
    for (auto& id : d.test.image_ids) id = "test" + id;
    return d;
}

std::vector<std::uint8_t> synthetic_lesion_png(int label, std::uint64_t seed, int side) {
    if (side < 8) throw ConfigError("synthetic images need side >= 8");
    Rng rng(seed * 7919 + static_cast<std::uint64_t>(label));
    return png(lesion(label, rng, side));
}

std::vector<std::uint8_t> synthetic_concept_png(int concept_index, bool positive, std::uint64_t seed, int side) {
    if (side < 8) throw ConfigError("synthetic images need side >= 8");
    Rng rng(seed * 104729 + static_cast<std::uint64_t>(concept_index) * 2 + (positive ? 1 : 0));
    cv::Mat img = lesion(static_cast<int>(rng.below(7)), rng, side);
    if (positive) {
        const int step = 4 + concept_index % 4;
        const int radius = 1 + concept_index % 3;
        const auto colour = concept_colour(concept_index);
        for (int y = step / 2; y < side; y += step)
            for (int x = step / 2; x < side; x += step)
                if (rng.uniform() < 0.8) cv::circle(img, {x, y}, radius, colour, cv::FILLED);
    }
    return png(img);
}

}  // namespace evai
