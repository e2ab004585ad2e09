#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include <Eigen/Dense>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "evai/feature_batch.hpp"
#include "evai/rng.hpp"

namespace test {

/// Scratch directory removed on destruction.
class TempDir {
public:
    TempDir() {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("evai-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

private:
    std::filesystem::path path_;
};

inline std::vector<std::uint8_t> encode_png(const cv::Mat& bgr) {
    std::vector<std::uint8_t> out;
    cv::imencode(".png", bgr, out);
    return out;
}

inline std::vector<std::uint8_t> solid_png(int w, int h, std::uint8_t b, std::uint8_t g, std::uint8_t r) {
    return encode_png(cv::Mat(h, w, CV_8UC3, cv::Scalar(b, g, r)));
}

inline Eigen::MatrixXd uniform_matrix(Eigen::Index r, Eigen::Index c, evai::Rng& rng, double lo = 0.0,
                                      double hi = 1.0) {
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
    return m;
}

inline Eigen::MatrixXd normal_matrix(Eigen::Index r, Eigen::Index c, evai::Rng& rng) {
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
    return m;
}

/// Batch of N 1×1 "images" whose feature vectors are the rows of `rows`.
inline evai::FeatureBatch batch_from_rows(const Eigen::MatrixXd& rows) {
    evai::FeatureBatch b;
    b.n = static_cast<std::size_t>(rows.rows());
    b.h = 1;
    b.w = 1;
    b.c = static_cast<std::size_t>(rows.cols());
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
        b.image_ids.push_back("img" + std::to_string(i));
        for (Eigen::Index j = 0; j < rows.cols(); ++j) b.values.push_back(static_cast<float>(rows(i, j)));
    }
    b.backbone_id = "test";
    b.layer = "test";
    return b;
}

inline std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

inline std::vector<std::vector<double>> to_std(const Eigen::MatrixXd& m) {
    std::vector<std::vector<double>> out(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i)
        for (Eigen::Index j = 0; j < m.cols(); ++j) out[static_cast<std::size_t>(i)].push_back(m(i, j));
    return out;
}

}  // namespace test
