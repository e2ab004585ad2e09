#include "evai/linear_head.hpp"

#include "evai/errors.hpp"

namespace evai {
namespace {

Eigen::MatrixXd one_hot(std::span<const int> labels, Eigen::Index num_classes) {
    Eigen::MatrixXd y = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(labels.size()), num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= num_classes)
            throw DataError("label " + std::to_string(labels[i]) + " out of range");
        y(static_cast<Eigen::Index>(i), labels[i]) = 1.0;
    }
    return y;
}

}  // namespace

std::string_view to_string(HeadKind kind) {
    return kind == HeadKind::ridge ? "ridge" : "original";
}

RidgeSystem ridge_normal_equations(const Eigen::MatrixXd& x, std::span<const int> labels,
                                   Eigen::Index num_classes, double lambda) {
    if (!(lambda >= 0.0)) throw ConfigError("ridge lambda must be >= 0");
    if (x.rows() < 1) throw DataError("ridge needs at least one sample");
    if (static_cast<Eigen::Index>(labels.size()) != x.rows())
        throw ShapeError("ridge: label count does not match sample count");
    const Eigen::Index d = x.cols();
    Eigen::MatrixXd aug(x.rows(), d + 1);
    aug.leftCols(d) = x;
    aug.col(d).setOnes();
    RidgeSystem sys;
    sys.lhs = aug.transpose() * aug;
    sys.lhs.diagonal().head(d).array() += lambda;
    sys.rhs = aug.transpose() * one_hot(labels, num_classes);
    return sys;
}

LinearHead fit_ridge(const Eigen::MatrixXd& x, std::span<const int> labels,
                     std::vector<std::string> hypothesis_names, double lambda) {
    const auto h = static_cast<Eigen::Index>(hypothesis_names.size());
    if (h < 1) throw ConfigError("ridge needs at least one hypothesis");
    const auto sys = ridge_normal_equations(x, labels, h, lambda);
    const auto qr = sys.lhs.colPivHouseholderQr();
    if (qr.rank() < sys.lhs.rows())
        throw SingularError("ridge normal equations are singular (rank " + std::to_string(qr.rank()) + " of " +
                            std::to_string(sys.lhs.rows()) + "); use lambda > 0");
    const Eigen::MatrixXd coef = qr.solve(sys.rhs);  // (D+1)×H
    LinearHead head;
    head.kind = HeadKind::ridge;
    head.weights = coef.topRows(x.cols()).transpose();
    head.bias = coef.row(x.cols()).transpose();
    head.hypothesis_names = std::move(hypothesis_names);
    return head;
}

Eigen::MatrixXd stacked_coefficients(const LinearHead& head) {
    Eigen::MatrixXd out(head.weights.cols() + 1, head.weights.rows());
    out.topRows(head.weights.cols()) = head.weights.transpose();
    out.row(head.weights.cols()) = head.bias.transpose();
    return out;
}

Eigen::VectorXd head_scores(const LinearHead& head, const Eigen::VectorXd& input) {
    if (input.size() != head.weights.cols())
        throw ShapeError("head expects " + std::to_string(head.weights.cols()) + " inputs, got " +
                         std::to_string(input.size()));
    return head.weights * input + head.bias;
}

Eigen::Index argmax(const Eigen::VectorXd& values) {
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < values.size(); ++i)
        if (values(i) > values(best)) best = i;
    return best;
}

Eigen::Index apply_head(const LinearHead& head, const Eigen::VectorXd& input) {
    return argmax(head_scores(head, input));
}

nlohmann::json to_json(const LinearHead& head) {
    nlohmann::json j;
    j["format"] = "evai-linear-head";
    j["kind"] = to_string(head.kind);
    j["hypothesis_names"] = head.hypothesis_names;
    auto weights = nlohmann::json::array();
    for (Eigen::Index r = 0; r < head.weights.rows(); ++r) {
        std::vector<double> row(static_cast<std::size_t>(head.weights.cols()));
        for (Eigen::Index c = 0; c < head.weights.cols(); ++c) row[static_cast<std::size_t>(c)] = head.weights(r, c);
        weights.push_back(row);
    }
    j["weights"] = weights;
    j["bias"] = std::vector<double>(head.bias.data(), head.bias.data() + head.bias.size());
    return j;
}

LinearHead linear_head_from_json(const nlohmann::json& j) {
    LinearHead head;
    try {
        const auto kind = j.at("kind").get<std::string>();
        if (kind == "ridge") head.kind = HeadKind::ridge;
        else if (kind == "original") head.kind = HeadKind::original;
        else throw IntegrityError("unknown head kind '" + kind + "'");
        head.hypothesis_names = j.at("hypothesis_names").get<std::vector<std::string>>();
        const auto rows = j.at("weights").get<std::vector<std::vector<double>>>();
        const auto bias = j.at("bias").get<std::vector<double>>();
        const auto h = static_cast<Eigen::Index>(rows.size());
        const auto d = rows.empty() ? 0 : static_cast<Eigen::Index>(rows.front().size());
        head.weights.resize(h, d);
        for (Eigen::Index r = 0; r < h; ++r) {
            if (static_cast<Eigen::Index>(rows[static_cast<std::size_t>(r)].size()) != d)
                throw IntegrityError("ragged head weights");
            for (Eigen::Index c = 0; c < d; ++c) head.weights(r, c) = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
        }
        head.bias = Eigen::Map<const Eigen::VectorXd>(bias.data(), static_cast<Eigen::Index>(bias.size()));
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("malformed linear head: ") + e.what());
    }
    if (head.bias.size() != head.weights.rows() ||
        static_cast<Eigen::Index>(head.hypothesis_names.size()) != head.weights.rows())
        throw IntegrityError("linear head shapes disagree");
    if (!head.weights.allFinite() || !head.bias.allFinite()) throw IntegrityError("linear head has non-finite entries");
    return head;
}

}  // namespace evai
