#include "evai/evidence.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "evai/errors.hpp"

namespace evai {
namespace {

constexpr double kLog2Pi = 1.8378770664093454835606594728112;

void check_hypothesis(const GaussianEvidenceModel& model, Eigen::Index h) {
    if (h < 0 || h >= model.hypotheses())
        throw IndexError("hypothesis " + std::to_string(h) + " out of range (|H| = " +
                         std::to_string(model.hypotheses()) + ")");
}

void check_evidence(const GaussianEvidenceModel& model, const Eigen::VectorXd& e) {
    if (e.size() != model.concepts())
        throw ShapeError("evidence vector has " + std::to_string(e.size()) + " entries, model expects " +
                         std::to_string(model.concepts()));
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j, const char* what) {
    const auto rows = j.get<std::vector<std::vector<double>>>();
    if (rows.empty()) return {};
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r].size() != rows.front().size())
            throw IntegrityError(std::string("ragged matrix '") + what + "'");
        for (std::size_t c = 0; c < rows[r].size(); ++c)
            m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
    }
    return m;
}

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
    auto out = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        std::vector<double> row(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index c = 0; c < m.cols(); ++c) row[static_cast<std::size_t>(c)] = m(r, c);
        out.push_back(row);
    }
    return out;
}

}  // namespace

PriorMode parse_prior_mode(std::string_view text) {
    if (text == "uniform") return PriorMode::uniform;
    if (text == "empirical") return PriorMode::empirical;
    throw ConfigError("unknown prior mode '" + std::string(text) + "'");
}

void GaussianEvidenceModel::validate() const {
    const auto h = hypotheses();
    const auto k = concepts();
    if (h < 1 || k < 1) throw IntegrityError("evidence model needs |H| >= 1 and K >= 1");
    if (variances.rows() != h || variances.cols() != k)
        throw IntegrityError("variance matrix shape does not match means");
    if (priors.size() != h) throw IntegrityError("prior vector length does not match |H|");
    if (static_cast<Eigen::Index>(hypothesis_names.size()) != h)
        throw IntegrityError("hypothesis name count does not match |H|");
    if (!concept_names.empty() && static_cast<Eigen::Index>(concept_names.size()) != k)
        throw IntegrityError("concept name count does not match K");
    if (!(var_floor > 0.0) || !std::isfinite(var_floor)) throw IntegrityError("var_floor must be > 0");
    if (!means.allFinite()) throw IntegrityError("means must be finite");
    if (!variances.allFinite() || (variances.array() < var_floor).any())
        throw IntegrityError("variances must be finite and >= var_floor");
    if (!priors.allFinite() || (priors.array() <= 0.0).any()) throw IntegrityError("priors must be > 0");
    if (std::abs(priors.sum() - 1.0) > 1e-12)
        throw IntegrityError("priors sum to " + std::to_string(priors.sum()) + ", not 1");
}

GaussianEvidenceModel fit_gnb(const Eigen::MatrixXd& scores, std::span<const int> labels,
                              std::vector<std::string> hypothesis_names, PriorMode prior_mode,
                              double var_floor) {
    if (!(var_floor > 0.0)) throw ConfigError("var_floor must be > 0");
    if (static_cast<Eigen::Index>(labels.size()) != scores.rows())
        throw ShapeError("fit_gnb: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(scores.rows()) + " score rows");
    const auto h = static_cast<Eigen::Index>(hypothesis_names.size());
    const auto k = scores.cols();
    if (h < 1) throw ConfigError("fit_gnb needs at least one hypothesis");
    if (k < 1) throw ShapeError("fit_gnb needs at least one concept");

    Eigen::VectorXd counts = Eigen::VectorXd::Zero(h);
    GaussianEvidenceModel model;
    model.means = Eigen::MatrixXd::Zero(h, k);
    model.variances = Eigen::MatrixXd::Zero(h, k);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const int label = labels[i];
        if (label < 0 || label >= h) throw DataError("label " + std::to_string(label) + " out of range");
        counts(label) += 1.0;
        model.means.row(label) += scores.row(static_cast<Eigen::Index>(i));
    }
    for (Eigen::Index c = 0; c < h; ++c)
        if (counts(c) == 0.0)
            throw DataError("hypothesis '" + hypothesis_names[static_cast<std::size_t>(c)] + "' has no samples");
    for (Eigen::Index c = 0; c < h; ++c) model.means.row(c) /= counts(c);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto diff = scores.row(static_cast<Eigen::Index>(i)) - model.means.row(labels[i]);
        model.variances.row(labels[i]) += diff.cwiseProduct(diff);
    }
    for (Eigen::Index c = 0; c < h; ++c) model.variances.row(c) /= counts(c);
    model.variances = model.variances.cwiseMax(var_floor);

    if (prior_mode == PriorMode::uniform)
        model.priors = Eigen::VectorXd::Constant(h, 1.0 / static_cast<double>(h));
    else
        model.priors = counts / counts.sum();
    model.hypothesis_names = std::move(hypothesis_names);
    model.var_floor = var_floor;
    return model;
}

double log_normal_density(double x, double mean, double variance) {
    const double d = x - mean;
    return -0.5 * (kLog2Pi + std::log(variance) + d * d / variance);
}

double log_class_likelihood(const GaussianEvidenceModel& model, Eigen::Index h, const Eigen::VectorXd& e) {
    check_hypothesis(model, h);
    check_evidence(model, e);
    double total = 0.0;
    for (Eigen::Index i = 0; i < e.size(); ++i)
        total += log_normal_density(e(i), model.means(h, i), model.variances(h, i));
    return total;
}

double log_sum_exp(std::span<const double> values) {
    if (values.empty()) return -std::numeric_limits<double>::infinity();
    const double peak = *std::max_element(values.begin(), values.end());
    if (!std::isfinite(peak)) return peak;
    double sum = 0.0;
    for (double v : values) sum += std::exp(v - peak);
    return peak + std::log(sum);
}

WoEDecomposition woe(const GaussianEvidenceModel& model, Eigen::Index h, const Eigen::VectorXd& e) {
    const auto num_h = model.hypotheses();
    if (num_h < 2) throw ConfigError("weight of evidence needs at least two hypotheses");
    check_hypothesis(model, h);
    check_evidence(model, e);

    double rest_prior = 0.0;
    for (Eigen::Index o = 0; o < num_h; ++o)
        if (o != h) rest_prior += model.priors(o);
    const double log_rest = std::log(rest_prior);

    std::vector<double> mixture_weight;  // log P(h') − log P(¬h)
    for (Eigen::Index o = 0; o < num_h; ++o)
        if (o != h) mixture_weight.push_back(std::log(model.priors(o)) - log_rest);

    WoEDecomposition out;
    out.hypothesis = h;
    out.per_concept.resize(model.concepts());
    std::vector<double> terms(mixture_weight.size());
    for (Eigen::Index i = 0; i < model.concepts(); ++i) {
        std::size_t t = 0;
        for (Eigen::Index o = 0; o < num_h; ++o) {
            if (o == h) continue;
            terms[t] = mixture_weight[t] + log_normal_density(e(i), model.means(o, i), model.variances(o, i));
            ++t;
        }
        out.per_concept(i) = log_normal_density(e(i), model.means(h, i), model.variances(h, i)) - log_sum_exp(terms);
    }

    std::size_t t = 0;
    for (Eigen::Index o = 0; o < num_h; ++o) {
        if (o == h) continue;
        terms[t] = mixture_weight[t] + log_class_likelihood(model, o, e);
        ++t;
    }
    out.total_woe = log_class_likelihood(model, h, e) - log_sum_exp(terms);
    out.prior_log_odds = std::log(model.priors(h)) - log_rest;
    out.posterior_log_odds = out.prior_log_odds + out.total_woe;
    return out;
}

Eigen::Index classify(const GaussianEvidenceModel& model, const Eigen::VectorXd& e) {
    check_evidence(model, e);
    Eigen::Index best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (Eigen::Index h = 0; h < model.hypotheses(); ++h) {
        const double score = std::log(model.priors(h)) + log_class_likelihood(model, h, e);
        if (score > best_score) {
            best_score = score;
            best = h;
        }
    }
    return best;
}

nlohmann::json to_json(const GaussianEvidenceModel& model) {
    nlohmann::json j;
    j["format"] = "evai-gaussian-evidence";
    j["version"] = 1;
    j["hypothesis_names"] = model.hypothesis_names;
    j["concept_names"] = model.concept_names;
    j["means"] = matrix_to_json(model.means);
    j["variances"] = matrix_to_json(model.variances);
    j["priors"] = std::vector<double>(model.priors.data(), model.priors.data() + model.priors.size());
    j["var_floor"] = model.var_floor;
    j["basis_hash"] = model.basis_hash;
    return j;
}

GaussianEvidenceModel evidence_model_from_json(const nlohmann::json& j) {
    GaussianEvidenceModel model;
    try {
        if (j.value("format", "") != "evai-gaussian-evidence")
            throw IntegrityError("not a Gaussian evidence model");
        model.hypothesis_names = j.at("hypothesis_names").get<std::vector<std::string>>();
        model.concept_names = j.value("concept_names", std::vector<std::string>{});
        model.means = matrix_from_json(j.at("means"), "means");
        model.variances = matrix_from_json(j.at("variances"), "variances");
        const auto priors = j.at("priors").get<std::vector<double>>();
        model.priors = Eigen::Map<const Eigen::VectorXd>(priors.data(), static_cast<Eigen::Index>(priors.size()));
        model.var_floor = j.at("var_floor").get<double>();
        model.basis_hash = j.value("basis_hash", "");
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError(std::string("malformed evidence model: ") + e.what());
    }
    model.validate();
    return model;
}

void save_evidence_model(const std::filesystem::path& path, const GaussianEvidenceModel& model) {
    model.validate();
    std::ofstream out(path);
    if (!out) throw IOError("cannot write " + path.string());
    out << to_json(model).dump(2) << '\n';
}

GaussianEvidenceModel load_evidence_model(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IOError("cannot open evidence model " + path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("malformed evidence model " + path.string() + ": " + e.what());
    }
    return evidence_model_from_json(j);
}

}  // namespace evai
