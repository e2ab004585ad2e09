#include "evai/concept_basis.hpp"

#include <fstream>

#include "evai/errors.hpp"
#include "evai/feature_file.hpp"
#include "evai/hash.hpp"

namespace evai {
namespace {

TensorFile basis_tensor(const ConceptBasis& basis) {
    TensorFile file;
    file.dims = {static_cast<std::uint32_t>(basis.k()), static_cast<std::uint32_t>(basis.channels())};
    file.values.reserve(static_cast<std::size_t>(basis.directions.size()));
    for (Eigen::Index r = 0; r < basis.k(); ++r)
        for (Eigen::Index c = 0; c < basis.channels(); ++c)
            file.values.push_back(static_cast<float>(basis.directions(r, c)));
    file.trailer = {{"backbone_id", basis.backbone_id}, {"kind", to_string(basis.kind)}};
    return file;
}

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
    return path.string() + ".json";
}

}  // namespace

std::string_view to_string(BasisKind kind) {
    switch (kind) {
        case BasisKind::nmf: return "nmf";
        case BasisKind::pca: return "pca";
        case BasisKind::cav: return "cav";
    }
    return "nmf";
}

BasisKind parse_basis_kind(std::string_view text) {
    if (text == "nmf") return BasisKind::nmf;
    if (text == "pca") return BasisKind::pca;
    if (text == "cav") return BasisKind::cav;
    throw ConfigError("unknown basis kind '" + std::string(text) + "'");
}

std::string ConceptBasis::display_name(Eigen::Index concept_index) const {
    if (concept_index < 0 || concept_index >= k()) throw IndexError("concept index out of range");
    if (!names.empty()) return names[static_cast<std::size_t>(concept_index)];
    return "Feature " + std::to_string(concept_index + 1);
}

void ConceptBasis::validate(double orthonormal_tol) const {
    if (k() < 1 || channels() < 1) throw ConfigError("concept basis must have K >= 1 and C >= 1");
    if (!directions.allFinite()) throw IntegrityError("concept basis has non-finite entries");
    if (!names.empty() && static_cast<Eigen::Index>(names.size()) != k())
        throw IntegrityError("concept basis has " + std::to_string(names.size()) + " names for " +
                             std::to_string(k()) + " concepts");
    switch (kind) {
        case BasisKind::nmf:
            if ((directions.array() < 0.0).any())
                throw IntegrityError("NMF basis has negative entries");
            break;
        case BasisKind::pca: {
            if (mean.size() != channels())
                throw IntegrityError("PCA basis centering mean has wrong length");
            const Eigen::MatrixXd gram = directions * directions.transpose();
            const double err =
                (gram - Eigen::MatrixXd::Identity(k(), k())).cwiseAbs().maxCoeff();
            if (err > orthonormal_tol)
                throw IntegrityError("PCA basis rows are not orthonormal (error " +
                                     std::to_string(err) + ")");
            break;
        }
        case BasisKind::cav:
            for (Eigen::Index r = 0; r < k(); ++r)
                if (directions.row(r).squaredNorm() == 0.0)
                    throw IntegrityError("CAV row " + std::to_string(r) + " is all zeros");
            break;
    }
}

void ConceptBasis::round_to_storage() {
    directions = directions.cast<float>().cast<double>();
}

nlohmann::json basis_sidecar(const ConceptBasis& basis) {
    nlohmann::json j;
    j["kind"] = to_string(basis.kind);
    j["k"] = basis.k();
    j["channels"] = basis.channels();
    j["names"] = basis.names;
    j["backbone_id"] = basis.backbone_id;
    j["mean"] = std::vector<double>(basis.mean.data(), basis.mean.data() + basis.mean.size());
    j["config"] = basis.config;
    return j;
}

std::string ConceptBasis::hash() const {
    auto bytes = encode_tensor(basis_tensor(*this));
    const auto side = basis_sidecar(*this).dump();
    bytes.insert(bytes.end(), side.begin(), side.end());
    return sha256_hex(bytes);
}

void save_basis(const std::filesystem::path& path, const ConceptBasis& basis) {
    write_tensor_file(path, basis_tensor(basis));
    std::ofstream out(sidecar_path(path));
    if (!out) throw IOError("cannot write " + sidecar_path(path).string());
    out << basis_sidecar(basis).dump(2) << '\n';
}

ConceptBasis load_basis(const std::filesystem::path& path) {
    auto file = read_tensor_file(path);
    if (file.dims.size() != 2) throw FormatError("concept basis must be a 2-D tensor", 8);

    std::ifstream in(sidecar_path(path));
    if (!in) throw IOError("missing basis sidecar " + sidecar_path(path).string());
    nlohmann::json side;
    try {
        side = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("malformed basis sidecar: " + std::string(e.what()));
    }

    ConceptBasis basis;
    const auto k = static_cast<Eigen::Index>(file.dims[0]);
    const auto c = static_cast<Eigen::Index>(file.dims[1]);
    basis.directions.resize(k, c);
    for (Eigen::Index r = 0; r < k; ++r)
        for (Eigen::Index col = 0; col < c; ++col)
            basis.directions(r, col) = file.values[static_cast<std::size_t>(r * c + col)];
    try {
        basis.kind = parse_basis_kind(side.at("kind").get<std::string>());
        basis.names = side.value("names", std::vector<std::string>{});
        basis.backbone_id = side.value("backbone_id", "");
        const auto mean = side.value("mean", std::vector<double>{});
        basis.mean = Eigen::Map<const Eigen::VectorXd>(mean.data(), static_cast<Eigen::Index>(mean.size()));
        basis.config = side.value("config", nlohmann::json::object());
    } catch (const nlohmann::json::exception& e) {
        throw IntegrityError("malformed basis sidecar: " + std::string(e.what()));
    }
    // Directions are stored as float32, so orthonormality only holds to that precision.
    basis.validate(1e-5);
    return basis;
}

Eigen::MatrixXd stack_scores(const std::vector<ConceptScoreVector>& vectors) {
    if (vectors.empty()) return {};
    Eigen::MatrixXd out(static_cast<Eigen::Index>(vectors.size()), vectors.front().scores.size());
    for (std::size_t i = 0; i < vectors.size(); ++i) {
        if (vectors[i].scores.size() != out.cols()) throw ShapeError("score vectors differ in length");
        out.row(static_cast<Eigen::Index>(i)) = vectors[i].scores.transpose();
    }
    return out;
}

}  // namespace evai
