#include "evai/feature_file.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <limits>

#include "evai/errors.hpp"
#include "evai/hash.hpp"

namespace evai {
namespace {

constexpr char kMagic[4] = {'E', 'V', 'A', 'I'};
constexpr std::uint8_t kDtypeFloat32 = 0;
constexpr std::uint32_t kMaxDims = 16;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t raw[sizeof(T)];
    std::memcpy(raw, &value, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    out.insert(out.end(), raw, raw + sizeof(T));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

    std::uint64_t offset() const { return pos_; }
    std::uint64_t remaining() const { return bytes_.size() - pos_; }

    void need(std::uint64_t count, const char* what) const {
        if (remaining() < count) throw FormatError(std::string("truncated ") + what, pos_);
    }

    template <typename T>
    T get(const char* what) {
        need(sizeof(T), what);
        std::uint8_t raw[sizeof(T)];
        std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
        if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
        T value;
        std::memcpy(&value, raw, sizeof(T));
        pos_ += sizeof(T);
        return value;
    }

    std::span<const std::uint8_t> take(std::uint64_t count, const char* what) {
        need(count, what);
        auto view = bytes_.subspan(pos_, count);
        pos_ += count;
        return view;
    }

private:
    std::span<const std::uint8_t> bytes_;
    std::uint64_t pos_ = 0;
};

}  // namespace

std::size_t TensorFile::element_count() const {
    std::size_t count = 1;
    for (auto d : dims) count *= d;
    return count;
}

std::vector<std::uint8_t> encode_tensor(const TensorFile& tensor) {
    if (tensor.dims.size() > kMaxDims) throw ShapeError("too many tensor dimensions");
    if (tensor.element_count() != tensor.values.size())
        throw ShapeError("tensor dims do not match value count");

    std::string trailer;
    if (!tensor.trailer.is_null()) trailer = tensor.trailer.dump();

    std::vector<std::uint8_t> out;
    out.reserve(tensor_header_size(tensor.dims.size()) + 4 * tensor.values.size() + 8 +
                trailer.size());
    out.insert(out.end(), kMagic, kMagic + 4);
    put_le(out, kTensorFileVersion);
    put_le(out, static_cast<std::uint32_t>(tensor.dims.size()));
    for (auto d : tensor.dims) put_le(out, d);
    out.push_back(kDtypeFloat32);
    out.insert(out.end(), 3, 0);
    for (float v : tensor.values) put_le(out, v);
    put_le(out, static_cast<std::uint64_t>(trailer.size()));
    out.insert(out.end(), trailer.begin(), trailer.end());
    return out;
}

TensorFile decode_tensor(std::span<const std::uint8_t> bytes) {
    Reader in(bytes);
    auto magic = in.take(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) throw FormatError("bad magic", 0);

    const auto version_offset = in.offset();
    const auto version = in.get<std::uint32_t>("version");
    if (version != kTensorFileVersion)
        throw FormatError("unsupported version " + std::to_string(version), version_offset);

    const auto ndim_offset = in.offset();
    const auto ndim = in.get<std::uint32_t>("ndim");
    if (ndim > kMaxDims) throw FormatError("ndim " + std::to_string(ndim) + " too large", ndim_offset);

    TensorFile tensor;
    std::uint64_t count = 1;
    for (std::uint32_t i = 0; i < ndim; ++i) {
        const auto d = in.get<std::uint32_t>("dims");
        tensor.dims.push_back(d);
        count *= d;
        if (count > std::numeric_limits<std::uint64_t>::max() / 8)
            throw FormatError("tensor too large", in.offset());
    }

    const auto dtype_offset = in.offset();
    const auto dtype = in.get<std::uint8_t>("dtype");
    if (dtype != kDtypeFloat32)
        throw FormatError("unsupported dtype " + std::to_string(dtype), dtype_offset);
    in.take(3, "reserved bytes");

    in.need(count * 4, "payload");
    tensor.values.resize(count);
    for (auto& v : tensor.values) v = in.get<float>("payload");

    const auto length = in.get<std::uint64_t>("trailer length");
    const auto trailer_offset = in.offset();
    auto trailer = in.take(length, "trailer");
    if (in.remaining() != 0) throw FormatError("unexpected bytes after trailer", in.offset());
    if (length > 0) {
        try {
            tensor.trailer = nlohmann::json::parse(trailer.begin(), trailer.end());
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError(std::string("malformed trailer: ") + e.what(),
                              trailer_offset + e.byte);
        }
    }
    return tensor;
}

void write_tensor_file(const std::filesystem::path& path, const TensorFile& tensor) {
    write_file_bytes(path, encode_tensor(tensor));
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
    return decode_tensor(read_file_bytes(path));
}

}  // namespace evai
