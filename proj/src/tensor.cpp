#include "cada/tensor.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <sstream>

#include "cada/error.hpp"

namespace cada {

namespace {

constexpr char kMagic[4] = {'A', 'D', 'T', '1'};
constexpr std::size_t kHeaderFixed = 6;

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::uint8_t* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape_, DType dtype_)
    : dtype(dtype_), shape(std::move(shape_)), data(shape_volume(shape), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape_, std::vector<double> data_, DType dtype_)
    : dtype(dtype_), shape(std::move(shape_)), data(std::move(data_)) {}

std::size_t shape_volume(std::span<const std::size_t> shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_string(std::span<const std::size_t> shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

void Tensor::validate() const {
    if (shape.empty()) fail(ErrorKind::Data, "tensor has no dimensions");
    for (auto d : shape)
        if (d == 0) fail(ErrorKind::Data, "tensor shape " + shape_string(shape) + " has a zero dimension");
    if (shape_volume(shape) != data.size())
        fail(ErrorKind::Data, "tensor shape " + shape_string(shape) + " does not match length " +
                                  std::to_string(data.size()));
    for (std::size_t i = 0; i < data.size(); ++i)
        if (!std::isfinite(data[i]))
            fail(ErrorKind::Numerical, "non-finite tensor element at index " + std::to_string(i));
}

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    t.validate();
    if (t.ndim() > 255) fail(ErrorKind::Data, "tensor rank exceeds 255");
    std::vector<std::uint8_t> out;
    const std::size_t elem = t.dtype == DType::F32 ? 4 : 8;
    out.reserve(kHeaderFixed + 4 * t.ndim() + elem * t.size());
    out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
    out.push_back(static_cast<std::uint8_t>(t.dtype));
    out.push_back(static_cast<std::uint8_t>(t.ndim()));
    for (auto d : t.shape) {
        if (d > 0xFFFFFFFFu) fail(ErrorKind::Data, "tensor dimension exceeds u32");
        put_le(out, static_cast<std::uint32_t>(d));
    }
    if (t.dtype == DType::F32) {
        for (double v : t.data) {
            const float f = static_cast<float>(v);
            if (!std::isfinite(f)) fail(ErrorKind::Numerical, "element overflows f32");
            put_le(out, std::bit_cast<std::uint32_t>(f));
        }
    } else {
        for (double v : t.data) put_le(out, std::bit_cast<std::uint64_t>(v));
    }
    return out;
}

Tensor decode_tensor(std::span<const std::uint8_t> bytes, const std::string& origin) {
    if (bytes.size() < kHeaderFixed) fail(ErrorKind::Data, origin + ": truncated tensor header");
    if (!std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin()))
        fail(ErrorKind::Data, origin + ": bad magic (expected ADT1)");
    const std::uint8_t code = bytes[4];
    if (code > 1) fail(ErrorKind::Data, origin + ": unknown dtype code " + std::to_string(code));
    Tensor t;
    t.dtype = static_cast<DType>(code);
    const std::size_t ndim = bytes[5];
    if (bytes.size() < kHeaderFixed + 4 * ndim) fail(ErrorKind::Data, origin + ": truncated tensor header");
    const std::uint8_t* p = bytes.data() + kHeaderFixed;
    for (std::size_t i = 0; i < ndim; ++i, p += 4) t.shape.push_back(get_le<std::uint32_t>(p));
    if (ndim == 0) fail(ErrorKind::Data, origin + ": tensor has no dimensions");

    const std::size_t n = shape_volume(t.shape);
    const std::size_t elem = t.dtype == DType::F32 ? 4 : 8;
    const std::size_t payload = bytes.size() - kHeaderFixed - 4 * ndim;
    if (payload < n * elem) fail(ErrorKind::Data, origin + ": truncated payload");
    if (payload > n * elem)
        fail(ErrorKind::Data, origin + ": payload longer than shape " + shape_string(t.shape) + " implies");

    t.data.resize(n);
    for (std::size_t i = 0; i < n; ++i, p += elem) {
        t.data[i] = t.dtype == DType::F32 ? static_cast<double>(std::bit_cast<float>(get_le<std::uint32_t>(p)))
                                          : std::bit_cast<double>(get_le<std::uint64_t>(p));
    }
    try {
        t.validate();
    } catch (const Error& e) {
        fail(e.kind(), origin + ": " + e.what());
    }
    return t;
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
    const auto bytes = encode_tensor(t);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) fail(ErrorKind::Data, "cannot open for writing: " + path.string());
    f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) fail(ErrorKind::Data, "write failed: " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) fail(ErrorKind::Data, "cannot open tensor file: " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_tensor(bytes, path.string());
}

}  // namespace cada
