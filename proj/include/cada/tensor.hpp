#pragma once
// Dense row-major tensors and the ADT1 container format.
//
// Layout (all integers little-endian):
//   bytes 0..3   magic "ADT1"
//   byte  4      dtype code: 0 = f32, 1 = f64
//   byte  5      ndim
//   ndim x u32   dims
//   payload      prod(dims) elements, IEEE-754 little-endian, row-major
//
// Elements are held as double in memory regardless of dtype. An f32 tensor
// is rounded to single precision on write, so values read from an f32 file
// round-trip bitwise.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace cada {

enum class DType : std::uint8_t { F32 = 0, F64 = 1 };

struct Tensor {
    DType dtype = DType::F64;
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(std::vector<std::size_t> shape_, DType dtype_ = DType::F64);
    Tensor(std::vector<std::size_t> shape_, std::vector<double> data_, DType dtype_ = DType::F64);

    std::size_t size() const noexcept { return data.size(); }
    std::size_t ndim() const noexcept { return shape.size(); }
    std::size_t dim(std::size_t i) const { return shape.at(i); }

    std::span<double> values() noexcept { return data; }
    std::span<const double> values() const noexcept { return data; }

    double& operator[](std::size_t i) noexcept { return data[i]; }
    double operator[](std::size_t i) const noexcept { return data[i]; }

    // Checks product(shape) == size and that every element is finite.
    void validate() const;

    bool operator==(const Tensor& other) const = default;
};

std::size_t shape_volume(std::span<const std::size_t> shape);
std::string shape_string(std::span<const std::size_t> shape);

// Serializes to the ADT1 byte layout.
std::vector<std::uint8_t> encode_tensor(const Tensor& t);
Tensor decode_tensor(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");

void write_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor read_tensor(const std::filesystem::path& path);

}  // namespace cada
