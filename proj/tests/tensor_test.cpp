#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <limits>
#include <random>

#include "cada/error.hpp"
#include "cada/tensor.hpp"
#include "test_util.hpp"

using cada::DType;
using cada::Error;
using cada::ErrorKind;
using cada::Tensor;
using cada::testing::TempDir;

using cada::testing::kind_of;
using cada::testing::message_of;

TEST(Tensor, SmallF32FileLayout) {
    TempDir dir("tensor");
    Tensor t({2, 2}, {0, 1, 2, 3}, DType::F32);
    cada::write_tensor(dir / "a.adt", t);
    const auto bytes = cada::testing::slurp(dir / "a.adt");
    ASSERT_EQ(bytes.size(), 4u + 1 + 1 + 8 + 16);
    EXPECT_EQ(std::memcmp(bytes.data(), "ADT1", 4), 0);
    EXPECT_EQ(bytes[4], 0);  // f32
    EXPECT_EQ(bytes[5], 2);  // ndim
    // dims little-endian
    EXPECT_EQ(bytes[6], 2);
    EXPECT_EQ(bytes[7], 0);
    EXPECT_EQ(bytes[10], 2);
    // 1.0f = 0x3F800000, little-endian
    EXPECT_EQ(bytes[18], 0x00);
    EXPECT_EQ(bytes[21], 0x3F);
    EXPECT_EQ(bytes[20], 0x80);
    EXPECT_EQ(cada::read_tensor(dir / "a.adt"), t);
}

TEST(Tensor, F64ValuesRoundTripBitwise) {
    TempDir dir("tensor");
    std::mt19937_64 rng(3);
    std::normal_distribution<double> n01;
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<std::size_t> shape;
        const int nd = 1 + trial % 4;
        for (int d = 0; d < nd; ++d) shape.push_back(1 + rng() % 5);
        Tensor t(shape);
        for (auto& v : t.data) v = n01(rng) * std::pow(10.0, static_cast<int>(rng() % 40) - 20);
        cada::write_tensor(dir / "x.adt", t);
        const Tensor back = cada::read_tensor(dir / "x.adt");
        ASSERT_EQ(back.shape, t.shape);
        ASSERT_EQ(back.dtype, DType::F64);
        ASSERT_EQ(std::memcmp(back.data.data(), t.data.data(), t.size() * sizeof(double)), 0);
    }
}

TEST(Tensor, F32RoundsOnceThenIsStable) {
    Tensor t({3}, {0.1, 1.0 / 3.0, -2.5}, DType::F32);
    const Tensor once = cada::decode_tensor(cada::encode_tensor(t));
    EXPECT_EQ(once.data[0], static_cast<double>(0.1f));
    EXPECT_EQ(once.data[2], -2.5);
    const Tensor twice = cada::decode_tensor(cada::encode_tensor(once));
    EXPECT_EQ(once, twice);
}

TEST(Tensor, EncodingIsByteStable) {
    Tensor t({2, 3}, {1, -2, 3.5, 1e-300, 7, 0}, DType::F64);
    EXPECT_EQ(cada::encode_tensor(t), cada::encode_tensor(t));
    const auto bytes = cada::encode_tensor(t);
    // 1.0 as f64 little-endian: 00 .. 00 F0 3F
    const std::size_t off = 4 + 1 + 1 + 8;
    EXPECT_EQ(bytes[off + 6], 0xF0);
    EXPECT_EQ(bytes[off + 7], 0x3F);
}

TEST(Tensor, NonFiniteRejectedOnWrite) {
    TempDir dir("tensor");
    Tensor t({1}, {std::numeric_limits<double>::quiet_NaN()});
    EXPECT_EQ(kind_of([&] { cada::write_tensor(dir / "n.adt", t); }), ErrorKind::Numerical);
    Tensor inf({2}, {1.0, std::numeric_limits<double>::infinity()});
    EXPECT_EQ(kind_of([&] { cada::write_tensor(dir / "i.adt", inf); }), ErrorKind::Numerical);
    EXPECT_FALSE(std::filesystem::exists(dir / "n.adt"));
}

TEST(Tensor, F32OverflowRejected) {
    Tensor t({1}, {1e300}, DType::F32);
    EXPECT_EQ(kind_of([&] { cada::encode_tensor(t); }), ErrorKind::Numerical);
}

TEST(Tensor, LengthMismatchRejected) {
    Tensor t;
    t.shape = {3};
    t.data = {1, 2};
    EXPECT_EQ(kind_of([&] { t.validate(); }), ErrorKind::Data);
    EXPECT_EQ(kind_of([&] { cada::encode_tensor(t); }), ErrorKind::Data);
}

TEST(Tensor, ZeroDimensionAndEmptyShapeRejected) {
    Tensor z;
    z.shape = {2, 0};
    EXPECT_EQ(kind_of([&] { z.validate(); }), ErrorKind::Data);
    Tensor e;
    EXPECT_EQ(kind_of([&] { e.validate(); }), ErrorKind::Data);
}

TEST(Tensor, BadMagic) {
    TempDir dir("tensor");
    auto bytes = cada::encode_tensor(Tensor({2}, {1, 2}));
    std::memcpy(bytes.data(), "XXXX", 4);
    cada::testing::spit(dir / "bad.adt", bytes);
    EXPECT_NE(message_of([&] { cada::read_tensor(dir / "bad.adt"); }).find("bad magic"), std::string::npos);
    EXPECT_EQ(kind_of([&] { cada::read_tensor(dir / "bad.adt"); }), ErrorKind::Data);
}

TEST(Tensor, TruncatedPayload) {
    TempDir dir("tensor");
    auto bytes = cada::encode_tensor(Tensor({4}, {1, 2, 3, 4}));
    bytes.resize(bytes.size() - 5);
    cada::testing::spit(dir / "cut.adt", bytes);
    EXPECT_NE(message_of([&] { cada::read_tensor(dir / "cut.adt"); }).find("truncated payload"), std::string::npos);
}

TEST(Tensor, TruncatedHeader) {
    const std::vector<std::uint8_t> bytes = {'A', 'D', 'T', '1', 1, 3, 2, 0};
    EXPECT_NE(message_of([&] { cada::decode_tensor(bytes); }).find("truncated tensor header"), std::string::npos);
}

TEST(Tensor, TrailingBytesRejected) {
    auto bytes = cada::encode_tensor(Tensor({2}, {1, 2}));
    bytes.push_back(0);
    EXPECT_EQ(kind_of([&] { cada::decode_tensor(bytes); }), ErrorKind::Data);
}

TEST(Tensor, UnknownDtypeRejected) {
    auto bytes = cada::encode_tensor(Tensor({2}, {1, 2}));
    bytes[4] = 7;
    EXPECT_EQ(kind_of([&] { cada::decode_tensor(bytes); }), ErrorKind::Data);
}

TEST(Tensor, NonFiniteRejectedOnRead) {
    auto bytes = cada::encode_tensor(Tensor({1}, {1.0}));
    const double nan = std::numeric_limits<double>::quiet_NaN();
    std::memcpy(bytes.data() + 10, &nan, sizeof nan);  // host is little-endian here
    EXPECT_EQ(kind_of([&] { cada::decode_tensor(bytes); }), ErrorKind::Numerical);
}

TEST(Tensor, MissingFile) {
    EXPECT_EQ(kind_of([] { cada::read_tensor("/nonexistent/dir/x.adt"); }), ErrorKind::Data);
}

TEST(Tensor, ShapeHelpers) {
    const std::vector<std::size_t> s = {2, 3, 4};
    EXPECT_EQ(cada::shape_volume(s), 24u);
    EXPECT_EQ(cada::shape_string(s), "[2,3,4]");
}
