#include "rfk/io.hpp"

#include "synth.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <unistd.h>
#include <filesystem>

using namespace rfk;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    const fs::path dir = fs::temp_directory_path() / ("rfk_io_" + std::to_string(::getpid()));
    fs::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST(Flo, RoundTripKeepsValuesAndValidity)
{
    FlowField f = FlowField::translation(5, 3, 0.25, -1.5);
    f.invalidate(2, 1);
    const auto bytes = io::encode_flo(f);
    ASSERT_EQ(bytes.size(), 12u + 5 * 3 * 8);
    float magic;
    std::memcpy(&magic, bytes.data(), 4);
    EXPECT_EQ(magic, 202021.25f);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "PIEH");
    const FlowField g = io::decode_flo(bytes);
    for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 5; ++x) {
            EXPECT_EQ(g.valid(x, y), f.valid(x, y));
            if (f.valid(x, y))
                EXPECT_EQ(g.displacement(x, y), f.displacement(x, y));
        }
}

TEST(Flo, RejectsBadMagicAndTruncation)
{
    auto bytes = io::encode_flo(FlowField::identity(2, 2));
    auto bad = bytes;
    bad[0] ^= 0xFF;
    EXPECT_THROW(io::decode_flo(bad), FormatError);
    bytes.pop_back();
    EXPECT_THROW(io::decode_flo(bytes), FormatError);
}

TEST(Featmap, RoundTripIsBitExact)
{
    rfk::testing::Rng64 rng(9);
    FeatureMap fm = rfk::testing::random_feature_map(rng, 4, 3, 16);
    fm.stride = 16;
    fm.scale_factor = 0.88f;
    const auto bytes = io::encode_featmap(fm);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "RFKFEAT1");
    EXPECT_EQ(io::decode_featmap(bytes), fm);
    const auto path = scratch("a.rfkfeat");
    io::write_featmap(fm, path);
    EXPECT_EQ(io::read_featmap(path), fm);
}

TEST(Featmap, PayloadSizeMustMatchHeader)
{
    FeatureMap fm(2, 2, 4, 8, 1.0f);
    auto bytes = io::encode_featmap(fm);
    auto longer = bytes;
    longer.push_back(0);
    EXPECT_THROW(io::decode_featmap(longer), FormatError);
    bytes.resize(bytes.size() - 4);
    EXPECT_THROW(io::decode_featmap(bytes), FormatError);
    auto magic = io::encode_featmap(fm);
    magic[7] = '2';
    EXPECT_THROW(io::decode_featmap(magic), FormatError);
}

TEST(Png, EightBitRoundTrip)
{
    Image img(4, 3, 3);
    for (std::size_t i = 0; i < img.data().size(); ++i)
        img.data()[i] = static_cast<double>(i * 7 % 256) / 255.0;
    const auto path = scratch("rgb.png");
    io::write_png(img, path);
    EXPECT_EQ(io::read_image(path), img);
    const Image gray(5, 2, 1, 100.0 / 255.0);
    io::write_image(gray, scratch("g.png"));
    EXPECT_EQ(io::read_image(scratch("g.png")), gray);
}

TEST(Pnm, RoundTrip)
{
    Image img(3, 2, 3);
    for (std::size_t i = 0; i < img.data().size(); ++i)
        img.data()[i] = static_cast<double>(i * 40 % 256) / 255.0;
    io::write_image(img, scratch("x.ppm"));
    EXPECT_EQ(io::read_image(scratch("x.ppm")), img);
}

TEST(Png, MissingFileNamesPath)
{
    try {
        io::read_image("/nonexistent/dir/img.png");
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/img.png"), std::string::npos);
    }
}

TEST(Png, MatchabilityAndMask)
{
    MatchabilityMap m(3, 1);
    m.values() = {0.0, 0.5, 1.0};
    io::write_matchability_png(m, scratch("m.png"));
    const auto r = io::read_matchability_png(scratch("m.png"));
    EXPECT_NEAR(r.at(0, 0), 0.0, 1e-12);
    EXPECT_NEAR(r.at(1, 0), 128.0 / 255.0, 1e-12);
    EXPECT_NEAR(r.at(2, 0), 1.0, 1e-12);
    Mask mask(2, 2, false);
    mask.set(1, 0, true);
    io::write_mask_png(mask, scratch("mask.png"));
    EXPECT_EQ(io::read_mask_png(scratch("mask.png")), mask);
}

TEST(Text, CorrespondencesAndHomography)
{
    const std::vector<Correspondence> c{{{1.5, 2.0}, {3.0, 4.25}, 0.75}, {{0, 0}, {10, 11}, 1.0}};
    io::write_correspondences(c, scratch("c.txt"));
    const auto r = io::read_correspondences(scratch("c.txt"));
    ASSERT_EQ(r.size(), 2u);
    EXPECT_EQ(r[0].src, c[0].src);
    EXPECT_EQ(r[0].tgt, c[0].tgt);
    EXPECT_DOUBLE_EQ(r[0].score, 0.75);

    io::write_text_atomic(scratch("noscore.txt"), "# comment\n1 2 3 4\n");
    const auto ns = io::read_correspondences(scratch("noscore.txt"));
    ASSERT_EQ(ns.size(), 1u);
    EXPECT_DOUBLE_EQ(ns[0].score, 1.0);
    io::write_text_atomic(scratch("bad.txt"), "1 2 3\n");
    EXPECT_THROW(io::read_correspondences(scratch("bad.txt")), FormatError);

    rfk::testing::Rng64 rng(4);
    const Homography h(rfk::testing::random_homography(rng, 100, 100));
    io::write_homography(h, scratch("h.txt"));
    EXPECT_TRUE(io::read_homography(scratch("h.txt")).matrix().isApprox(h.matrix(), 1e-12));
}

TEST(Atomic, NoTempFileLeftBehind)
{
    const auto path = scratch("atomic.bin");
    io::write_bytes_atomic(path, {1, 2, 3});
    EXPECT_EQ(io::read_bytes(path), (std::vector<std::uint8_t>{1, 2, 3}));
    for (const auto& e : fs::directory_iterator(path.parent_path()))
        EXPECT_EQ(e.path().filename().string().rfind(".tmp.", 0), std::string::npos);
}
