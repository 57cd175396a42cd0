#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "dynaguide/rng.hpp"
#include "dynaguide/stdg.hpp"

using namespace dynaguide;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
    auto dir = fs::temp_directory_path() / "dynaguide_test_stdg";
    fs::create_directories(dir);
    return dir / name;
}

TrajectoryDataset random_dataset(Rng& rng) {
    TrajectoryDataset ds;
    const auto n = static_cast<std::size_t>(rng.uniform_int(1, 6));
    const auto c = static_cast<std::size_t>(rng.uniform_int(1, 3));
    const auto h = static_cast<std::size_t>(rng.uniform_int(1, 9));
    const auto w = static_cast<std::size_t>(rng.uniform_int(1, 9));
    const auto geom = rng.uniform() < 0.5 ? Geometry::periodic_both : Geometry::periodic_width_only;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<float> v(c * h * w);
        for (auto& x : v) {
            // arbitrary finite bit patterns, including subnormals and signed zeros
            std::uint32_t bits;
            do {
                bits = static_cast<std::uint32_t>(rng.next_u64());
                std::memcpy(&x, &bits, 4);
            } while (!std::isfinite(x));
        }
        ds.frames.emplace_back(c, h, w, std::move(v), geom);
    }
    ds.dt_physical = rng.uniform() * 0.1;
    ds.split = static_cast<Split>(rng.uniform_int(0, 2));
    if (rng.uniform() < 0.5) {
        std::vector<ChannelStats> s(c);
        for (auto& x : s) x = {rng.normal(), 0.1 + rng.uniform()};
        ds.norm_stats = s;
    }
    if (rng.uniform() < 0.5) ds.transform = {Transform::Kind::log_epsilon, 1e-4};
    if (geom == Geometry::periodic_width_only)
        for (std::size_t k = 0; k < h; ++k) ds.latitudes.push_back(-80.0 + 160.0 * rng.uniform());
    return ds;
}

}  // namespace

TEST(Stdg, RandomDatasetsRoundTripBitExact) {
    Rng rng(2024);
    for (int trial = 0; trial < 40; ++trial) {
        const auto ds = random_dataset(rng);
        const auto path = temp_path("rt.stdg");
        save_dataset(path, ds);
        const auto back = load_dataset(path);
        ASSERT_EQ(back.size(), ds.size());
        for (std::size_t n = 0; n < ds.size(); ++n) {
            ASSERT_EQ(back.frames[n].size(), ds.frames[n].size());
            EXPECT_EQ(std::memcmp(back.frames[n].values().data(), ds.frames[n].values().data(),
                                  ds.frames[n].size() * sizeof(float)),
                      0);
            EXPECT_EQ(back.frames[n].geometry(), ds.frames[n].geometry());
        }
        EXPECT_EQ(back.dt_physical, ds.dt_physical);
        EXPECT_EQ(back.norm_stats, ds.norm_stats);
        EXPECT_EQ(back.transform, ds.transform);
        EXPECT_EQ(back.split, ds.split);
        EXPECT_EQ(back.latitudes, ds.latitudes);
        // re-encoding gives identical bytes
        EXPECT_EQ(encode_container(dataset_to_container(back)), encode_container(dataset_to_container(ds)));
    }
}

TEST(Stdg, FileSizeArithmetic) {
    TrajectoryDataset ds;
    ds.dt_physical = 0.02;
    ds.frames.emplace_back(1, 4, 4);
    ds.frames.emplace_back(1, 4, 4);
    const auto path = temp_path("size.stdg");
    save_dataset(path, ds);
    const auto meta = dataset_metadata(ds).serialize();
    // magic + version + ndim + 4 dims + dtype + block count + block length + text
    const std::size_t header = 4 + 4 + 4 + 4 * 8 + 1 + 4 + 4 + meta.size();
    EXPECT_EQ(fs::file_size(path), header + 2 * 16 * 4);
}

TEST(Stdg, BadMagicRejected) {
    TrajectoryDataset ds;
    ds.frames.emplace_back(1, 2, 2);
    auto bytes = encode_container(dataset_to_container(ds));
    std::memcpy(bytes.data(), "XXXX", 4);
    EXPECT_THROW(decode_container(bytes), MagicMismatch);
}

TEST(Stdg, VersionMismatchRejected) {
    TrajectoryDataset ds;
    ds.frames.emplace_back(1, 2, 2);
    auto bytes = encode_container(dataset_to_container(ds));
    const std::uint32_t v2 = 2;
    std::memcpy(bytes.data() + 4, &v2, 4);
    EXPECT_THROW(decode_container(bytes), VersionMismatch);
}

TEST(Stdg, TruncatedPayloadRejected) {
    TrajectoryDataset ds;
    ds.frames.emplace_back(1, 4, 4);
    auto bytes = encode_container(dataset_to_container(ds));
    bytes.resize(bytes.size() - 3);
    EXPECT_THROW(decode_container(bytes), TruncatedPayload);
    // truncated inside the header too
    EXPECT_THROW(decode_container(bytes.substr(0, 10)), TruncatedPayload);
}

TEST(Stdg, ErrorsAreDistinctTypes) {
    // each failure mode is catchable on its own
    EXPECT_FALSE((std::is_base_of_v<MagicMismatch, VersionMismatch>));
    EXPECT_FALSE((std::is_base_of_v<VersionMismatch, TruncatedPayload>));
    EXPECT_FALSE((std::is_base_of_v<TruncatedPayload, MagicMismatch>));
}

TEST(Stdg, MissingFileIsIoError) {
    EXPECT_THROW(load_dataset(temp_path("does_not_exist.stdg")), IoError);
}

TEST(Stdg, MultipleMetadataBlocks) {
    Container c;
    c.dims = {2, 3};
    c.payload = {1, 2, 3, 4, 5, 6};
    Metadata a, b;
    a.set("kind", "checkpoint");
    a.set("x", 1.5);
    b.set("arch", "unet");
    c.blocks = {a, b};
    auto back = decode_container(encode_container(c));
    ASSERT_EQ(back.blocks.size(), 2u);
    EXPECT_EQ(back.blocks[0], a);
    EXPECT_EQ(back.blocks[1], b);
    EXPECT_EQ(back.payload, c.payload);
}

TEST(Metadata, DoublesRoundTripExactly) {
    Rng rng(1);
    for (int i = 0; i < 1000; ++i) {
        const double v = rng.normal() * std::pow(10.0, rng.uniform_int(-30, 30));
        EXPECT_EQ(parse_double(format_double(v)), v);
    }
}
