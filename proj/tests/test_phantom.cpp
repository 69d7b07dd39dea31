#include <gtest/gtest.h>

#include <algorithm>
#include <set>

#include "axon/phantom.hpp"
#include "support.hpp"

using namespace axon;

namespace {

std::uint64_t fnv(const std::string& s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

PhantomSpec still_spec(std::size_t n) {
    PhantomSpec s = default_phantom_spec(n);
    s.jitter = {};
    return s;
}

} // namespace

TEST(Phantom, DeterministicAndJittered) {
    PhantomSpec s = still_spec(16);
    s.seed = 4;
    EXPECT_EQ(generate_phantom(s), generate_phantom(s));
    PhantomSpec a = default_phantom_spec(16), b = a;
    a.seed = 1;
    b.seed = 2;
    EXPECT_NE(generate_phantom(a), generate_phantom(b));
}

TEST(Phantom, Anatomy) {
    const PhantomSpec s = still_spec(32);
    const Volume v = generate_phantom(s);
    const double sp = s.spacing.x;
    auto at_mm = [&](double x, double y, double z) {
        return v.at(std::size_t(x / sp), std::size_t(y / sp), std::size_t(z / sp));
    };
    EXPECT_EQ(at_mm(160 - s.lung_offset_x_mm, 160, 160), s.hu_lung);
    EXPECT_EQ(at_mm(160 + s.lung_offset_x_mm, 160, 160), s.hu_lung);
    EXPECT_EQ(at_mm(160, 160, 160), s.hu_body);
    EXPECT_EQ(at_mm(2, 2, 2), s.hu_air);
    EXPECT_GT(std::count(v.data().begin(), v.data().end(), s.hu_bone), 0);
}

TEST(Phantom, RejectsLungsOutsideBody) {
    PhantomSpec s = still_spec(16);
    s.lung_offset_x_mm = 130;
    EXPECT_THROW(generate_phantom(s), DomainError);
    s = still_spec(16);
    s.hu_bone = 5000;
    EXPECT_THROW(generate_phantom(s), DomainError);
}

TEST(Phantom, JitteredLungsStayInsideBody) {
    // worst-case jitter draws over many seeds
    PhantomSpec s = default_phantom_spec(16);
    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        s.seed = seed;
        EXPECT_NO_THROW(generate_phantom(s)) << seed;
    }
}

TEST(Split, HashRule) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < 100; ++i) ids.push_back(sample_id(i));
    const auto splits = hash_split(ids);
    std::vector<std::pair<std::uint64_t, std::string>> ranked;
    for (const auto& id : ids) ranked.emplace_back(fnv(id), id);
    std::sort(ranked.begin(), ranked.end());
    for (std::size_t r = 0; r < 100; ++r) {
        const auto idx = std::size_t(std::find(ids.begin(), ids.end(), ranked[r].second) - ids.begin());
        const Split want = r < 80 ? Split::Train : (r < 90 ? Split::Val : Split::Test);
        EXPECT_EQ(splits[idx], want);
    }
    EXPECT_EQ(std::count(splits.begin(), splits.end(), Split::Train), 80);
    EXPECT_EQ(std::count(splits.begin(), splits.end(), Split::Val), 10);
}

TEST(Dataset, FilesManifestDeterminism) {
    const auto dir = axon::testing::scratch_dir("dataset");
    PhantomSpec s = default_phantom_spec(8);
    s.seed = 3;
    DatasetOptions o;
    o.projection_px = 16;
    const auto recs = generate_dataset(s, 10, dir / "a", o);
    generate_dataset(s, 10, dir / "b", o);
    std::size_t vols = 0, pgms = 0;
    for (const auto& e : std::filesystem::directory_iterator(dir / "a")) {
        vols += e.path().extension() == ".vvol";
        pgms += e.path().extension() == ".pgm";
        const auto other = dir / "b" / e.path().filename();
        EXPECT_EQ(detail::read_file(e.path()), detail::read_file(other)) << e.path();
    }
    EXPECT_EQ(vols, 10u);
    EXPECT_GE(pgms, 10u);
    std::set<std::string> ids;
    for (const auto& r : recs) ids.insert(r.id);
    EXPECT_EQ(ids.size(), 10u);
    const auto back = read_manifest(dir / "a" / "manifest.jsonl");
    ASSERT_EQ(back.size(), 10u);
    EXPECT_EQ(back[3].seed, recs[3].seed);
    EXPECT_EQ(back[3].split, recs[3].split);
    EXPECT_THROW(generate_dataset(s, 0, dir / "c", o), DomainError);
}
