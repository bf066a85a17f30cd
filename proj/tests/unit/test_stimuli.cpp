#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <filesystem>
#include <set>

#include "gazedecode/categories.hpp"
#include "gazedecode/rng.hpp"
#include "gazedecode/stimuli.hpp"

using namespace gazedecode;
namespace fs = std::filesystem;

namespace {

double mean_abs_diff(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(double(a[i]) - double(b[i]));
  return s / static_cast<double>(a.size());
}

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("gazedecode_stimuli_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST(Categories, Bijection) {
  std::set<std::string> names;
  for (int i = 0; i < static_cast<int>(kNumCategories); ++i) {
    const CategoryId c(i);
    EXPECT_EQ(CategoryId::from_name(c.name()), c);
    names.insert(c.name());
  }
  EXPECT_EQ(names.size(), 10u);
  EXPECT_EQ(CategoryId::from_name("T-Shirt").value(), 1);
  EXPECT_EQ(CategoryId::from_name("Tank").value(), 9);
  EXPECT_THROW(CategoryId(10), ParameterError);
  EXPECT_THROW(CategoryId::from_name("Hat"), ParameterError);
}

TEST(Rng, DeterministicAndStreamSeparated) {
  Rng a(42), b(42), c(42, 1);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto va = a.next();
    EXPECT_EQ(va, b.next());
    differs |= va != c.next();
  }
  EXPECT_TRUE(differs);
  EXPECT_NE(derive_seed(1, 2), derive_seed(2, 1));
}

TEST(Rng, UniformMomentsAndIndexRange) {
  Rng rng(7);
  double sum = 0.0;
  std::array<int, 5> hist{};
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
    ++hist[rng.index(5)];
  }
  EXPECT_NEAR(sum / n, 0.5, 0.005);
  for (int h : hist) EXPECT_NEAR(h, n / 5, 600);
}

TEST(Rng, NormalMoments) {
  Rng rng(8);
  double s = 0.0, s2 = 0.0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    s += v;
    s2 += v * v;
  }
  EXPECT_NEAR(s / n, 0.0, 0.02);
  EXPECT_NEAR(s2 / n, 1.0, 0.02);
}

TEST(RenderExemplar, SameSeedIdentical) {
  for (int c = 0; c < 10; ++c) {
    const auto a = render_exemplar(CategoryId(c), 1234);
    const auto b = render_exemplar(CategoryId(c), 1234);
    EXPECT_EQ(a.pixels, b.pixels);
    EXPECT_NE(a.pixels, render_exemplar(CategoryId(c), 1235).pixels);
  }
}

TEST(RenderExemplar, PixelsInUnitRange) {
  for (int c = 0; c < 10; ++c)
    for (std::uint64_t s = 0; s < 20; ++s) {
      const auto img = render_exemplar(CategoryId(c), s);
      ASSERT_EQ(img.pixels.shape(), (Shape{32, 32}));
      for (float v : img.pixels.data()) {
        ASSERT_GE(v, 0.f);
        ASSERT_LE(v, 1.f);
      }
    }
}

TEST(RenderExemplar, ZeroJitterIsBaseSilhouette) {
  for (int c = 0; c < 10; ++c) {
    const CategoryId cat(c);
    const Tensor img = render_exemplar(cat, 99, RenderParams::exact()).pixels;
    for (std::size_t y = 0; y < 32; ++y)
      for (std::size_t x = 0; x < 32; ++x) {
        const bool inside = silhouette_contains(silhouette(cat), {x + 0.5, y + 0.5});
        ASSERT_EQ(img(y, x), inside ? 1.f : 0.f) << cat.name() << " " << x << "," << y;
      }
  }
}

TEST(RenderExemplar, PrototypesPairwiseDistinct) {
  for (int a = 0; a < 10; ++a)
    for (int b = a + 1; b < 10; ++b)
      EXPECT_GE(mean_abs_diff(silhouette_mask(CategoryId(a)), silhouette_mask(CategoryId(b))), 0.05)
          << CategoryId(a).name() << " vs " << CategoryId(b).name();
}

TEST(RenderExemplar, WithinCategoryCloserThanAcross) {
  Rng rng(11);
  double same = 0.0, cross = 0.0;
  const int pairs = 1000;
  for (int i = 0; i < pairs; ++i) {
    const int c = static_cast<int>(rng.index(10));
    int d = static_cast<int>(rng.index(9));
    if (d >= c) ++d;
    const Tensor x = render_exemplar(CategoryId(c), rng.next()).pixels;
    same += mean_abs_diff(x, render_exemplar(CategoryId(c), rng.next()).pixels);
    cross += mean_abs_diff(x, render_exemplar(CategoryId(d), rng.next()).pixels);
  }
  EXPECT_LT(same / pairs, cross / pairs);
}

TEST(BuildCollage, Geometry) {
  const Collage c = build_collage(CategoryId(3), 2, 77);
  ASSERT_EQ(c.canvas.shape(), (Shape{256, 256}));
  ASSERT_EQ(c.items.size(), 16u);
  std::set<std::pair<int, int>> cells;
  int targets = 0;
  for (const auto& it : c.items) {
    cells.insert({it.row, it.col});
    targets += it.category == c.target;
    // Item stays inside its own cell, so boxes are disjoint.
    EXPECT_GE(it.box.x0, it.col * 64);
    EXPECT_LE(it.box.x0 + it.box.width, (it.col + 1) * 64);
    EXPECT_GE(it.box.y0, it.row * 64);
    EXPECT_LE(it.box.y0 + it.box.height, (it.row + 1) * 64);
    EXPECT_LE(std::abs(it.box.x0 - (it.col * 64 + 16)), 4);
    EXPECT_LE(std::abs(it.box.y0 - (it.row * 64 + 16)), 4);
  }
  EXPECT_EQ(cells.size(), 16u);
  EXPECT_EQ(targets, 2);
}

TEST(BuildCollage, AllTargets) {
  const Collage c = build_collage(CategoryId(6), 16, 5);
  for (const auto& it : c.items) EXPECT_EQ(it.category, CategoryId(6));
}

TEST(BuildCollage, NTargetRange) {
  EXPECT_THROW(build_collage(CategoryId(0), 0, 1), ParameterError);
  EXPECT_THROW(build_collage(CategoryId(0), 17, 1), ParameterError);
}

TEST(BuildCollage, SameSeedIdentical) {
  const Collage a = build_collage(CategoryId(2), 2, 321), b = build_collage(CategoryId(2), 2, 321);
  EXPECT_EQ(a.canvas, b.canvas);
  EXPECT_EQ(collage_to_json(a), collage_to_json(b));
}

TEST(BuildCollage, JsonRoundTrip) {
  const Collage a = build_collage(CategoryId(4), 3, 9);
  const Collage b = collage_from_json(collage_to_json(a), a.canvas);
  EXPECT_EQ(collage_to_json(b), collage_to_json(a));
}

TEST(BuildCollage, TargetCellsUniform) {
  std::array<double, 16> counts{};
  const int draws = 10000;
  for (int s = 0; s < draws; ++s) {
    const Collage c = build_collage(CategoryId(s % 10), 2, derive_seed(2024, s));
    for (const auto& it : c.items)
      if (it.category == c.target) counts[static_cast<std::size_t>(it.row * 4 + it.col)] += 1;
  }
  const double expected = 2.0 * draws / 16.0;
  double chi2 = 0.0;
  for (double o : counts) chi2 += (o - expected) * (o - expected) / expected;
  // 0.99 quantile of chi-square with 15 degrees of freedom.
  EXPECT_LT(chi2, 30.5779);
}

TEST(BuildCollage, DistractorsExcludeTargetAndCoverOthers) {
  std::array<int, 10> seen{};
  for (int s = 0; s < 200; ++s) {
    const Collage c = build_collage(CategoryId(0), 1, s);
    int targets = 0;
    for (const auto& it : c.items) {
      targets += it.category == c.target;
      ++seen[it.category.index()];
    }
    EXPECT_EQ(targets, 1);
  }
  EXPECT_EQ(seen[0], 200);
  for (int c = 1; c < 10; ++c) EXPECT_GT(seen[c], 200);
}

TEST(Pgm, ZeroImage) {
  const Bytes b = export_pgm(Tensor({2, 3}));
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(b.size(), header.size() + 6);
  EXPECT_EQ(std::string(b.begin(), b.begin() + header.size()), header);
  for (std::size_t i = header.size(); i < b.size(); ++i) EXPECT_EQ(b[i], 0);
}

TEST(Pgm, Rounding) {
  const Bytes b = export_pgm(Tensor({1, 3}, {1.f, 0.5f, 0.25f}));
  EXPECT_EQ(b[b.size() - 3], 255);
  EXPECT_EQ(b[b.size() - 2], 128);
  EXPECT_EQ(b[b.size() - 1], 64);  // 63.75 rounds to 64
}

TEST(Pgm, RoundTripError) {
  Rng rng(3);
  Tensor img({17, 9});
  for (float& v : img.data()) v = static_cast<float>(rng.uniform());
  const Tensor back = import_pgm(export_pgm(img));
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < img.size(); ++i)
    EXPECT_LE(std::abs(double(back[i]) - double(img[i])), 1.0 / 510.0 + 1e-7);
}

TEST(Pgm, MalformedHeaderThrows) {
  const std::string p2 = "P2\n1 1\n255\n0";
  EXPECT_THROW(import_pgm(Bytes(p2.begin(), p2.end())), FormatError);
  const std::string short_payload = "P5\n2 2\n255\n\x01";
  EXPECT_THROW(import_pgm(Bytes(short_payload.begin(), short_payload.end())), FormatError);
  const std::string bad_max = "P5\n1 1\n65535\n\x01\x01";
  EXPECT_THROW(import_pgm(Bytes(bad_max.begin(), bad_max.end())), FormatError);
}

TEST(GenDataset, DefaultCounts) {
  const DatasetSpec spec;
  EXPECT_EQ(spec.train_per_category, 500);
  EXPECT_EQ(spec.val_per_category, 100);
  EXPECT_EQ(spec.test_per_category, 100);
}

TEST(GenDataset, CountsBalancedAndDeterministic) {
  const fs::path a = temp_dir("a"), b = temp_dir("b");
  DatasetSpec spec{4, 2, 3, 17, {}};
  const auto ma = gen_dataset(spec, a);
  gen_dataset(spec, b);
  ASSERT_EQ(ma.size(), 3u);
  const std::array<int, 3> want = {4, 2, 3};
  std::set<std::uint64_t> seeds;
  for (std::size_t s = 0; s < 3; ++s) {
    EXPECT_EQ(ma[s].files.size(), 10u * want[s]);
    for (int count : ma[s].counts) EXPECT_EQ(count, want[s]);
    std::array<int, 10> hist{};
    for (const auto& f : ma[s].files) {
      ++hist[f.category.index()];
      EXPECT_TRUE(fs::exists(a / f.path));
      EXPECT_EQ(read_file(a / f.path), read_file(b / f.path));
      seeds.insert(f.seed);
    }
    for (int h : hist) EXPECT_EQ(h, want[s]);
    EXPECT_EQ(read_file(a / (ma[s].split + ".json")), read_file(b / (ma[s].split + ".json")));
  }
  // Splits never share an exemplar seed.
  EXPECT_EQ(seeds.size(), 10u * (4 + 2 + 3));

  const LabeledImages train = load_split(a, "train");
  EXPECT_EQ(train.size(), 40u);
  EXPECT_EQ(train.image(5), load_tnsr(a / ma[0].files[5].path));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST(GenDataset, RejectsZeroCounts) {
  EXPECT_THROW(gen_dataset(DatasetSpec{0, 1, 1, 0, {}}, temp_dir("zero")), ParameterError);
}

TEST(GenDataset, UnwritableDirectoryThrows) {
  const fs::path blocker = temp_dir("blocker");
  write_file(blocker, std::string("file"));
  EXPECT_THROW(gen_dataset(DatasetSpec{1, 1, 1, 0, {}}, blocker / "sub"), IoError);
  fs::remove_all(blocker);
}

TEST(LoadSplit, MissingManifestThrows) {
  EXPECT_THROW(load_split(temp_dir("missing"), "train"), IoError);
}
