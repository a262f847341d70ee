#include <gtest/gtest.h>

#include <fstream>

#include "wsss/synthetic.hpp"

using namespace wsss;

namespace {

bool any(const Tensor<int>& m) { return std::find(m.storage().begin(), m.storage().end(), 1) != m.storage().end(); }

SceneSpec spec(bool smoke, bool chimney, std::uint64_t seed) {
  SceneSpec s;
  s.smoke_present = smoke;
  s.chimney_present = chimney;
  s.seed = seed;
  return s;
}

}  // namespace

TEST(Scene, NoSmokeMeansEmptyMaskAndNegativeLabel) {
  for (std::uint64_t seed = 0; seed < 10; ++seed)
    for (bool chimney : {false, true}) {
      const auto s = generate_scene(spec(false, chimney, seed));
      EXPECT_EQ(s.label, 0);
      EXPECT_FALSE(any(s.gt));
      EXPECT_EQ(any(s.chimney), chimney);
    }
}

TEST(Scene, SmokeSceneHasMaskAndPositiveLabel) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto s = generate_scene(spec(true, seed % 2 == 0, seed));
    EXPECT_EQ(s.label, 1);
    EXPECT_TRUE(any(s.gt));
  }
}

TEST(Scene, SameSpecGivesIdenticalBytes) {
  const auto a = generate_scene(spec(true, true, 42));
  const auto b = generate_scene(spec(true, true, 42));
  EXPECT_EQ(a.image.pixels, b.image.pixels);
  EXPECT_EQ(a.gt.storage(), b.gt.storage());
  EXPECT_EQ(a.objects.storage(), b.objects.storage());
  EXPECT_NE(a.image.pixels, generate_scene(spec(true, true, 43)).image.pixels);
}

TEST(Scene, RejectsBadSpecs) {
  SceneSpec s;
  s.height = 8;
  EXPECT_THROW(generate_scene(s), ValidationError);
  s = SceneSpec{};
  s.coupling = 1.5;
  EXPECT_THROW(generate_scene(s), ValidationError);
}

TEST(Scene, CoupledPlumeRisesFromTheChimneyTop) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto s = generate_scene(spec(true, true, seed));
    const int h = s.gt.dim(0), w = s.gt.dim(1);
    int top = h, left = w, right = -1;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (s.objects(y, x) == kChimney) {
          top = std::min(top, y);
          left = std::min(left, x);
          right = std::max(right, x);
        }
    bool smoke_near_top = false;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (s.gt(y, x) && x >= left - 2 && x <= right + 2 && y <= top + 3) smoke_near_top = true;
    EXPECT_TRUE(smoke_near_top) << "seed " << seed;
  }
}

TEST(SceneProperty, MaskIsExactlyTheAlphaThreshold) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto s = generate_scene(spec(true, seed % 3 != 0, seed));
    for (std::size_t i = 0; i < s.gt.size(); ++i) {
      ASSERT_EQ(s.gt[i] == 1, s.alpha[i] > kSmokeMaskAlpha);
      if (s.gt[i]) {
        ASSERT_EQ(s.objects[i], kSmoke);
        ASSERT_EQ(s.chimney[i], 0);
      }
    }
  }
}

TEST(Split, TwoScenesAreBalanced) {
  const auto specs = split_specs({2, 0.5, 3, 64, 64});
  ASSERT_EQ(specs.size(), 2u);
  EXPECT_NE(specs[0].smoke_present, specs[1].smoke_present);
}

TEST(Split, FullCouplingPutsAChimneyInEveryPositive) {
  const auto scenes = generate_scenes({200, 1.0, 7, 64, 64});
  int positives = 0, with_chimney = 0, negatives_with_chimney = 0;
  for (const auto& s : scenes) {
    if (s.label) {
      ++positives;
      with_chimney += any(s.chimney);
    } else {
      negatives_with_chimney += any(s.chimney);
    }
  }
  EXPECT_EQ(positives, 100);
  EXPECT_EQ(with_chimney, 100);
  EXPECT_EQ(negatives_with_chimney, 0);
}

TEST(Split, ZeroCouplingMakesChimneysIndependentOfSmoke) {
  const auto specs = split_specs({1000, 0.0, 11, 64, 64});
  double n[2][2] = {{0, 0}, {0, 0}};
  for (const auto& s : specs) n[s.smoke_present][s.chimney_present] += 1;
  const double total = 1000;
  double chi2 = 0;
  for (int a = 0; a < 2; ++a)
    for (int b = 0; b < 2; ++b) {
      const double expected = (n[a][0] + n[a][1]) * (n[0][b] + n[1][b]) / total;
      chi2 += (n[a][b] - expected) * (n[a][b] - expected) / expected;
    }
  EXPECT_LT(chi2, 3.841);  // 95% quantile, one degree of freedom
  // and the coupled split fails the same test by a wide margin
  const auto coupled = split_specs({1000, 1.0, 11, 64, 64});
  int agree = 0;
  for (const auto& s : coupled) agree += s.smoke_present == s.chimney_present;
  EXPECT_EQ(agree, 1000);
}

TEST(Split, PartialCouplingRespectedInExpectation) {
  const auto specs = split_specs({4000, 0.6, 5, 64, 64});
  int pos = 0, pos_chimney = 0, neg = 0, neg_chimney = 0;
  for (const auto& s : specs) {
    if (s.smoke_present) {
      ++pos;
      pos_chimney += s.chimney_present;
    } else {
      ++neg;
      neg_chimney += s.chimney_present;
    }
  }
  EXPECT_NEAR(static_cast<double>(pos_chimney) / pos, 0.6 + 0.4 * 0.5, 0.03);
  EXPECT_NEAR(static_cast<double>(neg_chimney) / neg, 0.4 * 0.5, 0.03);
}

TEST(Split, Errors) {
  EXPECT_THROW(split_specs({0, 0.5, 0, 64, 64}), ValidationError);
  EXPECT_THROW(split_specs({4, -0.1, 0, 64, 64}), ValidationError);
}

TEST(Split, WrittenSplitRoundTripsThroughTheManifestLoader) {
  const fs::path dir = fs::temp_directory_path() / "wsss_synth_split";
  fs::remove_all(dir);
  const auto manifest = generate_split(dir, {6, 1.0, 2, 32, 32}, "test");
  const auto records = load_manifest(manifest, Split::test);
  ASSERT_EQ(records.size(), 6u);
  const auto scenes = generate_scenes({6, 1.0, 2, 32, 32});
  for (std::size_t i = 0; i < records.size(); ++i) {
    EXPECT_TRUE(records[i].readable);
    EXPECT_EQ(records[i].label, scenes[i].label);
    EXPECT_EQ(read_image(records[i].image_path).pixels, scenes[i].image.pixels);
    EXPECT_EQ(read_mask(*records[i].mask_path).storage(), scenes[i].gt.storage());
    const auto objects = read_object_labels(dir / "objects" / records[i].image_path.filename().replace_extension(".pgm"));
    EXPECT_EQ(objects.storage(), scenes[i].objects.storage());
  }
  std::ifstream side(dir / "test.json");
  const auto j = nlohmann::json::parse(side);
  EXPECT_EQ(j.at("split").at("count"), 6);
  EXPECT_EQ(j.at("scenes").size(), 6u);
  EXPECT_DOUBLE_EQ(j.at("mask_alpha_threshold").get<double>(), kSmokeMaskAlpha);
  fs::remove_all(dir);
}

TEST(ChimneyRatio, HandExample) {
  Tensor<float> act({2, 2});
  act[0] = 1.f;
  act[1] = 3.f;
  act[2] = -5.f;  // negative activation contributes nothing
  act[3] = 0.f;
  Tensor<int> chimney({2, 2}, 0);
  chimney[1] = 1;
  chimney[2] = 1;
  ChimneyRatio r;
  r.add(act, chimney);
  EXPECT_DOUBLE_EQ(r.ratio(), 0.75);
  EXPECT_DOUBLE_EQ(ChimneyRatio{}.ratio(), 0.0);
  EXPECT_THROW(r.add(act, Tensor<int>({3, 1})), ShapeError);
}
