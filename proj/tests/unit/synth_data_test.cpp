#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "knet/image_io.hpp"
#include "knet/metrics.hpp"
#include "knet/synth_data.hpp"

namespace knet::data {
namespace {

namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("knet_synth_" + name);
  fs::remove_all(p);
  return p;
}

std::size_t ones(const std::vector<std::uint8_t>& m) { return std::count(m.begin(), m.end(), 1); }

TEST(Rasterize, HalfPixelCircleIsCenterOnly) {
  ShapeParams p;
  p.cy = p.cx = 1;
  p.radius = 0.5;
  auto m = rasterize_shape(ShapeKind::kCircle, p, 3, 3);
  EXPECT_EQ(ones(m), 1u);
  EXPECT_EQ(m[4], 1);
}

TEST(Rasterize, RadiusTwoCircleHasThirteenPixels) {
  ShapeParams p;
  p.cy = p.cx = 4;
  p.radius = 2;
  EXPECT_EQ(ones(rasterize_shape(ShapeKind::kCircle, p, 9, 9)), 13u);
}

TEST(Rasterize, CircleMatchesPixelCount) {
  for (double r : {1.0, 2.5, 3.7, 6.0}) {
    ShapeParams p;
    p.cy = 10.3;
    p.cx = 9.6;
    p.radius = r;
    auto m = rasterize_shape(ShapeKind::kCircle, p, 21, 21);
    std::size_t want = 0;
    for (int u = 0; u < 21; ++u)
      for (int v = 0; v < 21; ++v) want += (u - 10.3) * (u - 10.3) + (v - 9.6) * (v - 9.6) <= r * r;
    EXPECT_EQ(ones(m), want);
  }
}

TEST(Rasterize, FullImageRectangle) {
  ShapeParams p;
  p.cy = 2;
  p.cx = 3;
  p.height = 5;
  p.width = 7;
  auto m = rasterize_shape(ShapeKind::kRectangle, p, 5, 7);
  EXPECT_EQ(ones(m), 35u);
}

TEST(Rasterize, TriangleWidensTowardBase) {
  ShapeParams p;
  p.cy = 5;
  p.cx = 5;
  p.height = 8;
  p.width = 8;
  auto m = rasterize_shape(ShapeKind::kTriangle, p, 11, 11);
  std::size_t prev = 0;
  for (std::size_t u = 1; u <= 9; ++u) {
    std::size_t row = 0;
    for (std::size_t v = 0; v < 11; ++v) row += m[u * 11 + v];
    EXPECT_GE(row, prev);
    prev = row;
  }
  EXPECT_EQ(m[1 * 11 + 5], 1);  // apex
  EXPECT_EQ(prev, 9u);          // base spans cx +- 4
}

TEST(Rasterize, DegenerateParamsRejected) {
  ShapeParams p;
  p.radius = 0.4;
  EXPECT_THROW(rasterize_shape(ShapeKind::kCircle, p, 5, 5), ParameterError);
  p.height = 0.5;
  p.width = 3;
  EXPECT_THROW(rasterize_shape(ShapeKind::kRectangle, p, 5, 5), ParameterError);
  EXPECT_THROW(rasterize_shape(ShapeKind::kTriangle, p, 5, 5), ParameterError);
}

TEST(Generate, InstanceCountWithinBounds) {
  SceneSpec s;
  s.seed = 3;
  s.n_max = 4;
  for (std::size_t i = 0; i < 1000; ++i) {
    auto g = generate_sample(s, i);
    EXPECT_GE(g.instances.size(), 1u);
    EXPECT_LE(g.instances.size(), 4u);
  }
}

TEST(Generate, Deterministic) {
  SceneSpec s;
  s.seed = 11;
  auto a = generate_sample(s, 7), b = generate_sample(s, 7);
  EXPECT_EQ(a.image.to_vector(), b.image.to_vector());
  EXPECT_EQ(a.semantic, b.semantic);
  EXPECT_EQ(a.panoptic.ids, b.panoptic.ids);
  auto c = generate_sample(s, 8);
  EXPECT_NE(a.image.to_vector(), c.image.to_vector());
}

TEST(Generate, GroundTruthInvariants) {
  SceneSpec s;
  s.seed = 5;
  ClassSpace cs;
  for (std::size_t i = 0; i < 200; ++i) {
    auto g = generate_sample(s, i);
    const std::size_t px = g.height * g.width;
    ASSERT_EQ(g.image.shape(), (Shape{3, 64, 64}));
    for (double v : g.image.data()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
    // Every pixel carries a known segment id.
    for (auto id : g.panoptic.ids) ASSERT_NE(g.panoptic.find(id), nullptr);
    std::size_t area = 0;
    for (const auto& seg : g.panoptic.segments) area += seg.area;
    EXPECT_EQ(area, px);
    // Instances are disjoint, nonempty, and agree with the panoptic raster.
    std::vector<int> owner(px, 0);
    for (std::size_t n = 0; n < g.instances.size(); ++n) {
      EXPECT_GE(ones(g.instances[n].mask), s.min_visible_pixels);
      for (std::size_t p = 0; p < px; ++p)
        if (g.instances[n].mask[p]) {
          ASSERT_EQ(owner[p], 0);
          owner[p] = static_cast<int>(n + 1);
          ASSERT_EQ(g.panoptic.ids[p], n + 1);
        }
    }
    // Semantic raster = panoptic with ids replaced by classes.
    for (std::size_t p = 0; p < px; ++p)
      ASSERT_EQ(g.semantic[p], g.panoptic.find(g.panoptic.ids[p])->category);
    for (const auto& seg : g.panoptic.segments) EXPECT_EQ(seg.is_thing, cs.is_thing(seg.category));
    EXPECT_EQ(metrics::compute_pq(g.panoptic, g.panoptic, cs).pq, 1.0);
  }
}

TEST(Generate, CrowdedSpecFails) {
  SceneSpec s;
  s.n_min = s.n_max = 40;
  s.size_min = s.size_max = 30;
  s.allow_overlap = false;
  EXPECT_THROW(generate_sample(s, 0), GenerationError);
}

TEST(Generate, NoOverlapFlagKeepsShapesApart) {
  SceneSpec s;
  s.seed = 2;
  s.allow_overlap = false;
  s.n_max = 2;
  for (std::size_t i = 0; i < 50; ++i) {
    auto g = generate_sample(s, i);
    // Without overlap every instance is drawn fully, so none lost pixels.
    for (const auto& inst : g.instances) EXPECT_GE(ones(inst.mask), s.min_visible_pixels);
  }
}

TEST(Dataset, RoundTripIsBitwise) {
  SceneSpec s;
  s.seed = 9;
  auto dir = scratch("roundtrip");
  write_dataset(s, 6, dir);
  auto ds = read_dataset(dir);
  ASSERT_EQ(ds.samples.size(), 6u);
  EXPECT_EQ(to_json(ds.spec), to_json(s));
  for (std::size_t i = 0; i < 6; ++i) {
    auto g = generate_sample(s, i);
    const auto& r = ds.samples[i];
    EXPECT_EQ(r.image.to_vector(), g.image.to_vector());
    EXPECT_EQ(r.semantic, g.semantic);
    EXPECT_EQ(r.panoptic.ids, g.panoptic.ids);
    ASSERT_EQ(r.instances.size(), g.instances.size());
    for (std::size_t n = 0; n < g.instances.size(); ++n) {
      EXPECT_EQ(r.instances[n].mask, g.instances[n].mask);
      EXPECT_EQ(r.instances[n].category, g.instances[n].category);
    }
    ASSERT_EQ(r.panoptic.segments.size(), g.panoptic.segments.size());
    for (std::size_t n = 0; n < g.panoptic.segments.size(); ++n) {
      EXPECT_EQ(r.panoptic.segments[n].id, g.panoptic.segments[n].id);
      EXPECT_EQ(r.panoptic.segments[n].area, g.panoptic.segments[n].area);
    }
  }
  fs::remove_all(dir);
}

TEST(Dataset, ManifestCountsFiles) {
  auto dir = scratch("manifest");
  write_dataset(SceneSpec{}, 4, dir);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(dir)) files += e.path().filename() != "manifest.json";
  EXPECT_EQ(files, 4u * 5u);
  fs::remove_all(dir);
}

TEST(Dataset, CorruptByteDetected) {
  auto dir = scratch("corrupt");
  write_dataset(SceneSpec{}, 2, dir);
  const auto target = dir / "00001.image.bin";
  {
    std::fstream f(target, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-5, std::ios::end);
    char c;
    f.read(&c, 1);
    f.seekp(-5, std::ios::end);
    c = static_cast<char>(c ^ 0x40);
    f.write(&c, 1);
  }
  EXPECT_THROW(read_dataset(dir), CorruptDataError);
  fs::remove_all(dir);
}

TEST(Dataset, MissingManifestIsFormatError) {
  auto dir = scratch("missing");
  fs::create_directories(dir);
  EXPECT_THROW(read_dataset(dir), FormatError);
  fs::remove_all(dir);
}

TEST(ImageIo, PgmAndPpmRoundTrip) {
  auto dir = scratch("imgio");
  fs::create_directories(dir);
  io::GrayImage g;
  g.height = 2;
  g.width = 3;
  g.maxval = 65535;
  g.pixels = {0, 1, 300, 65535, 102, 7};
  io::write_pgm(dir / "a.pgm", g);
  auto r = io::read_pgm(dir / "a.pgm");
  EXPECT_EQ(r.pixels, g.pixels);
  g.maxval = 255;
  g.pixels = {0, 1, 30, 255, 102, 7};
  io::write_pgm(dir / "b.pgm", g);
  EXPECT_EQ(io::read_pgm(dir / "b.pgm").pixels, g.pixels);

  std::vector<double> v(12);
  for (std::size_t i = 0; i < 12; ++i) v[i] = (i * 20) / 255.0;
  Tensor img({3, 2, 2}, v);
  io::write_ppm(dir / "c.ppm", img);
  auto back = io::read_image(dir / "c.ppm");
  ASSERT_EQ(back.shape(), img.shape());
  for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(back.value(i), v[i], 1e-7);
  EXPECT_THROW(io::read_image(dir / "nope.ppm"), FormatError);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace knet::data
