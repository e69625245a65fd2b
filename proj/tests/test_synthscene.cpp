#include <gtest/gtest.h>

#include "mvgsr/geometry.hpp"
#include "mvgsr/synthscene.hpp"
#include "test_util.hpp"

using namespace mvgsr;
using namespace mvgsr::synth;
using mvgsr::testing::uniform;

namespace {

SceneConfig small_config(std::uint64_t seed) {
  SceneConfig c;
  c.cams = 6;
  c.hr_size = 64;
  c.seed = seed;
  return c;
}

float bilinear(const Image& img, double u, double v) {
  const int x0 = std::min(static_cast<int>(u), img.width - 2), y0 = std::min(static_cast<int>(v), img.height - 2);
  const double tx = u - x0, ty = v - y0;
  return static_cast<float>((1 - ty) * ((1 - tx) * img.at(0, y0, x0) + tx * img.at(0, y0, x0 + 1)) +
                            ty * ((1 - tx) * img.at(0, y0 + 1, x0) + tx * img.at(0, y0 + 1, x0 + 1)));
}

}  // namespace

TEST(GenRig, RingOfFour) {
  auto m = gen_rig(RigKind::RingInward, 4, 4.0, 0, make_intrinsics(32, 50));
  const std::vector<Eigen::Vector3d> expected{{4, 0, 0}, {0, 0, 4}, {-4, 0, 0}, {0, 0, -4}};
  ASSERT_EQ(m.cameras.size(), 4u);
  for (int i = 0; i < 4; ++i) {
    const auto& p = m.cameras[i].pose;
    EXPECT_LT((p.center - expected[i]).norm(), 1e-12);
    EXPECT_NEAR(p.view_dir.dot(-p.center.normalized()), 1.0, 1e-12);
  }
}

TEST(GenRig, PosesValidAndDeterministic) {
  for (RigKind kind : {RigKind::RingInward, RigKind::Arc, RigKind::RandomHemisphere}) {
    auto a = gen_rig(kind, 12, 5.0, 42, make_intrinsics(32, 50), 30.0);
    auto b = gen_rig(kind, 12, 5.0, 42, make_intrinsics(32, 50), 30.0);
    ASSERT_EQ(a.cameras.size(), 12u);
    for (std::size_t i = 0; i < a.cameras.size(); ++i) {
      EXPECT_NO_THROW(a.cameras[i].pose.validate());
      EXPECT_EQ(a.cameras[i].pose.rotation, b.cameras[i].pose.rotation);
      EXPECT_EQ(a.cameras[i].pose.center, b.cameras[i].pose.center);
      // Optical axis passes through the origin.
      const auto& p = a.cameras[i].pose;
      EXPECT_LT(p.view_dir.cross(-p.center).norm() / p.center.norm(), 1e-12);
    }
  }
  auto c = gen_rig(RigKind::RandomHemisphere, 12, 5.0, 43, make_intrinsics(32, 50));
  auto d = gen_rig(RigKind::RandomHemisphere, 12, 5.0, 42, make_intrinsics(32, 50));
  EXPECT_NE(c.cameras[0].pose.center, d.cameras[0].pose.center);
}

TEST(Render, FrontoParallelCheckerPeriod) {
  SynthScene s;
  s.cfg.patch_half = 4.0;
  s.plane.normal = {0, 0, 1};
  s.plane.offset = 0.0;
  const int n_tex = 320, period = 8;  // texels per checker cell
  s.texture = Image(1, n_tex, n_tex);
  for (int y = 0; y < n_tex; ++y)
    for (int x = 0; x < n_tex; ++x) s.texture.at(0, y, x) = ((x / period + y / period) & 1) ? 0.8f : 0.2f;
  CameraIntrinsics k = make_intrinsics(101, 50);
  k.fx = k.fy = 100.0;
  const double depth = 5.0;
  s.rig.cameras.push_back({0, k, CameraPose::look_at({0, 0, depth}, {0, 0, 0}, {0, -1, 0}, 0)});
  auto img = render_plane(s, 0, 101, 101);

  // Plane units per texel and per pixel give the expected cell width in pixels.
  const double texel = 2 * s.cfg.patch_half / n_tex;
  const double pixel = depth / k.fx;
  const double cell_px = period * texel / pixel;
  // Row 50 lies exactly on a cell boundary of the other axis; use a row inside a cell.
  std::vector<int> edges;
  for (int x = 1; x < 101; ++x)
    if ((img.at(0, 47, x) > 0.5f) != (img.at(0, 47, x - 1) > 0.5f)) edges.push_back(x);
  ASSERT_GT(edges.size(), 5u);
  const double mean_spacing = static_cast<double>(edges.back() - edges.front()) / (edges.size() - 1);
  EXPECT_NEAR(mean_spacing, cell_px, 0.05);
}

TEST(Render, BackgroundExactlyZeroAndDeterministic) {
  SceneConfig cfg = small_config(3);
  cfg.elevation_deg = 5.0;  // the upper rows look above the horizon
  auto s = generate(cfg);
  const Camera cam = s.rig.camera(0);
  ASSERT_FALSE(backproject(cam, s.plane, 32, 0).has_value());
  EXPECT_EQ(s.hr_images[0].at(0, 0, 32), 0.0f);
  auto again = render_plane(s, 0, cfg.hr_size, cfg.hr_size);
  EXPECT_EQ(again.data, s.hr_images[0].data);
}

TEST(Render, PlaneBehindCamera) {
  auto s = generate(small_config(4));
  s.rig.cameras[0].pose = CameraPose::look_at({0, -5, 0}, {0, -10, 0}, {0, 0, 1}, 0);
  try {
    render_plane(s, 0, 32, 32);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::PlaneBehindCamera);
  }
}

TEST(Render, LowResIsAntiAliasedDownsample) {
  auto s = generate(small_config(5));
  for (std::size_t i = 0; i < s.hr_images.size(); ++i)
    EXPECT_EQ(s.lr_images[i].data, resample::downsample_aa(s.hr_images[i], {-0.5, 2}).data);
}

TEST(Correspondence, IdentityAndBehind) {
  auto s = generate(small_config(6));
  const Eigen::Vector2d px(10.25, 20.5);
  EXPECT_EQ(*gt_correspondence(s, 1, px, 1), px);
  // Turn view 2 around: plane points end up behind it.
  s.rig.cameras[2].pose = CameraPose::look_at(s.rig.cameras[2].pose.center, 2.0 * s.rig.cameras[2].pose.center,
                                              {0, -1, 0}, 2);
  EXPECT_FALSE(gt_correspondence(s, 0, Eigen::Vector2d(32, 32), 2).has_value());
}

TEST(Correspondence, OnEpipolarLine) {
  auto s = generate(small_config(7));
  std::mt19937_64 rng(7);
  int found = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    const int i = static_cast<int>(rng() % 6), j = static_cast<int>(rng() % 6);
    if (i == j) continue;
    const Eigen::Vector2d px(uniform(rng, 0, 63), uniform(rng, 0, 63));
    auto q = gt_correspondence(s, i, px, j);
    if (!q) continue;
    ++found;
    auto f = geometry::fundamental(s.rig.camera(i), s.rig.camera(j));
    EXPECT_LT(geometry::epipolar_line(f, px).distance(*q), 1e-6);
  }
  EXPECT_GT(found, 500);
}

TEST(Correspondence, PhotometricConsistency) {
  SceneConfig cfg = small_config(8);
  cfg.checker_amp = 0.0;
  cfg.hr_size = 128;
  auto s = generate(cfg);
  std::mt19937_64 rng(8);
  // Grazing views compress the finest noise octave below the pixel pitch, so
  // a small fraction of samples may exceed the bilinear tolerance.
  int checked = 0, within = 0;
  for (int trial = 0; trial < 3000; ++trial) {
    const int i = static_cast<int>(rng() % 6), j = static_cast<int>(rng() % 6);
    const Eigen::Vector2d px(static_cast<double>(rng() % 128), static_cast<double>(rng() % 128));
    if (!sees_patch(s, s.rig, i, px)) continue;
    auto q = gt_correspondence(s, i, px, j);
    if (!q || q->x() > 126 || q->y() > 126) continue;
    if (!sees_patch(s, s.rig, j, q->array().floor().matrix()) ||
        !sees_patch(s, s.rig, j, (q->array().floor() + 1.0).matrix()))
      continue;
    auto x = backproject(s.rig.camera(i), s.plane, px.x(), px.y());
    const float tex = plane_value(s, *x, 0);
    EXPECT_EQ(s.hr_images[s.index_of(i)].at(0, static_cast<int>(px.y()), static_cast<int>(px.x())), tex);
    const double err = std::abs(bilinear(s.hr_images[s.index_of(j)], q->x(), q->y()) - tex);
    EXPECT_LT(err, 0.1);
    within += err <= 2e-2;
    ++checked;
  }
  EXPECT_GT(checked, 1000);
  EXPECT_GE(within, 0.99 * checked);
}

TEST(SceneDir, SaveLoadRoundTrip) {
  mvgsr::testing::TempDir dir("scene");
  auto s = generate(small_config(9));
  save_scene(s, dir.path());
  ASSERT_TRUE(std::filesystem::exists(dir / "poses.json"));
  ASSERT_TRUE(std::filesystem::exists(dir / "hr/000.png"));
  ASSERT_TRUE(std::filesystem::exists(dir / "lr/005.png"));
  auto back = load_scene(dir.path());
  ASSERT_EQ(back.rig.cameras.size(), s.rig.cameras.size());
  for (std::size_t i = 0; i < s.rig.cameras.size(); ++i) {
    EXPECT_NEAR(back.rig.cameras[i].intrinsics.fx, s.rig.cameras[i].intrinsics.fx, 1e-12);
    EXPECT_NEAR(back.rig.cameras[i].intrinsics.cx, s.rig.cameras[i].intrinsics.cx, 1e-12);
    EXPECT_EQ(back.hr_images[i].data, s.hr_images[i].quantized().data);
    EXPECT_EQ(back.lr_images[i].data, s.lr_images[i].quantized().data);
  }
  EXPECT_EQ(back.texture.data, s.texture.data);
  // poses.json holds the low-resolution cameras.
  auto lr = colmap::read_manifest(dir / "poses.json");
  EXPECT_EQ(lr.cameras[0].intrinsics.width, 32);
}
