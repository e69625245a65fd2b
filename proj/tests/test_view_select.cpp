#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

#include "mvgsr/view_select.hpp"
#include "select_oracle.hpp"
#include "test_util.hpp"

using namespace mvgsr;
using namespace mvgsr::select;
using mvgsr::testing::oracle_select;
using mvgsr::testing::oracle_strided;
using mvgsr::testing::uniform;

namespace {

CameraPose pose_at(const Eigen::Vector3d& center, const Eigen::Vector3d& dir, int id = 0) {
  return CameraPose::look_at(center, center + dir, Eigen::Vector3d(0, -1, 0.3), id);
}

PoseManifest random_rig(std::mt19937_64& rng, int n) {
  PoseManifest m;
  auto k = mvgsr::testing::simple_intrinsics(64, 64, 60);
  for (int i = 0; i < n; ++i) {
    Eigen::Vector3d c(uniform(rng, -1, 1), uniform(rng, -0.3, 1), uniform(rng, -1, 1));
    c = c.normalized() * uniform(rng, 3, 6);
    const Eigen::Vector3d look(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    PoseManifest::Entry e;
    e.view_id = i * 3 + 1;
    e.intrinsics = k;
    e.pose = CameraPose::look_at(c, 0.5 * look, Eigen::Vector3d(0, -1, 0), e.view_id);
    m.cameras.push_back(e);
  }
  refresh_scene_scale(m);
  return m;
}

}  // namespace

TEST(CondCloser, Examples) {
  const auto t = pose_at({0, 0, 0}, {0, 0, 1});
  EXPECT_TRUE(cond_closer(t, pose_at({0, 0, 0.5}, {0, 0, 1})));
  EXPECT_FALSE(cond_closer(t, pose_at({0, 0, -0.5}, {0, 0, 1})));
  EXPECT_FALSE(cond_closer(t, pose_at({0, 0, 0}, {0, 0, 1})));
}

TEST(CondOverlap, Examples) {
  const auto t = pose_at({0, 0, 0}, {0, 0, 1});
  EXPECT_TRUE(cond_overlap(t, pose_at({1, 0, 0}, {0, 0, 1})));
  EXPECT_FALSE(cond_overlap(t, pose_at({1, 0, 0}, {1, 0, 0})));
  EXPECT_FALSE(cond_overlap(t, pose_at({0, 0, 0}, {0, 0, 1})));
}

TEST(CondOverlap, ThirtyDegreeBoundaryInclusive) {
  const auto t = pose_at({0, 0, 0}, {0, 0, 1});
  const double a = M_PI / 6.0;
  for (double sign : {1.0, -1.0}) {
    const auto c = pose_at({1, 0, 0}, {std::cos(a), sign * std::sin(a), 0});
    EXPECT_TRUE(cond_overlap(t, c));
  }
  // Just inside 30 degrees fails.
  const double b = M_PI / 6.0 - 1e-6;
  EXPECT_FALSE(cond_overlap(t, pose_at({1, 0, 0}, {std::cos(b), std::sin(b), 0})));
}

TEST(PairDistance, Examples) {
  SelectionConfig cfg;
  const auto t = pose_at({0, 0, 0}, {0, 0, 1});
  EXPECT_EQ(pair_distance(t, pose_at({0, 0, -1}, {0, 0, 1}), cfg), kInf);
  // Closer and overlapping, unit normalized distance, same direction.
  const auto c = pose_at({0, 0.6, 0.8}, {0, 0, 1});
  EXPECT_NEAR(pair_distance(t, c, cfg, 1.0), 0.5, 1e-15);
  EXPECT_NEAR(raw_distance(t, pose_at({0, 0, 1}, {0, 0, -1}), SelectionConfig{0.0, 4, 2}, 1.0), 2.0, 1e-15);
}

TEST(SelectAuxiliary, SixteenRingStridedRanks) {
  auto m = mvgsr::testing::ring_manifest(16, 4.0, mvgsr::testing::simple_intrinsics(64, 64, 60));
  SelectionConfig cfg;
  for (int target = 0; target < 16; ++target) {
    auto r = select_auxiliary(m, target, cfg);
    EXPECT_EQ(r.auxiliaries, oracle_select(m, target, 4, 2, 0.5));
    EXPECT_FALSE(r.padded);
    ASSERT_EQ(r.auxiliaries.size(), 4u);
    EXPECT_TRUE(std::is_sorted(r.distances.begin(), r.distances.end()));
  }
  // Sorted neighbours come in mirror pairs at ring offsets 1,1,2,2,...; ranks
  // 0,2,4,6 therefore take one camera at each offset 1..4 (which side of each
  // pair wins is decided by rounding).
  auto r = select_auxiliary(m, 0, cfg);
  std::vector<int> offsets;
  for (int id : r.auxiliaries) offsets.push_back(std::min(id, 16 - id));
  EXPECT_EQ(offsets, (std::vector<int>{1, 2, 3, 4}));
}

TEST(SelectAuxiliary, SingleFiniteCandidate) {
  PoseManifest m;
  auto k = mvgsr::testing::simple_intrinsics(64, 64, 60);
  m.cameras.push_back({0, k, pose_at({0, 0, 0}, {0, 0, 1}, 0)});
  m.cameras.push_back({1, k, pose_at({1, 0, 1}, {0, 0, 1}, 1)});
  refresh_scene_scale(m);
  SelectionConfig cfg;
  cfg.n_ref = 1;
  auto r = select_auxiliary(m, 0, cfg);
  EXPECT_EQ(r.auxiliaries, std::vector<int>{1});
  EXPECT_FALSE(r.padded);
}

TEST(SelectAuxiliary, PaddingFromRejected) {
  PoseManifest m;
  auto k = mvgsr::testing::simple_intrinsics(64, 64, 60);
  m.cameras.push_back({0, k, pose_at({0, 0, 0}, {0, 0, 1}, 0)});
  m.cameras.push_back({1, k, pose_at({1, 0, 1}, {0, 0, 1}, 1)});
  m.cameras.push_back({2, k, pose_at({0, 0, -3}, {0, 0, 1}, 2)});  // behind
  m.cameras.push_back({3, k, pose_at({0, 0, -1}, {0, 0, 1}, 3)});  // behind, nearer
  refresh_scene_scale(m);
  SelectionConfig cfg;
  cfg.n_ref = 3;
  auto r = select_auxiliary(m, 0, cfg);
  EXPECT_EQ(r.auxiliaries, (std::vector<int>{1, 3, 2}));
  EXPECT_TRUE(r.padded);
  EXPECT_EQ(r.distances[1], kInf);
}

TEST(SelectAuxiliary, Errors) {
  auto m = mvgsr::testing::ring_manifest(4, 4.0, mvgsr::testing::simple_intrinsics(64, 64, 60));
  SelectionConfig cfg;
  try {
    select_auxiliary(m, 99, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::UnknownView);
  }
  try {
    select_auxiliary(m, 0, cfg);  // 3 candidates < 4
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NotEnoughViews);
  }
}

TEST(SelectAuxiliary, NearestIgnoresFiltering) {
  auto m = mvgsr::testing::ring_manifest(8, 4.0, mvgsr::testing::simple_intrinsics(64, 64, 60));
  SelectionConfig cfg;
  cfg.strategy = Strategy::Nearest;
  auto r = select_auxiliary(m, 0, cfg);
  EXPECT_EQ(r.auxiliaries, (std::vector<int>{1, 7, 2, 6}));
}

TEST(SelectAuxiliary, RandomIsSeededSubset) {
  auto m = mvgsr::testing::ring_manifest(16, 4.0, mvgsr::testing::simple_intrinsics(64, 64, 60));
  SelectionConfig cfg;
  cfg.strategy = Strategy::Random;
  cfg.random_seed = 7;
  auto a = select_auxiliary(m, 3, cfg);
  auto b = select_auxiliary(m, 3, cfg);
  EXPECT_EQ(a.auxiliaries, b.auxiliaries);
  std::set<int> ids(a.auxiliaries.begin(), a.auxiliaries.end());
  EXPECT_EQ(ids.size(), 4u);
  EXPECT_FALSE(ids.count(3));
  // Every candidate shows up across seeds (rough uniformity check).
  std::map<int, int> hits;
  for (std::uint64_t s = 0; s < 2000; ++s) {
    cfg.random_seed = s;
    for (int id : select_auxiliary(m, 3, cfg).auxiliaries) ++hits[id];
  }
  EXPECT_EQ(hits.size(), 15u);
  for (auto [id, n] : hits) EXPECT_NEAR(n, 2000.0 * 4 / 15, 120.0) << id;
}

TEST(SelectionTable, JsonRoundTrip) {
  auto m = mvgsr::testing::ring_manifest(8, 4.0, mvgsr::testing::simple_intrinsics(64, 64, 60));
  SelectionConfig cfg;
  cfg.n_ref = 5;
  auto table = select_all(m, cfg);
  auto back = selection_from_json(selection_to_json(table, cfg));
  ASSERT_EQ(back.size(), table.size());
  for (std::size_t i = 0; i < table.size(); ++i) {
    EXPECT_EQ(back[i].auxiliaries, table[i].auxiliaries);
    EXPECT_EQ(back[i].distances, table[i].distances);
    EXPECT_EQ(back[i].padded, table[i].padded);
  }
}

// ---------------------------------------------------------------------------
// properties over random rigs

TEST(SelectionProperties, MatchesOracleAndConditions) {
  std::mt19937_64 rng(21);
  for (int rig = 0; rig < 30; ++rig) {
    const int n = 8 + static_cast<int>(rng() % 57);
    auto m = random_rig(rng, n);
    SelectionConfig cfg;
    for (const auto& e : m.cameras) {
      auto r = select_auxiliary(m, e.view_id, cfg);
      auto expect = oracle_strided(m, e.view_id, cfg.n_ref, cfg.stride_l, cfg.lambda_pos);
      EXPECT_EQ(r.auxiliaries, oracle_select(m, e.view_id, cfg.n_ref, cfg.stride_l, cfg.lambda_pos));
      ASSERT_GE(r.auxiliaries.size(), expect.size());
      EXPECT_TRUE(std::equal(expect.begin(), expect.end(), r.auxiliaries.begin()));
      EXPECT_EQ(r.padded, expect.size() < 4u);
      std::set<int> distinct(r.auxiliaries.begin(), r.auxiliaries.end());
      EXPECT_EQ(distinct.size(), r.auxiliaries.size());
      EXPECT_FALSE(distinct.count(e.view_id));
      for (std::size_t i = 0; i < expect.size(); ++i) {
        const auto& c = m.at(r.auxiliaries[i]).pose;
        EXPECT_TRUE(cond_closer(e.pose, c));
        EXPECT_TRUE(cond_overlap(e.pose, c));
      }
    }
  }
}

TEST(SelectionProperties, ScaleAndRotationInvariance) {
  std::mt19937_64 rng(22);
  for (int rig = 0; rig < 10; ++rig) {
    auto m = random_rig(rng, 24);
    const Eigen::Matrix3d rot = mvgsr::testing::random_rotation(rng);
    const double s = uniform(rng, 0.1, 10.0);
    Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
    for (const auto& e : m.cameras) centroid += e.pose.center;
    centroid /= static_cast<double>(m.cameras.size());

    PoseManifest scaled = m, rotated = m;
    for (auto& e : scaled.cameras) e.pose.center = centroid + s * (e.pose.center - centroid);
    for (auto& e : rotated.cameras) {
      e.pose.rotation = rot * e.pose.rotation;
      e.pose.center = rot * e.pose.center;
      e.pose.view_dir = e.pose.rotation.col(2);
    }
    refresh_scene_scale(scaled);
    refresh_scene_scale(rotated);
    SelectionConfig cfg;
    for (const auto& e : m.cameras) {
      auto base = select_auxiliary(m, e.view_id, cfg).auxiliaries;
      EXPECT_EQ(select_auxiliary(scaled, e.view_id, cfg).auxiliaries, base);
      EXPECT_EQ(select_auxiliary(rotated, e.view_id, cfg).auxiliaries, base);
    }
  }
}

TEST(SelectionProperties, StridedPicksAreSortedSubsequence) {
  std::mt19937_64 rng(23);
  for (int rig = 0; rig < 10; ++rig) {
    auto m = random_rig(rng, 40);
    SelectionConfig cfg;
    cfg.stride_l = 3;
    cfg.n_ref = 5;
    for (const auto& e : m.cameras) {
      auto r = select_auxiliary(m, e.view_id, cfg);
      std::vector<double> finite;
      for (double d : r.distances)
        if (std::isfinite(d)) finite.push_back(d);
      if (!r.padded) {
        EXPECT_TRUE(std::is_sorted(finite.begin(), finite.end()));
      }
    }
  }
}
