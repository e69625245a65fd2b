#pragma once

// Pose-based auxiliary view selection: geometric filtering, mixed
// position/direction distance ranking and strided picking, plus the
// nearest-neighbour and random baselines.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "mvgsr/camera.hpp"
#include "mvgsr/error.hpp"

namespace mvgsr::select {

enum class Strategy { Auxiliary, Nearest, Random };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Auxiliary: return "auxiliary";
    case Strategy::Nearest: return "nearest";
    case Strategy::Random: return "random";
  }
  return "auxiliary";
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "auxiliary") return Strategy::Auxiliary;
  if (s == "nearest") return Strategy::Nearest;
  if (s == "random") return Strategy::Random;
  fail(Errc::InvalidArgument, "unknown selection strategy '" + s + "'");
}

struct SelectionConfig {
  double lambda_pos = 0.5;
  int n_ref = 4;
  int stride_l = 2;
  Strategy strategy = Strategy::Auxiliary;
  bool normalize_pos = true;
  std::uint64_t random_seed = 0;

  void validate() const {
    if (n_ref < 1) fail(Errc::InvalidArgument, "n_ref must be >= 1");
    if (stride_l < 1) fail(Errc::InvalidArgument, "stride_l must be >= 1");
    if (!(lambda_pos >= 0.0 && lambda_pos <= 1.0)) fail(Errc::InvalidArgument, "lambda_pos must lie in [0, 1]");
  }
};

struct SelectionResult {
  int target = 0;
  std::vector<int> auxiliaries;
  std::vector<double> distances;
  bool padded = false;
};

inline constexpr double kInf = std::numeric_limits<double>::infinity();

/// The candidate lies in front of the target: d_i . (P_j - P_i) > 0.
inline bool cond_closer(const CameraPose& target, const CameraPose& cand) {
  return target.view_dir.dot(cand.center - target.center) > 0.0;
}

/// sin of the angle between the baseline P_j - P_i and d_j is at least 1/2.
/// A 1e-12 allowance keeps the inclusive boundary exact under rounding.
inline bool cond_overlap(const CameraPose& target, const CameraPose& cand) {
  const Eigen::Vector3d base = cand.center - target.center;
  const double bn = base.norm();
  const double dn = cand.view_dir.norm();
  if (bn == 0.0 || dn == 0.0) return false;
  const double sin_theta = base.cross(cand.view_dir).norm() / (bn * dn);
  return sin_theta >= 0.5 - 1e-12;
}

/// Mixed distance without the filtering branch.
inline double raw_distance(const CameraPose& target, const CameraPose& cand, const SelectionConfig& cfg,
                           double scene_scale = 1.0) {
  double d_pos = (target.center - cand.center).norm();
  if (cfg.normalize_pos) d_pos /= scene_scale;
  const double cosine =
      target.view_dir.dot(cand.view_dir) / (target.view_dir.norm() * cand.view_dir.norm());
  const double d_dir = 1.0 - cosine;
  return cfg.lambda_pos * d_pos + (1.0 - cfg.lambda_pos) * d_dir;
}

inline double pair_distance(const CameraPose& target, const CameraPose& cand, const SelectionConfig& cfg,
                            double scene_scale = 1.0) {
  if (!cond_closer(target, cand) || !cond_overlap(target, cand)) return kInf;
  return raw_distance(target, cand, cfg, scene_scale);
}

namespace detail {

struct Ranked {
  int view_id;
  double distance;  // key used for sorting
  double reported;  // value written to SelectionResult::distances
};

inline void sort_ranked(std::vector<Ranked>& v) {
  std::sort(v.begin(), v.end(), [](const Ranked& a, const Ranked& b) {
    if (a.distance != b.distance) return a.distance < b.distance;
    return a.view_id < b.view_id;
  });
}

// Unbiased draw in [0, n) from a 64-bit engine; independent of the standard
// library's distribution implementation.
inline std::uint64_t bounded(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

}  // namespace detail

inline SelectionResult select_auxiliary(const PoseManifest& manifest, int target_id, const SelectionConfig& cfg) {
  cfg.validate();
  const auto& target = manifest.at(target_id).pose;
  if (manifest.cameras.size() < 2) fail(Errc::NotEnoughViews, "manifest holds fewer than two views");
  const int n_candidates = static_cast<int>(manifest.cameras.size()) - 1;
  if (n_candidates < cfg.n_ref)
    fail(Errc::NotEnoughViews, std::to_string(n_candidates) + " candidates for n_ref=" + std::to_string(cfg.n_ref));

  SelectionResult res;
  res.target = target_id;
  const std::size_t want = static_cast<std::size_t>(cfg.n_ref);

  if (cfg.strategy == Strategy::Nearest) {
    std::vector<detail::Ranked> all;
    for (const auto& e : manifest.cameras) {
      if (e.view_id == target_id) continue;
      double d = (e.pose.center - target.center).norm();
      if (cfg.normalize_pos) d /= manifest.scene_scale;
      all.push_back({e.view_id, d, d});
    }
    detail::sort_ranked(all);
    for (std::size_t i = 0; i < want; ++i) {
      res.auxiliaries.push_back(all[i].view_id);
      res.distances.push_back(all[i].reported);
    }
    return res;
  }

  if (cfg.strategy == Strategy::Random) {
    std::vector<int> ids;
    for (const auto& e : manifest.cameras)
      if (e.view_id != target_id) ids.push_back(e.view_id);
    std::sort(ids.begin(), ids.end());
    std::mt19937_64 rng(cfg.random_seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(target_id));
    // Partial Fisher-Yates: the first n_ref slots form a uniform subset.
    for (std::size_t i = 0; i < want; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(detail::bounded(rng, ids.size() - i));
      std::swap(ids[i], ids[j]);
    }
    for (std::size_t i = 0; i < want; ++i) {
      res.auxiliaries.push_back(ids[i]);
      res.distances.push_back(pair_distance(target, manifest.at(ids[i]).pose, cfg, manifest.scene_scale));
    }
    return res;
  }

  std::vector<detail::Ranked> finite;
  std::vector<detail::Ranked> rejected;
  for (const auto& e : manifest.cameras) {
    if (e.view_id == target_id) continue;
    const double d = pair_distance(target, e.pose, cfg, manifest.scene_scale);
    if (std::isfinite(d)) {
      finite.push_back({e.view_id, d, d});
    } else {
      rejected.push_back({e.view_id, raw_distance(target, e.pose, cfg, manifest.scene_scale), kInf});
    }
  }
  detail::sort_ranked(finite);
  detail::sort_ranked(rejected);

  std::vector<bool> used(finite.size(), false);
  for (std::size_t idx = 0; idx < finite.size() && res.auxiliaries.size() < want;
       idx += static_cast<std::size_t>(cfg.stride_l)) {
    res.auxiliaries.push_back(finite[idx].view_id);
    res.distances.push_back(finite[idx].reported);
    used[idx] = true;
  }
  for (std::size_t idx = 0; idx < finite.size() && res.auxiliaries.size() < want; ++idx) {
    if (used[idx]) continue;
    res.auxiliaries.push_back(finite[idx].view_id);
    res.distances.push_back(finite[idx].reported);
    res.padded = true;
  }
  for (std::size_t idx = 0; idx < rejected.size() && res.auxiliaries.size() < want; ++idx) {
    res.auxiliaries.push_back(rejected[idx].view_id);
    res.distances.push_back(rejected[idx].reported);
    res.padded = true;
  }
  return res;
}

inline std::vector<SelectionResult> select_all(const PoseManifest& manifest, const SelectionConfig& cfg) {
  std::vector<SelectionResult> out;
  for (const auto& e : manifest.cameras) out.push_back(select_auxiliary(manifest, e.view_id, cfg));
  return out;
}

// Selection table file: same structured-text style as the pose manifest.
// Infinite distances are stored as null.

inline constexpr int kSelectionSchemaVersion = 1;

inline nlohmann::json selection_to_json(const std::vector<SelectionResult>& table, const SelectionConfig& cfg) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : table) {
    nlohmann::json dist = nlohmann::json::array();
    for (double d : r.distances) dist.push_back(std::isfinite(d) ? nlohmann::json(d) : nlohmann::json(nullptr));
    rows.push_back({{"target", r.target}, {"auxiliaries", r.auxiliaries}, {"distances", dist}, {"padded", r.padded}});
  }
  return {{"schema_version", kSelectionSchemaVersion},
          {"config",
           {{"lambda_pos", cfg.lambda_pos},
            {"n_ref", cfg.n_ref},
            {"stride_l", cfg.stride_l},
            {"strategy", strategy_name(cfg.strategy)},
            {"normalize_pos", cfg.normalize_pos},
            {"random_seed", cfg.random_seed}}},
          {"selections", rows}};
}

inline std::vector<SelectionResult> selection_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != kSelectionSchemaVersion)
      fail(Errc::SchemaVersionMismatch, "selection table schema");
    std::vector<SelectionResult> out;
    for (const auto& row : j.at("selections")) {
      SelectionResult r;
      r.target = row.at("target").get<int>();
      r.auxiliaries = row.at("auxiliaries").get<std::vector<int>>();
      for (const auto& d : row.at("distances")) r.distances.push_back(d.is_null() ? kInf : d.get<double>());
      r.padded = row.at("padded").get<bool>();
      out.push_back(std::move(r));
    }
    return out;
  } catch (const nlohmann::json::exception& ex) {
    fail(Errc::MalformedFile, std::string("selection table: ") + ex.what());
  }
}

inline void write_selection(const std::vector<SelectionResult>& table, const SelectionConfig& cfg,
                            const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(Errc::IoError, "cannot write " + path.string());
  out << selection_to_json(table, cfg).dump(2) << '\n';
}

}  // namespace mvgsr::select
