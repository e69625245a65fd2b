#pragma once

// Wall-clock and multiply-accumulate comparison of epipolar and full-cross
// attention on synthetic feature maps.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <vector>

#include "mvgsr/epiattn.hpp"
#include "mvgsr/synthscene.hpp"

namespace mvgsr::bench {

struct AttnBenchConfig {
  std::vector<int> sizes{16, 32, 64};
  int k = 32;
  int channels = 32;
  int n_views = 4;
  int trials = 3;
  double min_seconds = 0.2;  // per timed trial
  std::uint64_t seed = 0;
};

struct AttnBenchRow {
  int size = 0;
  std::size_t positions = 0;
  double epi_us = 0;   // per attended (query, view) pair
  double full_us = 0;  // per (query, view) pair
  std::uint64_t epi_macs = 0, full_macs = 0;
  std::uint64_t epi_pairs = 0, full_pairs = 0;  // attended (query, view) pairs per pass
};

namespace detail {

/// Seconds per call of `fn`, averaged over at least `min_seconds`.
template <typename Fn>
double time_per_call(Fn&& fn, double min_seconds) {
  using clock = std::chrono::steady_clock;
  long reps = 0;
  const auto t0 = clock::now();
  double elapsed = 0;
  do {
    fn();
    ++reps;
    elapsed = std::chrono::duration<double>(clock::now() - t0).count();
  } while (elapsed < min_seconds);
  return elapsed / reps;
}

}  // namespace detail

/// Cameras on a ring around the origin; the target looks from the front and
/// each auxiliary view sits 30 degrees further along.
inline std::pair<Camera, std::vector<Camera>> bench_rig(int size, int n_views) {
  const auto k = synth::make_intrinsics(size, 50.0);
  auto cam = [&](int i) {
    const double a = i * M_PI / 6.0;
    return Camera{k, CameraPose::look_at({4 * std::sin(a), -1.5, 4 * std::cos(a)}, {0, 0, 0}, {0, -1, 0}, i)};
  };
  std::vector<Camera> aux;
  for (int v = 1; v <= n_views; ++v) aux.push_back(cam(v));
  return {cam(0), aux};
}

inline std::vector<AttnBenchRow> run_attention_bench(const AttnBenchConfig& cfg) {
  if (cfg.k < 2 || cfg.channels < 1 || cfg.n_views < 1 || cfg.trials < 1)
    fail(Errc::InvalidArgument, "bench needs k >= 2 and positive channels, views and trials");
  struct Setup {
    ad::Tensor<float> q;
    std::vector<ad::Tensor<float>> keys, values;
    std::shared_ptr<const epi::EpiSampleGrid> grid;
  };
  ad::NoGradGuard no_grad;
  std::vector<Setup> setups;
  std::vector<AttnBenchRow> rows;
  for (int size : cfg.sizes) {
    if (size < 2) fail(Errc::InvalidArgument, "bench sizes must be >= 2");
    const std::size_t m = static_cast<std::size_t>(size) * size, c = cfg.channels;
    std::mt19937_64 rng(cfg.seed + size);
    std::uniform_real_distribution<float> u(-1.0f, 1.0f);
    auto rand_tokens = [&] {
      std::vector<float> v(m * c);
      for (float& x : v) x = u(rng);
      return ad::Tensor<float>::from({m, c}, std::move(v));
    };
    Setup s;
    s.q = rand_tokens();
    for (int v = 0; v < cfg.n_views; ++v) {
      s.keys.push_back(rand_tokens());
      s.values.push_back(rand_tokens());
    }
    const auto [target, aux] = bench_rig(size, cfg.n_views);
    s.grid = std::make_shared<const epi::EpiSampleGrid>(epi::build_sample_grid(target, aux, size, size, 1, cfg.k));
    setups.push_back(std::move(s));
    AttnBenchRow row;
    row.size = size;
    row.positions = m;
    rows.push_back(row);
  }

  auto epi_pass = [&](const Setup& s) {
    for (int v = 0; v < cfg.n_views; ++v) epi::epi_attend_view(s.q, s.keys[v], s.values[v], s.grid, v);
  };
  auto full_pass = [&](const Setup& s) {
    for (int v = 0; v < cfg.n_views; ++v)
      epi::full_cross_attend_view(s.q, s.keys[v], s.values[v], 1, s.keys[v].dim(0));
  };
  auto& mac = epi::MacCounter::current();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    mac.reset();
    epi_pass(setups[i]);
    rows[i].epi_macs = mac.macs;
    rows[i].epi_pairs = mac.query_views;
    mac.reset();
    full_pass(setups[i]);
    rows[i].full_macs = mac.macs;
    rows[i].full_pairs = mac.query_views;
    if (rows[i].epi_pairs == 0) fail(Errc::EmptySegment, "bench rig produced no valid epipolar pairs");
  }

  // Trials interleave the sizes so slow drift in machine load hits every
  // size alike; each size keeps its best trial.
  std::vector<double> epi_best(rows.size(), 1e300), full_best(rows.size(), 1e300);
  for (int t = 0; t < cfg.trials; ++t)
    for (std::size_t i = 0; i < rows.size(); ++i) {
      epi_best[i] = std::min(epi_best[i], detail::time_per_call([&] { epi_pass(setups[i]); }, cfg.min_seconds));
      full_best[i] = std::min(full_best[i], detail::time_per_call([&] { full_pass(setups[i]); }, cfg.min_seconds));
    }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].epi_us = 1e6 * epi_best[i] / rows[i].epi_pairs;
    rows[i].full_us = 1e6 * full_best[i] / rows[i].full_pairs;
  }
  return rows;
}

}  // namespace mvgsr::bench
