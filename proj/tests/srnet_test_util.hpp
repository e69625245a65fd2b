#pragma once

#include <random>
#include <vector>

#include "mvgsr/srnet.hpp"
#include "test_util.hpp"

namespace mvgsr::testing {

/// Tiny multi-view setup: 8x8 target and four auxiliary views on an arc,
/// with sample grids for all three blocks.
template <typename T>
struct MicroSetup {
  sr::NetworkConfig cfg;
  sr::NetInputs<T> in;
  ad::Tensor<T> gt;
};

template <typename T>
MicroSetup<T> micro_setup(std::uint64_t seed, int base_channels = 2, bool use_est = true) {
  MicroSetup<T> s;
  s.cfg.base_channels = base_channels;
  s.cfg.use_est = use_est;
  s.cfg.attn.k_epi = {6, 4, 3};
  s.cfg.seed = seed;
  std::mt19937_64 rng(seed);
  const int n = 8;
  const auto k = simple_intrinsics(n, n, 9.0);
  std::vector<Camera> cams;
  for (int i = 0; i < 5; ++i) {
    const double a = 0.35 * (i - 2);
    cams.push_back({k, CameraPose::look_at({4 * std::sin(a), 0.6 * (i % 2), 4 * std::cos(a)}, {0, 0, 0}, {0, -1, 0}, i)});
  }
  auto rand_img = [&](std::size_t h, std::size_t w) {
    std::vector<T> v(h * w);
    for (T& x : v) x = static_cast<T>(uniform(rng, 0, 1));
    return ad::Tensor<T>::from({1, h, w}, std::move(v));
  };
  s.in.target = rand_img(n, n);
  if (use_est) {
    for (int i = 0; i < 4; ++i) s.in.aux.push_back(rand_img(n, n));
    const std::vector<Camera> aux(cams.begin() + 1, cams.end());
    for (int j = 0; j < 3; ++j)
      s.in.grids[j] = std::make_shared<const epi::EpiSampleGrid>(
          epi::build_sample_grid(cams[0], aux, n >> j, n >> j, 1 << j, s.cfg.attn.k_epi[j]));
  }
  s.gt = rand_img(2 * n, 2 * n);
  return s;
}

/// Replaces every parameter with random values so no branch is silent
/// (the decoder head and fused attention output start at zero otherwise).
template <typename T>
void randomize_params(sr::SrNet<T>& net, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  for (auto& p : net.params().all())
    for (T& v : p.tensor.values()) v = static_cast<T>(uniform(rng, -scale, scale));
}

}  // namespace mvgsr::testing
