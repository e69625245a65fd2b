#pragma once

// Attention along epipolar lines. For every target feature pixel and every
// auxiliary view, K points are sampled uniformly on the clipped epipolar
// line; keys and values are read there bilinearly and attended by the query.
// The per-view results are then fused by a small per-pixel self-attention.

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "mvgsr/autodiff/ops.hpp"
#include "mvgsr/camera.hpp"
#include "mvgsr/error.hpp"
#include "mvgsr/geometry.hpp"
#include "mvgsr/image.hpp"

namespace mvgsr::epi {

enum class Variant { Epipolar, FullCross };

inline const char* variant_name(Variant v) { return v == Variant::Epipolar ? "epipolar" : "full_cross"; }

inline Variant parse_variant(const std::string& s) {
  if (s == "epipolar") return Variant::Epipolar;
  if (s == "full_cross") return Variant::FullCross;
  fail(Errc::InvalidArgument, "unknown attention variant '" + s + "'");
}

struct AttentionConfig {
  std::array<int, 3> k_epi{64, 32, 16};
  int n_heads = 1;
  std::array<int, 3> channels{32, 64, 128};
  Variant variant = Variant::Epipolar;
  std::size_t full_cross_cap = 64 * 64;  // max aux positions for full_cross

  void validate() const {
    if (n_heads < 1) fail(Errc::InvalidArgument, "n_heads must be >= 1");
    for (int k : k_epi)
      if (k < 2) fail(Errc::InvalidArgument, "k_epi must be >= 2");
    for (int c : channels)
      if (c < 1 || c % n_heads != 0) fail(Errc::InvalidArgument, "channels must be a positive multiple of n_heads");
  }
};

/// Multiply-accumulates spent on scoring and aggregation, per thread.
struct MacCounter {
  std::uint64_t macs = 0;
  std::uint64_t query_views = 0;  // (query, view) pairs attended

  static MacCounter& current() {
    thread_local MacCounter c;
    return c;
  }
  void reset() { *this = {}; }
};

// ---------------------------------------------------------------------------
// sample grid

struct EpiSampleGrid {
  int feat_w = 0, feat_h = 0, stride = 1, k = 0;
  int n_views = 0;
  std::vector<int> view_ids;
  std::vector<double> coords;        // ((q * n_views + v) * k + s) * 2 + {0: u, 1: v}
  std::vector<std::uint8_t> valid;   // q * n_views + v
  std::vector<double> seg_length;    // clipped segment length, 0 when invalid

  int n_queries() const { return feat_w * feat_h; }
  std::size_t pair(int q, int v) const { return static_cast<std::size_t>(q) * n_views + v; }
  bool is_valid(int q, int v) const { return valid[pair(q, v)] != 0; }
  const double* at(int q, int v) const { return coords.data() + pair(q, v) * k * 2; }
  double spacing(int q, int v) const { return k > 1 ? seg_length[pair(q, v)] / (k - 1) : 0.0; }

  void allocate(int w, int h, int nv, int kk) {
    feat_w = w;
    feat_h = h;
    n_views = nv;
    k = kk;
    const std::size_t pairs = static_cast<std::size_t>(w) * h * nv;
    coords.assign(pairs * kk * 2, 0.0);
    valid.assign(pairs, 0);
    seg_length.assign(pairs, 0.0);
  }
};

/// Samples the epipolar line of every target feature pixel in each auxiliary
/// view. Cameras carry image-resolution intrinsics; they are rescaled to the
/// feature map by `stride`.
inline EpiSampleGrid build_sample_grid(const Camera& target, const std::vector<Camera>& aux, int feat_w, int feat_h,
                                       int stride, int k) {
  if (k < 1) fail(Errc::InvalidArgument, "sample count must be positive");
  EpiSampleGrid g;
  g.allocate(feat_w, feat_h, static_cast<int>(aux.size()), k);
  g.stride = stride;
  Camera t = target;
  t.intrinsics = geometry::scale_intrinsics(target.intrinsics, stride);
  for (std::size_t v = 0; v < aux.size(); ++v) {
    g.view_ids.push_back(aux[v].pose.view_id);
    Camera a = aux[v];
    a.intrinsics = geometry::scale_intrinsics(aux[v].intrinsics, stride);
    const auto f = geometry::fundamental(t, a);
    if (!f.valid) continue;
    for (int y = 0; y < feat_h; ++y)
      for (int x = 0; x < feat_w; ++x) {
        const Eigen::Vector3d l = f.m * Eigen::Vector3d(x, y, 1.0);
        if (!(std::hypot(l.x(), l.y()) >= 1e-12)) continue;
        const auto seg = geometry::clip_to_rect(geometry::normalize_line(l), feat_w, feat_h);
        if (!seg.inside) continue;
        const int q = y * feat_w + x;
        const auto pts = geometry::sample_segment(seg, k);
        double* out = g.coords.data() + g.pair(q, static_cast<int>(v)) * k * 2;
        for (int s = 0; s < k; ++s) {
          out[2 * s] = pts[s].x();
          out[2 * s + 1] = pts[s].y();
        }
        g.valid[g.pair(q, static_cast<int>(v))] = 1;
        g.seg_length[g.pair(q, static_cast<int>(v))] = (seg.p1 - seg.p0).norm();
      }
  }
  return g;
}

/// Grids depend only on poses, so they are built once per (target, aux set,
/// feature size, k) and shared.
class GridCache {
 public:
  std::shared_ptr<const EpiSampleGrid> get(const PoseManifest& rig, int target, const std::vector<int>& aux, int feat_w,
                                           int feat_h, int stride, int k) {
    std::string key = std::to_string(target) + "|" + std::to_string(feat_w) + "x" + std::to_string(feat_h) + "|" +
                      std::to_string(stride) + "|" + std::to_string(k) + "|";
    for (int a : aux) key += std::to_string(a) + ",";
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = grids_.find(key);
      if (it != grids_.end()) return it->second;
    }
    std::vector<Camera> cams;
    for (int a : aux) cams.push_back(rig.camera(a));
    auto grid = std::make_shared<const EpiSampleGrid>(build_sample_grid(rig.camera(target), cams, feat_w, feat_h, stride, k));
    std::lock_guard<std::mutex> lock(mu_);
    return grids_.emplace(key, std::move(grid)).first->second;
  }
  std::size_t size() const { return grids_.size(); }

 private:
  std::mutex mu_;
  std::map<std::string, std::shared_ptr<const EpiSampleGrid>> grids_;
};

// ---------------------------------------------------------------------------
// epipolar attention for one auxiliary view

template <typename T>
struct ViewAttention {
  ad::Tensor<T> out;                              // [N, C]
  std::shared_ptr<const std::vector<T>> weights;  // [N, heads, K]; zero for invalid queries
};

namespace detail {

template <typename T>
void require_tokens(const ad::Tensor<T>& t, std::size_t n, std::size_t c, const char* what) {
  if (t.ndim() != 2 || t.dim(0) != n || t.dim(1) != c)
    fail(Errc::ShapeMismatch, std::string(what) + ": expected [" + std::to_string(n) + ", " + std::to_string(c) +
                                  "], got " + ad::shape_str(t.shape()));
}

// Per-(query, view) kernels. D is the per-head channel count when known at
// compile time (Eigen::Dynamic otherwise) so the channel loops vectorize.
template <typename T, int D>
struct EpiKernel {
  using Vec = Eigen::Matrix<T, D, 1>;
  using CMap = Eigen::Map<const Vec>;
  using Map = Eigen::Map<Vec>;

  std::size_t c, d, heads;
  int k;
  T scale;

  void forward(const T* qi, const T* kd, const T* vd, const ad::detail::Bilinear* taps, T* a, T* oi,
               T* logits) const {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * d;
      CMap qh(qi + off, d);
      T mx = -std::numeric_limits<T>::infinity();
      for (int s = 0; s < k; ++s) {
        T dot = 0;
        for (int t = 0; t < taps[s].n; ++t)
          dot += static_cast<T>(taps[s].w[t]) * qh.dot(CMap(kd + taps[s].idx[t] * c + off, d));
        logits[s] = dot * scale;
        mx = std::max(mx, logits[s]);
      }
      double z = 0;
      for (int s = 0; s < k; ++s) z += std::exp(static_cast<double>(logits[s] - mx));
      Map oh(oi + off, d);
      T* ah = a + h * k;
      for (int s = 0; s < k; ++s) {
        ah[s] = static_cast<T>(std::exp(static_cast<double>(logits[s] - mx)) / z);
        for (int t = 0; t < taps[s].n; ++t)
          oh.noalias() += (ah[s] * static_cast<T>(taps[s].w[t])) * CMap(vd + taps[s].idx[t] * c + off, d);
      }
    }
  }

  void backward(const T* qi, const T* kd, const T* vd, const ad::detail::Bilinear* taps, const T* a, const T* gi,
                T* gqi, T* gk, T* gv, T* da) const {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = h * d;
      CMap gh(gi + off, d);
      const T* ah = a + h * k;
      T dot = 0;
      for (int s = 0; s < k; ++s) {
        T acc = 0;
        for (int t = 0; t < taps[s].n; ++t) {
          const T w = static_cast<T>(taps[s].w[t]);
          acc += w * gh.dot(CMap(vd + taps[s].idx[t] * c + off, d));
          if (gv) Map(gv + taps[s].idx[t] * c + off, d).noalias() += (ah[s] * w) * gh;
        }
        da[s] = acc;
        dot += ah[s] * acc;
      }
      CMap qh(qi + off, d);
      for (int s = 0; s < k; ++s) {
        const T dl = ah[s] * (da[s] - dot) * scale;
        if (dl == T(0)) continue;
        for (int t = 0; t < taps[s].n; ++t) {
          const T w = static_cast<T>(taps[s].w[t]) * dl;
          if (gqi) Map(gqi + off, d).noalias() += w * CMap(kd + taps[s].idx[t] * c + off, d);
          if (gk) Map(gk + taps[s].idx[t] * c + off, d).noalias() += w * qh;
        }
      }
    }
  }
};

template <typename T, typename Fn>
void with_kernel(std::size_t c, std::size_t heads, int k, Fn&& fn) {
  const std::size_t d = c / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  switch (d) {
    case 8: return fn(EpiKernel<T, 8>{c, d, heads, k, scale});
    case 16: return fn(EpiKernel<T, 16>{c, d, heads, k, scale});
    case 32: return fn(EpiKernel<T, 32>{c, d, heads, k, scale});
    case 64: return fn(EpiKernel<T, 64>{c, d, heads, k, scale});
    default: return fn(EpiKernel<T, Eigen::Dynamic>{c, d, heads, k, scale});
  }
}

inline void grid_taps(const EpiSampleGrid& g, int q, int v, std::vector<ad::detail::Bilinear>& taps) {
  const double* xy = g.at(q, v);
  const int w = g.feat_w, h = g.feat_h;
  for (int s = 0; s < g.k; ++s) {
    const double u = xy[2 * s], vv = xy[2 * s + 1];
    if (w < 2 || h < 2 || !(u >= 0.0 && u <= w - 1.0 && vv >= 0.0 && vv <= h - 1.0)) {
      taps[s] = ad::detail::bilinear_taps(u, vv, static_cast<std::size_t>(h), static_cast<std::size_t>(w));
      continue;
    }
    // Grid samples lie inside the map: all four corners exist (some may
    // carry zero weight).
    const int x0 = std::min(static_cast<int>(u), w - 2), y0 = std::min(static_cast<int>(vv), h - 2);
    const double ax = u - x0, ay = vv - y0;
    auto& b = taps[s];
    const std::size_t i0 = static_cast<std::size_t>(y0) * w + x0;
    b.n = 4;
    b.idx[0] = i0;
    b.idx[1] = i0 + 1;
    b.idx[2] = i0 + w;
    b.idx[3] = i0 + w + 1;
    b.w[0] = (1 - ax) * (1 - ay);
    b.w[1] = ax * (1 - ay);
    b.w[2] = (1 - ax) * ay;
    b.w[3] = ax * ay;
    b.mass = 1.0;
  }
}

}  // namespace detail

/// Attends queries q [N, C] to keys/values [H*W, C] of auxiliary view `v`
/// along the sample grid. Invalid (query, view) pairs yield zeros.
template <typename T>
ViewAttention<T> epi_attend_view(const ad::Tensor<T>& q, const ad::Tensor<T>& keys, const ad::Tensor<T>& values,
                                 std::shared_ptr<const EpiSampleGrid> grid, int v, int n_heads = 1) {
  const std::size_t n = static_cast<std::size_t>(grid->n_queries());
  const std::size_t hw = static_cast<std::size_t>(grid->feat_w) * grid->feat_h;
  if (q.ndim() != 2) fail(Errc::ShapeMismatch, "epi_attend: queries must be [N, C]");
  const std::size_t c = q.dim(1);
  detail::require_tokens(q, n, c, "epi_attend queries");
  detail::require_tokens(keys, hw, c, "epi_attend keys");
  detail::require_tokens(values, hw, c, "epi_attend values");
  if (n_heads < 1 || c % n_heads != 0) fail(Errc::ShapeMismatch, "channels not divisible by heads");
  if (v < 0 || v >= grid->n_views) fail(Errc::ShapeMismatch, "view index outside the grid");

  const int kk = grid->k;
  const std::size_t heads = static_cast<std::size_t>(n_heads);
  auto alpha = std::make_shared<std::vector<T>>(n * heads * kk, T(0));

  auto pq = q.impl(), pk = keys.impl(), pv = values.impl();
  ad::Tensor<T> out = ad::make_output<T>({n, c}, "epi_attend", {q, keys, values}, [=](ad::TensorImpl<T>& o) {
    T* gq = ad::grad_of(pq);
    T* gk = ad::grad_of(pk);
    T* gv = ad::grad_of(pv);
    detail::with_kernel<T>(c, heads, kk, [&](const auto& kern) {
      std::vector<ad::detail::Bilinear> taps(kk);
      std::vector<T> da(kk);
      for (std::size_t i = 0; i < n; ++i) {
        if (!grid->is_valid(static_cast<int>(i), v)) continue;
        detail::grid_taps(*grid, static_cast<int>(i), v, taps);
        kern.backward(pq->data.data() + i * c, pk->data.data(), pv->data.data(), taps.data(),
                      alpha->data() + i * heads * kk, o.grad.data() + i * c, gq ? gq + i * c : nullptr, gk, gv,
                      da.data());
      }
    });
  });

  auto& counter = MacCounter::current();
  detail::with_kernel<T>(c, heads, kk, [&](const auto& kern) {
    std::vector<ad::detail::Bilinear> taps(kk);
    std::vector<T> logits(kk);
    for (std::size_t i = 0; i < n; ++i) {
      if (!grid->is_valid(static_cast<int>(i), v)) continue;
      ++counter.query_views;
      counter.macs += 2ull * kk * c;
      detail::grid_taps(*grid, static_cast<int>(i), v, taps);
      kern.forward(q.data() + i * c, keys.data(), values.data(), taps.data(), alpha->data() + i * heads * kk,
                   out.data() + i * c, logits.data());
    }
  });
  return {out, alpha};
}

template <typename T>
struct EpiAttention {
  std::vector<ad::Tensor<T>> per_view;
  std::vector<std::shared_ptr<const std::vector<T>>> weights;
  std::vector<std::vector<std::uint8_t>> validity;  // [view][query]
};

inline std::vector<std::uint8_t> view_validity(const EpiSampleGrid& g, int v) {
  std::vector<std::uint8_t> m(g.n_queries());
  for (int q = 0; q < g.n_queries(); ++q) m[q] = g.valid[g.pair(q, v)];
  return m;
}

/// Epipolar attention of q against every auxiliary view of the grid.
template <typename T>
EpiAttention<T> epi_attend(const ad::Tensor<T>& q, const std::vector<ad::Tensor<T>>& keys,
                           const std::vector<ad::Tensor<T>>& values, std::shared_ptr<const EpiSampleGrid> grid,
                           int n_heads = 1) {
  if (keys.size() != values.size() || static_cast<int>(keys.size()) != grid->n_views)
    fail(Errc::ShapeMismatch, "epi_attend: key/value lists must match the grid's views");
  EpiAttention<T> res;
  for (int v = 0; v < grid->n_views; ++v) {
    auto r = epi_attend_view(q, keys[v], values[v], grid, v, n_heads);
    res.per_view.push_back(r.out);
    res.weights.push_back(r.weights);
    res.validity.push_back(view_validity(*grid, v));
  }
  return res;
}

// ---------------------------------------------------------------------------
// full cross attention (ablation)

/// Dense attention of q [N, C] over all H*W positions of one auxiliary view.
template <typename T>
ad::Tensor<T> full_cross_attend_view(const ad::Tensor<T>& q, const ad::Tensor<T>& keys, const ad::Tensor<T>& values,
                                     int n_heads = 1, std::size_t cap = 64 * 64) {
  if (q.ndim() != 2 || keys.ndim() != 2 || values.ndim() != 2 || keys.shape() != values.shape() ||
      keys.dim(1) != q.dim(1))
    fail(Errc::ShapeMismatch, "full_cross_attend: expected q [N, C] and keys/values [M, C]");
  const std::size_t n = q.dim(0), m = keys.dim(0), c = q.dim(1);
  if (m > cap)
    fail(Errc::BudgetExceeded, "full cross attention over " + std::to_string(m) + " positions exceeds cap " +
                                   std::to_string(cap));
  if (n_heads < 1 || c % n_heads != 0) fail(Errc::ShapeMismatch, "channels not divisible by heads");
  const std::size_t heads = n_heads, d = c / heads;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  using Mat = ad::RowMat<T>;
  using Stride = Eigen::OuterStride<>;
  using CMap = Eigen::Map<const Mat, 0, Stride>;
  using Map = Eigen::Map<Mat, 0, Stride>;

  // Queries go through in row blocks so the score tile stays cache-resident;
  // the full N x M probabilities are kept only when backward will need them.
  const bool keep = ad::GradMode::enabled() && (q.requires_grad() || keys.requires_grad() || values.requires_grad());
  constexpr std::size_t kBlock = 64;
  auto probs = std::make_shared<std::vector<Mat>>(keep ? heads : 0);
  ad::Tensor<T> out = ad::Tensor<T>::zeros({n, c});
  Mat a;
  for (std::size_t h = 0; h < heads; ++h) {
    CMap qh(q.data() + h * d, n, d, Stride(c));
    CMap kh(keys.data() + h * d, m, d, Stride(c));
    CMap vh(values.data() + h * d, m, d, Stride(c));
    Map oh(out.data() + h * d, n, d, Stride(c));
    if (keep) (*probs)[h].resize(n, m);
    for (std::size_t r0 = 0; r0 < n; r0 += kBlock) {
      const Eigen::Index rows = static_cast<Eigen::Index>(std::min(kBlock, n - r0));
      a.noalias() = (qh.middleRows(r0, rows) * kh.transpose()) * scale;
      for (Eigen::Index i = 0; i < rows; ++i) {
        const T mx = a.row(i).maxCoeff();
        a.row(i) = (a.row(i).array() - mx).exp();
        a.row(i) /= a.row(i).sum();
      }
      oh.middleRows(r0, rows).noalias() = a * vh;
      if (keep) (*probs)[h].middleRows(r0, rows) = a;
    }
  }
  auto& counter = MacCounter::current();
  counter.macs += 2ull * n * m * c;
  counter.query_views += n;

  auto pq = q.impl(), pk = keys.impl(), pv = values.impl();
  ad::Tensor<T> res = ad::make_output<T>({n, c}, "full_cross_attend", {q, keys, values}, [=](ad::TensorImpl<T>& o) {
    T* gq = ad::grad_of(pq);
    T* gk = ad::grad_of(pk);
    T* gv = ad::grad_of(pv);
    for (std::size_t h = 0; h < heads; ++h) {
      const Mat& a = (*probs)[h];
      CMap g(o.grad.data() + h * d, n, d, Stride(c));
      CMap qh(pq->data.data() + h * d, n, d, Stride(c));
      CMap kh(pk->data.data() + h * d, m, d, Stride(c));
      CMap vh(pv->data.data() + h * d, m, d, Stride(c));
      if (gv) Map(gv + h * d, m, d, Stride(c)).noalias() += a.transpose() * g;
      Mat da = g * vh.transpose();
      const Eigen::Matrix<T, Eigen::Dynamic, 1> dot = (da.array() * a.array()).rowwise().sum();
      Mat dl = (a.array() * (da.colwise() - dot).array()) * scale;
      if (gq) Map(gq + h * d, n, d, Stride(c)).noalias() += dl * kh;
      if (gk) Map(gk + h * d, m, d, Stride(c)).noalias() += dl.transpose() * qh;
    }
  });
  std::copy(out.values().begin(), out.values().end(), res.values().begin());
  return res;
}

// ---------------------------------------------------------------------------
// cross-view aggregation

/// Per-query attention over a small token set. Token 0 is always present;
/// token t > 0 is present where masks[t - 1][i] != 0. Queries with no
/// present token besides token 0 produce zeros.
template <typename T>
ad::Tensor<T> token_attention(const ad::Tensor<T>& query, const std::vector<ad::Tensor<T>>& keys,
                              const std::vector<ad::Tensor<T>>& values,
                              const std::vector<std::vector<std::uint8_t>>& masks) {
  if (query.ndim() != 2) fail(Errc::ShapeMismatch, "token_attention: query must be [N, C]");
  const std::size_t n = query.dim(0), c = query.dim(1), nt = keys.size();
  if (nt == 0 || values.size() != nt || masks.size() + 1 != nt)
    fail(Errc::ShapeMismatch, "token_attention: inconsistent token lists");
  for (std::size_t t = 0; t < nt; ++t) {
    detail::require_tokens(keys[t], n, c, "token_attention keys");
    detail::require_tokens(values[t], n, c, "token_attention values");
    if (t > 0 && masks[t - 1].size() != n) fail(Errc::ShapeMismatch, "token_attention: mask length");
  }
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(c)));
  auto mk = std::make_shared<const std::vector<std::vector<std::uint8_t>>>(masks);
  auto present = [mk](std::size_t t, std::size_t i) { return t == 0 || (*mk)[t - 1][i] != 0; };
  std::vector<std::uint8_t> active(n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t t = 1; t < nt; ++t) active[i] |= masks[t - 1][i];

  auto alpha = std::make_shared<std::vector<T>>(n * nt, T(0));
  std::vector<ad::Tensor<T>> inputs{query};
  inputs.insert(inputs.end(), keys.begin(), keys.end());
  inputs.insert(inputs.end(), values.begin(), values.end());
  std::vector<ad::ImplPtr<T>> pk, pv;
  for (std::size_t t = 0; t < nt; ++t) {
    pk.push_back(keys[t].impl());
    pv.push_back(values[t].impl());
  }
  auto pq = query.impl();
  ad::Tensor<T> out = ad::make_output<T>({n, c}, "token_attention", inputs, [=](ad::TensorImpl<T>& o) {
    T* gq = ad::grad_of(pq);
    std::vector<T*> gk(nt), gv(nt);
    for (std::size_t t = 0; t < nt; ++t) {
      gk[t] = ad::grad_of(pk[t]);
      gv[t] = ad::grad_of(pv[t]);
    }
    std::vector<T> da(nt);
    for (std::size_t i = 0; i < n; ++i) {
      if (!active[i]) continue;
      const T* gi = o.grad.data() + i * c;
      const T* a = alpha->data() + i * nt;
      T dot = 0;
      for (std::size_t t = 0; t < nt; ++t) {
        da[t] = 0;
        if (!present(t, i)) continue;
        const T* vr = pv[t]->data.data() + i * c;
        for (std::size_t ch = 0; ch < c; ++ch) da[t] += gi[ch] * vr[ch];
        dot += a[t] * da[t];
        if (gv[t])
          for (std::size_t ch = 0; ch < c; ++ch) gv[t][i * c + ch] += a[t] * gi[ch];
      }
      for (std::size_t t = 0; t < nt; ++t) {
        if (!present(t, i)) continue;
        const T dl = a[t] * (da[t] - dot) * scale;
        const T* kr = pk[t]->data.data() + i * c;
        const T* qr = pq->data.data() + i * c;
        if (gq)
          for (std::size_t ch = 0; ch < c; ++ch) gq[i * c + ch] += dl * kr[ch];
        if (gk[t])
          for (std::size_t ch = 0; ch < c; ++ch) gk[t][i * c + ch] += dl * qr[ch];
      }
    }
  });

  std::vector<T> logits(nt);
  for (std::size_t i = 0; i < n; ++i) {
    if (!active[i]) continue;
    const T* qi = query.data() + i * c;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t t = 0; t < nt; ++t) {
      if (!present(t, i)) continue;
      const T* kr = keys[t].data() + i * c;
      T dot = 0;
      for (std::size_t ch = 0; ch < c; ++ch) dot += qi[ch] * kr[ch];
      logits[t] = dot * scale;
      mx = std::max(mx, logits[t]);
    }
    double z = 0;
    for (std::size_t t = 0; t < nt; ++t)
      if (present(t, i)) z += std::exp(static_cast<double>(logits[t] - mx));
    T* a = alpha->data() + i * nt;
    T* oi = out.data() + i * c;
    for (std::size_t t = 0; t < nt; ++t) {
      if (!present(t, i)) continue;
      a[t] = static_cast<T>(std::exp(static_cast<double>(logits[t] - mx)) / z);
      const T* vr = values[t].data() + i * c;
      for (std::size_t ch = 0; ch < c; ++ch) oi[ch] += a[t] * vr[ch];
    }
  }
  return out;
}

template <typename T>
struct AggregationParams {
  ad::Tensor<T> wq, wk, wv;  // [C, C]
};

/// Per-pixel self-attention over {q_i} and the valid per-view features,
/// read out at the q_i token.
template <typename T>
ad::Tensor<T> aggregate_views(const ad::Tensor<T>& q, const std::vector<ad::Tensor<T>>& per_view,
                              const std::vector<std::vector<std::uint8_t>>& validity, const AggregationParams<T>& p) {
  if (per_view.empty()) fail(Errc::ShapeMismatch, "aggregate_views needs at least one view");
  if (validity.size() != per_view.size()) fail(Errc::ShapeMismatch, "aggregate_views: validity/view count");
  for (const auto& f : per_view)
    if (f.shape() != q.shape()) fail(Errc::ShapeMismatch, "aggregate_views: view feature shape");
  std::vector<ad::Tensor<T>> keys{ad::matmul(q, p.wk)}, values{ad::matmul(q, p.wv)};
  for (const auto& f : per_view) {
    keys.push_back(ad::matmul(f, p.wk));
    values.push_back(ad::matmul(f, p.wv));
  }
  return token_attention(ad::matmul(q, p.wq), keys, values, validity);
}

// ---------------------------------------------------------------------------
// heat map

/// Attention weights of one query in one view painted at their sample
/// locations (nearest pixel, max over collisions), scaled so the peak is 255.
template <typename T>
Image attention_heatmap(const EpiSampleGrid& g, const std::vector<T>& weights, int query, int view, int n_heads = 1) {
  Image img(1, g.feat_h, g.feat_w, 0.0f);
  if (!g.is_valid(query, view)) return img;
  const double* xy = g.at(query, view);
  const T* a = weights.data() + static_cast<std::size_t>(query) * n_heads * g.k;
  double peak = 0;
  std::vector<double> w(g.k, 0.0);
  for (int s = 0; s < g.k; ++s) {
    for (int h = 0; h < n_heads; ++h) w[s] += a[h * g.k + s];
    w[s] /= n_heads;
    peak = std::max(peak, w[s]);
  }
  if (peak <= 0) return img;
  for (int s = 0; s < g.k; ++s) {
    const int x = std::clamp(static_cast<int>(std::lround(xy[2 * s])), 0, g.feat_w - 1);
    const int y = std::clamp(static_cast<int>(std::lround(xy[2 * s + 1])), 0, g.feat_h - 1);
    float& px = img.at(0, y, x);
    px = std::max(px, static_cast<float>(w[s] / peak));
  }
  return img;
}

/// Index of the largest head-averaged weight of one query in one view.
template <typename T>
int attention_argmax(const EpiSampleGrid& g, const std::vector<T>& weights, int query, int n_heads = 1) {
  const T* a = weights.data() + static_cast<std::size_t>(query) * n_heads * g.k;
  int best = 0;
  double best_w = -1;
  for (int s = 0; s < g.k; ++s) {
    double w = 0;
    for (int h = 0; h < n_heads; ++h) w += a[h * g.k + s];
    if (w > best_w) {
      best_w = w;
      best = s;
    }
  }
  return best;
}

}  // namespace mvgsr::epi
