#pragma once

// Toy-scale multi-view super-resolution network. Three residual epipolar
// transformer blocks extract target features at strides 1/2/4 while
// attending to auxiliary views; a trainable conv pyramid stands in for the
// single-image prior; a coarse-to-fine decoder predicts a residual on top of
// the bicubic upsample of the low-resolution target.

#include <nlohmann/json.hpp>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "mvgsr/autodiff/mvtf.hpp"
#include "mvgsr/autodiff/ops.hpp"
#include "mvgsr/autodiff/optim.hpp"
#include "mvgsr/epiattn.hpp"
#include "mvgsr/resample.hpp"
#include "mvgsr/synthscene.hpp"
#include "mvgsr/view_select.hpp"

namespace mvgsr::sr {

struct NetworkConfig {
  int base_channels = 32;
  int in_channels = 1;
  int n_ref = 4;
  int upscale = 2;
  double lambda_per = 0.0;
  std::uint64_t seed = 0;
  bool use_est = true;  // false: single-image pipeline without the attention branch
  epi::AttentionConfig attn;

  std::array<int, 3> block_channels() const { return {base_channels, 2 * base_channels, 4 * base_channels}; }

  void validate() const {
    if (upscale != 2 && upscale != 4) fail(Errc::InvalidArgument, "upscale must be 2 or 4");
    if (base_channels < 1 || in_channels < 1 || n_ref < 1) fail(Errc::InvalidArgument, "channel counts must be positive");
    if (!(lambda_per >= 0.0)) fail(Errc::InvalidArgument, "lambda_per must be >= 0");
    epi::AttentionConfig a = attn;
    a.channels = block_channels();
    a.validate();
  }
};

inline nlohmann::json config_to_json(const NetworkConfig& c) {
  return {{"base_channels", c.base_channels},
          {"in_channels", c.in_channels},
          {"n_ref", c.n_ref},
          {"upscale", c.upscale},
          {"lambda_per", c.lambda_per},
          {"seed", c.seed},
          {"use_est", c.use_est},
          {"k_epi", c.attn.k_epi},
          {"n_heads", c.attn.n_heads},
          {"variant", epi::variant_name(c.attn.variant)},
          {"full_cross_cap", c.attn.full_cross_cap}};
}

inline NetworkConfig config_from_json(const nlohmann::json& j) {
  NetworkConfig c;
  try {
    c.base_channels = j.at("base_channels").get<int>();
    c.in_channels = j.at("in_channels").get<int>();
    c.n_ref = j.at("n_ref").get<int>();
    c.upscale = j.at("upscale").get<int>();
    c.lambda_per = j.at("lambda_per").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.use_est = j.at("use_est").get<bool>();
    c.attn.k_epi = j.at("k_epi").get<std::array<int, 3>>();
    c.attn.n_heads = j.at("n_heads").get<int>();
    c.attn.variant = epi::parse_variant(j.at("variant").get<std::string>());
    c.attn.full_cross_cap = j.at("full_cross_cap").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::MalformedFile, std::string("network config: ") + e.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// network

template <typename T>
struct NetInputs {
  ad::Tensor<T> target;                                        // [Cin, H, W] low resolution
  std::vector<ad::Tensor<T>> aux;                              // n_ref x [Cin, H, W]
  std::array<std::shared_ptr<const epi::EpiSampleGrid>, 3> grids;  // per block; unused without EST
};

/// Attention weights recorded during a forward pass, per block and view.
template <typename T>
struct AttentionTrace {
  std::array<std::vector<std::shared_ptr<const std::vector<T>>>, 3> weights;
};

template <typename T>
struct BlockOut {
  ad::Tensor<T> x;                 // refined target features
  std::vector<ad::Tensor<T>> aux;  // shallow auxiliary features for the next block
};

template <typename T>
class SrNet {
 public:
  using Tensor = ad::Tensor<T>;

  explicit SrNet(const NetworkConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(cfg_.seed);
    const auto ch = cfg_.block_channels();
    const std::size_t cin = cfg_.in_channels;
    auto conv = [&](const std::string& name, std::size_t out, std::size_t in, std::size_t k) {
      params_.add_kaiming(name + ".w", {out, in, k, k}, in * k * k, rng);
      params_.add_constant(name + ".b", {out}, T(0));
    };
    enum class Init { Kaiming, Identity, Zero };
    auto square = [&](const std::string& name, std::size_t c, Init init) {
      Tensor w = params_.add_kaiming(name, {c, c}, c, rng);
      if (init == Init::Kaiming) return;
      std::fill(w.values().begin(), w.values().end(), T(0));
      if (init == Init::Identity)
        for (std::size_t i = 0; i < c; ++i) w.data()[i * c + i] = T(1);
    };
    for (int j = 0; j < 3; ++j) {
      const std::string b = "b" + std::to_string(j);
      const std::size_t c = ch[j], in = j == 0 ? cin : ch[j - 1];
      conv(b + ".f", c, in, 3);
      if (cfg_.use_est) {
        params_.add_constant(b + ".ln.g", {c}, T(1));
        params_.add_constant(b + ".ln.b", {c}, T(0));
        // Query and key maps start as the identity so the initial attention
        // scores are normalized feature correlations.
        square(b + ".wq", c, Init::Identity);
        square(b + ".wk", c, Init::Identity);
        square(b + ".wv", c, Init::Kaiming);
        square(b + ".agg.wq", c, Init::Kaiming);
        square(b + ".agg.wk", c, Init::Kaiming);
        // The fused output starts at zero, so an untrained block behaves
        // like its single-image counterpart.
        square(b + ".agg.wv", c, Init::Zero);
      }
      conv(b + ".res1", c, c, 3);
      conv(b + ".res2", c, c, 3);
    }
    conv("sip.c0a", ch[0], cin, 3);
    conv("sip.c0b", ch[0], ch[0], 3);
    conv("sip.c1", ch[1], ch[0], 3);
    conv("sip.c2", ch[2], ch[1], 3);
    conv("msff.s2", ch[2], 2 * ch[2], 3);
    conv("msff.s1", 4 * ch[0], 2 * ch[1] + ch[2] / 4, 3);
    conv("msff.s0", ch[0], 2 * ch[0] + ch[0], 3);
    // The head starts at zero: the untrained network returns the bicubic upsample.
    const std::size_t r = cfg_.upscale;
    params_.add_constant("msff.head.w", {cin * r * r, static_cast<std::size_t>(ch[0]), 3, 3}, T(0));
    params_.add_constant("msff.head.b", {cin * r * r}, T(0));
  }

  const NetworkConfig& config() const { return cfg_; }
  ad::ParameterStore<T>& params() { return params_; }
  const ad::ParameterStore<T>& params() const { return params_; }
  Tensor p(const std::string& name) const { return params_.get(name); }

  Tensor conv(const std::string& name, const Tensor& x) const { return ad::conv2d(x, p(name + ".w"), p(name + ".b"), 1, 1); }

  /// Shallow per-block convolution f^j (with the stride-2 pooling of blocks 2, 3).
  Tensor shallow(int j, const Tensor& x) const {
    return ad::relu(conv("b" + std::to_string(j) + ".f", j == 0 ? x : ad::avgpool2(x)));
  }

  /// Two-conv residual refinement Res^j.
  Tensor residual(int j, const Tensor& x) const {
    const std::string b = "b" + std::to_string(j);
    return ad::add(x, conv(b + ".res2", ad::relu(conv(b + ".res1", x))));
  }

  /// Epipolar spatial transformer: attention of target features fx to each
  /// auxiliary feature map, fused across views. Returns [C, H, W].
  Tensor est(int j, const Tensor& fx, const std::vector<Tensor>& aux_f, const std::shared_ptr<const epi::EpiSampleGrid>& grid,
             AttentionTrace<T>* trace = nullptr) const {
    const std::string b = "b" + std::to_string(j);
    const std::size_t h = fx.dim(1), w = fx.dim(2);
    const Tensor g = p(b + ".ln.g"), be = p(b + ".ln.b");
    const Tensor tq = ad::layernorm(ad::to_tokens(fx), g, be);
    const Tensor q = ad::matmul(tq, p(b + ".wq"));
    std::vector<Tensor> per_view;
    std::vector<std::vector<std::uint8_t>> validity;
    for (std::size_t v = 0; v < aux_f.size(); ++v) {
      if (aux_f[v].shape() != fx.shape()) fail(Errc::ShapeMismatch, "auxiliary feature shape differs from target");
      const Tensor ta = ad::layernorm(ad::to_tokens(aux_f[v]), g, be);
      const Tensor k = ad::matmul(ta, p(b + ".wk")), val = ad::matmul(ta, p(b + ".wv"));
      if (cfg_.attn.variant == epi::Variant::Epipolar) {
        if (!grid || grid->feat_w != static_cast<int>(w) || grid->feat_h != static_cast<int>(h) ||
            grid->n_views != static_cast<int>(aux_f.size()))
          fail(Errc::ShapeMismatch, "sample grid does not match block " + std::to_string(j));
        auto r = epi::epi_attend_view(q, k, val, grid, static_cast<int>(v), cfg_.attn.n_heads);
        per_view.push_back(r.out);
        validity.push_back(epi::view_validity(*grid, static_cast<int>(v)));
        if (trace) trace->weights[j].push_back(r.weights);
      } else {
        per_view.push_back(epi::full_cross_attend_view(q, k, val, cfg_.attn.n_heads, cfg_.attn.full_cross_cap));
        validity.emplace_back(h * w, 1);
      }
    }
    const epi::AggregationParams<T> agg{p(b + ".agg.wq"), p(b + ".agg.wk"), p(b + ".agg.wv")};
    return ad::from_tokens(epi::aggregate_views(tq, per_view, validity, agg), h, w);
  }

  /// One residual epipolar transformer block.
  BlockOut<T> ret_block(int j, const Tensor& x, const std::vector<Tensor>& aux,
                        const std::shared_ptr<const epi::EpiSampleGrid>& grid, AttentionTrace<T>* trace = nullptr) const {
    BlockOut<T> out;
    const Tensor fx = shallow(j, x);
    if (!cfg_.use_est) {
      out.x = residual(j, fx);
      return out;
    }
    if (aux.size() != static_cast<std::size_t>(cfg_.n_ref))
      fail(Errc::ShapeMismatch, "expected " + std::to_string(cfg_.n_ref) + " auxiliary inputs");
    for (const auto& a : aux) out.aux.push_back(shallow(j, a));
    out.x = residual(j, ad::add(fx, est(j, fx, out.aux, grid, trace)));
    return out;
  }

  /// Trainable single-image prior: features at strides 1, 2, 4.
  std::array<Tensor, 3> sip_features(const Tensor& img) const {
    std::array<Tensor, 3> s;
    s[0] = ad::relu(conv("sip.c0b", ad::relu(conv("sip.c0a", img))));
    s[1] = ad::relu(conv("sip.c1", ad::avgpool2(s[0])));
    s[2] = ad::relu(conv("sip.c2", ad::avgpool2(s[1])));
    return s;
  }

  /// Coarse-to-fine fusion; returns the SR image (unclamped).
  Tensor msff_decode(const std::array<Tensor, 3>& mvfe, const std::array<Tensor, 3>& sip, const Tensor& lr) const {
    for (int j = 0; j < 3; ++j)
      if (mvfe[j].ndim() != 3 || sip[j].ndim() != 3 || mvfe[j].dim(1) != sip[j].dim(1) || mvfe[j].dim(2) != sip[j].dim(2))
        fail(Errc::ShapeMismatch, "feature pyramids are not aligned at scale " + std::to_string(j));
    Tensor d = ad::relu(conv("msff.s2", ad::concat<T>({mvfe[2], sip[2]}, 0)));
    d = ad::relu(conv("msff.s1", ad::concat<T>({mvfe[1], sip[1], ad::pixel_rearrange_up(d, 2)}, 0)));
    d = ad::relu(conv("msff.s0", ad::concat<T>({mvfe[0], sip[0], ad::pixel_rearrange_up(d, 2)}, 0)));
    const Tensor res = ad::pixel_rearrange_up(conv("msff.head", d), cfg_.upscale);
    return ad::add(res, resample::upsample_bicubic(lr, cfg_.upscale));
  }

  Tensor forward(const NetInputs<T>& in, AttentionTrace<T>* trace = nullptr) const {
    const auto& x = in.target;
    if (x.ndim() != 3 || static_cast<int>(x.dim(0)) != cfg_.in_channels || x.dim(1) % 4 != 0 || x.dim(2) % 4 != 0)
      fail(Errc::ShapeMismatch, "target must be [" + std::to_string(cfg_.in_channels) + ", H, W] with H, W divisible by 4");
    for (const auto& a : in.aux)
      if (a.shape() != x.shape()) fail(Errc::ShapeMismatch, "auxiliary image shape differs from target");
    std::array<Tensor, 3> mvfe;
    Tensor cur = x;
    std::vector<Tensor> aux = in.aux;
    for (int j = 0; j < 3; ++j) {
      auto b = ret_block(j, cur, aux, in.grids[j], trace);
      mvfe[j] = b.x;
      cur = b.x;
      aux = std::move(b.aux);
    }
    return msff_decode(mvfe, sip_features(x), x);
  }

 private:
  NetworkConfig cfg_;
  ad::ParameterStore<T> params_;
};

// ---------------------------------------------------------------------------
// loss and metrics

/// Mean absolute error plus lambda_per times an L1 image-gradient proxy.
template <typename T>
ad::Tensor<T> loss_sr(const ad::Tensor<T>& pred, const ad::Tensor<T>& gt, double lambda_per) {
  if (pred.shape() != gt.shape())
    fail(Errc::ShapeMismatch, "loss_sr " + ad::shape_str(pred.shape()) + " vs " + ad::shape_str(gt.shape()));
  ad::Tensor<T> rec = ad::l1_loss(pred, gt);
  if (lambda_per == 0.0) return rec;
  ad::Tensor<T> per = ad::add(ad::l1_loss(ad::diff_x(pred), ad::diff_x(gt)), ad::l1_loss(ad::diff_y(pred), ad::diff_y(gt)));
  return ad::add(rec, ad::scale(per, static_cast<T>(lambda_per)));
}

inline void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (a.channels != b.channels || a.height != b.height || a.width != b.width)
    fail(Errc::ShapeMismatch, std::string(what) + ": image shapes differ");
}

/// 10 log10(1 / MSE); +inf when MSE < 1e-12.
inline double psnr(const Image& a, const Image& b) {
  require_same_shape(a, b, "psnr");
  double se = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.data.size());
  if (mse < 1e-12) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

/// SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03,
/// dynamic range 1, symmetric borders, averaged over pixels and channels.
inline double ssim(const Image& a, const Image& b) {
  require_same_shape(a, b, "ssim");
  constexpr int r = 5;
  std::array<double, 2 * r + 1> g{};
  double gs = 0;
  for (int i = -r; i <= r; ++i) gs += g[i + r] = std::exp(-(i * i) / (2.0 * 1.5 * 1.5));
  for (double& v : g) v /= gs;
  const int h = a.height, w = a.width;
  auto blur = [&](const std::vector<double>& src) {
    std::vector<double> tmp(src.size()), out(src.size());
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += g[i + r] * src[y * w + resample::reflect_index(x + i, w)];
        tmp[y * w + x] = acc;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0;
        for (int i = -r; i <= r; ++i) acc += g[i + r] * tmp[resample::reflect_index(y + i, h) * w + x];
        out[y * w + x] = acc;
      }
    return out;
  };
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0;
  const std::size_t n = static_cast<std::size_t>(h) * w;
  for (int c = 0; c < a.channels; ++c) {
    std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = a.data[c * n + i];
      y[i] = b.data[c * n + i];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = blur(x), my = blur(y), sxx = blur(xx), syy = blur(yy), sxy = blur(xy);
    for (std::size_t i = 0; i < n; ++i) {
      const double vx = sxx[i] - mx[i] * mx[i], vy = syy[i] - my[i] * my[i], cxy = sxy[i] - mx[i] * my[i];
      total += ((2 * mx[i] * my[i] + c1) * (2 * cxy + c2)) / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
    }
  }
  return total / (static_cast<double>(n) * a.channels);
}

// ---------------------------------------------------------------------------
// dataset view of a synthetic scene

/// Low-resolution inputs, auxiliary selections, and cached sample grids for
/// every view of a scene.
template <typename T>
class SrDataset {
 public:
  SrDataset(const synth::SynthScene& scene, const NetworkConfig& net, const select::SelectionConfig& sel = {})
      : scene_(&scene), rig_(scene.lr_rig()), net_(net) {
    select::SelectionConfig s = sel;
    s.n_ref = net.n_ref;
    for (const auto& e : rig_.cameras) {
      aux_[e.view_id] = select::select_auxiliary(rig_, e.view_id, s).auxiliaries;
      const int i = scene.index_of(e.view_id);
      lr_[e.view_id] = resample::to_tensor<T>(scene.lr_images[i]);
      hr_[e.view_id] = resample::to_tensor<T>(scene.hr_images[i]);
    }
  }

  const PoseManifest& rig() const { return rig_; }
  const std::vector<int>& aux_of(int target) const { return aux_.at(target); }
  const ad::Tensor<T>& lr(int view) const { return lr_.at(view); }
  const ad::Tensor<T>& hr(int view) const { return hr_.at(view); }
  std::vector<int> view_ids() const { return rig_.view_ids(); }

  /// Grid of block j for `target` against `aux`.
  std::shared_ptr<const epi::EpiSampleGrid> grid(int target, const std::vector<int>& aux, int j) {
    const int stride = 1 << j;
    const auto& k = rig_.at(target).intrinsics;
    return grids_.get(rig_, target, aux, k.width / stride, k.height / stride, stride, net_.attn.k_epi[j]);
  }

  /// Network inputs for `target` with its selected auxiliary views, or
  /// with an explicit auxiliary list.
  NetInputs<T> inputs(int target) { return inputs(target, aux_of(target)); }
  NetInputs<T> inputs(int target, const std::vector<int>& aux) {
    NetInputs<T> in;
    in.target = lr(target);
    if (!net_.use_est) return in;
    for (int a : aux) in.aux.push_back(lr(a));
    if (net_.attn.variant == epi::Variant::Epipolar)
      for (int j = 0; j < 3; ++j) in.grids[j] = grid(target, aux, j);
    return in;
  }

 private:
  const synth::SynthScene* scene_;
  PoseManifest rig_;
  NetworkConfig net_;
  std::map<int, std::vector<int>> aux_;
  std::map<int, ad::Tensor<T>> lr_, hr_;
  epi::GridCache grids_;
};

/// Clamped network output as an image.
template <typename T>
Image super_resolve(const SrNet<T>& net, const NetInputs<T>& in, AttentionTrace<T>* trace = nullptr) {
  ad::NoGradGuard guard;
  return resample::to_image(net.forward(in, trace)).clamped();
}

struct LocalizationResult {
  int probed = 0;
  int hits = 0;
  double rate() const { return probed ? static_cast<double>(hits) / probed : 0.0; }
};

/// Probes block-1 attention: for random (target, pixel, auxiliary view)
/// triples whose pixel has a ground-truth correspondence on the textured
/// patch, checks whether the attention argmax lies within one sample
/// spacing of that correspondence.
template <typename T>
LocalizationResult probe_localization(const SrNet<T>& net, SrDataset<T>& data, const synth::SynthScene& scene,
                                      int n_probes, std::uint64_t seed, const std::vector<int>& targets = {}) {
  if (!net.config().use_est || net.config().attn.variant != epi::Variant::Epipolar)
    fail(Errc::InvalidArgument, "localization probing needs the epipolar attention branch");
  const PoseManifest& rig = data.rig();
  const std::vector<int> views = targets.empty() ? data.view_ids() : targets;
  std::mt19937_64 rng(seed);
  std::map<int, AttentionTrace<T>> traces;
  LocalizationResult res;
  const int w = rig.cameras.front().intrinsics.width, h = rig.cameras.front().intrinsics.height;
  for (long attempt = 0; res.probed < n_probes && attempt < 1000L * n_probes; ++attempt) {
    const int target = views[select::detail::bounded(rng, views.size())];
    const int x = static_cast<int>(select::detail::bounded(rng, w)), y = static_cast<int>(select::detail::bounded(rng, h));
    const int v = static_cast<int>(select::detail::bounded(rng, net.config().n_ref));
    const int aux = data.aux_of(target)[v];
    const Eigen::Vector2d px(x, y);
    if (!synth::sees_patch(scene, rig, target, px)) continue;
    const auto gt = synth::gt_correspondence(scene, target, px, aux, rig);
    if (!gt || !synth::sees_patch(scene, rig, aux, *gt)) continue;
    const auto grid = data.grid(target, data.aux_of(target), 0);
    const int q = y * w + x;
    if (!grid->is_valid(q, v)) continue;
    auto it = traces.find(target);
    if (it == traces.end()) {
      AttentionTrace<T> tr;
      super_resolve(net, data.inputs(target), &tr);
      it = traces.emplace(target, std::move(tr)).first;
    }
    const auto& weights = *it->second.weights[0][v];
    const int s = epi::attention_argmax(*grid, weights, q, net.config().attn.n_heads);
    const double* xy = grid->at(q, v) + 2 * s;
    ++res.probed;
    if (std::hypot(xy[0] - gt->x(), xy[1] - gt->y()) <= grid->spacing(q, v)) ++res.hits;
  }
  return res;
}

// ---------------------------------------------------------------------------
// checkpoints

inline constexpr int kCheckpointVersion = 1;

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(Errc::IoError, "cannot write " + path.string());
  f << text;
  if (!f) fail(Errc::IoError, "write failed for " + path.string());
}

/// Writes parameters (MVTF, f32) and a JSON manifest into `dir`. The
/// directory is built under a temporary name and renamed into place.
template <typename T>
void save_checkpoint(const SrNet<T>& net, const std::filesystem::path& dir, std::uint64_t iteration) {
  namespace fs = std::filesystem;
  const fs::path tmp = dir.string() + ".tmp";
  const fs::path old = dir.string() + ".old";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  nlohmann::json params = nlohmann::json::array();
  const auto& all = net.params().all();
  for (std::size_t i = 0; i < all.size(); ++i) {
    char file[32];
    std::snprintf(file, sizeof file, "p%03zu.mvtf", i);
    ad::write_mvtf(tmp / file, all[i].tensor);
    params.push_back({{"name", all[i].name}, {"file", file}, {"shape", all[i].tensor.shape()}});
  }
  const nlohmann::json manifest{{"format", "mvgsr-checkpoint"},
                                {"version", kCheckpointVersion},
                                {"iteration", iteration},
                                {"network", config_to_json(net.config())},
                                {"params", params}};
  write_text_file(tmp / "manifest.json", manifest.dump(2) + "\n");
  fs::remove_all(old);
  if (fs::exists(dir)) fs::rename(dir, old);
  fs::rename(tmp, dir);
  fs::remove_all(old);
}

template <typename T>
struct LoadedCheckpoint {
  SrNet<T> net;
  std::uint64_t iteration = 0;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) fail(Errc::IoError, "cannot open checkpoint manifest in " + dir.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::MalformedFile, std::string("checkpoint manifest: ") + e.what());
  }
  if (j.value("format", "") != "mvgsr-checkpoint") fail(Errc::MalformedFile, "not a checkpoint manifest");
  if (j.value("version", 0) != kCheckpointVersion)
    fail(Errc::SchemaVersionMismatch, "checkpoint version " + std::to_string(j.value("version", 0)));
  LoadedCheckpoint<T> out{SrNet<T>(config_from_json(j.at("network"))), j.value("iteration", std::uint64_t{0})};
  auto& all = out.net.params().all();
  const auto& entries = j.at("params");
  if (entries.size() != all.size()) fail(Errc::MalformedFile, "checkpoint parameter count differs from the network");
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (entries[i].at("name").get<std::string>() != all[i].name)
      fail(Errc::MalformedFile, "checkpoint parameter " + std::to_string(i) + " is not " + all[i].name);
    const auto blob = ad::read_mvtf(dir / entries[i].at("file").get<std::string>());
    if (blob.shape != all[i].tensor.shape())
      fail(Errc::ShapeMismatch, "checkpoint shape for " + all[i].name + " is " + ad::shape_str(blob.shape));
    for (std::size_t k = 0; k < blob.values.size(); ++k) all[i].tensor.data()[k] = static_cast<T>(blob.values[k]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// training

struct TrainConfig {
  int iters = 1000;
  int batch = 2;
  double lr_start = 1e-4;
  double lr_end = 1e-7;
  int checkpoint_every = 0;  // 0: only at the end
  std::uint64_t seed = 0;
  std::vector<int> holdout;  // views never used as training targets

  void validate() const {
    if (iters < 1 || batch < 1) fail(Errc::InvalidArgument, "iters and batch must be positive");
    if (!(lr_start >= lr_end && lr_end > 0.0)) fail(Errc::InvalidArgument, "need lr_start >= lr_end > 0");
    if (checkpoint_every < 0) fail(Errc::InvalidArgument, "checkpoint_every must be >= 0");
  }
};

struct TrainLog {
  std::vector<double> losses;  // per iteration, mean over the batch
  double final_psnr = 0;       // mean over held-out views
};

/// Mean PSNR of the clamped prediction against HR over `views`.
template <typename T>
double evaluate_psnr(const SrNet<T>& net, SrDataset<T>& data, const std::vector<int>& views) {
  double acc = 0;
  for (int v : views) acc += psnr(super_resolve(net, data.inputs(v)), resample::to_image(data.hr(v)));
  return views.empty() ? 0.0 : acc / static_cast<double>(views.size());
}

/// Trains `net` in place. Writes checkpoints to `ckpt` and appends rows
/// (iter, lr, loss, psnr) to `metrics_csv` when those paths are non-empty.
template <typename T>
TrainLog train(SrNet<T>& net, SrDataset<T>& data, const TrainConfig& cfg, const std::filesystem::path& ckpt = {},
               const std::filesystem::path& metrics_csv = {},
               const std::function<void(int, double)>& progress = nullptr) {
  cfg.validate();
  std::vector<int> targets;
  for (int v : data.view_ids())
    if (std::find(cfg.holdout.begin(), cfg.holdout.end(), v) == cfg.holdout.end()) targets.push_back(v);
  if (targets.empty()) fail(Errc::NotEnoughViews, "no training views left after the holdout");
  const std::vector<int> eval_views = cfg.holdout.empty() ? std::vector<int>{targets.front()} : cfg.holdout;

  std::FILE* csv = nullptr;
  if (!metrics_csv.empty()) {
    const bool fresh = !std::filesystem::exists(metrics_csv);
    csv = std::fopen(metrics_csv.c_str(), "a");
    if (!csv) fail(Errc::IoError, "cannot open " + metrics_csv.string());
    if (fresh) std::fputs("iter,lr,loss,psnr\n", csv);
  }
  struct CsvCloser {
    std::FILE* f;
    ~CsvCloser() {
      if (f) std::fclose(f);
    }
  } closer{csv};

  ad::Adam<T> opt(net.params());
  std::mt19937_64 rng(cfg.seed ^ 0x5EEDF00Dull);
  TrainLog log;
  double window = 0;
  int window_n = 0;
  for (int it = 0; it < cfg.iters; ++it) {
    const double lr = ad::cosine_lr(static_cast<std::size_t>(it), static_cast<std::size_t>(cfg.iters), cfg.lr_start,
                                    cfg.lr_end);
    net.params().zero_grad();
    double batch_loss = 0;
    for (int b = 0; b < cfg.batch; ++b) {
      const int target = targets[select::detail::bounded(rng, targets.size())];
      auto diverged = [&](const std::string& detail) {
        if (!ckpt.empty()) save_checkpoint(net, ckpt.string() + ".nonfinite", static_cast<std::uint64_t>(it));
        fail(Errc::NonFiniteLoss, "non-finite loss at iteration " + std::to_string(it) + " (target view " +
                                      std::to_string(target) + ")" + detail);
      };
      ad::Tensor<T> loss;
      try {
        loss = loss_sr(net.forward(data.inputs(target)), data.hr(target), net.config().lambda_per);
      } catch (const Error& e) {
        // Ops reject non-finite operands, so divergence usually surfaces here.
        if (e.code() != Errc::NonFiniteInput) throw;
        diverged(std::string(": ") + e.what());
      }
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) diverged("");
      batch_loss += value / cfg.batch;
      ad::backward(ad::scale(loss, static_cast<T>(1.0 / cfg.batch)));
    }
    opt.step(lr);
    log.losses.push_back(batch_loss);
    window += batch_loss;
    ++window_n;
    const bool last = it + 1 == cfg.iters;
    if (last || (cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0)) {
      const double p = evaluate_psnr(net, data, eval_views);
      if (csv) {
        std::fprintf(csv, "%d,%.9g,%.9g,%.6f\n", it + 1, lr, window / window_n, p);
        std::fflush(csv);
      }
      window = 0;
      window_n = 0;
      if (!ckpt.empty()) save_checkpoint(net, ckpt, static_cast<std::uint64_t>(it + 1));
      if (last) log.final_psnr = p;
    }
    if (progress) progress(it, batch_loss);
  }
  return log;
}

}  // namespace mvgsr::sr
