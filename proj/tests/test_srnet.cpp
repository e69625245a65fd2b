#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "mvgsr/autodiff/gradcheck.hpp"
#include "mvgsr/srnet.hpp"
#include "ad_test_util.hpp"
#include "srnet_test_util.hpp"

using namespace mvgsr;
using namespace mvgsr::sr;
using mvgsr::testing::micro_setup;
using mvgsr::testing::randomize_params;
using mvgsr::testing::TempDir;
using mvgsr::testing::uniform;
using TD = ad::Tensor<double>;

namespace {

template <typename Fn>
Errc error_code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::InvalidArgument;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

synth::SynthScene tiny_scene(std::uint64_t seed) {
  synth::SceneConfig c;
  c.cams = 8;
  c.hr_size = 32;
  c.seed = seed;
  return synth::generate(c);
}

NetworkConfig tiny_net(bool est) {
  NetworkConfig c;
  c.base_channels = 4;
  c.use_est = est;
  c.attn.k_epi = {8, 6, 4};
  c.seed = 11;
  return c;
}

}  // namespace

TEST(SrNet, UntrainedOutputIsBicubic) {
  for (bool est : {true, false}) {
    auto s = micro_setup<double>(1, 4, est);
    SrNet<double> net(s.cfg);
    auto out = net.forward(s.in);
    auto bic = resample::upsample_bicubic(s.in.target, 2);
    ASSERT_EQ(out.shape(), (ad::Shape{1, 16, 16}));
    for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out.data()[i], bic.data()[i]);
  }
}

TEST(SrNet, UpscaleFourShape) {
  auto s = micro_setup<float>(2, 2);
  s.cfg.upscale = 4;
  SrNet<float> net(s.cfg);
  EXPECT_EQ(net.forward(s.in).shape(), (ad::Shape{1, 32, 32}));
}

TEST(SrNet, InputErrors) {
  auto s = micro_setup<float>(3, 2);
  SrNet<float> net(s.cfg);
  auto bad = s.in;
  bad.aux.pop_back();
  EXPECT_EQ(error_code_of([&] { net.forward(bad); }), Errc::ShapeMismatch);
  bad = s.in;
  bad.target = ad::Tensor<float>::zeros({1, 6, 8});
  EXPECT_EQ(error_code_of([&] { net.forward(bad); }), Errc::ShapeMismatch);
  bad = s.in;
  bad.grids[1] = bad.grids[0];
  EXPECT_EQ(error_code_of([&] { net.forward(bad); }), Errc::ShapeMismatch);
  NetworkConfig c = s.cfg;
  c.upscale = 3;
  EXPECT_EQ(error_code_of([&] { SrNet<float>{c}; }), Errc::InvalidArgument);
  c = s.cfg;
  c.attn.n_heads = 3;
  EXPECT_EQ(error_code_of([&] { SrNet<float>{c}; }), Errc::InvalidArgument);
}

TEST(SrNet, AttentionWithoutValidSamplesReducesToSingleImage) {
  // Grids with no valid (query, view) pair make every EST output zero, so
  // the network must agree with the ablated one on the shared parameters.
  auto s = micro_setup<double>(4, 2);
  for (auto& g : s.in.grids) {
    auto copy = std::make_shared<epi::EpiSampleGrid>(*g);
    std::fill(copy->valid.begin(), copy->valid.end(), 0);
    g = copy;
  }
  SrNet<double> mv(s.cfg);
  randomize_params(mv, 5);
  NetworkConfig si_cfg = s.cfg;
  si_cfg.use_est = false;
  SrNet<double> si(si_cfg);
  for (auto& p : si.params().all()) {
    const auto src = mv.p(p.name);
    std::copy(src.values().begin(), src.values().end(), p.tensor.values().begin());
  }
  auto a = mv.forward(s.in);
  auto b = si.forward({s.in.target, {}, {}});
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
}

TEST(SrNet, AuxiliaryViewsChangeTheOutput) {
  auto s = micro_setup<double>(6, 2);
  SrNet<double> net(s.cfg);
  randomize_params(net, 7);
  auto a = net.forward(s.in);
  auto other = s.in;
  other.aux[1] = ad::Tensor<double>::zeros(other.aux[1].shape());
  auto b = net.forward(other);
  double diff = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) diff = std::max(diff, std::abs(a.data()[i] - b.data()[i]));
  EXPECT_GT(diff, 1e-6);
}

TEST(SrNet, BlockShapesAndZeroEstIdentity) {
  NetworkConfig c;
  c.base_channels = 3;
  SrNet<double> net(c);
  randomize_params(net, 30);
  std::mt19937_64 rng(31);
  auto x = mvgsr::testing::random_tensor({3, 32, 32}, rng, false, 0, 1);
  EXPECT_EQ(net.shallow(1, x).shape(), (ad::Shape{6, 16, 16}));
  EXPECT_EQ(net.residual(1, net.shallow(1, x)).shape(), (ad::Shape{6, 16, 16}));
  // With EST forced to zero the block is Res(f(x)).
  auto fx = net.shallow(0, mvgsr::testing::random_tensor({1, 32, 32}, rng, false, 0, 1));
  auto with_zero = net.residual(0, ad::add(fx, ad::Tensor<double>::zeros(fx.shape())));
  auto plain = net.residual(0, fx);
  EXPECT_EQ(with_zero.values(), plain.values());
}

TEST(SrNet, ForwardEqualsRecomposition) {
  auto s = micro_setup<double>(32, 2);
  SrNet<double> net(s.cfg);
  randomize_params(net, 33);
  // Independent replay of the block chain from the sub-operations.
  std::array<TD, 3> mvfe;
  TD cur = s.in.target;
  std::vector<TD> aux = s.in.aux;
  for (int j = 0; j < 3; ++j) {
    const TD fx = net.shallow(j, cur);
    std::vector<TD> af;
    for (const auto& a : aux) af.push_back(net.shallow(j, a));
    cur = net.residual(j, ad::add(fx, net.est(j, fx, af, s.in.grids[j])));
    mvfe[j] = cur;
    aux = af;
  }
  auto expect = net.msff_decode(mvfe, net.sip_features(s.in.target), s.in.target);
  EXPECT_EQ(net.forward(s.in).values(), expect.values());
}

TEST(SrNet, SingleImagePriorPyramid) {
  NetworkConfig c;
  c.base_channels = 4;
  SrNet<float> net(c);
  auto zero = ad::Tensor<float>::zeros({1, 16, 12});
  auto f = net.sip_features(zero);
  EXPECT_EQ(f[0].shape(), (ad::Shape{4, 16, 12}));
  EXPECT_EQ(f[1].shape(), (ad::Shape{8, 8, 6}));
  EXPECT_EQ(f[2].shape(), (ad::Shape{16, 4, 3}));
  for (const auto& t : f)
    for (float v : t.values()) EXPECT_TRUE(std::isfinite(v));
  std::mt19937_64 rng(34);
  auto img = ad::cast<float>(mvgsr::testing::random_tensor({1, 16, 12}, rng, false, 0, 1));
  auto a = net.sip_features(img), b = net.sip_features(img);
  for (int j = 0; j < 3; ++j) EXPECT_EQ(a[j].values(), b[j].values());
}

TEST(SrNet, AblatedNetworkIgnoresAuxiliaryInputs) {
  auto s = micro_setup<double>(35, 2, false);
  SrNet<double> net(s.cfg);
  randomize_params(net, 36);
  auto base = net.forward(s.in);
  std::mt19937_64 rng(37);
  auto with_aux = s.in;
  for (int i = 0; i < 4; ++i) with_aux.aux.push_back(mvgsr::testing::random_tensor({1, 8, 8}, rng, false, 0, 1));
  EXPECT_EQ(net.forward(with_aux).values(), base.values());
  with_aux.aux[2] = mvgsr::testing::random_tensor({1, 8, 8}, rng, false, 0, 1);
  EXPECT_EQ(net.forward(with_aux).values(), base.values());
}

TEST(SrNet, MicroNetworkGradientCheck) {
  for (bool est : {true, false}) {
    auto s = micro_setup<double>(8, 2, est);
    s.cfg.lambda_per = 0.5;
    SrNet<double> net(s.cfg);
    randomize_params(net, 9);
    std::vector<TD> params;
    for (auto& p : net.params().all()) params.push_back(p.tensor);
    // Parameters share storage with the network, so the checker's
    // perturbations flow straight into the forward pass.
    auto r = ad::grad_check([&](const std::vector<TD>&) { return loss_sr(net.forward(s.in), s.gt, s.cfg.lambda_per); },
                            params, 1e-5);
    EXPECT_LT(r.max_rel_error, 1e-4) << "est=" << est << " worst " << net.params().all()[r.worst_input].name << "["
                                     << r.worst_index << "] analytic " << r.worst_analytic << " numeric "
                                     << r.worst_numeric;
    EXPECT_GT(r.checked, r.excluded);
  }
}

TEST(SrNet, EveryParameterGetsGradient) {
  auto s = micro_setup<double>(10, 2);
  SrNet<double> net(s.cfg);
  randomize_params(net, 11);
  net.params().zero_grad();
  ad::backward(loss_sr(net.forward(s.in), s.gt, 0.0));
  for (const auto& p : net.params().all()) {
    ASSERT_TRUE(p.tensor.has_grad()) << p.name;
    double mag = 0;
    for (double g : p.tensor.grad()) mag += std::abs(g);
    EXPECT_GT(mag, 0.0) << p.name;
  }
}

TEST(SrNet, FullCrossVariantRuns) {
  auto s = micro_setup<double>(12, 2);
  s.cfg.attn.variant = epi::Variant::FullCross;
  SrNet<double> net(s.cfg);
  randomize_params(net, 13);
  s.in.grids = {};
  auto out = net.forward(s.in);
  for (double v : out.values()) EXPECT_TRUE(std::isfinite(v));
  s.cfg.attn.full_cross_cap = 16;  // block 0 has 64 positions
  SrNet<double> capped(s.cfg);
  EXPECT_EQ(error_code_of([&] { capped.forward(s.in); }), Errc::BudgetExceeded);
}

TEST(Loss, ReducesToMeanAbsoluteError) {
  std::mt19937_64 rng(14);
  auto a = mvgsr::testing::random_tensor({1, 5, 6}, rng, false), b = mvgsr::testing::random_tensor({1, 5, 6}, rng, false);
  double mae = 0;
  for (std::size_t i = 0; i < 30; ++i) mae += std::abs(a.data()[i] - b.data()[i]);
  EXPECT_EQ(loss_sr(a, b, 0.0).item(), ad::l1_loss(a, b).item());
  EXPECT_NEAR(loss_sr(a, b, 0.0).item(), mae / 30, 1e-15);
  // With lambda: add the mean absolute difference of finite differences.
  double dx = 0, dy = 0;
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x)
      dx += std::abs((a.data()[y * 6 + x + 1] - a.data()[y * 6 + x]) - (b.data()[y * 6 + x + 1] - b.data()[y * 6 + x]));
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 6; ++x)
      dy += std::abs((a.data()[(y + 1) * 6 + x] - a.data()[y * 6 + x]) - (b.data()[(y + 1) * 6 + x] - b.data()[y * 6 + x]));
  EXPECT_NEAR(loss_sr(a, b, 0.25).item(), mae / 30 + 0.25 * (dx / 25 + dy / 24), 1e-12);
  EXPECT_EQ(loss_sr(a, a, 0.3).item(), 0.0);
  std::vector<double> shifted(a.values().begin(), a.values().end());
  for (double& v : shifted) v += 0.1;
  EXPECT_NEAR(loss_sr(TD::from({1, 5, 6}, shifted), a, 0.0).item(), 0.1, 1e-15);
  EXPECT_EQ(error_code_of([&] { loss_sr(a, mvgsr::testing::random_tensor({1, 5, 5}, rng, false), 0.0); }),
            Errc::ShapeMismatch);
}

TEST(Metrics, PsnrAndSsim) {
  Image a(1, 20, 20, 0.5f), b(1, 20, 20, 0.6f);
  EXPECT_TRUE(std::isinf(psnr(a, a)));
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-5);
  EXPECT_DOUBLE_EQ(ssim(a, a), 1.0);
  // Constant images: only the luminance term remains.
  const double c1 = 1e-4, mx = 0.5, my = static_cast<double>(0.6f);
  EXPECT_NEAR(ssim(a, b), (2 * mx * my + c1) / (mx * mx + my * my + c1), 1e-6);
  std::mt19937_64 rng(15);
  Image n(1, 20, 20);
  for (float& v : n.data) v = static_cast<float>(uniform(rng, 0, 1));
  EXPECT_NEAR(ssim(n, n), 1.0, 1e-12);
  EXPECT_LT(ssim(n, a), 0.5);
  Image neg = n;
  for (float& v : neg.data) v = 1.0f - v;
  EXPECT_LT(ssim(n, neg), 0.0);
  EXPECT_EQ(error_code_of([&] { psnr(a, Image(1, 20, 21)); }), Errc::ShapeMismatch);
}

TEST(Checkpoint, RoundTripAndOverwrite) {
  TempDir dir("ckpt");
  auto s = micro_setup<float>(16, 2);
  SrNet<float> net(s.cfg);
  randomize_params(net, 17);
  save_checkpoint(net, dir / "c", 5);
  save_checkpoint(net, dir / "c", 9);
  EXPECT_FALSE(std::filesystem::exists(dir / "c.tmp"));
  EXPECT_FALSE(std::filesystem::exists(dir / "c.old"));
  auto back = load_checkpoint<float>(dir / "c");
  EXPECT_EQ(back.iteration, 9u);
  EXPECT_EQ(config_to_json(back.net.config()), config_to_json(net.config()));
  for (const auto& p : net.params().all()) EXPECT_EQ(back.net.p(p.name).values(), p.tensor.values()) << p.name;
  EXPECT_EQ(net.forward(s.in).values(), back.net.forward(s.in).values());
}

TEST(Checkpoint, Errors) {
  TempDir dir("ckpt_err");
  EXPECT_EQ(error_code_of([&] { load_checkpoint<float>(dir / "missing"); }), Errc::IoError);
  auto s = micro_setup<float>(18, 2);
  SrNet<float> net(s.cfg);
  save_checkpoint(net, dir / "c", 1);
  auto manifest = nlohmann::json::parse(slurp(dir / "c" / "manifest.json"));
  manifest["version"] = 99;
  write_text_file(dir / "c" / "manifest.json", manifest.dump());
  EXPECT_EQ(error_code_of([&] { load_checkpoint<float>(dir / "c"); }), Errc::SchemaVersionMismatch);
  manifest["version"] = kCheckpointVersion;
  manifest["params"].erase(0);
  write_text_file(dir / "c" / "manifest.json", manifest.dump());
  EXPECT_EQ(error_code_of([&] { load_checkpoint<float>(dir / "c"); }), Errc::MalformedFile);
  write_text_file(dir / "c" / "manifest.json", "{");
  EXPECT_EQ(error_code_of([&] { load_checkpoint<float>(dir / "c"); }), Errc::MalformedFile);
}

TEST(Config, JsonRoundTrip) {
  NetworkConfig c = tiny_net(true);
  c.attn.variant = epi::Variant::FullCross;
  c.lambda_per = 0.1;
  EXPECT_EQ(config_to_json(config_from_json(config_to_json(c))), config_to_json(c));
  auto j = config_to_json(c);
  j.erase("n_ref");
  EXPECT_EQ(error_code_of([&] { config_from_json(j); }), Errc::MalformedFile);
}

TEST(Dataset, InputsAndGrids) {
  auto scene = tiny_scene(19);
  SrDataset<float> data(scene, tiny_net(true));
  EXPECT_EQ(data.rig().cameras.front().intrinsics.width, 16);
  auto in = data.inputs(3);
  EXPECT_EQ(in.aux.size(), 4u);
  EXPECT_EQ(in.grids[2]->feat_w, 4);
  EXPECT_EQ(in.grids[1]->k, 6);
  EXPECT_EQ(in.grids[0].get(), data.inputs(3).grids[0].get());
  EXPECT_EQ(in.grids[0]->view_ids, data.aux_of(3));
  SrDataset<float> si(scene, tiny_net(false));
  EXPECT_TRUE(si.inputs(3).aux.empty());
}

TEST(Train, LossDecreasesAndRunsAreReproducible) {
  TempDir dir("train");
  auto scene = tiny_scene(20);
  auto run = [&](const std::string& tag) {
    SrNet<float> net(tiny_net(true));
    SrDataset<float> data(scene, net.config());
    TrainConfig tc;
    tc.iters = 40;
    tc.lr_start = 2e-3;
    tc.lr_end = 2e-5;
    tc.checkpoint_every = 20;
    tc.seed = 4;
    tc.holdout = {1};
    auto log = train(net, data, tc, dir / ("ck_" + tag), dir / ("m_" + tag + ".csv"));
    return log;
  };
  auto a = run("a");
  auto b = run("b");
  ASSERT_EQ(a.losses.size(), 40u);
  double first = 0, last = 0;
  for (int i = 0; i < 8; ++i) {
    first += a.losses[i];
    last += a.losses[32 + i];
  }
  EXPECT_LT(last, first);
  EXPECT_EQ(a.losses, b.losses);
  EXPECT_EQ(slurp(dir / "m_a.csv"), slurp(dir / "m_b.csv"));
  const std::string csv = slurp(dir / "m_a.csv");
  EXPECT_EQ(csv.rfind("iter,lr,loss,psnr\n20,", 0), 0u);
  for (const auto& e : std::filesystem::directory_iterator(dir / "ck_a"))
    EXPECT_EQ(slurp(e.path()), slurp(dir / "ck_b" / e.path().filename())) << e.path();
}

TEST(Train, SmokeMedianLossDecreases) {
  auto scene = tiny_scene(23);
  SrNet<float> net(tiny_net(false));
  SrDataset<float> data(scene, net.config());
  TrainConfig tc;
  tc.iters = 200;
  tc.lr_start = 2e-3;
  tc.lr_end = 2e-6;
  auto log = train(net, data, tc);
  auto median = [](std::vector<double> v) {
    std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
    return v[v.size() / 2];
  };
  EXPECT_LT(median({log.losses.end() - 50, log.losses.end()}), median({log.losses.begin(), log.losses.begin() + 50}));
}

TEST(Train, NonFiniteLossStopsWithCheckpoint) {
  TempDir dir("nonfinite");
  auto scene = tiny_scene(21);
  SrNet<float> net(tiny_net(false));
  net.p("msff.head.b").data()[0] = std::numeric_limits<float>::quiet_NaN();
  SrDataset<float> data(scene, net.config());
  TrainConfig tc;
  tc.iters = 3;
  EXPECT_EQ(error_code_of([&] { train(net, data, tc, dir / "ck"); }), Errc::NonFiniteLoss);
  EXPECT_TRUE(std::filesystem::exists(dir / "ck.nonfinite" / "manifest.json"));
  tc.holdout = data.view_ids();
  EXPECT_EQ(error_code_of([&] { train(net, data, tc); }), Errc::NotEnoughViews);
}

TEST(Localization, NeedsEpipolarBranch) {
  auto scene = tiny_scene(22);
  SrNet<float> si(tiny_net(false));
  SrDataset<float> data(scene, si.config());
  EXPECT_EQ(error_code_of([&] { probe_localization(si, data, scene, 10, 1); }), Errc::InvalidArgument);
  SrNet<float> mv(tiny_net(true));
  SrDataset<float> mdata(scene, mv.config());
  auto r = probe_localization(mv, mdata, scene, 20, 1);
  EXPECT_EQ(r.probed, 20);
  EXPECT_GE(r.hits, 0);
  EXPECT_LE(r.hits, 20);
}
