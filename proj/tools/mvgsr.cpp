// mvgsr command-line frontend.
//
// Exit codes: 0 success, 1 user error (bad input, unknown view, malformed
// file), 2 internal error. Diagnostics go to stderr as a single line.

#include <CLI11.hpp>

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "mvgsr/bench.hpp"
#include "mvgsr/colmap_io.hpp"
#include "mvgsr/geometry.hpp"
#include "mvgsr/image.hpp"
#include "mvgsr/srnet.hpp"
#include "mvgsr/synthscene.hpp"
#include "mvgsr/view_select.hpp"

namespace fs = std::filesystem;
using namespace mvgsr;

namespace {

/// Shortest round-trip-ish form with at least one decimal ("1.0", "31.2041", "inf").
std::string num(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  std::string s = buf;
  if (s.find_first_of(".e") == std::string::npos) s += ".0";
  return s;
}

/// Line coefficients with roundoff-level entries snapped to zero.
std::string coef(double v) {
  if (std::abs(v) < 1e-12) v = 0.0;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

struct SelectionFlags {
  int n_ref = 4;
  int stride = 2;
  double lambda_pos = 0.5;
  std::string strategy = "auxiliary";
  std::uint64_t seed = 0;

  void add(CLI::App* cmd, bool with_n_ref = true) {
    if (with_n_ref) cmd->add_option("--n-ref", n_ref, "Auxiliary views per target");
    cmd->add_option("--stride", stride, "Take one view every `stride` ranked positions");
    cmd->add_option("--lambda-pos", lambda_pos, "Weight of the position term against the direction term");
    cmd->add_option("--strategy", strategy, "auxiliary | nearest | random");
  }

  select::SelectionConfig config() const {
    select::SelectionConfig c;
    c.n_ref = n_ref;
    c.stride_l = stride;
    c.lambda_pos = lambda_pos;
    c.strategy = select::parse_strategy(strategy);
    c.random_seed = seed;
    return c;
  }
};

struct NetFlags {
  int base_channels = 32;
  std::vector<int> k_epi{64, 32, 16};
  int heads = 1;
  std::string variant = "epipolar";
  bool no_est = false;
  double lambda_per = 0.0;

  void add(CLI::App* cmd) {
    cmd->add_option("--base-channels", base_channels, "Channels of the first block (doubles per block)");
    cmd->add_option("--k-epi", k_epi, "Samples per epipolar line for blocks 1,2,3")->delimiter(',')->expected(3);
    cmd->add_option("--heads", heads, "Attention heads");
    cmd->add_option("--variant", variant, "epipolar | full_cross");
    cmd->add_flag("--no-est", no_est, "Single-image network without the multi-view branch");
    cmd->add_option("--lambda-per", lambda_per, "Weight of the perceptual surrogate loss");
  }

  sr::NetworkConfig config(const synth::SynthScene& scene, int n_ref, std::uint64_t seed) const {
    sr::NetworkConfig c;
    c.base_channels = base_channels;
    c.in_channels = scene.cfg.channels;
    c.n_ref = n_ref;
    c.upscale = scene.cfg.factor;
    c.lambda_per = lambda_per;
    c.seed = seed;
    c.use_est = !no_est;
    c.attn.k_epi = {k_epi[0], k_epi[1], k_epi[2]};
    c.attn.n_heads = heads;
    c.attn.variant = epi::parse_variant(variant);
    c.validate();
    return c;
  }
};

void write_text(const std::string& out, const std::string& text) {
  if (out == "-") {
    std::cout << text;
  } else {
    colmap::detail::write_file(out, text);
  }
}

// ---------------------------------------------------------------------------

int cmd_parse_colmap(const std::string& dir, const std::string& out, const std::string& format) {
  if (!fs::is_directory(dir)) fail(Errc::IoError, "sparse directory " + dir + " not found");
  colmap::Format f;
  if (format == "text") {
    f = colmap::Format::Text;
  } else if (format == "binary") {
    f = colmap::Format::Binary;
  } else if (format == "auto") {
    f = fs::exists(fs::path(dir) / "cameras.txt") ? colmap::Format::Text : colmap::Format::Binary;
  } else {
    fail(Errc::InvalidArgument, "unknown format " + format);
  }
  write_text(out, colmap::manifest_to_json(colmap::load_sparse_model(dir, f)).dump(2) + "\n");
  return 0;
}

int cmd_select(const std::string& poses, int target, const SelectionFlags& flags, const std::string& table) {
  const PoseManifest m = colmap::read_manifest(poses);
  const auto cfg = flags.config();
  const auto res = select::select_auxiliary(m, target, cfg);
  std::string line;
  for (int id : res.auxiliaries) line += (line.empty() ? "" : " ") + std::to_string(id);
  std::cout << line << "\n";
  if (!table.empty()) select::write_selection(select::select_all(m, cfg), cfg, table);
  return 0;
}

int cmd_epi_check(const std::string& poses, const std::array<int, 2>& pair, const std::array<double, 2>& point,
                  std::string scene_dir) {
  const PoseManifest m = colmap::read_manifest(poses);
  const Camera ci = m.camera(pair[0]), cj = m.camera(pair[1]);
  const auto f = geometry::fundamental(ci, cj, m.scene_scale);
  if (!f.valid) fail(Errc::DegeneratePair, "degenerate pair " + std::to_string(pair[0]) + " " + std::to_string(pair[1]));
  const Eigen::Vector2d x(point[0], point[1]);
  const auto line = geometry::epipolar_line(f, x);
  std::cout << coef(line.a) << " " << coef(line.b) << " " << coef(line.c) << "\n";

  if (scene_dir.empty() && synth::is_scene_dir(fs::path(poses).parent_path()))
    scene_dir = fs::path(poses).parent_path().string();
  if (scene_dir.empty()) return 0;
  const auto scene = synth::load_scene(scene_dir);
  const auto gt = synth::gt_correspondence(scene, pair[0], x, pair[1], m);
  if (!gt) {
    std::cout << "residual none (point misses the scene plane)\n";
    return 0;
  }
  char buf[96];
  std::snprintf(buf, sizeof(buf), "residual %.3e gt %.6f %.6f\n", line.distance(*gt), gt->x(), gt->y());
  std::cout << buf;
  return 0;
}

struct SceneFlags {
  std::string kind = "ring_inward";
  int cams = 16, hr = 128, factor = 2, channels = 1;
  double radius = 4.0, elevation = 35.0, fov = 50.0;

  void add(CLI::App* cmd) {
    cmd->add_option("--kind", kind, "ring_inward | arc | random_hemisphere");
    cmd->add_option("--cams", cams, "Number of cameras");
    cmd->add_option("--hr", hr, "High-resolution image size (square)");
    cmd->add_option("--factor", factor, "Downsampling factor to the low-resolution images");
    cmd->add_option("--channels", channels, "1 (gray) or 3 (RGB)");
    cmd->add_option("--radius", radius, "Rig radius");
    cmd->add_option("--elevation", elevation, "Ring and arc elevation in degrees");
    cmd->add_option("--fov", fov, "Horizontal field of view in degrees");
  }
};

int cmd_gen_scene(const SceneFlags& f, std::uint64_t seed, const std::string& out) {
  synth::SceneConfig c;
  c.kind = synth::parse_rig_kind(f.kind);
  c.cams = f.cams;
  c.hr_size = f.hr;
  c.factor = f.factor;
  c.channels = f.channels;
  c.radius = f.radius;
  c.elevation_deg = f.elevation;
  c.fov_deg = f.fov;
  c.seed = seed;
  synth::save_scene(synth::generate(c), out);
  return 0;
}

struct TrainFlags {
  int iters = 1000, batch = 2, checkpoint_every = 0;
  double lr_start = 1e-4, lr_end = 1e-7;
  std::vector<int> holdout;
  std::string metrics;
};

int cmd_train(const std::string& scene_dir, const std::string& out, const TrainFlags& t, const NetFlags& nf,
              const SelectionFlags& sf, std::uint64_t seed) {
  const auto scene = synth::load_scene(scene_dir);
  const auto ncfg = nf.config(scene, sf.n_ref, seed);
  sr::SrNet<float> net(ncfg);
  sr::SrDataset<float> data(scene, ncfg, sf.config());
  sr::TrainConfig tc;
  tc.iters = t.iters;
  tc.batch = t.batch;
  tc.lr_start = t.lr_start;
  tc.lr_end = t.lr_end;
  tc.checkpoint_every = t.checkpoint_every;
  tc.seed = seed;
  tc.holdout = t.holdout;
  const fs::path metrics = t.metrics.empty() ? fs::path(out + ".metrics.csv") : fs::path(t.metrics);
  fs::remove(metrics);  // a run owns its log; appending to an old one would break reproducibility
  const auto log = sr::train(net, data, tc, out, metrics);
  std::cout << "final_loss " << num(log.losses.back()) << "\nfinal_psnr " << num(log.final_psnr) << "\n";
  return 0;
}

int cmd_sr(const std::string& scene_dir, const std::string& ckpt, int target, const std::string& out,
           const SelectionFlags& sf) {
  const auto scene = synth::load_scene(scene_dir);
  const auto loaded = sr::load_checkpoint<float>(ckpt);
  sr::SrDataset<float> data(scene, loaded.net.config(), sf.config());
  const Image pred = sr::super_resolve(loaded.net, data.inputs(target));
  write_png(pred, out);
  const Image hr = scene.hr_images[scene.index_of(target)];
  const Image bic = resample::upsample_bicubic(scene.lr_images[scene.index_of(target)], scene.cfg.factor).clamped();
  std::cout << "PSNR " << num(sr::psnr(pred, hr)) << " SSIM " << num(sr::ssim(pred, hr)) << "\n"
            << "bicubic PSNR " << num(sr::psnr(bic, hr)) << " SSIM " << num(sr::ssim(bic, hr)) << "\n";
  return 0;
}

int cmd_attn_map(const std::string& scene_dir, const std::string& ckpt, int target, int aux_view,
                 const std::array<double, 2>& query, int block, const std::string& out, const SelectionFlags& sf) {
  const auto scene = synth::load_scene(scene_dir);
  const auto loaded = sr::load_checkpoint<float>(ckpt);
  const auto& net = loaded.net;
  if (!net.config().use_est || net.config().attn.variant != epi::Variant::Epipolar)
    fail(Errc::InvalidArgument, "attention maps need a checkpoint with the epipolar branch");
  if (block < 0 || block > 2) fail(Errc::InvalidArgument, "block must be 0, 1 or 2");
  sr::SrDataset<float> data(scene, net.config(), sf.config());
  data.rig().at(aux_view);
  if (aux_view == target) fail(Errc::InvalidArgument, "auxiliary view equals the target");

  // The selected views, with the requested one swapped in first when absent.
  std::vector<int> aux = data.aux_of(target);
  auto pos = std::find(aux.begin(), aux.end(), aux_view);
  if (pos == aux.end()) {
    aux.pop_back();
    aux.insert(aux.begin(), aux_view);
    pos = aux.begin();
  }
  const int v = static_cast<int>(pos - aux.begin());

  const auto grid = data.grid(target, aux, block);
  const int qx = static_cast<int>(std::lround(query[0])), qy = static_cast<int>(std::lround(query[1]));
  if (qx < 0 || qy < 0 || qx >= grid->feat_w || qy >= grid->feat_h)
    fail(Errc::InvalidArgument, "query outside the " + std::to_string(grid->feat_w) + "x" +
                                    std::to_string(grid->feat_h) + " feature map");
  const int q = qy * grid->feat_w + qx;
  if (!grid->is_valid(q, v)) fail(Errc::EmptySegment, "the epipolar line of the query misses the auxiliary view");

  sr::AttentionTrace<float> trace;
  sr::super_resolve(net, data.inputs(target, aux), &trace);
  const auto& w = *trace.weights[block][v];
  const int heads = net.config().attn.n_heads;
  write_pgm(epi::attention_heatmap(*grid, w, q, v, heads), out);

  const double* xy = grid->at(q, v) + 2 * epi::attention_argmax(*grid, w, q, heads);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "argmax %.3f %.3f\n", xy[0], xy[1]);
  std::cout << buf;
  // Ground truth in low-resolution pixels, then mapped to the block's feature grid.
  const double s = grid->stride;
  const Eigen::Vector2d px((qx + 0.5) * s - 0.5, (qy + 0.5) * s - 0.5);
  const auto gt = synth::gt_correspondence(scene, target, px, aux_view, data.rig());
  if (gt) {
    const Eigen::Vector2d g((gt->x() + 0.5) / s - 0.5, (gt->y() + 0.5) / s - 0.5);
    std::snprintf(buf, sizeof(buf), "gt %.3f %.3f distance %.3f spacing %.3f\n", g.x(), g.y(),
                  std::hypot(xy[0] - g.x(), xy[1] - g.y()), grid->spacing(q, v));
    std::cout << buf;
  }
  return 0;
}

int cmd_eval(const std::string& pred, const std::string& gt) {
  const Image a = read_image(pred), b = read_image(gt);
  std::cout << "PSNR " << num(sr::psnr(a, b)) << " SSIM " << num(sr::ssim(a, b)) << "\n";
  return 0;
}

int cmd_bench(const bench::AttnBenchConfig& cfg) {
  const auto rows = bench::run_attention_bench(cfg);
  std::printf("size positions epi_us_per_pair full_us_per_pair epi_macs_per_pair full_macs_per_pair\n");
  for (const auto& r : rows)
    std::printf("%d %zu %.4f %.4f %.1f %.1f\n", r.size, r.positions, r.epi_us, r.full_us,
                static_cast<double>(r.epi_macs) / r.epi_pairs, static_cast<double>(r.full_macs) / r.full_pairs);
  for (std::size_t i = 1; i < rows.size(); ++i)
    std::printf("ratio %d->%d epi %.3f full %.3f\n", rows[i - 1].size, rows[i].size, rows[i].epi_us / rows[i - 1].epi_us,
                rows[i].full_us / rows[i - 1].full_us);
  return 0;
}

int exit_code_for(Errc c) {
  switch (c) {
    case Errc::NonScalarLoss:
    case Errc::GraphConsumed:
      return 2;  // misuse of the autodiff engine by the tool itself
    default:
      return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-view super-resolution toolkit"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  int threads = 1;
  app.add_option("--threads", threads, "Worker threads (the pipeline currently runs on one)")
      ->check(CLI::PositiveNumber);

  std::function<int()> run;

  // parse-colmap
  std::string sparse_dir, out, format = "auto";
  auto* pc = app.add_subcommand("parse-colmap", "Convert a COLMAP sparse model to poses.json");
  pc->add_option("sparse_dir", sparse_dir, "Directory with cameras and images files")->required();
  pc->add_option("-o,--out", out, "Output manifest, - for stdout")->required();
  pc->add_option("--format", format, "text | binary | auto");
  pc->callback([&] { run = [&] { return cmd_parse_colmap(sparse_dir, out, format); }; });

  // select
  std::string poses, table;
  int target = 0;
  SelectionFlags sel;
  auto* sc = app.add_subcommand("select", "Print the auxiliary views chosen for a target");
  sc->add_option("--poses", poses, "poses.json")->required();
  sc->add_option("--target", target, "Target view id")->required();
  sel.add(sc);
  sc->add_option("--seed", sel.seed, "Seed of the random strategy");
  sc->add_option("--table", table, "Also write the selection of every view to this JSON file");
  sc->callback([&] { run = [&] { return cmd_select(poses, target, sel, table); }; });

  // epi-check
  std::array<int, 2> pair{0, 0};
  std::array<double, 2> point{0, 0};
  std::string scene_dir;
  auto* ec = app.add_subcommand("epi-check", "Epipolar line of a pixel, with the ground-truth residual for scenes");
  ec->add_option("--poses", poses, "poses.json")->required();
  ec->add_option("--pair", pair, "Source and destination view ids")->required();
  ec->add_option("--point", point, "Pixel (u v) in the source view")->required();
  ec->add_option("--scene", scene_dir, "Scene directory (default: the one holding poses.json, if any)");
  ec->callback([&] { run = [&] { return cmd_epi_check(poses, pair, point, scene_dir); }; });

  // gen-scene
  SceneFlags scene;
  std::uint64_t seed = 0;
  auto* gs = app.add_subcommand("gen-scene", "Render a synthetic multi-view scene");
  scene.add(gs);
  gs->add_option("--seed", seed, "Scene seed");
  gs->add_option("-o,--out", out, "Output directory")->required();
  gs->callback([&] { run = [&] { return cmd_gen_scene(scene, seed, out); }; });

  // train
  TrainFlags tf;
  NetFlags nf;
  auto* tr = app.add_subcommand("train", "Train the super-resolution network on a scene");
  tr->add_option("--scene", scene_dir, "Scene directory")->required();
  tr->add_option("--out", out, "Checkpoint directory")->required();
  tr->add_option("--iters", tf.iters, "Iterations");
  tr->add_option("--batch", tf.batch, "Targets per iteration");
  tr->add_option("--lr-start", tf.lr_start, "Initial learning rate");
  tr->add_option("--lr-end", tf.lr_end, "Final learning rate (cosine schedule)");
  tr->add_option("--checkpoint-every", tf.checkpoint_every, "Checkpoint period; 0 writes only at the end");
  tr->add_option("--holdout", tf.holdout, "Views excluded from training and used for evaluation")->delimiter(',');
  tr->add_option("--metrics", tf.metrics, "Metrics CSV (default: <out>.metrics.csv)");
  tr->add_option("--seed", seed, "Initialisation and sampling seed");
  nf.add(tr);
  sel.add(tr);
  tr->callback([&] { run = [&] { return cmd_train(scene_dir, out, tf, nf, sel, seed); }; });

  // sr
  std::string ckpt;
  auto* srcmd = app.add_subcommand("sr", "Super-resolve one view of a scene");
  srcmd->add_option("--scene", scene_dir, "Scene directory")->required();
  srcmd->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  srcmd->add_option("--target", target, "Target view id")->required();
  srcmd->add_option("-o,--out", out, "Output PNG")->required();
  sel.add(srcmd, false);
  srcmd->callback([&] { run = [&] { return cmd_sr(scene_dir, ckpt, target, out, sel); }; });

  // attn-map
  int aux_view = 0, block = 0;
  std::array<double, 2> query{0, 0};
  auto* am = app.add_subcommand("attn-map", "Attention heat map of one query along its epipolar line");
  am->add_option("--scene", scene_dir, "Scene directory")->required();
  am->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  am->add_option("--target", target, "Target view id")->required();
  am->add_option("--aux", aux_view, "Auxiliary view id")->required();
  am->add_option("--query", query, "Query pixel (u v) on the block's feature map")->required();
  am->add_option("--block", block, "Attention block 0, 1 or 2");
  am->add_option("-o,--out", out, "Output PGM")->required();
  sel.add(am, false);
  am->callback([&] { run = [&] { return cmd_attn_map(scene_dir, ckpt, target, aux_view, query, block, out, sel); }; });

  // eval
  std::string pred, gt;
  auto* ev = app.add_subcommand("eval", "PSNR and SSIM between two images");
  ev->add_option("--pred", pred, "Prediction (PNG or PGM)")->required();
  ev->add_option("--gt", gt, "Reference (PNG or PGM)")->required();
  ev->callback([&] { run = [&] { return cmd_eval(pred, gt); }; });

  // bench-attn
  bench::AttnBenchConfig bc;
  auto* ba = app.add_subcommand("bench-attn", "Per-query cost of epipolar versus full-cross attention");
  ba->add_option("--sizes", bc.sizes, "Feature map sizes")->delimiter(',');
  ba->add_option("--k", bc.k, "Samples per epipolar line");
  ba->add_option("--channels", bc.channels, "Feature channels");
  ba->add_option("--views", bc.n_views, "Auxiliary views");
  ba->add_option("--trials", bc.trials, "Timed trials per measurement (best is kept)");
  ba->add_option("--min-seconds", bc.min_seconds, "Minimum duration of one trial");
  ba->add_option("--seed", bc.seed, "Feature seed");
  ba->callback([&] { run = [&] { return cmd_bench(bc); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "mvgsr: " << e.what() << "\n";
    return 1;
  }

  try {
    return run();
  } catch (const Error& e) {
    std::cerr << "mvgsr: " << e.what() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "mvgsr: internal error: " << e.what() << "\n";
    return 2;
  }
}
