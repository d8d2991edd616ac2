// nvs: single entry point for training, evaluation, rendering and serving.
//
// Errors are reported as one JSON line on stderr,
//   {"error":"<kind>","token":"<offending token>","message":"..."}
// with a non-zero exit code.

#include <CLI11.hpp>

#include <csignal>
#include <filesystem>
#include <iostream>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "json.hpp"
#include "nvs/gradcheck_suite.hpp"
#include "nvs/io.hpp"
#include "nvs/metrics.hpp"
#include "nvs/scenes.hpp"
#include "nvs/service.hpp"
#include "nvs/tae.hpp"
#include "nvs/train.hpp"
#include "nvs/warp.hpp"

namespace fs = std::filesystem;
using namespace nvs;

namespace {

/// Failure with the token that caused it.
struct CliError : std::runtime_error {
  CliError(std::string kind, std::string token, const std::string& what)
      : std::runtime_error(what), kind(std::move(kind)), token(std::move(token)) {}
  std::string kind, token;
};

int report(const std::string& kind, const std::string& token, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"token", token}, {"message", message}}.dump() << std::endl;
  return 2;
}

void require_file(const std::string& path) {
  if (!fs::is_regular_file(path)) throw CliError("missing_file", path, "no such file: " + path);
}

struct Common {
  std::string config;
  std::string checkpoint;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "Training/evaluation config (key = value file)");
  sub->add_option("--checkpoint", c.checkpoint, "Model checkpoint (with <checkpoint>.cfg sidecar)");
  sub->add_option("--seed", c.seed, "Random seed");
}

train::TrainConfig load_config(const Common& c) {
  train::TrainConfig cfg;
  if (!c.config.empty()) {
    require_file(c.config);
    cfg = train::TrainConfig::load(c.config);
  }
  if (c.seed) cfg.seed = *c.seed;
  return cfg;
}

TaeModel<float> load_checkpoint(const Common& c) {
  if (c.checkpoint.empty()) throw CliError("missing_flag", "--checkpoint", "--checkpoint is required");
  require_file(c.checkpoint);
  require_file(config_sidecar(c.checkpoint).string());
  return load_model<float>(c.checkpoint);
}

void ensure_parent(const fs::path& file) {
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

void write_text(const fs::path& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw CliError("io", path.string(), "cannot write " + path.string());
  f << text;
  if (!f) throw CliError("io", path.string(), "write failed: " + path.string());
}

/// Source view selection shared by render and orbit.
struct SourceOptions {
  std::uint64_t scene_seed = train::kValidationSeedBase;
  double azimuth = 0.0;
  double elevation = 10.0;
  double radius = 3.0;
  int size = 64;  // oracle only; learned mode uses the model size
  std::string image;
  std::string intrinsics;
  bool oracle = false;
};

void add_source(CLI::App* sub, SourceOptions& s) {
  sub->add_option("--scene-seed", s.scene_seed, "Procedural scene seed for the source view");
  sub->add_option("--azimuth", s.azimuth, "Source azimuth in degrees");
  sub->add_option("--elevation", s.elevation, "Source elevation in degrees");
  sub->add_option("--radius", s.radius, "Orbit radius")->check(CLI::PositiveNumber);
  sub->add_option("--size", s.size, "Image size in oracle mode")->check(CLI::Range(8, 1024));
  sub->add_option("--image", s.image, "Source image PNG (learned mode; needs --intrinsics)");
  sub->add_option("--intrinsics", s.intrinsics, "intrinsics.txt for --image");
  sub->add_flag("--oracle", s.oracle, "Use the scene's ground-truth depth instead of a model");
}

/// Renders target views given T_{t->s} transforms from one source view.
class Renderer {
 public:
  Renderer(const SourceOptions& s, const Common& c) {
    if (s.oracle && !c.checkpoint.empty()) throw CliError("usage", "--oracle", "--oracle and --checkpoint are exclusive");
    if (!s.oracle) model_ = std::make_unique<TaeModel<float>>(load_checkpoint(c));
    if (!s.image.empty()) {
      if (s.oracle) throw CliError("usage", "--image", "--image needs a model; oracle mode renders procedural scenes");
      if (s.intrinsics.empty()) throw CliError("missing_flag", "--intrinsics", "--image needs --intrinsics");
      require_file(s.image);
      require_file(s.intrinsics);
      source_.image = train::to_model_channels(io::read_png(s.image), model_->config().image_channels);
      source_.intrinsics = io::read_intrinsics(s.intrinsics);
      source_.pose = RigidTransform::identity();
      const int m = model_->config().image_size;
      if (source_.image.width != m || source_.image.height != m) {
        throw CliError("bad_input", s.image, "image must be " + std::to_string(m) + "x" + std::to_string(m));
      }
      return;
    }
    spec_ = scenes::random_object_scene(s.scene_seed);
    const int size = model_ ? model_->config().image_size : s.size;
    source_ = scenes::raycast(*spec_, scenes::orbit_pose(s.azimuth, s.elevation, s.radius), CameraIntrinsics::centered(size));
    if (model_) source_.image = train::to_model_channels(source_.image, model_->config().image_channels);
  }

  Image render(const RigidTransform& t_ts, Image* depth_vis = nullptr) const {
    const auto& k = source_.intrinsics;
    if (!model_) {
      const auto target = scenes::raycast(*spec_, compose(source_.pose, t_ts), k);
      if (depth_vis) *depth_vis = service::depth_visualization(target.depth, spec_->d_min, spec_->d_max);
      return synthesize_oracle(source_.image, target.depth, invert(t_ts), k);
    }
    const auto s = synthesize(*model_, source_.image, invert(t_ts), k);
    if (depth_vis) {
      if (s.depth.values.empty()) throw CliError("usage", "--depth", "this model variant predicts flow, not depth");
      *depth_vis = service::depth_visualization(s.depth, model_->config().d_min, model_->config().d_max);
    }
    return s.image;
  }

  const scenes::ViewSample& source() const { return source_; }

 private:
  std::unique_ptr<TaeModel<float>> model_;
  std::optional<scenes::SceneSpec> spec_;
  scenes::ViewSample source_;
};

/// T_{t->s} for an orbit step of `delta_deg` in azimuth at fixed elevation.
RigidTransform orbit_step(const SourceOptions& s, double delta_deg) {
  const auto src = scenes::orbit_pose(s.azimuth, s.elevation, s.radius);
  return relative_target_to_source(src, scenes::orbit_pose(s.azimuth + delta_deg, s.elevation, s.radius));
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_train(const Common& c, const std::string& out, const std::string& variant, std::optional<std::size_t> epochs) {
  auto cfg = load_config(c);
  if (!variant.empty()) {
    try {
      cfg.model.variant = parse_variant(variant);
    } catch (const std::exception& e) {
      throw CliError("bad_value", variant, e.what());
    }
  }
  if (epochs) cfg.epochs = *epochs;
  cfg.validate();
  train::TrainHooks hooks;
  hooks.progress = &std::cerr;
  const auto r = train::train(cfg, out, hooks);
  const auto& last = r.log.back();
  std::cout << "val_l1 " << format_double(last.val_l1) << " baseline_l1 " << format_double(last.baseline_l1) << "\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& out) {
  const auto model = load_checkpoint(c);
  auto cfg = load_config(c);
  cfg.model = model.config();
  const auto val = train::validation_set(cfg);
  const auto k = CameraIntrinsics::centered(cfg.model.image_size);
  const auto scores = train::validate(model, val);
  const auto df = train::evaluate_depth_flow(model, val);
  double ssim = 0.0, te = 0.0, re = 0.0;
  std::size_t pose_n = 0;
  for (const auto& e : val) {
    const auto s = synthesize(model, train::to_model_channels(e.source.image, cfg.model.image_channels), e.t_st, k);
    ssim += metrics::ssim(s.image, train::to_model_channels(e.target.image, cfg.model.image_channels));
    auto mask = scenes::visibility_mask(e.source, e.target, cfg.model.d_max);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = mask[i] && e.target.depth.values[i] < cfg.model.d_max;
    try {
      const auto pe = metrics::pose_error_direct(s.flow, e.target.depth, e.source.depth, k, invert(e.t_st), mask);
      te += pe.te;
      re += pe.re;
      ++pose_n;
    } catch (const std::invalid_argument&) {
      // too few usable correspondences for this pair
    }
  }
  std::ostringstream os;
  os << "metric,value\n";
  os << "l1," << format_double(scores.l1) << "\n";
  os << "baseline_l1," << format_double(scores.baseline_l1) << "\n";
  os << "ssim," << format_double(ssim / double(val.size())) << "\n";
  os << "flow_l1," << format_double(df.flow_l1) << "\n";
  os << "flow_acc," << format_double(df.flow_acc) << "\n";
  os << "depth_l1," << format_double(df.depth_l1) << "\n";
  os << "depth_acc," << format_double(df.depth_acc) << "\n";
  os << "pose_te," << format_double(pose_n ? te / double(pose_n) : std::nan("")) << "\n";
  os << "pose_re," << format_double(pose_n ? re / double(pose_n) : std::nan("")) << "\n";
  if (out.empty()) std::cout << os.str();
  else write_text(out, os.str());
  return 0;
}

int cmd_sweep(const Common& c, double range, double step, std::size_t scene_count, double grid, const std::string& out) {
  const auto model = load_checkpoint(c);
  if (!(step > 0)) throw CliError("bad_value", "--step", "--step must be positive");
  const auto rows = train::evaluate_sweep(model, train::held_out_scenes(scene_count), train::default_sweep_views(), range, step);
  const auto csv = train::format_sweep_csv(rows);
  if (out.empty()) std::cout << csv;
  else write_text(out, csv);
  try {
    std::cerr << "snapping_ratio " << format_double(train::snapping_ratio(rows, grid)) << "\n";
  } catch (const std::invalid_argument&) {
    // sweep too narrow to contain both grid and off-grid angles
  }
  return 0;
}

int cmd_render(const Common& c, const SourceOptions& s, const std::string& poses_path, const std::string& out, bool depth) {
  require_file(poses_path);
  std::vector<RigidTransform> poses;
  try {
    poses = io::read_poses(poses_path);
  } catch (const io::IoError& e) {
    throw CliError("bad_input", poses_path, e.what());
  }
  for (std::size_t i = 0; i < poses.size(); ++i)
    if (!poses[i].is_valid(1e-6)) throw CliError("bad_input", poses_path + ":" + std::to_string(i + 1), "not a rigid transform");
  const Renderer r(s, c);
  fs::create_directories(out);
  for (std::size_t i = 0; i < poses.size(); ++i) {
    Image dv;
    io::write_png(fs::path(out) / (scenes::frame_stem(i) + ".png"), r.render(poses[i], depth ? &dv : nullptr));
    if (depth) io::write_png(fs::path(out) / (scenes::frame_stem(i) + "_depth.png"), dv);
  }
  return 0;
}

int cmd_orbit(const Common& c, const SourceOptions& s, int views, double step, const std::string& overlay,
              const std::string& frames) {
  if (views < 1) throw CliError("bad_value", "--views", "--views must be at least 1");
  if (overlay.empty() && frames.empty()) throw CliError("missing_flag", "--overlay", "need --overlay and/or --frames");
  const Renderer r(s, c);
  Image sum;
  for (int i = 0; i < views; ++i) {
    const Image img = r.render(orbit_step(s, i * step));
    if (!frames.empty()) {
      fs::create_directories(frames);
      io::write_png(fs::path(frames) / (scenes::frame_stem(std::size_t(i)) + ".png"), img);
    }
    if (sum.data.empty()) sum = Image(img.width, img.height, img.channels);
    for (std::size_t j = 0; j < img.data.size(); ++j) sum.data[j] += img.data[j];
  }
  if (!overlay.empty()) {
    for (auto& v : sum.data) v /= float(views);
    ensure_parent(overlay);
    io::write_png(overlay, sum);
  }
  return 0;
}

int cmd_gradcheck(const Common& c, int trials) {
  const auto checks = run_gradcheck_suite(c.seed.value_or(2024), trials);
  bool ok = true;
  for (const auto& ch : checks) {
    const bool pass = ch.max_rel_error < kGradcheckTolerance;
    ok = ok && pass;
    std::cout << ch.op << " " << std::scientific << std::setprecision(3) << ch.max_rel_error << (pass ? " ok" : " FAIL") << "\n";
  }
  if (!ok) return report("gradcheck_failed", "gradcheck", "at least one op exceeds max relative error 1e-3");
  return 0;
}

int cmd_interpolate(const Common& c, std::uint64_t seed_a, std::uint64_t seed_b, int steps, double azimuth, double elevation,
                    const std::string& out) {
  const auto model = load_checkpoint(c);
  if (model.config().variant != Variant::full) {
    throw CliError("usage", "--checkpoint", "interpolation decodes depth from latent points; needs the full variant");
  }
  if (steps < 2) throw CliError("bad_value", "--steps", "--steps must be at least 2");
  const auto& cfg = model.config();
  const auto k = CameraIntrinsics::centered(cfg.image_size);
  const auto pose = scenes::orbit_pose(azimuth, elevation, 3.0);
  auto encode = [&](std::uint64_t seed) {
    const auto v = scenes::raycast(scenes::random_object_scene(seed), pose, k);
    return model.encode(train::to_model_channels(v.image, cfg.image_channels));
  };
  const auto za = encode(seed_a), zb = encode(seed_b);
  fs::create_directories(out);
  for (int i = 0; i < steps; ++i) {
    const double alpha = double(i) / double(steps - 1);
    const auto d = model.decode_depth(interpolate_latents(za, zb, alpha));
    DepthMap depth(k.width, k.height);
    for (std::size_t p = 0; p < depth.values.size(); ++p) depth.values[p] = double(d[p]);
    io::write_png(fs::path(out) / (scenes::frame_stem(std::size_t(i)) + ".png"), service::depth_visualization(depth, cfg.d_min, cfg.d_max));
  }
  return 0;
}

int cmd_gen_data(const Common& c, const std::string& out, std::size_t scene_count, int size, const std::string& kind) {
  const auto cfg = load_config(c);
  const std::uint64_t base = c.seed.value_or(0);
  for (std::size_t i = 0; i < scene_count; ++i) {
    const fs::path dir = fs::path(out) / ("scene_" + scenes::frame_stem(i));
    if (kind == "orbit") {
      auto p = cfg.protocol();
      p.image_size = size;
      scenes::export_dataset(dir, scenes::render_orbit_views(scenes::random_object_scene(base + i), p));
    } else if (kind == "corridor") {
      std::vector<scenes::ViewSample> views;
      const auto spec = scenes::corridor_scene(base + i);
      const auto k = CameraIntrinsics::centered(size);
      for (int f = 0; f <= 20; ++f) views.push_back(scenes::raycast(spec, RigidTransform::translation(Vec3(0, 0, 0.1 * f)), k));
      scenes::export_dataset(dir, views);
    } else {
      throw CliError("bad_value", kind, "--kind must be orbit or corridor");
    }
  }
  return 0;
}

int cmd_serve(const Common& c, std::optional<std::string> host, std::optional<std::uint16_t> port, std::size_t threads) {
  service::ServerOptions opt;
  try {
    opt.bind = service::resolve_bind(std::getenv(service::kBindEnv), host, port);
  } catch (const std::invalid_argument& e) {
    throw CliError("bad_value", service::kBindEnv, e.what());
  }
  if (!c.checkpoint.empty()) {
    require_file(c.checkpoint);
    opt.default_checkpoint = c.checkpoint;
  }
  opt.render_threads = threads;
  opt.log = &std::cerr;

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);  // inherited by server threads

  service::Server server(opt);
  try {
    server.start();
  } catch (const std::exception& e) {
    throw CliError("bind_failed", opt.bind.host + ":" + std::to_string(opt.bind.port), e.what());
  }
  std::cout << "listening " << opt.bind.host << ":" << server.port() << std::endl;
  int sig = 0;
  sigwait(&signals, &sig);
  server.stop();
  return 0;
}

/// Picks the argv token that a CLI11 message refers to.
std::string offending_token(const std::string& message, const std::vector<std::string>& args) {
  std::string best;
  for (const auto& a : args)
    if (a.size() > best.size() && message.find(a) != std::string::npos) best = a;
  if (!best.empty()) return best;
  std::smatch m;
  if (std::regex_search(message, m, std::regex("--?[A-Za-z][A-Za-z0-9-]*"))) return m.str();
  return "";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Novel view synthesis with a transforming auto-encoder: training, evaluation, rendering, serving"};
  app.require_subcommand(1);
  app.allow_extras();
  Common common;
  SourceOptions source;
  std::string out, variant, poses, overlay, frames, kind = "orbit";
  std::optional<std::size_t> epochs;
  double range = 40.0, step = 1.0, grid = 20.0, azimuth = 0.0, elevation = 10.0;
  std::size_t scene_count = 8, threads = 2;
  int views = 80, trials = 3, steps = 9, size = 64;
  bool depth = false;
  std::uint64_t seed_a = train::kValidationSeedBase, seed_b = train::kValidationSeedBase + 1;
  std::optional<std::string> host;
  std::optional<std::uint16_t> port;

  auto* train_cmd = app.add_subcommand("train", "Train a model; writes model.nvsc, metrics.csv and checkpoints");
  add_common(train_cmd, common);
  train_cmd->add_option("--out", out, "Output directory")->required();
  train_cmd->add_option("--variant", variant, "full | no_tae | no_depth (overrides the config)");
  train_cmd->add_option("--epochs", epochs, "Number of epochs (overrides the config)");

  auto* eval_cmd = app.add_subcommand("eval", "Validation metrics of a checkpoint as CSV (metric,value)");
  add_common(eval_cmd, common);
  eval_cmd->add_option("--out", out, "Output CSV (default: stdout)");

  auto* sweep_cmd = app.add_subcommand("sweep", "Azimuth sweep: mean L1/SSIM per angle offset as CSV");
  add_common(sweep_cmd, common);
  sweep_cmd->add_option("--range", range, "Max |offset| in degrees")->check(CLI::NonNegativeNumber);
  sweep_cmd->add_option("--step", step, "Offset step in degrees");
  sweep_cmd->add_option("--scenes", scene_count, "Number of held-out scenes")->check(CLI::PositiveNumber);
  sweep_cmd->add_option("--grid", grid, "Training grid step for the snapping ratio (printed to stderr)");
  sweep_cmd->add_option("--out", out, "Output CSV (default: stdout)");

  auto* render_cmd = app.add_subcommand("render", "Render target views for each pose (T_target->source) in a pose file");
  add_common(render_cmd, common);
  add_source(render_cmd, source);
  render_cmd->add_option("--poses", poses, "Pose file: 12 numbers per line, row-major [R|t]")->required();
  render_cmd->add_option("--out", out, "Output directory for numbered PNGs")->required();
  render_cmd->add_flag("--depth", depth, "Also write depth visualizations");

  auto* orbit_cmd = app.add_subcommand("orbit", "Render a continuous azimuth orbit and an overlay composite");
  add_common(orbit_cmd, common);
  add_source(orbit_cmd, source);
  orbit_cmd->add_option("--views", views, "Number of views");
  orbit_cmd->add_option("--step", step, "Azimuth step in degrees");
  orbit_cmd->add_option("--overlay", overlay, "Composite (mean of all views) PNG");
  orbit_cmd->add_option("--frames", frames, "Directory for the individual views");

  auto* serve_cmd = app.add_subcommand("serve", "HTTP/WebSocket frame service (bind address from NVS_BIND, flags override)");
  add_common(serve_cmd, common);
  serve_cmd->add_option("--host", host, "Bind host");
  serve_cmd->add_option("--port", port, "Bind port (0 picks a free port)");
  serve_cmd->add_option("--threads", threads, "Render threads")->check(CLI::PositiveNumber);

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  add_common(grad_cmd, common);
  grad_cmd->add_option("--trials", trials, "Random points per op")->check(CLI::PositiveNumber);

  auto* interp_cmd = app.add_subcommand("interpolate", "Decode depth along a linear path between two objects' latent points");
  add_common(interp_cmd, common);
  interp_cmd->add_option("--scene-a", seed_a, "First object scene seed");
  interp_cmd->add_option("--scene-b", seed_b, "Second object scene seed");
  interp_cmd->add_option("--steps", steps, "Number of interpolation steps (including endpoints)");
  interp_cmd->add_option("--azimuth", azimuth, "View azimuth in degrees");
  interp_cmd->add_option("--elevation", elevation, "View elevation in degrees");
  interp_cmd->add_option("--out", out, "Output directory for numbered PNGs")->required();

  auto* gen_cmd = app.add_subcommand("gen-data", "Export procedural datasets (PNG, PFM depth, poses.txt, intrinsics.txt)");
  add_common(gen_cmd, common);
  gen_cmd->add_option("--out", out, "Output directory")->required();
  gen_cmd->add_option("--scenes", scene_count, "Number of scenes")->check(CLI::PositiveNumber);
  gen_cmd->add_option("--size", size, "Image size")->check(CLI::Range(8, 1024));
  gen_cmd->add_option("--kind", kind, "orbit | corridor");

  for (auto* sub : app.get_subcommands({})) sub->allow_extras();

  const std::vector<std::string> args(argv + 1, argv + argc);
  if (!args.empty() && args[0].rfind('-', 0) != 0 && !app.get_subcommand_no_throw(args[0])) {
    return report("unknown_subcommand", args[0], "unknown subcommand '" + args[0] + "'");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report("usage", offending_token(e.what(), args), e.what());
  }
  const auto extras = app.remaining(true);
  if (!extras.empty()) return report("unknown_flag", extras.front(), "unexpected argument '" + extras.front() + "'");

  try {
    if (*train_cmd) return cmd_train(common, out, variant, epochs);
    if (*eval_cmd) return cmd_eval(common, out);
    if (*sweep_cmd) return cmd_sweep(common, range, step, scene_count, grid, out);
    if (*render_cmd) return cmd_render(common, source, poses, out, depth);
    if (*orbit_cmd) return cmd_orbit(common, source, views, step, overlay, frames);
    if (*serve_cmd) return cmd_serve(common, host, port, threads);
    if (*grad_cmd) return cmd_gradcheck(common, trials);
    if (*interp_cmd) return cmd_interpolate(common, seed_a, seed_b, steps, azimuth, elevation, out);
    if (*gen_cmd) return cmd_gen_data(common, out, scene_count, size, kind);
  } catch (const CliError& e) {
    return report(e.kind, e.token, e.what());
  } catch (const ConfigError& e) {
    return report("config", e.token(), e.what());
  } catch (const std::exception& e) {
    return report("failed", "", e.what());
  }
  return report("usage", "", "no subcommand");
}
