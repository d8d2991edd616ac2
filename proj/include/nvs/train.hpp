#pragma once

// Training loop and evaluation protocols: random orbit pairs from a pool of
// procedural scenes, L1 photometric loss on the warped source, validation on
// held-out scenes against the copy-source baseline.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nvs/autodiff.hpp"
#include "nvs/config.hpp"
#include "nvs/metrics.hpp"
#include "nvs/optim.hpp"
#include "nvs/scenes.hpp"
#include "nvs/tae.hpp"
#include "nvs/warp.hpp"

namespace nvs::train {

/// Validation scene seeds start here; training seeds stay below it.
inline constexpr std::uint64_t kValidationSeedBase = 1'000'000;

struct TrainConfig {
  TaeConfig model;
  std::size_t scene_count = 2000;
  std::size_t validation_scenes = 16;
  std::size_t validation_pairs = 64;
  std::size_t pairs_per_epoch = 2048;
  std::size_t epochs = 12;
  std::size_t batch_size = 16;
  ad::AdamConfig adam{1e-3};  // toy-scale rate; the optimizer default stays 1e-4
  std::size_t checkpoint_interval = 4;  // epochs; 0 disables intermediate checkpoints
  double azimuth_step = 20.0;
  double max_azimuth_separation = 40.0;
  std::uint64_t seed = 1;

  void validate() const {
    model.validate();
    auto positive = [](std::size_t v, const char* key) {
      if (v == 0) throw ConfigError(key, std::string(key) + " must be positive");
    };
    positive(scene_count, "scene_count");
    positive(validation_scenes, "validation_scenes");
    positive(validation_pairs, "validation_pairs");
    positive(pairs_per_epoch, "pairs_per_epoch");
    positive(epochs, "epochs");
    positive(batch_size, "batch_size");
    if (!(adam.lr > 0)) throw ConfigError("lr", "lr must be positive");
    if (!(azimuth_step > 0 && max_azimuth_separation >= 0)) throw ConfigError("azimuth_step", "bad azimuth protocol");
    if (scene_count >= kValidationSeedBase) throw ConfigError("scene_count", "scene_count would overlap validation seeds");
  }

  /// Reads every known key from `kv` (model keys included).
  void read(KeyValues& kv) {
    model.read(kv);
    kv.read("scene_count", scene_count);
    kv.read("validation_scenes", validation_scenes);
    kv.read("validation_pairs", validation_pairs);
    kv.read("pairs_per_epoch", pairs_per_epoch);
    kv.read("epochs", epochs);
    kv.read("batch_size", batch_size);
    kv.read("lr", adam.lr);
    kv.read("beta1", adam.beta1);
    kv.read("beta2", adam.beta2);
    kv.read("adam_eps", adam.eps);
    kv.read("checkpoint_interval", checkpoint_interval);
    kv.read("azimuth_step", azimuth_step);
    kv.read("max_azimuth_separation", max_azimuth_separation);
    kv.read("seed", seed);
  }

  static TrainConfig load(const std::filesystem::path& path) {
    KeyValues kv = KeyValues::load(path);
    TrainConfig c;
    c.read(kv);
    kv.require_all_used();
    c.validate();
    return c;
  }

  scenes::OrbitProtocol protocol() const {
    scenes::OrbitProtocol p;
    for (double a = 0; a < 360.0 - 1e-9; a += azimuth_step) p.azimuths_deg.push_back(a);
    for (int e = 0; e <= 30; e += 10) p.elevations_deg.push_back(e);
    p.max_azimuth_separation_deg = max_azimuth_separation;
    p.image_size = model.image_size;
    return p;
  }
};

/// One training or validation example.
struct Example {
  scenes::ViewSample source;
  scenes::ViewSample target;
  RigidTransform t_st;  // source -> target
  std::uint64_t scene_seed = 0;
};

inline Example make_example(const scenes::SceneSpec& spec, const RigidTransform& source_pose,
                            const RigidTransform& target_pose, const CameraIntrinsics& k) {
  Example e;
  e.source = scenes::raycast(spec, source_pose, k);
  e.target = scenes::raycast(spec, target_pose, k);
  e.t_st = relative_target_to_source(target_pose, source_pose);  // source-camera coords -> target-camera coords
  e.scene_seed = spec.seed;
  return e;
}

/// Random orbit pair on the protocol grid. With `nonzero` the zero-separation
/// pair is excluded.
inline Example sample_orbit_example(std::uint64_t scene_seed, const scenes::OrbitProtocol& p, std::mt19937_64& rng,
                                    bool nonzero) {
  const auto spec = scenes::random_object_scene(scene_seed);
  const std::size_t na = p.azimuths_deg.size();
  std::uniform_int_distribution<std::size_t> pick_e(0, p.elevations_deg.size() - 1), pick_a(0, na - 1);
  const std::size_t e = pick_e(rng), s = pick_a(rng);
  std::vector<std::size_t> targets;
  for (std::size_t t = 0; t < na; ++t) {
    const double d = std::abs(scenes::wrap_degrees(p.azimuths_deg[t] - p.azimuths_deg[s]));
    if (d <= p.max_azimuth_separation_deg + 1e-9 && !(nonzero && d < 1e-9)) targets.push_back(t);
  }
  std::uniform_int_distribution<std::size_t> pick_t(0, targets.size() - 1);
  const std::size_t t = targets[pick_t(rng)];
  const auto k = CameraIntrinsics::centered(p.image_size);
  return make_example(spec, scenes::orbit_pose(p.azimuths_deg[s], p.elevations_deg[e], p.radius),
                      scenes::orbit_pose(p.azimuths_deg[t], p.elevations_deg[e], p.radius), k);
}

/// Fixed held-out validation pairs (non-zero separations only).
inline std::vector<Example> validation_set(const TrainConfig& cfg) {
  std::mt19937_64 rng(cfg.seed ^ 0x5eed5eed5eedull);
  const auto p = cfg.protocol();
  std::vector<Example> out;
  for (std::size_t i = 0; i < cfg.validation_pairs; ++i) {
    out.push_back(sample_orbit_example(kValidationSeedBase + i % cfg.validation_scenes, p, rng, true));
  }
  return out;
}

template <typename T>
struct Batch {
  ad::Tensor<T> sources;
  ad::Tensor<T> targets;
  std::vector<RigidTransform> t_st;
};

template <typename T>
Batch<T> make_batch(const std::vector<Example>& examples, std::size_t begin, std::size_t end) {
  std::vector<const Image*> src, tgt;
  Batch<T> b;
  for (std::size_t i = begin; i < end; ++i) {
    src.push_back(&examples[i].source.image);
    tgt.push_back(&examples[i].target.image);
    b.t_st.push_back(examples[i].t_st);
  }
  b.sources = images_to_tensor<T>(src);
  b.targets = images_to_tensor<T>(tgt);
  return b;
}

/// Converts an Image to the model's channel count (gray = channel mean).
inline Image to_model_channels(const Image& im, int channels) {
  if (im.channels == channels) return im;
  if (channels != 1 || im.channels != 3) throw std::invalid_argument("unsupported channel conversion");
  Image g(im.width, im.height, 1);
  for (int y = 0; y < im.height; ++y)
    for (int x = 0; x < im.width; ++x) g.at(x, y, 0) = (im.at(x, y, 0) + im.at(x, y, 1) + im.at(x, y, 2)) / 3.0f;
  return g;
}

struct ValidationScores {
  double l1 = 0.0;          // model
  double baseline_l1 = 0.0;  // copy-source
  double depth_l1 = 0.0;    // mean |depth - oracle| on visible foreground; NaN for no_depth
};

/// Mean per-pair L1 over the validation set (batched inference, no tape).
template <typename T>
ValidationScores validate(const TaeModel<T>& model, const std::vector<Example>& val, std::size_t batch_size = 16) {
  const auto k = CameraIntrinsics::centered(model.config().image_size);
  ValidationScores s;
  double depth_sum = 0.0;
  std::size_t depth_n = 0;
  for (std::size_t b0 = 0; b0 < val.size(); b0 += batch_size) {
    const std::size_t b1 = std::min(val.size(), b0 + batch_size);
    const auto batch = make_batch<T>(val, b0, b1);
    const auto out = render_batch(model, batch.sources, batch.t_st, k);
    for (std::size_t i = b0; i < b1; ++i) {
      const Image pred = tensor_to_image(out.image, i - b0);
      s.l1 += metrics::l1_image(pred, val[i].target.image);
      s.baseline_l1 += metrics::l1_image(val[i].source.image, val[i].target.image);
      if (out.depth.defined()) {
        const auto mask = scenes::visibility_mask(val[i].source, val[i].target, model.config().d_max);
        auto d = out.depth.data();
        const std::size_t HW = std::size_t(k.width) * k.height;
        for (std::size_t p = 0; p < HW; ++p) {
          const double truth = val[i].target.depth.values[p];
          if (!mask[p] || truth >= model.config().d_max) continue;
          depth_sum += std::abs(double(d[(i - b0) * HW + p]) - truth);
          ++depth_n;
        }
      }
    }
  }
  s.l1 /= double(val.size());
  s.baseline_l1 /= double(val.size());
  s.depth_l1 = depth_n ? depth_sum / double(depth_n) : std::nan("");
  return s;
}

struct EpochLog {
  std::size_t epoch = 0;
  double train_l1 = 0.0;
  double val_l1 = 0.0;
  double baseline_l1 = 0.0;
  double depth_l1 = 0.0;
};

struct TrainResult {
  TaeModel<float> model;
  std::vector<EpochLog> log;
  std::vector<std::filesystem::path> checkpoints;
};

inline std::string format_log_csv(const std::vector<EpochLog>& log) {
  std::ostringstream os;
  os << "epoch,train_l1,val_l1,baseline_l1,depth_l1\n";
  os << std::setprecision(9);
  for (const auto& e : log) {
    os << e.epoch << ',' << e.train_l1 << ',' << e.val_l1 << ',' << e.baseline_l1 << ',' << e.depth_l1 << '\n';
  }
  return os.str();
}

class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One optimizer step on a batch; returns the batch L1 before the update.
/// Non-finite model outputs or loss abort with NonFiniteLoss.
inline double train_step(TaeModel<float>& model, const Batch<float>& batch, const CameraIntrinsics& k, const ad::AdamConfig& adam) {
  auto fail = [&](const std::string& what) {
    return NonFiniteLoss("train: non-finite " + what + " (optimizer step " + std::to_string(model.params().step_count()) + ")");
  };
  ad::Tape tape;
  const auto pred = model.forward(batch.sources, batch.t_st);
  for (float v : pred.data())
    if (!std::isfinite(v)) throw fail("model output");
  const auto out = render_prediction(model.config(), batch.sources, pred, batch.t_st, k);
  const auto loss = ad::l1_loss(out.image, batch.targets);
  const double lv = loss.item();
  if (!std::isfinite(lv)) throw fail("loss");
  tape.backward(loss);
  ad::adam_step(model.params(), adam);
  return lv;
}

struct TrainHooks {
  /// Called after every epoch; returning false stops training early.
  std::function<bool(const EpochLog&)> on_epoch;
  std::ostream* progress = nullptr;
};

/// Runs training. When `out_dir` is non-empty, writes metrics.csv, periodic
/// checkpoints and model.nvsc (+ sidecars) there.
inline TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir = {}, const TrainHooks& hooks = {}) {
  cfg.validate();
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  TrainResult result{TaeModel<float>(cfg.model, cfg.seed * 7919 + 1), {}, {}};
  auto& model = result.model;
  const auto protocol = cfg.protocol();
  const auto k = CameraIntrinsics::centered(cfg.model.image_size);
  std::vector<Example> val = validation_set(cfg);
  for (auto& e : val) {
    e.source.image = to_model_channels(e.source.image, cfg.model.image_channels);
    e.target.image = to_model_channels(e.target.image, cfg.model.image_channels);
  }
  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::uint64_t> pick_scene(0, cfg.scene_count - 1);
  const auto t_start = std::chrono::steady_clock::now();

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t steps = 0;
    for (std::size_t done = 0; done < cfg.pairs_per_epoch; done += cfg.batch_size) {
      const std::size_t bs = std::min(cfg.batch_size, cfg.pairs_per_epoch - done);
      std::vector<Example> ex;
      for (std::size_t i = 0; i < bs; ++i) {
        ex.push_back(sample_orbit_example(pick_scene(rng), protocol, rng, false));
        ex.back().source.image = to_model_channels(ex.back().source.image, cfg.model.image_channels);
        ex.back().target.image = to_model_channels(ex.back().target.image, cfg.model.image_channels);
      }
      const auto batch = make_batch<float>(ex, 0, ex.size());
      double lv = 0.0;
      try {
        lv = train_step(model, batch, k, cfg.adam);
      } catch (const NonFiniteLoss& e) {
        throw NonFiniteLoss(std::string(e.what()) + " at epoch " + std::to_string(epoch) + ", step " + std::to_string(steps));
      }
      loss_sum += lv;
      ++steps;
    }
    const auto vs = validate(model, val);
    EpochLog log{epoch, loss_sum / double(steps), vs.l1, vs.baseline_l1, vs.depth_l1};
    result.log.push_back(log);
    if (hooks.progress) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
      *hooks.progress << "epoch " << epoch << "/" << cfg.epochs << "  train_l1 " << log.train_l1 << "  val_l1 " << log.val_l1
                      << "  baseline " << log.baseline_l1 << "  depth_l1 " << log.depth_l1 << "  (" << std::fixed
                      << std::setprecision(1) << secs << " s)" << std::defaultfloat << std::setprecision(6) << std::endl;
    }
    if (!out_dir.empty()) {
      std::ofstream(out_dir / "metrics.csv") << format_log_csv(result.log);
      if (cfg.checkpoint_interval && epoch % cfg.checkpoint_interval == 0 && epoch != cfg.epochs) {
        std::ostringstream name;
        name << "checkpoint_epoch" << std::setw(4) << std::setfill('0') << epoch << ".nvsc";
        save_model(out_dir / name.str(), model);
        result.checkpoints.push_back(out_dir / name.str());
      }
    }
    if (hooks.on_epoch && !hooks.on_epoch(log)) break;
  }
  if (!out_dir.empty()) {
    save_model(out_dir / "model.nvsc", model);
    result.checkpoints.push_back(out_dir / "model.nvsc");
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

struct SweepRow {
  double angle = 0.0;
  double l1 = 0.0;
  double ssim = 0.0;
};

/// Azimuth sweep around a source view: for each offset in
/// [-range, range] with the given step, synthesize the target and compare it
/// against the raycast ground truth. Averaged over all given source views.
template <typename T>
std::vector<SweepRow> evaluate_sweep(const TaeModel<T>& model, const std::vector<scenes::SceneSpec>& specs,
                                     const std::vector<std::pair<double, double>>& source_views, double range, double step,
                                     double radius = 3.0) {
  if (!(step > 0) || !(range >= 0)) throw std::invalid_argument("evaluate_sweep: need step > 0 and range >= 0");
  if (specs.empty() || source_views.empty()) throw std::invalid_argument("evaluate_sweep: nothing to evaluate");
  const int S = model.config().image_size;
  const auto k = CameraIntrinsics::centered(S);
  const long count = long(std::floor(2 * range / step + 1e-9)) + 1;
  std::vector<SweepRow> rows(static_cast<std::size_t>(count));
  for (long i = 0; i < count; ++i) rows[std::size_t(i)].angle = -range + double(i) * step;
  std::size_t n = 0;
  for (const auto& spec : specs)
    for (const auto& [az, el] : source_views) {
      const auto src_pose = scenes::orbit_pose(az, el, radius);
      const auto src = scenes::raycast(spec, src_pose, k);
      const Image src_img = to_model_channels(src.image, model.config().image_channels);
      std::vector<Example> ex;
      for (const auto& row : rows) {
        Example e;
        e.source.image = src_img;
        const auto tgt_pose = scenes::orbit_pose(az + row.angle, el, radius);
        e.target = scenes::raycast(spec, tgt_pose, k);
        e.target.image = to_model_channels(e.target.image, model.config().image_channels);
        e.t_st = relative_target_to_source(tgt_pose, src_pose);
        ex.push_back(std::move(e));
      }
      for (std::size_t b0 = 0; b0 < ex.size(); b0 += 16) {
        const std::size_t b1 = std::min(ex.size(), b0 + 16);
        const auto batch = make_batch<T>(ex, b0, b1);
        const auto out = render_batch(model, batch.sources, batch.t_st, k);
        for (std::size_t i = b0; i < b1; ++i) {
          const Image pred = tensor_to_image(out.image, i - b0);
          rows[i].l1 += metrics::l1_image(pred, ex[i].target.image);
          rows[i].ssim += metrics::ssim(pred, ex[i].target.image);
        }
      }
      ++n;
    }
  for (auto& r : rows) {
    r.l1 /= double(n);
    r.ssim /= double(n);
  }
  return rows;
}

/// Source views of the standard sweep: one per training elevation, spread
/// in azimuth.
inline std::vector<std::pair<double, double>> default_sweep_views() { return {{0, 0}, {120, 10}, {240, 20}, {60, 30}}; }

/// Held-out scenes used by sweeps and other evaluations.
inline std::vector<scenes::SceneSpec> held_out_scenes(std::size_t count) {
  std::vector<scenes::SceneSpec> specs;
  for (std::size_t i = 0; i < count; ++i) specs.push_back(scenes::random_object_scene(kValidationSeedBase + i));
  return specs;
}

inline std::string format_sweep_csv(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "angle,l1,ssim\n" << std::setprecision(9);
  for (const auto& r : rows) os << r.angle << ',' << r.l1 << ',' << r.ssim << '\n';
  return os.str();
}

/// Mean L1 at off-grid angles divided by mean L1 at angles on the training
/// grid (multiples of `grid_step`).
inline double snapping_ratio(const std::vector<SweepRow>& rows, double grid_step) {
  double on = 0, off = 0;
  std::size_t n_on = 0, n_off = 0;
  for (const auto& r : rows) {
    const double q = r.angle / grid_step;
    if (std::abs(q - std::round(q)) < 1e-9) {
      on += r.l1;
      ++n_on;
    } else {
      off += r.l1;
      ++n_off;
    }
  }
  if (!n_on || !n_off) throw std::invalid_argument("snapping_ratio: sweep needs both grid and off-grid angles");
  return (off / double(n_off)) / (on / double(n_on));
}

struct DepthFlowScores {
  double flow_l1 = 0.0;
  double flow_acc = 0.0;
  double depth_l1 = 0.0;  // NaN when the model predicts no depth
  double depth_acc = 0.0;
};

/// Flow and depth accuracy against the scene oracle on mutually visible
/// pixels. `predict(example)` returns the synthesis to score; its depth may
/// be empty (no depth prediction).
template <typename Predict>
DepthFlowScores evaluate_depth_flow(const std::vector<Example>& val, const CameraIntrinsics& k, double d_max, Predict&& predict) {
  if (val.empty()) throw std::invalid_argument("evaluate_depth_flow: empty validation set");
  DepthFlowScores s;
  std::size_t nf = 0, nd = 0;
  for (const auto& e : val) {
    if (e.target.depth.values.empty() || e.source.depth.values.empty()) {
      throw std::invalid_argument("evaluate_depth_flow: validation example lacks oracle depth");
    }
    const Synthesis syn = predict(e);
    const auto truth_flow = depth_to_flow(e.target.depth, k, invert(e.t_st));
    auto mask = scenes::visibility_mask(e.source, e.target, d_max);
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = mask[i] && truth_flow.valid[i];
    if (std::none_of(mask.begin(), mask.end(), [](auto m) { return m != 0; })) continue;
    const auto fs = metrics::flow_scores(syn.flow, truth_flow, mask);
    s.flow_l1 += fs.l1;
    s.flow_acc += fs.acc;
    ++nf;
    if (!syn.depth.values.empty()) {
      const auto ds = metrics::depth_scores(syn.depth, e.target.depth, mask);
      s.depth_l1 += ds.l1;
      s.depth_acc += ds.acc;
      ++nd;
    }
  }
  if (!nf) throw std::invalid_argument("evaluate_depth_flow: no visible pixels in validation set");
  s.flow_l1 /= double(nf);
  s.flow_acc /= double(nf);
  if (nd) {
    s.depth_l1 /= double(nd);
    s.depth_acc /= double(nd);
  } else {
    s.depth_l1 = s.depth_acc = std::nan("");
  }
  return s;
}

template <typename T>
DepthFlowScores evaluate_depth_flow(const TaeModel<T>& model, const std::vector<Example>& val) {
  const auto k = CameraIntrinsics::centered(model.config().image_size);
  return evaluate_depth_flow(val, k, model.config().d_max, [&](const Example& e) {
    return synthesize(model, to_model_channels(e.source.image, model.config().image_channels), e.t_st, k);
  });
}

/// Prediction that uses the scene oracle's target depth (upper bound for
/// depth-guided synthesis).
inline Synthesis oracle_synthesis(const Example& e, const CameraIntrinsics& k) {
  Synthesis s;
  s.depth = e.target.depth;
  s.flow = depth_to_flow(e.target.depth, k, invert(e.t_st));
  s.image = warp_image(e.source.image, s.flow);
  return s;
}

}  // namespace nvs::train
