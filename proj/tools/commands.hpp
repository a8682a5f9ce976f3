#pragma once

// Implementation of the lidarflow subcommands. Each command takes a plain
// options struct so it can be driven from tests without argument parsing.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lidarflow/checkpoint.hpp"
#include "lidarflow/eval.hpp"
#include "lidarflow/flow_io.hpp"
#include "lidarflow/lidar.hpp"
#include "lidarflow/network.hpp"
#include "lidarflow/synth.hpp"
#include "lidarflow/training.hpp"

#ifndef LIDARFLOW_VERSION
#define LIDARFLOW_VERSION "0.1.0"
#endif

namespace lidarflow::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitInput = 2;
inline constexpr int kExitNumerical = 3;

struct GridOptions {
  std::string preset = "desk";  // desk | paper
  int rows = 0, cols = 0, height = 0, width = 0;  // 0 keeps the preset value

  [[nodiscard]] GridSpec spec() const {
    GridSpec s;
    if (preset == "desk") {
      s = GridSpec::desk();
    } else if (preset == "paper") {
      s = GridSpec::paper();
    } else {
      throw ConfigError("unknown grid preset '" + preset + "' (expected desk or paper)");
    }
    if (rows) s.rows = rows;
    if (cols) s.cols = cols;
    if (height) s.height = height;
    if (width) s.width = width;
    s.validate();
    return s;
  }
};

struct NetOptions {
  GridOptions grid;
  int base_channels = 0;  // 0 keeps the preset value
  double range_scale = 1.0 / 40.0;
  double range_shift = -1.0;
  double refl_scale = 1.0;
  double refl_shift = -0.5;

  [[nodiscard]] NetworkConfig config() const {
    NetworkConfig c = grid.preset == "paper" ? NetworkConfig::paper() : NetworkConfig::desk();
    c.spec = grid.spec();
    if (base_channels) c.base_channels = base_channels;
    c.input_scale = {range_scale, refl_scale};
    c.input_shift = {range_shift, refl_shift};
    c.validate();
    return c;
  }
};

/// Dense flow from .flo or KITTI .png, chosen by extension.
inline FlowField read_flow_any(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".flo") return read_flo(path);
  if (ext == ".png") return read_kitti_png(path);
  throw FormatError(path.string() + ": unknown flow file extension (expected .flo or .png)");
}

/// Range image from an LRI1 file, or by projecting a raw scan (.bin).
inline RangeImage read_range_any(const fs::path& path, const GridSpec& spec) {
  if (path.extension() == ".lri") return load_lri(path);
  return project_to_range_image(crop_fov(load_point_cloud(path), spec), spec);
}

inline void ensure_parent(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

// ------------------------------------------------------------------ project

inline int cmd_project(const fs::path& scan, const fs::path& out, const GridOptions& grid) {
  const auto spec = grid.spec();
  ensure_parent(out);
  save_lri(out, project_to_range_image(crop_fov(load_point_cloud(scan), spec), spec));
  return kExitOk;
}

// ------------------------------------------------------------------ make-gt

/// Sparse lidar-grid ground truth, written as a 16-bit KITTI PNG of N x M.
inline int cmd_make_gt(const fs::path& scan, const fs::path& flow, const fs::path& out, const GridOptions& grid) {
  const auto spec = grid.spec();
  const auto dense = read_flow_any(flow);
  const auto cloud = crop_fov(load_point_cloud(scan), spec);
  ensure_parent(out);
  write_kitti_png(out, project_flow_to_lidar(cloud, dense, camera_for_grid(spec), spec));
  return kExitOk;
}

// ------------------------------------------------------------------ dataset layout

/// Files of one sample below a dataset root.
struct SamplePaths {
  fs::path scan_t, scan_t1, lri_t, lri_t1, flow, gt_occ, gt_noc, obj_map, gt_lidar;

  static SamplePaths under(const fs::path& root, const std::string& id) {
    return SamplePaths{root / "scans" / (id + "_t.bin"),   root / "scans" / (id + "_t1.bin"),
                       root / "lri" / (id + "_t.lri"),     root / "lri" / (id + "_t1.lri"),
                       root / "flow" / (id + ".flo"),      root / "gt" / "flow_occ" / (id + ".png"),
                       root / "gt" / "flow_noc" / (id + ".png"), root / "gt" / "obj_map" / (id + ".png"),
                       root / "gt_lidar" / (id + ".png")};
  }
};

inline void write_sample(const fs::path& root, const TrainSample& s, const GridSpec& spec) {
  const auto p = SamplePaths::under(root, s.id);
  for (const auto& f : {p.scan_t, p.lri_t, p.flow, p.gt_occ, p.gt_noc, p.obj_map, p.gt_lidar}) ensure_parent(f);
  save_point_cloud(p.scan_t, range_image_to_cloud(s.xt, spec));
  save_point_cloud(p.scan_t1, range_image_to_cloud(s.xt1, spec));
  save_lri(p.lri_t, s.xt);
  save_lri(p.lri_t1, s.xt1);
  write_flo(p.flow, s.gt_dense);
  write_kitti_png(p.gt_occ, s.gt_dense);
  FlowField noc = s.gt_dense;
  noc.valid = s.noc;
  write_kitti_png(p.gt_noc, noc);
  write_object_map(p.obj_map, s.gt_dense.height, s.gt_dense.width, s.fg);
  write_kitti_png(p.gt_lidar, s.gt_lidar);
}

inline TrainSample read_sample(const fs::path& root, const std::string& id) {
  const auto p = SamplePaths::under(root, id);
  TrainSample s;
  s.id = id;
  s.xt = load_lri(p.lri_t);
  s.xt1 = load_lri(p.lri_t1);
  s.gt_dense = read_flo(p.flow);
  s.gt_lidar = read_kitti_png(p.gt_lidar);
  return s;
}

inline std::vector<ManifestEntry> split_entries(const fs::path& root, const std::string& split) {
  std::vector<ManifestEntry> out;
  for (auto& e : read_manifest(root / "manifest.txt"))
    if (split.empty() || e.split == split) out.push_back(std::move(e));
  if (out.empty()) throw ConfigError("no samples in split '" + split + "' of " + (root / "manifest.txt").string());
  return out;
}

/// key=value lines describing a run; readable back through --config.
using RunRecord = std::vector<std::pair<std::string, std::string>>;

inline void write_run_record(const fs::path& path, const RunRecord& rec) {
  ensure_parent(path);
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  os << "# lidarflow " << LIDARFLOW_VERSION << '\n';
  for (const auto& [k, v] : rec) os << k << '=' << v << '\n';
}

template <typename V>
std::string str(const V& v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline RunRecord grid_record(const GridOptions& g) {
  return {{"grid", g.preset}, {"rows", str(g.rows)}, {"cols", str(g.cols)}, {"height", str(g.height)},
          {"width", str(g.width)}};
}

inline RunRecord net_record(const NetOptions& n) {
  auto r = grid_record(n.grid);
  r.insert(r.end(), {{"base", str(n.base_channels)},
                     {"range-scale", str(n.range_scale)},
                     {"range-shift", str(n.range_shift)},
                     {"refl-scale", str(n.refl_scale)},
                     {"refl-shift", str(n.refl_shift)}});
  return r;
}

// ------------------------------------------------------------------ synth

struct SynthOptions {
  fs::path out;
  GridOptions grid;
  int n_train = 2, n_val = 0, n_test = 0;
  std::uint64_t seed = 0;
  int objects = 2;
  double background_max = 3.0;
  double object_translation_max = 4.0;
  double object_affine_max = 0.02;
  double dropout = 0.02;
};

inline SceneConfig scene_config(const SynthOptions& o, std::uint64_t seed) {
  SceneConfig c;
  c.spec = o.grid.spec();
  c.n_objects = o.objects;
  c.background_max = o.background_max;
  c.object_translation_max = o.object_translation_max;
  c.object_affine_max = o.object_affine_max;
  c.dropout = o.dropout;
  c.seed = seed;
  c.validate();
  return c;
}

inline int cmd_synth(const SynthOptions& o) {
  scene_config(o, o.seed);  // validate before touching the disk
  fs::create_directories(o.out);
  auto rec = grid_record(o.grid);
  rec.insert(rec.end(), {{"objects", str(o.objects)},
                         {"background-max", str(o.background_max)},
                         {"object-translation-max", str(o.object_translation_max)},
                         {"object-affine-max", str(o.object_affine_max)},
                         {"dropout", str(o.dropout)},
                         {"seed", str(o.seed)}});
  write_run_record(o.out / "synth.txt", rec);
  const auto manifest = make_manifest(o.n_train, o.n_val, o.n_test, o.seed);
  write_manifest(o.out / "manifest.txt", manifest);
  const auto spec = o.grid.spec();
  for (const auto& e : manifest) write_sample(o.out, generate_sample(scene_config(o, e.seed)), spec);
  return kExitOk;
}

// ------------------------------------------------------------------ train

struct TrainOptions {
  fs::path data;
  std::string split = "train";
  fs::path out;
  NetOptions net;
  std::int64_t iters = 2000;
  int batch = 2;
  double lr = 1e-3;
  std::int64_t lr_hold = 150000;
  std::int64_t lr_half_every = 60000;
  double flip = 0.5;
  double clip = 0.0;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  // 0: final checkpoint only
  int threads = 0;
  std::string precision = "float";
  fs::path resume;
  bool quiet = false;
};

template <typename T>
int run_training(const TrainOptions& o, const NetworkPlan& plan, std::vector<TrainSample> data, std::ostream& log) {
  TrainConfig tc;
  tc.total_iters = o.iters;
  tc.batch_size = o.batch;
  tc.lr0 = o.lr;
  tc.lr_hold = o.lr_hold;
  tc.lr_half_every = o.lr_half_every;
  tc.flip_prob = o.flip;
  tc.grad_clip = o.clip;
  tc.seed = o.seed;
  tc.threads = o.threads;
  tc.validate();

  TrainState<T> state;
  if (!o.resume.empty()) {
    state.params = load_checkpoint<T>(o.resume, plan, &state.adam);
    state.iter = state.adam.empty() ? 0 : state.adam.front().t;
  } else {
    state = TrainState<T>::fresh(init_params<T>(plan, o.seed));
  }
  std::ofstream csv(o.out / "loss.csv", state.iter > 0 ? std::ios::app : std::ios::trunc);
  if (!csv) throw FormatError("cannot write " + (o.out / "loss.csv").string());
  if (state.iter == 0) write_loss_csv_header(csv);

  train<T>(plan, data, tc, state, [&](const LossRecord& r, const TrainState<T>& s) {
    write_loss_csv_row(csv, r);
    if (!o.quiet && (r.iter % 50 == 0 || s.iter == tc.total_iters)) {
      log << "iter " << r.iter << "  lr " << r.lr << "  loss " << r.total << "  final-site " << r.site.back() << '\n';
    }
    if (o.checkpoint_every > 0 && s.iter % o.checkpoint_every == 0) {
      save_checkpoint(o.out / "checkpoints" / ("iter_" + std::to_string(s.iter) + ".lfw"), s.params, &s.adam);
    }
  });
  csv.flush();
  save_checkpoint(o.out / "final.lfw", state.params, &state.adam);
  return kExitOk;
}

inline int cmd_train(const TrainOptions& o, std::ostream& log = std::cout) {
  const auto cfg = o.net.config();
  const auto plan = make_plan(cfg);
  fs::create_directories(o.out / "checkpoints");
  auto rec = net_record(o.net);
  rec.insert(rec.end(), {{"data", o.data.string()},
                         {"split", o.split},
                         {"iters", str(o.iters)},
                         {"batch", str(o.batch)},
                         {"lr", str(o.lr)},
                         {"lr-hold", str(o.lr_hold)},
                         {"lr-half-every", str(o.lr_half_every)},
                         {"flip", str(o.flip)},
                         {"clip", str(o.clip)},
                         {"seed", str(o.seed)},
                         {"precision", o.precision},
                         {"version", LIDARFLOW_VERSION}});
  write_run_record(o.out / "run.txt", rec);

  std::vector<TrainSample> data;
  for (const auto& e : split_entries(o.data, o.split)) {
    auto s = read_sample(o.data, e.id);
    s.targets = build_targets(s, plan);
    data.push_back(std::move(s));
  }
  if (o.precision == "float") return run_training<float>(o, plan, std::move(data), log);
  if (o.precision == "double") return run_training<double>(o, plan, std::move(data), log);
  throw ConfigError("precision must be float or double");
}

// ------------------------------------------------------------------ infer

struct InferOptions {
  NetOptions net;
  fs::path checkpoint;
  bool zero_stub = false;  // emit zero flow without a network
  // Single pair mode.
  fs::path scan_t, scan_t1, out, color;
  // Dataset mode: every sample of `split` under `data`, written to out_dir/<id>.flo.
  fs::path data, out_dir;
  std::string split = "test";
};

inline FlowField infer_pair(const InferOptions& o, const NetworkPlan& plan, const NetworkParams<float>* params,
                            const RangeImage& xt, const RangeImage& xt1) {
  if (o.zero_stub) return FlowField(plan.final_h, plan.final_w);
  return predict_flow(plan, *params, xt, xt1);
}

inline int cmd_infer(const InferOptions& o) {
  const auto cfg = o.net.config();
  const auto plan = make_plan(cfg);
  std::optional<NetworkParams<float>> params;
  if (!o.zero_stub) {
    if (o.checkpoint.empty()) throw ConfigError("infer needs --checkpoint (or --zero-stub)");
    params = load_checkpoint<float>(o.checkpoint, plan);
  }
  const auto* p = params ? &*params : nullptr;
  if (!o.data.empty()) {
    if (o.out_dir.empty()) throw ConfigError("dataset mode needs --out-dir");
    fs::create_directories(o.out_dir);
    for (const auto& e : split_entries(o.data, o.split)) {
      const auto sp = SamplePaths::under(o.data, e.id);
      write_flo(o.out_dir / (e.id + ".flo"), infer_pair(o, plan, p, load_lri(sp.lri_t), load_lri(sp.lri_t1)));
    }
    return kExitOk;
  }
  if (o.scan_t.empty() || o.scan_t1.empty() || o.out.empty()) {
    throw ConfigError("infer needs --scan-t, --scan-t1 and --out (or --data and --out-dir)");
  }
  const auto flow = infer_pair(o, plan, p, read_range_any(o.scan_t, cfg.spec), read_range_any(o.scan_t1, cfg.spec));
  ensure_parent(o.out);
  write_flo(o.out, flow);
  const fs::path color = o.color.empty() ? fs::path(o.out).replace_extension(".ppm") : o.color;
  write_ppm(color, flow_to_color(flow));
  return kExitOk;
}

// ------------------------------------------------------------------ eval

struct EvalOptions {
  fs::path pred_dir;
  fs::path gt_dir;  // holds flow_occ/, optional flow_noc/ and obj_map/
  fs::path csv;
};

/// Scores every prediction in `pred_dir` (<id>.flo or <id>.png) against
/// gt_dir/flow_occ/<id>.png, with flow_noc/ and obj_map/ used when present.
inline EvalReport evaluate_dirs(const fs::path& pred_dir, const fs::path& gt_dir) {
  if (!fs::is_directory(pred_dir)) throw FormatError(pred_dir.string() + ": not a directory");
  std::vector<fs::path> preds;
  for (const auto& e : fs::directory_iterator(pred_dir)) {
    const auto ext = e.path().extension();
    if (ext == ".flo" || ext == ".png") preds.push_back(e.path());
  }
  std::sort(preds.begin(), preds.end());
  if (preds.empty()) throw FormatError(pred_dir.string() + ": no predictions");
  EvalReport total;
  for (const auto& p : preds) {
    const auto id = p.stem().string();
    const auto gt = read_kitti_png(gt_dir / "flow_occ" / (id + ".png"));
    std::optional<FlowField> noc;
    if (fs::exists(gt_dir / "flow_noc" / (id + ".png"))) noc = read_kitti_png(gt_dir / "flow_noc" / (id + ".png"));
    std::vector<std::uint8_t> fg;
    if (fs::exists(gt_dir / "obj_map" / (id + ".png"))) {
      int h = 0, w = 0;
      fg = read_object_map(gt_dir / "obj_map" / (id + ".png"), h, w);
      if (h != gt.height || w != gt.width) throw ShapeError(id + ": object map dims differ from ground truth");
    }
    total += evaluate_frame(read_flow_any(p), gt, EvalMasks::from(gt, noc ? &*noc : nullptr, fg));
  }
  return total;
}

inline int cmd_eval(const EvalOptions& o, std::ostream& out = std::cout) {
  const auto report = evaluate_dirs(o.pred_dir, o.gt_dir);
  write_report_table(out, report);
  if (!o.csv.empty()) {
    ensure_parent(o.csv);
    std::ofstream os(o.csv);
    if (!os) throw FormatError("cannot write " + o.csv.string());
    write_report_csv(os, report);
  }
  return kExitOk;
}

// ------------------------------------------------------------------ viz

struct VizOptions {
  fs::path flow;
  fs::path out;
  double max_mag = 0.0;  // 0: robust automatic scale
};

inline int cmd_viz(const VizOptions& o) {
  const auto flow = read_flow_any(o.flow);
  const auto img = flow_to_color(flow, o.max_mag > 0.0 ? std::optional<double>(o.max_mag) : std::nullopt);
  ensure_parent(o.out);
  if (o.out.extension() == ".png") {
    write_png_rgb(o.out, img);
  } else {
    write_ppm(o.out, img);
  }
  return kExitOk;
}

}  // namespace lidarflow::cli
