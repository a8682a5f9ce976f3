#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>

#include "commands.hpp"

namespace {

using namespace lidarflow;
using namespace lidarflow::cli;

CLI::App* subcommand(CLI::App& app, const std::string& name, const std::string& help) {
  auto* sub = app.add_subcommand(name, help);
  sub->add_option("--config", "key=value file; command-line flags take precedence");
  return sub;
}

// CLI11 reads config files only for the top-level app, so a subcommand's
// --config is expanded here: its known keys become flags placed ahead of the
// user's own, and the last occurrence of an option wins.
std::vector<std::string> expand_config(const CLI::App& app, std::vector<std::string> args) {
  if (args.empty()) return args;
  const auto* sub = app.get_subcommand_no_throw(args.front());
  if (sub == nullptr) return args;
  std::string file;
  std::vector<std::string> rest;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) {
      file = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      file = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  if (file.empty()) return args;
  std::ifstream is(file);
  if (!is) throw lidarflow::ConfigError("cannot open config file " + file);
  std::vector<std::string> out{args.front()};
  std::string line;
  while (std::getline(is, line)) {
    line = CLI::detail::trim_copy(line);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw lidarflow::ConfigError(file + ": expected key=value, got '" + line + "'");
    const auto key = "--" + CLI::detail::trim_copy(line.substr(0, eq));
    const auto* opt = sub->get_option_no_throw(key);
    if (opt == nullptr || key == "--config") continue;
    out.push_back(key);
    out.push_back(CLI::detail::trim_copy(line.substr(eq + 1)));
  }
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

void add_grid(CLI::App* sub, GridOptions& g) {
  sub->add_option("--grid", g.preset, "Resolution preset")->check(CLI::IsMember({"desk", "paper"}))->capture_default_str();
  sub->add_option("--rows", g.rows, "Lidar rows N (0 keeps the preset)");
  sub->add_option("--cols", g.cols, "Lidar columns M (0 keeps the preset)");
  sub->add_option("--height", g.height, "Image height H (0 keeps the preset)");
  sub->add_option("--width", g.width, "Image width W (0 keeps the preset)");
}

void add_net(CLI::App* sub, NetOptions& n) {
  add_grid(sub, n.grid);
  sub->add_option("--base", n.base_channels, "Base channel count (0 keeps the preset)");
  sub->add_option("--range-scale", n.range_scale, "Input range scale")->capture_default_str();
  sub->add_option("--range-shift", n.range_shift, "Input range shift")->capture_default_str();
  sub->add_option("--refl-scale", n.refl_scale, "Input reflectivity scale")->capture_default_str();
  sub->add_option("--refl-shift", n.refl_shift, "Input reflectivity shift")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dense optical flow from sparse lidar scans"};
  app.set_version_flag("--version", std::string("lidarflow ") + LIDARFLOW_VERSION);
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  GridOptions project_grid;
  std::string project_scan, project_out;
  auto* project = subcommand(app, "project", "Project a raw scan onto the lidar grid (LRI1)");
  project->add_option("scan", project_scan, "Raw scan (.bin, float32 x y z reflectivity)")->required();
  project->add_option("-o,--out", project_out, "Output range image (.lri)")->required();
  add_grid(project, project_grid);

  GridOptions gt_grid;
  std::string gt_scan, gt_flow, gt_out;
  auto* make_gt = subcommand(app, "make-gt", "Sparse lidar-grid ground truth from a scan and dense flow");
  make_gt->add_option("scan", gt_scan, "Raw scan of the first frame")->required();
  make_gt->add_option("flow", gt_flow, "Dense image flow (.flo or KITTI .png)")->required();
  make_gt->add_option("-o,--out", gt_out, "Output N x M KITTI flow PNG")->required();
  add_grid(make_gt, gt_grid);

  SynthOptions so;
  std::string synth_out;
  auto* synth = subcommand(app, "synth", "Generate a synthetic dataset");
  synth->add_option("-o,--out", synth_out, "Dataset directory")->required();
  add_grid(synth, so.grid);
  synth->add_option("--train", so.n_train, "Training samples")->capture_default_str();
  synth->add_option("--val", so.n_val, "Validation samples")->capture_default_str();
  synth->add_option("--test", so.n_test, "Test samples")->capture_default_str();
  synth->add_option("--seed", so.seed, "Base seed")->capture_default_str();
  synth->add_option("--objects", so.objects, "Moving objects per scene")->capture_default_str();
  synth->add_option("--background-max", so.background_max, "Max background translation (px)")->capture_default_str();
  synth->add_option("--object-translation-max", so.object_translation_max, "Max object translation (px)")
      ->capture_default_str();
  synth->add_option("--object-affine-max", so.object_affine_max, "Max object flow gradient")->capture_default_str();
  synth->add_option("--dropout", so.dropout, "Lidar dropout probability")->capture_default_str();

  TrainOptions to;
  std::string train_data, train_out, train_resume;
  auto* train = subcommand(app, "train", "Train the network");
  train->add_option("--data", train_data, "Dataset directory")->required();
  train->add_option("--split", to.split, "Manifest split")->capture_default_str();
  train->add_option("-o,--out", train_out, "Run directory")->required();
  add_net(train, to.net);
  train->add_option("--iters", to.iters, "Total iterations")->capture_default_str();
  train->add_option("--batch", to.batch, "Batch size")->capture_default_str();
  train->add_option("--lr", to.lr, "Initial learning rate")->capture_default_str();
  train->add_option("--lr-hold", to.lr_hold, "Iterations before the first halving")->capture_default_str();
  train->add_option("--lr-half-every", to.lr_half_every, "Halving period")->capture_default_str();
  train->add_option("--flip", to.flip, "Horizontal flip probability")->capture_default_str();
  train->add_option("--clip", to.clip, "Global gradient norm cap (0 disables)")->capture_default_str();
  train->add_option("--seed", to.seed, "Seed for init, batches and augmentation")->capture_default_str();
  train->add_option("--checkpoint-every", to.checkpoint_every, "Checkpoint period (0: final only)");
  train->add_option("--threads", to.threads, "Worker threads (0: LIDARFLOW_THREADS or all cores)");
  train->add_option("--precision", to.precision, "Arithmetic precision")
      ->check(CLI::IsMember({"float", "double"}))
      ->capture_default_str();
  train->add_option("--resume", train_resume, "Checkpoint to resume from");
  train->add_flag("-q,--quiet", to.quiet, "No progress lines");

  InferOptions io;
  std::string ckpt, scan_t, scan_t1, infer_out, color, infer_data, out_dir;
  auto* infer = subcommand(app, "infer", "Predict dense flow for a scan pair or a dataset split");
  add_net(infer, io.net);
  infer->add_option("--checkpoint", ckpt, "Trained weights (.lfw)");
  infer->add_flag("--zero-stub", io.zero_stub, "Predict zero flow without a network");
  infer->add_option("--scan-t", scan_t, "First frame (.bin scan or .lri)");
  infer->add_option("--scan-t1", scan_t1, "Second frame (.bin scan or .lri)");
  infer->add_option("-o,--out", infer_out, "Output .flo");
  infer->add_option("--color", color, "Colour-coded PPM (default: next to --out)");
  infer->add_option("--data", infer_data, "Dataset directory (batch mode)");
  infer->add_option("--split", io.split, "Manifest split (batch mode)")->capture_default_str();
  infer->add_option("--out-dir", out_dir, "Prediction directory (batch mode)");

  EvalOptions eo;
  std::string pred_dir, gt_dir, csv;
  auto* eval = subcommand(app, "eval", "Score predicted flow against ground truth");
  eval->add_option("--pred", pred_dir, "Directory of <id>.flo predictions")->required();
  eval->add_option("--gt", gt_dir, "Directory with flow_occ/, flow_noc/ and obj_map/")->required();
  eval->add_option("--csv", csv, "Also write the scores as CSV");

  VizOptions vo;
  std::string viz_in, viz_out;
  auto* viz = subcommand(app, "viz", "Colour-code a flow field");
  viz->add_option("flow", viz_in, "Flow (.flo or KITTI .png)")->required();
  viz->add_option("-o,--out", viz_out, "Image (.ppm or .png)")->required();
  viz->add_option("--max", vo.max_mag, "Saturation magnitude (0: automatic)");

  try {
    auto args = expand_config(app, std::vector<std::string>(argv + 1, argv + argc));
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const Error& e) {
    std::cerr << "lidarflow: " << e.what() << '\n';
    return kExitInput;
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }

  try {
    if (*project) return cmd_project(project_scan, project_out, project_grid);
    if (*make_gt) return cmd_make_gt(gt_scan, gt_flow, gt_out, gt_grid);
    if (*synth) {
      so.out = synth_out;
      return cmd_synth(so);
    }
    if (*train) {
      to.data = train_data;
      to.out = train_out;
      to.resume = train_resume;
      return cmd_train(to);
    }
    if (*infer) {
      io.checkpoint = ckpt;
      io.scan_t = scan_t;
      io.scan_t1 = scan_t1;
      io.out = infer_out;
      io.color = color;
      io.data = infer_data;
      io.out_dir = out_dir;
      return cmd_infer(io);
    }
    if (*eval) {
      eo.pred_dir = pred_dir;
      eo.gt_dir = gt_dir;
      eo.csv = csv;
      return cmd_eval(eo);
    }
    if (*viz) {
      vo.flow = viz_in;
      vo.out = viz_out;
      return cmd_viz(vo);
    }
  } catch (const NumericalError& e) {
    std::cerr << "lidarflow: numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "lidarflow: " << e.what() << '\n';
    return kExitInput;
  } catch (const Error& e) {
    std::cerr << "lidarflow: " << e.what() << '\n';
    return kExitInput;
  }
  return kExitInput;
}
